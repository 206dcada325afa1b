#include "hdmap/ad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Core>

namespace hdmap::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Idx = Eigen::Index;

// Grad buffer of a parent, or nullptr when it does not take gradients.
double* grad_of(Node& self, std::size_t parent) {
  Node& p = *self.parents[parent];
  return p.requires_grad ? p.grad.data() : nullptr;
}

const std::vector<double>& value_of(Node& self, std::size_t parent) {
  return self.parents[parent]->value;
}

void require(bool ok, const std::string& what) {
  if (!ok) {
    throw MapError(what);
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require(t.defined() && t.rank() == rank,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
              (t.defined() ? shape_string(t.shape()) : std::string("undefined")));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}

template <typename F>
Tensor unary(const Tensor& x, F&& fwd, std::function<void(Node&)> bwd) {
  std::vector<double> out(x.numel());
  auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = fwd(in[i]);
  }
  return make_result(x.shape(), std::move(out), {x}, std::move(bwd));
}

double stable_sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimension mismatch " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
  std::vector<double> out(m * n);
  MutMap(out.data(), Idx(m), Idx(n)).noalias() =
      ConstMap(a.values().data(), Idx(m), Idx(k)) * ConstMap(b.values().data(), Idx(k), Idx(n));
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    ConstMap g(self.grad.data(), Idx(m), Idx(n));
    if (double* ga = grad_of(self, 0)) {
      MutMap(ga, Idx(m), Idx(k)).noalias() +=
          g * ConstMap(value_of(self, 1).data(), Idx(k), Idx(n)).transpose();
    }
    if (double* gb = grad_of(self, 1)) {
      MutMap(gb, Idx(k), Idx(n)).noalias() +=
          ConstMap(value_of(self, 0).data(), Idx(m), Idx(k)).transpose() * g;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  require(b.dim(1) == k, "matmul_nt: inner dimension mismatch " + shape_string(a.shape()) +
                             " x " + shape_string(b.shape()) + "^T");
  std::vector<double> out(m * n);
  MutMap(out.data(), Idx(m), Idx(n)).noalias() =
      ConstMap(a.values().data(), Idx(m), Idx(k)) *
      ConstMap(b.values().data(), Idx(n), Idx(k)).transpose();
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    ConstMap g(self.grad.data(), Idx(m), Idx(n));
    if (double* ga = grad_of(self, 0)) {
      MutMap(ga, Idx(m), Idx(k)).noalias() += g * ConstMap(value_of(self, 1).data(), Idx(n), Idx(k));
    }
    if (double* gb = grad_of(self, 1)) {
      MutMap(gb, Idx(n), Idx(k)).noalias() +=
          g.transpose() * ConstMap(value_of(self, 0).data(), Idx(m), Idx(k));
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.defined() && (x.rank() == 1 || x.rank() == 2), "linear: input must be rank 1 or 2");
  require_rank(weight, 2, "linear");
  const bool vec = x.rank() == 1;
  const std::size_t m = vec ? 1 : x.dim(0);
  const std::size_t k = vec ? x.dim(0) : x.dim(1);
  const std::size_t n = weight.dim(1);
  require(weight.dim(0) == k, "linear: input width " + std::to_string(k) +
                                  " does not match weight " + shape_string(weight.shape()));
  require(bias.defined() && bias.rank() == 1 && bias.dim(0) == n,
          "linear: bias must have shape [" + std::to_string(n) + "]");
  std::vector<double> out(m * n);
  MutMap o(out.data(), Idx(m), Idx(n));
  o.noalias() = ConstMap(x.values().data(), Idx(m), Idx(k)) *
                ConstMap(weight.values().data(), Idx(k), Idx(n));
  o.rowwise() += ConstMap(bias.values().data(), 1, Idx(n)).row(0);
  Shape shape = vec ? Shape{n} : Shape{m, n};
  return make_result(std::move(shape), std::move(out), {x, weight, bias}, [m, k, n](Node& self) {
    ConstMap g(self.grad.data(), Idx(m), Idx(n));
    if (double* gx = grad_of(self, 0)) {
      MutMap(gx, Idx(m), Idx(k)).noalias() +=
          g * ConstMap(value_of(self, 1).data(), Idx(k), Idx(n)).transpose();
    }
    if (double* gw = grad_of(self, 1)) {
      MutMap(gw, Idx(k), Idx(n)).noalias() +=
          ConstMap(value_of(self, 0).data(), Idx(m), Idx(k)).transpose() * g;
    }
    if (double* gb = grad_of(self, 2)) {
      MutMap(gb, 1, Idx(n)) += g.colwise().sum();
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] + bv[i];
  }
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (double* g = grad_of(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          g[i] += self.grad[i];
        }
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] - bv[i];
  }
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i];
      }
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] -= self.grad[i];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] * bv[i];
  }
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& bv = value_of(self, 1);
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * bv[i];
      }
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * av[i];
      }
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * s;
      }
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const auto& in = value_of(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (in[i] > 0.0) {
          g[i] += self.grad[i];
        }
      }
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double s = self.value[i];
        g[i] += self.grad[i] * s * (1.0 - s);
      }
    }
  });
}

Tensor abs(const Tensor& x) {
  return unary(x, [](double v) { return std::fabs(v); }, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const auto& in = value_of(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (in[i] > 0.0) {
          g[i] += self.grad[i];
        } else if (in[i] < 0.0) {
          g[i] -= self.grad[i];
        }
      }
    }
  });
}

Tensor affine_cols(const Tensor& x, std::span<const double> col_scale,
                   std::span<const double> col_shift) {
  require_rank(x, 2, "affine_cols");
  const std::size_t m = x.dim(0), k = x.dim(1);
  require(col_scale.size() == k && col_shift.size() == k, "affine_cols: column count mismatch");
  std::vector<double> sc(col_scale.begin(), col_scale.end());
  std::vector<double> out(m * k);
  auto in = x.values();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      out[r * k + c] = in[r * k + c] * col_scale[c] + col_shift[c];
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [sc = std::move(sc), m, k](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < k; ++c) {
          g[r * k + c] += self.grad[r * k + c] * sc[c];
        }
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  auto in = x.values();
  const double total = std::accumulate(in.begin(), in.end(), 0.0);
  return make_result({}, {total}, {x}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double up = self.grad[0];
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) {
        g[i] += up;
      }
    }
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean: empty tensor");
  auto in = x.values();
  const double n = static_cast<double>(in.size());
  const double total = std::accumulate(in.begin(), in.end(), 0.0);
  return make_result({}, {total / n}, {x}, [n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double up = self.grad[0] / n;
      const std::size_t count = self.parents[0]->value.size();
      for (std::size_t i = 0; i < count; ++i) {
        g[i] += up;
      }
    }
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require(a.numel() == 1 && b.numel() == 1, "minimum: scalar inputs required");
  const bool pick_a = a.item() <= b.item();
  return make_result({}, {pick_a ? a.item() : b.item()}, {a, b}, [pick_a](Node& self) {
    if (double* g = grad_of(self, pick_a ? 0 : 1)) {
      g[0] += self.grad[0];
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  auto in = x.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = in.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      o[c] = std::exp(row[c] - mx);
      z += o[c];
    }
    for (std::size_t c = 0; c < n; ++c) {
      o[c] /= z;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [m, n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < m; ++r) {
        const double* y = self.value.data() + r * n;
        const double* gy = self.grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          dot += gy[c] * y[c];
        }
        for (std::size_t c = 0; c < n; ++c) {
          g[r * n + c] += y[c] * (gy[c] - dot);
        }
      }
    }
  });
}

Tensor layer_norm_rows(const Tensor& x, double eps) {
  require_rank(x, 2, "layer_norm_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  std::vector<double> inv_std(m);
  auto in = x.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = (row[c] - mu) * inv_std[r];
  }
  return make_result(x.shape(), std::move(out), {x},
                     [m, n, inv_std = std::move(inv_std)](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t r = 0; r < m; ++r) {
        const double* y = self.value.data() + r * n;
        const double* gy = self.grad.data() + r * n;
        double mean_g = 0.0, mean_gy = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          mean_g += gy[c];
          mean_gy += gy[c] * y[c];
        }
        mean_g *= inv_n;
        mean_gy *= inv_n;
        for (std::size_t c = 0; c < n; ++c) {
          g[r * n + c] += inv_std[r] * (gy[c] - mean_g - y[c] * mean_gy);
        }
      }
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_rank(x, 2, "log_softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  auto in = x.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = in.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      z += std::exp(row[c] - mx);
    }
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) {
      out[r * n + c] = row[c] - lse;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [m, n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < m; ++r) {
        const double* y = self.value.data() + r * n;
        const double* gy = self.grad.data() + r * n;
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          total += gy[c];
        }
        for (std::size_t c = 0; c < n; ++c) {
          g[r * n + c] += gy[c] - std::exp(y[c]) * total;
        }
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t m = logits.dim(0), k = logits.dim(1);
  require(targets.size() == m && m > 0, "cross_entropy: need one target per row");
  for (int t : targets) {
    require(t >= 0 && static_cast<std::size_t>(t) < k, "cross_entropy: target out of range");
  }
  Tensor logp = log_softmax_rows(logits);
  std::vector<double> pick(m * k, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    pick[r * k + static_cast<std::size_t>(targets[r])] = -1.0 / static_cast<double>(m);
  }
  return sum(mul(logp, Tensor::constant(logits.shape(), std::move(pick))));
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i];
      }
    }
  });
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.numel()}); }

Tensor concat0(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat0: no inputs");
  Shape tail(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
  require(parts[0].rank() >= 1, "concat0: inputs must have rank >= 1");
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<Tensor> parents;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    require(p.rank() >= 1 && Shape(p.shape().begin() + 1, p.shape().end()) == tail,
            "concat0: trailing shapes differ");
    offsets.push_back(out.size());
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p);
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result(std::move(shape), std::move(out), std::move(parents),
                     [offsets = std::move(offsets)](Node& self) {
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                         if (double* g = grad_of(self, p)) {
                           const std::size_t n = self.parents[p]->value.size();
                           for (std::size_t i = 0; i < n; ++i) {
                             g[i] += self.grad[offsets[p] + i];
                           }
                         }
                       }
                     });
}

Tensor stack(std::span<const Tensor> parts) {
  require(!parts.empty(), "stack: no inputs");
  std::vector<Tensor> lifted;
  lifted.reserve(parts.size());
  for (const Tensor& p : parts) {
    require(p.shape() == parts[0].shape(), "stack: shapes differ");
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    lifted.push_back(reshape(p, std::move(s)));
  }
  return concat0(lifted);
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  require(a.dim(0) == b.dim(0), "concat_cols: row count mismatch");
  const std::size_t m = a.dim(0), ca = a.dim(1), cb = b.dim(1), c = ca + cb;
  std::vector<double> out(m * c);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * c);
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * c + ca);
  }
  return make_result({m, c}, std::move(out), {a, b}, [m, ca, cb, c](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < ca; ++j) {
          g[r * ca + j] += self.grad[r * c + j];
        }
      }
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < cb; ++j) {
          g[r * cb + j] += self.grad[r * c + ca + j];
        }
      }
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require(x.rank() >= 1 && begin + count <= x.dim(0), "slice_rows: range out of bounds");
  const std::size_t stride = x.numel() / x.dim(0);
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                          x.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
  Shape shape = x.shape();
  shape[0] = count;
  return make_result(std::move(shape), std::move(out), {x}, [begin, stride](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[begin * stride + i] += self.grad[i];
      }
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require(x.rank() >= 1, "gather_rows: rank >= 1 required");
  const std::size_t stride = x.numel() / std::max<std::size_t>(x.dim(0), 1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out;
  out.reserve(idx.size() * stride);
  auto in = x.values();
  for (std::size_t r : idx) {
    require(r < x.dim(0), "gather_rows: row index out of range");
    out.insert(out.end(), in.begin() + static_cast<std::ptrdiff_t>(r * stride),
               in.begin() + static_cast<std::ptrdiff_t>((r + 1) * stride));
  }
  Shape shape = x.shape();
  shape[0] = idx.size();
  return make_result(std::move(shape), std::move(out), {x}, [idx = std::move(idx), stride](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t k = 0; k < idx.size(); ++k) {
        for (std::size_t j = 0; j < stride; ++j) {
          g[idx[k] * stride + j] += self.grad[k * stride + j];
        }
      }
    }
  });
}

Tensor repeat_rows(const Tensor& x, std::size_t n) {
  require(x.rank() == 1 || (x.rank() == 2 && x.dim(0) == 1), "repeat_rows: expects [d] or [1,d]");
  const std::size_t d = x.numel();
  std::vector<double> out(n * d);
  auto in = x.values();
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(in.begin(), in.end(), out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return make_result({n, d}, std::move(out), {x}, [n, d](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          g[j] += self.grad[r * d + j];
        }
      }
    }
  });
}

Tensor repeat_each_row(const Tensor& x, std::size_t k) {
  require_rank(x, 2, "repeat_each_row");
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> out(n * k * c);
  auto in = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      std::copy_n(in.data() + i * c, c, out.data() + (i * k + j) * c);
    }
  }
  return make_result({n * k, c}, std::move(out), {x}, [n, k, c](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t f = 0; f < c; ++f) {
            g[i * c + f] += self.grad[(i * k + j) * c + f];
          }
        }
      }
    }
  });
}

Tensor tile_rows(const Tensor& x, std::size_t n) {
  require_rank(x, 2, "tile_rows");
  const std::size_t k = x.dim(0), c = x.dim(1);
  std::vector<double> out(n * k * c);
  auto in = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(in.begin(), in.end(), out.begin() + static_cast<std::ptrdiff_t>(i * k * c));
  }
  return make_result({n * k, c}, std::move(out), {x}, [n, k, c](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k * c; ++j) {
          g[j] += self.grad[i * k * c + j];
        }
      }
    }
  });
}

Tensor group_mean_rows(const Tensor& x, std::size_t k) {
  require_rank(x, 2, "group_mean_rows");
  require(k >= 1 && x.dim(0) % k == 0, "group_mean_rows: row count not a multiple of group size");
  const std::size_t n = x.dim(0) / k, c = x.dim(1);
  std::vector<double> out(n * c, 0.0);
  auto in = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t f = 0; f < c; ++f) {
        out[i * c + f] += in[(i * k + j) * c + f];
      }
    }
  }
  const double inv = static_cast<double>(k);
  for (double& v : out) {
    v /= inv;
  }
  return make_result({n, c}, std::move(out), {x}, [n, k, c](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double kd = static_cast<double>(k);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t f = 0; f < c; ++f) {
            g[(i * k + j) * c + f] += self.grad[i * c + f] / kd;
          }
        }
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  require_rank(x, 3, "conv2d");
  require_rank(kernel, 4, "conv2d");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = kernel.dim(0), ks = kernel.dim(2);
  require(kernel.dim(1) == cin, "conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                                    " input channels, got " + std::to_string(cin));
  require(kernel.dim(3) == ks && ks % 2 == 1, "conv2d: kernel must be square with odd size");
  const bool has_bias = bias.defined();
  if (has_bias) {
    require(bias.rank() == 1 && bias.dim(0) == cout, "conv2d: bias must have shape [c_out]");
  }
  const auto pad = static_cast<std::ptrdiff_t>(ks / 2);
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  auto xv = x.values();
  auto kv = kernel.values();
  std::vector<double> out(cout * h * w, 0.0);
  for (std::size_t o = 0; o < cout; ++o) {
    const double b0 = has_bias ? bias.values()[o] : 0.0;
    for (std::ptrdiff_t i = 0; i < H; ++i) {
      for (std::ptrdiff_t j = 0; j < W; ++j) {
        double acc = b0;
        for (std::size_t c = 0; c < cin; ++c) {
          for (std::ptrdiff_t u = 0; u < static_cast<std::ptrdiff_t>(ks); ++u) {
            const std::ptrdiff_t si = i + u - pad;
            if (si < 0 || si >= H) continue;
            for (std::ptrdiff_t v = 0; v < static_cast<std::ptrdiff_t>(ks); ++v) {
              const std::ptrdiff_t sj = j + v - pad;
              if (sj < 0 || sj >= W) continue;
              acc += kv[((o * cin + c) * ks + u) * ks + v] * xv[(c * h + si) * w + sj];
            }
          }
        }
        out[(o * h + i) * w + j] = acc;
      }
    }
  }
  std::vector<Tensor> parents{x, kernel};
  if (has_bias) {
    parents.push_back(bias);
  }
  return make_result({cout, h, w}, std::move(out), std::move(parents),
                     [cin, cout, h, w, ks, pad, H, W, has_bias](Node& self) {
    const auto& xv = value_of(self, 0);
    const auto& kv = value_of(self, 1);
    double* gx = grad_of(self, 0);
    double* gk = grad_of(self, 1);
    double* gb = has_bias ? grad_of(self, 2) : nullptr;
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::ptrdiff_t i = 0; i < H; ++i) {
        for (std::ptrdiff_t j = 0; j < W; ++j) {
          const double up = self.grad[(o * h + i) * w + j];
          if (gb) gb[o] += up;
          for (std::size_t c = 0; c < cin; ++c) {
            for (std::ptrdiff_t u = 0; u < static_cast<std::ptrdiff_t>(ks); ++u) {
              const std::ptrdiff_t si = i + u - pad;
              if (si < 0 || si >= H) continue;
              for (std::ptrdiff_t v = 0; v < static_cast<std::ptrdiff_t>(ks); ++v) {
                const std::ptrdiff_t sj = j + v - pad;
                if (sj < 0 || sj >= W) continue;
                const std::size_t ki = ((o * cin + c) * ks + u) * ks + v;
                const std::size_t xi = (c * h + si) * w + sj;
                if (gx) gx[xi] += kv[ki] * up;
                if (gk) gk[ki] += xv[xi] * up;
              }
            }
          }
        }
      }
    }
  });
}

namespace {

struct Tap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

// Align-corners source taps for each output index.
std::vector<Tap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src = out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) /
                                     static_cast<double>(out - 1)
                               : 0.0;
    const auto lo = std::min(static_cast<std::size_t>(std::floor(src)), in - 1);
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, std::size_t rows, std::size_t cols) {
  require_rank(x, 3, "bilinear_upsample");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(rows >= h && cols >= w, "bilinear_upsample: target smaller than input");
  require((rows == h || h >= 2) && (cols == w || w >= 2),
          "bilinear_upsample: need at least 2 source samples along an upsampled axis");
  auto ty = resize_taps(h, rows);
  auto tx = resize_taps(w, cols);
  auto in = x.values();
  std::vector<double> out(c * rows * cols);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = in.data() + ch * h * w;
    for (std::size_t i = 0; i < rows; ++i) {
      const Tap& a = ty[i];
      for (std::size_t j = 0; j < cols; ++j) {
        const Tap& b = tx[j];
        const double top = src[a.lo * w + b.lo] + b.frac * (src[a.lo * w + b.hi] - src[a.lo * w + b.lo]);
        const double bot = src[a.hi * w + b.lo] + b.frac * (src[a.hi * w + b.hi] - src[a.hi * w + b.lo]);
        out[(ch * rows + i) * cols + j] = top + a.frac * (bot - top);
      }
    }
  }
  return make_result({c, rows, cols}, std::move(out), {x},
                     [c, h, w, rows, cols, ty = std::move(ty), tx = std::move(tx)](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* dst = g + ch * h * w;
      for (std::size_t i = 0; i < rows; ++i) {
        const Tap& a = ty[i];
        for (std::size_t j = 0; j < cols; ++j) {
          const Tap& b = tx[j];
          const double up = self.grad[(ch * rows + i) * cols + j];
          const double top = up * (1.0 - a.frac);
          const double bot = up * a.frac;
          dst[a.lo * w + b.lo] += top * (1.0 - b.frac);
          dst[a.lo * w + b.hi] += top * b.frac;
          dst[a.hi * w + b.lo] += bot * (1.0 - b.frac);
          dst[a.hi * w + b.hi] += bot * b.frac;
        }
      }
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  require(logits.numel() > 0, "bce_with_logits: empty input");
  auto z = logits.values();
  auto t = targets.values();
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    require(t[i] >= 0.0 && t[i] <= 1.0, "bce_with_logits: target outside [0,1]");
    total += std::max(z[i], 0.0) - z[i] * t[i] + std::log1p(std::exp(-std::fabs(z[i])));
  }
  const double n = static_cast<double>(z.size());
  return make_result({}, {total / n}, {logits, targets}, [n](Node& self) {
    const auto& z = value_of(self, 0);
    const auto& t = value_of(self, 1);
    const double up = self.grad[0] / n;
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < z.size(); ++i) {
        g[i] += up * (stable_sigmoid(z[i]) - t[i]);
      }
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < z.size(); ++i) {
        g[i] -= up * z[i];
      }
    }
  });
}

Tensor detach(const Tensor& x) {
  return Tensor::constant(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
}

Tensor gradient_weaken(const Tensor& x, double c) {
  require(c >= 0.0 && c <= 1.0, "gradient_weaken: coefficient must lie in [0,1]");
  const double keep = 1.0 - c;
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(x.shape(), std::move(out), {x}, [keep](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += keep * self.grad[i];
      }
    }
  });
}

}  // namespace hdmap::ad
