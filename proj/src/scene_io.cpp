#include "hdmap/scene_io.hpp"

#include <fstream>
#include <sstream>

namespace hdmap {

nlohmann::json scene_to_json(const MapScene& scene) {
  nlohmann::json instances = nlohmann::json::array();
  for (const MapInstance& inst : scene.instances) {
    nlohmann::json pts = nlohmann::json::array();
    for (const Point2& p : inst.points) {
      pts.push_back({p.x, p.y});
    }
    instances.push_back({{"class_id", static_cast<int>(inst.class_id)}, {"points", pts}});
  }
  const Extent& e = scene.extent;
  return {{"extent", {e.x_min, e.x_max, e.y_min, e.y_max}}, {"instances", instances}};
}

MapScene scene_from_json(const nlohmann::json& doc) {
  MapScene scene;
  try {
    const auto& ext = doc.at("extent");
    if (!ext.is_array() || ext.size() != 4) {
      throw MapError("scene JSON: extent must have 4 numbers");
    }
    scene.extent = {ext[0].get<double>(), ext[1].get<double>(), ext[2].get<double>(),
                    ext[3].get<double>()};
    for (const auto& item : doc.at("instances")) {
      MapInstance inst;
      inst.class_id = class_from_int(item.at("class_id").get<int>());
      for (const auto& p : item.at("points")) {
        if (!p.is_array() || p.size() != 2) {
          throw MapError("scene JSON: point must be [x, y]");
        }
        inst.points.push_back({p[0].get<double>(), p[1].get<double>()});
      }
      scene.instances.push_back(std::move(inst));
    }
  } catch (const nlohmann::json::exception& e) {
    throw MapError(std::string("scene JSON: ") + e.what());
  }
  return scene;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw MapError("cannot open " + path.string());
  }
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw MapError(path.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw MapError("cannot write " + path.string());
  }
  out << text;
}

void write_scene(const std::filesystem::path& path, const MapScene& scene) {
  write_text_file(path, scene_to_json(scene).dump(2) + "\n");
}

MapScene read_scene(const std::filesystem::path& path) {
  return scene_from_json(read_json_file(path));
}

}  // namespace hdmap
