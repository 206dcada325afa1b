#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "hdmap/geometry.hpp"

namespace hdmap {

// {"extent":[x_min,x_max,y_min,y_max],
//  "instances":[{"class_id":int,"points":[[x,y],...]}]}
nlohmann::json scene_to_json(const MapScene& scene);
MapScene scene_from_json(const nlohmann::json& doc);

void write_scene(const std::filesystem::path& path, const MapScene& scene);
MapScene read_scene(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace hdmap
