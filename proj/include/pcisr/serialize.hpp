#pragma once

#include <nlohmann/json.hpp>

#include "pcisr/otf.hpp"

// JSON representations used by sidecar metadata, manifests and configs.
namespace pcisr {

inline void to_json(nlohmann::json& j, const Extent2& e) { j = nlohmann::json::array({e.rows, e.cols}); }
inline void from_json(const nlohmann::json& j, Extent2& e) {
  e.rows = j.at(0).get<std::size_t>();
  e.cols = j.at(1).get<std::size_t>();
}

inline void to_json(nlohmann::json& j, const Index2& i) { j = nlohmann::json::array({i.row, i.col}); }
inline void from_json(const nlohmann::json& j, Index2& i) {
  i.row = j.at(0).get<std::size_t>();
  i.col = j.at(1).get<std::size_t>();
}

inline void to_json(nlohmann::json& j, const RegionSpec& r) {
  j = {{"origin", r.origin}, {"size", r.size}, {"detector_origin", r.detector_origin}, {"detector_size", r.detector_size}};
}
inline void from_json(const nlohmann::json& j, RegionSpec& r) {
  r.origin = j.at("origin").get<Index2>();
  r.size = j.at("size").get<Extent2>();
  r.detector_origin = j.at("detector_origin").get<Index2>();
  r.detector_size = j.at("detector_size").get<Extent2>();
}

}  // namespace pcisr
