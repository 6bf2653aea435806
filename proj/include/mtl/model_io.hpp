#pragma once

#include <json.hpp>
#include <string>
#include <string_view>

#include "mtl/model.hpp"

namespace mtl {

// Named presets: "synthetic" (depth-5 towers over the 200-dim regression
// benchmark), and the image stacks "small" (dense), "medium"/"large"
// (conv-lite) over 36x36 composited digits.
ArchitectureSpec architecture_preset(std::string_view name);

nlohmann::json architecture_to_json(const ArchitectureSpec& spec);

// Accepts either a full spec object or {"preset": name} with optional
// "aux"/"towers" overrides. Unknown keys are errors.
ArchitectureSpec architecture_from_json(const nlohmann::json& j);

// Flat binary container of named parameter tensors plus a JSON sidecar
// (path + ".json") holding the architecture.
void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

}  // namespace mtl
