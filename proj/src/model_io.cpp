#include "mtl/model_io.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include "mtl/errors.hpp"
#include "mtl/json_util.hpp"

namespace mtl {

namespace {

using nlohmann::json;

AuxTowerSpec aux_from_json(const json& j) {
  require_keys(j, {"kind", "pool", "b", "temperature"}, "aux tower");
  AuxTowerSpec a;
  const std::string kind = get_required<std::string>(j, "kind", "aux tower");
  if (kind == "none") {
    a.kind = AuxKind::kNone;
  } else if (kind == "fc") {
    a.kind = AuxKind::kFc;
  } else if (kind == "avgpool") {
    a.kind = AuxKind::kAvgPool;
    a.pool = get_required<std::size_t>(j, "pool", "avgpool aux");
  } else if (kind == "bottleneck") {
    a.kind = AuxKind::kBottleneck;
    a.bottleneck = get_required<std::size_t>(j, "b", "bottleneck aux");
  } else if (kind == "mirror") {
    a.kind = AuxKind::kMirror;
  } else {
    throw ConfigError("unknown aux kind \"" + kind + "\"");
  }
  a.temperature = get_or(j, "temperature", "aux tower", 1.0);
  return a;
}

json aux_to_json(const AuxTowerSpec& a) {
  json j;
  switch (a.kind) {
    case AuxKind::kNone:
      j["kind"] = "none";
      break;
    case AuxKind::kFc:
      j["kind"] = "fc";
      break;
    case AuxKind::kAvgPool:
      j["kind"] = "avgpool";
      j["pool"] = a.pool;
      break;
    case AuxKind::kBottleneck:
      j["kind"] = "bottleneck";
      j["b"] = a.bottleneck;
      break;
    case AuxKind::kMirror:
      j["kind"] = "mirror";
      break;
  }
  j["temperature"] = a.temperature;
  return j;
}

HeadSpec head_from_json(const json& j) {
  require_keys(j, {"kind", "dim"}, "task head");
  HeadSpec h;
  const std::string kind = get_required<std::string>(j, "kind", "task head");
  if (kind == "regression") {
    h.kind = HeadKind::kRegression;
  } else if (kind == "classification") {
    h.kind = HeadKind::kClassification;
  } else {
    throw ConfigError("unknown head kind \"" + kind + "\"");
  }
  h.dim = get_required<std::size_t>(j, "dim", "task head");
  return h;
}

SharedLayerSpec layer_from_json(const json& j) {
  require_keys(j, {"dense", "conv"}, "shared layer");
  SharedLayerSpec l;
  if (j.contains("dense")) {
    l.kind = SharedLayerSpec::Kind::kDense;
    l.width = get_required<std::size_t>(j, "dense", "shared layer");
  } else if (j.contains("conv")) {
    const json& c = j.at("conv");
    require_keys(c, {"channels", "kernel", "stride"}, "conv layer");
    l.kind = SharedLayerSpec::Kind::kConv;
    l.channels = get_required<std::size_t>(c, "channels", "conv layer");
    l.kernel = get_required<std::size_t>(c, "kernel", "conv layer");
    l.stride = get_or<std::size_t>(c, "stride", "conv layer", 1);
  } else {
    throw ConfigError("shared layer must be {\"dense\": w} or {\"conv\": {...}}");
  }
  return l;
}

}  // namespace

ArchitectureSpec architecture_preset(std::string_view name) {
  ArchitectureSpec spec;
  auto classification_heads = [&spec] {
    spec.heads.assign(2, HeadSpec{HeadKind::kClassification, 10});
    spec.aux.assign(2, AuxTowerSpec{AuxKind::kFc, 0, 0, 1.0});
  };
  if (name == "synthetic") {
    spec.input_dim = 200;
    spec.shared_layers = {{SharedLayerSpec::Kind::kDense, 250},
                          {SharedLayerSpec::Kind::kDense, 125}};
    spec.tower_widths.assign(2, std::vector<std::size_t>(5, 100));
    spec.heads.assign(2, HeadSpec{HeadKind::kRegression, 1});
    spec.aux.assign(2, AuxTowerSpec{AuxKind::kFc, 0, 0, 1.0});
  } else if (name == "small") {
    spec.input_dim = 1296;
    spec.shared_layers = {{SharedLayerSpec::Kind::kDense, 64}};
    spec.tower_widths.assign(2, std::vector<std::size_t>{32});
    classification_heads();
  } else if (name == "medium") {
    spec.input_image = ImageDims{1, 36, 36};
    SharedLayerSpec c1, c2, d;
    c1.kind = SharedLayerSpec::Kind::kConv;
    c1.channels = 6;
    c1.kernel = 5;
    c1.stride = 2;
    c2.kind = SharedLayerSpec::Kind::kConv;
    c2.channels = 12;
    c2.kernel = 3;
    c2.stride = 2;
    d.kind = SharedLayerSpec::Kind::kDense;
    d.width = 64;
    spec.shared_layers = {c1, c2, d};
    spec.tower_widths.assign(2, std::vector<std::size_t>{64, 32});
    classification_heads();
  } else if (name == "large") {
    spec.input_image = ImageDims{1, 36, 36};
    SharedLayerSpec c1, c2, d;
    c1.kind = SharedLayerSpec::Kind::kConv;
    c1.channels = 8;
    c1.kernel = 5;
    c1.stride = 2;
    c2.kind = SharedLayerSpec::Kind::kConv;
    c2.channels = 16;
    c2.kernel = 3;
    c2.stride = 1;
    d.kind = SharedLayerSpec::Kind::kDense;
    d.width = 128;
    spec.shared_layers = {c1, c2, d};
    spec.tower_widths.assign(2, std::vector<std::size_t>{128, 64, 32});
    classification_heads();
  } else {
    throw ConfigError("unknown architecture preset \"" + std::string(name) + "\"");
  }
  spec.validate();
  return spec;
}

json architecture_to_json(const ArchitectureSpec& spec) {
  json j;
  if (spec.input_image) {
    j["input_image"] = {{"channels", spec.input_image->channels},
                        {"height", spec.input_image->height},
                        {"width", spec.input_image->width}};
  } else {
    j["input_dim"] = spec.input_dim;
  }
  j["shared_layers"] = json::array();
  for (const SharedLayerSpec& l : spec.shared_layers) {
    if (l.kind == SharedLayerSpec::Kind::kDense) {
      j["shared_layers"].push_back({{"dense", l.width}});
    } else {
      j["shared_layers"].push_back(
          {{"conv", {{"channels", l.channels}, {"kernel", l.kernel}, {"stride", l.stride}}}});
    }
  }
  j["towers"] = spec.tower_widths;
  j["heads"] = json::array();
  for (const HeadSpec& h : spec.heads) {
    j["heads"].push_back(
        {{"kind", h.kind == HeadKind::kRegression ? "regression" : "classification"},
         {"dim", h.dim}});
  }
  j["aux"] = json::array();
  for (const AuxTowerSpec& a : spec.aux) j["aux"].push_back(aux_to_json(a));
  return j;
}

ArchitectureSpec architecture_from_json(const json& j) {
  if (j.contains("preset")) {
    require_keys(j, {"preset", "aux", "towers"}, "architecture");
    ArchitectureSpec spec =
        architecture_preset(get_required<std::string>(j, "preset", "architecture"));
    if (j.contains("towers")) {
      spec.tower_widths = get_required<std::vector<std::vector<std::size_t>>>(
          j, "towers", "architecture");
    }
    if (j.contains("aux")) {
      const json& aux = j.at("aux");
      if (!aux.is_array()) throw ConfigError("architecture \"aux\" must be an array");
      spec.aux.clear();
      for (const json& a : aux) spec.aux.push_back(aux_from_json(a));
    }
    spec.validate();
    return spec;
  }
  require_keys(j, {"input_dim", "input_image", "shared_layers", "towers", "heads", "aux"},
               "architecture");
  ArchitectureSpec spec;
  if (j.contains("input_image")) {
    const json& img = j.at("input_image");
    require_keys(img, {"channels", "height", "width"}, "input_image");
    spec.input_image = ImageDims{get_required<std::size_t>(img, "channels", "input_image"),
                                 get_required<std::size_t>(img, "height", "input_image"),
                                 get_required<std::size_t>(img, "width", "input_image")};
  } else {
    spec.input_dim = get_required<std::size_t>(j, "input_dim", "architecture");
  }
  for (const char* key : {"shared_layers", "heads", "aux"}) {
    if (!j.contains(key) || !j.at(key).is_array()) {
      throw ConfigError(std::string("architecture is missing required array \"") + key + "\"");
    }
  }
  for (const json& l : j.at("shared_layers")) spec.shared_layers.push_back(layer_from_json(l));
  spec.tower_widths =
      get_required<std::vector<std::vector<std::size_t>>>(j, "towers", "architecture");
  for (const json& h : j.at("heads")) spec.heads.push_back(head_from_json(h));
  for (const json& a : j.at("aux")) spec.aux.push_back(aux_from_json(a));
  spec.validate();
  return spec;
}

void save_model(const std::string& path, const Model& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  out.write("MTLCKPT1", 8);
  const std::uint32_t count = static_cast<std::uint32_t>(model.params.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const std::string& name = model.names[i];
    const Tensor& p = model.params[i];
    const std::uint32_t nlen = static_cast<std::uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&nlen), 4);
    out.write(name.data(), nlen);
    const std::uint32_t ndim = static_cast<std::uint32_t>(p.ndim());
    out.write(reinterpret_cast<const char*>(&ndim), 4);
    for (std::size_t e : p.shape()) {
      const std::uint64_t extent = e;
      out.write(reinterpret_cast<const char*>(&extent), 8);
    }
    out.write(reinterpret_cast<const char*>(p.data().data()),
              static_cast<std::streamsize>(p.size() * 8));
  }
  if (!out) throw ParseError("short write to " + path);

  std::ofstream side(path + ".json", std::ios::trunc);
  if (!side) throw ParseError("cannot open " + path + ".json for writing");
  side << architecture_to_json(model.spec).dump(2) << '\n';
}

Model load_model(const std::string& path) {
  std::ifstream side(path + ".json");
  if (!side) throw ParseError("cannot open sidecar " + path + ".json");
  json spec_json;
  try {
    side >> spec_json;
  } catch (const json::exception& e) {
    throw ParseError(path + ".json is not valid JSON: " + e.what());
  }
  Model model = build_model(architecture_from_json(spec_json), 0);

  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "MTLCKPT1", 8) != 0) {
    throw ParseError(path + " has bad checkpoint magic at byte 0");
  }
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  if (!in || count != model.params.size()) {
    throw ParseError(path + " holds " + std::to_string(count) + " tensors, architecture needs " +
                     std::to_string(model.params.size()));
  }
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < model.names.size(); ++i) index[model.names[i]] = i;
  std::vector<bool> seen(model.params.size(), false);
  for (std::uint32_t k = 0; k < count; ++k) {
    std::uint32_t nlen = 0;
    in.read(reinterpret_cast<char*>(&nlen), 4);
    std::string name(nlen, '\0');
    in.read(name.data(), nlen);
    std::uint32_t ndim = 0;
    in.read(reinterpret_cast<char*>(&ndim), 4);
    Shape shape(ndim);
    for (std::uint32_t d = 0; d < ndim; ++d) {
      std::uint64_t extent = 0;
      in.read(reinterpret_cast<char*>(&extent), 8);
      shape[d] = extent;
    }
    if (!in) throw ParseError(path + " truncated while reading tensor " + std::to_string(k));
    auto it = index.find(name);
    if (it == index.end()) throw ParseError(path + " has unexpected tensor \"" + name + "\"");
    if (seen[it->second]) throw ParseError(path + " repeats tensor \"" + name + "\"");
    if (shape != model.params[it->second].shape()) {
      throw ParseError(path + " tensor \"" + name + "\" has shape " + shape_str(shape) +
                       ", architecture needs " + shape_str(model.params[it->second].shape()));
    }
    std::vector<double> data(model.params[it->second].size());
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * 8));
    if (!in) throw ParseError(path + " truncated inside tensor \"" + name + "\"");
    model.params[it->second] = Tensor(std::move(shape), std::move(data));
    seen[it->second] = true;
  }
  return model;
}

}  // namespace mtl
