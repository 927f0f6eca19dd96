#include "arseg/config.hpp"

#include <fstream>
#include <sstream>

#include "arseg/binary_io.hpp"
#include "arseg/errors.hpp"
#include "json.hpp"

namespace arseg::config {

using nlohmann::json;

namespace {

json layers_to_json(const std::vector<backbone::ConvLayer>& layers) {
  json out = json::array();
  for (const auto& l : layers) out.push_back({l.out_channels, l.kernel, l.stride});
  return out;
}

std::vector<backbone::ConvLayer> layers_from_json(const json& j) {
  std::vector<backbone::ConvLayer> out;
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 3) {
      throw FormatError("config: each layer must be [out_channels, kernel, stride]");
    }
    out.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>(), e[2].get<std::size_t>()});
  }
  return out;
}

json arch_to_json(const backbone::BackboneArch& a) {
  return {{"in_channels", a.in_channels},         {"feat", layers_to_json(a.feat)},
          {"task", layers_to_json(a.task)},       {"feature_channels", a.feature_channels},
          {"num_classes", a.num_classes}};
}

backbone::BackboneArch arch_from_json(const json& j) {
  backbone::BackboneArch a;
  a.in_channels = j.value("in_channels", a.in_channels);
  if (j.contains("feat")) a.feat = layers_from_json(j.at("feat"));
  if (j.contains("task")) a.task = layers_from_json(j.at("task"));
  a.feature_channels = j.value("feature_channels", a.feature_channels);
  a.num_classes = j.value("num_classes", a.num_classes);
  a.validate();
  return a;
}

json fusion_to_json(const creff::FusionConfig& f) {
  return {{"variant", creff::variant_name(f.variant)},
          {"neighborhood", f.neighborhood},
          {"global_downsample", f.global_downsample},
          {"direct_connection", f.direct_connection},
          {"qkv_bias", f.qkv_bias}};
}

creff::FusionConfig fusion_from_json(const json& j) {
  creff::FusionConfig f;
  if (j.contains("variant")) f.variant = creff::parse_variant(j.at("variant").get<std::string>());
  f.neighborhood = j.value("neighborhood", f.neighborhood);
  f.global_downsample = j.value("global_downsample", f.global_downsample);
  f.direct_connection = j.value("direct_connection", f.direct_connection);
  f.qkv_bias = j.value("qkv_bias", f.qkv_bias);
  f.validate();
  return f;
}

fst::TrainOptions train_from_json(const json& j) {
  fst::TrainOptions t;
  t.epochs = j.value("epochs", t.epochs);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.momentum = j.value("momentum", t.momentum);
  t.seed = j.value("seed", t.seed);
  t.ignore_index = j.value("ignore_index", t.ignore_index);
  t.shuffle = j.value("shuffle", t.shuffle);
  const std::string loss = j.value("feature_loss", std::string("mse"));
  if (loss == "mse") t.feature_loss = fst::FeatureLoss::Mse;
  else if (loss == "kl") t.feature_loss = fst::FeatureLoss::Kl;
  else throw FormatError("config: feature_loss must be \"mse\" or \"kl\"");
  return t;
}

json train_to_json(const fst::TrainOptions& t) {
  return {{"epochs", t.epochs},
          {"learning_rate", t.learning_rate},
          {"momentum", t.momentum},
          {"seed", t.seed},
          {"feature_loss", t.feature_loss == fst::FeatureLoss::Mse ? "mse" : "kl"},
          {"ignore_index", t.ignore_index},
          {"shuffle", t.shuffle}};
}

json parse(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string(what) + ": " + e.what(), e.byte);
  }
}

std::string read_text(const std::string& path) {
  const auto bytes = io::read_file(path);
  return {bytes.begin(), bytes.end()};
}

void write_text(const std::string& path, const std::string& text) {
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

ModelConfig parse_model_config(const std::string& json_text) {
  const json j = parse(json_text, "model config");
  try {
    ModelConfig c;
    if (j.contains("arch")) c.arch = arch_from_json(j.at("arch"));
    c.lr_scale = j.value("lr_scale", c.lr_scale);
    if (j.contains("fusion")) c.fusion = fusion_from_json(j.at("fusion"));
    if (j.contains("train")) c.train = train_from_json(j.at("train"));
    c.init_seed = j.value("init_seed", c.init_seed);
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

std::string dump_model_config(const ModelConfig& c) {
  const json j = {{"arch", arch_to_json(c.arch)},
                  {"lr_scale", c.lr_scale},
                  {"fusion", fusion_to_json(c.fusion)},
                  {"train", train_to_json(c.train)},
                  {"init_seed", c.init_seed}};
  return j.dump(2);
}

ModelConfig load_model_config(const std::string& path) {
  return parse_model_config(read_text(path));
}

void save_hr(const std::string& path, const backbone::Branch& hr) {
  io::write_file(path, backbone::encode_checkpoint(backbone::flatten(hr.weights, true)));
  write_text(path + ".json", json{{"arch", arch_to_json(hr.arch)}, {"scale", hr.scale}}.dump(2));
}

backbone::Branch load_hr(const std::string& path) {
  const json j = parse(read_text(path + ".json"), "HR checkpoint sidecar");
  backbone::Branch b;
  try {
    b.arch = arch_from_json(j.at("arch"));
    b.scale = j.value("scale", 1.0);
  } catch (const json::exception& e) {
    throw FormatError(std::string("HR checkpoint sidecar: ") + e.what());
  }
  const auto tensors = backbone::decode_checkpoint(io::read_file(path));
  if (tensors.size() != backbone::tensor_count(b.arch, true)) {
    throw FormatError("HR checkpoint holds " + std::to_string(tensors.size()) +
                      " tensors, architecture needs " +
                      std::to_string(backbone::tensor_count(b.arch, true)));
  }
  b.weights = backbone::unflatten(b.arch, tensors, nullptr);
  return b;
}

void save_lr(const std::string& path, const fst::ArModel& m) {
  auto tensors = backbone::flatten(m.lr.weights, false);
  for (auto& t : creff::flatten(m.fusion, m.fusion_weights)) tensors.push_back(std::move(t));
  io::write_file(path, backbone::encode_checkpoint(tensors));
  write_text(path + ".json", json{{"arch", arch_to_json(m.lr.arch)},
                                  {"scale", m.lr.scale},
                                  {"fusion", fusion_to_json(m.fusion)}}
                                 .dump(2));
}

fst::ArModel load_lr(const std::string& path, const backbone::Branch& hr) {
  const json j = parse(read_text(path + ".json"), "LR checkpoint sidecar");
  fst::ArModel m;
  m.hr = hr;
  try {
    m.lr.arch = arch_from_json(j.at("arch"));
    m.lr.scale = j.value("scale", 0.5);
    m.fusion = fusion_from_json(j.at("fusion"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("LR checkpoint sidecar: ") + e.what());
  }
  if (!(m.lr.arch == hr.arch)) {
    throw FormatError("LR checkpoint architecture differs from the HR branch");
  }
  const auto tensors = backbone::decode_checkpoint(io::read_file(path));
  const std::size_t body = backbone::tensor_count(m.lr.arch, false);
  const std::size_t fusion = creff::tensor_count(m.fusion);
  if (tensors.size() != body + fusion) {
    throw FormatError("LR checkpoint holds " + std::to_string(tensors.size()) +
                      " tensors, expected " + std::to_string(body + fusion));
  }
  const std::span<const Tensor> all(tensors);
  m.lr.weights = backbone::unflatten(m.lr.arch, all.first(body), hr.weights.final_conv);
  m.fusion_weights =
      creff::unflatten(m.fusion, m.lr.arch.feature_channels, all.subspan(body));
  return m;
}

}  // namespace arseg::config
