#pragma once

// Run configuration: a nested JSON document whose shape is fixed by the
// defaults. User files and `key.path=value` overrides are merged onto the
// default tree; keys that do not exist there are rejected.

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fun/trainer.hpp"

namespace fun {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  FunConfig model;
  TrainConfig train;
  DatasetSpec data;
  std::string data_dir;  // empty: generate the dataset from `data`

  void validate() const {
    model.validate();
    train.validate();
    data.scene.validate();
    if (model.bands != data.scene.bands) throw ContractError("config: model.bands differs from data.scene.bands");
    if (model.detection.num_classes != data.scene.num_classes)
      throw ContractError("config: model.detection.num_classes differs from data.scene.num_classes");
    if (train.crop > data.scene.height || train.crop > data.scene.width) throw ContractError("config: crop larger than the scenes");
  }
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& d = m.detection;
  const auto& t = c.train;
  nlohmann::ordered_json j;
  j["model"] = {{"bands", m.bands},
                {"base_channels", m.base_channels},
                {"depths", m.depths},
                {"channel_mult", m.channel_mult},
                {"fsm_kernels", m.fsm_kernels},
                {"bank_size", m.bank_size},
                {"ffn_expansion", m.ffn_expansion},
                {"detection",
                 {{"num_classes", d.num_classes},
                  {"head_channels", d.head_channels},
                  {"range_bounds", d.range_bounds},
                  {"score_threshold", d.score_threshold},
                  {"nms_iou", d.nms_iou},
                  {"max_detections", d.max_detections},
                  {"focal_alpha", d.focal_alpha},
                  {"focal_gamma", d.focal_gamma}}}};
  j["train"] = {{"task", task_name(t.task)},
                {"lr", t.schedule.base_lr},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"eps", t.adam.eps},
                {"weight_decay", t.adam.weight_decay},
                {"steps", t.steps},
                {"warmup", t.schedule.warmup},
                {"milestones", t.schedule.milestones},
                {"decay_factor", t.schedule.factor},
                {"lambda", t.lambda},
                {"batch", t.batch},
                {"crop", t.crop},
                {"noise_sigma", t.noise_sigma},
                {"seed", t.seed},
                {"clip_norm", t.clip_norm},
                {"log_interval", t.log_interval},
                {"eval_interval", t.eval_interval},
                {"checkpoint_interval", t.checkpoint_interval},
                {"eval_scenes", t.eval_scenes}};
  j["data"] = {{"dir", c.data_dir},
               {"seed", c.data.seed},
               {"train_scenes", c.data.train_scenes},
               {"val_scenes", c.data.val_scenes},
               {"mask_density", c.data.mask_density},
               {"dispersion_step", c.data.dispersion_step},
               {"scene", scene_spec_json(c.data.scene)}};
  return j;
}

namespace detail {

inline bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number_unsigned()) return b.is_number_unsigned();
  if (a.is_number_integer()) return b.is_number_integer();
  if (a.is_number()) return b.is_number();
  return a.type() == b.type();
}

/// Copies `src` onto `dst` key by key; `dst` (the default tree) fixes which keys exist.
inline void merge_strict(nlohmann::ordered_json& dst, const nlohmann::json& src, const std::string& path) {
  if (!src.is_object()) throw ConfigError("config: " + (path.empty() ? std::string("document") : path) + " must be an object");
  for (const auto& [key, value] : src.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!dst.contains(key)) throw ConfigError("config: unknown key '" + here + "'");
    auto& slot = dst[key];
    if (slot.is_object()) {
      merge_strict(slot, value, here);
    } else {
      if (!same_kind(slot, value)) throw ConfigError("config: '" + here + "' expects " + std::string(slot.type_name()) + ", got " + value.type_name());
      slot = value;
    }
  }
}

template <class V>
V take(const nlohmann::json& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad value for '" + path + "." + key + "': " + e.what());
  }
}

}  // namespace detail

inline RunConfig from_json(const nlohmann::json& user) {
  nlohmann::ordered_json j = to_json(RunConfig{});
  detail::merge_strict(j, user, "");
  RunConfig c;
  using detail::take;
  const auto& m = j["model"];
  c.model.bands = take<std::size_t>(m, "bands", "model");
  c.model.base_channels = take<std::size_t>(m, "base_channels", "model");
  c.model.depths = take<std::array<std::size_t, 6>>(m, "depths", "model");
  c.model.channel_mult = take<std::array<std::size_t, 6>>(m, "channel_mult", "model");
  c.model.fsm_kernels = take<std::vector<std::size_t>>(m, "fsm_kernels", "model");
  c.model.bank_size = take<std::size_t>(m, "bank_size", "model");
  c.model.ffn_expansion = take<std::size_t>(m, "ffn_expansion", "model");
  const auto& d = m["detection"];
  auto& dc = c.model.detection;
  dc.num_classes = take<std::size_t>(d, "num_classes", "model.detection");
  dc.head_channels = take<std::size_t>(d, "head_channels", "model.detection");
  dc.range_bounds = take<std::vector<double>>(d, "range_bounds", "model.detection");
  dc.score_threshold = take<double>(d, "score_threshold", "model.detection");
  dc.nms_iou = take<double>(d, "nms_iou", "model.detection");
  dc.max_detections = take<std::size_t>(d, "max_detections", "model.detection");
  dc.focal_alpha = take<double>(d, "focal_alpha", "model.detection");
  dc.focal_gamma = take<double>(d, "focal_gamma", "model.detection");

  const auto& t = j["train"];
  auto& tc = c.train;
  try {
    tc.task = parse_task(take<std::string>(t, "task", "train"));
  } catch (const ContractError& e) {
    throw ConfigError(std::string("config: train.task: ") + e.what());
  }
  tc.schedule.base_lr = take<double>(t, "lr", "train");
  tc.adam.beta1 = take<double>(t, "beta1", "train");
  tc.adam.beta2 = take<double>(t, "beta2", "train");
  tc.adam.eps = take<double>(t, "eps", "train");
  tc.adam.weight_decay = take<double>(t, "weight_decay", "train");
  tc.steps = take<std::size_t>(t, "steps", "train");
  tc.schedule.warmup = take<std::size_t>(t, "warmup", "train");
  tc.schedule.milestones = take<std::vector<std::size_t>>(t, "milestones", "train");
  tc.schedule.factor = take<double>(t, "decay_factor", "train");
  tc.lambda = take<double>(t, "lambda", "train");
  tc.batch = take<std::size_t>(t, "batch", "train");
  tc.crop = take<std::size_t>(t, "crop", "train");
  tc.noise_sigma = take<double>(t, "noise_sigma", "train");
  tc.seed = take<std::uint64_t>(t, "seed", "train");
  tc.clip_norm = take<double>(t, "clip_norm", "train");
  tc.log_interval = take<std::size_t>(t, "log_interval", "train");
  tc.eval_interval = take<std::size_t>(t, "eval_interval", "train");
  tc.checkpoint_interval = take<std::size_t>(t, "checkpoint_interval", "train");
  tc.eval_scenes = take<std::size_t>(t, "eval_scenes", "train");
  if (tc.log_interval == 0 || tc.eval_interval == 0 || tc.checkpoint_interval == 0)
    throw ConfigError("config: log, eval and checkpoint intervals must be positive");

  const auto& ds = j["data"];
  c.data_dir = take<std::string>(ds, "dir", "data");
  c.data.seed = take<std::uint64_t>(ds, "seed", "data");
  c.data.train_scenes = take<std::size_t>(ds, "train_scenes", "data");
  c.data.val_scenes = take<std::size_t>(ds, "val_scenes", "data");
  c.data.mask_density = take<double>(ds, "mask_density", "data");
  c.data.dispersion_step = take<std::size_t>(ds, "dispersion_step", "data");
  try {
    c.data.scene = scene_spec_from_json(ds["scene"]);
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

/// Applies `a.b.c=value` to a JSON document. The value is parsed as JSON when
/// possible and taken as a bare string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key.path=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
}

/// File (optional) then overrides, merged onto the defaults.
inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json doc = path.empty() ? nlohmann::json::object() : read_json_file(path);
  for (const auto& o : overrides) apply_override(doc, o);
  return from_json(doc);
}

struct CheckpointModel {
  RunConfig config;
  FunModel<float> model;
  std::size_t step = 0;
};

/// Rebuilds the model recorded in a checkpoint from its embedded config.
inline CheckpointModel load_checkpoint_model(const std::string& path) {
  const TensorContainer c = TensorContainer::load(path);
  nlohmann::json doc = nlohmann::json::parse(c.text("__config"), nullptr, false);
  if (doc.is_discarded()) throw FormatError(path + ": embedded config is not valid JSON");
  CheckpointModel out{from_json(doc), {}, 0};
  out.model = FunModel<float>::build(out.config.model, 0);
  load_parameters(out.model, c);
  out.step = std::stoull(c.text("__step"));
  return out;
}

/// The dataset a run config refers to: loaded from `data.dir`, or regenerated
/// (deterministically) from the data section.
inline Dataset dataset_for(const RunConfig& c) {
  Dataset ds = c.data_dir.empty() ? generate_dataset(c.data) : load_dataset(c.data_dir);
  if (ds.spec.scene.bands != c.model.bands) throw ConfigError("dataset bands differ from model bands");
  return ds;
}

/// Coded aperture of the run's dataset without materializing its scenes.
inline CodedAperture<float> mask_for(const RunConfig& c) {
  if (!c.data_dir.empty()) return load_mask<float>((std::filesystem::path(c.data_dir) / "mask.funh").string());
  return generate_mask(c.data.scene.height, c.data.scene.width, c.data.mask_density, c.data.seed);
}

}  // namespace fun
