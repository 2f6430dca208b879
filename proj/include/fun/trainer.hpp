#pragma once

// Multi-task training loop: random crops with per-crop CASSI simulation,
// Charbonnier + detection objective, AdamW with the warmup/multi-step
// schedule, JSON-lines metrics, checkpoints and evaluation.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fun/checkpoint.hpp"
#include "fun/metrics.hpp"
#include "fun/network.hpp"
#include "fun/optim.hpp"
#include "fun/synth.hpp"

namespace fun {

enum class Task { joint, reconstruction, detection };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::joint: return "joint";
    case Task::reconstruction: return "reconstruction";
    case Task::detection: return "detection";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  if (s == "joint") return Task::joint;
  if (s == "reconstruction") return Task::reconstruction;
  if (s == "detection") return Task::detection;
  throw ContractError("unknown task '" + s + "' (joint, reconstruction, detection)");
}

struct TrainConfig {
  ScheduleConfig schedule;
  AdamWConfig adam;
  std::size_t steps = 3000;
  double lambda = 5.0;
  std::size_t batch = 4;
  std::size_t crop = 32;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;
  Task task = Task::joint;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t log_interval = 10;
  std::size_t eval_interval = 500;
  std::size_t checkpoint_interval = 1000;
  std::size_t eval_scenes = 0;  // 0 = the whole split

  void validate() const {
    schedule.validate(steps);
    if (batch == 0) throw ContractError("train: batch size must be positive");
    if (crop == 0 || crop % 8 != 0) throw ContractError("train: crop size must be a positive multiple of 8");
    if (lambda < 0) throw ContractError("train: lambda must be non-negative");
    if (noise_sigma < 0) throw ContractError("train: noise sigma must be non-negative");
    if (task == Task::reconstruction && lambda == 0) throw ContractError("train: reconstruction-only training needs lambda > 0");
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, const std::string& last_good)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) +
                           (last_good.empty() ? "; no checkpoint saved yet" : "; last good checkpoint: " + last_good)),
        step_(step), last_good_(last_good) {}
  std::size_t step() const noexcept { return step_; }
  const std::string& last_good() const noexcept { return last_good_; }

 private:
  std::size_t step_;
  std::string last_good_;
};

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  Tensor<float> input;   // [N,S,S,bands] scaled shift-back
  Tensor<float> target;  // [N,S,S,bands]
  std::vector<std::vector<Annotation>> boxes;
};

inline HsiCube<float> crop_cube(const HsiCube<float>& c, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  HsiCube<float> out(h, w, c.bands());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t b = 0; b < c.bands(); ++b) out.at(i, j, b) = c.at(y0 + i, x0 + j, b);
  return out;
}

inline CodedAperture<float> crop_mask(const CodedAperture<float>& m, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Tensor<float> t({h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) t[i * w + j] = m.at(y0 + i, x0 + j);
  return CodedAperture<float>(std::move(t));
}

/// Boxes shifted into the crop frame and clipped; anything narrower or shorter
/// than `min_side` pixels after clipping is dropped.
inline std::vector<Annotation> crop_annotations(const std::vector<Annotation>& anns, double y0, double x0, double h, double w,
                                                double min_side = 2.0) {
  std::vector<Annotation> out;
  for (const auto& a : anns) {
    Box b{std::clamp(a.box.x0 - x0, 0.0, w), std::clamp(a.box.y0 - y0, 0.0, h), std::clamp(a.box.x1 - x0, 0.0, w),
          std::clamp(a.box.y1 - y0, 0.0, h)};
    if (b.width() < min_side || b.height() < min_side) continue;
    out.push_back({a.class_id, b});
  }
  return out;
}

inline void stack_into(Tensor<float>& dst, std::size_t n, const Tensor<float>& src) {
  std::copy(src.ptr(), src.ptr() + src.numel(), dst.ptr() + n * src.numel());
}

/// Draws a batch from `scenes` using only `rng`, so a restored RNG state
/// replays the same batches.
inline Batch sample_batch(const std::vector<SceneRecord>& scenes, const Dataset& ds, std::size_t batch, std::size_t crop,
                          double sigma, Rng& rng) {
  if (scenes.empty()) throw ContractError("sample_batch: empty split");
  const std::size_t bands = ds.spec.scene.bands;
  Batch out{Tensor<float>({batch, crop, crop, bands}), Tensor<float>({batch, crop, crop, bands}), {}};
  for (std::size_t n = 0; n < batch; ++n) {
    const auto& rec = scenes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(scenes.size()) - 1))];
    const HsiCube<float>& cube = rec.scene.cube;
    if (cube.height() < crop || cube.width() < crop) throw ContractError("sample_batch: crop larger than scene " + rec.id);
    const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cube.height() - crop)));
    const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cube.width() - crop)));
    const std::uint64_t noise_seed = rng.next_u64();
    const HsiCube<float> x = crop_cube(cube, y0, x0, crop, crop);
    const CodedAperture<float> m = crop_mask(ds.mask, y0, x0, crop, crop);
    const HsiCube<float> h = cassi::initialization(cassi::forward(x, m, ds.dispersion, sigma, noise_seed), m, ds.dispersion);
    stack_into(out.input, n, h.tensor());
    stack_into(out.target, n, x.tensor());
    out.boxes.push_back(crop_annotations(rec.scene.annotations, static_cast<double>(y0), static_cast<double>(x0),
                                         static_cast<double>(crop), static_cast<double>(crop)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  std::size_t scenes = 0;
  double psnr = 0, ssim = 0, sam = 0;
  double baseline_psnr = 0;  // reconstruction = scaled shift-back H
  double map50 = 0;
  std::vector<double> per_class_ap;
  std::vector<QualityRow> rows;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json ap = nlohmann::ordered_json::array();
    for (double v : per_class_ap) ap.push_back(std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v));
    return {{"scenes", scenes}, {"psnr", psnr},   {"ssim", ssim},        {"sam", sam},
            {"baseline_psnr", baseline_psnr}, {"map50", map50}, {"per_class_ap", ap}};
  }
};

/// Noise seed of the evaluation measurement of a scene; fixed so repeated
/// evaluations see identical inputs.
inline std::uint64_t eval_noise_seed(const SceneRecord& r) { return derive_seed(r.seed, 0xE7A1); }

inline EvalReport evaluate(const FunModel<float>& model, const Dataset& ds, const std::vector<SceneRecord>& scenes, double sigma,
                           std::size_t limit = 0, std::vector<std::vector<Detection>>* detections_out = nullptr) {
  const std::size_t n = limit ? std::min(limit, scenes.size()) : scenes.size();
  if (n == 0) throw ContractError("evaluate: no scenes");
  EvalReport rep;
  rep.scenes = n;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Annotation>> gts;
  const auto& dcfg = model.config().detection;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rec = scenes[i];
    const HsiCube<float>& x = rec.scene.cube;
    const HsiCube<float> h = cassi::initialization(cassi::forward(x, ds.mask, ds.dispersion, sigma, eval_noise_seed(rec)), ds.mask,
                                                   ds.dispersion);
    const FunOutputs<float> out = model.forward(Var<float>::constant(h.tensor()), true);
    Tensor<float> recon = out.reconstruction.value();
    QualityRow row = quality(rec.id, recon, x.tensor());
    rep.psnr += row.psnr;
    rep.ssim += row.ssim;
    rep.sam += row.sam;
    rep.baseline_psnr += psnr(h.tensor(), x.tensor());
    rep.rows.push_back(row);
    // forward() on a rank-3 input yields a batch of one at each level.
    dets.push_back(decode(out.det, model.levels(x.height(), x.width()), 0, static_cast<double>(x.width()),
                          static_cast<double>(x.height()), dcfg));
    gts.push_back(rec.scene.annotations);
  }
  const double k = static_cast<double>(n);
  rep.psnr /= k;
  rep.ssim /= k;
  rep.sam /= k;
  rep.baseline_psnr /= k;
  const MapResult m = map_at(dets, gts, dcfg.num_classes, 0.5);
  rep.map50 = m.map;
  rep.per_class_ap = m.per_class;
  if (detections_out) *detections_out = std::move(dets);
  return rep;
}

// ---------------------------------------------------------------------------
// Trainer

inline Tensor<float> checked_entry(const TensorContainer& c, const std::string& name, const Shape& expected) {
  Tensor<float> t = c.get<float>(name);
  if (t.shape() != expected)
    throw FormatError("checkpoint entry " + name + " has shape " + to_string(t.shape()) + ", model expects " + to_string(expected));
  return t;
}

/// Copies the "param/<name>" entries of a checkpoint into a model built from the same config.
inline void load_parameters(FunModel<float>& model, const TensorContainer& c) {
  for (const auto& [name, var] : model.params().items())
    const_cast<Var<float>&>(var).mutable_value() = checked_entry(c, "param/" + name, var.shape());
}

struct StepStats {
  std::size_t step = 0;  // index of the step just taken
  double lr = 0, grad_norm = 0;
  LossReport loss;
  std::size_t positives = 0;
};

class Trainer {
 public:
  /// `config_json` is stored verbatim in every checkpoint so that a model can
  /// be rebuilt from the checkpoint alone.
  Trainer(const FunConfig& model_cfg, const Dataset& ds, TrainConfig cfg, std::string config_json = "{}")
      : cfg_(std::move(cfg)), ds_(ds), config_json_(std::move(config_json)) {
    cfg_.validate();
    model_cfg.validate();
    if (model_cfg.bands != ds.spec.scene.bands) throw ContractError("trainer: model bands differ from dataset bands");
    model_ = FunModel<float>::build(model_cfg, derive_seed(cfg_.seed, 1));
    opt_ = AdamW<float>(model_.params(), cfg_.adam);
    rng_ = Rng(derive_seed(cfg_.seed, 2));
  }

  const FunModel<float>& model() const noexcept { return model_; }
  FunModel<float>& model() noexcept { return model_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  std::size_t step() const noexcept { return step_; }
  const Rng& rng() const noexcept { return rng_; }

  StepStats train_step() {
    if (step_ >= cfg_.steps) throw ContractError("train_step: all " + std::to_string(cfg_.steps) + " steps already taken");
    const Batch b = sample_batch(ds_.train, ds_, cfg_.batch, cfg_.crop, cfg_.noise_sigma, rng_);
    StepStats st;
    st.step = step_;
    st.lr = lr_at(step_, cfg_.schedule);
    {
      Tape<float> tape;
      const FunOutputs<float> out = model_.forward(Var<float>::constant(b.input), cfg_.task != Task::reconstruction);
      Var<float> recon, reg, cls, ctr;
      if (cfg_.task != Task::detection) recon = charbonnier(out.reconstruction, Var<float>::constant(b.target));
      if (cfg_.task != Task::reconstruction) {
        const auto targets = assign_targets(b.boxes, model_.levels(cfg_.crop, cfg_.crop));
        const DetectionLoss<float> dl = detection_loss(out.det, targets, model_.config().detection);
        reg = dl.reg;
        cls = dl.cls;
        ctr = dl.ctr;
        st.positives = dl.positives;
      }
      const double lambda = cfg_.task == Task::detection ? 0.0 : cfg_.lambda;
      Var<float> total = total_loss(reg, cls, ctr, recon, lambda, &st.loss);
      if (cfg_.task == Task::detection) st.loss.recon = static_cast<double>(charbonnier(out.reconstruction, Var<float>::constant(b.target)).value()[0]);
      if (!std::isfinite(st.loss.total)) throw TrainingDiverged(step_, last_checkpoint_);
      tape.backward(total);
    }
    st.grad_norm = clip_grad_norm(model_.params(), cfg_.clip_norm);
    if (!std::isfinite(st.grad_norm)) throw TrainingDiverged(step_, last_checkpoint_);
    opt_.step(model_.params(), st.lr);
    model_.params().zero_grad();
    ++step_;
    return st;
  }

  EvalReport evaluate_val() const { return evaluate(model_, ds_, ds_.val, cfg_.noise_sigma, cfg_.eval_scenes); }

  TensorContainer checkpoint() const {
    TensorContainer c;
    const auto& items = model_.params().items();
    for (std::size_t k = 0; k < items.size(); ++k) {
      c.put("param/" + items[k].first, items[k].second.value());
      c.put("adam_m/" + items[k].first, opt_.first_moments()[k]);
      c.put("adam_v/" + items[k].first, opt_.second_moments()[k]);
    }
    c.put_text("__step", std::to_string(step_));
    c.put_text("__adam_t", std::to_string(opt_.steps_taken()));
    c.put_text("__rng", rng_.state());
    c.put_text("__config", config_json_);
    return c;
  }

  void save_checkpoint(const std::string& path) {
    checkpoint().save(path);
    last_checkpoint_ = path;
  }

  /// Restores parameters, moments, step counter and the sampling RNG.
  void restore(const TensorContainer& c) {
    load_parameters(model_, c);
    const auto& items = model_.params().items();
    for (std::size_t k = 0; k < items.size(); ++k) {
      opt_.first_moments()[k] = checked_entry(c, "adam_m/" + items[k].first, items[k].second.shape());
      opt_.second_moments()[k] = checked_entry(c, "adam_v/" + items[k].first, items[k].second.shape());
    }
    step_ = parse_count(c.text("__step"));
    opt_.set_steps_taken(parse_count(c.text("__adam_t")));
    rng_.set_state(c.text("__rng"));
    if (step_ > cfg_.steps) throw FormatError("checkpoint step exceeds the configured step count");
  }

  /// Runs until `cfg.steps`. With a run directory it appends metrics rows,
  /// writes checkpoints (plus the evaluation table logged at save time) and
  /// the config echo. `on_step` sees every step.
  void run(const std::optional<std::filesystem::path>& run_dir = std::nullopt,
           const std::function<void(const StepStats&)>& on_step = {}) {
    namespace fs = std::filesystem;
    std::ofstream log;
    if (run_dir) {
      fs::create_directories(*run_dir / "checkpoints");
      fs::create_directories(*run_dir / "samples");
      log.open(*run_dir / "metrics.jsonl", std::ios::app);
      if (!log) throw FormatError("cannot open metrics log in " + run_dir->string());
    }
    while (step_ < cfg_.steps) {
      const StepStats st = train_step();
      if (on_step) on_step(st);
      const std::size_t done = step_;
      if (log && (done % cfg_.log_interval == 0 || done == cfg_.steps)) {
        nlohmann::ordered_json row{{"kind", "train"},          {"step", done},           {"lr", st.lr},
                                   {"loss", st.loss.total},     {"recon", st.loss.recon}, {"reg", st.loss.reg},
                                   {"cls", st.loss.cls},        {"ctr", st.loss.ctr},     {"grad_norm", st.grad_norm},
                                   {"positives", st.positives}};
        log << row.dump() << "\n" << std::flush;
      }
      const bool ckpt = run_dir && (done % cfg_.checkpoint_interval == 0 || done == cfg_.steps);
      const bool eval = done % cfg_.eval_interval == 0 || done == cfg_.steps || ckpt;
      if (eval && (log || ckpt)) {
        const EvalReport rep = evaluate_val();
        nlohmann::ordered_json row{{"kind", "eval"}, {"step", done}, {"split", "val"}};
        const auto metrics = rep.to_json();
        for (const auto& [k, v] : metrics.items()) row[k] = v;
        if (log) log << row.dump() << "\n" << std::flush;
        if (ckpt) {
          char name[64];
          std::snprintf(name, sizeof name, "step_%06zu", done);
          const fs::path base = *run_dir / "checkpoints" / name;
          std::ofstream table(base.string() + ".eval.txt");
          write_quality_rows(table, rep.rows);
          save_checkpoint(base.string() + ".ckpt");
          save_sample(*run_dir / "samples", name);
        }
      }
    }
  }

 private:
  // Reconstruction of the first validation scene, for eyeballing progress.
  void save_sample(const std::filesystem::path& dir, const std::string& tag) const {
    if (ds_.val.empty()) return;
    const SceneRecord& r = ds_.val.front();
    const auto y = cassi::forward(r.scene.cube, ds_.mask, ds_.dispersion, cfg_.noise_sigma, eval_noise_seed(r));
    save_cube((dir / (tag + "_" + r.id + ".funh")).string(), model_.reconstruct(y, ds_.mask, ds_.dispersion));
  }

  static std::size_t parse_count(const std::string& s) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw FormatError("checkpoint: malformed counter '" + s + "'");
    return static_cast<std::size_t>(v);
  }

  TrainConfig cfg_;
  const Dataset& ds_;
  std::string config_json_;
  FunModel<float> model_;
  AdamW<float> opt_;
  Rng rng_;
  std::size_t step_ = 0;
  std::string last_checkpoint_;
};

}  // namespace fun
