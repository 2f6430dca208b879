// fun: data generation, CASSI simulation, training, evaluation and inference.

#include <png.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "fun/config.hpp"
#include "fun/suites.hpp"

using namespace fun;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kDiverged = 3 };

struct Common {
  std::string config;
  std::vector<std::string> sets;
};

void add_config_options(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config (defaults are used for missing keys)")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override a config key, e.g. --set train.lambda=0");
}

void write_json(const fs::path& p, const nlohmann::ordered_json& j) {
  std::ofstream os(p);
  os << j.dump(2) << "\n";
  if (!os) throw FormatError("cannot write " + p.string());
}

// ---------------------------------------------------------------------------
// PNG overlays

const unsigned char kClassColors[][3] = {{230, 25, 75}, {60, 180, 75}, {255, 225, 25}, {0, 130, 200}, {245, 130, 48},
                                         {145, 30, 180}, {70, 240, 240}, {240, 50, 230}};

void write_png(const std::string& path, std::size_t w, std::size_t h, const std::vector<unsigned char>& rgb) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw FormatError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw FormatError("libpng failed writing " + path);
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < h; ++r) png_write_row(png, const_cast<png_bytep>(rgb.data() + r * w * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

/// One image per band: the band scaled to [0,255] with detection outlines.
void write_overlays(const fs::path& dir, const HsiCube<float>& cube, const std::vector<Detection>& dets) {
  fs::create_directories(dir);
  const std::size_t h = cube.height(), w = cube.width();
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    std::vector<unsigned char> rgb(h * w * 3);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const auto v = static_cast<unsigned char>(std::lround(std::clamp(cube.at(i, j, b), 0.0f, 1.0f) * 255.0f));
        std::fill_n(rgb.begin() + static_cast<std::ptrdiff_t>((i * w + j) * 3), 3, v);
      }
    for (const auto& d : dets) {
      const auto* c = kClassColors[static_cast<std::size_t>(d.class_id) % std::size(kClassColors)];
      auto px = [&](long x, long y) {
        if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) return;
        std::copy(c, c + 3, rgb.begin() + (y * static_cast<long>(w) + x) * 3);
      };
      const long x0 = std::lround(d.box.x0), y0 = std::lround(d.box.y0);
      const long x1 = std::lround(d.box.x1) - 1, y1 = std::lround(d.box.y1) - 1;
      for (long x = x0; x <= x1; ++x) {
        px(x, y0);
        px(x, y1);
      }
      for (long y = y0; y <= y1; ++y) {
        px(x0, y);
        px(x1, y);
      }
    }
    char name[32];
    std::snprintf(name, sizeof name, "band_%02zu.png", b);
    write_png((dir / name).string(), w, h, rgb);
  }
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gen_data(const Common& c, const std::string& out, std::optional<std::size_t> scenes, std::optional<std::size_t> val,
                 std::optional<std::uint64_t> seed) {
  RunConfig rc = load_run_config(c.config, c.sets);
  if (scenes) rc.data.train_scenes = *scenes;
  if (val) rc.data.val_scenes = *val;
  if (seed) rc.data.seed = *seed;
  const Dataset ds = generate_dataset(rc.data);
  save_dataset(ds, out);
  std::cout << "wrote " << ds.train.size() << " train and " << ds.val.size() << " val scenes to " << out << "\n";
  return kOk;
}

int cmd_simulate(const std::string& cube_path, const std::string& mask_path, double sigma, std::size_t step, std::uint64_t seed,
                 const std::string& out) {
  const HsiCube<float> cube = load_cube<float>(cube_path);
  const CodedAperture<float> mask = load_mask<float>(mask_path);
  if (mask.height() != cube.height() || mask.width() != cube.width())
    throw ShapeError("mask " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) + " does not match cube " +
                     std::to_string(cube.height()) + "x" + std::to_string(cube.width()));
  const auto y = cassi::forward(cube, mask, DispersionSpec::uniform(step, cube.bands()), sigma, seed);
  save_measurement(out, y);
  std::cout << "measurement " << y.height() << "x" << y.width() << " written to " << out << "\n";
  return kOk;
}

int cmd_train(const Common& c, const std::string& out, const std::string& resume) {
  const RunConfig rc = load_run_config(c.config, c.sets);
  fs::create_directories(out);
  const auto echo = to_json(rc);
  write_json(fs::path(out) / "config.json", echo);
  const Dataset ds = dataset_for(rc);
  Trainer t(rc.model, ds, rc.train, echo.dump());
  if (!resume.empty()) {
    t.restore(TensorContainer::load(resume));
    std::cout << "resumed from " << resume << " at step " << t.step() << "\n";
  }
  std::cout << "training " << t.model().parameter_count() << " parameters for " << rc.train.steps << " steps (" << task_name(rc.train.task)
            << ", lambda " << rc.train.lambda << ")\n";
  try {
    t.run(fs::path(out), [&](const StepStats& s) {
      if ((s.step + 1) % rc.train.log_interval == 0)
        std::printf("step %6zu  lr %.2e  loss %.4f  recon %.4f  cls %.4f  reg %.4f  ctr %.4f\n", s.step + 1, s.lr, s.loss.total,
                    s.loss.recon, s.loss.cls, s.loss.reg, s.loss.ctr);
    });
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  }
  const EvalReport r = t.evaluate_val();
  std::cout << r.to_json().dump() << "\n";
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& split, std::size_t limit, const std::string& out) {
  const CheckpointModel cm = load_checkpoint_model(ckpt);
  const Dataset ds = dataset_for(cm.config);
  if (split != "val" && split != "train") throw ConfigError("split must be 'val' or 'train'");
  const EvalReport r = evaluate(cm.model, ds, split == "val" ? ds.val : ds.train, cm.config.train.noise_sigma,
                                limit ? limit : cm.config.train.eval_scenes);
  if (out.empty()) {
    write_quality_rows(std::cout, r.rows);
  } else {
    std::ofstream os(out);
    write_quality_rows(os, r.rows);
    if (!os) throw FormatError("cannot write " + out);
  }
  nlohmann::ordered_json summary{{"step", cm.step}, {"split", split}};
  const auto metrics = r.to_json();
  for (const auto& [k, v] : metrics.items()) summary[k] = v;
  std::cout << summary.dump() << "\n";
  return kOk;
}

struct Inference {
  CheckpointModel cm;
  CodedAperture<float> mask;
  Measurement<float> y;
};

Inference prepare(const std::string& ckpt, const std::string& measurement, const std::string& mask_path) {
  Inference in{load_checkpoint_model(ckpt), {}, load_measurement<float>(measurement)};
  in.mask = mask_path.empty() ? mask_for(in.cm.config) : load_mask<float>(mask_path);
  return in;
}

DispersionSpec dispersion_of(const RunConfig& c) { return DispersionSpec::uniform(c.data.dispersion_step, c.model.bands); }

int cmd_reconstruct(const std::string& ckpt, const std::string& measurement, const std::string& mask, const std::string& out) {
  const Inference in = prepare(ckpt, measurement, mask);
  save_cube(out, in.cm.model.reconstruct(in.y, in.mask, dispersion_of(in.cm.config)));
  std::cout << "reconstruction written to " << out << "\n";
  return kOk;
}

int cmd_detect(const std::string& ckpt, const std::string& measurement, const std::string& mask, const std::string& out,
               const std::string& overlay) {
  const Inference in = prepare(ckpt, measurement, mask);
  const auto& model = in.cm.model;
  const HsiCube<float> h = cassi::initialization(in.y, in.mask, dispersion_of(in.cm.config));
  const auto fo = model.forward(Var<float>::constant(h.tensor()), true);
  const auto dets = decode(fo.det, model.levels(h.height(), h.width()), 0, static_cast<double>(h.width()),
                           static_cast<double>(h.height()), model.config().detection);
  std::ofstream os(out);
  write_detections(os, 0, dets);
  if (!os) throw FormatError("cannot write " + out);
  if (!overlay.empty()) write_overlays(overlay, HsiCube<float>(fo.reconstruction.value()), dets);
  std::cout << dets.size() << " detections written to " << out << "\n";
  return kOk;
}

int cmd_bench(const std::vector<std::size_t>& sizes, std::size_t channels) {
  const auto rows = complexity_bench(sizes, channels);
  std::printf("%6s %8s %14s %16s %10s %10s\n", "side", "tokens", "fsm_macs", "attention_macs", "fsm_x", "attn_x");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::printf("%6zu %8zu %14llu %16llu", r.side, r.side * r.side, static_cast<unsigned long long>(r.fsm_macs),
                static_cast<unsigned long long>(r.attention_macs));
    if (i == 0) {
      std::printf(" %10s %10s\n", "-", "-");
      continue;
    }
    // growth relative to the previous row
    std::printf(" %10.3f %10.3f\n", static_cast<double>(r.fsm_macs) / static_cast<double>(rows[i - 1].fsm_macs),
                static_cast<double>(r.attention_macs) / static_cast<double>(rows[i - 1].attention_macs));
  }
  return kOk;
}

int cmd_grad_check(const std::string& module, std::uint64_t seed) {
  bool ok = true;
  for (const auto& c : gradient_suite(module, seed)) {
    std::printf("%-4s %-28s max_rel_error %.3e  tol %.0e  points %zu  worst %s\n", c.pass() ? "PASS" : "FAIL", c.name.c_str(), c.error,
                c.tolerance, c.points, c.worst.c_str());
    ok = ok && c.pass();
  }
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FUN: CASSI simulation and joint hyperspectral reconstruction and detection"};
  app.require_subcommand(1);

  Common common;
  std::string out, ckpt, measurement, mask, cube, split = "val", overlay, resume, module = "all";
  std::optional<std::size_t> scenes, val_scenes;
  std::optional<std::uint64_t> data_seed;
  double sigma = 0.0;
  std::size_t step = 1, limit = 0, channels = 16;
  std::uint64_t seed = 0;
  std::vector<std::size_t> sizes{8, 16, 32};

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_config_options(gen, common);
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--scenes", scenes, "Number of training scenes");
  gen->add_option("--val-scenes", val_scenes, "Number of validation scenes");
  gen->add_option("--seed", data_seed, "Dataset seed");

  auto* sim = app.add_subcommand("simulate", "Simulate a CASSI measurement from a cube");
  sim->add_option("--cube", cube, "Input cube (FUNH)")->required()->check(CLI::ExistingFile);
  sim->add_option("--mask", mask, "Coded aperture (single-band FUNH)")->required()->check(CLI::ExistingFile);
  sim->add_option("--sigma", sigma, "Gaussian noise standard deviation")->check(CLI::NonNegativeNumber);
  sim->add_option("--dispersion-step", step, "Shift in pixels between adjacent bands");
  sim->add_option("--seed", seed, "Noise seed");
  sim->add_option("--out", out, "Output measurement (FUNH)")->required();

  auto* train = app.add_subcommand("train", "Train a model");
  add_config_options(train, common);
  train->add_option("--out", out, "Run directory")->required();
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split, "val or train");
  eval->add_option("--limit", limit, "Evaluate only the first N scenes");
  eval->add_option("--out", out, "Write the per-scene table here instead of stdout");

  auto* rec = app.add_subcommand("reconstruct", "Reconstruct a cube from a measurement");
  auto* det = app.add_subcommand("detect", "Detect objects in a measurement");
  for (auto* cmd : {rec, det}) {
    cmd->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    cmd->add_option("--measurement", measurement, "Measurement (FUNH)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--mask", mask, "Coded aperture; defaults to the training dataset's mask")->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "Output file")->required();
  }
  det->add_option("--overlay", overlay, "Directory for per-band PNG overlays");

  auto* bench = app.add_subcommand("bench", "Count FSM and self-attention multiply-accumulates");
  bench->add_option("--sizes", sizes, "Square input sides")->delimiter(',');
  bench->add_option("--channels", channels, "Channel count");

  auto* grad = app.add_subcommand("grad-check", "Run finite-difference gradient suites");
  grad->add_option("--module", module, "all, primitives, fsm, lrsm, ssmb, charbonnier, detection or network");
  grad->add_option("--seed", seed, "Seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(common, out, scenes, val_scenes, data_seed);
    if (sim->parsed()) return cmd_simulate(cube, mask, sigma, step, seed, out);
    if (train->parsed()) return cmd_train(common, out, resume);
    if (eval->parsed()) return cmd_eval(ckpt, split, limit, out);
    if (rec->parsed()) return cmd_reconstruct(ckpt, measurement, mask, out);
    if (det->parsed()) return cmd_detect(ckpt, measurement, mask, out, overlay);
    if (bench->parsed()) return cmd_bench(sizes, channels);
    if (grad->parsed()) return cmd_grad_check(module, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
