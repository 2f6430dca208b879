#pragma once

// Synthetic hyperspectral scenes with box annotations, coded-aperture masks,
// and the on-disk dataset layout:
//
//   DIR/manifest.json           spec, signatures, dispersion, scene list with split and seed
//   DIR/mask.funh               shared coded aperture (single-band FUNH)
//   DIR/scenes/scene_NNNN.funh  cube (f32)
//   DIR/scenes/scene_NNNN.txt   "class x_min y_min x_max y_max" per line

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "fun/detection.hpp"
#include "fun/hsi.hpp"
#include "fun/random.hpp"

namespace fun {

struct SceneSpec {
  std::size_t height = 64, width = 64, bands = 8;
  std::size_t num_classes = 5;
  std::size_t mean_objects = 24;
  std::size_t object_spread = 4;  // count uniform in mean ± spread
  std::size_t min_size = 4, max_size = 10;
  double max_signature_correlation = 0.8;

  void validate() const {
    if (height == 0 || width == 0 || bands == 0) throw ContractError("SceneSpec: empty cube");
    if (num_classes == 0) throw ContractError("SceneSpec: need at least one class");
    if (min_size < 4) throw ContractError("SceneSpec: minimum object size is 4 px");
    if (max_size < min_size || max_size > std::min(height, width)) throw ContractError("SceneSpec: object sizes do not fit the image");
    if (object_spread > mean_objects) throw ContractError("SceneSpec: object spread exceeds the mean count");
    if (!(max_signature_correlation < 0.95)) throw ContractError("SceneSpec: classes must stay spectrally separable (< 0.95)");
  }
};

enum class ShapeKind { rectangle, ellipse };

struct ObjectSpec {
  int class_id = 0;
  ShapeKind shape = ShapeKind::rectangle;
  std::size_t x = 0, y = 0, w = 4, h = 4;  // bounding rectangle, top-left column/row and extent
  double shading = 1.0;
};

struct Scene {
  HsiCube<float> cube;
  std::vector<Annotation> annotations;
};

// ---------------------------------------------------------------------------
// Spectra

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa == 0 || sbb == 0 ? (saa == sbb ? 1.0 : 0.0) : sab / std::sqrt(saa * sbb);
}

/// Per-class emission curves: 1-3 Gaussian bumps over the band index, peak
/// normalized to 1. Redrawn until every pair correlates below the spec limit.
inline std::vector<std::vector<double>> generate_signatures(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, 0x5167));
  const double span = static_cast<double>(spec.bands - 1);
  std::vector<std::vector<double>> sigs;
  for (int attempt = 0; sigs.size() < spec.num_classes; ++attempt) {
    if (attempt > 100000) throw ContractError("generate_signatures: cannot separate classes; lower num_classes or raise bands");
    std::vector<double> s(spec.bands, 0.0);
    const auto bumps = rng.uniform_int(1, 3);
    for (std::int64_t k = 0; k < bumps; ++k) {
      const double c = rng.uniform(0, span), width = rng.uniform(0.5, 0.25 * span + 0.5), amp = rng.uniform(0.4, 1.0);
      for (std::size_t b = 0; b < spec.bands; ++b) {
        const double z = (static_cast<double>(b) - c) / width;
        s[b] += amp * std::exp(-0.5 * z * z);
      }
    }
    const double peak = *std::max_element(s.begin(), s.end());
    for (auto& v : s) v = 0.05 + 0.95 * v / peak;
    bool ok = true;
    for (const auto& o : sigs) ok = ok && pearson(o, s) < spec.max_signature_correlation;
    if (ok) sigs.push_back(std::move(s));
  }
  return sigs;
}

// ---------------------------------------------------------------------------
// Painting

namespace detail {

inline bool covers(const ObjectSpec& o, std::size_t row, std::size_t col) {
  if (row < o.y || row >= o.y + o.h || col < o.x || col >= o.x + o.w) return false;
  if (o.shape == ShapeKind::rectangle) return true;
  const double u = (static_cast<double>(col - o.x) + 0.5) / static_cast<double>(o.w) * 2 - 1;
  const double v = (static_cast<double>(row - o.y) + 0.5) / static_cast<double>(o.h) * 2 - 1;
  return u * u + v * v <= 1.0;
}

// Smooth field in [0,1] from a coarse random grid, bilinearly upsampled.
inline std::vector<double> low_frequency_field(std::size_t h, std::size_t w, std::size_t cells, Rng& rng) {
  std::vector<double> grid((cells + 1) * (cells + 1));
  for (auto& g : grid) g = rng.uniform();
  std::vector<double> out(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double gy = static_cast<double>(i) / static_cast<double>(h) * static_cast<double>(cells);
      const double gx = static_cast<double>(j) / static_cast<double>(w) * static_cast<double>(cells);
      const std::size_t y0 = static_cast<std::size_t>(gy), x0 = static_cast<std::size_t>(gx);
      const double fy = gy - static_cast<double>(y0), fx = gx - static_cast<double>(x0);
      auto at = [&](std::size_t y, std::size_t x) { return grid[y * (cells + 1) + x]; };
      out[i * w + j] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
    }
  return out;
}

}  // namespace detail

/// Paints `objects` over a textured background. Objects are painted in order;
/// each annotation is the tight box of the pixels it ended up covering.
inline Scene paint_scene(const SceneSpec& spec, const std::vector<std::vector<double>>& signatures, const std::vector<ObjectSpec>& objects,
                         std::uint64_t seed) {
  spec.validate();
  if (signatures.size() != spec.num_classes) throw ContractError("paint_scene: signature count does not match class count");
  Rng rng(derive_seed(seed, 1));
  const std::size_t h = spec.height, w = spec.width, nb = spec.bands;

  // Background: a smooth material spectrum scaled by low-frequency texture.
  std::vector<double> bg_spec(nb);
  const double c = rng.uniform(0, static_cast<double>(nb - 1)), width = rng.uniform(0.3, 0.8) * static_cast<double>(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const double z = (static_cast<double>(b) - c) / width;
    bg_spec[b] = 0.5 + 0.5 * std::exp(-0.5 * z * z);
  }
  const auto tex = detail::low_frequency_field(h, w, 4, rng);
  const double level = rng.uniform(0.1, 0.25);
  HsiCube<float> cube(h, w, nb);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t b = 0; b < nb; ++b) cube.at(i, j, b) = static_cast<float>(level * (0.6 + 0.4 * tex[i * w + j]) * bg_spec[b]);

  Scene scene;
  for (const auto& o : objects) {
    if (o.class_id < 0 || static_cast<std::size_t>(o.class_id) >= spec.num_classes) throw ContractError("paint_scene: bad class id");
    if (o.x + o.w > w || o.y + o.h > h || o.w == 0 || o.h == 0) throw ContractError("paint_scene: object outside image");
    const auto& sig = signatures[static_cast<std::size_t>(o.class_id)];
    std::size_t r0 = h, r1 = 0, c0 = w, c1 = 0;
    for (std::size_t i = o.y; i < o.y + o.h; ++i)
      for (std::size_t j = o.x; j < o.x + o.w; ++j) {
        if (!detail::covers(o, i, j)) continue;
        for (std::size_t b = 0; b < nb; ++b) cube.at(i, j, b) = static_cast<float>(o.shading * sig[b]);
        r0 = std::min(r0, i);
        r1 = std::max(r1, i);
        c0 = std::min(c0, j);
        c1 = std::max(c1, j);
      }
    if (r0 > r1) continue;
    scene.annotations.push_back({o.class_id, {double(c0), double(r0), double(c1 + 1), double(r1 + 1)}});
  }
  scene.cube = std::move(cube);
  return scene;
}

/// Random non-overlapping layout (one pixel of clearance between objects).
inline std::vector<ObjectSpec> random_layout(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, 2));
  const auto count = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.mean_objects - spec.object_spread),
                                                              static_cast<std::int64_t>(spec.mean_objects + spec.object_spread)));
  std::vector<ObjectSpec> placed;
  for (int attempt = 0; placed.size() < count && attempt < 4000; ++attempt) {
    ObjectSpec o;
    o.class_id = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(spec.num_classes) - 1));
    o.shape = rng.bernoulli(0.5) ? ShapeKind::rectangle : ShapeKind::ellipse;
    o.w = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.min_size), static_cast<std::int64_t>(spec.max_size)));
    o.h = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.min_size), static_cast<std::int64_t>(spec.max_size)));
    o.x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.width - o.w)));
    o.y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.height - o.h)));
    o.shading = rng.uniform(0.6, 1.0);
    const bool clear = std::none_of(placed.begin(), placed.end(), [&](const ObjectSpec& p) {
      return o.x < p.x + p.w + 1 && p.x < o.x + o.w + 1 && o.y < p.y + p.h + 1 && p.y < o.y + o.h + 1;
    });
    if (clear) placed.push_back(o);
  }
  return placed;
}

inline Scene generate_scene(const SceneSpec& spec, const std::vector<std::vector<double>>& signatures, std::uint64_t seed) {
  return paint_scene(spec, signatures, random_layout(spec, seed), seed);
}

inline CodedAperture<float> generate_mask(std::size_t h, std::size_t w, double density, std::uint64_t seed) {
  if (!(density >= 0 && density <= 1)) throw ContractError("generate_mask: density must lie in [0,1]");
  Rng rng(derive_seed(seed, 0x6d61736b));
  Tensor<float> t({h, w});
  for (auto& v : t.data()) v = rng.bernoulli(density) ? 1.0f : 0.0f;
  return CodedAperture<float>(std::move(t));
}

// ---------------------------------------------------------------------------
// Annotation files

inline void write_annotations(std::ostream& os, const std::vector<Annotation>& anns) {
  char buf[160];
  for (const auto& a : anns) {
    std::snprintf(buf, sizeof buf, "%d %.9g %.9g %.9g %.9g\n", a.class_id, a.box.x0, a.box.y0, a.box.x1, a.box.y1);
    os << buf;
  }
}

inline std::vector<Annotation> read_annotations(std::istream& is, const std::string& what = "annotations") {
  std::vector<Annotation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Annotation a;
    std::string extra;
    if (!(ls >> a.class_id >> a.box.x0 >> a.box.y0 >> a.box.x1 >> a.box.y1) || (ls >> extra))
      throw FormatError(what + ":" + std::to_string(lineno) + ": expected 'class x_min y_min x_max y_max'");
    out.push_back(a);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset on disk

struct DatasetSpec {
  SceneSpec scene;
  std::size_t train_scenes = 128, val_scenes = 32;
  double mask_density = 0.5;
  std::size_t dispersion_step = 1;
  std::uint64_t seed = 0;
};

struct SceneRecord {
  std::string id;
  std::string split;  // "train" or "val"
  std::uint64_t seed = 0;
  Scene scene;
};

struct Dataset {
  DatasetSpec spec;
  CodedAperture<float> mask;
  DispersionSpec dispersion;
  std::vector<std::vector<double>> signatures;
  std::vector<SceneRecord> train, val;
};

inline nlohmann::ordered_json scene_spec_json(const SceneSpec& s) {
  return {{"height", s.height},           {"width", s.width},          {"bands", s.bands},
          {"num_classes", s.num_classes}, {"mean_objects", s.mean_objects}, {"object_spread", s.object_spread},
          {"min_size", s.min_size},       {"max_size", s.max_size},    {"max_signature_correlation", s.max_signature_correlation}};
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.height = j.at("height");
  s.width = j.at("width");
  s.bands = j.at("bands");
  s.num_classes = j.at("num_classes");
  s.mean_objects = j.at("mean_objects");
  s.object_spread = j.at("object_spread");
  s.min_size = j.at("min_size");
  s.max_size = j.at("max_size");
  s.max_signature_correlation = j.at("max_signature_correlation");
  s.validate();
  return s;
}

/// Scene i derives its seed from (dataset seed, i); the first `train_scenes`
/// indices form the training split.
inline Dataset generate_dataset(const DatasetSpec& spec) {
  spec.scene.validate();
  Dataset ds;
  ds.spec = spec;
  ds.signatures = generate_signatures(spec.scene, spec.seed);
  ds.mask = generate_mask(spec.scene.height, spec.scene.width, spec.mask_density, spec.seed);
  ds.dispersion = DispersionSpec::uniform(spec.dispersion_step, spec.scene.bands);
  const std::size_t total = spec.train_scenes + spec.val_scenes;
  for (std::size_t i = 0; i < total; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04zu", i);
    SceneRecord r{id, i < spec.train_scenes ? "train" : "val", derive_seed(spec.seed, 1000 + i), {}};
    r.scene = generate_scene(spec.scene, ds.signatures, r.seed);
    (i < spec.train_scenes ? ds.train : ds.val).push_back(std::move(r));
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "scenes");
  nlohmann::ordered_json m;
  m["format"] = "fun-dataset";
  m["version"] = 1;
  m["seed"] = ds.spec.seed;
  m["scene_spec"] = scene_spec_json(ds.spec.scene);
  m["mask"] = {{"file", "mask.funh"}, {"density", ds.spec.mask_density}};
  m["dispersion_step"] = ds.spec.dispersion_step;
  m["signatures"] = ds.signatures;
  m["scenes"] = nlohmann::ordered_json::array();
  save_mask(dir / "mask.funh", ds.mask);
  for (const auto* split : {&ds.train, &ds.val})
    for (const auto& r : *split) {
      save_cube((dir / "scenes" / (r.id + ".funh")).string(), r.scene.cube);
      std::ofstream ann(dir / "scenes" / (r.id + ".txt"));
      write_annotations(ann, r.scene.annotations);
      if (!ann) throw FormatError("cannot write annotations for " + r.id);
      m["scenes"].push_back({{"id", r.id},
                             {"split", r.split},
                             {"seed", r.seed},
                             {"cube", "scenes/" + r.id + ".funh"},
                             {"annotations", "scenes/" + r.id + ".txt"}});
    }
  std::ofstream os(dir / "manifest.json");
  os << m.dump(2) << "\n";
  if (!os) throw FormatError("cannot write manifest in " + dir.string());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("missing manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest: " + std::string(e.what()));
  }
  if (m.value("format", "") != "fun-dataset") throw FormatError("manifest is not a fun-dataset");
  Dataset ds;
  try {
    ds.spec.seed = m.at("seed");
    ds.spec.scene = scene_spec_from_json(m.at("scene_spec"));
    ds.spec.mask_density = m.at("mask").at("density");
    ds.spec.dispersion_step = m.at("dispersion_step");
    ds.signatures = m.at("signatures").get<std::vector<std::vector<double>>>();
    ds.mask = load_mask<float>((dir / m.at("mask").at("file").get<std::string>()).string());
    ds.dispersion = DispersionSpec::uniform(ds.spec.dispersion_step, ds.spec.scene.bands);
    ds.spec.train_scenes = ds.spec.val_scenes = 0;
    for (const auto& s : m.at("scenes")) {
      SceneRecord r{s.at("id"), s.at("split"), s.at("seed"), {}};
      r.scene.cube = load_cube<float>((dir / s.at("cube").get<std::string>()).string());
      std::ifstream ann(dir / s.at("annotations").get<std::string>());
      if (!ann) throw FormatError("missing annotation file for " + r.id);
      r.scene.annotations = read_annotations(ann, r.id);
      if (r.split == "train") {
        ds.train.push_back(std::move(r));
        ++ds.spec.train_scenes;
      } else if (r.split == "val") {
        ds.val.push_back(std::move(r));
        ++ds.spec.val_scenes;
      } else {
        throw FormatError("scene " + r.id + " has unknown split '" + r.split + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest: " + std::string(e.what()));
  }
  return ds;
}

}  // namespace fun
