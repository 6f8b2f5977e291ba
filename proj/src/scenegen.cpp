#include "thermalign/scenegen.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace thermalign {
namespace {

// Silhouette geometry, in canvas units of one glyph scale `s`. Everything is
// kept inside |x|,|y| <= 0.9s so the shape survives arbitrary rotation on the
// 2s x 2s canvas. The three bodies differ in elongation and bulk, which is
// what makes them separable at thermal resolution:
//   deer     - slim ellipse plus four leg stubs
//   rhino    - stocky ellipse plus a nose horn
//   elephant - large ellipse plus a trunk lobe
bool inside_deer(double x, double y, double s) {
  const double a = 0.80 * s, b = 0.26 * s;
  if ((x * x) / (a * a) + (y * y) / (b * b) <= 1.0) return true;
  const double leg_half = std::max(0.055 * s, 0.5);
  for (const double cx : {-0.55 * s, -0.22 * s, 0.22 * s, 0.55 * s}) {
    if (std::abs(x - cx) <= leg_half && y >= -0.52 * s && y <= -0.08 * s) return true;
  }
  return false;
}

bool inside_rhino(double x, double y, double s) {
  const double a = 0.72 * s, b = 0.48 * s;
  if ((x * x) / (a * a) + (y * y) / (b * b) <= 1.0) return true;
  // Horn: triangle from the nose (0.55s, +-0.18s) to the tip (0.88s, 0).
  if (x < 0.55 * s || x > 0.88 * s) return false;
  const double t = (x - 0.55 * s) / (0.33 * s);  // 0 at nose, 1 at tip
  return std::abs(y) <= 0.18 * s * (1.0 - t);
}

bool inside_elephant(double x, double y, double s) {
  const double a = 0.82 * s, b = 0.58 * s;
  if ((x * x) / (a * a) + (y * y) / (b * b) <= 1.0) return true;
  const double dx = x - 0.72 * s, dy = y + 0.20 * s, r = 0.16 * s;
  return dx * dx + dy * dy <= r * r;
}

bool inside_species(Species sp, double x, double y, double s) {
  switch (sp) {
    case Species::deer:
      return inside_deer(x, y, s);
    case Species::rhino:
      return inside_rhino(x, y, s);
    default:
      return inside_elephant(x, y, s);
  }
}

Mask rasterize(Species sp, int scale, double angle_deg) {
  const int n = 2 * scale;
  const double s = static_cast<double>(scale);
  const double rad = angle_deg * M_PI / 180.0;
  const double c = std::cos(rad), sn = std::sin(rad);
  Mask m(n, n);
  const double half = (n - 1) / 2.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double x = j - half;
      const double y = half - i;  // image row 0 is the top
      // Sample the unrotated shape at R(-angle) * p.
      const double xr = c * x + sn * y;
      const double yr = -sn * x + c * y;
      m(i, j) = inside_species(sp, xr, yr, s) ? 1 : 0;
    }
  }
  return m;
}

struct Placement {
  int top = 0, left = 0;
  Mask mask;
};

nlohmann::ordered_json record_to_json(const CorpusRecord& r) {
  return {{"image_id", r.image_id}, {"image", r.image},
          {"rgb_image", r.rgb_image}, {"species", r.species},
          {"count", r.count},       {"seed", r.seed}};
}

}  // namespace

const char* species_name(Species s) {
  switch (s) {
    case Species::deer:
      return "deer";
    case Species::rhino:
      return "rhino";
    default:
      return "elephant";
  }
}

std::string species_capitalized(Species s) {
  std::string n = species_name(s);
  n[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(n[0])));
  return n;
}

std::optional<Species> species_from_name(const std::string& lower) {
  for (Species s : kAllSpecies)
    if (lower == species_name(s)) return s;
  return std::nullopt;
}

Mask rot90(const Mask& m, int k) {
  k = ((k % 4) + 4) % 4;
  switch (k) {
    case 0:
      return m;
    case 1:
      return m.transpose().colwise().reverse();
    case 2:
      return m.reverse();
    default:
      return m.transpose().rowwise().reverse();
  }
}

Mask render_glyph(Species species, int scale, double angle_deg) {
  if (scale < 4)
    throw InvalidScale("glyph scale must be >= 4, got " + std::to_string(scale));
  double a = std::fmod(angle_deg, 360.0);
  if (a < 0) a += 360.0;
  const int quarter = static_cast<int>(a / 90.0) % 4;
  const double rem = a - 90.0 * quarter;
  return rot90(rasterize(species, scale, rem), quarter);
}

void SceneSpec::validate() const {
  if (count < 1 || count > 12)
    throw InvalidSpec("count must be in [1,12], got " + std::to_string(count));
  if (glyph_scale < 4)
    throw InvalidScale("glyph scale must be >= 4, got " + std::to_string(glyph_scale));
  if (2 * glyph_scale >= std::min(width, height))
    throw InvalidSpec("glyph canvas " + std::to_string(2 * glyph_scale) +
                      " does not fit image " + std::to_string(width) + "x" +
                      std::to_string(height));
  if (placement_margin < 0) throw InvalidSpec("placement margin must be >= 0");
}

SyntheticScene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int n = 2 * spec.glyph_scale;
  const int max_top = spec.height - n - spec.placement_margin;
  const int max_left = spec.width - n - spec.placement_margin;
  if (max_top < spec.placement_margin || max_left < spec.placement_margin)
    throw InvalidSpec("placement margin leaves no room for glyphs");

  Mask occupancy = Mask::Zero(spec.height, spec.width);
  auto touches = [&](const Placement& p) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (!p.mask(i, j)) continue;
        // Reject if any occupied pixel lies within a Chebyshev distance of 1,
        // which keeps 8-connected components of distinct glyphs separate.
        for (int di = -1; di <= 1; ++di) {
          for (int dj = -1; dj <= 1; ++dj) {
            const int y = p.top + i + di, x = p.left + j + dj;
            if (y < 0 || y >= spec.height || x < 0 || x >= spec.width) continue;
            if (occupancy(y, x)) return true;
          }
        }
      }
    }
    return false;
  };

  // Greedy rejection sampling can wedge itself on dense scenes, so a failed
  // pass clears the board and replays from the continuing RNG stream; the
  // result stays a pure function of the seed.
  std::vector<Placement> placed;
  for (int round = 0; round < 50 && static_cast<int>(placed.size()) < spec.count; ++round) {
    placed.clear();
    occupancy.setZero();
    for (int g = 0; g < spec.count; ++g) {
      bool ok = false;
      for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
        Placement p;
        const double angle = rng.uniform(0.0, 360.0);
        p.top = static_cast<int>(rng.uniform_int(spec.placement_margin, max_top));
        p.left = static_cast<int>(rng.uniform_int(spec.placement_margin, max_left));
        p.mask = render_glyph(spec.species, spec.glyph_scale, angle);
        if (!spec.allow_overlap && touches(p)) continue;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            if (p.mask(i, j)) occupancy(p.top + i, p.left + j) = 1;
        placed.push_back(std::move(p));
        ok = true;
      }
      if (!ok) break;
    }
  }
  if (static_cast<int>(placed.size()) < spec.count)
    throw PlacementFailure("could not place " + std::to_string(spec.count) + " " +
                           species_name(spec.species) + " glyphs at scale " +
                           std::to_string(spec.glyph_scale) + " on a " +
                           std::to_string(spec.width) + "x" + std::to_string(spec.height) +
                           " scene after 50 rounds");

  SyntheticScene scene;
  scene.species = spec.species;
  scene.count = spec.count;
  scene.seed = spec.seed;
  scene.foreground = occupancy;

  // Thermal: cool background, hot bodies.
  GrayImage th;
  th.v.resize(spec.height, spec.width);
  for (int i = 0; i < spec.height; ++i)
    for (int j = 0; j < spec.width; ++j) th.v(i, j) = rng.uniform(0.0, 0.2);
  for (const auto& p : placed) {
    const double base = rng.uniform(0.85, 0.95);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (p.mask(i, j))
          th.v(p.top + i, p.left + j) = base + rng.uniform(-0.05, 0.05);
  }

  // RGB twin: same placements, with per-scene background hue and per-animal
  // coat hue drawn independently of the species. Color never identifies the
  // class and no fixed channel pattern survives across scenes, so silhouette
  // shape is the only stable species cue; a channel-replicated grayscale
  // image sits at the centre of this color distribution rather than outside
  // it. The bright-foreground/dark-background polarity always holds, as it
  // does in the thermal rendering.
  RgbImage rgb;
  rgb.r.resize(spec.height, spec.width);
  rgb.g.resize(spec.height, spec.width);
  rgb.b.resize(spec.height, spec.width);
  const double bg_r = 0.04 + 0.24 * rng.uniform01();
  const double bg_g = 0.04 + 0.24 * rng.uniform01();
  const double bg_b = 0.04 + 0.24 * rng.uniform01();
  for (int i = 0; i < spec.height; ++i) {
    for (int j = 0; j < spec.width; ++j) {
      const double lum = 0.4 + 1.2 * rng.uniform01();
      rgb.r(i, j) = bg_r * lum;
      rgb.g(i, j) = bg_g * lum;
      rgb.b(i, j) = bg_b * lum;
    }
  }
  for (const auto& p : placed) {
    const double cr = 0.55 + 0.40 * rng.uniform01();
    const double cg = 0.55 + 0.40 * rng.uniform01();
    const double cb = 0.55 + 0.40 * rng.uniform01();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (!p.mask(i, j)) continue;
        const double shade = 0.85 + 0.30 * rng.uniform01();
        rgb.r(p.top + i, p.left + j) = std::min(1.0, cr * shade);
        rgb.g(p.top + i, p.left + j) = std::min(1.0, cg * shade);
        rgb.b(p.top + i, p.left + j) = std::min(1.0, cb * shade);
      }
    }
  }

  // Sensor noise and clamp, both modalities.
  auto add_noise = [&](Eigen::MatrixXd& m) {
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j)
        m(i, j) = std::clamp(m(i, j) + rng.normal(0.0, 0.02), 0.0, 1.0);
  };
  add_noise(th.v);
  add_noise(rgb.r);
  add_noise(rgb.g);
  add_noise(rgb.b);

  scene.thermal = std::move(th);
  scene.rgb = std::move(rgb);
  return scene;
}

std::vector<int> corpus_counts(const CorpusConfig& cfg) {
  if (cfg.count_min < 1 || cfg.count_max > 12 || cfg.count_min > cfg.count_max)
    throw InvalidSpec("count range must satisfy 1 <= min <= max <= 12");
  Rng rng(derive_seed(cfg.seed, 0xC0117));
  std::vector<int> counts;
  for (Species sp : kAllSpecies) {
    const auto it = cfg.n_per_species.find(species_name(sp));
    const int n = it == cfg.n_per_species.end() ? 0 : it->second;
    for (int i = 0; i < n; ++i)
      counts.push_back(static_cast<int>(rng.uniform_int(cfg.count_min, cfg.count_max)));
  }
  return counts;
}

std::vector<CorpusRecord> generate_corpus(const CorpusConfig& cfg,
                                          const std::string& out_dir) {
  for (const auto& [name, n] : cfg.n_per_species) {
    if (!species_from_name(name)) throw InvalidSpec("unknown species: " + name);
    if (n < 0) throw InvalidSpec("negative scene count for " + name);
  }
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "thermal", ec);
  if (ec) throw IoError("cannot create " + out_dir + "/thermal: " + ec.message());
  fs::create_directories(fs::path(out_dir) / "rgb", ec);
  if (ec) throw IoError("cannot create " + out_dir + "/rgb: " + ec.message());

  const std::vector<int> counts = corpus_counts(cfg);
  std::vector<CorpusRecord> records;
  std::size_t count_idx = 0;
  std::uint64_t scene_index = 0;
  for (Species sp : kAllSpecies) {
    const auto it = cfg.n_per_species.find(species_name(sp));
    const int n = it == cfg.n_per_species.end() ? 0 : it->second;
    for (int i = 0; i < n; ++i, ++scene_index) {
      SceneSpec spec;
      spec.seed = derive_seed(cfg.seed, scene_index + 1);
      spec.width = cfg.width;
      spec.height = cfg.height;
      spec.species = sp;
      spec.count = counts[count_idx++];
      spec.glyph_scale = cfg.glyph_scale;
      spec.allow_overlap = cfg.allow_overlap;
      spec.placement_margin = cfg.placement_margin;
      const SyntheticScene scene = generate_scene(spec);

      char idbuf[32];
      std::snprintf(idbuf, sizeof(idbuf), "%s_%04d", species_name(sp), i);
      CorpusRecord rec;
      rec.image_id = idbuf;
      rec.image = std::string("thermal/") + idbuf + ".png";
      rec.rgb_image = std::string("rgb/") + idbuf + ".png";
      rec.species = species_name(sp);
      rec.count = spec.count;
      rec.seed = spec.seed;
      write_png((fs::path(out_dir) / rec.image).string(), scene.thermal);
      write_png((fs::path(out_dir) / rec.rgb_image).string(), scene.rgb);
      records.push_back(std::move(rec));
    }
  }

  nlohmann::ordered_json manifest;
  manifest["seed"] = cfg.seed;
  manifest["width"] = cfg.width;
  manifest["height"] = cfg.height;
  manifest["glyph_scale"] = cfg.glyph_scale;
  manifest["records"] = nlohmann::ordered_json::array();
  for (const auto& r : records) manifest["records"].push_back(record_to_json(r));

  const fs::path manifest_path = fs::path(out_dir) / "manifest.json";
  const fs::path tmp = manifest_path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << manifest.dump(2) << "\n";
  }
  fs::rename(tmp, manifest_path, ec);
  if (ec) throw IoError("rename failed for " + manifest_path.string());
  return records;
}

std::vector<CorpusRecord> load_corpus_manifest(const std::string& dir) {
  const fs::path path = fs::path(dir) / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad manifest " + path.string() + ": " + e.what());
  }
  std::vector<CorpusRecord> records;
  for (const auto& rj : j.at("records")) {
    CorpusRecord r;
    r.image_id = rj.at("image_id").get<std::string>();
    r.image = rj.at("image").get<std::string>();
    r.rgb_image = rj.at("rgb_image").get<std::string>();
    r.species = rj.at("species").get<std::string>();
    r.count = rj.at("count").get<int>();
    r.seed = rj.at("seed").get<std::uint64_t>();
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace thermalign
