#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "thermalign/common.hpp"
#include "thermalign/image.hpp"
#include "thermalign/rng.hpp"

namespace thermalign {

struct InvalidScale : Error {
  using Error::Error;
};
struct InvalidSpec : Error {
  using Error::Error;
};
struct PlacementFailure : Error {
  using Error::Error;
};

enum class Species { deer, rhino, elephant };

inline constexpr Species kAllSpecies[] = {Species::deer, Species::rhino,
                                          Species::elephant};

const char* species_name(Species s);           // "deer"
std::string species_capitalized(Species s);    // "Deer"
std::optional<Species> species_from_name(const std::string& lower);

using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// Binary silhouette on a (2*scale)^2 canvas. The angle is decomposed into a
// quarter-turn count plus a residual in [0,90): the residual is rasterized
// analytically and the quarter turns are applied as exact array rotations, so
// render_glyph(sp, s, a + 90) == rot90(render_glyph(sp, s, a)) holds exactly.
Mask render_glyph(Species species, int scale, double angle_deg);

Mask rot90(const Mask& m, int k);

struct SceneSpec {
  std::uint64_t seed = 0;
  int width = 64;
  int height = 64;
  Species species = Species::deer;
  int count = 1;
  int glyph_scale = 8;
  bool allow_overlap = false;
  int placement_margin = 1;
  void validate() const;  // throws InvalidSpec
};

struct SyntheticScene {
  GrayImage thermal;
  RgbImage rgb;       // same placements, species-colored render
  Mask foreground;    // union of placed glyph masks
  Species species = Species::deer;
  int count = 0;
  std::uint64_t seed = 0;
};

// Background intensity stays in [0, 0.2] before noise, glyph pixels in
// [0.8, 1.0]; both get N(0, 0.02) sensor noise and a clamp to [0,1]. Glyphs
// never touch: a one-pixel dilation of each mask stays disjoint from the rest.
SyntheticScene generate_scene(const SceneSpec& spec);

struct CorpusConfig {
  std::uint64_t seed = 1;
  std::map<std::string, int> n_per_species;  // keys: deer/rhino/elephant
  int width = 64;
  int height = 64;
  int glyph_scale = 8;
  int count_min = 1;
  int count_max = 12;
  bool allow_overlap = false;
  int placement_margin = 1;
};

struct CorpusRecord {
  std::string image_id;    // e.g. "deer_0000"
  std::string image;       // relative path of the thermal PNG
  std::string rgb_image;   // relative path of the RGB twin
  std::string species;
  int count = 0;
  std::uint64_t seed = 0;  // per-scene seed
};

// The per-record animal counts for a config, in manifest order. Pure; lets
// callers audit the count distribution without rendering anything.
std::vector<int> corpus_counts(const CorpusConfig& cfg);

// Renders every scene, writes thermal/ and rgb/ PNG trees plus manifest.json
// under out_dir, and returns the manifest records in deterministic order.
std::vector<CorpusRecord> generate_corpus(const CorpusConfig& cfg,
                                          const std::string& out_dir);

std::vector<CorpusRecord> load_corpus_manifest(const std::string& dir);

}  // namespace thermalign
