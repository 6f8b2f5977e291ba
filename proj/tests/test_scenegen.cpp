#include <filesystem>
#include <set>

#include "doctest.h"
#include "thermalign/scenegen.hpp"

using namespace thermalign;
namespace fs = std::filesystem;

namespace {

int mask_area(const Mask& m) {
  int area = 0;
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) area += m(i, j);
  return area;
}

Eigen::MatrixXd to_double(const Mask& m) { return m.cast<double>(); }

double mask_iou(const Mask& a, const Mask& b) {
  int inter = 0, uni = 0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) {
      inter += a(i, j) && b(i, j);
      uni += a(i, j) || b(i, j);
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

}  // namespace

TEST_CASE("species names round-trip") {
  for (Species sp : kAllSpecies) {
    CHECK(species_from_name(species_name(sp)) == sp);
    const std::string cap = species_capitalized(sp);
    CHECK(std::isupper(static_cast<unsigned char>(cap[0])));
  }
  CHECK_FALSE(species_from_name("zebra").has_value());
}

TEST_CASE("render_glyph is deterministic and sized 2*scale") {
  const Mask a = render_glyph(Species::rhino, 8, 123.4);
  const Mask b = render_glyph(Species::rhino, 8, 123.4);
  CHECK(a == b);
  CHECK(a.rows() == 16);
  CHECK(a.cols() == 16);
}

TEST_CASE("rotating the angle by 90 degrees rotates the raster exactly") {
  for (Species sp : kAllSpecies)
    for (int scale : {4, 8, 12})
      for (double angle : {0.0, 17.3, 45.0, 89.999, 200.0}) {
        const Mask base = render_glyph(sp, scale, angle);
        CHECK(render_glyph(sp, scale, angle + 90.0) == rot90(base, 1));
        CHECK(render_glyph(sp, scale, angle + 360.0) == base);
        CHECK(render_glyph(sp, scale, angle - 360.0) == base);
      }
}

TEST_CASE("glyph silhouettes stay 8-connected across scales and angles") {
  for (Species sp : kAllSpecies)
    for (int scale : {4, 6, 8, 12, 16})
      for (double angle : {0.0, 33.0, 60.0, 287.5}) {
        const Mask m = render_glyph(sp, scale, angle);
        CAPTURE(species_name(sp));
        CAPTURE(scale);
        CAPTURE(angle);
        CHECK(count_components(to_double(m), 0.5) == 1);
      }
}

TEST_CASE("glyph areas at scale 8 are pinned and ordered by species size") {
  const int deer = mask_area(render_glyph(Species::deer, 8, 0.0));
  const int rhino = mask_area(render_glyph(Species::rhino, 8, 0.0));
  const int elephant = mask_area(render_glyph(Species::elephant, 8, 0.0));
  CHECK(deer == 50);
  CHECK(rhino == 68);
  CHECK(elephant == 102);
  CHECK(deer < rhino);
  CHECK(rhino < elephant);
}

TEST_CASE("species silhouettes are mutually distinct") {
  const Mask d = render_glyph(Species::deer, 8, 0.0);
  const Mask r = render_glyph(Species::rhino, 8, 0.0);
  const Mask e = render_glyph(Species::elephant, 8, 0.0);
  CHECK(mask_iou(d, r) < 0.7);
  CHECK(mask_iou(d, e) < 0.7);
  CHECK(mask_iou(r, e) < 0.7);
}

TEST_CASE("render_glyph rejects tiny scales") {
  CHECK_THROWS_AS(render_glyph(Species::deer, 3, 0.0), InvalidScale);
  CHECK_THROWS_AS(render_glyph(Species::deer, 0, 0.0), InvalidScale);
  CHECK_THROWS_AS(render_glyph(Species::deer, -8, 0.0), InvalidScale);
}

TEST_CASE("scene spec validation") {
  SceneSpec spec;
  spec.seed = 1;
  CHECK_NOTHROW(spec.validate());
  SceneSpec bad = spec;
  bad.count = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidSpec);
  bad = spec;
  bad.count = 13;
  CHECK_THROWS_AS(bad.validate(), InvalidSpec);
  bad = spec;
  bad.glyph_scale = 32;  // canvas would cover the whole scene
  CHECK_THROWS_AS(bad.validate(), InvalidSpec);
  bad = spec;
  bad.glyph_scale = 3;
  CHECK_THROWS_AS(bad.validate(), InvalidScale);
}

TEST_CASE("generate_scene is a pure function of the spec") {
  SceneSpec spec;
  spec.seed = 77;
  spec.species = Species::elephant;
  spec.count = 5;
  const SyntheticScene a = generate_scene(spec);
  const SyntheticScene b = generate_scene(spec);
  CHECK(a.thermal.v == b.thermal.v);
  CHECK(a.rgb.r == b.rgb.r);
  CHECK(a.rgb.g == b.rgb.g);
  CHECK(a.rgb.b == b.rgb.b);
  CHECK(a.foreground == b.foreground);
  SceneSpec other = spec;
  other.seed = 78;
  CHECK(generate_scene(other).thermal.v != a.thermal.v);
}

TEST_CASE("scenes contain exactly count separated animals") {
  for (Species sp : kAllSpecies)
    for (int count : {1, 3, 7, 12})
      for (std::uint64_t seed : {10ull, 20ull, 30ull}) {
        SceneSpec spec;
        spec.seed = seed;
        spec.species = sp;
        spec.count = count;
        const SyntheticScene scene = generate_scene(spec);
        CAPTURE(species_name(sp));
        CAPTURE(count);
        CAPTURE(seed);
        CHECK(scene.count == count);
        // never-touch invariant: distinct glyphs stay distinct components
        CHECK(count_components(to_double(scene.foreground), 0.5) == count);
        // the thermal image itself segments at mid threshold
        CHECK(count_components(scene.thermal.v, 0.5) == count);
      }
}

TEST_CASE("thermal scenes are bright animals on a dark background") {
  SceneSpec spec;
  spec.seed = 5;
  spec.species = Species::rhino;
  spec.count = 4;
  const SyntheticScene scene = generate_scene(spec);
  double fg_sum = 0, bg_sum = 0;
  int fg_n = 0, bg_n = 0;
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j) {
      if (scene.foreground(i, j)) {
        fg_sum += scene.thermal.v(i, j);
        ++fg_n;
      } else {
        bg_sum += scene.thermal.v(i, j);
        ++bg_n;
      }
    }
  CHECK(fg_sum / fg_n > 0.7);
  CHECK(bg_sum / bg_n < 0.3);
  // all values clamped to [0,1]
  CHECK(scene.thermal.v.minCoeff() >= 0.0);
  CHECK(scene.thermal.v.maxCoeff() <= 1.0);
}

TEST_CASE("rgb twin uses the same placements") {
  SceneSpec spec;
  spec.seed = 9;
  spec.species = Species::deer;
  spec.count = 6;
  // Foreground is brighter than background in every scene, but hue carries
  // no class information: across seeds the dominant background channel must
  // vary, otherwise a fixed channel pattern would leak into the features.
  int bg_red_dominant = 0, bg_green_dominant = 0;
  for (int seed = 1; seed <= 24; ++seed) {
    spec.seed = seed;
    const SyntheticScene scene = generate_scene(spec);
    double fg_lum = 0, bg_lum = 0, bg_r = 0, bg_g = 0;
    int fg_n = 0, bg_n = 0;
    for (int i = 0; i < 64; ++i)
      for (int j = 0; j < 64; ++j) {
        const double lum =
            (scene.rgb.r(i, j) + scene.rgb.g(i, j) + scene.rgb.b(i, j)) / 3.0;
        if (scene.foreground(i, j)) {
          fg_lum += lum;
          ++fg_n;
        } else {
          bg_lum += lum;
          bg_r += scene.rgb.r(i, j);
          bg_g += scene.rgb.g(i, j);
          ++bg_n;
        }
      }
    CAPTURE(seed);
    CHECK(fg_lum / fg_n > bg_lum / bg_n + 0.2);
    CHECK(scene.rgb.r.minCoeff() >= 0.0);
    CHECK(scene.rgb.r.maxCoeff() <= 1.0);
    CHECK(scene.rgb.g.minCoeff() >= 0.0);
    CHECK(scene.rgb.b.maxCoeff() <= 1.0);
    if (bg_r > bg_g) ++bg_red_dominant;
    if (bg_g > bg_r) ++bg_green_dominant;
  }
  CHECK(bg_red_dominant >= 3);
  CHECK(bg_green_dominant >= 3);
}

TEST_CASE("impossible placements fail loudly") {
  SceneSpec spec;
  spec.seed = 1;
  spec.species = Species::elephant;
  spec.count = 12;
  spec.glyph_scale = 15;  // 12 elephants at this scale exceed the scene area
  CHECK_THROWS_AS(generate_scene(spec), PlacementFailure);
}

TEST_CASE("corpus_counts is pure and respects the range") {
  CorpusConfig cfg;
  cfg.seed = 1;
  cfg.n_per_species = {{"deer", 100}, {"rhino", 100}, {"elephant", 100}};
  cfg.count_min = 2;
  cfg.count_max = 5;
  const auto a = corpus_counts(cfg);
  const auto b = corpus_counts(cfg);
  CHECK(a == b);
  CHECK(a.size() == 300);
  for (int c : a) {
    CHECK(c >= 2);
    CHECK(c <= 5);
  }
  CHECK_THROWS_AS(corpus_counts([] {
                    CorpusConfig bad;
                    bad.count_min = 0;
                    return bad;
                  }()),
                  InvalidSpec);
}

TEST_CASE("standard corpus counts are uniform over 1..12 by chi-squared") {
  CorpusConfig cfg;
  cfg.seed = 1;
  cfg.n_per_species = {{"deer", 600}, {"rhino", 600}, {"elephant", 600}};
  const auto counts = corpus_counts(cfg);
  REQUIRE(counts.size() == 1800);
  double hist[13] = {0};
  for (int c : counts) hist[c] += 1;
  const double expected = 1800.0 / 12.0;
  double chi2 = 0;
  for (int c = 1; c <= 12; ++c)
    chi2 += (hist[c] - expected) * (hist[c] - expected) / expected;
  // chi-squared critical value, 11 degrees of freedom, alpha = 0.01
  CHECK(chi2 < 24.724970311318277);
}

TEST_CASE("generate_corpus writes a reproducible manifest and images") {
  const fs::path dir = fs::temp_directory_path() / "thermalign_corpus_test";
  fs::remove_all(dir);
  CorpusConfig cfg;
  cfg.seed = 3;
  cfg.n_per_species = {{"deer", 3}, {"rhino", 2}, {"elephant", 1}};
  cfg.count_max = 4;
  const auto records = generate_corpus(cfg, dir.string());
  REQUIRE(records.size() == 6);
  CHECK(records[0].image_id == "deer_0000");
  CHECK(records[2].image_id == "deer_0002");
  CHECK(records[3].image_id == "rhino_0000");
  CHECK(records[5].image_id == "elephant_0000");
  CHECK(records[0].image == "thermal/deer_0000.png");
  CHECK(records[0].rgb_image == "rgb/deer_0000.png");

  const auto loaded = load_corpus_manifest(dir.string());
  REQUIRE(loaded.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(loaded[i].image_id == records[i].image_id);
    CHECK(loaded[i].image == records[i].image);
    CHECK(loaded[i].rgb_image == records[i].rgb_image);
    CHECK(loaded[i].species == records[i].species);
    CHECK(loaded[i].count == records[i].count);
    CHECK(loaded[i].seed == records[i].seed);
  }

  // a scene re-rendered from its manifest seed matches the PNG on disk
  const CorpusRecord& rec = records[4];
  SceneSpec spec;
  spec.seed = rec.seed;
  spec.species = *species_from_name(rec.species);
  spec.count = rec.count;
  const SyntheticScene scene = generate_scene(spec);
  const AnyImage disk = read_png((dir / rec.image).string());
  REQUIRE_FALSE(disk.is_rgb);
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j)
      CHECK(disk.gray.v(i, j) ==
            doctest::Approx(quantize8(scene.thermal.v(i, j))).epsilon(1e-12));
  fs::remove_all(dir);
}

TEST_CASE("generate_corpus rejects unknown species") {
  CorpusConfig cfg;
  cfg.n_per_species = {{"zebra", 5}};
  CHECK_THROWS_AS(generate_corpus(cfg, "/tmp/thermalign_never_created"), InvalidSpec);
}
