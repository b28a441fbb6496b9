#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hsnn/common.hpp"
#include "hsnn/rng.hpp"

namespace hsnn {

// Bundled deterministic toy-task generators. Same spec -> same bytes.
struct DatasetSpec {
  std::string id = "spiral";  // spiral | clusters | digits
  index_t n_train = 1024;
  index_t n_val = 512;
  std::uint64_t seed = 1;
  double noise = 0.12;
  index_t features = 16;  // spiral only: 2 raw coordinates or the 16-feature lift
  double turns = 1.75;    // spiral winding
};

struct Dataset {
  index_t feature_dim = 0;
  index_t num_classes = 0;
  std::vector<std::vector<double>> train_x, val_x;
  std::vector<index_t> train_y, val_y;
};

namespace detail {

// Closed-form lift of a 2-D point to 16 features. The trig-of-radius terms
// give a sparse model a fighting chance on the spiral without handing it the
// label: arm membership still needs learned products of these coordinates.
inline std::vector<double> spiral_lift(double x, double y, double omega) {
  const double r = std::sqrt(x * x + y * y);
  const double theta = std::atan2(y, x);
  return {x,
          y,
          x * x,
          y * y,
          x * y,
          r,
          r * r,
          std::sin(theta),
          std::cos(theta),
          std::sin(2.0 * theta),
          std::cos(2.0 * theta),
          std::sin(omega * r),
          std::cos(omega * r),
          std::sin(2.0 * omega * r),
          std::cos(2.0 * omega * r),
          std::tanh(2.0 * r)};
}

inline void make_spiral_split(Rng& rng, const DatasetSpec& spec, index_t n,
                              std::vector<std::vector<double>>& X, std::vector<index_t>& y) {
  const double omega = spec.turns * 2.0 * M_PI;
  for (index_t i = 0; i < n; ++i) {
    const index_t cls = static_cast<index_t>(rng.below(2));
    const double t = rng.uniform(0.15, 1.0);
    const double theta = spec.turns * 2.0 * M_PI * t + static_cast<double>(cls) * M_PI;
    double px = t * std::cos(theta) + spec.noise * rng.normal();
    double py = t * std::sin(theta) + spec.noise * rng.normal();
    if (spec.features == 16)
      X.push_back(spiral_lift(px, py, omega));
    else
      X.push_back({px, py});
    y.push_back(cls);
  }
}

inline void make_clusters_split(Rng& rng, const DatasetSpec& spec, index_t n,
                                std::vector<std::vector<double>>& X, std::vector<index_t>& y) {
  for (index_t i = 0; i < n; ++i) {
    const index_t cls = static_cast<index_t>(rng.below(2));
    const double cx = cls == 0 ? -0.8 : 0.8;
    const double cy = cls == 0 ? -0.8 : 0.8;
    X.push_back({cx + spec.noise * rng.normal() * 3.0, cy + spec.noise * rng.normal() * 3.0});
    y.push_back(cls);
  }
}

// 8x8 glyph templates for the ten digits; '#' = bright pixel.
inline const char* digit_glyph(index_t d) {
  static const char* glyphs[10] = {
      ".####..."
      "#....#.."
      "#....#.."
      "#....#.."
      "#....#.."
      "#....#.."
      ".####..."
      "........",
      "...#...."
      "..##...."
      "...#...."
      "...#...."
      "...#...."
      "...#...."
      ".#####.."
      "........",
      ".####..."
      "#....#.."
      ".....#.."
      "...##..."
      "..#....."
      ".#......"
      "######.."
      "........",
      ".####..."
      "#....#.."
      ".....#.."
      "..###..."
      ".....#.."
      "#....#.."
      ".####..."
      "........",
      "....##.."
      "...#.#.."
      "..#..#.."
      ".#...#.."
      "######.."
      ".....#.."
      ".....#.."
      "........",
      "######.."
      "#......."
      "#####..."
      ".....#.."
      ".....#.."
      "#....#.."
      ".####..."
      "........",
      ".####..."
      "#......."
      "#......."
      "#####..."
      "#....#.."
      "#....#.."
      ".####..."
      "........",
      "######.."
      ".....#.."
      "....#..."
      "...#...."
      "..#....."
      "..#....."
      "..#....."
      "........",
      ".####..."
      "#....#.."
      "#....#.."
      ".####..."
      "#....#.."
      "#....#.."
      ".####..."
      "........",
      ".####..."
      "#....#.."
      "#....#.."
      ".#####.."
      ".....#.."
      ".....#.."
      ".####..."
      "........"};
  return glyphs[static_cast<std::size_t>(d)];
}

inline void make_digits_split(Rng& rng, const DatasetSpec& spec, index_t n,
                              std::vector<std::vector<double>>& X, std::vector<index_t>& y) {
  for (index_t i = 0; i < n; ++i) {
    const index_t cls = static_cast<index_t>(rng.below(10));
    const char* glyph = digit_glyph(cls);
    const double scale = rng.uniform(0.85, 1.15);
    std::vector<double> img(64);
    for (index_t p = 0; p < 64; ++p)
      img[static_cast<std::size_t>(p)] =
          (glyph[p] == '#' ? scale : 0.0) + spec.noise * rng.normal();
    X.push_back(std::move(img));
    y.push_back(cls);
  }
}

}  // namespace detail

inline Dataset make_dataset(const DatasetSpec& spec) {
  Dataset d;
  Rng rng(spec.seed);
  if (spec.id == "spiral") {
    if (spec.features != 2 && spec.features != 16)
      throw ConfigError("spiral features must be 2 or 16");
    d.feature_dim = spec.features;
    d.num_classes = 2;
    detail::make_spiral_split(rng, spec, spec.n_train, d.train_x, d.train_y);
    detail::make_spiral_split(rng, spec, spec.n_val, d.val_x, d.val_y);
  } else if (spec.id == "clusters") {
    d.feature_dim = 2;
    d.num_classes = 2;
    detail::make_clusters_split(rng, spec, spec.n_train, d.train_x, d.train_y);
    detail::make_clusters_split(rng, spec, spec.n_val, d.val_x, d.val_y);
  } else if (spec.id == "digits") {
    d.feature_dim = 64;
    d.num_classes = 10;
    detail::make_digits_split(rng, spec, spec.n_train, d.train_x, d.train_y);
    detail::make_digits_split(rng, spec, spec.n_val, d.val_x, d.val_y);
  } else {
    throw ConfigError("unknown dataset id: " + spec.id);
  }
  return d;
}

}  // namespace hsnn
