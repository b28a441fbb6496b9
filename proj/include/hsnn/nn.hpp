#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hsnn/common.hpp"
#include "hsnn/hcsr.hpp"
#include "hsnn/kernels.hpp"

namespace hsnn {

enum class LayerKind { sparse_linear, dense_linear, normalization, activation };
enum class Activation { relu, tanh, softmax_output, none };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::sparse_linear: return "sparse_linear";
    case LayerKind::dense_linear: return "dense_linear";
    case LayerKind::normalization: return "normalization";
    case LayerKind::activation: return "activation";
  }
  return "?";
}

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::softmax_output: return "softmax_output";
    case Activation::none: return "none";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "softmax_output") return Activation::softmax_output;
  if (s == "none") return Activation::none;
  throw ConfigError("unknown activation: " + s);
}

struct LayerSpec {
  LayerKind kind;
  index_t in_dim = 0;
  index_t out_dim = 0;
  Activation activation = Activation::none;
};

// Identifies one trained reroute variant: parameters a layer uses when an
// inference switched to `level` at block boundary `switch_point`.
struct VariantKey {
  index_t switch_point;
  SparsityLevel level;
  bool operator<(const VariantKey& o) const {
    return switch_point != o.switch_point ? switch_point < o.switch_point : level < o.level;
  }
  bool operator==(const VariantKey& o) const {
    return switch_point == o.switch_point && level == o.level;
  }
};

struct SparseLinearLayer {
  HcsrMatrix weights;                                        // out_dim x in_dim
  std::vector<std::vector<double>> per_level_bias;           // num_levels x out_dim
  std::map<VariantKey, std::vector<double>> reroute_bias_variants;
};

// Unpruned linear layer; weights shared across levels, biases per level.
struct DenseLinearLayer {
  DenseMatrix weights;
  std::vector<std::vector<double>> per_level_bias;
  std::map<VariantKey, std::vector<double>> reroute_bias_variants;
};

struct NormParams {
  std::vector<double> scale, shift, running_mean, running_var;
};

struct NormalizationLayer {
  std::vector<NormParams> per_level;
  std::map<VariantKey, NormParams> variants;
};

inline constexpr double kNormEps = 1e-5;

struct Layer {
  LayerSpec spec;
  index_t block = 0;  // switch points sit at block boundaries
  std::optional<SparseLinearLayer> sparse;
  std::optional<DenseLinearLayer> dense;
  std::optional<NormalizationLayer> norm;
};

struct MultiLevelModel {
  index_t num_levels = 1;
  index_t num_blocks = 0;
  std::vector<Layer> layers;
  std::vector<index_t> switch_points;     // strictly increasing, in [0, num_blocks]
  std::vector<double> level_densities;    // training targets; empty when unknown
  nlohmann::json provenance;              // plan echo, seed, accuracies

  bool has_switch_point(index_t p) const {
    return std::find(switch_points.begin(), switch_points.end(), p) != switch_points.end();
  }
};

struct InferencePlan {
  enum class Mode { fixed_level, reroute };
  Mode mode = Mode::fixed_level;
  SparsityLevel level = 0;
  index_t switch_point = 0;
  SparsityLevel from_level = 0;
  SparsityLevel to_level = 0;

  static InferencePlan fixed(SparsityLevel k) {
    InferencePlan p;
    p.mode = Mode::fixed_level;
    p.level = k;
    return p;
  }
  static InferencePlan reroute(index_t sp, SparsityLevel from, SparsityLevel to) {
    if (from <= to)
      throw ConfigError("reroute must go from a less sparse to a more sparse level");
    InferencePlan p;
    p.mode = Mode::reroute;
    p.switch_point = sp;
    p.from_level = from;
    p.to_level = to;
    return p;
  }

  std::string id() const {
    std::ostringstream os;
    if (mode == Mode::fixed_level)
      os << "fixed:" << level;
    else
      os << "reroute:p" << switch_point << ":" << from_level << "->" << to_level;
    return os.str();
  }
};

// --- model construction helpers -------------------------------------------------

inline void check_model(const MultiLevelModel& m) {
  index_t dim = -1;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const auto& l = m.layers[li];
    if (dim >= 0 && l.spec.in_dim != dim) {
      std::ostringstream os;
      os << "layer " << li << ": in_dim " << l.spec.in_dim << " != previous out_dim " << dim;
      throw ShapeError(os.str());
    }
    dim = l.spec.out_dim;
    if (l.spec.kind == LayerKind::sparse_linear) {
      if (!l.sparse) throw ShapeError("sparse layer without parameters");
      if (l.sparse->weights.rows != l.spec.out_dim || l.sparse->weights.cols != l.spec.in_dim)
        throw ShapeError("sparse layer weight shape mismatch");
      if (l.sparse->weights.num_levels != m.num_levels)
        throw ShapeError("sparse layer level count mismatch");
      if (static_cast<index_t>(l.sparse->per_level_bias.size()) != m.num_levels)
        throw ShapeError("sparse layer bias level count mismatch");
    }
  }
  for (std::size_t i = 1; i < m.switch_points.size(); ++i)
    if (m.switch_points[i] <= m.switch_points[i - 1])
      throw ConfigError("switch points must be strictly increasing");
}

// --- forward ---------------------------------------------------------------------

namespace detail {

inline void apply_activation(Activation a, std::vector<double>& v) {
  switch (a) {
    case Activation::relu:
      for (auto& x : v) x = x > 0.0 ? x : 0.0;
      break;
    case Activation::tanh:
      for (auto& x : v) x = std::tanh(x);
      break;
    case Activation::softmax_output: {
      double mx = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
      double sum = 0.0;
      for (auto& x : v) {
        x = std::exp(x - mx);
        sum += x;
      }
      for (auto& x : v) x /= sum;
      break;
    }
    case Activation::none:
      break;
  }
}

template <typename T>
const T& variant_or_base(const std::map<VariantKey, T>& variants, const std::vector<T>& base,
                         bool use_variant, const VariantKey& key, SparsityLevel level) {
  if (!use_variant) return base[static_cast<std::size_t>(level)];
  auto it = variants.find(key);
  if (it == variants.end()) {
    std::ostringstream os;
    os << "missing reroute variant parameters for switch point " << key.switch_point
       << " at level " << key.level;
    throw ConfigError(os.str());
  }
  return it->second;
}

}  // namespace detail

struct ForwardResult {
  std::vector<double> output;
  CostCounter cost;
};

// Runs one input through the model. Fixed plans use one level's weights and
// auxiliary parameters throughout. Reroute plans run blocks before the switch
// point at from_level with base parameters and the rest at to_level with the
// (switch_point, to_level) variant parameters.
inline ForwardResult forward(const MultiLevelModel& m, const std::vector<double>& input,
                             const InferencePlan& plan) {
  if (plan.mode == InferencePlan::Mode::fixed_level) {
    if (plan.level < 0 || plan.level >= m.num_levels)
      throw LevelRangeError("inference level out of range");
  } else {
    if (plan.from_level >= m.num_levels || plan.to_level < 0)
      throw LevelRangeError("reroute levels out of range");
    if (!m.has_switch_point(plan.switch_point)) {
      std::ostringstream os;
      os << "switch point " << plan.switch_point << " is not registered on this model";
      throw ConfigError(os.str());
    }
  }

  ForwardResult r;
  std::vector<double> x = input;
  for (const auto& l : m.layers) {
    const bool after_switch =
        plan.mode == InferencePlan::Mode::reroute && l.block >= plan.switch_point;
    const SparsityLevel level = plan.mode == InferencePlan::Mode::fixed_level
                                    ? plan.level
                                    : (after_switch ? plan.to_level : plan.from_level);
    const VariantKey key{plan.switch_point, plan.to_level};

    if (static_cast<index_t>(x.size()) != l.spec.in_dim)
      throw ShapeError("forward: input dimension mismatch");

    switch (l.spec.kind) {
      case LayerKind::sparse_linear: {
        auto y = spmv(l.sparse->weights, level, x, r.cost);
        const auto& bias = detail::variant_or_base(l.sparse->reroute_bias_variants,
                                                   l.sparse->per_level_bias, after_switch, key, level);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias[i];
        detail::apply_activation(l.spec.activation, y);
        x = std::move(y);
        break;
      }
      case LayerKind::dense_linear: {
        const auto& w = l.dense->weights;
        std::vector<double> y(static_cast<std::size_t>(w.rows), 0.0);
        for (index_t i = 0; i < w.rows; ++i) {
          double acc = 0.0;
          for (index_t j = 0; j < w.cols; ++j) acc += w.at(i, j) * x[static_cast<std::size_t>(j)];
          y[static_cast<std::size_t>(i)] = acc;
        }
        r.cost.flops += 2ll * w.rows * w.cols;
        r.cost.value_bytes_touched += 8ll * w.rows * w.cols;
        const auto& bias = detail::variant_or_base(l.dense->reroute_bias_variants,
                                                   l.dense->per_level_bias, after_switch, key, level);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias[i];
        detail::apply_activation(l.spec.activation, y);
        x = std::move(y);
        break;
      }
      case LayerKind::normalization: {
        const NormParams* p;
        if (after_switch) {
          auto it = l.norm->variants.find(key);
          if (it == l.norm->variants.end())
            throw ConfigError("missing reroute variant normalization parameters");
          p = &it->second;
        } else {
          p = &l.norm->per_level[static_cast<std::size_t>(level)];
        }
        for (std::size_t i = 0; i < x.size(); ++i)
          x[i] = (x[i] - p->running_mean[i]) / std::sqrt(p->running_var[i] + kNormEps) * p->scale[i] +
                 p->shift[i];
        detail::apply_activation(l.spec.activation, x);
        break;
      }
      case LayerKind::activation:
        detail::apply_activation(l.spec.activation, x);
        break;
    }
  }
  r.output = std::move(x);
  return r;
}

// --- cost accounting --------------------------------------------------------------

struct ModelCosts {
  // [level][layer]: multiply-accumulate flops and nonzero weight counts.
  std::vector<std::vector<long long>> layer_flops;
  std::vector<std::vector<long long>> layer_weights;
  std::vector<index_t> block_of_layer;
  index_t num_blocks = 0;
  std::vector<index_t> switch_points;
  long long dense_flops = 0;    // fully dense counterpart, for percentages
  long long dense_weights = 0;

  long long level_flops(SparsityLevel k) const {
    long long s = 0;
    for (long long f : layer_flops[static_cast<std::size_t>(k)]) s += f;
    return s;
  }
  long long level_weights(SparsityLevel k) const {
    long long s = 0;
    for (long long w : layer_weights[static_cast<std::size_t>(k)]) s += w;
    return s;
  }
  long long reroute_flops(index_t p, SparsityLevel from, SparsityLevel to) const {
    long long s = 0;
    for (std::size_t li = 0; li < block_of_layer.size(); ++li) {
      const SparsityLevel k = block_of_layer[li] >= p ? to : from;
      s += layer_flops[static_cast<std::size_t>(k)][li];
    }
    return s;
  }
  long long reroute_weights(index_t p, SparsityLevel from, SparsityLevel to) const {
    long long s = 0;
    for (std::size_t li = 0; li < block_of_layer.size(); ++li) {
      const SparsityLevel k = block_of_layer[li] >= p ? to : from;
      s += layer_weights[static_cast<std::size_t>(k)][li];
    }
    return s;
  }
};

// Exact per-layer cost table. Linear layers count 2*nnz flops per input;
// normalization and activation layers count none (they are a sliver of both
// weights and flops, as in typical model accounting).
inline ModelCosts model_costs(const MultiLevelModel& m) {
  ModelCosts c;
  c.num_blocks = m.num_blocks;
  c.switch_points = m.switch_points;
  c.layer_flops.assign(static_cast<std::size_t>(m.num_levels), {});
  c.layer_weights.assign(static_cast<std::size_t>(m.num_levels), {});
  for (const auto& l : m.layers) {
    c.block_of_layer.push_back(l.block);
    for (SparsityLevel k = 0; k < m.num_levels; ++k) {
      long long flops = 0, weights = 0;
      if (l.spec.kind == LayerKind::sparse_linear) {
        const long long nnz = l.sparse->weights.nnz(k);
        flops = 2 * nnz;
        weights = nnz;
      } else if (l.spec.kind == LayerKind::dense_linear) {
        flops = 2ll * l.spec.in_dim * l.spec.out_dim;
        weights = static_cast<long long>(l.spec.in_dim) * l.spec.out_dim;
      }
      c.layer_flops[static_cast<std::size_t>(k)].push_back(flops);
      c.layer_weights[static_cast<std::size_t>(k)].push_back(weights);
    }
    if (l.spec.kind == LayerKind::sparse_linear || l.spec.kind == LayerKind::dense_linear) {
      c.dense_flops += 2ll * l.spec.in_dim * l.spec.out_dim;
      c.dense_weights += static_cast<long long>(l.spec.in_dim) * l.spec.out_dim;
    }
  }
  return c;
}

struct PlanCostRow {
  std::string plan_id;
  long long flops = 0;
  long long weights = 0;
};

// One row per fixed level and per (switch point, from->to) reroute plan.
inline std::vector<PlanCostRow> flops_per_level(const MultiLevelModel& m) {
  const auto c = model_costs(m);
  std::vector<PlanCostRow> rows;
  for (SparsityLevel k = 0; k < m.num_levels; ++k)
    rows.push_back({InferencePlan::fixed(k).id(), c.level_flops(k), c.level_weights(k)});
  for (index_t p : m.switch_points)
    for (SparsityLevel from = 1; from < m.num_levels; ++from)
      for (SparsityLevel to = 0; to < from; ++to)
        rows.push_back({InferencePlan::reroute(p, from, to).id(), c.reroute_flops(p, from, to),
                        c.reroute_weights(p, from, to)});
  return rows;
}

// --- extraction --------------------------------------------------------------------

// Standalone single-level model. Sparse weights are re-encoded canonically;
// forward outputs stay bit-identical because kernels accumulate rows in
// ascending column order either way.
inline MultiLevelModel extract_submodel(const MultiLevelModel& m, SparsityLevel level) {
  if (level < 0 || level >= m.num_levels) throw LevelRangeError("extract_submodel: level out of range");
  MultiLevelModel out;
  out.num_levels = 1;
  out.num_blocks = m.num_blocks;
  if (!m.level_densities.empty())
    out.level_densities = {m.level_densities[static_cast<std::size_t>(level)]};
  out.provenance = m.provenance;
  out.provenance["extracted_level"] = level;
  for (const auto& l : m.layers) {
    Layer n;
    n.spec = l.spec;
    n.block = l.block;
    switch (l.spec.kind) {
      case LayerKind::sparse_linear: {
        SparseLinearLayer s;
        const auto dense_level = decode(l.sparse->weights, level);
        LevelMaskSet masks = LevelMaskSet::zeros(dense_level.rows, dense_level.cols, 1);
        for (index_t i = 0; i < dense_level.rows * dense_level.cols; ++i)
          masks.masks[0][static_cast<std::size_t>(i)] =
              dense_level.values[static_cast<std::size_t>(i)] != 0.0;
        s.weights = encode(dense_level, masks);
        s.per_level_bias = {l.sparse->per_level_bias[static_cast<std::size_t>(level)]};
        n.sparse = std::move(s);
        break;
      }
      case LayerKind::dense_linear: {
        DenseLinearLayer dl;
        dl.weights = l.dense->weights;
        dl.per_level_bias = {l.dense->per_level_bias[static_cast<std::size_t>(level)]};
        n.dense = std::move(dl);
        break;
      }
      case LayerKind::normalization: {
        NormalizationLayer nl;
        nl.per_level = {l.norm->per_level[static_cast<std::size_t>(level)]};
        n.norm = std::move(nl);
        break;
      }
      case LayerKind::activation:
        break;
    }
    out.layers.push_back(std::move(n));
  }
  return out;
}

// --- hierarchy verification ----------------------------------------------------------

struct FrozenEntry {
  index_t row = 0;
  index_t col = 0;
  double value = 0.0;
  SparsityLevel level = 0;  // sparsest level that must contain the entry
};

// Per sparse layer (in model layer order), the weights that must never change.
using FrozenReference = std::vector<std::vector<FrozenEntry>>;

struct HierarchyViolation {
  enum class Kind { structure, level_count, nesting, value_mismatch, density, frozen_mismatch };
  Kind kind;
  index_t layer = -1;
  index_t level = -1;
  index_t row = -1;
  index_t col = -1;
  std::string message;
};

struct HierarchyReport {
  bool ok = true;
  std::vector<HierarchyViolation> violations;
  std::vector<std::vector<double>> layer_level_density;  // [sparse layer][level]
};

struct VerifyOptions {
  double density_tolerance = 0.005;          // ±0.5 percentage points
  std::vector<double> expected_densities;    // empty: compare to across-layer mean
  const FrozenReference* frozen_reference = nullptr;
  ValidateOptions validate_options;
};

inline HierarchyReport verify_hierarchy(const MultiLevelModel& m, const VerifyOptions& opts = {}) {
  HierarchyReport rep;
  auto add = [&rep](HierarchyViolation::Kind kind, index_t layer, index_t level, index_t row,
                    index_t col, std::string msg) {
    rep.ok = false;
    rep.violations.push_back({kind, layer, level, row, col, std::move(msg)});
  };

  std::size_t sparse_idx = 0;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const auto& l = m.layers[li];
    if (l.spec.kind != LayerKind::sparse_linear) continue;
    const auto& w = l.sparse->weights;

    for (const auto& v : validate(w, opts.validate_options))
      add(HierarchyViolation::Kind::structure, static_cast<index_t>(li), v.level, v.row, v.col,
          v.message);
    if (w.num_levels != m.num_levels)
      add(HierarchyViolation::Kind::level_count, static_cast<index_t>(li), w.num_levels, -1, -1,
          "layer level count differs from model");

    // nesting and shared values, checked through the decode route
    std::vector<DenseMatrix> decoded;
    for (SparsityLevel k = 0; k < w.num_levels; ++k) decoded.push_back(decode(w, k));
    for (SparsityLevel k = 0; k + 1 < w.num_levels; ++k) {
      for (index_t i = 0; i < w.rows; ++i)
        for (index_t j = 0; j < w.cols; ++j) {
          const double lo = decoded[static_cast<std::size_t>(k)].at(i, j);
          const double hi = decoded[static_cast<std::size_t>(k + 1)].at(i, j);
          if (lo == 0.0) continue;
          if (hi == 0.0) {
            std::ostringstream os;
            os << "level " << k << " entry missing from level " << k + 1;
            add(HierarchyViolation::Kind::nesting, static_cast<index_t>(li), k, i, j, os.str());
          } else if (std::memcmp(&lo, &hi, sizeof(double)) != 0) {
            std::ostringstream os;
            os << "shared value differs between levels " << k << " and " << k + 1;
            add(HierarchyViolation::Kind::value_mismatch, static_cast<index_t>(li), k, i, j,
                os.str());
          }
        }
    }

    std::vector<double> densities;
    const double size = static_cast<double>(w.rows) * static_cast<double>(w.cols);
    for (SparsityLevel k = 0; k < w.num_levels; ++k)
      densities.push_back(static_cast<double>(w.nnz(k)) / size);
    rep.layer_level_density.push_back(densities);

    if (opts.frozen_reference != nullptr) {
      if (sparse_idx >= opts.frozen_reference->size())
        add(HierarchyViolation::Kind::frozen_mismatch, static_cast<index_t>(li), -1, -1, -1,
            "no frozen reference recorded for this layer");
      else {
        for (const auto& f : (*opts.frozen_reference)[sparse_idx]) {
          const double got = decoded[static_cast<std::size_t>(f.level)].at(f.row, f.col);
          if (std::memcmp(&got, &f.value, sizeof(double)) != 0) {
            std::ostringstream os;
            os << "frozen weight changed (stored " << got << ", expected " << f.value << ")";
            add(HierarchyViolation::Kind::frozen_mismatch, static_cast<index_t>(li), f.level, f.row,
                f.col, os.str());
          }
        }
      }
    }
    ++sparse_idx;
  }

  // uniform per-level density across sparse layers
  if (!rep.layer_level_density.empty()) {
    const std::size_t levels = rep.layer_level_density.front().size();
    for (std::size_t k = 0; k < levels; ++k) {
      double target;
      if (!opts.expected_densities.empty()) {
        target = opts.expected_densities[k];
      } else {
        target = 0.0;
        for (const auto& d : rep.layer_level_density) target += d[k];
        target /= static_cast<double>(rep.layer_level_density.size());
      }
      for (std::size_t j = 0; j < rep.layer_level_density.size(); ++j) {
        const double d = rep.layer_level_density[j][k];
        if (std::abs(d - target) > opts.density_tolerance) {
          std::ostringstream os;
          os << "sparse layer " << j << " density " << d * 100 << "% deviates from " << target * 100
             << "% at level " << k;
          add(HierarchyViolation::Kind::density, static_cast<index_t>(j),
              static_cast<index_t>(k), -1, -1, os.str());
        }
      }
    }
  }
  return rep;
}

// --- container I/O -----------------------------------------------------------------
//
// Single file: "HSNN", u16 version, u64 manifest length, JSON manifest
// (architecture, levels, switch points, auxiliary parameters, provenance),
// then the HCSR blobs of the sparse layers in layer order.

inline constexpr std::uint16_t kModelFormatVersion = 1;

namespace detail {

inline nlohmann::json norm_params_json(const NormParams& p) {
  return {{"scale", p.scale},
          {"shift", p.shift},
          {"running_mean", p.running_mean},
          {"running_var", p.running_var}};
}

inline NormParams norm_params_from_json(const nlohmann::json& j) {
  NormParams p;
  p.scale = j.at("scale").get<std::vector<double>>();
  p.shift = j.at("shift").get<std::vector<double>>();
  p.running_mean = j.at("running_mean").get<std::vector<double>>();
  p.running_var = j.at("running_var").get<std::vector<double>>();
  return p;
}

inline std::string variant_key_string(const VariantKey& k) {
  return std::to_string(k.switch_point) + ":" + std::to_string(k.level);
}

inline VariantKey variant_key_from_string(const std::string& s) {
  const auto pos = s.find(':');
  if (pos == std::string::npos) throw IoError("bad variant key: " + s);
  return {std::stoll(s.substr(0, pos)), std::stoll(s.substr(pos + 1))};
}

}  // namespace detail

inline std::string serialize_model(const MultiLevelModel& m) {
  nlohmann::json manifest;
  manifest["format"] = "hsnn-model";
  manifest["num_levels"] = m.num_levels;
  manifest["num_blocks"] = m.num_blocks;
  manifest["switch_points"] = m.switch_points;
  manifest["level_densities"] = m.level_densities;
  manifest["provenance"] = m.provenance;

  std::string blobs;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) {
    nlohmann::json jl;
    jl["kind"] = to_string(l.spec.kind);
    jl["in_dim"] = l.spec.in_dim;
    jl["out_dim"] = l.spec.out_dim;
    jl["activation"] = to_string(l.spec.activation);
    jl["block"] = l.block;
    if (l.spec.kind == LayerKind::sparse_linear) {
      const std::string blob = serialize_hcsr(l.sparse->weights);
      jl["blob_bytes"] = blob.size();
      blobs += blob;
      jl["per_level_bias"] = l.sparse->per_level_bias;
      nlohmann::json variants;
      for (const auto& [key, bias] : l.sparse->reroute_bias_variants)
        variants[detail::variant_key_string(key)] = bias;
      jl["reroute_bias_variants"] = std::move(variants);
    } else if (l.spec.kind == LayerKind::dense_linear) {
      jl["weights"] = l.dense->weights.values;
      jl["per_level_bias"] = l.dense->per_level_bias;
      nlohmann::json variants;
      for (const auto& [key, bias] : l.dense->reroute_bias_variants)
        variants[detail::variant_key_string(key)] = bias;
      jl["reroute_bias_variants"] = std::move(variants);
    } else if (l.spec.kind == LayerKind::normalization) {
      nlohmann::json per_level = nlohmann::json::array();
      for (const auto& p : l.norm->per_level) per_level.push_back(detail::norm_params_json(p));
      jl["per_level"] = std::move(per_level);
      nlohmann::json variants;
      for (const auto& [key, p] : l.norm->variants)
        variants[detail::variant_key_string(key)] = detail::norm_params_json(p);
      jl["variants"] = std::move(variants);
    }
    layers.push_back(std::move(jl));
  }
  manifest["layers"] = std::move(layers);

  const std::string mbytes = manifest.dump();
  std::string out;
  out += "HSNN";
  detail::put_u16(out, kModelFormatVersion);
  detail::put_u64(out, mbytes.size());
  out += mbytes;
  out += blobs;
  return out;
}

inline MultiLevelModel deserialize_model(const std::string& buf) {
  detail::Reader r(buf);
  if (r.magic(4) != "HSNN") throw IoError("not a model container (bad magic)");
  if (r.u16() != kModelFormatVersion) throw IoError("unsupported model container version");
  const std::uint64_t mlen = r.u64();
  if (r.pos() + mlen > buf.size()) throw IoError("model container truncated");
  const nlohmann::json manifest = nlohmann::json::parse(buf.substr(r.pos(), mlen));
  std::size_t blob_pos = r.pos() + mlen;

  MultiLevelModel m;
  m.num_levels = manifest.at("num_levels").get<index_t>();
  m.num_blocks = manifest.at("num_blocks").get<index_t>();
  m.switch_points = manifest.at("switch_points").get<std::vector<index_t>>();
  m.level_densities = manifest.at("level_densities").get<std::vector<double>>();
  m.provenance = manifest.at("provenance");

  for (const auto& jl : manifest.at("layers")) {
    Layer l;
    const std::string kind = jl.at("kind").get<std::string>();
    l.spec.in_dim = jl.at("in_dim").get<index_t>();
    l.spec.out_dim = jl.at("out_dim").get<index_t>();
    l.spec.activation = activation_from_string(jl.at("activation").get<std::string>());
    l.block = jl.at("block").get<index_t>();
    if (kind == "sparse_linear") {
      l.spec.kind = LayerKind::sparse_linear;
      SparseLinearLayer s;
      const std::uint64_t nbytes = jl.at("blob_bytes").get<std::uint64_t>();
      if (blob_pos + nbytes > buf.size()) throw IoError("model container blob truncated");
      s.weights = deserialize_hcsr(buf.substr(blob_pos, nbytes));
      blob_pos += nbytes;
      s.per_level_bias = jl.at("per_level_bias").get<std::vector<std::vector<double>>>();
      for (const auto& [key, bias] : jl.at("reroute_bias_variants").items())
        s.reroute_bias_variants[detail::variant_key_from_string(key)] =
            bias.get<std::vector<double>>();
      l.sparse = std::move(s);
    } else if (kind == "dense_linear") {
      l.spec.kind = LayerKind::dense_linear;
      DenseLinearLayer d;
      d.weights = DenseMatrix(l.spec.out_dim, l.spec.in_dim,
                              jl.at("weights").get<std::vector<double>>());
      d.per_level_bias = jl.at("per_level_bias").get<std::vector<std::vector<double>>>();
      for (const auto& [key, bias] : jl.at("reroute_bias_variants").items())
        d.reroute_bias_variants[detail::variant_key_from_string(key)] =
            bias.get<std::vector<double>>();
      l.dense = std::move(d);
    } else if (kind == "normalization") {
      l.spec.kind = LayerKind::normalization;
      NormalizationLayer n;
      for (const auto& p : jl.at("per_level")) n.per_level.push_back(detail::norm_params_from_json(p));
      for (const auto& [key, p] : jl.at("variants").items())
        n.variants[detail::variant_key_from_string(key)] = detail::norm_params_from_json(p);
      l.norm = std::move(n);
    } else if (kind == "activation") {
      l.spec.kind = LayerKind::activation;
    } else {
      throw IoError("unknown layer kind in manifest: " + kind);
    }
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline void save_model(const MultiLevelModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const std::string buf = serialize_model(m);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to " + path);
}

inline MultiLevelModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(buf);
}

// --- small evaluation helpers -------------------------------------------------------

inline index_t argmax(const std::vector<double>& v) {
  index_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<index_t>(i);
  return best;
}

// Fraction of rows of X (row-major, one sample per row) whose argmax matches.
inline double model_accuracy(const MultiLevelModel& m, const std::vector<std::vector<double>>& X,
                             const std::vector<index_t>& labels, const InferencePlan& plan) {
  index_t correct = 0;
  for (std::size_t i = 0; i < X.size(); ++i)
    if (argmax(forward(m, X[i], plan).output) == labels[i]) ++correct;
  return X.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(X.size());
}

}  // namespace hsnn
