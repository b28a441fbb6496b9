#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "hsnn/nn.hpp"
#include "oracles.hpp"

using namespace hsnn;

namespace {

// Random multi-level MLP: per block sparse_linear -> [normalization] -> tanh,
// final block sparse_linear with softmax output. All boundaries registered as
// switch points, variants initialized from the target level's parameters.
MultiLevelModel toy_model(Rng& rng, const std::vector<index_t>& dims, index_t levels,
                          bool with_norm = false, double top_density = 0.6) {
  MultiLevelModel m;
  m.num_levels = levels;
  m.num_blocks = static_cast<index_t>(dims.size()) - 1;
  for (index_t p = 0; p <= m.num_blocks; ++p) m.switch_points.push_back(p);

  for (std::size_t b = 0; b + 1 < dims.size(); ++b) {
    const index_t in = dims[b], out = dims[b + 1];
    const bool last = b + 2 == dims.size();

    Layer lin;
    lin.spec = {LayerKind::sparse_linear, in, out,
                last ? Activation::softmax_output : Activation::none};
    lin.block = static_cast<index_t>(b);
    SparseLinearLayer s;
    const auto dense = oracle::random_dense(rng, out, in);
    const auto masks = oracle::random_nested_masks(rng, out, in, levels, top_density);
    s.weights = encode(dense, masks);
    for (index_t k = 0; k < levels; ++k) {
      std::vector<double> bias(static_cast<std::size_t>(out));
      for (auto& v : bias) v = rng.uniform(-0.3, 0.3);
      s.per_level_bias.push_back(std::move(bias));
    }
    for (index_t p : m.switch_points)
      for (SparsityLevel to = 0; to + 1 < levels; ++to)
        s.reroute_bias_variants[{p, to}] = s.per_level_bias[static_cast<std::size_t>(to)];
    lin.sparse = std::move(s);
    m.layers.push_back(std::move(lin));

    if (!last && with_norm) {
      Layer nl;
      nl.spec = {LayerKind::normalization, out, out, Activation::none};
      nl.block = static_cast<index_t>(b);
      NormalizationLayer norm;
      for (index_t k = 0; k < levels; ++k) {
        NormParams p;
        for (index_t i = 0; i < out; ++i) {
          p.scale.push_back(rng.uniform(0.5, 1.5));
          p.shift.push_back(rng.uniform(-0.2, 0.2));
          p.running_mean.push_back(rng.uniform(-0.1, 0.1));
          p.running_var.push_back(rng.uniform(0.5, 2.0));
        }
        norm.per_level.push_back(std::move(p));
      }
      for (index_t p : m.switch_points)
        for (SparsityLevel to = 0; to + 1 < levels; ++to)
          norm.variants[{p, to}] = norm.per_level[static_cast<std::size_t>(to)];
      nl.norm = std::move(norm);
      m.layers.push_back(std::move(nl));
    }

    if (!last) {
      Layer act;
      act.spec = {LayerKind::activation, out, out, Activation::tanh};
      act.block = static_cast<index_t>(b);
      m.layers.push_back(std::move(act));
    }
  }
  check_model(m);
  return m;
}

// Straight-line dense reference of the same forward pass.
std::vector<double> reference_forward(const MultiLevelModel& m, const std::vector<double>& input,
                                      const InferencePlan& plan) {
  std::vector<double> x = input;
  for (const auto& l : m.layers) {
    const bool after = plan.mode == InferencePlan::Mode::reroute && l.block >= plan.switch_point;
    const SparsityLevel level = plan.mode == InferencePlan::Mode::fixed_level
                                    ? plan.level
                                    : (after ? plan.to_level : plan.from_level);
    const VariantKey key{plan.switch_point, plan.to_level};
    if (l.spec.kind == LayerKind::sparse_linear) {
      auto y = oracle::dense_matvec(decode(l.sparse->weights, level), x);
      const auto& bias = after ? l.sparse->reroute_bias_variants.at(key)
                               : l.sparse->per_level_bias[static_cast<std::size_t>(level)];
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias[i];
      if (l.spec.activation == Activation::softmax_output) {
        double mx = *std::max_element(y.begin(), y.end());
        double sum = 0;
        for (auto& v : y) {
          v = std::exp(v - mx);
          sum += v;
        }
        for (auto& v : y) v /= sum;
      }
      x = std::move(y);
    } else if (l.spec.kind == LayerKind::normalization) {
      const NormParams& p =
          after ? l.norm->variants.at(key) : l.norm->per_level[static_cast<std::size_t>(level)];
      for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = (x[i] - p.running_mean[i]) / std::sqrt(p.running_var[i] + kNormEps) * p.scale[i] +
               p.shift[i];
    } else if (l.spec.kind == LayerKind::activation) {
      for (auto& v : x) v = std::tanh(v);
    }
  }
  return x;
}

std::vector<double> random_input(Rng& rng, index_t dim) {
  std::vector<double> x(static_cast<std::size_t>(dim));
  for (auto& v : x) v = rng.uniform(-1.0, 1.0);
  return x;
}

}  // namespace

TEST_CASE("fixed-level forward on a degenerate single-pattern model matches a dense network") {
  Rng rng(11);
  // every level carries the full dense pattern
  MultiLevelModel m;
  m.num_levels = 2;
  m.num_blocks = 2;
  m.switch_points = {0, 1, 2};
  std::vector<index_t> dims{5, 7, 3};
  std::vector<DenseMatrix> ws;
  for (std::size_t b = 0; b + 1 < dims.size(); ++b) {
    Layer lin;
    const bool last = b + 2 == dims.size();
    lin.spec = {LayerKind::sparse_linear, dims[b], dims[b + 1],
                last ? Activation::softmax_output : Activation::tanh};
    lin.block = static_cast<index_t>(b);
    const auto dense = oracle::random_dense(rng, dims[b + 1], dims[b]);
    ws.push_back(dense);
    auto masks = LevelMaskSet::zeros(dims[b + 1], dims[b], 2);
    for (auto& mk : masks.masks) std::fill(mk.begin(), mk.end(), 1);
    SparseLinearLayer s;
    s.weights = encode(dense, masks);
    s.per_level_bias = {std::vector<double>(static_cast<std::size_t>(dims[b + 1]), 0.1),
                        std::vector<double>(static_cast<std::size_t>(dims[b + 1]), 0.1)};
    lin.sparse = std::move(s);
    m.layers.push_back(std::move(lin));
  }
  check_model(m);

  const auto x = random_input(rng, 5);
  const auto got = forward(m, x, InferencePlan::fixed(1)).output;

  // dense reference network
  std::vector<double> ref = x;
  for (std::size_t b = 0; b < ws.size(); ++b) {
    auto y = oracle::dense_matvec(ws[b], ref);
    for (auto& v : y) v += 0.1;
    if (b + 1 < ws.size())
      for (auto& v : y) v = std::tanh(v);
    else {
      double mx = *std::max_element(y.begin(), y.end());
      double sum = 0;
      for (auto& v : y) {
        v = std::exp(v - mx);
        sum += v;
      }
      for (auto& v : y) v /= sum;
    }
    ref = std::move(y);
  }
  REQUIRE(got.size() == ref.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - ref[i]) < 1e-10);
}

TEST_CASE("reroute at boundary 0 equals the fixed target level bit for bit") {
  Rng rng(12);
  const auto m = toy_model(rng, {6, 10, 8, 4}, 3, true);
  const auto x = random_input(rng, 6);
  const auto fixed0 = forward(m, x, InferencePlan::fixed(0)).output;
  const auto rer = forward(m, x, InferencePlan::reroute(0, 2, 0)).output;
  CHECK(rer == fixed0);
}

TEST_CASE("interior reroute matches a straight-line composition") {
  Rng rng(13);
  const auto m = toy_model(rng, {6, 12, 12, 4}, 2, true);
  for (index_t p = 0; p <= 3; ++p) {
    const auto plan = InferencePlan::reroute(p, 1, 0);
    for (int t = 0; t < 5; ++t) {
      const auto x = random_input(rng, 6);
      const auto got = forward(m, x, plan).output;
      const auto ref = reference_forward(m, x, plan);
      REQUIRE(got.size() == ref.size());
      for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(std::abs(got[i] - ref[i]) < 1e-12);
    }
  }
}

TEST_CASE("plan validation") {
  Rng rng(14);
  const auto m = toy_model(rng, {4, 6, 3}, 2);
  CHECK_THROWS_AS(InferencePlan::reroute(1, 0, 1), ConfigError);  // wrong direction
  CHECK_THROWS_AS(forward(m, random_input(rng, 4), InferencePlan::fixed(5)), LevelRangeError);
  CHECK_THROWS_AS(forward(m, random_input(rng, 3), InferencePlan::fixed(0)), ShapeError);

  auto plan = InferencePlan::reroute(1, 1, 0);
  plan.switch_point = 7;  // not registered
  CHECK_THROWS_AS(forward(m, random_input(rng, 4), plan), ConfigError);

  // missing variant parameters
  auto stripped = m;
  for (auto& l : stripped.layers)
    if (l.sparse) l.sparse->reroute_bias_variants.clear();
  CHECK_THROWS_AS(forward(stripped, random_input(rng, 4), InferencePlan::reroute(1, 1, 0)),
                  ConfigError);
}

TEST_CASE("cost table: boundaries reduce to fixed totals, interior is the counter sum") {
  Rng rng(15);
  const auto m = toy_model(rng, {8, 16, 16, 16, 4}, 2, false, 0.5);
  const auto costs = model_costs(m);
  const long long tiny = costs.level_flops(0);
  const long long small = costs.level_flops(1);
  REQUIRE(tiny < small);

  CHECK(costs.reroute_flops(0, 1, 0) == tiny);
  CHECK(costs.reroute_flops(m.num_blocks, 1, 0) == small);

  const auto x = random_input(rng, 8);
  for (index_t p = 1; p < m.num_blocks; ++p) {
    const long long f = costs.reroute_flops(p, 1, 0);
    CHECK(f > tiny);
    CHECK(f < small);
    // counter-sum oracle: actually run the plan and compare the counter
    const auto res = forward(m, x, InferencePlan::reroute(p, 1, 0));
    CHECK(res.cost.flops == f);
  }
  // fixed plans agree with their counters too
  CHECK(forward(m, x, InferencePlan::fixed(0)).cost.flops == tiny);
  CHECK(forward(m, x, InferencePlan::fixed(1)).cost.flops == small);

  const auto rows = flops_per_level(m);
  bool found = false;
  for (const auto& r : rows)
    if (r.plan_id == "reroute:p2:1->0") {
      found = true;
      CHECK(r.flops == costs.reroute_flops(2, 1, 0));
    }
  CHECK(found);
}

TEST_CASE("extract_submodel reproduces the parent level exactly") {
  Rng rng(16);
  const auto m = toy_model(rng, {6, 14, 10, 5}, 3, true, 0.5);

  SECTION("top level weights are identical") {
    const auto sub = extract_submodel(m, 2);
    CHECK(sub.num_levels == 1);
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
      if (!m.layers[li].sparse) continue;
      CHECK(decode(sub.layers[li].sparse->weights, 0).values ==
            decode(m.layers[li].sparse->weights, 2).values);
    }
  }

  SECTION("forward outputs are bit-identical at every level") {
    for (SparsityLevel k = 0; k < 3; ++k) {
      const auto sub = extract_submodel(m, k);
      for (int t = 0; t < 8; ++t) {
        const auto x = random_input(rng, 6);
        CHECK(forward(sub, x, InferencePlan::fixed(0)).output ==
              forward(m, x, InferencePlan::fixed(k)).output);
      }
    }
  }

  SECTION("standalone storage exceeds the hierarchical increment") {
    // the parent stores the sparser levels for the cost of end pointers only;
    // a standalone copy pays full data+index for them
    const auto& w = m.layers[0].sparse->weights;
    const auto parent = storage_report(w, 8, 4);
    const auto sub = extract_submodel(m, 0);
    const auto standalone = storage_report(sub.layers[0].sparse->weights, 8, 4);
    const auto top_only = storage_report(extract_submodel(m, 2).layers[0].sparse->weights, 8, 4);
    CHECK(standalone.hierarchical_bytes >
          parent.hierarchical_bytes - top_only.hierarchical_bytes);
  }

  CHECK_THROWS_AS(extract_submodel(m, 3), LevelRangeError);
}

TEST_CASE("mutating entries above the selected level never changes the output") {
  Rng rng(17);
  auto m = toy_model(rng, {6, 10, 4}, 3, false, 0.5);
  const auto x = random_input(rng, 6);
  const auto y0 = forward(m, x, InferencePlan::fixed(0)).output;
  const auto y1 = forward(m, x, InferencePlan::fixed(1)).output;

  for (auto& l : m.layers) {
    if (!l.sparse) continue;
    auto& w = l.sparse->weights;
    for (index_t i = 0; i < w.rows; ++i)
      for (index_t t = w.end_ptr(1, i); t < w.ind_ptr[static_cast<std::size_t>(i + 1)]; ++t)
        w.data[static_cast<std::size_t>(t)] += 3.25;
  }
  CHECK(forward(m, x, InferencePlan::fixed(0)).output == y0);
  CHECK(forward(m, x, InferencePlan::fixed(1)).output == y1);
}

TEST_CASE("verify_hierarchy accepts a sound model and localizes planted defects") {
  Rng rng(18);
  // exact uniform densities per level, as a trained pipeline would produce
  auto m = toy_model(rng, {6, 12, 12, 4}, 2, false, 0.5);
  const std::vector<double> densities{0.25, 0.5};
  for (auto& l : m.layers) {
    if (!l.sparse) continue;
    const index_t rows = l.spec.out_dim, cols = l.spec.in_dim;
    std::vector<index_t> counts;
    for (double d : densities) counts.push_back(static_cast<index_t>(d * static_cast<double>(rows * cols)));
    const auto masks = oracle::counted_nested_masks(rng, rows, cols, counts);
    l.sparse->weights = encode(oracle::random_dense(rng, rows, cols), masks);
  }
  REQUIRE(verify_hierarchy(m).ok);

  SECTION("frozen reference catches a perturbed frozen weight") {
    FrozenReference frozen;
    for (const auto& l : m.layers) {
      if (!l.sparse) continue;
      std::vector<FrozenEntry> entries;
      const auto d0 = decode(l.sparse->weights, 0);
      for (index_t i = 0; i < d0.rows; ++i)
        for (index_t j = 0; j < d0.cols; ++j)
          if (d0.at(i, j) != 0.0) entries.push_back({i, j, d0.at(i, j), 0});
      frozen.push_back(std::move(entries));
    }
    VerifyOptions opts;
    opts.frozen_reference = &frozen;
    REQUIRE(verify_hierarchy(m, opts).ok);

    // perturb one frozen (level-0) stored value
    auto& w = m.layers[0].sparse->weights;
    index_t row = -1, off = -1;
    for (index_t i = 0; i < w.rows && row < 0; ++i)
      if (w.end_ptr(0, i) > w.ind_ptr[static_cast<std::size_t>(i)]) {
        row = i;
        off = w.ind_ptr[static_cast<std::size_t>(i)];
      }
    REQUIRE(row >= 0);
    w.data[static_cast<std::size_t>(off)] *= 1.0000001;

    const auto rep = verify_hierarchy(m, opts);
    REQUIRE_FALSE(rep.ok);
    bool found = false;
    for (const auto& v : rep.violations)
      if (v.kind == HierarchyViolation::Kind::frozen_mismatch && v.layer == 0 && v.row == row)
        found = true;
    CHECK(found);
  }

  SECTION("density deviation is reported") {
    VerifyOptions opts;
    opts.expected_densities = {0.05, 0.20};  // nothing like the actual ~0.25/0.5
    const auto rep = verify_hierarchy(m, opts);
    REQUIRE_FALSE(rep.ok);
    bool density = false;
    for (const auto& v : rep.violations)
      if (v.kind == HierarchyViolation::Kind::density) density = true;
    CHECK(density);
  }

  SECTION("structural violations flow through") {
    m.layers[0].sparse->weights.end_ptr(0, 0) = m.layers[0].sparse->weights.end_ptr(1, 0) + 1;
    CHECK_FALSE(verify_hierarchy(m).ok);
  }
}

TEST_CASE("model container roundtrips bit-exactly") {
  Rng rng(19);
  const auto m = toy_model(rng, {6, 10, 8, 4}, 2, true, 0.5);
  const std::string path = "model_roundtrip.hsnn";
  save_model(m, path);
  const auto back = load_model(path);

  CHECK(back.num_levels == m.num_levels);
  CHECK(back.switch_points == m.switch_points);
  for (int t = 0; t < 5; ++t) {
    const auto x = random_input(rng, 6);
    CHECK(forward(back, x, InferencePlan::fixed(0)).output ==
          forward(m, x, InferencePlan::fixed(0)).output);
    CHECK(forward(back, x, InferencePlan::reroute(2, 1, 0)).output ==
          forward(m, x, InferencePlan::reroute(2, 1, 0)).output);
  }
  // serialized bytes are reproducible
  CHECK(serialize_model(back) == serialize_model(m));
  std::remove(path.c_str());

  CHECK_THROWS_AS(deserialize_model("garbage"), IoError);
}
