#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "hsnn/kernels.hpp"
#include "oracles.hpp"

using namespace hsnn;

namespace {
HcsrMatrix paper_matrix() { return encode(oracle::example_matrix_a(), oracle::example_masks()); }
}  // namespace

TEST_CASE("spmv on the worked example matches hand sums") {
  const auto h = paper_matrix();
  const std::vector<double> ones(8, 1.0);

  auto [ya, ca] = spmv(h, 1, ones);
  CHECK(ya == std::vector<double>{1, 17, 8, 19});
  CHECK(ca.flops == 2 * 9);

  auto [yb, cb] = spmv(h, 0, ones);
  CHECK(yb == std::vector<double>{1, 15, 3, 6});
  CHECK(cb.flops == 2 * 5);

  // dense oracle agreement
  CHECK(ya == oracle::dense_matvec(oracle::example_matrix_a(), ones));
  CHECK(yb == oracle::dense_matvec(oracle::example_matrix_b(), ones));
}

TEST_CASE("spmv zero input still counts the work") {
  const auto h = paper_matrix();
  const std::vector<double> zero(8, 0.0);
  auto [y, c] = spmv(h, 1, zero);
  CHECK(y == std::vector<double>(4, 0.0));
  CHECK(c.flops == 2 * 9);

  CHECK_THROWS_AS(spmv(h, 1, std::vector<double>(7, 0.0)), ShapeError);
}

TEST_CASE("spmv matches the dense oracle within 1e-12 on random instances") {
  Rng rng(555);
  for (int trial = 0; trial < 30; ++trial) {
    const index_t rows = 1 + static_cast<index_t>(rng.below(40));
    const index_t cols = 1 + static_cast<index_t>(rng.below(40));
    const index_t levels = 2 + static_cast<index_t>(rng.below(3));
    const auto d = oracle::random_dense(rng, rows, cols);
    const auto masks = oracle::random_nested_masks(rng, rows, cols, levels);
    const auto h = encode(d, masks);

    std::vector<double> x(static_cast<std::size_t>(cols));
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);

    for (SparsityLevel k = 0; k < levels; ++k) {
      const auto [y, cost] = spmv(h, k, x);
      const auto ref = oracle::dense_matvec(decode(h, k), x);
      for (index_t i = 0; i < rows; ++i)
        REQUIRE(std::abs(y[static_cast<std::size_t>(i)] - ref[static_cast<std::size_t>(i)]) < 1e-12);
      CHECK(cost.flops == 2 * h.nnz(k));
    }
  }
}

TEST_CASE("flops are monotone in the level") {
  Rng rng(556);
  const auto d = oracle::random_dense(rng, 24, 24);
  const auto masks = oracle::random_nested_masks(rng, 24, 24, 4);
  const auto h = encode(d, masks);
  const std::vector<double> x(24, 0.5);
  long long prev = -1;
  for (SparsityLevel k = 0; k < 4; ++k) {
    const auto [y, c] = spmv(h, k, x);
    CHECK(c.flops >= prev);
    prev = c.flops;
  }
}

TEST_CASE("cost counters are additive across calls") {
  const auto h = paper_matrix();
  const std::vector<double> ones(8, 1.0);
  CostCounter total;
  spmv(h, 1, ones, total);
  spmv(h, 0, ones, total);
  CHECK(total.flops == 2 * 9 + 2 * 5);
  CHECK(total.value_bytes_touched == 8 * (9 + 5));
  CHECK(total.index_bytes_touched == 4 * (9 + 5));
  CHECK(total.csv_row("m0", 1) == "m0,1,28,168");
}

TEST_CASE("spmm reduces to column-wise spmv bit for bit") {
  Rng rng(557);
  const index_t rows = 12, cols = 18, batch = 5;
  const auto d = oracle::random_dense(rng, rows, cols);
  const auto masks = oracle::random_nested_masks(rng, rows, cols, 2);
  const auto h = encode(d, masks);

  std::vector<double> X(static_cast<std::size_t>(cols * batch));
  for (auto& v : X) v = rng.uniform(-1.0, 1.0);

  for (SparsityLevel k = 0; k < 2; ++k) {
    const auto [Y, c] = spmm(h, k, X, batch);
    CHECK(c.flops == 2 * h.nnz(k) * batch);
    for (index_t b = 0; b < batch; ++b) {
      std::vector<double> x(static_cast<std::size_t>(cols));
      for (index_t j = 0; j < cols; ++j) x[static_cast<std::size_t>(j)] = X[static_cast<std::size_t>(j * batch + b)];
      const auto [y, cc] = spmv(h, k, x);
      for (index_t i = 0; i < rows; ++i)
        REQUIRE(Y[static_cast<std::size_t>(i * batch + b)] == y[static_cast<std::size_t>(i)]);
    }
  }
}

TEST_CASE("spmm with the identity recovers the decoded level") {
  const auto h = paper_matrix();
  std::vector<double> eye(8 * 8, 0.0);
  for (index_t i = 0; i < 8; ++i) eye[static_cast<std::size_t>(i * 8 + i)] = 1.0;
  for (SparsityLevel k = 0; k < 2; ++k) {
    const auto [Y, c] = spmm(h, k, eye, 8);
    CHECK(Y == decode(h, k).values);
  }
  // dense-oracle agreement on a random X
  Rng rng(558);
  std::vector<double> X(8 * 3);
  for (auto& v : X) v = rng.uniform(-1.0, 1.0);
  const auto [Y, c] = spmm(h, 1, X, 3);
  const auto ref = oracle::dense_matmat(oracle::example_matrix_a(), X, 3);
  for (std::size_t i = 0; i < Y.size(); ++i) REQUIRE(std::abs(Y[i] - ref[i]) < 1e-12);
}

TEST_CASE("transpose accumulate matches the dense transpose oracle") {
  const auto h = paper_matrix();

  std::vector<double> g{0, 1, 0, 0};  // unit at row 1
  const auto y = spmv_transpose_accumulate(h, 1, g);
  std::vector<double> expect(8, 0.0);
  expect[0] = 2;
  expect[3] = 8;
  expect[6] = 7;
  CHECK(y == expect);

  CHECK(spmv_transpose_accumulate(h, 1, std::vector<double>(4, 0.0)) ==
        std::vector<double>(8, 0.0));

  Rng rng(559);
  for (int trial = 0; trial < 20; ++trial) {
    const index_t rows = 1 + static_cast<index_t>(rng.below(30));
    const index_t cols = 1 + static_cast<index_t>(rng.below(30));
    const auto d = oracle::random_dense(rng, rows, cols);
    const auto masks = oracle::random_nested_masks(rng, rows, cols, 2);
    const auto hm = encode(d, masks);
    std::vector<double> gr(static_cast<std::size_t>(rows));
    for (auto& v : gr) v = rng.uniform(-1.0, 1.0);
    for (SparsityLevel k = 0; k < 2; ++k) {
      const auto got = spmv_transpose_accumulate(hm, k, gr);
      const auto ref = oracle::dense_transpose_matvec(decode(hm, k), gr);
      for (index_t j = 0; j < cols; ++j)
        REQUIRE(std::abs(got[static_cast<std::size_t>(j)] - ref[static_cast<std::size_t>(j)]) < 1e-12);
    }
  }

  CHECK_THROWS_AS(spmv_transpose_accumulate(h, 1, std::vector<double>(5, 0.0)), ShapeError);
}

TEST_CASE("masked gradient scatter freezes the sparser level exactly") {
  const auto h = paper_matrix();
  std::vector<double> g{1.0, -0.5, 2.0, 0.25};
  std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8};

  const auto grad = masked_gradient_scatter(h, 1, g, x, SparsityLevel{0});
  // level-0 segment offsets carry exactly zero
  for (index_t i = 0; i < h.rows; ++i)
    for (index_t t = h.ind_ptr[static_cast<std::size_t>(i)]; t < h.end_ptr(0, i); ++t)
      CHECK(grad[static_cast<std::size_t>(t)] == 0.0);
  // remaining entries equal the dense outer product restricted to the pattern
  for (index_t i = 0; i < h.rows; ++i)
    for (index_t t = h.end_ptr(0, i); t < h.ind_ptr[static_cast<std::size_t>(i + 1)]; ++t)
      CHECK(grad[static_cast<std::size_t>(t)] ==
            g[static_cast<std::size_t>(i)] *
                x[static_cast<std::size_t>(h.index[static_cast<std::size_t>(t)])]);

  // no freeze: dense outer-product oracle on the pattern
  const auto full = masked_gradient_scatter(h, 1, g, x);
  for (index_t i = 0; i < h.rows; ++i)
    for (index_t t = h.ind_ptr[static_cast<std::size_t>(i)]; t < h.ind_ptr[static_cast<std::size_t>(i + 1)]; ++t)
      CHECK(full[static_cast<std::size_t>(t)] ==
            g[static_cast<std::size_t>(i)] *
                x[static_cast<std::size_t>(h.index[static_cast<std::size_t>(t)])]);

  CHECK(masked_gradient_scatter(h, 1, std::vector<double>(4, 0.0), x) ==
        std::vector<double>(9, 0.0));

  CHECK_THROWS_AS(masked_gradient_scatter(h, 0, g, x, SparsityLevel{0}), LevelRangeError);
  CHECK_THROWS_AS(masked_gradient_scatter(h, 0, g, x, SparsityLevel{1}), LevelRangeError);
}

TEST_CASE("level selection reads only that level's entries") {
  // mutating entries that belong only to higher levels never changes lower-level results
  Rng rng(560);
  const auto d = oracle::random_dense(rng, 10, 10);
  const auto masks = oracle::random_nested_masks(rng, 10, 10, 3);
  auto h = encode(d, masks);
  std::vector<double> x(10);
  for (auto& v : x) v = rng.uniform(-1.0, 1.0);

  const auto [y0, c0] = spmv(h, 0, x);
  const auto [y1, c1] = spmv(h, 1, x);
  for (index_t i = 0; i < h.rows; ++i)
    for (index_t t = h.end_ptr(1, i); t < h.ind_ptr[static_cast<std::size_t>(i + 1)]; ++t)
      h.data[static_cast<std::size_t>(t)] = 1234.5;  // top-level-only entries

  CHECK(spmv(h, 0, x).first == y0);
  CHECK(spmv(h, 1, x).first == y1);
}
