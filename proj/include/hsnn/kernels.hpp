#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hsnn/common.hpp"
#include "hsnn/hcsr.hpp"

namespace hsnn {

// Exact operation accounting: 2 FLOPs per multiply-accumulate, bytes for the
// stored values and column indices actually visited. Additive across calls.
struct CostCounter {
  long long flops = 0;
  long long value_bytes_touched = 0;
  long long index_bytes_touched = 0;

  CostCounter& operator+=(const CostCounter& o) {
    flops += o.flops;
    value_bytes_touched += o.value_bytes_touched;
    index_bytes_touched += o.index_bytes_touched;
    return *this;
  }

  std::string csv_row(const std::string& matrix_id, SparsityLevel level) const {
    std::ostringstream os;
    os << matrix_id << "," << level << "," << flops << ","
       << (value_bytes_touched + index_bytes_touched);
    return os.str();
  }
};

namespace detail {
inline void count_entries(CostCounter& c, index_t entries, index_t batch = 1) {
  c.flops += 2ll * entries * batch;
  c.value_bytes_touched += 8ll * entries;
  c.index_bytes_touched += 4ll * entries;
}
}  // namespace detail

// y = A_level * x. Rows accumulate in ascending column order, so results are
// deterministic and identical to a canonically re-encoded single-level matrix.
inline std::vector<double> spmv(const HcsrMatrix& h, SparsityLevel level,
                                const std::vector<double>& x, CostCounter& cost) {
  h.check_level(level);
  if (static_cast<index_t>(x.size()) != h.cols)
    throw ShapeError("spmv: x length != cols");
  std::vector<double> y(static_cast<std::size_t>(h.rows), 0.0);
  std::vector<std::pair<index_t, index_t>> scratch;
  index_t visited = 0;
  for (index_t i = 0; i < h.rows; ++i) {
    double acc = 0.0;
    visit_row_level(h, level, i, scratch, [&](index_t t) {
      acc += h.data[static_cast<std::size_t>(t)] *
             x[static_cast<std::size_t>(h.index[static_cast<std::size_t>(t)])];
      ++visited;
    });
    y[static_cast<std::size_t>(i)] = acc;
  }
  detail::count_entries(cost, visited);
  return y;
}

inline std::pair<std::vector<double>, CostCounter> spmv(const HcsrMatrix& h, SparsityLevel level,
                                                        const std::vector<double>& x) {
  CostCounter cost;
  auto y = spmv(h, level, x, cost);
  return {std::move(y), cost};
}

// Y = A_level * X with X of shape cols x batch (row-major). Each output column
// accumulates in the same order as spmv, so columns match spmv bit-for-bit.
inline std::vector<double> spmm(const HcsrMatrix& h, SparsityLevel level,
                                const std::vector<double>& X, index_t batch, CostCounter& cost) {
  h.check_level(level);
  if (static_cast<index_t>(X.size()) != h.cols * batch)
    throw ShapeError("spmm: X size != cols*batch");
  std::vector<double> Y(static_cast<std::size_t>(h.rows * batch), 0.0);
  std::vector<std::pair<index_t, index_t>> scratch;
  index_t visited = 0;
  for (index_t i = 0; i < h.rows; ++i) {
    double* yrow = Y.data() + i * batch;
    visit_row_level(h, level, i, scratch, [&](index_t t) {
      const double v = h.data[static_cast<std::size_t>(t)];
      const double* xrow = X.data() + static_cast<index_t>(h.index[static_cast<std::size_t>(t)]) * batch;
      for (index_t j = 0; j < batch; ++j) yrow[j] += v * xrow[j];
      ++visited;
    });
  }
  detail::count_entries(cost, visited, batch);
  return Y;
}

inline std::pair<std::vector<double>, CostCounter> spmm(const HcsrMatrix& h, SparsityLevel level,
                                                        const std::vector<double>& X,
                                                        index_t batch) {
  CostCounter cost;
  auto Y = spmm(h, level, X, batch, cost);
  return {std::move(Y), cost};
}

// Returns A_levelᵀ * g; the backward pass for input gradients.
inline std::vector<double> spmv_transpose_accumulate(const HcsrMatrix& h, SparsityLevel level,
                                                     const std::vector<double>& g,
                                                     CostCounter& cost) {
  h.check_level(level);
  if (static_cast<index_t>(g.size()) != h.rows)
    throw ShapeError("spmv_transpose_accumulate: g length != rows");
  std::vector<double> out(static_cast<std::size_t>(h.cols), 0.0);
  std::vector<std::pair<index_t, index_t>> scratch;
  index_t visited = 0;
  for (index_t i = 0; i < h.rows; ++i) {
    const double gi = g[static_cast<std::size_t>(i)];
    visit_row_level(h, level, i, scratch, [&](index_t t) {
      out[static_cast<std::size_t>(h.index[static_cast<std::size_t>(t)])] +=
          h.data[static_cast<std::size_t>(t)] * gi;
      ++visited;
    });
  }
  detail::count_entries(cost, visited);
  return out;
}

inline std::vector<double> spmv_transpose_accumulate(const HcsrMatrix& h, SparsityLevel level,
                                                     const std::vector<double>& g) {
  CostCounter cost;
  return spmv_transpose_accumulate(h, level, g, cost);
}

// Per-entry loss gradients aligned with the data array: g_out[i] * x_in[col]
// at every entry visited at `level`, exactly 0.0 elsewhere. Entries at or
// below freeze_level stay 0 because frozen weights are never updated.
inline std::vector<double> masked_gradient_scatter(const HcsrMatrix& h, SparsityLevel level,
                                                   const std::vector<double>& g_out,
                                                   const std::vector<double>& x_in,
                                                   std::optional<SparsityLevel> freeze_level = {}) {
  h.check_level(level);
  if (static_cast<index_t>(g_out.size()) != h.rows)
    throw ShapeError("masked_gradient_scatter: g_out length != rows");
  if (static_cast<index_t>(x_in.size()) != h.cols)
    throw ShapeError("masked_gradient_scatter: x_in length != cols");
  if (freeze_level) {
    if (*freeze_level >= level)
      throw LevelRangeError("masked_gradient_scatter: freeze_level must be below level");
    h.check_level(*freeze_level);
  }

  std::vector<double> grad(h.data.size(), 0.0);
  std::vector<std::pair<index_t, index_t>> scratch;
  for (index_t i = 0; i < h.rows; ++i) {
    const double gi = g_out[static_cast<std::size_t>(i)];
    const index_t freeze_end = freeze_level ? h.end_ptr(*freeze_level, i) : h.ind_ptr[static_cast<std::size_t>(i)];
    visit_row_level(h, level, i, scratch, [&](index_t t) {
      if (t < freeze_end) return;  // frozen entry: gradient forced to zero
      grad[static_cast<std::size_t>(t)] =
          gi * x_in[static_cast<std::size_t>(h.index[static_cast<std::size_t>(t)])];
    });
  }
  return grad;
}

}  // namespace hsnn
