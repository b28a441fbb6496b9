#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hsnn/common.hpp"

namespace hsnn {

// Row-major dense matrix of 64-bit reals.
struct DenseMatrix {
  index_t rows = 0;
  index_t cols = 0;
  std::vector<double> values;  // length rows * cols

  DenseMatrix() = default;
  DenseMatrix(index_t r, index_t c) : rows(r), cols(c), values(static_cast<std::size_t>(r * c), 0.0) {}
  DenseMatrix(index_t r, index_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v)) {
    if (static_cast<index_t>(values.size()) != rows * cols)
      throw ShapeError("DenseMatrix: values length != rows*cols");
  }

  double& at(index_t r, index_t c) { return values[static_cast<std::size_t>(r * cols + c)]; }
  double at(index_t r, index_t c) const { return values[static_cast<std::size_t>(r * cols + c)]; }
};

// One boolean mask per sparsity level, level 0 (most sparse) first.
// masks[k] must be an elementwise subset of masks[k+1].
struct LevelMaskSet {
  index_t rows = 0;
  index_t cols = 0;
  std::vector<std::vector<std::uint8_t>> masks;  // each length rows * cols

  index_t num_levels() const { return static_cast<index_t>(masks.size()); }
  bool get(index_t level, index_t r, index_t c) const {
    return masks[static_cast<std::size_t>(level)][static_cast<std::size_t>(r * cols + c)] != 0;
  }
  void set(index_t level, index_t r, index_t c, bool v) {
    masks[static_cast<std::size_t>(level)][static_cast<std::size_t>(r * cols + c)] = v ? 1 : 0;
  }

  static LevelMaskSet zeros(index_t rows, index_t cols, index_t levels) {
    LevelMaskSet m;
    m.rows = rows;
    m.cols = cols;
    m.masks.assign(static_cast<std::size_t>(levels),
                   std::vector<std::uint8_t>(static_cast<std::size_t>(rows * cols), 0));
    return m;
  }

  // Throws HierarchyError at the first (level, row, col) where nesting fails.
  void check_nested() const {
    for (index_t k = 0; k + 1 < num_levels(); ++k) {
      for (index_t r = 0; r < rows; ++r) {
        for (index_t c = 0; c < cols; ++c) {
          if (get(k, r, c) && !get(k + 1, r, c)) {
            std::ostringstream os;
            os << "mask level " << k << " not contained in level " << k + 1 << " at (" << r << ", "
               << c << ")";
            throw HierarchyError(os.str(), k, r, c);
          }
        }
      }
    }
  }
};

// --- plain-text fixtures -----------------------------------------------------
//
// Dense matrices are rows of whitespace-separated numbers; masks use 0/1 and
// multiple mask blocks are separated by one blank line (level 0 first).

inline DenseMatrix parse_dense_text(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (!ls.eof() && ls.fail()) throw IoError("dense text: non-numeric token in row");
    if (row.empty()) {
      if (rows.empty()) continue;  // leading blank lines
      break;                       // blank line terminates the matrix
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw IoError("dense text: ragged rows");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("dense text: empty matrix");
  DenseMatrix d(static_cast<index_t>(rows.size()), static_cast<index_t>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) d.values[r * rows[r].size() + c] = rows[r][c];
  return d;
}

inline DenseMatrix load_dense_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_dense_text(in);
}

inline LevelMaskSet parse_masks_text(std::istream& in) {
  LevelMaskSet set;
  while (true) {
    DenseMatrix block;
    try {
      block = parse_dense_text(in);
    } catch (const IoError&) {
      break;  // no further blocks
    }
    if (set.masks.empty()) {
      set.rows = block.rows;
      set.cols = block.cols;
    } else if (block.rows != set.rows || block.cols != set.cols) {
      throw IoError("mask blocks have differing shapes");
    }
    std::vector<std::uint8_t> mask(block.values.size());
    for (std::size_t i = 0; i < block.values.size(); ++i) {
      if (block.values[i] != 0.0 && block.values[i] != 1.0)
        throw IoError("mask entries must be 0 or 1");
      mask[i] = block.values[i] != 0.0 ? 1 : 0;
    }
    set.masks.push_back(std::move(mask));
  }
  if (set.masks.empty()) throw IoError("masks text: no mask blocks");
  return set;
}

inline LevelMaskSet load_masks_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_masks_text(in);
}

inline std::vector<double> load_vector_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<double> v;
  double x;
  while (in >> x) v.push_back(x);
  if (!in.eof() && in.fail()) throw IoError("vector text: non-numeric token");
  if (v.empty()) throw IoError("vector text: empty");
  return v;
}

}  // namespace hsnn
