#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hsnn/common.hpp"
#include "hsnn/dense.hpp"

namespace hsnn {

using SparsityLevel = index_t;  // 0 = most sparse, ascending to least sparse

// Hierarchical CSR: one shared data/index store in row-scanning order with the
// most-sparse level's entries first in each row, plus per-level exclusive row
// end offsets. Level k of row i occupies offsets [ind_ptr[i], end_ptr(k, i)).
struct HcsrMatrix {
  index_t rows = 0;
  index_t cols = 0;
  index_t num_levels = 1;
  std::vector<double> data;        // length N = nnz of the least-sparse level
  std::vector<col_t> index;        // column of each stored entry
  std::vector<index_t> ind_ptr;    // rows+1 row start offsets
  std::vector<index_t> end_ind_ptr;  // num_levels x rows, level-major

  index_t nnz() const { return static_cast<index_t>(data.size()); }

  index_t nnz(SparsityLevel level) const {
    index_t n = 0;
    for (index_t i = 0; i < rows; ++i) n += end_ptr(level, i) - ind_ptr[i];
    return n;
  }

  index_t end_ptr(SparsityLevel level, index_t row) const {
    return end_ind_ptr[static_cast<std::size_t>(level * rows + row)];
  }
  index_t& end_ptr(SparsityLevel level, index_t row) {
    return end_ind_ptr[static_cast<std::size_t>(level * rows + row)];
  }

  // Offset range of the level-k segment of row i (entries in level k but not
  // in level k-1). Each segment's columns are strictly ascending.
  std::pair<index_t, index_t> segment(SparsityLevel level, index_t row) const {
    const index_t begin = level == 0 ? ind_ptr[row] : end_ptr(level - 1, row);
    return {begin, end_ptr(level, row)};
  }

  void check_level(SparsityLevel level) const {
    if (level < 0 || level >= num_levels) {
      std::ostringstream os;
      os << "level " << level << " out of range [0, " << num_levels << ")";
      throw LevelRangeError(os.str());
    }
  }
};

// --- level views --------------------------------------------------------------

// Iterates one row of one level in ascending column order by merging the
// per-level segments; no copy of the value store is made.
class LevelRowIterator {
 public:
  struct Entry {
    col_t col;
    double value;
    index_t offset;  // position in data/index
  };

  LevelRowIterator() = default;
  LevelRowIterator(const HcsrMatrix* m, SparsityLevel level, index_t row, bool at_end) : m_(m) {
    if (m_ == nullptr) return;
    cursors_.reserve(static_cast<std::size_t>(level + 1));
    for (SparsityLevel k = 0; k <= level; ++k) {
      auto [b, e] = m_->segment(k, row);
      if (b < e) cursors_.push_back({at_end ? e : b, e});
    }
    if (at_end) {
      done_ = true;
    } else {
      advance_to_min();
    }
  }

  Entry operator*() const {
    return {m_->index[static_cast<std::size_t>(current_)],
            m_->data[static_cast<std::size_t>(current_)], current_};
  }

  LevelRowIterator& operator++() {
    ++cursors_[current_segment_].pos;
    advance_to_min();
    return *this;
  }

  bool operator==(const LevelRowIterator& o) const { return done_ == o.done_ && (done_ || current_ == o.current_); }
  bool operator!=(const LevelRowIterator& o) const { return !(*this == o); }

 private:
  struct Cursor {
    index_t pos;
    index_t end;
  };

  void advance_to_min() {
    col_t best = -1;
    std::size_t best_seg = 0;
    bool found = false;
    for (std::size_t s = 0; s < cursors_.size(); ++s) {
      if (cursors_[s].pos >= cursors_[s].end) continue;
      const col_t c = m_->index[static_cast<std::size_t>(cursors_[s].pos)];
      if (!found || c < best) {
        best = c;
        best_seg = s;
        found = true;
      }
    }
    if (!found) {
      done_ = true;
      return;
    }
    done_ = false;
    current_segment_ = best_seg;
    current_ = cursors_[best_seg].pos;
  }

  const HcsrMatrix* m_ = nullptr;
  std::vector<Cursor> cursors_;
  std::size_t current_segment_ = 0;
  index_t current_ = 0;
  bool done_ = true;
};

class LevelRowRange {
 public:
  LevelRowRange(const HcsrMatrix* m, SparsityLevel level, index_t row)
      : m_(m), level_(level), row_(row) {}
  LevelRowIterator begin() const { return {m_, level_, row_, false}; }
  LevelRowIterator end() const { return {m_, level_, row_, true}; }

 private:
  const HcsrMatrix* m_;
  SparsityLevel level_;
  index_t row_;
};

// Per-row access to one sparsity level.
class LevelView {
 public:
  LevelView(const HcsrMatrix& m, SparsityLevel level) : m_(&m), level_(level) {
    m.check_level(level);
  }
  LevelRowRange row(index_t i) const { return {m_, level_, i}; }
  index_t rows() const { return m_->rows; }
  SparsityLevel level() const { return level_; }

 private:
  const HcsrMatrix* m_;
  SparsityLevel level_;
};

inline LevelView level_view(const HcsrMatrix& h, SparsityLevel level) { return {h, level}; }

// Visits the level's entries of one row in ascending column order without
// constructing iterators; `scratch` is caller-owned to avoid per-row
// allocation in kernels. f(offset) for each visited entry.
template <typename F>
inline void visit_row_level(const HcsrMatrix& h, SparsityLevel level, index_t row,
                            std::vector<std::pair<index_t, index_t>>& scratch, F&& f) {
  scratch.clear();
  for (SparsityLevel k = 0; k <= level; ++k) {
    auto seg = h.segment(k, row);
    if (seg.first < seg.second) scratch.push_back(seg);
  }
  while (true) {
    col_t best = -1;
    std::size_t best_seg = 0;
    bool found = false;
    for (std::size_t s = 0; s < scratch.size(); ++s) {
      if (scratch[s].first >= scratch[s].second) continue;
      const col_t c = h.index[static_cast<std::size_t>(scratch[s].first)];
      if (!found || c < best) {
        best = c;
        best_seg = s;
        found = true;
      }
    }
    if (!found) return;
    f(scratch[best_seg].first);
    ++scratch[best_seg].first;
  }
}

// --- encode / decode ----------------------------------------------------------

// Builds the hierarchical store from a dense matrix and nested level masks.
// Exact zeros are dropped unless keep_explicit_zeros is set; pruning treats a
// zero weight as absent, but frozen training masks may need to store it.
inline HcsrMatrix encode(const DenseMatrix& dense, const LevelMaskSet& levels,
                         bool keep_explicit_zeros = false) {
  if (dense.rows != levels.rows || dense.cols != levels.cols)
    throw ShapeError("encode: dense and mask shapes differ");
  if (levels.num_levels() < 1) throw ShapeError("encode: at least one mask level required");
  levels.check_nested();

  HcsrMatrix h;
  h.rows = dense.rows;
  h.cols = dense.cols;
  h.num_levels = levels.num_levels();
  h.ind_ptr.assign(static_cast<std::size_t>(h.rows + 1), 0);
  h.end_ind_ptr.assign(static_cast<std::size_t>(h.num_levels * h.rows), 0);

  for (index_t i = 0; i < h.rows; ++i) {
    h.ind_ptr[static_cast<std::size_t>(i)] = h.nnz();
    for (SparsityLevel k = 0; k < h.num_levels; ++k) {
      for (index_t c = 0; c < h.cols; ++c) {
        if (!levels.get(k, i, c)) continue;
        if (k > 0 && levels.get(k - 1, i, c)) continue;  // already stored at a sparser level
        const double v = dense.at(i, c);
        if (v == 0.0 && !keep_explicit_zeros) continue;
        h.data.push_back(v);
        h.index.push_back(static_cast<col_t>(c));
      }
      h.end_ptr(k, i) = h.nnz();
    }
  }
  h.ind_ptr[static_cast<std::size_t>(h.rows)] = h.nnz();
  return h;
}

inline DenseMatrix decode(const HcsrMatrix& h, SparsityLevel level) {
  h.check_level(level);
  DenseMatrix d(h.rows, h.cols);
  for (index_t i = 0; i < h.rows; ++i) {
    const index_t end = h.end_ptr(level, i);
    for (index_t t = h.ind_ptr[static_cast<std::size_t>(i)]; t < end; ++t)
      d.at(i, h.index[static_cast<std::size_t>(t)]) = h.data[static_cast<std::size_t>(t)];
  }
  return d;
}

// Level masks as stored (pattern of each level).
inline LevelMaskSet extract_masks(const HcsrMatrix& h) {
  LevelMaskSet set = LevelMaskSet::zeros(h.rows, h.cols, h.num_levels);
  for (SparsityLevel k = 0; k < h.num_levels; ++k) {
    for (index_t i = 0; i < h.rows; ++i) {
      const index_t end = h.end_ptr(k, i);
      for (index_t t = h.ind_ptr[static_cast<std::size_t>(i)]; t < end; ++t)
        set.set(k, i, h.index[static_cast<std::size_t>(t)], true);
    }
  }
  return set;
}

// --- validation ---------------------------------------------------------------

struct Violation {
  enum class Kind {
    shape,
    ind_ptr_start,
    ind_ptr_monotone,
    ind_ptr_total,
    level_nesting,
    top_level_end,
    column_order,
    duplicate_column,
    column_range,
    explicit_zero,
  };
  Kind kind;
  index_t level = -1;
  index_t row = -1;
  index_t col = -1;
  std::string message;
};

struct ValidateOptions {
  // Encode never stores exact zeros by default; matrices built with
  // keep_explicit_zeros should validate with this off.
  bool flag_explicit_zeros = true;
};

// Checks every structural invariant and reports all violations found.
inline std::vector<Violation> validate(const HcsrMatrix& h, const ValidateOptions& opts = {}) {
  std::vector<Violation> out;
  auto add = [&out](Violation::Kind kind, index_t level, index_t row, index_t col,
                    std::string msg) {
    out.push_back({kind, level, row, col, std::move(msg)});
  };

  const index_t n = h.nnz();
  if (h.num_levels < 1) add(Violation::Kind::shape, -1, -1, -1, "num_levels < 1");
  if (static_cast<index_t>(h.index.size()) != n)
    add(Violation::Kind::shape, -1, -1, -1, "data and index lengths differ");
  if (static_cast<index_t>(h.ind_ptr.size()) != h.rows + 1)
    add(Violation::Kind::shape, -1, -1, -1, "ind_ptr length != rows+1");
  if (static_cast<index_t>(h.end_ind_ptr.size()) != h.num_levels * h.rows)
    add(Violation::Kind::shape, -1, -1, -1, "end_ind_ptr length != num_levels*rows");
  if (!out.empty()) return out;  // array shapes are off; element checks would be UB

  if (h.ind_ptr.front() != 0)
    add(Violation::Kind::ind_ptr_start, -1, -1, -1, "ind_ptr[0] != 0");
  for (index_t i = 0; i < h.rows; ++i) {
    if (h.ind_ptr[static_cast<std::size_t>(i + 1)] < h.ind_ptr[static_cast<std::size_t>(i)]) {
      std::ostringstream os;
      os << "ind_ptr decreases at row " << i;
      add(Violation::Kind::ind_ptr_monotone, -1, i, -1, os.str());
    }
  }
  if (h.ind_ptr.back() != n)
    add(Violation::Kind::ind_ptr_total, -1, -1, -1, "ind_ptr[rows] != nnz");

  for (index_t i = 0; i < h.rows; ++i) {
    index_t prev = h.ind_ptr[static_cast<std::size_t>(i)];
    for (SparsityLevel k = 0; k < h.num_levels; ++k) {
      const index_t e = h.end_ptr(k, i);
      if (e < prev || e > h.ind_ptr[static_cast<std::size_t>(i + 1)]) {
        std::ostringstream os;
        os << "level " << k << " end offset breaks nesting at row " << i;
        add(Violation::Kind::level_nesting, k, i, -1, os.str());
      }
      prev = std::max(prev, e);
    }
    if (h.end_ptr(h.num_levels - 1, i) != h.ind_ptr[static_cast<std::size_t>(i + 1)]) {
      std::ostringstream os;
      os << "top level does not span row " << i;
      add(Violation::Kind::top_level_end, h.num_levels - 1, i, -1, os.str());
    }
  }

  for (index_t i = 0; i < h.rows; ++i) {
    std::vector<col_t> seen;
    for (SparsityLevel k = 0; k < h.num_levels; ++k) {
      auto [b, e] = h.segment(k, i);
      b = std::max(b, h.ind_ptr[static_cast<std::size_t>(i)]);
      e = std::min(e, h.ind_ptr[static_cast<std::size_t>(i + 1)]);
      col_t prev_col = -1;
      for (index_t t = b; t < e; ++t) {
        const col_t c = h.index[static_cast<std::size_t>(t)];
        if (c < 0 || c >= h.cols) {
          std::ostringstream os;
          os << "column " << c << " out of range at row " << i;
          add(Violation::Kind::column_range, k, i, c, os.str());
          continue;
        }
        if (prev_col >= 0 && c <= prev_col) {
          std::ostringstream os;
          os << "columns not strictly ascending in level " << k << " segment of row " << i;
          add(Violation::Kind::column_order, k, i, c, os.str());
        }
        prev_col = c;
        seen.push_back(c);
        if (opts.flag_explicit_zeros && h.data[static_cast<std::size_t>(t)] == 0.0) {
          std::ostringstream os;
          os << "explicit zero stored at (" << i << ", " << c << ")";
          add(Violation::Kind::explicit_zero, k, i, c, os.str());
        }
      }
    }
    std::sort(seen.begin(), seen.end());
    for (std::size_t t = 1; t < seen.size(); ++t) {
      if (seen[t] == seen[t - 1]) {
        std::ostringstream os;
        os << "duplicate column " << seen[t] << " in row " << i;
        add(Violation::Kind::duplicate_column, -1, i, seen[t], os.str());
      }
    }
  }
  return out;
}

// --- add_level ----------------------------------------------------------------

// Inserts a new level at either end of the hierarchy by re-permuting data and
// index in place (new top: append each row's extra entries; new bottom:
// reorder each row's sparsest segment). Shared values stay bit-identical.
inline HcsrMatrix add_level(const HcsrMatrix& h, const std::vector<std::uint8_t>& new_mask,
                            const DenseMatrix& new_values) {
  if (new_values.rows != h.rows || new_values.cols != h.cols ||
      static_cast<index_t>(new_mask.size()) != h.rows * h.cols)
    throw ShapeError("add_level: mask/value shape mismatch");

  const LevelMaskSet current = extract_masks(h);
  const auto& bottom = current.masks.front();
  const auto& top = current.masks.back();

  bool subset_of_bottom = true, proper_sub = false;
  bool superset_of_top = true, proper_super = false;
  index_t bad_r = -1, bad_c = -1;
  for (index_t i = 0; i < h.rows * h.cols; ++i) {
    const bool m = new_mask[static_cast<std::size_t>(i)] != 0;
    const bool b = bottom[static_cast<std::size_t>(i)] != 0;
    const bool t = top[static_cast<std::size_t>(i)] != 0;
    if (m && !b) subset_of_bottom = false;
    if (b && !m) proper_sub = true;
    if (t && !m) {
      superset_of_top = false;
      if (bad_r < 0) {
        bad_r = i / h.cols;
        bad_c = i % h.cols;
      }
    }
    if (m && !t) proper_super = true;
  }

  const bool insert_bottom = subset_of_bottom && proper_sub;
  const bool append_top = superset_of_top && proper_super;
  if (!insert_bottom && !append_top) {
    std::ostringstream os;
    os << "new mask neither strictly contained by the bottom level nor strictly containing the "
          "top level (first mismatch at ("
       << bad_r << ", " << bad_c << "))";
    throw HierarchyError(os.str(), insert_bottom ? h.num_levels : 0, bad_r, bad_c);
  }

  // Shared positions must agree bit-exactly with the stored values.
  for (index_t i = 0; i < h.rows; ++i) {
    const index_t end = h.ind_ptr[static_cast<std::size_t>(i + 1)];
    for (index_t t = h.ind_ptr[static_cast<std::size_t>(i)]; t < end; ++t) {
      const index_t c = h.index[static_cast<std::size_t>(t)];
      const bool shared = append_top || new_mask[static_cast<std::size_t>(i * h.cols + c)] != 0;
      if (!shared) continue;
      const double expect = h.data[static_cast<std::size_t>(t)];
      const double got = new_values.at(i, c);
      if (std::memcmp(&expect, &got, sizeof(double)) != 0) {
        std::ostringstream os;
        os << "add_level: value disagreement at (" << i << ", " << c << ")";
        throw ValueMismatchError(os.str(), i, c);
      }
    }
  }

  HcsrMatrix out;
  out.rows = h.rows;
  out.cols = h.cols;
  out.num_levels = h.num_levels + 1;
  out.ind_ptr.assign(static_cast<std::size_t>(h.rows + 1), 0);
  out.end_ind_ptr.assign(static_cast<std::size_t>(out.num_levels * out.rows), 0);

  if (append_top) {
    for (index_t i = 0; i < h.rows; ++i) {
      out.ind_ptr[static_cast<std::size_t>(i)] = out.nnz();
      const index_t shift = out.nnz() - h.ind_ptr[static_cast<std::size_t>(i)];
      const index_t row_end = h.ind_ptr[static_cast<std::size_t>(i + 1)];
      for (index_t t = h.ind_ptr[static_cast<std::size_t>(i)]; t < row_end; ++t) {
        out.data.push_back(h.data[static_cast<std::size_t>(t)]);
        out.index.push_back(h.index[static_cast<std::size_t>(t)]);
      }
      for (SparsityLevel k = 0; k < h.num_levels; ++k) out.end_ptr(k, i) = h.end_ptr(k, i) + shift;
      for (index_t c = 0; c < h.cols; ++c) {
        if (new_mask[static_cast<std::size_t>(i * h.cols + c)] == 0) continue;
        if (top[static_cast<std::size_t>(i * h.cols + c)] != 0) continue;
        const double v = new_values.at(i, c);
        if (v == 0.0) continue;  // same drop-zeros rule as encode
        out.data.push_back(v);
        out.index.push_back(static_cast<col_t>(c));
      }
      out.end_ptr(h.num_levels, i) = out.nnz();
    }
    out.ind_ptr[static_cast<std::size_t>(h.rows)] = out.nnz();
  } else {
    out.data = h.data;
    out.index = h.index;
    out.ind_ptr = h.ind_ptr;
    for (index_t i = 0; i < h.rows; ++i) {
      // Stable partition of the old bottom segment: new-mask entries first.
      const index_t b = h.ind_ptr[static_cast<std::size_t>(i)];
      const index_t e = h.end_ptr(0, i);
      std::vector<std::pair<col_t, double>> kept, rest;
      for (index_t t = b; t < e; ++t) {
        const col_t c = h.index[static_cast<std::size_t>(t)];
        const double v = h.data[static_cast<std::size_t>(t)];
        if (new_mask[static_cast<std::size_t>(i * h.cols + c)] != 0)
          kept.emplace_back(c, v);
        else
          rest.emplace_back(c, v);
      }
      index_t t = b;
      for (const auto& [c, v] : kept) {
        out.index[static_cast<std::size_t>(t)] = c;
        out.data[static_cast<std::size_t>(t)] = v;
        ++t;
      }
      out.end_ptr(0, i) = t;
      for (const auto& [c, v] : rest) {
        out.index[static_cast<std::size_t>(t)] = c;
        out.data[static_cast<std::size_t>(t)] = v;
        ++t;
      }
      for (SparsityLevel k = 0; k < h.num_levels; ++k) out.end_ptr(k + 1, i) = h.end_ptr(k, i);
    }
  }
  return out;
}

// --- storage accounting ---------------------------------------------------------

struct StorageReport {
  index_t value_bytes = 8;
  index_t index_bytes = 4;
  std::uint64_t hierarchical_bytes = 0;
  std::uint64_t separate_bytes = 0;
  double savings_fraction = 0.0;
  std::vector<index_t> level_nnz;
};

// Byte cost of the hierarchical store vs one standalone CSR per level. The
// top level's end pointers are not counted: they duplicate ind_ptr shifted by
// one, so only the num_levels-1 extra end arrays are overhead. index_bytes
// may be 0 to count weight values only; pass 2 for 16-bit indices when
// cols < 65536.
inline StorageReport storage_report(const HcsrMatrix& h, index_t value_bytes = 8,
                                    index_t index_bytes = 4) {
  StorageReport r;
  r.value_bytes = value_bytes;
  r.index_bytes = index_bytes;
  const std::uint64_t v = static_cast<std::uint64_t>(value_bytes);
  const std::uint64_t ib = static_cast<std::uint64_t>(index_bytes);
  const std::uint64_t n = static_cast<std::uint64_t>(h.nnz());
  const std::uint64_t rows = static_cast<std::uint64_t>(h.rows);
  const std::uint64_t levels = static_cast<std::uint64_t>(h.num_levels);

  r.hierarchical_bytes = n * (v + ib) + (rows + 1) * ib + (levels - 1) * rows * ib;
  r.separate_bytes = 0;
  for (SparsityLevel k = 0; k < h.num_levels; ++k) {
    const std::uint64_t nk = static_cast<std::uint64_t>(h.nnz(k));
    r.level_nnz.push_back(static_cast<index_t>(nk));
    r.separate_bytes += nk * (v + ib) + (rows + 1) * ib;
  }
  r.savings_fraction =
      r.separate_bytes == 0
          ? 0.0
          : 1.0 - static_cast<double>(r.hierarchical_bytes) / static_cast<double>(r.separate_bytes);
  return r;
}

// --- container serialization ----------------------------------------------------
//
// Layout (little-endian): "HCSR", u16 version, u16 value width, u16 index
// width, u16 reserved, u64 rows/cols/num_levels/N, then ind_ptr (u64),
// end_ind_ptr for all levels level-major (u64), index (u32), data (f64).

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof(d));
  put_u64(out, bits);
}

class Reader {
 public:
  Reader(const std::string& buf) : buf_(buf) {}
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(buf_[pos_]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
  }
  std::string magic(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw IoError("HCSR container truncated");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint16_t kHcsrFormatVersion = 1;

inline std::string serialize_hcsr(const HcsrMatrix& h) {
  std::string out;
  out.reserve(44 + h.data.size() * 12 + h.ind_ptr.size() * 8 + h.end_ind_ptr.size() * 8);
  out += "HCSR";
  detail::put_u16(out, kHcsrFormatVersion);
  detail::put_u16(out, 8);  // value width
  detail::put_u16(out, 4);  // index width
  detail::put_u16(out, 0);
  detail::put_u64(out, static_cast<std::uint64_t>(h.rows));
  detail::put_u64(out, static_cast<std::uint64_t>(h.cols));
  detail::put_u64(out, static_cast<std::uint64_t>(h.num_levels));
  detail::put_u64(out, static_cast<std::uint64_t>(h.nnz()));
  for (index_t p : h.ind_ptr) detail::put_u64(out, static_cast<std::uint64_t>(p));
  for (index_t p : h.end_ind_ptr) detail::put_u64(out, static_cast<std::uint64_t>(p));
  for (col_t c : h.index) {
    detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::uint32_t>(c) & 0xffff));
    detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::uint32_t>(c) >> 16));
  }
  for (double d : h.data) detail::put_f64(out, d);
  return out;
}

inline HcsrMatrix deserialize_hcsr(const std::string& buf) {
  detail::Reader r(buf);
  if (r.magic(4) != "HCSR") throw IoError("not an HCSR container (bad magic)");
  const std::uint16_t version = r.u16();
  if (version != kHcsrFormatVersion) throw IoError("unsupported HCSR container version");
  const std::uint16_t value_width = r.u16();
  const std::uint16_t index_width = r.u16();
  r.u16();  // reserved
  if (value_width != 8 || index_width != 4)
    throw IoError("unsupported HCSR value/index width");
  HcsrMatrix h;
  h.rows = static_cast<index_t>(r.u64());
  h.cols = static_cast<index_t>(r.u64());
  h.num_levels = static_cast<index_t>(r.u64());
  const index_t n = static_cast<index_t>(r.u64());
  h.ind_ptr.resize(static_cast<std::size_t>(h.rows + 1));
  for (auto& p : h.ind_ptr) p = static_cast<index_t>(r.u64());
  h.end_ind_ptr.resize(static_cast<std::size_t>(h.num_levels * h.rows));
  for (auto& p : h.end_ind_ptr) p = static_cast<index_t>(r.u64());
  h.index.resize(static_cast<std::size_t>(n));
  for (auto& c : h.index) c = static_cast<col_t>(r.u32());
  h.data.resize(static_cast<std::size_t>(n));
  for (auto& d : h.data) d = r.f64();
  return h;
}

inline void save_hcsr(const HcsrMatrix& h, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const std::string buf = serialize_hcsr(h);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to " + path);
}

inline HcsrMatrix load_hcsr(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_hcsr(buf);
}

// Human-readable dump mirroring the stored arrays.
inline nlohmann::json hcsr_debug_json(const HcsrMatrix& h) {
  nlohmann::json j;
  j["rows"] = h.rows;
  j["cols"] = h.cols;
  j["num_levels"] = h.num_levels;
  j["data"] = h.data;
  j["index"] = h.index;
  j["ind_ptr"] = h.ind_ptr;
  nlohmann::json levels = nlohmann::json::array();
  for (SparsityLevel k = 0; k < h.num_levels; ++k) {
    nlohmann::json row = nlohmann::json::array();
    for (index_t i = 0; i < h.rows; ++i) row.push_back(h.end_ptr(k, i));
    levels.push_back(std::move(row));
  }
  j["end_ind_ptr"] = std::move(levels);
  return j;
}

}  // namespace hsnn
