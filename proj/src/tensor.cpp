#include "smg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

namespace smg {

namespace {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

double stable_sigmoid(double x) {
  double s;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    double e = std::exp(x);
    s = e / (1.0 + e);
  }
  // keep outputs strictly inside (0,1) even when exp underflows
  if (s >= 1.0) s = std::nextafter(1.0, 0.0);
  if (s <= 0.0) s = std::numeric_limits<double>::min();
  return s;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor Tensor::scalar(double v) {
  Tensor t(Shape{1});
  t.data[0] = v;
  return t;
}

Tensor Tensor::row(std::initializer_list<double> xs) {
  Tensor t(Shape{1, xs.size()});
  std::copy(xs.begin(), xs.end(), t.data.begin());
  return t;
}

Tensor Tensor::column(std::initializer_list<double> xs) {
  Tensor t(Shape{xs.size(), 1});
  std::copy(xs.begin(), xs.end(), t.data.begin());
  return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  Tensor t(Shape{r, c});
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged rows");
    std::copy(row.begin(), row.end(), t.data.begin() + i * c);
    ++i;
  }
  return t;
}

Tensor Tensor::uniform(Shape s, double lo, double hi, std::mt19937_64& rng) {
  Tensor t(std::move(s));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& x : t.data) x = dist(rng);
  return t;
}

Tensor Tensor::glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform(Shape{fan_in, fan_out}, -a, a, rng);
}

std::size_t Tensor::rows() const {
  if (shape.size() != 2) throw ShapeError("rows(): tensor is not rank-2, shape " + shape_str(shape));
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (shape.size() != 2) throw ShapeError("cols(): tensor is not rank-2, shape " + shape_str(shape));
  return shape[1];
}

double Tensor::scalar_value() const {
  if (!is_scalar()) throw ShapeError("scalar_value(): tensor has shape " + shape_str(shape));
  return data[0];
}

// ---------------------------------------------------------------------------
// Tape

void Tape::check_var(Var v, const char* who) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= slots_.size())
    throw ContractError(std::string(who) + ": invalid tape handle");
}

int Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop) {
  Slot s;
  s.value = std::move(value);
  s.requires_grad = requires_grad;
  s.backprop = std::move(backprop);
  slots_.push_back(std::move(s));
  return static_cast<int>(slots_.size()) - 1;
}

Var Tape::param(const Tensor& t) { return Var{push(t, true, nullptr)}; }

Var Tape::constant(const Tensor& t) { return Var{push(t, false, nullptr)}; }

const Tensor& Tape::value(Var v) const {
  check_var(v, "value");
  return slots_[v.id].value;
}

const Tensor& Tape::grad(Var v) const {
  check_var(v, "grad");
  const Slot& s = slots_[v.id];
  if (!s.requires_grad) throw ContractError("grad: variable is not tracked");
  if (s.grad.numel() == 0) throw ContractError("grad: backward() has not run");
  return s.grad;
}

Var Tape::matmul(Var av, Var bv) {
  check_var(av, "matmul");
  check_var(bv, "matmul");
  const Tensor& a = val(av.id);
  const Tensor& b = val(bv.id);
  if (!a.is_matrix() || !b.is_matrix() || a.cols() != b.rows())
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = &a.data[i * k];
    double* orow = &out.data[i * n];
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = &b.data[kk * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  const int aid = av.id, bid = bv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(aid) || tracked(bid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [aid, bid, out_id, m, k, n](Tape& tp) {
      const Tensor& g = tp.grd(out_id);
      if (tp.tracked(aid)) {
        // dA += g . B^T
        const Tensor& bval = tp.val(bid);
        Tensor& da = tp.grd(aid);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* grow = &g.data[i * n];
            const double* brow = &bval.data[kk * n];
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            da.data[i * k + kk] += acc;
          }
      }
      if (tp.tracked(bid)) {
        // dB += A^T . g
        const Tensor& aval = tp.val(aid);
        Tensor& db = tp.grd(bid);
        for (std::size_t i = 0; i < m; ++i) {
          const double* arow = &aval.data[i * k];
          const double* grow = &g.data[i * n];
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = arow[kk];
            double* dbrow = &db.data[kk * n];
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += aik * grow[j];
          }
        }
      }
    };
  }
  return Var{push(std::move(out), rg, std::move(bp))};
}

Var Tape::add(Var av, Var bv) {
  check_var(av, "add");
  check_var(bv, "add");
  const Tensor& a = val(av.id);
  const Tensor& b = val(bv.id);
  const bool same = a.same_shape(b);
  const bool row_bcast =
      !same && a.is_matrix() && b.is_matrix() && b.rows() == 1 && b.cols() == a.cols();
  if (!same && !row_bcast)
    throw ShapeError("add: incompatible shapes " + shape_str(a.shape) + " + " +
                     shape_str(b.shape));
  Tensor out = a;
  out.requires_grad = false;
  if (same) {
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  } else {
    const std::size_t rows = a.rows(), cols = a.cols();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out.data[i * cols + j] += b.data[j];
  }
  const int aid = av.id, bid = bv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(aid) || tracked(bid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [aid, bid, out_id, same](Tape& tp) {
      const Tensor& g = tp.grd(out_id);
      if (tp.tracked(aid)) {
        Tensor& da = tp.grd(aid);
        for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
      }
      if (tp.tracked(bid)) {
        Tensor& db = tp.grd(bid);
        if (same) {
          for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i];
        } else {
          const std::size_t rows = g.rows(), cols = g.cols();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) db.data[j] += g.data[i * cols + j];
        }
      }
    };
  }
  return Var{push(std::move(out), rg, std::move(bp))};
}

Var Tape::mul(Var av, Var bv) {
  check_var(av, "mul");
  check_var(bv, "mul");
  const Tensor& a = val(av.id);
  const Tensor& b = val(bv.id);
  const bool same = a.same_shape(b);
  const bool col_bcast =
      !same && a.is_matrix() && b.is_matrix() && b.cols() == 1 && b.rows() == a.rows();
  if (!same && !col_bcast)
    throw ShapeError("mul: incompatible shapes " + shape_str(a.shape) + " * " +
                     shape_str(b.shape));
  Tensor out = a;
  out.requires_grad = false;
  if (same) {
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  } else {
    const std::size_t rows = a.rows(), cols = a.cols();
    for (std::size_t i = 0; i < rows; ++i) {
      const double bi = b.data[i];
      for (std::size_t j = 0; j < cols; ++j) out.data[i * cols + j] *= bi;
    }
  }
  const int aid = av.id, bid = bv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(aid) || tracked(bid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [aid, bid, out_id, same](Tape& tp) {
      const Tensor& g = tp.grd(out_id);
      const Tensor& a = tp.val(aid);
      const Tensor& b = tp.val(bid);
      if (same) {
        if (tp.tracked(aid)) {
          Tensor& da = tp.grd(aid);
          for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * b.data[i];
        }
        if (tp.tracked(bid)) {
          Tensor& db = tp.grd(bid);
          for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * a.data[i];
        }
      } else {
        const std::size_t rows = g.rows(), cols = g.cols();
        if (tp.tracked(aid)) {
          Tensor& da = tp.grd(aid);
          for (std::size_t i = 0; i < rows; ++i) {
            const double bi = b.data[i];
            for (std::size_t j = 0; j < cols; ++j) da.data[i * cols + j] += g.data[i * cols + j] * bi;
          }
        }
        if (tp.tracked(bid)) {
          Tensor& db = tp.grd(bid);
          for (std::size_t i = 0; i < rows; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < cols; ++j) acc += g.data[i * cols + j] * a.data[i * cols + j];
            db.data[i] += acc;
          }
        }
      }
    };
  }
  return Var{push(std::move(out), rg, std::move(bp))};
}

Var Tape::relu(Var xv) {
  check_var(xv, "relu");
  const Tensor& x = val(xv.id);
  Tensor out = x;
  out.requires_grad = false;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  const int xid = xv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(xid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [xid, out_id](Tape& tp) {
      const Tensor& g = tp.grd(out_id);
      const Tensor& x = tp.val(xid);
      Tensor& dx = tp.grd(xid);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        if (x.data[i] > 0.0) dx.data[i] += g.data[i];
    };
  }
  return Var{push(std::move(out), rg, std::move(bp))};
}

Var Tape::sigmoid(Var xv) {
  check_var(xv, "sigmoid");
  const Tensor& x = val(xv.id);
  Tensor out = x;
  out.requires_grad = false;
  for (double& v : out.data) v = stable_sigmoid(v);
  const int xid = xv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(xid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [xid, out_id](Tape& tp) {
      const Tensor& g = tp.grd(out_id);
      const Tensor& s = tp.val(out_id);
      Tensor& dx = tp.grd(xid);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        dx.data[i] += g.data[i] * s.data[i] * (1.0 - s.data[i]);
    };
  }
  return Var{push(std::move(out), rg, std::move(bp))};
}

Var Tape::concat_cols(Var av, Var bv) {
  check_var(av, "concat_cols");
  check_var(bv, "concat_cols");
  const Tensor& a = val(av.id);
  const Tensor& b = val(bv.id);
  if (!a.is_matrix() || !b.is_matrix() || a.rows() != b.rows())
    throw ShapeError("concat_cols: incompatible shapes " + shape_str(a.shape) + " || " +
                     shape_str(b.shape));
  const std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor out(Shape{rows, ca + cb});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy(&a.data[i * ca], &a.data[i * ca] + ca, &out.data[i * (ca + cb)]);
    std::copy(&b.data[i * cb], &b.data[i * cb] + cb, &out.data[i * (ca + cb)] + ca);
  }
  const int aid = av.id, bid = bv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(aid) || tracked(bid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [aid, bid, out_id, rows, ca, cb](Tape& tp) {
      const Tensor& g = tp.grd(out_id);
      if (tp.tracked(aid)) {
        Tensor& da = tp.grd(aid);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < ca; ++j) da.data[i * ca + j] += g.data[i * (ca + cb) + j];
      }
      if (tp.tracked(bid)) {
        Tensor& db = tp.grd(bid);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cb; ++j)
            db.data[i * cb + j] += g.data[i * (ca + cb) + ca + j];
      }
    };
  }
  return Var{push(std::move(out), rg, std::move(bp))};
}

Var Tape::neighbor_sum(Var hv, const Csr& adj) {
  check_var(hv, "neighbor_sum");
  const Tensor& h = val(hv.id);
  if (!h.is_matrix() || static_cast<int>(h.rows()) != adj.num_nodes())
    throw ShapeError("neighbor_sum: feature rows " + shape_str(h.shape) + " do not match " +
                     std::to_string(adj.num_nodes()) + " adjacency rows");
  const std::size_t n = h.rows(), d = h.cols();
  Tensor out(Shape{n, d});
  for (std::size_t v = 0; v < n; ++v) {
    double* orow = &out.data[v * d];
    for (int e = adj.offsets[v]; e < adj.offsets[v + 1]; ++e) {
      const double* hrow = &h.data[static_cast<std::size_t>(adj.targets[e]) * d];
      for (std::size_t j = 0; j < d; ++j) orow[j] += hrow[j];
    }
  }
  const int hid = hv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(hid);
  const Csr* adj_ptr = &adj;
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [hid, out_id, adj_ptr, n, d](Tape& tp) {
      // transpose-adjacency scatter
      const Tensor& g = tp.grd(out_id);
      Tensor& dh = tp.grd(hid);
      for (std::size_t v = 0; v < n; ++v) {
        const double* grow = &g.data[v * d];
        for (int e = adj_ptr->offsets[v]; e < adj_ptr->offsets[v + 1]; ++e) {
          double* drow = &dh.data[static_cast<std::size_t>(adj_ptr->targets[e]) * d];
          for (std::size_t j = 0; j < d; ++j) drow[j] += grow[j];
        }
      }
    };
  }
  return Var{push(std::move(out), rg, std::move(bp))};
}

namespace {
void check_boundaries(const std::vector<int>& b, std::size_t rows, const char* who) {
  if (b.size() < 2 || b.front() != 0 || static_cast<std::size_t>(b.back()) != rows)
    throw ShapeError(std::string(who) + ": boundaries must start at 0 and end at row count");
  for (std::size_t i = 1; i < b.size(); ++i)
    if (b[i] < b[i - 1]) throw ShapeError(std::string(who) + ": boundaries must be nondecreasing");
}
}  // namespace

Var Tape::segment_sum(Var hv, const std::vector<int>& boundaries) {
  check_var(hv, "segment_sum");
  const Tensor& h = val(hv.id);
  if (!h.is_matrix()) throw ShapeError("segment_sum: expected a matrix");
  check_boundaries(boundaries, h.rows(), "segment_sum");
  const std::size_t num_segments = boundaries.size() - 1, d = h.cols();
  Tensor out(Shape{num_segments, d});
  for (std::size_t s = 0; s < num_segments; ++s) {
    double* orow = &out.data[s * d];
    for (int i = boundaries[s]; i < boundaries[s + 1]; ++i) {
      const double* hrow = &h.data[static_cast<std::size_t>(i) * d];
      for (std::size_t j = 0; j < d; ++j) orow[j] += hrow[j];
    }
  }
  const int hid = hv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(hid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [hid, out_id, boundaries, num_segments, d](Tape& tp) {
      const Tensor& g = tp.grd(out_id);
      Tensor& dh = tp.grd(hid);
      for (std::size_t s = 0; s < num_segments; ++s) {
        const double* grow = &g.data[s * d];
        for (int i = boundaries[s]; i < boundaries[s + 1]; ++i) {
          double* drow = &dh.data[static_cast<std::size_t>(i) * d];
          for (std::size_t j = 0; j < d; ++j) drow[j] += grow[j];
        }
      }
    };
  }
  return Var{push(std::move(out), rg, std::move(bp))};
}

Var Tape::segment_mean(Var hv, const std::vector<int>& boundaries) {
  check_var(hv, "segment_mean");
  const Tensor& h = val(hv.id);
  if (!h.is_matrix()) throw ShapeError("segment_mean: expected a matrix");
  check_boundaries(boundaries, h.rows(), "segment_mean");
  const std::size_t num_segments = boundaries.size() - 1, d = h.cols();
  Tensor out(Shape{num_segments, d});
  for (std::size_t s = 0; s < num_segments; ++s) {
    const int count = boundaries[s + 1] - boundaries[s];
    if (count == 0) continue;  // empty segment stays zero
    double* orow = &out.data[s * d];
    for (int i = boundaries[s]; i < boundaries[s + 1]; ++i) {
      const double* hrow = &h.data[static_cast<std::size_t>(i) * d];
      for (std::size_t j = 0; j < d; ++j) orow[j] += hrow[j];
    }
    for (std::size_t j = 0; j < d; ++j) orow[j] /= count;
  }
  const int hid = hv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(hid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [hid, out_id, boundaries, num_segments, d](Tape& tp) {
      const Tensor& g = tp.grd(out_id);
      Tensor& dh = tp.grd(hid);
      for (std::size_t s = 0; s < num_segments; ++s) {
        const int count = boundaries[s + 1] - boundaries[s];
        if (count == 0) continue;
        const double inv = 1.0 / count;
        const double* grow = &g.data[s * d];
        for (int i = boundaries[s]; i < boundaries[s + 1]; ++i) {
          double* drow = &dh.data[static_cast<std::size_t>(i) * d];
          for (std::size_t j = 0; j < d; ++j) drow[j] += grow[j] * inv;
        }
      }
    };
  }
  return Var{push(std::move(out), rg, std::move(bp))};
}

Var Tape::sum_all(Var xv) {
  check_var(xv, "sum_all");
  const Tensor& x = val(xv.id);
  double acc = 0.0;
  for (double v : x.data) acc += v;
  const int xid = xv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(xid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [xid, out_id](Tape& tp) {
      const double g = tp.grd(out_id).data[0];
      Tensor& dx = tp.grd(xid);
      for (double& v : dx.data) v += g;
    };
  }
  return Var{push(Tensor::scalar(acc), rg, std::move(bp))};
}

Var Tape::mean_all(Var xv) {
  check_var(xv, "mean_all");
  const Tensor& x = val(xv.id);
  if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
  double acc = 0.0;
  for (double v : x.data) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  const int xid = xv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(xid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [xid, out_id, inv](Tape& tp) {
      const double g = tp.grd(out_id).data[0] * inv;
      Tensor& dx = tp.grd(xid);
      for (double& v : dx.data) v += g;
    };
  }
  return Var{push(Tensor::scalar(acc * inv), rg, std::move(bp))};
}

Var Tape::scale(Var xv, double c) {
  check_var(xv, "scale");
  Tensor out = val(xv.id);
  out.requires_grad = false;
  for (double& v : out.data) v *= c;
  const int xid = xv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(xid);
  std::function<void(Tape&)> bp;
  if (rg) {
    bp = [xid, out_id, c](Tape& tp) {
      const Tensor& g = tp.grd(out_id);
      Tensor& dx = tp.grd(xid);
      for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i] * c;
    };
  }
  return Var{push(std::move(out), rg, std::move(bp))};
}

Var Tape::softmax_cross_entropy(Var lv, const std::vector<int>& labels) {
  check_var(lv, "softmax_cross_entropy");
  const Tensor& logits = val(lv.id);
  if (!logits.is_matrix()) throw ShapeError("softmax_cross_entropy: logits must be [G x C]");
  const std::size_t g_count = logits.rows(), c_count = logits.cols();
  if (labels.size() != g_count)
    throw ShapeError("softmax_cross_entropy: label count does not match logit rows");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= c_count)
      throw ContractError("softmax_cross_entropy: label out of range [0, C)");

  Tensor probs(Shape{g_count, c_count});
  double loss = 0.0;
  for (std::size_t i = 0; i < g_count; ++i) {
    const double* row = &logits.data[i * c_count];
    double mx = row[0];
    for (std::size_t j = 1; j < c_count; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < c_count; ++j) denom += std::exp(row[j] - mx);
    const double lse = std::log(denom);
    loss += lse - (row[labels[i]] - mx);
    for (std::size_t j = 0; j < c_count; ++j)
      probs.data[i * c_count + j] = std::exp(row[j] - mx) / denom;
  }
  loss /= static_cast<double>(g_count);

  const int lid = lv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(lid);
  std::function<void(Tape&)> bp;
  if (rg) {
    auto probs_copy = std::make_shared<Tensor>(std::move(probs));
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    bp = [lid, out_id, probs_copy, labels_copy, g_count, c_count](Tape& tp) {
      const double g = tp.grd(out_id).data[0] / static_cast<double>(g_count);
      Tensor& dl = tp.grd(lid);
      for (std::size_t i = 0; i < g_count; ++i)
        for (std::size_t j = 0; j < c_count; ++j) {
          double p = probs_copy->data[i * c_count + j];
          if (j == static_cast<std::size_t>((*labels_copy)[i])) p -= 1.0;
          dl.data[i * c_count + j] += g * p;
        }
    };
  }
  return Var{push(Tensor::scalar(loss), rg, std::move(bp))};
}

Var Tape::mean_abs_error(Var pv, const Tensor& targets) {
  check_var(pv, "mean_abs_error");
  const Tensor& pred = val(pv.id);
  if (!pred.same_shape(targets))
    throw ShapeError("mean_abs_error: prediction shape " + shape_str(pred.shape) +
                     " does not match target shape " + shape_str(targets.shape));
  if (pred.numel() == 0) throw ShapeError("mean_abs_error: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) acc += std::abs(pred.data[i] - targets.data[i]);
  acc /= static_cast<double>(pred.numel());

  const int pid = pv.id;
  const int out_id = static_cast<int>(slots_.size());
  const bool rg = tracked(pid);
  std::function<void(Tape&)> bp;
  if (rg) {
    auto targets_copy = std::make_shared<Tensor>(targets);
    bp = [pid, out_id, targets_copy](Tape& tp) {
      const Tensor& pred = tp.val(pid);
      const double g = tp.grd(out_id).data[0] / static_cast<double>(pred.numel());
      Tensor& dp = tp.grd(pid);
      for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double diff = pred.data[i] - targets_copy->data[i];
        if (diff > 0.0)
          dp.data[i] += g;
        else if (diff < 0.0)
          dp.data[i] -= g;
        // exact tie: subgradient 0
      }
    };
  }
  return Var{push(Tensor::scalar(acc), rg, std::move(bp))};
}

void Tape::backward(Var loss) {
  check_var(loss, "backward");
  if (backward_done_) throw ContractError("backward: tape already differentiated");
  const Slot& ls = slots_[loss.id];
  if (!ls.value.is_scalar()) throw ContractError("backward: loss must be scalar");
  if (!ls.requires_grad)
    throw ContractError("backward: loss does not depend on any tracked variable");
  for (Slot& s : slots_)
    if (s.requires_grad) s.grad = Tensor::zeros(s.value.shape);
  slots_[loss.id].grad.data[0] = 1.0;
  for (int id = static_cast<int>(slots_.size()) - 1; id >= 0; --id) {
    Slot& s = slots_[id];
    if (s.requires_grad && s.backprop) s.backprop(*this);
  }
  backward_done_ = true;
}

// ---------------------------------------------------------------------------
// Adam

AdamOptimizer::AdamOptimizer(std::vector<Tensor*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.lr > 0.0)) throw ContractError("adam: lr must be positive");
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
    throw ContractError("adam: betas must lie in [0, 1)");
  if (!(cfg_.eps > 0.0)) throw ContractError("adam: eps must be positive");
  first_moment_.reserve(params_.size());
  second_moment_.reserve(params_.size());
  for (const Tensor* p : params_) {
    first_moment_.push_back(Tensor::zeros(p->shape));
    second_moment_.push_back(Tensor::zeros(p->shape));
  }
}

void AdamOptimizer::set_lr(double lr) {
  if (!(lr > 0.0)) throw ContractError("adam: lr must be positive");
  cfg_.lr = lr;
}

void AdamOptimizer::step(const std::vector<const Tensor*>& grads) {
  if (grads.size() != params_.size())
    throw ContractError("adam: gradient list does not match parameter list");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i]->same_shape(*params_[i]))
      throw ShapeError("adam: gradient shape " + shape_str(grads[i]->shape) +
                       " does not match parameter shape " + shape_str(params_[i]->shape));
    for (double g : grads[i]->data)
      if (!std::isfinite(g)) throw TrainingError("adam: non-finite gradient");
  }
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    const Tensor& g = *grads[i];
    Tensor& m = first_moment_[i];
    Tensor& v = second_moment_[i];
    for (std::size_t j = 0; j < p.data.size(); ++j) {
      m.data[j] = cfg_.beta1 * m.data[j] + (1.0 - cfg_.beta1) * g.data[j];
      v.data[j] = cfg_.beta2 * v.data[j] + (1.0 - cfg_.beta2) * g.data[j] * g.data[j];
      const double mhat = m.data[j] / bc1;
      const double vhat = v.data[j] / bc2;
      p.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace smg
