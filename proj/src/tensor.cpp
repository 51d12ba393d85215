#include "rpn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace rpn {

namespace {

thread_local Tape* g_current_tape = nullptr;
thread_local int g_no_grad_depth = 0;
std::uint64_t next_tape_id() {
  static thread_local std::uint64_t n = 0;
  return ++n;
}

[[noreturn]] void dim_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw DimensionError(op + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

double splitmix64_to_unit(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  x = x ^ (x >> 31);
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

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

double CounterRng::uniform() {
  ++counter_;
  return splitmix64_to_unit(seed_ ^ (counter_ * 0xd1342543de82ef95ull));
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto s = std::make_shared<detail::Storage>();
  s->data.assign(shape_numel(shape), value);
  s->shape = std::move(shape);
  return Tensor(std::move(s));
}

Tensor Tensor::of(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size())
    throw ContractError("tensor: " + std::to_string(values.size()) +
                        " values for shape " + shape_str(shape));
  auto s = std::make_shared<detail::Storage>();
  s->shape = std::move(shape);
  s->data = std::move(values);
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(double value) { return of({1}, {value}); }

Tensor Tensor::leaf(Shape shape, std::vector<double> values) {
  Tensor t = of(std::move(shape), std::move(values));
  t.s_->leaf = true;
  t.s_->grad.assign(t.size(), 0.0);
  return t;
}

Tensor Tensor::leaf_zeros(Shape shape) {
  return leaf(shape, std::vector<double>(shape_numel(shape), 0.0));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ContractError("rows(): tensor is not rank-2");
  return s_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ContractError("cols(): tensor is not rank-2");
  return s_->shape[1];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item(): tensor has " +
                                       std::to_string(size()) + " elements");
  return s_->data[0];
}

double Tensor::at(std::size_t i) const { return s_->data.at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
  return s_->data.at(r * cols() + c);
}

bool Tensor::tracked() const {
  if (!s_) return false;
  if (s_->leaf) return true;
  Tape* t = Tape::current();
  return t && s_->node >= 0 && s_->tape_id == t->id();
}

std::vector<double>& Tensor::grad() {
  if (!is_leaf()) throw ContractError("grad(): tensor is not a leaf");
  return s_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!is_leaf()) throw ContractError("grad(): tensor is not a leaf");
  return s_->grad;
}

void Tensor::zero_grad() {
  if (is_leaf()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

// ---- Tape ----

Tape::Tape() : id_(next_tape_id()), prev_(g_current_tape) {
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

int Tape::add_node(BackFn fn) {
  nodes_.push_back(Node{std::move(fn)});
  return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>* Tape::sink(const Tensor& t) {
  if (!t.s_) return nullptr;
  if (t.s_->node >= 0 && t.s_->tape_id == id_) {
    auto& buf = adjoints_[static_cast<std::size_t>(t.s_->node)];
    if (buf.empty()) buf.assign(t.size(), 0.0);
    return &buf;
  }
  if (t.s_->leaf) return &t.s_->grad;
  return nullptr;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward: loss must be a scalar tensor");
  if (loss.s_->node < 0 || loss.s_->tape_id != id_)
    throw ContractError("backward: loss is not attached to this graph");
  adjoints_.assign(nodes_.size(), {});
  adjoints_[static_cast<std::size_t>(loss.s_->node)] = {1.0};
  for (int i = loss.s_->node; i >= 0; --i) {
    auto& adj = adjoints_[static_cast<std::size_t>(i)];
    if (!adj.empty()) nodes_[static_cast<std::size_t>(i)].fn(*this, adj);
    adj.clear();
    adj.shrink_to_fit();
  }
  adjoints_.clear();
}

void backward(const Tensor& loss) {
  Tape* t = Tape::current();
  if (!t) throw ContractError("backward: no active graph");
  t->backward(loss);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

// ---- op plumbing ----

struct OpAccess {
  static bool recording(std::initializer_list<const Tensor*> inputs) {
    if (g_no_grad_depth > 0 || !g_current_tape) return false;
    for (const Tensor* t : inputs)
      if (t->tracked()) return true;
    return false;
  }

  static Tensor make(Shape shape, std::vector<double> values,
                     std::initializer_list<const Tensor*> inputs,
                     Tape::BackFn fn) {
    return make_if(std::move(shape), std::move(values), recording(inputs),
                   std::move(fn));
  }

  static Tensor make_if(Shape shape, std::vector<double> values, bool track,
                        Tape::BackFn fn) {
    Tensor out = Tensor::of(std::move(shape), std::move(values));
    if (track && g_no_grad_depth == 0 && g_current_tape) {
      out.s_->node = g_current_tape->add_node(std::move(fn));
      out.s_->tape_id = g_current_tape->id();
    }
    return out;
  }

  static std::vector<double>* sink(Tape& tape, const Tensor& t) {
    return tape.sink(t);
  }
};

namespace {

std::vector<double>* sink(Tape& tape, const Tensor& t) {
  return OpAccess::sink(tape, t);
}

Tensor make(Shape shape, std::vector<double> values,
            std::initializer_list<const Tensor*> inputs, Tape::BackFn fn) {
  return OpAccess::make(std::move(shape), std::move(values), inputs,
                        std::move(fn));
}

// C (m×n) += op(A) · op(B), plain triple loop in i-k-j order
void gemm_acc(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
              const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      if (!tb) {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      }
    }
  }
}

}  // namespace

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    dim_fail("matmul", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  gemm_acc(false, false, m, n, k, a.data().data(), b.data().data(), out.data());
  return make(
      {m, n}, std::move(out), {&a, &b},
      [a, b, m, k, n](Tape& tape, const std::vector<double>& g) {
        if (auto* ga = sink(tape, a))  // dA = g · Bᵀ
          gemm_acc(false, true, m, k, n, g.data(), b.data().data(), ga->data());
        if (auto* gb = sink(tape, b))  // dB = Aᵀ · g
          gemm_acc(true, false, k, n, m, a.data().data(), g.data(), gb->data());
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ContractError("transpose: rank-2 required");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto& av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make({n, m}, std::move(out), {&a},
              [a, m, n](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      (*ga)[i * n + j] += g[j * m + i];
              });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    dim_fail("reshape", a.shape(), shape);
  return make(std::move(shape), a.data(), {&a},
              [a](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
              });
}

namespace {

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary_op(const char* name, BinKind kind, const Tensor& a,
                 const Tensor& b) {
  const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    dim_fail(name, a.shape(), b.shape());
  const Shape& shape = b_scalar ? a.shape() : b.shape();
  const std::size_t n = shape_numel(shape);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a_scalar ? av[0] : av[i];
    const double y = b_scalar ? bv[0] : bv[i];
    switch (kind) {
      case BinKind::Add: out[i] = x + y; break;
      case BinKind::Sub: out[i] = x - y; break;
      case BinKind::Mul: out[i] = x * y; break;
      case BinKind::Div: out[i] = x / y; break;
    }
  }
  return make(
      shape, std::move(out), {&a, &b},
      [kind, a, b, a_scalar, b_scalar, n](Tape& tape,
                                          const std::vector<double>& g) {
        const auto& av = a.data();
        const auto& bv = b.data();
        auto* ga = sink(tape, a);
        auto* gb = sink(tape, b);
        for (std::size_t i = 0; i < n; ++i) {
          const double x = a_scalar ? av[0] : av[i];
          const double y = b_scalar ? bv[0] : bv[i];
          double da = 0.0, db = 0.0;
          switch (kind) {
            case BinKind::Add: da = g[i]; db = g[i]; break;
            case BinKind::Sub: da = g[i]; db = -g[i]; break;
            case BinKind::Mul: da = g[i] * y; db = g[i] * x; break;
            case BinKind::Div:
              da = g[i] / y;
              db = -g[i] * x / (y * y);
              break;
          }
          if (ga) (*ga)[a_scalar ? 0 : i] += da;
          if (gb) (*gb)[b_scalar ? 0 : i] += db;
        }
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", BinKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op("div", BinKind::Div, a, b); }

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.data()[i];
  return make(a.shape(), std::move(out), {&a},
              [a, c](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < g.size(); ++i)
                    (*ga)[i] += c * g[i];
              });
}

Tensor offset(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  return make(a.shape(), std::move(out), {&a},
              [a](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
              });
}

Tensor add_rowvec(const Tensor& mat, const Tensor& v) {
  if (mat.rank() != 2 || v.size() != mat.cols())
    dim_fail("add_rowvec", mat.shape(), v.shape());
  const std::size_t m = mat.rows(), n = mat.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = mat.data()[i * n + j] + v.data()[j];
  return make({m, n}, std::move(out), {&mat, &v},
              [mat, v, m, n](Tape& tape, const std::vector<double>& g) {
                if (auto* gm = sink(tape, mat))
                  for (std::size_t i = 0; i < m * n; ++i) (*gm)[i] += g[i];
                if (auto* gv = sink(tape, v))
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      (*gv)[j] += g[i * n + j];
              });
}

namespace {

template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
  return OpAccess::make(a.shape(), std::move(out), {&a},
                        [a, df](Tape& tape, const std::vector<double>& g) {
                          if (auto* ga = sink(tape, a))
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*ga)[i] += g[i] * df(a.data()[i]);
                        });
}

}  // namespace

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double y = std::tanh(x);
        return 1.0 - y * y;
      });
}

Tensor sigmoid(const Tensor& a) {
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  return unary_op(a, sig, [sig](double x) {
    const double y = sig(x);
    return y * (1.0 - y);
  });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x) { return 1.0 / x; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_op(
      a, [lo](double x) { return x < lo ? lo : x; },
      [lo](double x) { return x > lo ? 1.0 : 0.0; });
}

Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1) dim_fail("concat", a.shape(), b.shape());
  const std::size_t na = a.size(), nb = b.size();
  std::vector<double> out;
  out.reserve(na + nb);
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return make({na + nb}, std::move(out), {&a, &b},
              [a, b, na, nb](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < na; ++i) (*ga)[i] += g[i];
                if (auto* gb = sink(tape, b))
                  for (std::size_t i = 0; i < nb; ++i) (*gb)[i] += g[na + i];
              });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
    dim_fail("concat_cols", a.shape(), b.shape());
  const std::size_t m = a.rows(), na = a.cols(), nb = b.cols();
  const std::size_t n = na + nb;
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < na; ++j) out[i * n + j] = a.data()[i * na + j];
    for (std::size_t j = 0; j < nb; ++j)
      out[i * n + na + j] = b.data()[i * nb + j];
  }
  return make({m, n}, std::move(out), {&a, &b},
              [a, b, m, na, nb, n](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < na; ++j)
                      (*ga)[i * na + j] += g[i * n + j];
                if (auto* gb = sink(tape, b))
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < nb; ++j)
                      (*gb)[i * nb + j] += g[i * n + na + j];
              });
}

Tensor dropout(const Tensor& a, double p, bool train, CounterRng& rng) {
  if (p < 0.0 || p >= 1.0)
    throw ContractError("dropout: p must be in [0,1), got " + std::to_string(p));
  if (!train || p == 0.0) {
    // eval mode is the exact identity
    return make(a.shape(), a.data(), {&a},
                [a](Tape& tape, const std::vector<double>& g) {
                  if (auto* ga = sink(tape, a))
                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                });
  }
  const double keep_scale = 1.0 / (1.0 - p);
  auto keep = std::make_shared<std::vector<std::uint8_t>>(a.size());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool k = rng.uniform() >= p;
    (*keep)[i] = k;
    out[i] = k ? a.data()[i] * keep_scale : 0.0;
  }
  return make(a.shape(), std::move(out), {&a},
              [a, keep, keep_scale](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if ((*keep)[i]) (*ga)[i] += g[i] * keep_scale;
              });
}

Tensor softmax(const Tensor& a, const Mask* mask, bool allow_empty_rows) {
  std::size_t m, n;
  if (a.rank() == 1) {
    m = 1;
    n = a.size();
  } else if (a.rank() == 2) {
    m = a.rows();
    n = a.cols();
  } else {
    throw ContractError("softmax: rank-1 or rank-2 required");
  }
  if (mask && mask->size() != m * n)
    throw ContractError("softmax: mask size " + std::to_string(mask->size()) +
                        " != " + std::to_string(m * n));
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || (*mask)[i * n + j]) mx = std::max(mx, av[i * n + j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      if (!allow_empty_rows)
        throw EmptySupportError("softmax: all entries masked in row " +
                                std::to_string(i));
      continue;  // row stays exactly zero
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || (*mask)[i * n + j]) {
        out[i * n + j] = std::exp(av[i * n + j] - mx);
        denom += out[i * n + j];
      }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= denom;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  std::shared_ptr<Mask> mcopy;
  if (mask) mcopy = std::make_shared<Mask>(*mask);
  return make(a.shape(), std::move(out), {&a},
              [a, y, mcopy, m, n](Tape& tape, const std::vector<double>& g) {
                auto* ga = sink(tape, a);
                if (!ga) return;
                for (std::size_t i = 0; i < m; ++i) {
                  double dot = 0.0;
                  for (std::size_t j = 0; j < n; ++j)
                    dot += g[i * n + j] * (*y)[i * n + j];
                  for (std::size_t j = 0; j < n; ++j) {
                    if (mcopy && !(*mcopy)[i * n + j]) continue;
                    (*ga)[i * n + j] +=
                        (*y)[i * n + j] * (g[i * n + j] - dot);
                  }
                }
              });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make({1}, {total}, {&a},
              [a](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0];
              });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(a.size());
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make({1}, {total * inv}, {&a},
              [a, inv](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < ga->size(); ++i)
                    (*ga)[i] += g[0] * inv;
              });
}

Tensor row_sum(const Tensor& a) {
  if (a.rank() != 2) throw ContractError("row_sum: rank-2 required");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a.data()[i * n + j];
  return make({m}, std::move(out), {&a},
              [a, m, n](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      (*ga)[i * n + j] += g[i];
              });
}

namespace {

// accepts [m] or [m×1] columns
std::size_t column_length(const Tensor& t, const char* op) {
  if (t.rank() == 1) return t.size();
  if (t.rank() == 2 && t.cols() == 1) return t.rows();
  throw ContractError(std::string(op) + ": expected a column, got " +
                      shape_str(t.shape()));
}

}  // namespace

Tensor stack_cols(const std::vector<Tensor>& cols) {
  if (cols.empty()) throw ContractError("stack_cols: no columns");
  const std::size_t m = column_length(cols[0], "stack_cols");
  const std::size_t k = cols.size();
  std::vector<double> out(m * k);
  bool track = false;
  for (std::size_t j = 0; j < k; ++j) {
    if (column_length(cols[j], "stack_cols") != m)
      dim_fail("stack_cols", cols[0].shape(), cols[j].shape());
    track = track || cols[j].tracked();
    for (std::size_t i = 0; i < m; ++i) out[i * k + j] = cols[j].data()[i];
  }
  auto captured = std::make_shared<std::vector<Tensor>>(cols);
  return OpAccess::make_if(
      {m, k}, std::move(out), track,
      [captured, m, k](Tape& tape, const std::vector<double>& g) {
        for (std::size_t j = 0; j < k; ++j)
          if (auto* gc = sink(tape, (*captured)[j]))
            for (std::size_t i = 0; i < m; ++i) (*gc)[i] += g[i * k + j];
      });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: no rows");
  auto row_len = [](const Tensor& t) -> std::size_t {
    if (t.rank() == 1) return t.size();
    if (t.rank() == 2 && t.rows() == 1) return t.cols();
    throw ContractError("stack_rows: expected a row, got " +
                        shape_str(t.shape()));
  };
  const std::size_t n = row_len(rows[0]);
  const std::size_t k = rows.size();
  std::vector<double> out(k * n);
  bool track = false;
  for (std::size_t i = 0; i < k; ++i) {
    if (row_len(rows[i]) != n)
      dim_fail("stack_rows", rows[0].shape(), rows[i].shape());
    track = track || rows[i].tracked();
    std::copy(rows[i].data().begin(), rows[i].data().end(),
              out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  auto captured = std::make_shared<std::vector<Tensor>>(rows);
  return OpAccess::make_if(
      {k, n}, std::move(out), track,
      [captured, n, k](Tape& tape, const std::vector<double>& g) {
        for (std::size_t i = 0; i < k; ++i)
          if (auto* gr = sink(tape, (*captured)[i]))
            for (std::size_t j = 0; j < n; ++j) (*gr)[j] += g[i * n + j];
      });
}

Tensor col(const Tensor& a, std::size_t j) {
  if (a.rank() != 2 || j >= a.cols())
    throw ContractError("col: index " + std::to_string(j) + " out of " +
                        shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = a.data()[i * n + j];
  return make({m}, std::move(out), {&a},
              [a, j, m, n](Tape& tape, const std::vector<double>& g) {
                if (auto* ga = sink(tape, a))
                  for (std::size_t i = 0; i < m; ++i)
                    (*ga)[i * n + j] += g[i];
              });
}

Tensor scale_rows(const Tensor& mat, const Tensor& s) {
  if (mat.rank() != 2) throw ContractError("scale_rows: rank-2 required");
  const std::size_t m = mat.rows(), n = mat.cols();
  if (column_length(s, "scale_rows") != m)
    dim_fail("scale_rows", mat.shape(), s.shape());
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = mat.data()[i * n + j] * s.data()[i];
  return make({m, n}, std::move(out), {&mat, &s},
              [mat, s, m, n](Tape& tape, const std::vector<double>& g) {
                if (auto* gm = sink(tape, mat))
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      (*gm)[i * n + j] += g[i * n + j] * s.data()[i];
                if (auto* gs = sink(tape, s))
                  for (std::size_t i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                      acc += g[i * n + j] * mat.data()[i * n + j];
                    (*gs)[i] += acc;
                  }
              });
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw ContractError("gather_rows: rank-2 required");
  const std::size_t v = table.rows(), d = table.cols();
  for (std::size_t id : ids)
    if (id >= v)
      throw ContractError("gather_rows: row " + std::to_string(id) +
                          " out of " + shape_str(table.shape()));
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d),
                d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  auto idv = std::make_shared<std::vector<std::size_t>>(ids);
  return make({ids.size(), d}, std::move(out), {&table},
              [table, idv, d](Tape& tape, const std::vector<double>& g) {
                if (auto* gt = sink(tape, table))
                  for (std::size_t i = 0; i < idv->size(); ++i)
                    for (std::size_t j = 0; j < d; ++j)
                      (*gt)[(*idv)[i] * d + j] += g[i * d + j];
              });
}

Tensor pick(const Tensor& mat, const std::vector<std::size_t>& idx) {
  if (mat.rank() != 2 || idx.size() != mat.rows())
    throw ContractError("pick: need one index per row of " +
                        shape_str(mat.shape()));
  const std::size_t m = mat.rows(), n = mat.cols();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] >= n)
      throw ContractError("pick: column " + std::to_string(idx[i]) +
                          " out of " + shape_str(mat.shape()));
    out[i] = mat.data()[i * n + idx[i]];
  }
  auto idv = std::make_shared<std::vector<std::size_t>>(idx);
  return make({m}, std::move(out), {&mat},
              [mat, idv, n](Tape& tape, const std::vector<double>& g) {
                if (auto* gm = sink(tape, mat))
                  for (std::size_t i = 0; i < idv->size(); ++i)
                    (*gm)[i * n + (*idv)[i]] += g[i];
              });
}

}  // namespace rpn
