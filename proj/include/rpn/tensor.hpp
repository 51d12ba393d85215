#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

// Dense double tensor with reverse-mode autodiff on a per-thread tape.
// The graph is rebuilt on every forward pass: create a Tape, run ops,
// call backward(loss). Leaf tensors (parameters) accumulate into a
// persistent .grad buffer; intermediate adjoints live only inside the
// backward call. Constants never receive gradient. Without a live Tape
// (or inside NoGradGuard) every op is a plain value computation.

namespace rpn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& m) : std::runtime_error(m) {}
};
// operand shapes do not line up; message names both shapes
struct DimensionError : TensorError {
  explicit DimensionError(const std::string& m) : TensorError(m) {}
};
// an API precondition was violated
struct ContractError : TensorError {
  explicit ContractError(const std::string& m) : TensorError(m) {}
};
// softmax over a fully-masked support
struct EmptySupportError : TensorError {
  explicit EmptySupportError(const std::string& m) : TensorError(m) {}
};

class Tape;

namespace detail {
struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated for leaves only
  bool leaf = false;
  int node = -1;           // index into the tape that recorded this tensor
  std::uint64_t tape_id = 0;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor of(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  // gradient-tracked parameter; grad starts at zero
  static Tensor leaf(Shape shape, std::vector<double> values);
  static Tensor leaf_zeros(Shape shape);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t size() const { return s_->data.size(); }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t rows() const;  // rank-2 only
  std::size_t cols() const;  // rank-2 only

  std::vector<double>& data() { return s_->data; }
  const std::vector<double>& data() const { return s_->data; }
  double item() const;                   // scalar tensors
  double at(std::size_t i) const;        // flat index
  double at(std::size_t r, std::size_t c) const;

  bool is_leaf() const { return s_ && s_->leaf; }
  // true when gradient can flow into or through this tensor
  bool tracked() const;
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

 private:
  std::shared_ptr<detail::Storage> s_;
  explicit Tensor(std::shared_ptr<detail::Storage> s) : s_(std::move(s)) {}
  friend class Tape;
  friend struct OpAccess;
};

// Computation graph for one forward/backward pass. Constructing a Tape
// makes it current for this thread; destruction restores the previous one.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss)=1 and walks the tape in reverse, visiting each
  // node at most once. Leaf gradients accumulate additively.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }
  std::uint64_t id() const { return id_; }
  static Tape* current();

  using BackFn = std::function<void(Tape&, const std::vector<double>&)>;

 private:
  struct Node {
    BackFn fn;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> adjoints_;
  std::uint64_t id_ = 0;
  Tape* prev_ = nullptr;

  int add_node(BackFn fn);
  // adjoint buffer of a tracked input, or leaf grad, or nullptr for constants
  std::vector<double>* sink(const Tensor& t);
  friend struct OpAccess;
};

// convenience: backward on the tape that recorded `loss`
void backward(const Tensor& loss);

// Disables graph recording for the current thread while alive (nestable).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Counter-based generator: the n-th draw is a pure hash of (seed, n), so a
// run's dropout pattern depends only on the seed and the call sequence.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}
  double uniform();  // [0, 1)
  std::uint64_t draws() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

// masks are 1 = keep, 0 = exclude
using Mask = std::vector<std::uint8_t>;

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b);  // [m×k]·[k×n]
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// equal shapes, or either operand a 1-element scalar
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);   // c * a
Tensor offset(const Tensor& a, double c);  // a + c

Tensor add_rowvec(const Tensor& mat, const Tensor& v);  // [m×n] + broadcast [n]

Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

Tensor concat(const Tensor& a, const Tensor& b);       // rank-1 append
Tensor concat_cols(const Tensor& a, const Tensor& b);  // [m×na | m×nb]

// zeroes entries with probability p and scales survivors by 1/(1-p);
// exact identity when train is false
Tensor dropout(const Tensor& a, double p, bool train, CounterRng& rng);

// Masked entries come out exactly 0 and are excluded from the max-shift and
// the denominator. Rank-1 input is one row; rank-2 is row-wise. A row with
// no unmasked entry throws EmptySupportError unless allow_empty_rows, in
// which case the row is all zeros.
Tensor softmax(const Tensor& a, const Mask* mask = nullptr,
               bool allow_empty_rows = false);

Tensor sum(const Tensor& a);      // scalar
Tensor mean(const Tensor& a);     // scalar
Tensor row_sum(const Tensor& a);  // [m×n] -> [m]

Tensor stack_cols(const std::vector<Tensor>& cols);  // k × [m] -> [m×k]
Tensor stack_rows(const std::vector<Tensor>& rows);  // k × [n] -> [k×n]
Tensor col(const Tensor& a, std::size_t j);          // [m×n] -> [m]

Tensor scale_rows(const Tensor& mat, const Tensor& s);  // row i scaled by s[i]

// embedding lookup: rows of table at ids; gradient scatter-adds into table
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);

// out[i] = mat[i, idx[i]]
Tensor pick(const Tensor& mat, const std::vector<std::size_t>& idx);

}  // namespace rpn
