#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnfd {

#if defined(ATTNFD_REAL_FLOAT)
using real = float;
#else
using real = double;  // gradient checks want 64-bit; float is an opt-in build mode
#endif

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LabelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConsistencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Parse failure in an external file format; carries the byte offset at which
/// the input stopped making sense.
struct ParseError : std::runtime_error {
  ParseError(const std::string& msg, std::size_t byte_offset)
      : std::runtime_error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  std::size_t offset;
};

/// When set, ops validate that tensors crossing their boundary are finite.
inline std::atomic<bool>& checked_mode_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
inline void set_checked_mode(bool on) { checked_mode_flag().store(on); }
inline bool checked_mode() { return checked_mode_flag().load(std::memory_order_relaxed); }

/// Dense row-major real array of rank 0..4.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : dims_(std::move(shape)) {
    validate_dims();
    data_.assign(static_cast<std::size_t>(count()), real(0));
  }

  Tensor(std::vector<int> shape, std::vector<real> values)
      : dims_(std::move(shape)), data_(std::move(values)) {
    validate_dims();
    if (static_cast<int64_t>(data_.size()) != count())
      throw DimensionError("tensor data length does not match shape product");
  }

  static Tensor full(std::vector<int> shape, real v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(real v) { return Tensor({}, {v}); }

  const std::vector<int>& shape() const { return dims_; }
  int rank() const { return static_cast<int>(dims_.size()); }
  int extent(int axis) const { return dims_.at(static_cast<std::size_t>(axis)); }

  /// Extent with missing leading axes implied as 1 when treating the tensor
  /// as rank 4 (n,c,h,w).
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }

  real& operator[](int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  real operator[](int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  real& at4(int n, int c, int h, int w) { return data_[static_cast<std::size_t>(index4(n, c, h, w))]; }
  real at4(int n, int c, int h, int w) const {
    return data_[static_cast<std::size_t>(index4(n, c, h, w))];
  }

  int64_t index4(int n, int c, int h, int w) const {
    const int64_t C = dims_[1], H = dims_[2], W = dims_[3];
    return ((int64_t(n) * C + c) * H + h) * W + w;
  }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  bool all_finite() const {
    for (real v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const Tensor& o) const { return dims_ == o.dims_ && data_ == o.data_; }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

 private:
  int64_t count() const {
    int64_t n = 1;
    for (int d : dims_) n *= d;
    return n;
  }
  void validate_dims() const {
    if (dims_.size() > 4) throw DimensionError("tensor rank exceeds 4");
    for (int d : dims_)
      if (d <= 0) throw DimensionError("tensor extent must be positive");
  }

  std::vector<int> dims_;
  std::vector<real> data_;
};

inline void require_finite(const Tensor& t, const char* op) {
  if (checked_mode() && !t.all_finite())
    throw ContractError(std::string(op) + ": non-finite value at op boundary");
}

/// Fixture dump format: "rank e0 e1 ..." on the first line, then row-major
/// values at full decimal precision.
inline void save_tensor_text(std::ostream& os, const Tensor& t) {
  os << t.rank();
  for (int i = 0; i < t.rank(); ++i) os << ' ' << t.extent(i);
  os << '\n';
  os.precision(17);
  for (int64_t i = 0; i < t.size(); ++i) {
    if (i) os << (i % 16 == 0 ? '\n' : ' ');
    os << t[i];
  }
  os << '\n';
}

inline Tensor load_tensor_text(std::istream& is) {
  int rank = -1;
  if (!(is >> rank) || rank < 0 || rank > 4)
    throw ParseError("bad tensor rank", static_cast<std::size_t>(is.tellg()));
  std::vector<int> shape(static_cast<std::size_t>(rank));
  int64_t n = 1;
  for (int& d : shape) {
    if (!(is >> d) || d <= 0)
      throw ParseError("bad tensor extent", static_cast<std::size_t>(is.tellg()));
    n *= d;
  }
  std::vector<real> values(static_cast<std::size_t>(n));
  for (auto& v : values) {
    if (!(is >> v)) throw ParseError("short tensor payload", static_cast<std::size_t>(is.tellg()));
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace attnfd
