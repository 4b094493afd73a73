#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "metro/errors.hpp"

namespace metro {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor handle. Copies share storage (parameters are shared
// between the auxiliary and main encoders this way); use clone() for a deep
// copy. Gradients live next to the data and accumulate additively.
template <typename T>
class Tensor {
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    std::uint64_t grad_epoch = 0;
  };

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false) : impl_(std::make_shared<Impl>()) {
    impl_->data.assign(metro::numel(shape), T{0});
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : impl_(std::make_shared<Impl>()) {
    if (metro::numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " does not match " + std::to_string(data.size()) +
                           " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool is_leaf() const { return impl_->leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient buffer, allocated as zeros on first access.
  std::span<T> grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T{0});
    return impl_->grad;
  }
  std::span<const T> grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T{0});
    return impl_->grad;
  }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T{0}); }

  Tensor clone() const {
    Tensor out(impl_->shape, impl_->data, impl_->requires_grad);
    return out;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const void* id() const { return impl_.get(); }

 private:
  template <typename>
  friend class Tape;

  void mark_intermediate() { impl_->leaf = false; }
  std::uint64_t& grad_epoch() { return impl_->grad_epoch; }

  std::shared_ptr<Impl> impl_;
};

}  // namespace metro
