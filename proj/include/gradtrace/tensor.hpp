#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gradtrace {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major float32 tensor with an optional gradient buffer.
//
// Tensor is a reference-counted handle: copies alias the same storage, which
// is what the tape needs to route gradients back to parameters. Use clone()
// for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }
  static Tensor scalar(float value) { return Tensor({1}, std::vector<float>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  // Leading dimensions flattened; a rank-1 tensor is one row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  // Allocates a zero gradient buffer if absent.
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();
  void drop_grad();

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> impl_;
};

}  // namespace gradtrace
