#include "rdc/tensor.hpp"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "rdc/error.hpp"

namespace rdc {

std::int64_t element_count(const Shape& shape) {
  if (shape.empty()) throw InvalidShapeError("invalid shape: no dimensions");
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 1) throw InvalidShapeError("invalid shape " + to_string(shape) + ": dimensions must be >= 1");
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, real fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(element_count(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<real> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (element_count(shape_) != static_cast<std::int64_t>(data_.size()))
    throw InvalidShapeError("shape " + to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                            " elements");
}

Tensor Tensor::create(Shape shape, const Fill& fill) {
  Tensor t(std::move(shape));
  if (const auto* value = std::get_if<real>(&fill)) {
    std::fill(t.data_.begin(), t.data_.end(), *value);
  } else if (const auto* u = std::get_if<UniformFill>(&fill)) {
    std::mt19937_64 rng(u->seed);
    std::uniform_real_distribution<real> dist(u->low, u->high);
    for (auto& v : t.data_) v = dist(rng);
  } else {
    const auto& n = std::get<NormalFill>(fill);
    std::mt19937_64 rng(n.seed);
    std::normal_distribution<real> dist(n.mean, n.stddev);
    for (auto& v : t.data_) v = dist(rng);
  }
  return t;
}

real Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (element_count(shape) != size())
    throw InvalidShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

bool Tensor::all_finite() const noexcept {
  for (real v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
  return a.shape() == b.shape() &&
         std::memcmp(a.raw(), b.raw(), static_cast<std::size_t>(a.size()) * sizeof(real)) == 0;
}

void accumulate_into(Tensor& existing, const Tensor& incoming) {
  if (existing.shape() != incoming.shape())
    throw ContractError("accumulate_grad: shape " + to_string(existing.shape()) + " vs " +
                        to_string(incoming.shape()));
  real* dst = existing.raw();
  const real* src = incoming.raw();
  for (std::int64_t i = 0, n = existing.size(); i < n; ++i) dst[i] += src[i];
}

Tensor accumulate_grad(Tensor existing, const Tensor& incoming) {
  accumulate_into(existing, incoming);
  return existing;
}

}  // namespace rdc
