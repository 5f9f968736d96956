#include "rdc/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "rdc/error.hpp"

namespace rdc {
namespace {

using MatR = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using VecC = Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, 1>>;
using RowC = Eigen::Map<const Eigen::Matrix<real, 1, Eigen::Dynamic>>;
using RowM = Eigen::Map<Eigen::Matrix<real, 1, Eigen::Dynamic>>;
using VecM = Eigen::Map<Eigen::Matrix<real, Eigen::Dynamic, 1>>;

struct ConvGeometry {
  std::int64_t channels, height, width, kernel, stride, padding, out_h, out_w;

  std::int64_t col_rows() const { return channels * kernel * kernel; }
  std::int64_t col_cols() const { return out_h * out_w; }
  bool pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }

  // Range of output positions whose source index o*stride + offset lies in
  // [0, extent).
  void valid_range(std::int64_t offset, std::int64_t extent, std::int64_t out, std::int64_t& lo,
                   std::int64_t& hi) const {
    lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
    const std::int64_t last = extent - 1 - offset;
    hi = last < 0 ? 0 : std::min(out, last / stride + 1);
    lo = std::min(lo, hi);
  }
};

void im2col(const real* image, const ConvGeometry& g, real* col) {
  const std::int64_t cols = g.col_cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const real* plane = image + c * g.height * g.width;
    for (std::int64_t ky = 0; ky < g.kernel; ++ky) {
      std::int64_t y_lo, y_hi;
      g.valid_range(ky - g.padding, g.height, g.out_h, y_lo, y_hi);
      for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
        real* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        std::int64_t x_lo, x_hi;
        g.valid_range(kx - g.padding, g.width, g.out_w, x_lo, x_hi);
        std::fill(row, row + y_lo * g.out_w, real(0));
        for (std::int64_t oy = y_lo; oy < y_hi; ++oy) {
          real* out = row + oy * g.out_w;
          const real* src = plane + (oy * g.stride + ky - g.padding) * g.width;
          std::fill(out, out + x_lo, real(0));
          for (std::int64_t ox = x_lo; ox < x_hi; ++ox) out[ox] = src[ox * g.stride + kx - g.padding];
          std::fill(out + x_hi, out + g.out_w, real(0));
        }
        std::fill(row + y_hi * g.out_w, row + cols, real(0));
      }
    }
  }
}

void col2im_add(const real* col, const ConvGeometry& g, real* image) {
  const std::int64_t cols = g.col_cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    real* plane = image + c * g.height * g.width;
    for (std::int64_t ky = 0; ky < g.kernel; ++ky) {
      std::int64_t y_lo, y_hi;
      g.valid_range(ky - g.padding, g.height, g.out_h, y_lo, y_hi);
      for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
        const real* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        std::int64_t x_lo, x_hi;
        g.valid_range(kx - g.padding, g.width, g.out_w, x_lo, x_hi);
        for (std::int64_t oy = y_lo; oy < y_hi; ++oy) {
          const real* in = row + oy * g.out_w;
          real* dst = plane + (oy * g.stride + ky - g.padding) * g.width;
          for (std::int64_t ox = x_lo; ox < x_hi; ++ox) dst[ox * g.stride + kx - g.padding] += in[ox];
        }
      }
    }
  }
}

// Exact when a == b, so constant regions stay constant.
real lerp(real a, real b, real t) { return a + (b - a) * t; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                        to_string(b.shape()));
}

}  // namespace

void Conv2dSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ContractError("conv2d: channel counts must be positive");
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ContractError("conv2d: kernel size must be positive and odd");
  if (stride < 1) throw ContractError("conv2d: stride must be positive");
  if (padding < 0) throw ContractError("conv2d: padding must be non-negative");
}

std::int64_t Conv2dSpec::output_extent(std::int64_t in) const {
  const std::int64_t padded = in + 2 * padding;
  if (padded < kernel_size)
    throw ContractError("conv2d: kernel " + std::to_string(kernel_size) + " larger than padded input " +
                        std::to_string(padded));
  return (padded - kernel_size) / stride + 1;
}

void LinearSpec::validate() const {
  if (in_features < 1 || out_features < 1) throw ContractError("linear: feature counts must be positive");
}

Var conv2d(Var input, Var weight, Var bias, const Conv2dSpec& spec) {
  spec.validate();
  const Tensor& x = input.value();
  if (x.rank() != 4) throw ContractError("conv2d: input must be [N,C,H,W], got " + to_string(x.shape()));
  if (x.dim(1) != spec.in_channels)
    throw ContractError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
                        std::to_string(spec.in_channels));
  if (weight.shape() != spec.weight_shape())
    throw ContractError("conv2d: weight shape " + to_string(weight.shape()) + ", expected " +
                        to_string(spec.weight_shape()));
  if (bias.shape() != spec.bias_shape()) throw ContractError("conv2d: bias shape " + to_string(bias.shape()));

  const ConvGeometry g{x.dim(1),       x.dim(2),
                       x.dim(3),       spec.kernel_size,
                       spec.stride,    spec.padding,
                       spec.output_extent(x.dim(2)), spec.output_extent(x.dim(3))};
  const std::int64_t batch = x.dim(0);
  const std::int64_t out_ch = spec.out_channels;
  const std::int64_t in_plane = g.channels * g.height * g.width;
  const std::int64_t out_plane = out_ch * g.col_cols();

  Tensor y({batch, out_ch, g.out_h, g.out_w});
  {
    const CMapR w(weight.value().raw(), out_ch, g.col_rows());
    const VecC b(bias.value().raw(), out_ch);
    Buffer col(g.pointwise() ? 0 : static_cast<std::size_t>(g.col_rows() * g.col_cols()));
    for (std::int64_t n = 0; n < batch; ++n) {
      const real* src = x.raw() + n * in_plane;
      if (!g.pointwise()) {
        im2col(src, g, col.data());
        src = col.data();
      }
      MapR out(y.raw() + n * out_plane, out_ch, g.col_cols());
      out.noalias() = w * CMapR(src, g.col_rows(), g.col_cols());
      out.colwise() += b;
    }
  }

  return input.tape->record(
      "conv2d", std::move(y), {input, weight, bias}, [g, batch, out_ch, in_plane, out_plane](BackwardPass& pass) {
        const Tensor& x = pass.input(0);
        const CMapR w(pass.input(1).raw(), out_ch, g.col_rows());
        Tensor* dx = pass.input_grad(0);
        Tensor* dw = pass.input_grad(1);
        Tensor* db = pass.input_grad(2);
        Buffer col(g.pointwise() ? 0 : static_cast<std::size_t>(g.col_rows() * g.col_cols()));
        MatR dcol;
        for (std::int64_t n = 0; n < batch; ++n) {
          const CMapR grad(pass.grad_output().raw() + n * out_plane, out_ch, g.col_cols());
          if (dw) {
            const real* src = x.raw() + n * in_plane;
            if (!g.pointwise()) {
              im2col(src, g, col.data());
              src = col.data();
            }
            MapR(dw->raw(), out_ch, g.col_rows()).noalias() +=
                grad * CMapR(src, g.col_rows(), g.col_cols()).transpose();
          }
          if (db) VecM(db->raw(), out_ch) += grad.rowwise().sum();
          if (dx) {
            if (g.pointwise()) {
              MapR(dx->raw() + n * in_plane, g.channels, g.col_cols()).noalias() += w.transpose() * grad;
            } else {
              dcol.noalias() = w.transpose() * grad;
              col2im_add(dcol.data(), g, dx->raw() + n * in_plane);
            }
          }
        }
      });
}

Var maxpool2d(Var input) {
  const Tensor& x = input.value();
  if (x.rank() != 4) throw ContractError("maxpool2d: input must be [N,C,H,W], got " + to_string(x.shape()));
  const std::int64_t h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ContractError("maxpool2d: odd spatial size " + to_string(x.shape()));
  const std::int64_t planes = x.dim(0) * x.dim(1), oh = h / 2, ow = w / 2;

  Tensor y({x.dim(0), x.dim(1), oh, ow});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.size()));
  for (std::int64_t p = 0; p < planes; ++p) {
    const real* plane = x.raw() + p * h * w;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const std::int64_t base = 2 * oy * w + 2 * ox;
        const std::int64_t window[4] = {base, base + 1, base + w, base + w + 1};
        std::int64_t best = window[0];
        for (int k = 1; k < 4; ++k)
          if (plane[window[k]] > plane[best]) best = window[k];
        const std::int64_t o = (p * oh + oy) * ow + ox;
        y[o] = plane[best];
        argmax[static_cast<std::size_t>(o)] = p * h * w + best;
      }
    }
  }
  return input.tape->record("maxpool2d", std::move(y), {input}, [argmax = std::move(argmax)](BackwardPass& pass) {
    Tensor* dx = pass.input_grad(0);
    const Tensor& g = pass.grad_output();
    for (std::int64_t o = 0; o < g.size(); ++o) (*dx)[argmax[static_cast<std::size_t>(o)]] += g[o];
  });
}

Var relu(Var input) {
  Tensor y = input.value();
  for (auto& v : y.data()) v = v > 0 ? v : real(0);
  return input.tape->record("relu", std::move(y), {input}, [](BackwardPass& pass) {
    const Tensor& x = pass.input(0);
    const Tensor& g = pass.grad_output();
    Tensor* dx = pass.input_grad(0);
    for (std::int64_t i = 0; i < g.size(); ++i)
      if (x[i] > 0) (*dx)[i] += g[i];
  });
}

Var linear(Var input, Var weight, Var bias, const LinearSpec& spec) {
  spec.validate();
  const Tensor& x = input.value();
  if (x.rank() != 2) throw ContractError("linear: input must be [N,F], got " + to_string(x.shape()));
  if (x.dim(1) != spec.in_features)
    throw ContractError("linear: input has " + std::to_string(x.dim(1)) + " features, spec expects " +
                        std::to_string(spec.in_features));
  if (weight.shape() != spec.weight_shape())
    throw ContractError("linear: weight shape " + to_string(weight.shape()) + ", expected " +
                        to_string(spec.weight_shape()));
  if (bias.shape() != spec.bias_shape()) throw ContractError("linear: bias shape " + to_string(bias.shape()));

  const std::int64_t batch = x.dim(0), in = spec.in_features, out = spec.out_features;
  Tensor y({batch, out});
  MapR ym(y.raw(), batch, out);
  ym.noalias() = CMapR(x.raw(), batch, in) * CMapR(weight.value().raw(), out, in).transpose();
  ym.rowwise() += RowC(bias.value().raw(), out);

  return input.tape->record("linear", std::move(y), {input, weight, bias}, [batch, in, out](BackwardPass& pass) {
    const CMapR grad(pass.grad_output().raw(), batch, out);
    if (Tensor* dx = pass.input_grad(0))
      MapR(dx->raw(), batch, in).noalias() += grad * CMapR(pass.input(1).raw(), out, in);
    if (Tensor* dw = pass.input_grad(1))
      MapR(dw->raw(), out, in).noalias() += grad.transpose() * CMapR(pass.input(0).raw(), batch, in);
    if (Tensor* db = pass.input_grad(2)) RowM(db->raw(), out) += grad.colwise().sum();
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw ContractError("softmax_cross_entropy: logits must be [N,K], got " + to_string(z.shape()));
  const std::int64_t batch = z.dim(0), classes = z.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != batch)
    throw ContractError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(batch));
  for (int label : labels)
    if (label < 0 || label >= classes)
      throw ContractError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                          std::to_string(classes) + ")");

  Tensor probs(z.shape());
  double total = 0;
  for (std::int64_t n = 0; n < batch; ++n) {
    const real* row = z.raw() + n * classes;
    real* p = probs.raw() + n * classes;
    const real peak = *std::max_element(row, row + classes);
    real denom = 0;
    for (std::int64_t k = 0; k < classes; ++k) {
      p[k] = std::exp(row[k] - peak);
      denom += p[k];
    }
    for (std::int64_t k = 0; k < classes; ++k) p[k] /= denom;
    const real log_prob = row[labels[static_cast<std::size_t>(n)]] - peak - std::log(denom);
    total -= static_cast<double>(log_prob);
  }
  Tensor loss({1}, static_cast<real>(total / static_cast<double>(batch)));

  std::vector<int> saved(labels.begin(), labels.end());
  return logits.tape->record(
      "softmax_cross_entropy", std::move(loss), {logits},
      [probs = std::move(probs), saved = std::move(saved), batch, classes](BackwardPass& pass) {
        Tensor* dz = pass.input_grad(0);
        const real g = pass.grad_output()[0] / static_cast<real>(batch);
        for (std::int64_t n = 0; n < batch; ++n) {
          const std::int64_t label = saved[static_cast<std::size_t>(n)];
          for (std::int64_t k = 0; k < classes; ++k) {
            const std::int64_t i = n * classes + k;
            (*dz)[i] += g * (probs[i] - (k == label ? real(1) : real(0)));
          }
        }
      });
}

Var residual_add(Var image, Var residual) {
  require_same_shape(image.value(), residual.value(), "residual_add");
  Tensor y = image.value();
  accumulate_into(y, residual.value());
  return image.tape->record("residual_add", std::move(y), {image, residual}, [](BackwardPass& pass) {
    for (std::size_t i = 0; i < 2; ++i)
      if (Tensor* d = pass.input_grad(i)) accumulate_into(*d, pass.grad_output());
  });
}

Var flatten(Var input) {
  const Tensor& x = input.value();
  if (x.rank() < 2) throw ContractError("flatten: input must have a batch axis, got " + to_string(x.shape()));
  Tensor y = x.reshaped({x.dim(0), x.size() / x.dim(0)});
  return input.tape->record("flatten", std::move(y), {input}, [](BackwardPass& pass) {
    Tensor* dx = pass.input_grad(0);
    const Tensor& g = pass.grad_output();
    for (std::int64_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  accumulate_into(y, b.value());
  return a.tape->record("add", std::move(y), {a, b}, [](BackwardPass& pass) {
    for (std::size_t i = 0; i < 2; ++i)
      if (Tensor* d = pass.input_grad(i)) accumulate_into(*d, pass.grad_output());
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return a.tape->record("mul", std::move(y), {a, b}, [](BackwardPass& pass) {
    const Tensor& g = pass.grad_output();
    for (std::size_t i = 0; i < 2; ++i) {
      Tensor* d = pass.input_grad(i);
      if (!d) continue;
      const Tensor& other = pass.input(1 - i);
      for (std::int64_t k = 0; k < g.size(); ++k) (*d)[k] += g[k] * other[k];
    }
  });
}

Var scale(Var input, real factor) {
  Tensor y = input.value();
  for (auto& v : y.data()) v *= factor;
  return input.tape->record("scale", std::move(y), {input}, [factor](BackwardPass& pass) {
    Tensor* dx = pass.input_grad(0);
    const Tensor& g = pass.grad_output();
    for (std::int64_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * factor;
  });
}

Var sum(Var input) {
  double total = 0;
  for (real v : input.value().data()) total += v;
  return input.tape->record("sum", Tensor({1}, static_cast<real>(total)), {input}, [](BackwardPass& pass) {
    Tensor* dx = pass.input_grad(0);
    const real g = pass.grad_output()[0];
    for (auto& v : dx->data()) v += g;
  });
}

Tensor resize_bilinear(const Tensor& image, std::int64_t target) {
  if (image.rank() != 4) throw ContractError("resize_bilinear: input must be [N,C,H,W], got " + to_string(image.shape()));
  if (image.dim(2) != image.dim(3)) throw ContractError("resize_bilinear: image is not square " + to_string(image.shape()));
  if (target < 1) throw ContractError("resize_bilinear: target must be positive");
  const std::int64_t src = image.dim(2);
  if (target == src) return image;

  struct Tap {
    std::int64_t lo, hi;
    real frac;
  };
  std::vector<Tap> taps(static_cast<std::size_t>(target));
  const double ratio = static_cast<double>(src) / static_cast<double>(target);
  for (std::int64_t o = 0; o < target; ++o) {
    const double pos = std::max(0.0, (static_cast<double>(o) + 0.5) * ratio - 0.5);
    const auto lo = std::min(static_cast<std::int64_t>(pos), src - 1);
    taps[static_cast<std::size_t>(o)] = {lo, std::min(lo + 1, src - 1), static_cast<real>(pos - static_cast<double>(lo))};
  }

  const std::int64_t planes = image.dim(0) * image.dim(1);
  Tensor out({image.dim(0), image.dim(1), target, target});
  for (std::int64_t p = 0; p < planes; ++p) {
    const real* in = image.raw() + p * src * src;
    real* dst = out.raw() + p * target * target;
    for (std::int64_t oy = 0; oy < target; ++oy) {
      const Tap& ty = taps[static_cast<std::size_t>(oy)];
      for (std::int64_t ox = 0; ox < target; ++ox) {
        const Tap& tx = taps[static_cast<std::size_t>(ox)];
        const real top = lerp(in[ty.lo * src + tx.lo], in[ty.lo * src + tx.hi], tx.frac);
        const real bottom = lerp(in[ty.hi * src + tx.lo], in[ty.hi * src + tx.hi], tx.frac);
        dst[oy * target + ox] = lerp(top, bottom, ty.frac);
      }
    }
  }
  return out;
}

}  // namespace rdc
