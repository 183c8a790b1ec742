#include "sgma/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

namespace sgma {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

ConstMapMat as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MapMat as_matrix(std::span<double> s, std::size_t rows, std::size_t cols) {
  return MapMat(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMapMat grad_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMapMat(t.grad().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, oh, ow;
  int stride, pad;
};

void im2col(const double* x, const ConvGeometry& g, double* col) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const long yi = static_cast<long>(oi) * g.stride - g.pad + static_cast<long>(ki);
          double* dst = row + oi * g.ow;
          if (yi < 0 || yi >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(yi)) * g.w;
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const long xj = static_cast<long>(oj) * g.stride - g.pad + static_cast<long>(kj);
            dst[oj] = (xj < 0 || xj >= static_cast<long>(g.w)) ? 0.0 : src[xj];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* dx) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const long yi = static_cast<long>(oi) * g.stride - g.pad + static_cast<long>(ki);
          if (yi < 0 || yi >= static_cast<long>(g.h)) continue;
          double* dst = dx + (c * g.h + static_cast<std::size_t>(yi)) * g.w;
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const long xj = static_cast<long>(oj) * g.stride - g.pad + static_cast<long>(kj);
            if (xj >= 0 && xj < static_cast<long>(g.w)) dst[xj] += row[oi * g.ow + oj];
          }
        }
      }
    }
  }
}

struct BilinearTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<BilinearTap> align_corner_taps(std::size_t in, std::size_t out) {
  std::vector<BilinearTap> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double pos = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(pos));
    if (i0 >= in - 1) i0 = in > 1 ? in - 2 : 0;
    const std::size_t i1 = in > 1 ? i0 + 1 : 0;
    const double w1 = in > 1 ? pos - static_cast<double>(i0) : 0.0;
    taps[o] = {i0, i1, w1};
  }
  return taps;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  detail::require_finite(out, "add");
  if (detail::should_record({&a, &b})) {
    detail::record("add", out, [a, b, out]() mutable {
      auto g = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto tg = t->mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) tg[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  detail::require_finite(out, "sub");
  if (detail::should_record({&a, &b})) {
    detail::record("sub", out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ag = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
      }
      if (b.requires_grad()) {
        auto bg = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  detail::require_finite(out, "mul");
  if (detail::should_record({&a, &b})) {
    detail::record("mul", out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ag = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto bg = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * factor;
  detail::require_finite(out, "scale");
  if (detail::should_record({&a})) {
    detail::record("scale", out, [a, out, factor]() mutable {
      auto g = out.grad();
      auto ag = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor add_n(std::span<const Tensor> terms) {
  if (terms.empty()) throw ShapeError("add_n: empty list");
  for (const auto& t : terms) require_same_shape(terms.front(), t, "add_n");
  Tensor out = Tensor::zeros(terms.front().shape());
  auto o = out.mutable_data();
  for (const auto& t : terms) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += t[i];
  }
  detail::require_finite(out, "add_n");
  if (detail::should_record(terms)) {
    std::vector<Tensor> inputs(terms.begin(), terms.end());
    detail::record("add_n", out, [inputs, out]() mutable {
      auto g = out.grad();
      for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        auto tg = t.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) tg[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::full({}, s);
  detail::require_finite(out, "sum");
  if (detail::should_record({&a})) {
    detail::record("sum", out, [a, out]() mutable {
      const double g = out.grad()[0];
      for (auto& v : a.mutable_grad()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor weighted_sum(const Tensor& a, const Tensor& weights) {
  require_same_shape(a, weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * weights[i];
  Tensor out = Tensor::full({}, s);
  detail::require_finite(out, "weighted_sum");
  if (detail::should_record({&a})) {
    detail::record("weighted_sum", out, [a, weights, out]() mutable {
      const double g = out.grad()[0];
      auto ag = a.mutable_grad();
      for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += g * weights[i];
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "left operand");
  require_rank(b, 2, "matmul", "right operand");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimension mismatch, left has " + std::to_string(k) + " columns, right has " +
                     std::to_string(b.dim(0)) + " rows");
  }
  Tensor out = Tensor::zeros({n, m});
  as_matrix(out.mutable_data(), n, m).noalias() = as_matrix(a, n, k) * as_matrix(b, k, m);
  detail::require_finite(out, "matmul");
  if (detail::should_record({&a, &b})) {
    detail::record("matmul", out, [a, b, out, n, k, m]() mutable {
      auto g = grad_matrix(out, n, m);
      if (a.requires_grad()) as_matrix(a.mutable_grad(), n, k).noalias() += g * as_matrix(b, k, m).transpose();
      if (b.requires_grad()) as_matrix(b.mutable_grad(), k, m).noalias() += as_matrix(a, n, k).transpose() * g;
    });
  }
  return out;
}

Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "fully_connected", "input");
  require_rank(weight, 2, "fully_connected", "weight");
  const std::size_t n = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    throw ShapeError("fully_connected: input has " + std::to_string(din) + " features but weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout)) {
    throw ShapeError("fully_connected: bias must have shape [" + std::to_string(dout) + "], got " +
                     shape_string(bias.shape()));
  }
  Tensor out = Tensor::zeros({n, dout});
  auto y = as_matrix(out.mutable_data(), n, dout);
  y.noalias() = as_matrix(input, n, din) * as_matrix(weight, dout, din).transpose();
  if (bias.defined()) y.rowwise() += as_matrix(bias, 1, dout).row(0);
  detail::require_finite(out, "fully_connected");
  if (detail::should_record({&input, &weight, &bias})) {
    detail::record("fully_connected", out, [input, weight, bias, out, n, din, dout]() mutable {
      auto g = grad_matrix(out, n, dout);
      if (input.requires_grad()) as_matrix(input.mutable_grad(), n, din).noalias() += g * as_matrix(weight, dout, din);
      if (weight.requires_grad())
        as_matrix(weight.mutable_grad(), dout, din).noalias() += g.transpose() * as_matrix(input, n, din);
      if (bias.defined() && bias.requires_grad()) as_matrix(bias.mutable_grad(), 1, dout) += g.colwise().sum();
    });
  }
  return out;
}

Tensor fully_connected(const Tensor& input, const Tensor& weight) { return fully_connected(input, weight, Tensor()); }

Tensor apply_pointwise(Pointwise kind, const Tensor& input) {
  Tensor out = Tensor::zeros(input.shape());
  auto o = out.mutable_data();
  auto x = input.data();
  if (kind == Pointwise::sigmoid) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = sigmoid_scalar(x[i]);
  } else {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
  }
  detail::require_finite(out, kind == Pointwise::sigmoid ? "sigmoid" : "relu");
  if (detail::should_record({&input})) {
    detail::record(kind == Pointwise::sigmoid ? "sigmoid" : "relu", out, [input, out, kind]() mutable {
      auto g = out.grad();
      auto ig = input.mutable_grad();
      if (kind == Pointwise::sigmoid) {
        for (std::size_t i = 0; i < g.size(); ++i) ig[i] += g[i] * out[i] * (1.0 - out[i]);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) ig[i] += input[i] > 0.0 ? g[i] : 0.0;
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0, got " + std::to_string(padding));
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.cin) {
    throw ShapeError("conv2d: input channels (dim 1) = " + std::to_string(g.cin) + " but kernel expects " +
                     std::to_string(kernel.dim(1)));
  }
  const std::size_t ph = g.h + 2 * static_cast<std::size_t>(padding), pw = g.w + 2 * static_cast<std::size_t>(padding);
  if (g.kh > ph) throw ShapeError("conv2d: kernel height " + std::to_string(g.kh) + " exceeds padded input height " + std::to_string(ph));
  if (g.kw > pw) throw ShapeError("conv2d: kernel width " + std::to_string(g.kw) + " exceeds padded input width " + std::to_string(pw));
  g.oh = (ph - g.kh) / static_cast<std::size_t>(stride) + 1;
  g.ow = (pw - g.kw) / static_cast<std::size_t>(stride) + 1;

  const std::size_t kdim = g.cin * g.kh * g.kw, plane = g.oh * g.ow;
  Tensor out = Tensor::zeros({g.n, g.cout, g.oh, g.ow});
  Storage col(kdim * plane);
  auto kmat = as_matrix(kernel, g.cout, kdim);
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(input.data().data() + s * g.cin * g.h * g.w, g, col.data());
    as_matrix(out.mutable_data().subspan(s * g.cout * plane, g.cout * plane), g.cout, plane).noalias() =
        kmat * ConstMapMat(col.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(plane));
  }
  detail::require_finite(out, "conv2d");
  if (detail::should_record({&input, &kernel})) {
    detail::record("conv2d", out, [input, kernel, out, g, kdim, plane]() mutable {
      Storage col(kdim * plane), dcol(kdim * plane);
      auto kmat = as_matrix(kernel, g.cout, kdim);
      for (std::size_t s = 0; s < g.n; ++s) {
        auto gout = ConstMapMat(out.grad().data() + s * g.cout * plane, static_cast<Eigen::Index>(g.cout),
                                static_cast<Eigen::Index>(plane));
        if (kernel.requires_grad()) {
          im2col(input.data().data() + s * g.cin * g.h * g.w, g, col.data());
          as_matrix(kernel.mutable_grad(), g.cout, kdim).noalias() +=
              gout * ConstMapMat(col.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(plane)).transpose();
        }
        if (input.requires_grad()) {
          as_matrix(std::span<double>(dcol), kdim, plane).noalias() = kmat.transpose() * gout;
          col2im_add(dcol.data(), g, input.mutable_grad().data() + s * g.cin * g.h * g.w);
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& input, const Tensor& bias) {
  require_rank(input, 4, "add_channel_bias", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  if (bias.rank() != 1 || bias.dim(0) != c) {
    throw ShapeError("add_channel_bias: bias must have shape [" + std::to_string(c) + "], got " + shape_string(bias.shape()));
  }
  Tensor out = Tensor::zeros(input.shape());
  auto o = out.mutable_data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) o[base + p] = input[base + p] + bias[ch];
    }
  detail::require_finite(out, "add_channel_bias");
  if (detail::should_record({&input, &bias})) {
    detail::record("add_channel_bias", out, [input, bias, out, n, c, plane]() mutable {
      auto g = out.grad();
      if (input.requires_grad()) {
        auto ig = input.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ig[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto bg = bias.mutable_grad();
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (s * c + ch) * plane;
            double acc = 0.0;
            for (std::size_t p = 0; p < plane; ++p) acc += g[base + p];
            bg[ch] += acc;
          }
      }
    });
  }
  return out;
}

Tensor avg_pool2(const Tensor& input) {
  require_rank(input, 4, "avg_pool2", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < 2 || w < 2) throw ShapeError("avg_pool2: spatial extent must be at least 2x2, got " + shape_string(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out = Tensor::zeros({n, c, oh, ow});
  auto o = out.mutable_data();
  auto x = input.data();
  for (std::size_t m = 0; m < n * c; ++m) {
    const double* src = x.data() + m * h * w;
    double* dst = o.data() + m * oh * ow;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double* p = src + 2 * i * w + 2 * j;
        dst[i * ow + j] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  }
  detail::require_finite(out, "avg_pool2");
  if (detail::should_record({&input})) {
    detail::record("avg_pool2", out, [input, out, n, c, h, w, oh, ow]() mutable {
      auto g = out.grad();
      auto ig = input.mutable_grad();
      for (std::size_t m = 0; m < n * c; ++m) {
        double* dst = ig.data() + m * h * w;
        const double* src = g.data() + m * oh * ow;
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const double v = 0.25 * src[i * ow + j];
            double* p = dst + 2 * i * w + 2 * j;
            p[0] += v;
            p[1] += v;
            p[w] += v;
            p[w + 1] += v;
          }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  Tensor out = Tensor::zeros({n, c});
  auto o = out.mutable_data();
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t m = 0; m < n * c; ++m) {
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) acc += input[m * plane + p];
    o[m] = acc * inv;
  }
  detail::require_finite(out, "global_avg_pool");
  if (detail::should_record({&input})) {
    detail::record("global_avg_pool", out, [input, out, n, c, plane, inv]() mutable {
      auto g = out.grad();
      auto ig = input.mutable_grad();
      for (std::size_t m = 0; m < n * c; ++m) {
        const double v = g[m] * inv;
        for (std::size_t p = 0; p < plane; ++p) ig[m * plane + p] += v;
      }
    });
  }
  return out;
}

Tensor bilinear_resize(const Tensor& input, int out_h, int out_w) {
  require_rank(input, 4, "bilinear_resize", "input");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be >= 1");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto oh = static_cast<std::size_t>(out_h), ow = static_cast<std::size_t>(out_w);
  const auto ty = align_corner_taps(h, oh), tx = align_corner_taps(w, ow);
  Tensor out = Tensor::zeros({n, c, oh, ow});
  auto o = out.mutable_data();
  for (std::size_t m = 0; m < n * c; ++m) {
    const double* src = input.data().data() + m * h * w;
    double* dst = o.data() + m * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const auto& yt = ty[i];
      for (std::size_t j = 0; j < ow; ++j) {
        const auto& xt = tx[j];
        const double top = src[yt.i0 * w + xt.i0] * (1 - xt.w1) + src[yt.i0 * w + xt.i1] * xt.w1;
        const double bot = src[yt.i1 * w + xt.i0] * (1 - xt.w1) + src[yt.i1 * w + xt.i1] * xt.w1;
        dst[i * ow + j] = top * (1 - yt.w1) + bot * yt.w1;
      }
    }
  }
  detail::require_finite(out, "bilinear_resize");
  if (detail::should_record({&input})) {
    detail::record("bilinear_resize", out, [input, out, n, c, h, w, oh, ow, ty, tx]() mutable {
      auto g = out.grad();
      auto ig = input.mutable_grad();
      for (std::size_t m = 0; m < n * c; ++m) {
        double* dst = ig.data() + m * h * w;
        const double* src = g.data() + m * oh * ow;
        for (std::size_t i = 0; i < oh; ++i) {
          const auto& yt = ty[i];
          for (std::size_t j = 0; j < ow; ++j) {
            const auto& xt = tx[j];
            const double v = src[i * ow + j];
            dst[yt.i0 * w + xt.i0] += v * (1 - yt.w1) * (1 - xt.w1);
            dst[yt.i0 * w + xt.i1] += v * (1 - yt.w1) * xt.w1;
            dst[yt.i1 * w + xt.i0] += v * yt.w1 * (1 - xt.w1);
            dst[yt.i1 * w + xt.i1] += v * yt.w1 * xt.w1;
          }
        }
      }
    });
  }
  return out;
}

Tensor l2_normalize(const Tensor& input, double eps) {
  require_rank(input, 2, "l2_normalize", "input");
  const std::size_t n = input.dim(0), d = input.dim(1);
  Tensor out = Tensor::zeros(input.shape());
  std::vector<double> denom(n);
  std::vector<bool> clamped(n);
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += input[r * d + j] * input[r * d + j];
    const double norm = std::sqrt(sq);
    clamped[r] = norm <= eps;
    denom[r] = clamped[r] ? eps : norm;
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = input[r * d + j] / denom[r];
  }
  detail::require_finite(out, "l2_normalize");
  if (detail::should_record({&input})) {
    detail::record("l2_normalize", out, [input, out, n, d, denom, clamped]() mutable {
      auto g = out.grad();
      auto ig = input.mutable_grad();
      for (std::size_t r = 0; r < n; ++r) {
        double dot = 0.0;
        if (!clamped[r]) {
          for (std::size_t j = 0; j < d; ++j) dot += out[r * d + j] * g[r * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) ig[r * d + j] += (g[r * d + j] - out[r * d + j] * dot) / denom[r];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(input.shape()) + " as " + shape_string(shape));
  }
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(input.data().begin(), input.data().end()));
  if (detail::should_record({&input})) {
    detail::record("reshape", out, [input, out]() mutable {
      auto g = out.grad();
      auto ig = input.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ig[i] += g[i];
    });
  }
  return out;
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
  require_same_shape(prediction, target, "mse");
  const double inv = 1.0 / static_cast<double>(prediction.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < prediction.numel(); ++i) {
    const double d = prediction[i] - target[i];
    acc += d * d;
  }
  Tensor out = Tensor::full({}, acc * inv);
  detail::require_finite(out, "mse");
  if (detail::should_record({&prediction})) {
    detail::record("mse", out, [prediction, target, out, inv]() mutable {
      const double g = out.grad()[0];
      auto pg = prediction.mutable_grad();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g * 2.0 * (prediction[i] - target[i]) * inv;
    });
  }
  return out;
}

Tensor binary_cross_entropy(const Tensor& probs, const Tensor& targets) {
  require_same_shape(probs, targets, "binary_cross_entropy");
  static constexpr double kClip = 1e-12;
  const double inv = 1.0 / static_cast<double>(probs.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.numel(); ++i) {
    const double p = std::clamp(probs[i], kClip, 1.0 - kClip);
    acc -= targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p);
  }
  Tensor out = Tensor::full({}, acc * inv);
  detail::require_finite(out, "binary_cross_entropy");
  if (detail::should_record({&probs})) {
    detail::record("binary_cross_entropy", out, [probs, targets, out, inv]() mutable {
      const double g = out.grad()[0];
      auto pg = probs.mutable_grad();
      for (std::size_t i = 0; i < pg.size(); ++i) {
        const double p = std::clamp(probs[i], kClip, 1.0 - kClip);
        pg[i] += g * inv * (p - targets[i]) / (p * (1.0 - p));
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(n) + " rows but " + std::to_string(labels.size()) +
                     " labels");
  }
  std::vector<double> probs(n * k);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[r]) + " outside [0," +
                              std::to_string(k) + ")");
    }
    const double* row = logits.data().data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - mx) / z;
    total += std::log(z) - (row[labels[r]] - mx);
  }
  Tensor out = Tensor::full({}, total / static_cast<double>(n));
  detail::require_finite(out, "softmax_cross_entropy");
  if (detail::should_record({&logits})) {
    std::vector<int> lab(labels.begin(), labels.end());
    detail::record("softmax_cross_entropy", out, [logits, out, probs, lab, n, k]() mutable {
      const double g = out.grad()[0] / static_cast<double>(n);
      auto lg = logits.mutable_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < k; ++j)
          lg[r * k + j] += g * (probs[r * k + j] - (static_cast<int>(j) == lab[r] ? 1.0 : 0.0));
    });
  }
  return out;
}

Tensor column_affine(const Tensor& input, std::span<const double> scale_by, std::span<const double> offset) {
  require_rank(input, 2, "column_affine", "input");
  const std::size_t n = input.dim(0), d = input.dim(1);
  if (scale_by.size() != d || offset.size() != d) {
    throw ShapeError("column_affine: expected " + std::to_string(d) + " scale/offset entries");
  }
  Tensor out = Tensor::zeros(input.shape());
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = input[r * d + j] * scale_by[j] + offset[j];
  detail::require_finite(out, "column_affine");
  if (detail::should_record({&input})) {
    std::vector<double> s(scale_by.begin(), scale_by.end());
    detail::record("column_affine", out, [input, out, n, d, s]() mutable {
      auto g = out.grad();
      auto ig = input.mutable_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) ig[r * d + j] += g[r * d + j] * s[j];
    });
  }
  return out;
}

Tensor slice_columns(const Tensor& input, std::size_t begin, std::size_t end) {
  require_rank(input, 2, "slice_columns", "input");
  const std::size_t n = input.dim(0), d = input.dim(1);
  if (begin >= end || end > d) {
    throw ShapeError("slice_columns: invalid range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     std::to_string(d) + " columns");
  }
  const std::size_t w = end - begin;
  Tensor out = Tensor::zeros({n, w});
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < w; ++j) o[r * w + j] = input[r * d + begin + j];
  if (detail::should_record({&input})) {
    detail::record("slice_columns", out, [input, out, n, d, w, begin]() mutable {
      auto g = out.grad();
      auto ig = input.mutable_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < w; ++j) ig[r * d + begin + j] += g[r * w + j];
    });
  }
  return out;
}

}  // namespace sgma
