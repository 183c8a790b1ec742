#include "sgma/cropping.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "sgma/attention.hpp"
#include "sgma/image_io.hpp"
#include "sgma/ops.hpp"
#include "sgma/serialize.hpp"

namespace sgma {

namespace {

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// sigma'(z) = sigma(z) (1 - sigma(z)), evaluated without cancellation.
double sigmoid_slope(double z) {
  const double e = std::exp(-std::abs(z));
  return e / ((1.0 + e) * (1.0 + e));
}

struct Profile {
  std::vector<double> value, d_center, d_side;
};

// Boxcar profile along one axis plus its derivatives w.r.t. center and side.
Profile axis_profile(std::size_t extent, double center, double side, double k) {
  Profile p;
  p.value.resize(extent);
  p.d_center.resize(extent);
  p.d_side.resize(extent);
  for (std::size_t i = 0; i < extent; ++i) {
    const double u = static_cast<double>(i) - center;
    const double a = k * (u + 0.5 * side), b = k * (u - 0.5 * side);
    p.value[i] = boxcar_profile(u, side, k);
    const double sa = sigmoid_slope(a), sb = sigmoid_slope(b);
    p.d_center[i] = -k * sa + k * sb;
    p.d_side[i] = 0.5 * k * sa + 0.5 * k * sb;
  }
  return p;
}

void require_params(const Tensor& params, const char* op) {
  if (params.rank() != 2 || params.dim(1) != 3) {
    throw ShapeError(std::string(op) + ": params must be [N,3], got " + shape_string(params.shape()));
  }
}

}  // namespace

ParameterList CropNet::parameters(const std::string& prefix) const {
  return {{prefix + ".w1", w1}, {prefix + ".b1", b1}, {prefix + ".w2", w2}, {prefix + ".b2", b2}};
}

CropNet init_crop_net(int map_side, int hidden, int image_size, std::uint64_t seed) {
  if (map_side < 1 || hidden < 1 || image_size < 8) throw std::invalid_argument("init_crop_net: invalid sizes");
  std::mt19937_64 rng(seed);
  const auto in = static_cast<std::size_t>(map_side * map_side), h = static_cast<std::size_t>(hidden);
  auto draw = [&](std::size_t rows, std::size_t cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = dist(rng);
    return Tensor::parameter({rows, cols}, std::move(v));
  };
  CropNet net;
  net.w1 = draw(h, in, std::sqrt(2.0 / static_cast<double>(in)));
  net.b1 = Tensor::parameter({h}, std::vector<double>(h, 0.0));
  net.w2 = draw(3, h, 0.1 / std::sqrt(static_cast<double>(h)));
  net.b2 = Tensor::parameter({3}, {0.0, 0.0, 0.0});
  net.map_side = map_side;
  net.image_size = image_size;
  set_crop_output_bias(net, {0.5, 0.5, 0.25});
  return net;
}

void set_crop_output_bias(CropNet& net, const std::array<double, 3>& normalized) {
  auto logit = [](double p) {
    if (p <= 0 || p >= 1) throw std::invalid_argument("set_crop_output_bias: target outside the reachable range");
    return std::log(p / (1 - p));
  };
  auto b = net.b2.mutable_data();
  b[0] = logit(normalized[0]);
  b[1] = logit(normalized[1]);
  b[2] = logit((normalized[2] - 0.125) / 0.375);
}

Tensor crop_params(const CropNet& net, const Tensor& maps) {
  const auto side = static_cast<std::size_t>(net.map_side);
  if (maps.rank() != 3 || maps.dim(1) != side || maps.dim(2) != side) {
    throw ShapeError("crop_params: expected [N," + std::to_string(side) + "," + std::to_string(side) + "] maps, got " +
                     shape_string(maps.shape()));
  }
  Tensor flat = reshape(maps, {maps.dim(0), side * side});
  Tensor raw = fully_connected(relu(fully_connected(flat, net.w1, net.b1)), net.w2, net.b2);
  const double s = net.image_size;
  const double scale_by[3] = {s, s, net.max_side() - net.min_side()};
  const double offset[3] = {0.0, 0.0, net.min_side()};
  return column_affine(sigmoid(raw), scale_by, offset);
}

CropParams crop_params_row(const Tensor& params, std::size_t row) {
  require_params(params, "crop_params_row");
  return {params[row * 3], params[row * 3 + 1], params[row * 3 + 2]};
}

Tensor crop_params_tensor(const std::vector<CropParams>& params) {
  std::vector<double> v;
  for (const auto& p : params) v.insert(v.end(), {p.tx, p.ty, p.ts});
  return Tensor::from({params.size(), 3}, std::move(v));
}

double boxcar_profile(double offset, double side, double k) {
  const double a = k * (offset + 0.5 * side), b = k * (offset - 0.5 * side);
  // Subtract on the side where both sigmoids are small to avoid cancellation.
  if (b > 0) return sigmoid_scalar(-b) - sigmoid_scalar(-a);
  return sigmoid_scalar(a) - sigmoid_scalar(b);
}

Tensor boxcar_mask(const Tensor& params, double k, int height, int width) {
  require_params(params, "boxcar_mask");
  if (k <= 0) throw std::invalid_argument("boxcar_mask: steepness k must be positive");
  const std::size_t n = params.dim(0), h = static_cast<std::size_t>(height), w = static_cast<std::size_t>(width);
  Tensor out = Tensor::zeros({n, h, w});
  std::vector<Profile> px(n), py(n);
  auto o = out.mutable_data();
  for (std::size_t s = 0; s < n; ++s) {
    const auto p = crop_params_row(params, s);
    px[s] = axis_profile(w, p.tx, p.ts, k);
    py[s] = axis_profile(h, p.ty, p.ts, k);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) o[(s * h + r) * w + c] = py[s].value[r] * px[s].value[c];
  }
  detail::require_finite(out, "boxcar_mask");
  if (detail::should_record({&params})) {
    detail::record("boxcar_mask", out, [params, out, px, py, n, h, w]() {
      auto g = out.grad();
      auto pg = params.mutable_grad();
      for (std::size_t s = 0; s < n; ++s) {
        double dtx = 0, dty = 0, dts = 0;
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t c = 0; c < w; ++c) {
            const double gv = g[(s * h + r) * w + c];
            dtx += gv * py[s].value[r] * px[s].d_center[c];
            dty += gv * py[s].d_center[r] * px[s].value[c];
            dts += gv * (py[s].d_side[r] * px[s].value[c] + py[s].value[r] * px[s].d_side[c]);
          }
        pg[s * 3] += dtx;
        pg[s * 3 + 1] += dty;
        pg[s * 3 + 2] += dts;
      }
    });
  }
  return out;
}

Tensor mask_image(const Tensor& images, const Tensor& mask) {
  if (images.rank() != 4 || mask.rank() != 3 || images.dim(0) != mask.dim(0) || images.dim(2) != mask.dim(1) ||
      images.dim(3) != mask.dim(2)) {
    throw ShapeError("mask_image: image " + shape_string(images.shape()) + " and mask " + shape_string(mask.shape()) +
                     " disagree");
  }
  const std::size_t n = images.dim(0), c = images.dim(1), plane = images.dim(2) * images.dim(3);
  Tensor out = Tensor::zeros(images.shape());
  auto o = out.mutable_data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) o[(s * c + ch) * plane + p] = images[(s * c + ch) * plane + p] * mask[s * plane + p];
  detail::require_finite(out, "mask_image");
  if (detail::should_record({&images, &mask})) {
    detail::record("mask_image", out, [images, mask, out, n, c, plane]() {
      auto g = out.grad();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t i = (s * c + ch) * plane + p;
            if (images.requires_grad()) images.mutable_grad()[i] += g[i] * mask[s * plane + p];
            if (mask.requires_grad()) mask.mutable_grad()[s * plane + p] += g[i] * images[i];
          }
    });
  }
  return out;
}

namespace {

struct Tap {
  long i0;
  double f;  // fractional offset toward i0 + 1
};

Tap make_tap(double pos) {
  const double fl = std::floor(pos);
  return {static_cast<long>(fl), pos - fl};
}

}  // namespace

Tensor sample_window(const Tensor& images, const Tensor& params, int out_size) {
  require_params(params, "sample_window");
  if (images.rank() != 4 || images.dim(0) != params.dim(0)) {
    throw ShapeError("sample_window: images " + shape_string(images.shape()) + " do not match params " +
                     shape_string(params.shape()));
  }
  if (out_size < 1) throw std::invalid_argument("sample_window: output size must be >= 1");
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const auto o = static_cast<std::size_t>(out_size);
  std::vector<double> rel(o);  // relative position of output cell u within the window, in [0,1]
  for (std::size_t u = 0; u < o; ++u) rel[u] = (static_cast<double>(u) + 0.5) / static_cast<double>(o);

  auto pixel = [h, w](const double* img, long r, long col) -> double {
    if (r < 0 || col < 0 || r >= static_cast<long>(h) || col >= static_cast<long>(w)) return 0.0;
    return img[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(col)];
  };

  std::vector<std::vector<Tap>> xt(n), yt(n);
  Tensor out = Tensor::zeros({n, c, o, o});
  auto od = out.mutable_data();
  for (std::size_t s = 0; s < n; ++s) {
    const auto p = crop_params_row(params, s);
    for (std::size_t u = 0; u < o; ++u) {
      xt[s].push_back(make_tap(p.tx - 0.5 * p.ts + p.ts * rel[u]));
      yt[s].push_back(make_tap(p.ty - 0.5 * p.ts + p.ts * rel[u]));
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* img = images.data().data() + (s * c + ch) * h * w;
      for (std::size_t v = 0; v < o; ++v) {
        const auto [y0, fy] = yt[s][v];
        for (std::size_t u = 0; u < o; ++u) {
          const auto [x0, fx] = xt[s][u];
          const double top = pixel(img, y0, x0) * (1 - fx) + pixel(img, y0, x0 + 1) * fx;
          const double bot = pixel(img, y0 + 1, x0) * (1 - fx) + pixel(img, y0 + 1, x0 + 1) * fx;
          od[((s * c + ch) * o + v) * o + u] = top * (1 - fy) + bot * fy;
        }
      }
    }
  }
  detail::require_finite(out, "sample_window");
  if (detail::should_record({&images, &params})) {
    detail::record("sample_window", out, [images, params, out, xt, yt, rel, n, c, h, w, o, pixel]() {
      auto g = out.grad();
      for (std::size_t s = 0; s < n; ++s) {
        double dtx = 0, dty = 0, dts = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* img = images.data().data() + (s * c + ch) * h * w;
          double* dimg = images.requires_grad() ? images.mutable_grad().data() + (s * c + ch) * h * w : nullptr;
          auto scatter = [&](long r, long col, double v) {
            if (r < 0 || col < 0 || r >= static_cast<long>(h) || col >= static_cast<long>(w)) return;
            dimg[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(col)] += v;
          };
          for (std::size_t v = 0; v < o; ++v) {
            const auto [y0, fy] = yt[s][v];
            for (std::size_t u = 0; u < o; ++u) {
              const auto [x0, fx] = xt[s][u];
              const double gv = g[((s * c + ch) * o + v) * o + u];
              if (gv == 0.0) continue;
              const double i00 = pixel(img, y0, x0), i01 = pixel(img, y0, x0 + 1);
              const double i10 = pixel(img, y0 + 1, x0), i11 = pixel(img, y0 + 1, x0 + 1);
              if (dimg) {
                scatter(y0, x0, gv * (1 - fy) * (1 - fx));
                scatter(y0, x0 + 1, gv * (1 - fy) * fx);
                scatter(y0 + 1, x0, gv * fy * (1 - fx));
                scatter(y0 + 1, x0 + 1, gv * fy * fx);
              }
              const double ddx = (1 - fy) * (i01 - i00) + fy * (i11 - i10);
              const double ddy = (1 - fx) * (i10 - i00) + fx * (i11 - i01);
              dtx += gv * ddx;
              dty += gv * ddy;
              dts += gv * (ddx * (rel[u] - 0.5) + ddy * (rel[v] - 0.5));
            }
          }
        }
        if (params.requires_grad()) {
          auto pg = params.mutable_grad();
          pg[s * 3] += dtx;
          pg[s * 3 + 1] += dty;
          pg[s * 3 + 2] += dts;
        }
      }
    });
  }
  return out;
}

Tensor apply_crop(const Tensor& images, const Tensor& mask, const Tensor& params, int out_size, CropMode mode) {
  require_params(params, "apply_crop");
  if (mask.rank() != 3 || mask.dim(1) != images.dim(2) || mask.dim(2) != images.dim(3)) {
    throw ShapeError("apply_crop: mask extent " + shape_string(mask.shape()) + " does not match image " +
                     shape_string(images.shape()));
  }
  for (std::size_t s = 0; s < params.dim(0); ++s) {
    if (params[s * 3 + 2] < 2.0) {
      throw std::invalid_argument("apply_crop: degenerate crop window of side " + std::to_string(params[s * 3 + 2]) +
                                  " px for sample " + std::to_string(s));
    }
  }
  Tensor masked = mask_image(images, mask);
  if (mode == CropMode::full_masked) return bilinear_resize(masked, out_size, out_size);
  return sample_window(masked, params, out_size);
}

Box pseudo_box(const Tensor& maps, std::size_t sample, int image_size) {
  const auto peaks = map_peaks(maps);
  const auto [r, c] = peaks.at(sample);
  const double sx = static_cast<double>(image_size) / static_cast<double>(maps.dim(2));
  const double sy = static_cast<double>(image_size) / static_cast<double>(maps.dim(1));
  return {(c + 0.5) * sx, (r + 0.5) * sy, image_size / 4.0};
}

std::vector<Box> pseudo_boxes(const Tensor& maps, int image_size) {
  const auto peaks = map_peaks(maps);
  const double sx = static_cast<double>(image_size) / static_cast<double>(maps.dim(2));
  const double sy = static_cast<double>(image_size) / static_cast<double>(maps.dim(1));
  std::vector<Box> out;
  for (const auto& [r, c] : peaks) out.push_back({(c + 0.5) * sx, (r + 0.5) * sy, image_size / 4.0});
  return out;
}

Tensor pretrain_crop_loss(const Tensor& params, const std::vector<Box>& pseudo, int image_size) {
  require_params(params, "pretrain_crop_loss");
  if (pseudo.size() != params.dim(0)) throw ShapeError("pretrain_crop_loss: one pseudo box per sample is required");
  const double inv = 1.0 / static_cast<double>(image_size);
  std::vector<double> target;
  for (const auto& b : pseudo) target.insert(target.end(), {b.cx * inv, b.cy * inv, b.side * inv});
  return mse(scale(params, inv), Tensor::from(params.shape(), std::move(target)));
}

Box to_box(const CropParams& p) { return {p.tx, p.ty, p.ts}; }

void export_crops(const std::filesystem::path& dir, const std::vector<Tensor>& part_images,
                  const std::vector<Tensor>& params, std::size_t first_index) {
  if (part_images.size() != params.size()) throw std::invalid_argument("export_crops: one params tensor per part");
  std::filesystem::create_directories(dir);
  std::ostringstream sidecar;
  sidecar.precision(17);
  for (std::size_t part = 0; part < part_images.size(); ++part) {
    const auto& img = part_images[part];
    const std::size_t h = img.dim(2), w = img.dim(3);
    for (std::size_t s = 0; s < img.dim(0); ++s) {
      write_ppm(dir / ("sample" + std::to_string(first_index + s) + "_part" + std::to_string(part) + ".ppm"),
                img.data().subspan(s * 3 * h * w, 3 * h * w), h, w);
    }
  }
  for (std::size_t s = 0; s < (params.empty() ? 0 : params.front().dim(0)); ++s) {
    for (std::size_t part = 0; part < params.size(); ++part) {
      const auto p = crop_params_row(params[part], s);
      sidecar << first_index + s << ' ' << part << ' ' << p.tx << ' ' << p.ty << ' ' << p.ts << '\n';
    }
  }
  write_file_atomic(dir / "boxes.txt", sidecar.str());
}

}  // namespace sgma
