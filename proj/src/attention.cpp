#include "sgma/attention.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "sgma/image_io.hpp"
#include "sgma/kmeans.hpp"
#include "sgma/ops.hpp"

namespace sgma {

void MultiAttentionConfig::validate() const {
  if (num_parts < 1) throw std::invalid_argument("attention: num_parts must be >= 1");
  if (lambda < 0) throw std::invalid_argument("attention: lambda must be >= 0");
  if (margin < 0 || margin >= 1) throw std::invalid_argument("attention: diversity margin must lie in [0,1)");
}

double MultiAttentionConfig::sigma_for(std::size_t map_side) const {
  return sigma > 0 ? sigma : static_cast<double>(map_side) / 8.0;
}

int MultiAttentionConfig::hidden_for(int channels) const { return hidden > 0 ? hidden : std::max(1, channels / 2); }

ParameterList AttentionHead::parameters(const std::string& prefix) const {
  return {{prefix + ".w1", w1}, {prefix + ".w2", w2}};
}

AttentionHead init_attention_head(int channels, int hidden, int part_index, std::uint64_t seed) {
  if (channels < 1 || hidden < 1) throw std::invalid_argument("attention head: channels and hidden width must be >= 1");
  std::mt19937_64 rng(seed);
  auto draw = [&](std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(cols)));
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = dist(rng);
    return Tensor::parameter({rows, cols}, std::move(v));
  };
  const auto c = static_cast<std::size_t>(channels), h = static_cast<std::size_t>(hidden);
  AttentionHead head;
  head.w1 = draw(h, c);
  head.w2 = draw(c, h);
  head.part_index = part_index;
  return head;
}

Tensor channel_descriptor(const Tensor& features) { return global_avg_pool(features); }

Tensor channel_attention(const AttentionHead& head, const Tensor& descriptor) {
  if (descriptor.rank() != 2 || descriptor.dim(1) != head.w1.dim(1)) {
    throw ShapeError("channel_attention: descriptor " + shape_string(descriptor.shape()) + " does not match head with " +
                     std::to_string(head.w1.dim(1)) + " channels");
  }
  return sigmoid(fully_connected(relu(fully_connected(descriptor, head.w1)), head.w2));
}

Tensor channel_weighted_sum(const Tensor& features, const Tensor& channel_weights) {
  if (features.rank() != 4) throw ShapeError("channel_weighted_sum: features must be [N,C,H,W]");
  const std::size_t n = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3), plane = h * w;
  if (channel_weights.shape() != Shape{n, c}) {
    throw ShapeError("channel_weighted_sum: weights " + shape_string(channel_weights.shape()) + " do not match " +
                     std::to_string(c) + " channels");
  }
  Tensor out = Tensor::zeros({n, h, w});
  auto o = out.mutable_data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double a = channel_weights[s * c + ch];
      const double* f = features.data().data() + (s * c + ch) * plane;
      double* dst = o.data() + s * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += a * f[p];
    }
  detail::require_finite(out, "channel_weighted_sum");
  if (detail::should_record({&features, &channel_weights})) {
    detail::record("channel_weighted_sum", out, [features, channel_weights, out, n, c, plane]() {
      auto g = out.grad();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* f = features.data().data() + (s * c + ch) * plane;
          const double* gs = g.data() + s * plane;
          if (features.requires_grad()) {
            double* df = features.mutable_grad().data() + (s * c + ch) * plane;
            const double a = channel_weights[s * c + ch];
            for (std::size_t p = 0; p < plane; ++p) df[p] += a * gs[p];
          }
          if (channel_weights.requires_grad()) {
            double acc = 0.0;
            for (std::size_t p = 0; p < plane; ++p) acc += gs[p] * f[p];
            channel_weights.mutable_grad()[s * c + ch] += acc;
          }
        }
    });
  }
  return out;
}

Tensor attention_map(const Tensor& features, const Tensor& channel_weights, bool mean_over_channels) {
  Tensor pre = channel_weighted_sum(features, channel_weights);
  if (mean_over_channels) pre = scale(pre, 1.0 / static_cast<double>(features.dim(1)));
  return sigmoid(pre);
}

Eigen::MatrixXd channel_peak_positions(const Tensor& features) {
  if (features.rank() != 4) throw ShapeError("channel_peak_positions: features must be [N,C,H,W]");
  const std::size_t n = features.dim(0), c = features.dim(1), w = features.dim(3), plane = features.dim(2) * w;
  Eigen::MatrixXd peaks = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c), 2);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* f = features.data().data() + (s * c + ch) * plane;
      const auto arg = static_cast<std::size_t>(std::max_element(f, f + plane) - f);
      peaks(static_cast<Eigen::Index>(ch), 0) += static_cast<double>(arg / w);
      peaks(static_cast<Eigen::Index>(ch), 1) += static_cast<double>(arg % w);
    }
  return peaks / static_cast<double>(n);
}

ChannelClusters init_channel_clusters(const Eigen::MatrixXd& peak_positions, int num_parts, std::uint64_t seed) {
  if (peak_positions.rows() < num_parts) {
    throw std::invalid_argument("init_channel_clusters: " + std::to_string(peak_positions.rows()) + " channels for " +
                                std::to_string(num_parts) + " parts");
  }
  auto result = kmeans<double>(peak_positions, num_parts, seed);

  std::vector<int> order(static_cast<std::size_t>(num_parts));
  for (int i = 0; i < num_parts; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const auto ca = result.centers.row(a), cb = result.centers.row(b);
    return ca(1) != cb(1) ? ca(1) < cb(1) : ca(0) < cb(0);
  });
  std::vector<int> rank(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) rank[static_cast<std::size_t>(order[i])] = static_cast<int>(i);

  ChannelClusters out;
  out.centers.resize(num_parts, 2);
  for (int i = 0; i < num_parts; ++i) out.centers.row(i) = result.centers.row(order[static_cast<std::size_t>(i)]);
  out.init_targets.assign(static_cast<std::size_t>(num_parts), std::vector<double>(result.labels.size(), 0.0));
  for (std::size_t ch = 0; ch < result.labels.size(); ++ch) {
    const int part = rank[static_cast<std::size_t>(result.labels[ch])];
    out.labels.push_back(part);
    out.init_targets[static_cast<std::size_t>(part)][ch] = 1.0;
  }
  return out;
}

std::vector<std::pair<int, int>> map_peaks(const Tensor& maps) {
  if (maps.rank() != 3) throw ShapeError("map_peaks: maps must be [N,H,W]");
  const std::size_t n = maps.dim(0), w = maps.dim(2), plane = maps.dim(1) * w;
  std::vector<std::pair<int, int>> peaks;
  for (std::size_t s = 0; s < n; ++s) {
    const double* m = maps.data().data() + s * plane;
    const auto arg = static_cast<std::size_t>(std::max_element(m, m + plane) - m);
    peaks.emplace_back(static_cast<int>(arg / w), static_cast<int>(arg % w));
  }
  return peaks;
}

Tensor gaussian_target(const Tensor& maps, double sigma) {
  if (sigma <= 0) throw std::invalid_argument("gaussian_target: sigma must be positive");
  const auto peaks = map_peaks(maps);
  const std::size_t h = maps.dim(1), w = maps.dim(2);
  Tensor target = Tensor::zeros(maps.shape());
  auto t = target.mutable_data();
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t s = 0; s < peaks.size(); ++s) {
    const auto [pr, pc] = peaks[s];
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const double dr = static_cast<double>(r) - pr, dc = static_cast<double>(c) - pc;
        t[(s * h + r) * w + c] = std::exp(-(dr * dr + dc * dc) * inv);
      }
  }
  return target;
}

Tensor compactness_loss(const Tensor& maps, const Tensor& target) { return mse(maps, target); }

namespace detail {
thread_local bool flip_diversity_backward = false;
}

Tensor diversity_loss(const std::vector<Tensor>& maps, std::size_t part, double margin) {
  if (maps.size() < 2) throw std::invalid_argument("diversity_loss: needs at least two attention maps");
  if (part >= maps.size()) throw std::out_of_range("diversity_loss: part index out of range");
  for (const auto& m : maps) {
    if (m.shape() != maps.front().shape()) throw ShapeError("diversity_loss: attention maps differ in shape");
  }
  const Tensor& own = maps[part];
  const std::size_t total = own.numel();
  const double inv_n = 1.0 / static_cast<double>(own.dim(0));
  std::vector<double> hinge(total, 0.0);
  std::vector<std::size_t> winner(total, 0);
  double acc = 0.0;
  for (std::size_t z = 0; z < total; ++z) {
    double best = -1.0;
    for (std::size_t k = 0; k < maps.size(); ++k) {
      if (k == part) continue;
      if (maps[k][z] > best) {
        best = maps[k][z];
        winner[z] = k;
      }
    }
    hinge[z] = std::max(0.0, best - margin);
    acc += own[z] * hinge[z];
  }
  Tensor out = Tensor::full({}, acc * inv_n);
  detail::require_finite(out, "diversity_loss");
  if (detail::should_record(std::span<const Tensor>(maps))) {
    detail::record("diversity_loss", out, [maps, part, hinge, winner, out, inv_n, total]() {
      const double g = (detail::flip_diversity_backward ? -1.0 : 1.0) * out.grad()[0] * inv_n;
      const Tensor& own = maps[part];
      for (std::size_t z = 0; z < total; ++z) {
        if (own.requires_grad()) own.mutable_grad()[z] += g * hinge[z];
        if (hinge[z] > 0.0 && maps[winner[z]].requires_grad()) maps[winner[z]].mutable_grad()[z] += g * own[z];
      }
    });
  }
  return out;
}

Tensor multi_attention_loss(const std::vector<Tensor>& maps, const MultiAttentionConfig& cfg) {
  if (maps.size() != static_cast<std::size_t>(cfg.num_parts)) {
    throw std::invalid_argument("multi_attention_loss: expected " + std::to_string(cfg.num_parts) + " maps, got " +
                                std::to_string(maps.size()));
  }
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const double sigma = cfg.sigma_for(maps[i].dim(1));
    terms.push_back(compactness_loss(maps[i], gaussian_target(maps[i], sigma)));
    if (maps.size() > 1 && cfg.lambda > 0) terms.push_back(scale(diversity_loss(maps, i, cfg.margin), cfg.lambda));
  }
  return add_n(terms);
}

double attention_overlap(const std::vector<Tensor>& maps) {
  if (maps.size() < 2) throw std::invalid_argument("attention_overlap: needs at least two maps");
  double lo = 0.0, hi = 0.0;
  for (std::size_t z = 0; z < maps.front().numel(); ++z) {
    double mn = maps.front()[z], mx = maps.front()[z];
    for (const auto& m : maps) {
      mn = std::min(mn, m[z]);
      mx = std::max(mx, m[z]);
    }
    lo += mn;
    hi += mx;
  }
  return hi > 0 ? lo / hi : 1.0;
}

void export_attention(const std::filesystem::path& dir, const std::vector<Tensor>& maps, std::size_t first_index) {
  std::filesystem::create_directories(dir);
  for (std::size_t part = 0; part < maps.size(); ++part) {
    const auto& m = maps[part];
    const std::size_t h = m.dim(1), w = m.dim(2);
    for (std::size_t s = 0; s < m.dim(0); ++s) {
      write_pgm(dir / ("sample" + std::to_string(first_index + s) + "_part" + std::to_string(part) + ".pgm"),
                m.data().subspan(s * h * w, h * w), h, w);
    }
  }
}

}  // namespace sgma
