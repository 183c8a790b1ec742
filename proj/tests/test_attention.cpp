#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "doctest.h"
#include "sgma/attention.hpp"
#include "sgma/backbone.hpp"
#include "sgma/gradcheck.hpp"
#include "sgma/kmeans.hpp"
#include "sgma/ops.hpp"
#include "test_util.hpp"

using namespace sgma;
using sgma::testing::probe_weights;
using sgma::testing::random_parameter;
using sgma::testing::random_tensor;

namespace {

Tensor map_from(std::size_t h, std::size_t w, std::vector<double> v) { return Tensor::from({1, h, w}, std::move(v)); }

// Minimum within-cluster sum of squares over every assignment of points to k labels.
double brute_force_inertia(const Eigen::MatrixXd& pts, int k, std::vector<int>& best_labels) {
  const int n = static_cast<int>(pts.rows());
  std::vector<int> labels(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    double sse = 0;
    for (int c = 0; c < k; ++c) {
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(pts.cols());
      int cnt = 0;
      for (int i = 0; i < n; ++i)
        if (labels[i] == c) {
          mean += pts.row(i);
          ++cnt;
        }
      if (cnt == 0) continue;
      mean /= cnt;
      for (int i = 0; i < n; ++i)
        if (labels[i] == c) sse += (pts.row(i) - mean).squaredNorm();
    }
    if (sse < best) {
      best = sse;
      best_labels = labels;
    }
    int pos = 0;
    while (pos < n && ++labels[pos] == k) labels[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

// True when two labelings induce the same partition.
bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j)
      if ((a[i] == a[j]) != (b[i] == b[j])) return false;
  return true;
}

}  // namespace

TEST_CASE("channel descriptor is global average pooling") {
  Tensor f = Tensor::from({1, 2, 2, 2}, {1, 2, 3, 4, 7, 7, 7, 7});
  Tensor p = channel_descriptor(f);
  CHECK(p[0] == 2.5);
  CHECK(p[1] == 7.0);
  Tensor x = random_tensor({3, 5, 4, 4}, 2);
  Tensor a = channel_descriptor(x), b = global_avg_pool(x);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("channel attention bounds, zero weights and gradients") {
  AttentionHead head;
  head.w1 = Tensor::parameter({3, 6}, std::vector<double>(18, 0.0));
  head.w2 = Tensor::parameter({6, 3}, std::vector<double>(18, 0.0));
  Tensor a = channel_attention(head, random_tensor({2, 6}, 1));
  for (double v : a.data()) CHECK(v == 0.5);
  CHECK_THROWS_AS(channel_attention(head, random_tensor({2, 5}, 1)), ShapeError);

  AttentionHead r = init_attention_head(6, 3, 0, 4);
  Tensor big = channel_attention(r, random_tensor({4, 6}, 3, -50, 50));
  for (double v : big.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }

  Tensor p = random_parameter({2, 6}, 9);
  std::vector<Tensor> inputs{p, r.w1, r.w2};
  CHECK(grad_check(
            [&]() {
              Tensor y = channel_attention(r, p);
              return weighted_sum(y, probe_weights(y, 2));
            },
            inputs) <= 1e-4);
}

TEST_CASE("attention map values and gradients") {
  Tensor zeros = Tensor::zeros({2, 4, 3, 3});
  Tensor a = random_tensor({2, 4}, 1, 0, 1);
  Tensor half = attention_map(zeros, a);
  for (double v : half.data()) CHECK(v == 0.5);

  // C = 1 reduces to sigmoid(w * f).
  Tensor f = random_tensor({1, 1, 3, 3}, 5, -2, 2);
  Tensor w = Tensor::from({1, 1}, {0.7});
  Tensor m = attention_map(f, w);
  for (std::size_t i = 0; i < 9; ++i) CHECK(m[i] == doctest::Approx(1.0 / (1.0 + std::exp(-0.7 * f[i]))).epsilon(1e-14));

  Tensor mean_variant = attention_map(random_tensor({1, 4, 2, 2}, 3), Tensor::full({1, 4}, 1.0), true);
  CHECK(mean_variant.shape() == Shape{1, 2, 2});

  Tensor weights = random_tensor({2, 5}, 8, 0.1, 0.9);
  CHECK(grad_check([&](const Tensor& in) { return mean(attention_map(in, weights)); }, random_tensor({2, 5, 3, 3}, 6)) <=
        1e-4);
  Tensor feats = random_tensor({2, 5, 3, 3}, 7);
  CHECK(grad_check(
            [&](const Tensor& in) {
              Tensor y = attention_map(feats, in);
              return weighted_sum(y, probe_weights(y, 3));
            },
            weights) <= 1e-4);
  CHECK_THROWS_AS(attention_map(feats, random_tensor({2, 4}, 1)), ShapeError);
}

TEST_CASE("k-means channel clusters on separated peaks") {
  Eigen::MatrixXd peaks(16, 2);
  for (int i = 0; i < 16; ++i) peaks.row(i) = (i % 2 == 0) ? Eigen::RowVector2d(6, 6) : Eigen::RowVector2d(1, 1);
  ChannelClusters cl = init_channel_clusters(peaks, 2, 3);
  for (int i = 0; i < 16; ++i) {
    // Relabelled by ascending column: the (1,1) group is part 0.
    CHECK(cl.labels[static_cast<std::size_t>(i)] == (i % 2 == 0 ? 1 : 0));
    CHECK(cl.init_targets[static_cast<std::size_t>(cl.labels[static_cast<std::size_t>(i)])][static_cast<std::size_t>(i)] ==
          1.0);
  }
  ChannelClusters one = init_channel_clusters(peaks, 1, 3);
  for (int l : one.labels) CHECK(l == 0);

  Eigen::MatrixXd dup = Eigen::MatrixXd::Constant(8, 2, 3.0);
  CHECK_THROWS_WITH_AS(init_channel_clusters(dup, 2, 0), doctest::Contains("seed"), std::invalid_argument);

  ChannelClusters again = init_channel_clusters(peaks, 2, 3);
  CHECK(again.labels == cl.labels);
}

TEST_CASE("k-means matches the exhaustive optimal partition") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> noise(0.0, 0.6);
  const Eigen::Vector2d centers[3] = {{1.5, 1.5}, {6.0, 2.0}, {3.5, 6.0}};
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::MatrixXd pts(11, 2);
    for (int i = 0; i < 11; ++i) pts.row(i) = centers[i % 3].transpose() + Eigen::RowVector2d(noise(rng), noise(rng));
    std::vector<int> oracle;
    const double best = brute_force_inertia(pts, 3, oracle);
    auto km = kmeans<double>(pts, 3, 100 + trial);
    CHECK(km.inertia == doctest::Approx(best).epsilon(1e-9));
    CHECK(same_partition(km.labels, oracle));
  }
}

TEST_CASE("channel peak positions average argmax over the batch") {
  Tensor f = Tensor::zeros({2, 2, 3, 3});
  auto d = f.mutable_data();
  d[0 * 9 + 1 * 3 + 2] = 1;  // sample 0 channel 0 peak (1,2)
  d[2 * 9 + 2 * 3 + 0] = 1;  // sample 1 channel 0 peak (2,0)
  d[1 * 9 + 0] = 1;          // sample 0 channel 1 peak (0,0); sample 1 channel 1 all zero -> first (0,0)
  Eigen::MatrixXd p = channel_peak_positions(f);
  CHECK(p(0, 0) == 1.5);
  CHECK(p(0, 1) == 1.0);
  CHECK(p(1, 0) == 0.0);
  CHECK(p(1, 1) == 0.0);
}

TEST_CASE("gaussian target values") {
  std::vector<double> v(25, 0.1);
  v[2 * 5 + 2] = 0.9;
  Tensor m = map_from(5, 5, v);
  Tensor t = gaussian_target(m, 1.0);
  CHECK(t[12] == 1.0);
  CHECK(t[0] == doctest::Approx(std::exp(-4.0)).epsilon(1e-14));
  CHECK(t[0] == doctest::Approx(0.0183).epsilon(1e-2));
  CHECK_FALSE(t.requires_grad());

  // Half-width identity along a row: distance sigma * sqrt(2 ln 2) gives 0.5.
  const double sigma = 3.0 / std::sqrt(2.0 * std::log(2.0));
  Tensor half = gaussian_target(map_from(1, 7, {1, 0, 0, 0, 0, 0, 0}), sigma);
  CHECK(half[3] == doctest::Approx(0.5).epsilon(1e-12));

  // Ties resolve to the first row-major occurrence.
  Tensor tie = gaussian_target(map_from(2, 2, {0.3, 0.5, 0.5, 0.1}), 1.0);
  CHECK(tie[1] == 1.0);
  CHECK(tie[2] < 1.0);

  // Radially non-increasing from the peak.
  Tensor big = gaussian_target(random_tensor({1, 8, 8}, 4, 0, 1), 1.5);
  const auto [pr, pc] = map_peaks(random_tensor({1, 8, 8}, 4, 0, 1)).front();
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t j = 0; j < 64; ++j) {
      const double di = std::hypot(double(i / 8) - pr, double(i % 8) - pc);
      const double dj = std::hypot(double(j / 8) - pr, double(j % 8) - pc);
      if (di < dj) CHECK(big[i] >= big[j]);
    }
  CHECK_THROWS_AS(gaussian_target(m, 0.0), std::invalid_argument);
}

TEST_CASE("compactness loss") {
  Tensor m = random_tensor({1, 4, 4}, 3, 0, 1);
  CHECK(compactness_loss(m, m.detach()).item() == 0.0);
  Tensor off = m.clone();
  off.mutable_data()[5] += 0.3;
  CHECK(compactness_loss(off, m).item() == doctest::Approx(0.09 / 16).epsilon(1e-12));
  Tensor target = gaussian_target(m, 1.0);
  CHECK(grad_check([&](const Tensor& in) { return compactness_loss(in, target); }, m) <= 1e-4);
  CHECK(compactness_loss(random_tensor({1, 4, 4}, 9, 0, 1), target).item() > 0.0);
}

TEST_CASE("diversity loss values, gradients and invariants") {
  Tensor ones = Tensor::full({1, 3, 3}, 1.0);
  CHECK(diversity_loss({ones, ones}, 0, 0.2).item() == doctest::Approx(0.8 * 9).epsilon(1e-14));
  Tensor low = Tensor::full({1, 3, 3}, 0.2);
  CHECK(diversity_loss({ones, low}, 0, 0.2).item() == 0.0);
  CHECK_THROWS_AS(diversity_loss({ones}, 0, 0.2), std::invalid_argument);

  Tensor a = random_tensor({2, 4, 4}, 1, 0.05, 0.95), b = random_tensor({2, 4, 4}, 2, 0.05, 0.95),
         c = random_tensor({2, 4, 4}, 3, 0.05, 0.95);
  // Adding a map that never exceeds the margin leaves the loss unchanged.
  const double base = diversity_loss({a, b}, 0, 0.2).item();
  CHECK(diversity_loss({a, b, Tensor::full({2, 4, 4}, 0.15)}, 0, 0.2).item() == doctest::Approx(base).epsilon(1e-15));
  CHECK(base >= 0.0);

  a.set_requires_grad(true);
  b.set_requires_grad(true);
  c.set_requires_grad(true);
  {
    Tape tape;
    Tensor l = diversity_loss({a, b, c}, 0, 0.2);
    tape.backward(l);
    for (double g : a.grad()) CHECK(g >= 0.0);
  }
  std::vector<Tensor> inputs{a, b, c};
  for (std::size_t part = 0; part < 3; ++part) {
    CHECK(grad_check([&]() { return diversity_loss({a, b, c}, part, 0.2); }, inputs) <= 1e-4);
  }
}

TEST_CASE("multi-attention loss composition") {
  // Fixed 2-map 4x4 fixture evaluated term by term.
  std::vector<double> v0(16), v1(16);
  for (int i = 0; i < 16; ++i) {
    v0[i] = 0.1 + 0.05 * i;
    v1[i] = 0.9 - 0.05 * i;
  }
  Tensor m0 = map_from(4, 4, v0), m1 = map_from(4, 4, v1);
  MultiAttentionConfig cfg;
  cfg.sigma = 1.0;
  double expected = 0.0;
  const std::pair<int, int> peak[2] = {{3, 3}, {0, 0}};
  const std::vector<double>* vals[2] = {&v0, &v1};
  for (int i = 0; i < 2; ++i) {
    double cpt = 0.0, div = 0.0;
    for (int z = 0; z < 16; ++z) {
      const int r = z / 4, c = z % 4;
      const double d2 = (r - peak[i].first) * (r - peak[i].first) + (c - peak[i].second) * (c - peak[i].second);
      const double t = std::exp(-d2 / 2.0);
      cpt += ((*vals[i])[z] - t) * ((*vals[i])[z] - t) / 16.0;
      const double other = (*vals[1 - i])[z];
      div += (*vals[i])[z] * std::max(0.0, other - 0.2);
    }
    expected += cpt + div;
  }
  CHECK(multi_attention_loss({m0, m1}, cfg).item() == doctest::Approx(expected).epsilon(1e-13));

  cfg.lambda = 0.0;
  const double compact_only = compactness_loss(m0, gaussian_target(m0, 1.0)).item() +
                              compactness_loss(m1, gaussian_target(m1, 1.0)).item();
  CHECK(multi_attention_loss({m0, m1}, cfg).item() == doctest::Approx(compact_only).epsilon(1e-14));

  MultiAttentionConfig single;
  single.num_parts = 1;
  single.sigma = 1.0;
  CHECK(multi_attention_loss({m0}, single).item() ==
        doctest::Approx(compactness_loss(m0, gaussian_target(m0, 1.0)).item()).epsilon(1e-14));
  CHECK_THROWS_AS(multi_attention_loss({m0}, MultiAttentionConfig{}), std::invalid_argument);
  CHECK(MultiAttentionConfig{}.sigma_for(8) == 1.0);
}

TEST_CASE("multi-attention loss gradient reaches backbone parameters") {
  BackboneConfig bc;
  bc.input_size = 16;
  bc.channel_widths = {4, 8};
  Backbone net = init_backbone(bc, 5);
  for (const auto& b : net.biases())
    for (auto& e : b.impl()->data) e = 0.3;
  AttentionHead h0 = init_attention_head(8, 4, 0, 1), h1 = init_attention_head(8, 4, 1, 2);
  MultiAttentionConfig cfg;
  Tensor x = random_tensor({2, 3, 16, 16}, 3, 0, 1);
  std::vector<Tensor> params;
  for (const auto& p : net.parameters("bb")) params.push_back(p.value);
  CHECK(grad_check(
            [&]() {
              Tensor f = net.forward_features(x);
              Tensor p = channel_descriptor(f);
              std::vector<Tensor> maps{attention_map(f, channel_attention(h0, p)),
                                       attention_map(f, channel_attention(h1, p))};
              return multi_attention_loss(maps, cfg);
            },
            params) <= 1e-4);
}

TEST_CASE("attention overlap") {
  Tensor m = random_tensor({2, 3, 3}, 1, 0.1, 0.9);
  CHECK(attention_overlap({m, m}) == doctest::Approx(1.0));
  Tensor l = map_from(2, 2, {1, 1, 0, 0}), r = map_from(2, 2, {0, 0, 1, 1});
  CHECK(attention_overlap({l, r}) == 0.0);
  CHECK_THROWS(attention_overlap({m}));
}

TEST_CASE("attention maps stay strictly inside (0,1)") {
  Backbone net = init_backbone(BackboneConfig{}, 2);
  AttentionHead h = init_attention_head(32, 16, 0, 3);
  Tensor f = net.forward_features(random_tensor({2, 3, 64, 64}, 4, 0, 1));
  Tensor m = attention_map(f, channel_attention(h, channel_descriptor(f)));
  for (double v : m.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("export attention writes scaled PGMs") {
  const auto dir = std::filesystem::temp_directory_path() / "sgma_test_attn_export";
  std::filesystem::remove_all(dir);
  Tensor m = map_from(1, 2, {0.5, 1.0});
  export_attention(dir, {m, m}, 4);
  CHECK(std::filesystem::exists(dir / "sample4_part1.pgm"));
  std::ifstream in(dir / "sample4_part0.pgm", std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)), {});
  REQUIRE(content.size() >= 2);
  CHECK(static_cast<unsigned char>(content[content.size() - 2]) == 128);
  CHECK(static_cast<unsigned char>(content[content.size() - 1]) == 255);
  std::filesystem::remove_all(dir);
}
