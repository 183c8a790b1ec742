#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "doctest.h"
#include "sgma/serialize.hpp"
#include "sgma/synth.hpp"

using namespace sgma;
namespace fs = std::filesystem;

namespace {

SynthConfig small_config() {
  SynthConfig c;
  c.num_classes = 6;
  c.num_unseen = 2;
  c.samples_per_class = 8;
  c.train_per_class = 4;
  c.val_per_class = 2;
  c.seed = 3;
  return c;
}

const ZslDataset& default_dataset() {
  static const ZslDataset ds = generate(SynthConfig{});
  return ds;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sgma_test_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m(Eigen::Index(i), Eigen::Index(j)) = t[i * t.dim(1) + j];
  return m;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (i + j) / 2.0;
    i = j + 1;
  }
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = double(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> recipe_vector(const SynthClassSpec& c) {
  std::vector<double> v;
  for (const auto& p : c.parts) {
    for (double x : {p.red, p.green, p.blue, p.side, p.exponent, p.shading, p.dx, p.dy}) v.push_back(x);
  }
  return v;
}

}  // namespace

TEST_CASE("config validation and json round trip") {
  SynthConfig c;
  CHECK_NOTHROW(c.validate());
  c.num_unseen = c.num_classes;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = SynthConfig{};
  c.samples_per_class = 50;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  const SynthConfig back = synth_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(synth_config_from_json({{"num_clases", 3}}), std::invalid_argument);
}

TEST_CASE("generation is deterministic per seed") {
  SynthConfig c = small_config();
  c.noise_level = 0;
  const ZslDataset a = generate(c), b = generate(c);
  for (const char* s : {"train", "val", "test_seen", "test_unseen"}) {
    CHECK(std::ranges::equal(a.split(s).images.data(), b.split(s).images.data()));
    CHECK(a.split(s).labels == b.split(s).labels);
  }
  c.seed = 4;
  const ZslDataset other = generate(c);
  CHECK_FALSE(std::ranges::equal(a.train.images.data(), other.train.images.data()));
}

TEST_CASE("splits, labels and boxes") {
  const ZslDataset& ds = default_dataset();
  CHECK(ds.num_seen() == 15);
  CHECK(ds.train.size() == 15 * 40);
  CHECK(ds.val.size() == 15 * 10);
  CHECK(ds.test_seen.size() == 15 * 10);
  CHECK(ds.test_unseen.size() == 5 * 60);
  for (const char* s : {"train", "val", "test_seen", "test_unseen"}) {
    const Split& sp = ds.split(s);
    CHECK(sp.images.shape() == Shape{sp.size(), 3, 64, 64});
    for (std::size_t i = 0; i < sp.size(); ++i) {
      CHECK(sp.boxes[i].size() == 2);
      const bool unseen_label = sp.labels[i] >= ds.num_seen();
      CHECK(unseen_label == (std::string(s) == "test_unseen"));
      for (const Box& b : sp.boxes[i]) {
        CHECK(b.left() >= -0.5);
        CHECK(b.right() <= 63.5);
        CHECK(b.top() >= -0.5);
        CHECK(b.bottom() <= 63.5);
      }
    }
    const auto [lo, hi] = std::ranges::minmax(sp.images.data());
    CHECK(lo >= 0.0);
    CHECK(hi <= 1.0);
  }
  CHECK_THROWS_AS(ds.split("test"), std::invalid_argument);
}

TEST_CASE("unseen semantics lie in the span of seen semantics") {
  const ZslDataset& ds = default_dataset();
  const Eigen::MatrixXd S = to_matrix(ds.semantics_seen), U = to_matrix(ds.semantics_unseen);
  Eigen::MatrixXd both(S.rows() + U.rows(), S.cols());
  both << S, U;
  const auto rank = [](const Eigen::MatrixXd& m) { return Eigen::FullPivLU<Eigen::MatrixXd>(m).rank(); };
  CHECK(rank(S) >= rank(both));
  CHECK(S.cols() == attribute_dim(2));
  // Distinct classes have distinct attribute vectors.
  for (std::size_t i = 0; i < ds.classes.size(); ++i)
    for (std::size_t j = i + 1; j < ds.classes.size(); ++j) CHECK(ds.classes[i].attributes != ds.classes[j].attributes);
}

TEST_CASE("attributes determine recipes") {
  const ZslDataset& ds = default_dataset();
  for (const auto& c : ds.classes) {
    const auto again = recipes_from_attributes(c.attributes, 2, 64);
    CHECK(recipe_vector({0, false, {}, again}) == recipe_vector(c));
  }
  CHECK_THROWS_AS(recipes_from_attributes({0.5}, 2, 64), std::invalid_argument);
}

TEST_CASE("save, load, save is byte identical") {
  const ZslDataset ds = generate(small_config());
  const fs::path a = scratch("a"), b = scratch("b");
  save_dataset(ds, a);
  const ZslDataset back = load_dataset(a);
  save_dataset(back, b);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
  }
  CHECK(files == 7);
  CHECK(std::ranges::equal(back.test_unseen.images.data(), ds.test_unseen.images.data()));
  CHECK(int(back.semantics_seen.dim(0)) == back.num_seen());
  CHECK(int(back.semantics_unseen.dim(0)) == back.num_unseen());
  CHECK(back.classes.size() == std::size_t(back.config.num_classes));
  CHECK(back.train.boxes[3][1].cx == ds.train.boxes[3][1].cx);
}

TEST_CASE("corrupt or mismatched datasets are rejected") {
  const ZslDataset ds = generate(small_config());
  const fs::path dir = scratch("corrupt");
  save_dataset(ds, dir);
  const std::string blob = slurp(dir / "images_train.sgmt");
  {
    std::ofstream out(dir / "images_train.sgmt", std::ios::binary | std::ios::trunc);
    out.write(blob.data(), std::streamsize(blob.size() / 2));
  }
  CHECK_THROWS_AS(load_dataset(dir), FormatError);

  save_dataset(ds, dir);
  std::string manifest = slurp(dir / "manifest.json");
  {
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << manifest.substr(0, manifest.size() / 2);
  }
  CHECK_THROWS_AS(load_dataset(dir), FormatError);

  auto j = nlohmann::json::parse(manifest);
  j["version"] = kDatasetFormatVersion + 1;
  {
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << j.dump();
  }
  CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("version"), FormatError);
  CHECK_THROWS_AS(load_dataset(scratch("missing")), FormatError);
}

TEST_CASE("unsatisfiable layouts are rejected") {
  SynthConfig c = small_config();
  c.num_parts = 4;
  CHECK_THROWS_WITH_AS(generate(c), doctest::Contains("cannot fit"), std::invalid_argument);
}

TEST_CASE("random boxes") {
  const Box full = random_box(64, 64, 11);
  CHECK(full.cx == 31.5);
  CHECK(full.cy == 31.5);
  CHECK(full.side == 64);
  CHECK(random_box(64, 64, 12).cx == full.cx);
  CHECK_THROWS_AS(random_box(64, 65, 1), std::invalid_argument);

  // Centres must be uniform on [-0.5 + side/2, 63.5 - side/2]; chi-square with 10 bins.
  const double side = 16, lo = -0.5 + side / 2, width = 64 - side;
  std::vector<int> bx(10, 0), by(10, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const Box b = random_box(64, side, derive_seed(77, std::uint64_t(i)));
    REQUIRE(b.left() >= -0.5);
    REQUIRE(b.right() <= 63.5);
    ++bx[std::min(9, int((b.cx - lo) / width * 10))];
    ++by[std::min(9, int((b.cy - lo) / width * 10))];
  }
  for (const auto* bins : {&bx, &by}) {
    double chi2 = 0;
    for (int k : *bins) chi2 += (k - n / 10.0) * (k - n / 10.0) / (n / 10.0);
    CHECK(chi2 < 21.666);  // 99th percentile, 9 degrees of freedom
  }
}

TEST_CASE("derived seeds are distinct") {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t a = 0; a < 50; ++a)
    for (std::uint64_t b = 0; b < 50; ++b) seeds.push_back(derive_seed(0, a, b));
  std::ranges::sort(seeds);
  CHECK(std::ranges::adjacent_find(seeds) == seeds.end());
  CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
}

TEST_CASE("ground-truth boxes tightly bound the rendered parts") {
  SynthConfig c = small_config();
  c.noise_level = 0;
  c.num_parts = 1;
  int checked = 0;
  for (double q : {0.0, 0.5, 1.0}) {
    SynthClassSpec spec;
    spec.attributes.assign(std::size_t(attribute_dim(1)), q);
    spec.parts = recipes_from_attributes(spec.attributes, 1, 64);
    for (std::uint64_t s = 0; s < 10; ++s) {
      std::vector<double> img(3 * 64 * 64);
      std::vector<Box> boxes;
      render_sample(spec, c, s, img, boxes);
      REQUIRE(boxes.size() == 1);
      double l = 1e9, r = -1e9, t = 1e9, b = -1e9;
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
          bool ink = false;
          for (int ch = 0; ch < 3; ++ch) ink = ink || img[std::size_t((ch * 64 + y) * 64 + x)] != 0.15;
          if (!ink) continue;
          l = std::min(l, x - 0.5);
          r = std::max(r, x + 0.5);
          t = std::min(t, y - 0.5);
          b = std::max(b, y + 0.5);
        }
      const Box& box = boxes[0];
      CHECK(std::abs(l - box.left()) <= 1.0);
      CHECK(std::abs(r - box.right()) <= 1.0);
      CHECK(std::abs(t - box.top()) <= 1.0);
      CHECK(std::abs(b - box.bottom()) <= 1.0);
      ++checked;
    }
  }
  CHECK(checked == 30);
}

TEST_CASE("parts are identifiable") {
  const ZslDataset& ds = default_dataset();
  std::size_t total = 0, disjoint = 0;
  for (const char* s : {"train", "val", "test_seen", "test_unseen"}) {
    for (const auto& bs : ds.split(s).boxes) {
      ++total;
      const Box &a = bs[0], &b = bs[1];
      const bool overlap = a.left() < b.right() && b.left() < a.right() && a.top() < b.bottom() && b.top() < a.bottom();
      disjoint += overlap ? 0 : 1;
    }
  }
  CHECK(double(disjoint) >= 0.99 * double(total));
}

TEST_CASE("seen classes are separable by nearest class mean") {
  const ZslDataset& ds = default_dataset();
  const std::size_t dim = 3 * 64 * 64;
  const int C = ds.num_seen();
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(C, Eigen::Index(dim));
  std::vector<int> counts(std::size_t(C), 0);
  auto row = [&](const Split& sp, std::size_t i) {
    return Eigen::Map<const Eigen::RowVectorXd>(sp.images.data().data() + i * dim, Eigen::Index(dim));
  };
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    means.row(ds.train.labels[i]) += row(ds.train, i);
    ++counts[std::size_t(ds.train.labels[i])];
  }
  for (int c = 0; c < C; ++c) means.row(c) /= counts[std::size_t(c)];
  int correct = 0;
  for (std::size_t i = 0; i < ds.test_seen.size(); ++i) {
    Eigen::Index best;
    (means.rowwise() - row(ds.test_seen, i)).rowwise().squaredNorm().minCoeff(&best);
    correct += best == ds.test_seen.labels[i];
  }
  const double acc = double(correct) / double(ds.test_seen.size());
  MESSAGE("nearest-mean accuracy " << acc);
  CHECK(acc > 1.0 / C);
}

TEST_CASE("attribute distance tracks recipe distance") {
  const ZslDataset& ds = default_dataset();
  // Range-normalize each recipe parameter over the classes.
  std::vector<std::vector<double>> rv;
  for (const auto& c : ds.classes) rv.push_back(recipe_vector(c));
  for (std::size_t k = 0; k < rv[0].size(); ++k) {
    double lo = 1e300, hi = -1e300;
    for (const auto& v : rv) lo = std::min(lo, v[k]), hi = std::max(hi, v[k]);
    for (auto& v : rv) v[k] = hi > lo ? (v[k] - lo) / (hi - lo) : 0.0;
  }
  std::vector<double> da, dr;
  for (std::size_t i = 0; i < rv.size(); ++i)
    for (std::size_t j = i + 1; j < rv.size(); ++j) {
      double a = 0, r = 0;
      for (std::size_t k = 0; k < ds.classes[i].attributes.size(); ++k) {
        a += std::pow(ds.classes[i].attributes[k] - ds.classes[j].attributes[k], 2);
      }
      for (std::size_t k = 0; k < rv[i].size(); ++k) r += std::pow(rv[i][k] - rv[j][k], 2);
      da.push_back(std::sqrt(a));
      dr.push_back(std::sqrt(r));
    }
  const double rho = pearson(ranks(da), ranks(dr));
  MESSAGE("spearman rho " << rho);
  CHECK(rho > 0.9);
}

TEST_CASE("image export") {
  const ZslDataset ds = generate(small_config());
  const fs::path dir = scratch("export");
  export_images(ds.train, dir, 3);
  CHECK(std::distance(fs::directory_iterator(dir), fs::directory_iterator{}) == 3);
  const std::string head = slurp(dir / ("image0_class" + std::to_string(ds.train.labels[0]) + ".ppm")).substr(0, 2);
  CHECK(head == "P6");
}
