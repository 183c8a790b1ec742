#include "sgma/evaluate.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "sgma/serialize.hpp"
#include "sgma/seed.hpp"
#include "sgma/train.hpp"

namespace sgma {

namespace {

enum Stream : std::uint64_t { kRandomBoxes = 301 };

constexpr int kFeatureFormatVersion = 1;

Tensor to_tensor(const Mat<double>& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return Tensor::from({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(v));
}

const SplitFeatures& nonempty(const FeatureBundle& b, const std::string& name, const char* mode) {
  const SplitFeatures& s = b.split(name);
  if (s.labels.empty()) throw std::invalid_argument(std::string(mode) + ": split " + name + " has no samples");
  return s;
}

std::vector<int> predictions(const SplitFeatures& s, Eigen::Index first, Eigen::Index count, const Mat<double>& protos,
                             double beta, int offset) {
  std::vector<int> out = predict_batch<double>(Mat<double>(s.scores.middleCols(first, count)), s.phi, protos, beta);
  for (int& p : out) p += offset;
  return out;
}

}  // namespace

const SplitFeatures& FeatureBundle::split(const std::string& name) const {
  for (const auto& s : splits)
    if (s.split == name) return s;
  throw std::invalid_argument("feature bundle has no split '" + name + "'");
}

Mat<double> to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("to_matrix: expected a rank-2 tensor, got " + shape_string(t.shape()));
  Mat<double> m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t[static_cast<std::size_t>(r * m.cols() + c)];
  return m;
}

void require_compatible(const SgmaModel& m, const ZslDataset& ds) {
  const auto d = static_cast<int>(ds.semantics_seen.dim(1));
  if (m.num_seen != ds.num_seen() || m.semantic_dim != d) {
    throw std::invalid_argument("checkpoint expects " + std::to_string(m.num_seen) + " seen classes with " +
                                std::to_string(m.semantic_dim) + "-d semantics, dataset has " +
                                std::to_string(ds.num_seen()) + " seen classes with " + std::to_string(d) + "-d");
  }
  if (m.config.image_size != ds.config.image_size) {
    throw std::invalid_argument("checkpoint expects " + std::to_string(m.config.image_size) + "-px images, dataset has " +
                                std::to_string(ds.config.image_size));
  }
  if (m.config.use_parts && m.config.num_parts() != ds.config.num_parts) {
    throw std::invalid_argument("checkpoint has " + std::to_string(m.config.num_parts()) + " parts, dataset annotates " +
                                std::to_string(ds.config.num_parts));
  }
}

SplitFeatures extract_features(const SgmaModel& m, const ZslDataset& ds, const std::string& split, int batch_size,
                               std::uint64_t seed) {
  const Split& data = ds.split(split);
  const Tensor all_semantics = Tensor::from(
      {ds.semantics_seen.dim(0) + ds.semantics_unseen.dim(0), ds.semantics_seen.dim(1)}, [&] {
        std::vector<double> v(ds.semantics_seen.data().begin(), ds.semantics_seen.data().end());
        v.insert(v.end(), ds.semantics_unseen.data().begin(), ds.semantics_unseen.data().end());
        return v;
      }());
  SplitFeatures out;
  out.split = split;
  out.labels = data.labels;
  const std::size_t n = data.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  out.keys = sample_keys(split, all);
  out.boxes.resize(n);
  const auto classes = static_cast<Eigen::Index>(all_semantics.dim(0));
  const auto dim = static_cast<Eigen::Index>(m.config.num_streams() * m.semantic_dim);
  out.scores.resize(static_cast<Eigen::Index>(n), classes);
  out.phi.resize(static_cast<Eigen::Index>(n), dim);
  NoGradGuard guard;
  for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, begin + static_cast<std::size_t>(batch_size));
    const std::span<const std::size_t> rows(all.data() + begin, end - begin);
    const std::span<const std::uint64_t> keys(out.keys.data() + begin, end - begin);
    const ForwardPass pass = forward(m, gather(data.images, rows), {false, keys, seed});
    out.scores.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(rows.size())) =
        to_matrix(fused_scores(m, pass, all_semantics));
    const std::vector<double> phi = concat_phi(pass);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (Eigen::Index k = 0; k < dim; ++k)
        out.phi(static_cast<Eigen::Index>(begin + r), k) = phi[r * static_cast<std::size_t>(dim) + static_cast<std::size_t>(k)];
    for (const Tensor& params : pass.crop_params)
      for (std::size_t r = 0; r < rows.size(); ++r) out.boxes[begin + r].push_back({params[r * 3], params[r * 3 + 1], params[r * 3 + 2]});
  }
  if (!m.config.use_parts) out.boxes.clear();
  return out;
}

std::vector<std::vector<Box>> export_samples(const SgmaModel& m, const ZslDataset& ds, const std::string& split,
                                             std::size_t n, const std::filesystem::path& dir, int batch_size,
                                             std::uint64_t seed) {
  require_compatible(m, ds);
  if (!m.config.use_parts) throw std::invalid_argument("export: the checkpoint has no parts (no-parts model)");
  const Split& data = ds.split(split);
  if (n > data.size()) {
    throw std::invalid_argument("export: requested " + std::to_string(n) + " samples, split " + split + " has " +
                                std::to_string(data.size()));
  }
  if (n == 0) return {};
  const auto parts = static_cast<std::size_t>(m.config.num_parts());
  std::vector<std::vector<double>> maps(parts), crops(parts), params(parts);
  Shape map_shape, crop_shape;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const std::vector<std::uint64_t> keys = sample_keys(split, all);
  NoGradGuard guard;
  for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), begin + static_cast<std::size_t>(batch_size));
    const std::span<const std::size_t> rows(all.data() + begin, end - begin);
    const ForwardPass pass = forward(m, gather(data.images, rows), {false, {keys.data() + begin, end - begin}, seed});
    const std::size_t take = std::min(n, end) - begin;
    for (std::size_t p = 0; p < parts; ++p) {
      auto append = [take](std::vector<double>& dst, const Tensor& t) {
        const std::size_t per = t.numel() / t.dim(0);
        dst.insert(dst.end(), t.data().begin(), t.data().begin() + static_cast<std::ptrdiff_t>(take * per));
      };
      if (!pass.maps.empty()) {
        append(maps[p], pass.maps[p]);
        map_shape = pass.maps[p].shape();
      }
      append(crops[p], pass.inputs[p + 1]);
      crop_shape = pass.inputs[p + 1].shape();
      append(params[p], pass.crop_params[p]);
    }
  }
  std::vector<Tensor> map_t, crop_t, param_t;
  for (std::size_t p = 0; p < parts; ++p) {
    if (!map_shape.empty()) {
      map_shape[0] = n;
      map_t.push_back(Tensor::from(map_shape, std::move(maps[p])));
    }
    crop_shape[0] = n;
    crop_t.push_back(Tensor::from(crop_shape, std::move(crops[p])));
    param_t.push_back(Tensor::from({n, 3}, std::move(params[p])));
  }
  if (!map_t.empty()) export_attention(dir, map_t);
  export_crops(dir, crop_t, param_t);
  std::vector<std::vector<Box>> boxes(n);
  for (std::size_t i = 0; i < n; ++i)
    for (const Tensor& t : param_t) boxes[i].push_back({t[i * 3], t[i * 3 + 1], t[i * 3 + 2]});
  return boxes;
}

FeatureBundle extract_bundle(const SgmaModel& m, const ZslDataset& ds, int batch_size, std::uint64_t seed) {
  require_compatible(m, ds);
  FeatureBundle b;
  b.num_seen = ds.num_seen();
  b.num_unseen = ds.num_unseen();
  b.semantics_seen = to_matrix(ds.semantics_seen);
  b.semantics_unseen = to_matrix(ds.semantics_unseen);
  for (const char* name : {"train", "test_seen", "test_unseen"}) b.splits.push_back(extract_features(m, ds, name, batch_size, seed));
  return b;
}

Prototypes build_prototypes(const FeatureBundle& b, double ridge_lambda) {
  const SplitFeatures& train = nonempty(b, "train", "prototypes");
  Prototypes p;
  p.seen = seen_prototypes<double>(train.phi, train.labels, b.num_seen);
  p.relation = solve_ridge<double>(b.semantics_unseen, b.semantics_seen, ridge_lambda);
  p.unseen = unseen_prototypes<double>(p.relation, p.seen);
  return p;
}

double zsl_mca(const FeatureBundle& b, const Prototypes& p, double beta) {
  const SplitFeatures& s = nonempty(b, "test_unseen", "zsl");
  return mean_class_accuracy(predictions(s, b.num_seen, b.num_unseen, p.unseen, beta, b.num_seen), s.labels);
}

GzslResult gzsl_accuracy(const FeatureBundle& b, const Prototypes& p, double beta) {
  const SplitFeatures& u = nonempty(b, "test_unseen", "gzsl");
  const SplitFeatures& s = nonempty(b, "test_seen", "gzsl");
  const Mat<double> all = joint_prototypes<double>(p.seen, p.unseen);
  const Eigen::Index classes = b.num_seen + b.num_unseen;
  GzslResult r;
  r.a_u = mean_class_accuracy(predictions(u, 0, classes, all, beta, 0), u.labels);
  r.a_s = mean_class_accuracy(predictions(s, 0, classes, all, beta, 0), s.labels);
  r.h = harmonic_mean(r.a_u, r.a_s);
  return r;
}

std::vector<std::vector<Box>> random_boxes(const std::vector<std::vector<Box>>& ground_truth,
                                           const std::vector<std::uint64_t>& keys, int image_size,
                                           std::uint64_t seed) {
  if (keys.size() != ground_truth.size()) throw std::invalid_argument("random_boxes: one key per sample is required");
  std::vector<std::vector<Box>> out(ground_truth.size());
  for (std::size_t i = 0; i < ground_truth.size(); ++i) {
    for (std::size_t part = 0; part < ground_truth[i].size(); ++part) {
      const double side = ground_truth[i][part].side;
      out[i].push_back(random_box(image_size, side, derive_seed(seed, kRandomBoxes, derive_seed(keys[i], part))));
    }
  }
  return out;
}

std::vector<EvalReport> evaluate(const FeatureBundle& b, const ZslDataset* ds, const std::string& mode,
                                 const InferenceConfig& cfg, const std::vector<double>& betas, std::uint64_t seed) {
  cfg.validate();
  std::vector<EvalReport> out;
  if (mode == "detect") {
    if (!ds) throw std::invalid_argument("detect: ground-truth boxes require the dataset");
    std::vector<std::vector<Box>> pred, gt;
    std::vector<std::uint64_t> keys;
    EvalReport r;
    r.mode = mode;
    r.beta = cfg.beta;
    for (const char* name : {"test_seen", "test_unseen"}) {
      const SplitFeatures& s = b.split(name);
      if (s.boxes.size() != s.labels.size()) throw std::invalid_argument("detect: the checkpoint predicts no part boxes (no-parts model)");
      const Split& data = ds->split(name);
      pred.insert(pred.end(), s.boxes.begin(), s.boxes.end());
      gt.insert(gt.end(), data.boxes.begin(), data.boxes.end());
      keys.insert(keys.end(), s.keys.begin(), s.keys.end());
      for (int y : s.labels) ++r.class_counts[y];
    }
    if (gt.empty()) throw std::invalid_argument("detect: test splits are empty");
    r.detection = detection_precision(pred, gt);
    r.random_baseline = detection_precision(random_boxes(gt, keys, ds->config.image_size, seed), gt);
    r.validate();
    out.push_back(std::move(r));
    return out;
  }
  if (mode != "zsl" && mode != "gzsl") throw std::invalid_argument("unknown eval mode '" + mode + "' (zsl, gzsl or detect)");
  const Prototypes p = build_prototypes(b, cfg.ridge_lambda);
  for (double beta : betas) {
    if (beta < 0) throw std::invalid_argument("fusion beta must be >= 0");
    EvalReport r;
    r.mode = mode;
    r.beta = beta;
    if (mode == "zsl") {
      r.mca_unseen = zsl_mca(b, p, beta);
      for (int y : b.split("test_unseen").labels) ++r.class_counts[y];
    } else {
      const GzslResult g = gzsl_accuracy(b, p, beta);
      r.gzsl = g;
      r.mca_unseen = g.a_u;
      r.mca_seen = g.a_s;
      for (const char* name : {"test_seen", "test_unseen"})
        for (int y : b.split(name).labels) ++r.class_counts[y];
    }
    r.validate();
    out.push_back(std::move(r));
  }
  return out;
}

void save_features(const FeatureBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["format"] = "sgma-features";
  j["version"] = kFeatureFormatVersion;
  std::vector<int> seen(static_cast<std::size_t>(b.num_seen)), unseen(static_cast<std::size_t>(b.num_unseen));
  std::iota(seen.begin(), seen.end(), 0);
  std::iota(unseen.begin(), unseen.end(), b.num_seen);
  j["classes"] = {{"seen", seen}, {"unseen", unseen}};
  save_tensor(dir / "semantics_seen.sgmt", to_tensor(b.semantics_seen));
  save_tensor(dir / "semantics_unseen.sgmt", to_tensor(b.semantics_unseen));
  j["semantics"] = {{"seen", "semantics_seen.sgmt"}, {"unseen", "semantics_unseen.sgmt"}};
  auto splits = nlohmann::json::object();
  for (const auto& s : b.splits) {
    const std::string scores = s.split + "_scores.sgmt", phi = s.split + "_features.sgmt";
    save_tensor(dir / scores, to_tensor(s.scores));
    save_tensor(dir / phi, to_tensor(s.phi));
    splits[s.split] = {{"labels", s.labels}, {"scores", scores}, {"features", phi}};
  }
  j["splits"] = splits;
  write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

FeatureBundle load_features(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("feature manifest missing in " + dir.string());
  FeatureBundle b;
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    if (j.at("format") != "sgma-features") throw FormatError("not a feature manifest: " + dir.string());
    if (j.at("version").get<int>() != kFeatureFormatVersion) {
      throw FormatError("feature manifest version " + j.at("version").dump() + " is not supported");
    }
    b.num_seen = static_cast<int>(j.at("classes").at("seen").size());
    b.num_unseen = static_cast<int>(j.at("classes").at("unseen").size());
    b.semantics_seen = to_matrix(load_tensor(dir / j.at("semantics").at("seen").get<std::string>()));
    b.semantics_unseen = to_matrix(load_tensor(dir / j.at("semantics").at("unseen").get<std::string>()));
    for (const auto& [name, s] : j.at("splits").items()) {
      SplitFeatures f;
      f.split = name;
      f.labels = s.at("labels").get<std::vector<int>>();
      f.scores = to_matrix(load_tensor(dir / s.at("scores").get<std::string>()));
      f.phi = to_matrix(load_tensor(dir / s.at("features").get<std::string>()));
      if (f.scores.rows() != static_cast<Eigen::Index>(f.labels.size()) || f.phi.rows() != f.scores.rows() ||
          f.scores.cols() != b.num_seen + b.num_unseen) {
        throw FormatError("feature split " + name + " has inconsistent shapes");
      }
      b.splits.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("feature manifest is malformed: " + std::string(e.what()));
  }
  if (b.semantics_seen.rows() != b.num_seen || b.semantics_unseen.rows() != b.num_unseen) {
    throw FormatError("feature manifest class counts disagree with the semantic matrices");
  }
  return b;
}

}  // namespace sgma
