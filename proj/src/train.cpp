#include "sgma/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>

#include "sgma/json_fields.hpp"
#include "sgma/metrics.hpp"
#include "sgma/ops.hpp"
#include "sgma/seed.hpp"

namespace sgma {

namespace {

enum Stream : std::uint64_t { kStageA = 101, kKmeans, kStageB, kEpoch, kBackbone, kStreams };

Tensor concat_rows(const std::vector<Tensor>& parts) {
  Shape shape = parts.front().shape();
  std::vector<double> v;
  shape[0] = 0;
  for (const Tensor& t : parts) {
    shape[0] += t.dim(0);
    v.insert(v.end(), t.data().begin(), t.data().end());
  }
  return Tensor::from(std::move(shape), std::move(v));
}

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// Draws batches by walking reshuffled passes over [0, n).
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(iota_rows(n)), rng_(seed) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t size) {
    std::vector<std::size_t> out;
    while (out.size() < size) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

// Runs `fn` over consecutive batches of rows [0, n) without recording gradients.
template <typename Fn>
void for_each_batch(std::size_t n, int batch_size, Fn&& fn) {
  NoGradGuard guard;
  for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, begin + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> rows(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    fn(rows);
  }
}

bool has_attention(const SgmaModel& m) { return m.config.use_parts && !m.config.random_parts; }

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (backbone_pretrain_epochs < 0 || stream_pretrain_epochs < 0 || stage_a_steps < 0 || stage_b_steps < 0 || stage_c_epochs < 0) throw ConfigError("train: stage lengths must be >= 0");
  if (kmeans_samples < 1) throw ConfigError("train: kmeans_samples must be >= 1");
  if (!(pretrain_lr > 0) || !(sgd.lr > 0)) throw ConfigError("train: learning rates must be > 0");
  if (sgd.momentum < 0 || sgd.momentum >= 1) throw ConfigError("train: momentum must lie in [0,1)");
  if (sgd.weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
  if (sgd.clip_norm < 0) throw ConfigError("train: clip_norm must be >= 0");
  if (!(lr_floor > 0) || lr_floor > sgd.lr) throw ConfigError("train: lr_floor must lie in (0, lr]");
  if (plateau_patience < 1) throw ConfigError("train: plateau_patience must be >= 1");
  if (plateau_threshold < 0) throw ConfigError("train: plateau_threshold must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"backbone_pretrain_epochs", c.backbone_pretrain_epochs},
          {"stage_a_steps", c.stage_a_steps},
          {"stage_b_steps", c.stage_b_steps},
          {"stream_pretrain_epochs", c.stream_pretrain_epochs},
          {"stage_c_epochs", c.stage_c_epochs},
          {"kmeans_samples", c.kmeans_samples},
          {"pretrain_lr", c.pretrain_lr},
          {"lr", c.sgd.lr},
          {"momentum", c.sgd.momentum},
          {"weight_decay", c.sgd.weight_decay},
          {"clip_norm", c.sgd.clip_norm},
          {"lr_floor", c.lr_floor},
          {"plateau_patience", c.plateau_patience},
          {"plateau_threshold", c.plateau_threshold},
          {"freeze_attention", c.freeze_attention},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  JsonFields f(j, "train");
  f.read("batch_size", c.batch_size);
  f.read("backbone_pretrain_epochs", c.backbone_pretrain_epochs);
  f.read("stage_a_steps", c.stage_a_steps);
  f.read("stage_b_steps", c.stage_b_steps);
  f.read("stream_pretrain_epochs", c.stream_pretrain_epochs);
  f.read("stage_c_epochs", c.stage_c_epochs);
  f.read("kmeans_samples", c.kmeans_samples);
  f.read("pretrain_lr", c.pretrain_lr);
  f.read("lr", c.sgd.lr);
  f.read("momentum", c.sgd.momentum);
  f.read("weight_decay", c.sgd.weight_decay);
  f.read("clip_norm", c.sgd.clip_norm);
  f.read("lr_floor", c.lr_floor);
  f.read("plateau_patience", c.plateau_patience);
  f.read("plateau_threshold", c.plateau_threshold);
  f.read("freeze_attention", c.freeze_attention);
  f.read("seed", c.seed);
  f.finish();
  return c;
}

nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["l_ma"] = r.l_ma ? nlohmann::json(*r.l_ma) : nlohmann::json();
  j["l_cls"] = r.l_cls;
  j["l_cct"] = r.l_cct;
  j["overlap"] = r.overlap ? nlohmann::json(*r.overlap) : nlohmann::json();
  j["val_mca"] = r.val_mca;
  j["total"] = r.total;
  j["lr"] = r.lr;
  return j;
}

Tensor gather(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t row = t.numel() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = rows.size();
  std::vector<double> v;
  v.reserve(rows.size() * row);
  for (std::size_t r : rows) {
    if (r >= t.dim(0)) throw std::out_of_range("gather: row " + std::to_string(r) + " out of range");
    const auto src = t.data().subspan(r * row, row);
    v.insert(v.end(), src.begin(), src.end());
  }
  return Tensor::from(std::move(shape), std::move(v));
}

std::uint64_t sample_key(const std::string& split, std::size_t index) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a over the split name
  for (unsigned char ch : split) h = (h ^ ch) * 1099511628211ull;
  return derive_seed(h, index);
}

std::vector<std::uint64_t> sample_keys(const std::string& split, std::span<const std::size_t> rows) {
  std::vector<std::uint64_t> out;
  for (std::size_t r : rows) out.push_back(sample_key(split, r));
  return out;
}

double pretrain_attention_backbone(SgmaModel& m, const ZslDataset& ds, const TrainConfig& cfg) {
  if (!has_attention(m) || cfg.backbone_pretrain_epochs == 0) return 0.0;
  const std::size_t c = static_cast<std::size_t>(m.attention_backbone.config().feature_dim());
  const std::size_t d = ds.semantics_seen.dim(1);
  std::mt19937_64 init(derive_seed(cfg.seed, kBackbone));
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(c)));
  std::vector<double> w(c * d);
  for (auto& v : w) v = normal(init);
  const Tensor embed = Tensor::parameter({c, d}, std::move(w));
  std::vector<Tensor> params = parameter_tensors(m.attention_backbone.parameters("attn.backbone"));
  params.push_back(embed);
  SgdOptimizer opt(params, cfg.sgd);
  const std::size_t n = ds.train.size();
  double last = 0.0;
  for (int epoch = 1; epoch <= cfg.backbone_pretrain_epochs; ++epoch) {
    std::vector<std::size_t> order = iota_rows(n);
    std::mt19937_64 rng(derive_seed(cfg.seed, kBackbone, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::span<const std::size_t> rows(order.data() + begin, std::min(n - begin, static_cast<std::size_t>(cfg.batch_size)));
      std::vector<int> labels;
      for (std::size_t r : rows) labels.push_back(ds.train.labels[r]);
      Tape tape;
      const Tensor theta = global_avg_pool(attention_features(m, gather(ds.train.images, rows)));
      const Tensor loss = embedding_softmax_loss(compatibility(theta, embed, ds.semantics_seen), labels);
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      sum += loss.item() * static_cast<double>(rows.size());
    }
    last = sum / static_cast<double>(n);
  }
  return last;
}

StageSummary stage_a(SgmaModel& m, const ZslDataset& ds, const TrainConfig& cfg) {
  StageSummary summary;
  if (!has_attention(m)) return summary;
  const std::size_t n = ds.train.size();
  std::vector<std::size_t> order = iota_rows(n);
  std::mt19937_64 rng(derive_seed(cfg.seed, kStageA));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(n, static_cast<std::size_t>(cfg.kmeans_samples)));

  ChannelClusters clusters;
  std::vector<Tensor> descriptors;
  {
    NoGradGuard guard;
    const Tensor features = attention_features(m, gather(ds.train.images, order));
    clusters = init_channel_clusters(channel_peak_positions(features), m.config.num_parts(), derive_seed(cfg.seed, kKmeans));
  }
  for_each_batch(n, cfg.batch_size, [&](const std::vector<std::size_t>& rows) {
    descriptors.push_back(channel_descriptor(attention_features(m, gather(ds.train.images, rows))));
  });
  const Tensor all_desc = concat_rows(descriptors);
  summary.channel_labels = clusters.labels;

  std::vector<Tensor> params;
  for (const auto& head : m.heads) params.insert(params.end(), {head.w1, head.w2});
  SgdOptimizer opt(params, {cfg.pretrain_lr, 0.9, 0.0});
  BatchSampler sampler(n, derive_seed(cfg.seed, kStageA, 1));
  const std::size_t channels = all_desc.dim(1);
  for (int step = 0; step < cfg.stage_a_steps; ++step) {
    const auto rows = sampler.next(static_cast<std::size_t>(cfg.batch_size));
    const Tensor desc = gather(all_desc, rows);
    Tape tape;
    std::vector<Tensor> terms;
    for (std::size_t i = 0; i < m.heads.size(); ++i) {
      std::vector<double> target;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        target.insert(target.end(), clusters.init_targets[i].begin(), clusters.init_targets[i].end());
      }
      terms.push_back(binary_cross_entropy(channel_attention(m.heads[i], desc), Tensor::from({rows.size(), channels}, std::move(target))));
    }
    const Tensor loss = add_n(terms);
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    summary.stage_a_loss = loss.item();
  }
  return summary;
}

double stage_b(SgmaModel& m, const ZslDataset& ds, const TrainConfig& cfg) {
  if (!has_attention(m)) return 0.0;
  const std::size_t n = ds.train.size();
  const std::size_t parts = m.heads.size();
  std::vector<std::vector<Tensor>> chunks(parts);
  for_each_batch(n, cfg.batch_size, [&](const std::vector<std::size_t>& rows) {
    const ForwardPass pass = forward(m, gather(ds.train.images, rows));
    for (std::size_t i = 0; i < parts; ++i) chunks[i].push_back(pass.maps[i]);
  });
  std::vector<Tensor> maps;
  std::vector<std::vector<Box>> pseudo;
  for (std::size_t i = 0; i < parts; ++i) {
    maps.push_back(concat_rows(chunks[i]));
    pseudo.push_back(pseudo_boxes(maps.back(), m.config.image_size));
  }

  SgdOptimizer opt(parameter_tensors(m.crop_parameters()), {cfg.pretrain_lr, 0.9, 0.0});
  BatchSampler sampler(n, derive_seed(cfg.seed, kStageB));
  double last = 0.0;
  for (int step = 0; step < cfg.stage_b_steps; ++step) {
    const auto rows = sampler.next(static_cast<std::size_t>(cfg.batch_size));
    Tape tape;
    std::vector<Tensor> terms;
    for (std::size_t i = 0; i < parts; ++i) {
      std::vector<Box> target;
      for (std::size_t r : rows) target.push_back(pseudo[i][r]);
      terms.push_back(pretrain_crop_loss(crop_params(m.crop_nets[i], gather(maps[i], rows)), target, m.config.image_size));
    }
    const Tensor loss = scale(add_n(terms), 1.0 / static_cast<double>(parts));
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    last = loss.item();
  }
  return last;
}

std::vector<std::vector<Box>> train_pseudo_boxes(const SgmaModel& m, const ZslDataset& ds, int batch_size) {
  std::vector<std::vector<Box>> out(m.heads.size());
  for_each_batch(ds.train.size(), batch_size, [&](const std::vector<std::size_t>& rows) {
    const ForwardPass pass = forward(m, gather(ds.train.images, rows));
    for (std::size_t i = 0; i < pass.maps.size(); ++i) {
      const auto boxes = pseudo_boxes(pass.maps[i], m.config.image_size);
      out[i].insert(out[i].end(), boxes.begin(), boxes.end());
    }
  });
  return out;
}

double pretrain_streams(SgmaModel& m, const ZslDataset& ds, const TrainConfig& cfg) {
  if (cfg.stream_pretrain_epochs == 0) return 0.0;
  const auto pseudo = has_attention(m) ? train_pseudo_boxes(m, ds, cfg.batch_size) : std::vector<std::vector<Box>>{};
  ParameterList named;
  for (std::size_t i = 0; i < m.streams.size(); ++i) {
    const auto p = m.streams[i].parameters("stream" + std::to_string(i));
    named.insert(named.end(), p.begin(), p.end());
  }
  for (const Tensor& e : m.embeddings) named.push_back({"", e});
  named.push_back({"", m.centers});
  SgdOptimizer opt(parameter_tensors(named), cfg.sgd);
  const std::size_t n = ds.train.size();
  double last = 0.0;
  for (int epoch = 1; epoch <= cfg.stream_pretrain_epochs; ++epoch) {
    std::vector<std::size_t> order = iota_rows(n);
    std::mt19937_64 rng(derive_seed(cfg.seed, kStreams, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::span<const std::size_t> rows(order.data() + begin, std::min(n - begin, static_cast<std::size_t>(cfg.batch_size)));
      std::vector<int> labels;
      for (std::size_t r : rows) labels.push_back(ds.train.labels[r]);
      const auto keys = sample_keys("train", rows);
      std::vector<Tensor> crops;
      for (const auto& part : pseudo) {
        std::vector<CropParams> p;
        for (std::size_t r : rows) p.push_back({part[r].cx, part[r].cy, part[r].side});
        crops.push_back(crop_params_tensor(p));
      }
      ForwardOptions fo{true, keys, cfg.seed};
      if (!crops.empty()) fo.fixed_crops = &crops;
      Tape tape;
      const ForwardPass pass = forward(m, gather(ds.train.images, rows), fo);
      const LossTerms terms = compute_losses(m, pass, ds.semantics_seen, labels);
      opt.zero_grad();
      tape.backward(terms.total);
      opt.step();
      sum += terms.total.item() * static_cast<double>(rows.size());
    }
    last = sum / static_cast<double>(n);
  }
  return last;
}

std::pair<double, std::optional<double>> validate_epoch(const SgmaModel& m, const ZslDataset& ds, int batch_size) {
  std::vector<int> preds;
  std::vector<std::vector<Tensor>> chunks(m.heads.size());
  for_each_batch(ds.val.size(), batch_size, [&](const std::vector<std::size_t>& rows) {
    const ForwardPass pass = forward(m, gather(ds.val.images, rows), {false, sample_keys("val", rows), 0});
    const Tensor s = fused_scores(m, pass, ds.semantics_seen);
    const std::size_t c = s.dim(1);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto row = s.data().subspan(r * c, c);
      preds.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
    for (std::size_t i = 0; i < pass.maps.size(); ++i) chunks[i].push_back(pass.maps[i]);
  });
  std::optional<double> overlap;
  if (chunks.size() >= 2) {
    std::vector<Tensor> maps;
    for (const auto& c : chunks) maps.push_back(concat_rows(c));
    overlap = attention_overlap(maps);
  }
  return {mean_class_accuracy(preds, ds.val.labels), overlap};
}

std::map<std::string, double> gradient_norms(const SgmaModel& m, const ZslDataset& ds, const TrainConfig& cfg,
                                             std::size_t batch) {
  const auto rows = iota_rows(std::min(batch, ds.train.size()));
  std::vector<int> labels;
  for (std::size_t r : rows) labels.push_back(ds.train.labels[r]);
  const auto keys = sample_keys("train", rows);
  Tape tape;
  const ForwardPass pass = forward(m, gather(ds.train.images, rows), {cfg.freeze_attention, keys, cfg.seed});
  const LossTerms terms = compute_losses(m, pass, ds.semantics_seen, labels);
  ParameterList params = m.parameters();
  for (auto& p : params) p.value.zero_grad();
  tape.backward(terms.total);
  std::map<std::string, double> out;
  for (auto& p : params) {
    double acc = 0;
    for (double g : p.value.grad()) acc += g * g;
    out[p.name] = std::sqrt(acc);
    p.value.zero_grad();
  }
  return out;
}

TrainResult train(const ZslDataset& ds, const ModelConfig& model_config, const TrainConfig& cfg,
                  const TrainOutputs& outputs) {
  cfg.validate();
  TrainResult result;
  ModelConfig mc = model_config;
  std::tie(mc.input_mean, mc.input_std) = channel_statistics(ds.train.images);
  result.model = init_model(mc, ds.num_seen(), static_cast<int>(ds.semantics_seen.dim(1)), cfg.seed);
  SgmaModel& m = result.model;
  auto say = [&](const std::string& line) {
    if (outputs.progress) *outputs.progress << line << std::endl;
  };
  auto checkpoint = [&] {
    if (outputs.checkpoint_dir) save_model(*outputs.checkpoint_dir, m);
  };
  std::ofstream log;
  if (outputs.log_path) {
    log.open(*outputs.log_path, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open log file " + outputs.log_path->string());
  }

  try {
    const double backbone_loss = pretrain_attention_backbone(m, ds, cfg);
    if (has_attention(m) && cfg.backbone_pretrain_epochs > 0) say("backbone pretraining: softmax " + std::to_string(backbone_loss));
    result.stages = stage_a(m, ds, cfg);
    result.stages.backbone_loss = backbone_loss;
    if (has_attention(m)) say("stage A: head BCE " + std::to_string(result.stages.stage_a_loss));
    result.stages.stage_b_loss = stage_b(m, ds, cfg);
    if (has_attention(m)) say("stage B: pseudo-box MSE " + std::to_string(result.stages.stage_b_loss));
    result.stages.stream_loss = pretrain_streams(m, ds, cfg);
    if (cfg.stream_pretrain_epochs > 0) say("stream pretraining: loss " + std::to_string(result.stages.stream_loss));
  } catch (const NonFiniteError& e) {
    throw TrainingAborted(std::string("non-finite value during pretraining: ") + e.what());
  }
  checkpoint();

  SgdOptimizer opt(parameter_tensors(m.parameters()), cfg.sgd);
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  const std::size_t n = ds.train.size();
  for (int epoch = 1; epoch <= cfg.stage_c_epochs; ++epoch) {
    std::vector<std::size_t> order = iota_rows(n);
    std::mt19937_64 rng(derive_seed(cfg.seed, kEpoch, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double s_ma = 0, s_cls = 0, s_cct = 0, s_total = 0;
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::span<const std::size_t> rows(order.data() + begin, std::min(n - begin, static_cast<std::size_t>(cfg.batch_size)));
      std::vector<int> labels;
      for (std::size_t r : rows) labels.push_back(ds.train.labels[r]);
      const auto keys = sample_keys("train", rows);
      try {
        Tape tape;
        const ForwardPass pass = forward(m, gather(ds.train.images, rows), {cfg.freeze_attention, keys, cfg.seed});
        const LossTerms terms = compute_losses(m, pass, ds.semantics_seen, labels);
        detail::require_finite(terms.total, "training loss");
        opt.zero_grad();
        tape.backward(terms.total);
        opt.step();
        const double w = static_cast<double>(rows.size());
        if (terms.l_ma.defined()) s_ma += w * terms.l_ma.item();
        s_cls += w * terms.l_cls.item();
        s_cct += w * terms.l_cct.item();
        s_total += w * terms.total.item();
      } catch (const NonFiniteError& e) {
        std::string where = "epoch " + std::to_string(epoch) + ", batch starting at " + std::to_string(begin);
        if (outputs.checkpoint_dir) where += "; last good checkpoint kept in " + outputs.checkpoint_dir->string();
        throw TrainingAborted("non-finite training state at " + where + ": " + e.what());
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    const double dn = static_cast<double>(n);
    if (has_attention(m)) rec.l_ma = s_ma / dn;
    rec.l_cls = s_cls / dn;
    rec.l_cct = s_cct / dn;
    rec.total = s_total / dn;
    rec.lr = opt.lr();
    std::tie(rec.val_mca, rec.overlap) = validate_epoch(m, ds, cfg.batch_size);
    result.log.push_back(rec);
    const nlohmann::json j = to_json(rec);
    if (log) log << j.dump() << "\n" << std::flush;
    say(j.dump());
    checkpoint();

    if (epoch == 1 || rec.total < best * (1.0 - cfg.plateau_threshold)) {
      best = rec.total;
      since_best = 0;
    } else if (++since_best >= cfg.plateau_patience) {
      opt.set_lr(std::max(cfg.lr_floor, opt.lr() * 0.1));
      since_best = 0;
    }
  }
  return result;
}

}  // namespace sgma
