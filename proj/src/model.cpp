#include "sgma/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "sgma/checkpoint.hpp"
#include "sgma/json_fields.hpp"
#include "sgma/ops.hpp"
#include "sgma/serialize.hpp"
#include "sgma/seed.hpp"
#include "sgma/synth.hpp"

namespace sgma {

namespace {

enum Component : std::uint64_t { kAttentionBackbone = 1, kHead, kCrop, kStream, kEmbedding, kCenters };

Tensor gaussian_parameter(Shape shape, double stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

std::string crop_mode_name(CropMode m) { return m == CropMode::window ? "window" : "full_masked"; }
std::string negatives_name(CctNegatives n) { return n == CctNegatives::hardest ? "hardest" : "sum"; }

}  // namespace

void ModelConfig::validate() const {
  attention.validate();
  if (part_size < 8) throw ConfigError("model: part_size must be >= 8");
  if (crop_hidden < 1) throw ConfigError("model: crop_hidden must be >= 1");
  if (!(boxcar_k > 0)) throw ConfigError("model: boxcar_k must be > 0");
  if (random_parts && !use_parts) throw ConfigError("model: random_parts requires use_parts");
  loss.validate();
  if (input_mean.size() != 3 || input_std.size() != 3) throw ConfigError("model: input_mean and input_std need 3 entries");
  for (double v : input_std) {
    if (!(v > 0)) throw ConfigError("model: input_std entries must be > 0");
  }
  BackboneConfig att{image_size, 3, attention_widths};
  BackboneConfig str{part_size, 3, stream_widths};
  try {
    att.validate(attention.num_parts);
    str.validate(1);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},
          {"part_size", c.part_size},
          {"attention_widths", c.attention_widths},
          {"stream_widths", c.stream_widths},
          {"num_parts", c.attention.num_parts},
          {"lambda", c.attention.lambda},
          {"diversity_margin", c.attention.margin},
          {"sigma", c.attention.sigma},
          {"head_hidden", c.attention.hidden},
          {"mean_over_channels", c.attention.mean_over_channels},
          {"crop_hidden", c.crop_hidden},
          {"boxcar_k", c.boxcar_k},
          {"crop_mode", crop_mode_name(c.crop_mode)},
          {"shared_backbone", c.shared_backbone},
          {"use_parts", c.use_parts},
          {"random_parts", c.random_parts},
          {"use_ma_loss", c.use_ma_loss},
          {"alpha1", c.loss.alpha1},
          {"alpha2", c.loss.alpha2},
          {"cct_margin", c.loss.cct_margin},
          {"cct_negatives", negatives_name(c.cct_negatives)},
          {"per_stream_cct", c.per_stream_cct},
          {"attention_pre_relu", c.attention_pre_relu},
          {"input_mean", c.input_mean},
          {"input_std", c.input_std}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  JsonFields f(j, "model");
  f.read("image_size", c.image_size);
  f.read("part_size", c.part_size);
  f.read("attention_widths", c.attention_widths);
  f.read("stream_widths", c.stream_widths);
  f.read("num_parts", c.attention.num_parts);
  f.read("lambda", c.attention.lambda);
  f.read("diversity_margin", c.attention.margin);
  f.read("sigma", c.attention.sigma);
  f.read("head_hidden", c.attention.hidden);
  f.read("mean_over_channels", c.attention.mean_over_channels);
  f.read("crop_hidden", c.crop_hidden);
  f.read("boxcar_k", c.boxcar_k);
  std::string mode = crop_mode_name(c.crop_mode);
  f.read("crop_mode", mode);
  if (mode == "window") c.crop_mode = CropMode::window;
  else if (mode == "full_masked") c.crop_mode = CropMode::full_masked;
  else throw ConfigError("model.crop_mode must be window or full_masked, got '" + mode + "'");
  f.read("shared_backbone", c.shared_backbone);
  f.read("use_parts", c.use_parts);
  f.read("random_parts", c.random_parts);
  f.read("use_ma_loss", c.use_ma_loss);
  f.read("alpha1", c.loss.alpha1);
  f.read("alpha2", c.loss.alpha2);
  f.read("cct_margin", c.loss.cct_margin);
  std::string neg = negatives_name(c.cct_negatives);
  f.read("cct_negatives", neg);
  if (neg == "hardest") c.cct_negatives = CctNegatives::hardest;
  else if (neg == "sum") c.cct_negatives = CctNegatives::sum;
  else throw ConfigError("model.cct_negatives must be hardest or sum, got '" + neg + "'");
  f.read("per_stream_cct", c.per_stream_cct);
  f.read("attention_pre_relu", c.attention_pre_relu);
  f.read("input_mean", c.input_mean);
  f.read("input_std", c.input_std);
  f.finish();
  return c;
}

std::pair<std::vector<double>, std::vector<double>> channel_statistics(const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("channel_statistics: expected [N,3,H,W], got " + shape_string(images.shape()));
  const std::size_t n = images.dim(0), plane = images.dim(2) * images.dim(3);
  std::vector<double> mean(3, 0.0), sd(3, 0.0);
  const auto x = images.data();
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double sum = 0, sq = 0;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = x[(s * 3 + ch) * plane + k];
        sum += v;
        sq += v * v;
      }
    }
    const double count = static_cast<double>(n * plane);
    mean[ch] = sum / count;
    sd[ch] = std::sqrt(std::max(sq / count - mean[ch] * mean[ch], 1e-12));
  }
  return {mean, sd};
}

Tensor standardize(const Tensor& images, const ModelConfig& config) {
  if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("standardize: expected [N,3,H,W], got " + shape_string(images.shape()));
  const std::size_t n = images.dim(0), plane = images.dim(2) * images.dim(3);
  std::vector<double> v(images.data().begin(), images.data().end());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t k = 0; k < plane; ++k) {
        double& x = v[(s * 3 + ch) * plane + k];
        x = (x - config.input_mean[ch]) / config.input_std[ch];
      }
  return Tensor::from(images.shape(), std::move(v));
}

bool apply_ablation(const std::string& name, ModelConfig& c) {
  if (name == "no-ma-loss") c.use_ma_loss = false;
  else if (name == "no-parts") c.use_parts = false;
  else if (name == "random-parts") c.random_parts = true;
  else if (name == "loss=softmax") c.loss.alpha2 = 0.0;
  else if (name == "loss=cct") c.loss.alpha1 = 0.0;
  else if (name == "loss=combined") c.loss.alpha1 = c.loss.alpha2 = 1.0;
  else if (name == "shared-backbone") c.shared_backbone = true;
  else return false;
  return true;
}

ParameterList SgmaModel::attention_parameters() const {
  ParameterList out;
  if (!config.use_parts || config.random_parts) return out;
  out = attention_backbone.parameters("attn.backbone");
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const auto p = heads[i].parameters("attn.head" + std::to_string(i));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

ParameterList SgmaModel::crop_parameters() const {
  ParameterList out;
  if (!config.use_parts || config.random_parts) return out;
  for (std::size_t i = 0; i < crop_nets.size(); ++i) {
    const auto p = crop_nets[i].parameters("crop" + std::to_string(i));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

ParameterList SgmaModel::parameters() const {
  ParameterList out = attention_parameters();
  const auto crop = crop_parameters();
  out.insert(out.end(), crop.begin(), crop.end());
  for (std::size_t i = 0; i < streams.size(); ++i) {
    const auto p = streams[i].parameters("stream" + std::to_string(i));
    out.insert(out.end(), p.begin(), p.end());
  }
  for (std::size_t i = 0; i < embeddings.size(); ++i) out.push_back({"embed" + std::to_string(i), embeddings[i]});
  out.push_back({"centers", centers});
  return out;
}

SgmaModel init_model(const ModelConfig& config, int num_seen, int semantic_dim, std::uint64_t seed) {
  config.validate();
  if (num_seen < 2 || semantic_dim < 1) throw ConfigError("model: need >= 2 seen classes and a semantic dimension >= 1");
  SgmaModel m;
  m.config = config;
  m.num_seen = num_seen;
  m.semantic_dim = semantic_dim;
  const int streams = config.num_streams();
  if (config.use_parts && !config.random_parts) {
    BackboneConfig att{config.image_size, 3, config.attention_widths};
    m.attention_backbone = init_backbone(att, derive_seed(seed, kAttentionBackbone));
    const int c = att.feature_dim(), map_side = att.final_extent();
    for (int i = 0; i < config.num_parts(); ++i) {
      m.heads.push_back(init_attention_head(c, config.attention.hidden_for(c), i, derive_seed(seed, kHead, std::uint64_t(i))));
      m.crop_nets.push_back(init_crop_net(map_side, config.crop_hidden, config.image_size, derive_seed(seed, kCrop, std::uint64_t(i))));
    }
  }
  BackboneConfig str{config.part_size, 3, config.stream_widths};
  const int backbones = config.shared_backbone ? 1 : streams;
  for (int i = 0; i < backbones; ++i) m.streams.push_back(init_backbone(str, derive_seed(seed, kStream, std::uint64_t(i))));
  const auto f = static_cast<std::size_t>(str.feature_dim()), d = static_cast<std::size_t>(semantic_dim);
  for (int i = 0; i < streams; ++i) {
    m.embeddings.push_back(gaussian_parameter({f, d}, 1.0 / std::sqrt(double(f)), derive_seed(seed, kEmbedding, std::uint64_t(i))));
  }
  m.centers = gaussian_parameter({static_cast<std::size_t>(num_seen), d}, 1.0, derive_seed(seed, kCenters));
  return m;
}

nlohmann::json model_manifest(const SgmaModel& m) {
  return {{"model", to_json(m.config)}, {"num_seen", m.num_seen}, {"semantic_dim", m.semantic_dim}};
}

void save_model(const std::filesystem::path& dir, const SgmaModel& m) { save_checkpoint(dir, m.parameters(), model_manifest(m)); }

SgmaModel load_model(const std::filesystem::path& dir) {
  const Checkpoint ck = load_checkpoint(dir);
  ModelConfig config;
  int num_seen = 0, semantic_dim = 0;
  try {
    config = model_config_from_json(ck.config.at("model"));
    num_seen = ck.config.at("num_seen").get<int>();
    semantic_dim = ck.config.at("semantic_dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint config is incomplete: " + std::string(e.what()));
  }
  SgmaModel m = init_model(config, num_seen, semantic_dim, 0);
  for (auto& p : m.parameters()) {
    const Tensor& stored = ck.at(p.name);
    if (stored.shape() != p.value.shape()) throw FormatError("checkpoint tensor " + p.name + " has the wrong shape");
    std::ranges::copy(stored.data(), p.value.mutable_data().begin());
  }
  return m;
}

std::vector<Tensor> random_part_params(int image_size, int num_parts, std::span<const std::uint64_t> keys,
                                       std::uint64_t seed) {
  std::vector<Tensor> out;
  for (int p = 0; p < num_parts; ++p) {
    std::vector<CropParams> rows;
    for (std::uint64_t key : keys) {
      const Box b = random_box(image_size, image_size / 4.0, derive_seed(seed, key, std::uint64_t(p)));
      rows.push_back({b.cx, b.cy, b.side});
    }
    out.push_back(crop_params_tensor(rows));
  }
  return out;
}

Tensor attention_features(const SgmaModel& m, const Tensor& images) {
  return m.attention_backbone.forward_features(standardize(images, m.config), !m.config.attention_pre_relu);
}

ForwardPass forward(const SgmaModel& m, const Tensor& raw, const ForwardOptions& opts) {
  const ModelConfig& c = m.config;
  const Tensor images = standardize(raw, c);
  ForwardPass pass;
  const int p = c.part_size;
  pass.inputs.push_back(c.image_size == p ? images : bilinear_resize(images, p, p));
  if (c.use_parts) {
    if (opts.fixed_crops) {
      if (opts.fixed_crops->size() != static_cast<std::size_t>(c.num_parts())) throw std::invalid_argument("forward: one fixed crop tensor per part is required");
      pass.crop_params = *opts.fixed_crops;
    } else if (c.random_parts) {
      if (opts.keys.size() != images.dim(0)) throw std::invalid_argument("forward: random parts need one key per sample");
      pass.crop_params = random_part_params(c.image_size, c.num_parts(), opts.keys, opts.seed);
    } else {
      pass.features = m.attention_backbone.forward_features(images, !c.attention_pre_relu);
      const Tensor desc = channel_descriptor(pass.features);
      for (const auto& head : m.heads) {
        pass.maps.push_back(attention_map(pass.features, channel_attention(head, desc), c.attention.mean_over_channels));
      }
      for (std::size_t i = 0; i < m.crop_nets.size(); ++i) {
        pass.crop_params.push_back(crop_params(m.crop_nets[i], opts.detach_maps ? pass.maps[i].detach() : pass.maps[i]));
      }
    }
    for (const Tensor& params : pass.crop_params) {
      const Tensor mask = boxcar_mask(params, c.boxcar_k, c.image_size, c.image_size);
      pass.inputs.push_back(apply_crop(images, mask, params, p, c.crop_mode));
    }
  }
  for (std::size_t i = 0; i < pass.inputs.size(); ++i) {
    pass.theta.push_back(m.stream(int(i)).forward_vector(pass.inputs[i]));
    pass.phi.push_back(map_features(pass.theta.back(), m.embeddings[i]));
  }
  return pass;
}

Tensor fused_scores(const SgmaModel& m, const ForwardPass& pass, const Tensor& semantics) {
  std::vector<Tensor> per_stream;
  for (std::size_t i = 0; i < pass.theta.size(); ++i) per_stream.push_back(compatibility(pass.theta[i], m.embeddings[i], semantics));
  return fuse_scores(per_stream);
}

Tensor mean_phi(const ForwardPass& pass) {
  if (pass.phi.size() == 1) return pass.phi.front();
  return scale(add_n(pass.phi), 1.0 / static_cast<double>(pass.phi.size()));
}

std::vector<double> concat_phi(const ForwardPass& pass) {
  const std::size_t n = pass.phi.front().dim(0), d = pass.phi.front().dim(1), s = pass.phi.size();
  std::vector<double> out(n * s * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t k = 0; k < d; ++k) out[(r * s + i) * d + k] = pass.phi[i][r * d + k];
  return out;
}

LossTerms compute_losses(const SgmaModel& m, const ForwardPass& pass, const Tensor& seen_semantics,
                         std::span<const int> labels) {
  const ModelConfig& c = m.config;
  LossTerms t;
  if (!pass.maps.empty()) t.l_ma = multi_attention_loss(pass.maps, c.attention);
  t.l_cls = embedding_softmax_loss(fused_scores(m, pass, seen_semantics), labels);
  if (c.per_stream_cct) {
    std::vector<Tensor> terms;
    for (const Tensor& phi : pass.phi) terms.push_back(class_center_triplet_loss(phi, m.centers, labels, c.loss.cct_margin, c.cct_negatives));
    t.l_cct = add_n(terms);
  } else {
    t.l_cct = class_center_triplet_loss(mean_phi(pass), m.centers, labels, c.loss.cct_margin, c.cct_negatives);
  }
  const Tensor none;
  t.total = joint_objective(c.use_ma_loss ? t.l_ma : none, c.loss.alpha1 > 0 ? t.l_cls : none,
                            c.loss.alpha2 > 0 ? t.l_cct : none, c.loss);
  return t;
}

}  // namespace sgma
