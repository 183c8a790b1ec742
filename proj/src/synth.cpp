#include "sgma/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "sgma/image_io.hpp"
#include "sgma/serialize.hpp"

namespace sgma {

namespace {

constexpr int kAttributesPerPart = 6;
constexpr int kLayoutAttributes = 2;
constexpr double kJitter = 1.0;      // per-part position jitter, pixels
constexpr double kBackground = 0.15;
constexpr int kSuperSample = 4;

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

// Layout extent relative to the anchor, widened by the jitter.
struct Extent {
  double left, right, top, bottom;
};

Extent layout_extent(const std::vector<PartRecipe>& parts) {
  Extent e{1e300, -1e300, 1e300, -1e300};
  for (const auto& p : parts) {
    e.left = std::min(e.left, p.dx - p.side / 2 - kJitter);
    e.right = std::max(e.right, p.dx + p.side / 2 + kJitter);
    e.top = std::min(e.top, p.dy - p.side / 2 - kJitter);
    e.bottom = std::max(e.bottom, p.dy + p.side / 2 + kJitter);
  }
  return e;
}

void require_fits(const std::vector<PartRecipe>& parts, int image_size, int class_id) {
  const Extent e = layout_extent(parts);
  if (e.right - e.left > image_size || e.bottom - e.top > image_size) {
    throw std::invalid_argument("synth: parts of class " + std::to_string(class_id) + " cannot fit in a " +
                                std::to_string(image_size) + " px image");
  }
}

void render_part(const PartRecipe& p, double cx, double cy, int size, std::span<double> image) {
  const auto s = static_cast<std::size_t>(size);
  const double a = p.side / 2;
  const int c0 = std::max(0, static_cast<int>(std::floor(cx - a))), c1 = std::min(size - 1, static_cast<int>(std::ceil(cx + a)));
  const int r0 = std::max(0, static_cast<int>(std::floor(cy - a))), r1 = std::min(size - 1, static_cast<int>(std::ceil(cy + a)));
  const double color[3] = {p.red, p.green, p.blue};
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      int inside = 0;
      for (int sy = 0; sy < kSuperSample; ++sy)
        for (int sx = 0; sx < kSuperSample; ++sx) {
          const double x = c - 0.5 + (sx + 0.5) / kSuperSample - cx;
          const double y = r - 0.5 + (sy + 0.5) / kSuperSample - cy;
          if (std::pow(std::abs(x) / a, p.exponent) + std::pow(std::abs(y) / a, p.exponent) <= 1.0) ++inside;
        }
      if (inside == 0) continue;
      const double cov = static_cast<double>(inside) / (kSuperSample * kSuperSample);
      const double t = std::clamp((r - cy) / (2 * a) + 0.5, 0.0, 1.0);
      const double shade = 1.0 - p.shading * t;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double& px = image[(ch * s + static_cast<std::size_t>(r)) * s + static_cast<std::size_t>(c)];
        px = px * (1 - cov) + shade * color[ch] * cov;
      }
    }
}

Split make_split(std::size_t n, int image_size, int num_parts) {
  Split s;
  const auto sz = static_cast<std::size_t>(image_size);
  s.images = n > 0 ? Tensor::zeros({n, 3, sz, sz}) : Tensor();
  s.labels.reserve(n);
  s.boxes.reserve(n);
  (void)num_parts;
  return s;
}

nlohmann::json boxes_json(const std::vector<std::vector<Box>>& boxes) {
  auto j = nlohmann::json::array();
  for (const auto& per : boxes) {
    auto row = nlohmann::json::array();
    for (const auto& b : per) row.push_back({b.cx, b.cy, b.side});
    j.push_back(row);
  }
  return j;
}

std::vector<std::vector<Box>> boxes_from_json(const nlohmann::json& j) {
  std::vector<std::vector<Box>> out;
  for (const auto& row : j) {
    std::vector<Box> per;
    for (const auto& b : row) per.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>()});
    out.push_back(per);
  }
  return out;
}

nlohmann::json recipe_json(const PartRecipe& p) {
  return {{"red", p.red}, {"green", p.green}, {"blue", p.blue}, {"side", p.side},
          {"exponent", p.exponent}, {"shading", p.shading}, {"dx", p.dx}, {"dy", p.dy}};
}

const char* const kSplitNames[] = {"train", "val", "test_seen", "test_unseen"};

}  // namespace

void SynthConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("synth: num_classes must be >= 2");
  if (num_unseen < 1 || num_unseen >= num_classes) {
    throw std::invalid_argument("synth: num_unseen must satisfy 1 <= num_unseen < num_classes");
  }
  if (num_classes - num_unseen < 2) throw std::invalid_argument("synth: at least two seen classes are required");
  if (num_parts < 1) throw std::invalid_argument("synth: num_parts must be >= 1");
  if (image_size < 16) throw std::invalid_argument("synth: image_size must be >= 16");
  if (noise_level < 0) throw std::invalid_argument("synth: noise_level must be >= 0");
  if (train_per_class < 1 || val_per_class < 1 || samples_per_class < train_per_class + val_per_class + 1) {
    throw std::invalid_argument("synth: samples_per_class must exceed train_per_class + val_per_class");
  }
}

nlohmann::json to_json(const SynthConfig& c) {
  return {{"num_classes", c.num_classes},         {"num_unseen", c.num_unseen},   {"samples_per_class", c.samples_per_class},
          {"image_size", c.image_size},           {"num_parts", c.num_parts},     {"noise_level", c.noise_level},
          {"seed", c.seed},                       {"train_per_class", c.train_per_class},
          {"val_per_class", c.val_per_class}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "num_classes") c.num_classes = value.get<int>();
    else if (key == "num_unseen") c.num_unseen = value.get<int>();
    else if (key == "samples_per_class") c.samples_per_class = value.get<int>();
    else if (key == "image_size") c.image_size = value.get<int>();
    else if (key == "num_parts") c.num_parts = value.get<int>();
    else if (key == "noise_level") c.noise_level = value.get<double>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "train_per_class") c.train_per_class = value.get<int>();
    else if (key == "val_per_class") c.val_per_class = value.get<int>();
    else throw std::invalid_argument("synth config: unknown key '" + key + "'");
  }
  return c;
}

int attribute_dim(int num_parts) { return num_parts * kAttributesPerPart + kLayoutAttributes; }

std::vector<PartRecipe> recipes_from_attributes(const std::vector<double>& a, int num_parts, int image_size) {
  if (static_cast<int>(a.size()) != attribute_dim(num_parts)) throw std::invalid_argument("synth: attribute size mismatch");
  const double f = image_size / 64.0;
  const double sep = f * (22.0 + 8.0 * a[static_cast<std::size_t>(num_parts * kAttributesPerPart)]);
  const double dv = f * 12.0 * (a[static_cast<std::size_t>(num_parts * kAttributesPerPart + 1)] - 0.5);
  std::vector<PartRecipe> parts;
  for (int i = 0; i < num_parts; ++i) {
    const double* q = a.data() + i * kAttributesPerPart;
    PartRecipe p;
    // Even parts are warm (red-dominant), odd parts cool (blue-dominant).
    const bool warm = i % 2 == 0;
    p.red = warm ? 0.55 + 0.4 * q[0] : 0.05 + 0.35 * q[0];
    p.green = 0.1 + 0.6 * q[1];
    p.blue = warm ? 0.05 + 0.35 * q[2] : 0.55 + 0.4 * q[2];
    p.side = f * (13.0 + 6.0 * q[3]);
    p.exponent = 0.8 + 3.2 * q[4];
    p.shading = 0.5 * q[5];
    p.dx = (i - (num_parts - 1) / 2.0) * sep;
    p.dy = num_parts == 1 ? 0.0 : (i % 2 == 0 ? -dv / 2 : dv / 2);
    parts.push_back(p);
  }
  return parts;
}

std::vector<double> semantic_vector(const std::vector<double>& attributes) {
  std::vector<double> v;
  for (double a : attributes) v.push_back(2.0 * a - 1.0);
  return v;
}

void render_sample(const SynthClassSpec& spec, const SynthConfig& config, std::uint64_t sample_seed,
                   std::span<double> image, std::vector<Box>& boxes) {
  const int s = config.image_size;
  std::mt19937_64 rng(sample_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Extent e = layout_extent(spec.parts);
  // Anchor placement keeps every jittered part inside [-0.5, S - 0.5].
  const double ax = -0.5 - e.left + unit(rng) * (s - (e.right - e.left));
  const double ay = -0.5 - e.top + unit(rng) * (s - (e.bottom - e.top));
  std::fill(image.begin(), image.end(), kBackground);
  boxes.clear();
  for (const auto& p : spec.parts) {
    const double cx = ax + p.dx + kJitter * (2 * unit(rng) - 1);
    const double cy = ay + p.dy + kJitter * (2 * unit(rng) - 1);
    render_part(p, cx, cy, s, image);
    boxes.push_back({cx, cy, p.side});
  }
  if (config.noise_level > 0) {
    std::normal_distribution<double> noise(0.0, config.noise_level);
    for (double& v : image) v = std::clamp(v + noise(rng), 0.0, 1.0);
  }
}

ZslDataset generate(const SynthConfig& config) {
  config.validate();
  const int d = attribute_dim(config.num_parts);
  const int num_seen = config.num_classes - config.num_unseen;
  std::mt19937_64 rng(derive_seed(config.seed, 0xC1A55ull));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 0.02);

  // Thresholds relative to the mean distance of uniform points in [0,1]^d (about sqrt(d/6)).
  const double scale = std::sqrt(d / 6.0);
  std::vector<std::vector<double>> attrs;
  for (int attempt = 0; static_cast<int>(attrs.size()) < num_seen; ++attempt) {
    if (attempt > 100000) throw std::runtime_error("synth: could not place distinct seen classes");
    std::vector<double> a(static_cast<std::size_t>(d));
    for (auto& x : a) x = unit(rng);
    bool ok = true;
    for (const auto& o : attrs) ok = ok && dist(a, o) >= 0.5 * scale;
    if (ok) attrs.push_back(a);
  }
  std::uniform_int_distribution<int> pick(0, num_seen - 1);
  for (int attempt = 0; static_cast<int>(attrs.size()) < config.num_classes; ++attempt) {
    if (attempt > 100000) throw std::runtime_error("synth: could not place distinct unseen classes");
    const int i = pick(rng);
    int j = pick(rng);
    if (i == j) continue;
    const double w = 0.3 + 0.4 * unit(rng);
    std::vector<double> a(static_cast<std::size_t>(d));
    for (std::size_t k = 0; k < a.size(); ++k) {
      a[k] = std::clamp(w * attrs[static_cast<std::size_t>(i)][k] + (1 - w) * attrs[static_cast<std::size_t>(j)][k] + jitter(rng),
                        0.0, 1.0);
    }
    bool ok = true;
    for (std::size_t k = 0; k < attrs.size(); ++k) {
      const double limit = static_cast<int>(k) < num_seen ? 0.25 * scale : 0.5 * scale;
      ok = ok && dist(a, attrs[k]) >= limit;
    }
    if (ok) attrs.push_back(a);
  }

  ZslDataset ds;
  ds.config = config;
  for (int c = 0; c < config.num_classes; ++c) {
    SynthClassSpec spec;
    spec.id = c;
    spec.unseen = c >= num_seen;
    spec.attributes = attrs[static_cast<std::size_t>(c)];
    spec.parts = recipes_from_attributes(spec.attributes, config.num_parts, config.image_size);
    require_fits(spec.parts, config.image_size, c);
    ds.classes.push_back(spec);
  }

  const auto per = static_cast<std::size_t>(config.samples_per_class);
  const auto n_train = static_cast<std::size_t>(config.train_per_class), n_val = static_cast<std::size_t>(config.val_per_class);
  const auto ns = static_cast<std::size_t>(num_seen), nu = static_cast<std::size_t>(config.num_unseen);
  ds.train = make_split(ns * n_train, config.image_size, config.num_parts);
  ds.val = make_split(ns * n_val, config.image_size, config.num_parts);
  ds.test_seen = make_split(ns * (per - n_train - n_val), config.image_size, config.num_parts);
  ds.test_unseen = make_split(nu * per, config.image_size, config.num_parts);

  const std::size_t plane = 3 * static_cast<std::size_t>(config.image_size) * static_cast<std::size_t>(config.image_size);
  std::vector<Box> boxes;
  for (const auto& spec : ds.classes) {
    for (std::size_t k = 0; k < per; ++k) {
      Split* target = &ds.test_unseen;
      if (!spec.unseen) target = k < n_train ? &ds.train : (k < n_train + n_val ? &ds.val : &ds.test_seen);
      const std::size_t idx = target->labels.size();
      render_sample(spec, config, derive_seed(config.seed, static_cast<std::uint64_t>(spec.id) + 1, k),
                    target->images.mutable_data().subspan(idx * plane, plane), boxes);
      target->labels.push_back(spec.id);
      target->boxes.push_back(boxes);
    }
  }

  std::vector<double> sem_s, sem_u;
  for (const auto& spec : ds.classes) {
    const auto v = semantic_vector(spec.attributes);
    (spec.unseen ? sem_u : sem_s).insert((spec.unseen ? sem_u : sem_s).end(), v.begin(), v.end());
  }
  ds.semantics_seen = Tensor::from({ns, static_cast<std::size_t>(d)}, std::move(sem_s));
  ds.semantics_unseen = Tensor::from({nu, static_cast<std::size_t>(d)}, std::move(sem_u));
  return ds;
}

const Split& ZslDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test_seen") return test_seen;
  if (name == "test_unseen") return test_unseen;
  throw std::invalid_argument("unknown split '" + name + "'");
}

void save_dataset(const ZslDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = "sgma-dataset";
  m["version"] = kDatasetFormatVersion;
  m["config"] = to_json(ds.config);
  m["num_seen"] = ds.num_seen();
  m["num_unseen"] = ds.num_unseen();
  m["attribute_dim"] = attribute_dim(ds.config.num_parts);
  auto classes = nlohmann::json::array();
  for (const auto& c : ds.classes) {
    auto parts = nlohmann::json::array();
    for (const auto& p : c.parts) parts.push_back(recipe_json(p));
    classes.push_back({{"id", c.id}, {"unseen", c.unseen}, {"attributes", c.attributes}, {"parts", parts}});
  }
  m["classes"] = classes;
  save_tensor(dir / "semantics_seen.sgmt", ds.semantics_seen);
  save_tensor(dir / "semantics_unseen.sgmt", ds.semantics_unseen);
  m["semantics"] = {{"seen", "semantics_seen.sgmt"}, {"unseen", "semantics_unseen.sgmt"}};
  for (const char* name : kSplitNames) {
    const Split& s = ds.split(name);
    if (s.size() == 0) throw std::invalid_argument(std::string("save_dataset: split '") + name + "' is empty");
    const std::string file = std::string("images_") + name + ".sgmt";
    save_tensor(dir / file, s.images);
    m["splits"][name] = {{"images", file}, {"labels", s.labels}, {"boxes", boxes_json(s.boxes)}};
  }
  write_file_atomic(dir / "manifest.json", m.dump(1) + "\n");
}

ZslDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("dataset manifest not found in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt dataset manifest: ") + e.what());
  }
  if (m.value("format", "") != "sgma-dataset") throw FormatError("not a dataset manifest: " + dir.string());
  if (m.value("version", -1) != kDatasetFormatVersion) {
    throw FormatError("unsupported dataset version " + m.value("version", nlohmann::json()).dump());
  }
  ZslDataset ds;
  try {
    ds.config = synth_config_from_json(m.at("config"));
    for (const auto& c : m.at("classes")) {
      SynthClassSpec spec;
      spec.id = c.at("id").get<int>();
      spec.unseen = c.at("unseen").get<bool>();
      spec.attributes = c.at("attributes").get<std::vector<double>>();
      for (const auto& p : c.at("parts")) {
        PartRecipe r;
        r.red = p.at("red");
        r.green = p.at("green");
        r.blue = p.at("blue");
        r.side = p.at("side");
        r.exponent = p.at("exponent");
        r.shading = p.at("shading");
        r.dx = p.at("dx");
        r.dy = p.at("dy");
        spec.parts.push_back(r);
      }
      ds.classes.push_back(spec);
    }
    ds.semantics_seen = load_tensor(dir / m.at("semantics").at("seen").get<std::string>());
    ds.semantics_unseen = load_tensor(dir / m.at("semantics").at("unseen").get<std::string>());
    for (const char* name : kSplitNames) {
      const auto& js = m.at("splits").at(name);
      Split s;
      s.images = load_tensor(dir / js.at("images").get<std::string>());
      s.labels = js.at("labels").get<std::vector<int>>();
      s.boxes = boxes_from_json(js.at("boxes"));
      if (s.images.rank() != 4 || s.images.dim(0) != s.labels.size() || s.boxes.size() != s.labels.size()) {
        throw FormatError(std::string("dataset split '") + name + "' is inconsistent");
      }
      if (std::string(name) == "train") ds.train = s;
      else if (std::string(name) == "val") ds.val = s;
      else if (std::string(name) == "test_seen") ds.test_seen = s;
      else ds.test_unseen = s;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt dataset manifest: ") + e.what());
  }
  if (static_cast<int>(ds.classes.size()) != ds.config.num_classes ||
      static_cast<int>(ds.semantics_seen.dim(0)) != ds.num_seen() ||
      static_cast<int>(ds.semantics_unseen.dim(0)) != ds.num_unseen()) {
    throw FormatError("dataset manifest class counts disagree with the semantic matrices");
  }
  return ds;
}

void export_images(const Split& split, const std::filesystem::path& dir, std::size_t n) {
  std::filesystem::create_directories(dir);
  n = std::min(n, split.size());
  const std::size_t h = split.images.dim(2), w = split.images.dim(3);
  for (std::size_t i = 0; i < n; ++i) {
    write_ppm(dir / ("image" + std::to_string(i) + "_class" + std::to_string(split.labels[i]) + ".ppm"),
              split.images.data().subspan(i * 3 * h * w, 3 * h * w), h, w);
  }
}

Box random_box(int image_size, double side, std::uint64_t seed) {
  if (side <= 0 || side > image_size) throw std::invalid_argument("random_box: side must lie in (0, image_size]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double lo = -0.5 + side / 2, span = image_size - side;
  return {lo + span * unit(rng), lo + span * unit(rng), side};
}

}  // namespace sgma
