#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgma/box.hpp"
#include "sgma/seed.hpp"
#include "sgma/tensor.hpp"

namespace sgma {

// Image coordinates follow the cropping convention: pixel (r, c) is centred at
// (x = c, y = r), so the image covers [-0.5, S - 0.5] on both axes.

struct SynthConfig {
  int num_classes = 20;
  int num_unseen = 5;
  int samples_per_class = 60;
  int image_size = 64;
  int num_parts = 2;
  double noise_level = 0.05;
  std::uint64_t seed = 0;
  int train_per_class = 40;  // seen classes only; the next val_per_class go to val, the rest to test-seen
  int val_per_class = 10;

  void validate() const;
};

nlohmann::json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);

/// Superellipse |x/a|^p + |y/a|^p <= 1 with a = side/2.
/// p < 1 gives star-like shapes, p = 1 a diamond, p = 2 a disk, large p a square.
/// The colour darkens top to bottom by the factor (1 - shading * t), t in [0, 1].
struct PartRecipe {
  double red = 0, green = 0, blue = 0;
  double side = 16;      // extent in pixels; equals the ground-truth box side
  double exponent = 2;
  double shading = 0;
  double dx = 0, dy = 0; // offset of the part centre from the sample anchor
};

struct SynthClassSpec {
  int id = 0;
  bool unseen = false;
  std::vector<double> attributes;  // in [0,1]
  std::vector<PartRecipe> parts;
};

/// Attribute layout: 6 per part (red, green, blue, size, roundness, shading)
/// followed by 2 layout entries (separation, vertical offset).
int attribute_dim(int num_parts);

/// Deterministic, linear map from attributes to part recipes.
std::vector<PartRecipe> recipes_from_attributes(const std::vector<double>& attributes, int num_parts, int image_size);

struct Split {
  Tensor images;                        // [N,3,S,S]
  std::vector<int> labels;              // class ids; seen classes are 0..num_seen-1, unseen follow
  std::vector<std::vector<Box>> boxes;  // [N][num_parts]

  std::size_t size() const { return labels.size(); }
};

struct ZslDataset {
  SynthConfig config;
  std::vector<SynthClassSpec> classes;
  Split train, val, test_seen, test_unseen;
  Tensor semantics_seen;    // [num_seen, d]
  Tensor semantics_unseen;  // [num_unseen, d]

  int num_seen() const { return config.num_classes - config.num_unseen; }
  int num_unseen() const { return config.num_unseen; }
  const Split& split(const std::string& name) const;
};

/// Semantic vector of a class: attributes mapped to [-1, 1].
std::vector<double> semantic_vector(const std::vector<double>& attributes);

ZslDataset generate(const SynthConfig& config);

/// Renders one sample of a class; `sample_seed` fully determines the result.
void render_sample(const SynthClassSpec& spec, const SynthConfig& config, std::uint64_t sample_seed,
                   std::span<double> image, std::vector<Box>& boxes);

inline constexpr int kDatasetFormatVersion = 1;

void save_dataset(const ZslDataset& ds, const std::filesystem::path& dir);
ZslDataset load_dataset(const std::filesystem::path& dir);

/// Writes the first n images of a split as PPM files.
void export_images(const Split& split, const std::filesystem::path& dir, std::size_t n);

/// Square of the given side placed uniformly inside the image.
Box random_box(int image_size, double side, std::uint64_t seed);

}  // namespace sgma
