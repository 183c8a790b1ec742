#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sgma/backbone.hpp"
#include "sgma/box.hpp"
#include "sgma/tensor.hpp"

namespace sgma {

// Coordinates are in pixels of the attention-stream image: origin top-left,
// x along columns, y along rows, pixel (r, c) sits at (x = c, y = r).

/// Square crop: center (t_x, t_y) and side t_s.
struct CropParams {
  double tx = 0, ty = 0, ts = 0;
};

enum class CropMode { window, full_masked };

/// Two FC layers mapping a flattened attention map to (t_x, t_y, t_s).
///
/// Raw outputs pass through a sigmoid; centers scale to [0, S] and the side to
/// [S/8, S/2] for image size S.
struct CropNet {
  Tensor w1, b1;  // [hidden, H*W], [hidden]
  Tensor w2, b2;  // [3, hidden], [3]
  int map_side = 8;
  int image_size = 64;

  ParameterList parameters(const std::string& prefix) const;
  double min_side() const { return image_size / 8.0; }
  double max_side() const { return image_size / 2.0; }
};

CropNet init_crop_net(int map_side, int hidden, int image_size, std::uint64_t seed);

/// Sets the output bias so that a zero hidden activation yields `normalized`
/// = (t_x/S, t_y/S, t_s/S).
void set_crop_output_bias(CropNet& net, const std::array<double, 3>& normalized);

/// [N,H,W] maps -> [N,3] pixel-unit (t_x, t_y, t_s).
Tensor crop_params(const CropNet& net, const Tensor& maps);

CropParams crop_params_row(const Tensor& params, std::size_t row);
Tensor crop_params_tensor(const std::vector<CropParams>& params);

/// 1-D boxcar profile sigmoid(k(u + s/2)) - sigmoid(k(u - s/2)) at offset u from the center.
double boxcar_profile(double offset, double side, double k);

/// V(x,y) = V_x(x) V_y(y) evaluated at integer pixel coordinates; [N,3] -> [N,H,W].
Tensor boxcar_mask(const Tensor& params, double k, int height, int width);

/// image [N,C,H,W] times mask [N,H,W], broadcast over channels.
Tensor mask_image(const Tensor& images, const Tensor& mask);

/// Bilinear samples of the window [t_x -+ t_s/2] x [t_y -+ t_s/2] on an
/// out x out grid at cell centers; zero outside the image. Differentiable in
/// both the images and the params.
Tensor sample_window(const Tensor& images, const Tensor& params, int out_size);

/// x (.) V followed by window resampling (or whole-image resize in full_masked mode).
Tensor apply_crop(const Tensor& images, const Tensor& mask, const Tensor& params, int out_size,
                  CropMode mode = CropMode::window);

/// Square of side S/4 centered on the map peak, scaled with pixel-center mapping.
Box pseudo_box(const Tensor& maps, std::size_t sample, int image_size);
std::vector<Box> pseudo_boxes(const Tensor& maps, int image_size);

/// MSE over (t_x, t_y, t_s) in units of the image size.
Tensor pretrain_crop_loss(const Tensor& params, const std::vector<Box>& pseudo, int image_size);

Box to_box(const CropParams& p);

/// Writes part crops as `sample{idx}_part{i}.ppm` and appends one
/// "sample part t_x t_y t_s" line per crop to `boxes.txt`.
void export_crops(const std::filesystem::path& dir, const std::vector<Tensor>& part_images,
                  const std::vector<Tensor>& params, std::size_t first_index = 0);

}  // namespace sgma
