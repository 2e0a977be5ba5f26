#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sama {

/// One single-channel image with its label mask, both row-major [H,W].
struct Sample {
  std::vector<float> image;
  std::vector<std::uint8_t> mask;
  std::size_t height = 0, width = 0;
};

struct SyntheticSpec {
  std::size_t count = 8;
  std::size_t height = 64, width = 64;
  std::size_t num_classes = 3;
  std::size_t min_shapes = 1, max_shapes = 2;  // per foreground class
  double noise = 0.05;
  std::uint64_t seed = 0;
};

/// Random ellipses and rectangles, one intensity level per class, drawn with
/// soft edges over a dark background plus Gaussian noise. Redraws an image
/// until every foreground class covers at least a few pixels.
std::vector<Sample> make_synthetic(const SyntheticSpec& spec);

/// img_XXXX.stn (f32 [1,H,W]) and mask_XXXX.stn (u8 [H,W]).
void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

/// Reads mask_XXXX.stn files only, in index order.
std::vector<Sample> read_masks(const std::filesystem::path& dir);

}  // namespace sama
