#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace sama {

/// Integer label mask [H,W], row-major.
struct MaskView {
  std::span<const std::uint8_t> labels;
  std::size_t height = 0, width = 0;
};

struct Score {
  double value = 0.0;
  bool both_empty = false;  // class absent from both masks; value is 1 by convention
};

/// 2|G n P| / (|G| + |P|) for one class.
Score dsc(const MaskView& g, const MaskView& p, std::uint8_t cls);

/// Region pixels with a 4-neighbour outside the region; the image border
/// counts as outside. Returns row-major pixel indices in ascending order.
std::vector<std::size_t> boundary(std::span<const std::uint8_t> region, std::size_t height,
                                  std::size_t width);

/// Exact squared Euclidean distance from every pixel to the nearest nonzero
/// seed pixel (infinity when there are no seeds).
std::vector<double> squared_distance_transform(std::span<const std::uint8_t> seeds,
                                               std::size_t height, std::size_t width);

/// Fraction of both boundaries lying within tau of the other boundary.
Score nsd(const MaskView& g, const MaskView& p, std::uint8_t cls, double tau = 1.0);

struct ClassScore {
  std::uint8_t cls = 0;
  Score dsc, nsd;
};

/// Scores for classes 1..num_classes-1.
std::vector<ClassScore> score_foreground(const MaskView& g, const MaskView& p,
                                         std::size_t num_classes, double tau = 1.0);

/// Mean over classes whose value is not the both-empty convention; 1 when
/// every class is absent from both masks.
double mean_dsc(const std::vector<ClassScore>& scores);
double mean_nsd(const std::vector<ClassScore>& scores);

}  // namespace sama
