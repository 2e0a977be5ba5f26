#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "sama/data.hpp"
#include "sama/model.hpp"

namespace sama {

struct TrainOptions {
  std::size_t epochs = 200;
  std::size_t iters_per_epoch = 8;
  std::size_t batch_size = 2;
  AdamWOptions adam;
  std::uint64_t seed = 0;  // batch order
  double dice_smooth = 1.0;
  bool batch_dice = false;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;    // learning rate of the epoch's last step
  double loss = 0.0;  // mean training loss over the epoch's steps
  double dsc = 0.0;   // mean foreground DSC of the training forward passes
};

/// Stacks samples into an image batch [B,1,H,W] and labels [B*H*W].
Tensor<float> batch_images(const std::vector<const Sample*>& batch);
std::vector<std::uint8_t> batch_labels(const std::vector<const Sample*>& batch);

/// Argmax over classes of logits [B,K,H,W] -> labels [B*H*W].
template <typename T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& logits);

/// Predicted label map of one sample from the finest head.
std::vector<std::uint8_t> predict(const SamaUNet<float>& model, const Sample& sample);

/// AdamW with a per-step cosine schedule over epochs * iters_per_epoch steps.
/// Batches cycle through reshuffled passes over the dataset. Throws
/// std::runtime_error on a non-finite loss.
std::vector<EpochLog> train(SamaUNet<float>& model, const std::vector<Sample>& data,
                            const TrainOptions& opts,
                            const std::function<void(const EpochLog&)>& on_epoch = {});

void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace sama
