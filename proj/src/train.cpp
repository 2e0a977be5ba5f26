#include "sama/train.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "sama/loss.hpp"
#include "sama/metrics.hpp"

namespace sama {

Tensor<float> batch_images(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw std::invalid_argument("batch: empty");
  const std::size_t H = batch[0]->height, W = batch[0]->width;
  std::vector<float> v;
  v.reserve(batch.size() * H * W);
  for (const Sample* s : batch) {
    if (s->height != H || s->width != W || s->image.size() != H * W)
      throw ShapeError("batch: samples differ in size");
    v.insert(v.end(), s->image.begin(), s->image.end());
  }
  return Tensor<float>::from({batch.size(), 1, H, W}, std::move(v));
}

std::vector<std::uint8_t> batch_labels(const std::vector<const Sample*>& batch) {
  std::vector<std::uint8_t> v;
  for (const Sample* s : batch) v.insert(v.end(), s->mask.begin(), s->mask.end());
  return v;
}

template <typename T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  std::vector<std::uint8_t> out(B * HW);
  const T* d = logits.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < HW; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (d[(b * K + k) * HW + p] > d[(b * K + best) * HW + p]) best = k;
      out[b * HW + p] = static_cast<std::uint8_t>(best);
    }
  return out;
}

template std::vector<std::uint8_t> argmax_labels(const Tensor<float>&);
template std::vector<std::uint8_t> argmax_labels(const Tensor<double>&);

std::vector<std::uint8_t> predict(const SamaUNet<float>& model, const Sample& sample) {
  NoGradGuard<float> guard;
  const auto heads = model.forward(batch_images({&sample}));
  return argmax_labels(heads[0]);
}

namespace {

class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    shuffle();
  }

  std::size_t next() {
    if (pos_ == order_.size()) {
      shuffle();
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.index(i)]);
  }

  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<EpochLog> train(SamaUNet<float>& model, const std::vector<Sample>& data,
                            const TrainOptions& opts,
                            const std::function<void(const EpochLog&)>& on_epoch) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (opts.batch_size == 0 || opts.iters_per_epoch == 0)
    throw std::invalid_argument("train: batch size and iterations per epoch must be positive");
  const ModelConfig& cfg = model.config();
  for (const auto& s : data)
    for (auto l : s.mask)
      if (l >= cfg.num_classes)
        throw std::invalid_argument("train: mask label " + std::to_string(l) + " >= num_classes " +
                                    std::to_string(cfg.num_classes));
  const auto strides = cfg.head_strides();
  const auto weights = cfg.ds_weights();
  AdamW<float> opt(model.parameters(), opts.adam);
  BatchSampler sampler(data.size(), opts.seed);
  const std::size_t total = opts.epochs * opts.iters_per_epoch;
  std::vector<EpochLog> log;
  std::size_t step = 0;
  for (std::size_t e = 0; e < opts.epochs; ++e) {
    EpochLog entry;
    entry.epoch = e + 1;
    double dsc_sum = 0.0;
    std::size_t dsc_n = 0;
    for (std::size_t it = 0; it < opts.iters_per_epoch; ++it, ++step) {
      std::vector<const Sample*> batch;
      for (std::size_t b = 0; b < opts.batch_size; ++b) batch.push_back(&data[sampler.next()]);
      const auto images = batch_images(batch);
      const auto labels = batch_labels(batch);
      const std::size_t H = batch[0]->height, W = batch[0]->width;

      const double lr = cosine_lr(step, total, opts.adam.lr);
      opt.set_lr(lr);
      Tape<float> tape;
      const auto heads = model.forward(images);
      const auto loss = seg_loss(heads, labels, H, W, strides, weights, opts.dice_smooth,
                                 opts.batch_dice);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite loss " << value << " at epoch " << e + 1 << " iteration " << it + 1
            << " (step " << step << ", lr " << lr << ")";
        throw std::runtime_error(msg.str());
      }
      tape.backward(loss);
      opt.step();
      opt.zero_grad();

      const auto pred = argmax_labels(heads[0]);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::span<const std::uint8_t> p(pred.data() + b * H * W, H * W);
        const auto scores = score_foreground({batch[b]->mask, H, W}, {p, H, W}, cfg.num_classes);
        dsc_sum += mean_dsc(scores);
        ++dsc_n;
      }
      entry.loss += value;
      entry.lr = lr;
    }
    entry.loss /= static_cast<double>(opts.iters_per_epoch);
    entry.dsc = dsc_sum / static_cast<double>(dsc_n);
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return log;
}

void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "epoch,lr,loss,dsc\n";
  for (const auto& e : log) out << e.epoch << ',' << e.lr << ',' << e.loss << ',' << e.dsc << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace sama
