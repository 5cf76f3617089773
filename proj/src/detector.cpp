#include "cfdr/detector.hpp"

#include <cmath>
#include <stdexcept>

#include "cfdr/rng.hpp"
#include "json.hpp"

namespace cfdr {

using nlohmann::json;

std::string ReferenceProfile::to_json() const {
  json j;
  j["l_c"] = l_c;
  j["sigma_c"] = sigma_c;
  j["n_samples"] = n_samples;
  j["aug_hash"] = aug_hash;
  j["loss_hash"] = loss_hash;
  return j.dump();
}

ReferenceProfile ReferenceProfile::from_json(const std::string& js) {
  json j = json::parse(js);
  ReferenceProfile p;
  p.l_c = j.at("l_c").get<double>();
  p.sigma_c = j.at("sigma_c").get<double>();
  p.n_samples = j.at("n_samples").get<int>();
  p.aug_hash = j.value("aug_hash", 0ull);
  p.loss_hash = j.value("loss_hash", 0ull);
  return p;
}

std::string DetectionVerdict::to_json() const {
  json j;
  j["l_d"] = l_d;
  j["l_c"] = l_c;
  j["delta"] = delta;
  j["attacked"] = attacked;
  j["batches_used"] = batches_used;
  return j.dump();
}

SampleResult sample_loss(const Model& model, const Tensor& batch_images, const DetectorConfig& cfg,
                         int64_t batch_index) {
  if (!batch_images.defined() || batch_images.shape().size() != 4 || batch_images.dim(0) < 2)
    throw std::invalid_argument("sample_loss: batch too small (need at least 2 images)");
  NoGradGuard ng;
  ContrastiveBatch views = augment_pair(batch_images, cfg.aug, batch_index);
  Tensor h_a = model.encode(views.view_a);
  Tensor h_b = model.encode(views.view_b);
  SampleResult out;
  out.loss = contrastive_loss_value(model.project(h_a), model.project(h_b), cfg.loss);
  out.logits = model.classify(h_a);
  return out;
}

double draw_and_sample(const Model& model, const Dataset& data, const DetectorConfig& cfg,
                       uint64_t seed, const char* stream, int64_t sample_index) {
  if (data.size() < cfg.batch)
    throw std::invalid_argument("detector: dataset of " + std::to_string(data.size()) +
                                " images is smaller than one batch of " +
                                std::to_string(cfg.batch));
  Rng rng = substream(seed, stream, static_cast<uint64_t>(sample_index));
  // batch = first `batch` entries of a partial Fisher-Yates pass
  std::vector<int64_t> pool(data.size());
  for (int64_t i = 0; i < data.size(); ++i) pool[i] = i;
  std::vector<int64_t> idx(cfg.batch);
  for (int i = 0; i < cfg.batch; ++i) {
    int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(data.size() - i)));
    std::swap(pool[i], pool[j]);
    idx[i] = pool[i];
  }
  return sample_loss(model, data.to_tensor(idx), cfg, sample_index).loss;
}

ReferenceProfile build_reference(const Model& model, const Dataset& unlabeled_data, int n_samples,
                                 const DetectorConfig& cfg, uint64_t seed,
                                 std::vector<double>* samples_out) {
  if (n_samples < 1) throw std::invalid_argument("build_reference: n_samples must be >= 1");
  std::vector<double> losses(n_samples);
  for (int i = 0; i < n_samples; ++i)
    losses[i] = draw_and_sample(model, unlabeled_data, cfg, seed, "reference", i);
  if (samples_out) *samples_out = losses;

  double mean = 0.0;
  for (double v : losses) mean += v;
  mean /= static_cast<double>(n_samples);
  double var = 0.0;
  if (n_samples > 1) {
    for (double v : losses) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n_samples - 1);
  }

  ReferenceProfile p;
  p.l_c = mean;
  p.sigma_c = std::sqrt(var);
  p.n_samples = n_samples;
  p.aug_hash = cfg.aug.hash();
  p.loss_hash = cfg.loss.hash();
  return p;
}

double default_delta(const ReferenceProfile& profile) {
  return std::max(3.0 * profile.sigma_c, 0.05 * profile.l_c);
}

DetectionVerdict detect(const ReferenceProfile& profile, const Model& model, const Dataset& data,
                        double delta, int n_batches, const DetectorConfig& cfg, uint64_t seed) {
  if (delta <= 0.0) throw std::invalid_argument("detect: delta must be > 0");
  if (n_batches < 1) throw std::invalid_argument("detect: n_batches must be >= 1");

  double sum = 0.0;
  for (int i = 0; i < n_batches; ++i)
    sum += draw_and_sample(model, data, cfg, seed, "detect", i);

  DetectionVerdict v;
  v.l_d = sum / static_cast<double>(n_batches);
  v.l_c = profile.l_c;
  v.delta = delta;
  v.batches_used = n_batches;
  v.attacked = std::abs(v.l_d - v.l_c) > delta;
  return v;
}

}  // namespace cfdr
