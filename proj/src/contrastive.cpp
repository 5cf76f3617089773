#include "cfdr/contrastive.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include "cfdr/rng.hpp"

namespace cfdr {

void AugmentationConfig::validate() const {
  if (!(crop_lo > 0.0f) || crop_lo > crop_hi || crop_hi > 1.0f)
    throw std::invalid_argument("augment: crop range must satisfy 0 < lo <= hi <= 1");
  if (flip_prob < 0.0f || flip_prob > 1.0f || grayscale_prob < 0.0f || grayscale_prob > 1.0f)
    throw std::invalid_argument("augment: probabilities must be in [0,1]");
  if (jitter_strength < 0.0f) throw std::invalid_argument("augment: jitter_strength must be >= 0");
}

uint64_t AugmentationConfig::hash() const {
  uint64_t h = fnv1a64("augmentation");
  auto mixf = [&h](float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    h = mix_u64(h, bits);
  };
  mixf(crop_lo);
  mixf(crop_hi);
  mixf(flip_prob);
  mixf(jitter_strength);
  mixf(grayscale_prob);
  h = mix_u64(h, seed);
  return h;
}

uint64_t LossConfig::hash() const {
  uint64_t h = fnv1a64("loss");
  uint32_t bits;
  std::memcpy(&bits, &temperature, sizeof(bits));
  h = mix_u64(h, bits);
  h = mix_u64(h, reduction == Reduction::sum ? 0u : 1u);
  h = mix_u64(h, exclude_positive_in_denominator ? 1u : 0u);
  return h;
}

namespace {

// one augmented view of a single [3,H,W] image, written into dst
void augment_view(const float* src, float* dst, int H, int W, const AugmentationConfig& cfg,
                  Rng& rng) {
  // fixed draw layout per view: crop fraction, offsets, flip, jitter x2, gray
  float frac = rng.uniform(cfg.crop_lo, cfg.crop_hi);
  int side = std::clamp(static_cast<int>(std::lround(std::sqrt(frac) * H)), 1, H);
  int oy = static_cast<int>(rng.below(static_cast<uint64_t>(H - side + 1)));
  int ox = static_cast<int>(rng.below(static_cast<uint64_t>(W - side + 1)));
  bool flip = rng.next_double() < cfg.flip_prob;
  float fb = 1.0f + rng.uniform(-cfg.jitter_strength, cfg.jitter_strength);
  float fc = 1.0f + rng.uniform(-cfg.jitter_strength, cfg.jitter_strength);
  bool gray = rng.next_double() < cfg.grayscale_prob;

  if (side == H && side == W && oy == 0 && ox == 0) {
    std::copy(src, src + 3 * H * W, dst);  // full crop: keep input bit-exact
  } else {
    // bilinear resample of the crop back to HxW
    float sy_scale = static_cast<float>(side) / static_cast<float>(H);
    float sx_scale = static_cast<float>(side) / static_cast<float>(W);
    for (int c = 0; c < 3; ++c) {
      const float* sc = src + c * H * W;
      float* dc = dst + c * H * W;
      for (int y = 0; y < H; ++y) {
        float sy = (static_cast<float>(y) + 0.5f) * sy_scale - 0.5f;
        int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, side - 1);
        int y1 = std::min(y0 + 1, side - 1);
        float wy = std::clamp(sy - static_cast<float>(y0), 0.0f, 1.0f);
        for (int x = 0; x < W; ++x) {
          float sx = (static_cast<float>(x) + 0.5f) * sx_scale - 0.5f;
          int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, side - 1);
          int x1 = std::min(x0 + 1, side - 1);
          float wx = std::clamp(sx - static_cast<float>(x0), 0.0f, 1.0f);
          const float* r0 = sc + (oy + y0) * W + ox;
          const float* r1 = sc + (oy + y1) * W + ox;
          float top = r0[x0] * (1.0f - wx) + r0[x1] * wx;
          float bot = r1[x0] * (1.0f - wx) + r1[x1] * wx;
          dc[y * W + x] = top * (1.0f - wy) + bot * wy;
        }
      }
    }
  }

  if (flip) {
    for (int c = 0; c < 3; ++c) {
      float* dc = dst + c * H * W;
      for (int y = 0; y < H; ++y) {
        float* row = dc + y * W;
        for (int x = 0; x < W / 2; ++x) std::swap(row[x], row[W - 1 - x]);
      }
    }
  }

  if (cfg.jitter_strength > 0.0f) {
    double mean = 0.0;
    for (int i = 0; i < 3 * H * W; ++i) mean += dst[i];
    float mu = static_cast<float>(mean / (3.0 * H * W));
    for (int i = 0; i < 3 * H * W; ++i) {
      float v = ((dst[i] - mu) * fc + mu) * fb;
      dst[i] = std::clamp(v, 0.0f, 1.0f);
    }
  }

  if (gray) {
    int hw = H * W;
    for (int i = 0; i < hw; ++i) {
      float luma = 0.299f * dst[i] + 0.587f * dst[hw + i] + 0.114f * dst[2 * hw + i];
      dst[i] = luma;
      dst[hw + i] = luma;
      dst[2 * hw + i] = luma;
    }
  }
}

}  // namespace

ContrastiveBatch augment_pair(const Tensor& images, const AugmentationConfig& cfg,
                              int64_t batch_index) {
  cfg.validate();
  if (!images.defined() || images.shape().size() != 4 || images.dim(0) < 1)
    throw std::invalid_argument("augment_pair: empty batch");
  for (float v : images.data())
    if (!(v >= 0.0f && v <= 1.0f))
      throw std::invalid_argument("augment_pair: pixel values must be in [0,1]");

  int64_t N = images.dim(0);
  int H = static_cast<int>(images.dim(2));
  int W = static_cast<int>(images.dim(3));
  int64_t img_len = 3LL * H * W;

  std::vector<float> va(static_cast<size_t>(N * img_len));
  std::vector<float> vb(static_cast<size_t>(N * img_len));
  Rng rng = substream(cfg.seed, "augment", static_cast<uint64_t>(batch_index));
  for (int64_t n = 0; n < N; ++n) {
    const float* src = images.data().data() + n * img_len;
    augment_view(src, va.data() + n * img_len, H, W, cfg, rng);
    augment_view(src, vb.data() + n * img_len, H, W, cfg, rng);
  }

  ContrastiveBatch out;
  out.n = N;
  out.view_a = Tensor::from_data(images.shape(), std::move(va));
  out.view_b = Tensor::from_data(images.shape(), std::move(vb));
  return out;
}

float cosine_sim(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size())
    throw std::invalid_argument("cosine_sim: length mismatch " + std::to_string(u.size()) +
                                " vs " + std::to_string(v.size()));
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<double>(u[i]) * v[i];
    nu += static_cast<double>(u[i]) * u[i];
    nv += static_cast<double>(v[i]) * v[i];
  }
  if (nu == 0.0 || nv == 0.0) return 0.0f;
  double s = dot / (std::sqrt(nu) * std::sqrt(nv));
  return static_cast<float>(std::clamp(s, -1.0, 1.0));
}

namespace {

// rows l2-normalized in double; zero rows stay zero (their similarity is 0)
std::vector<double> normalize_rows(const std::vector<float>& z, int64_t n, int64_t d,
                                   std::vector<double>& norms) {
  std::vector<double> out(static_cast<size_t>(n * d), 0.0);
  norms.assign(n, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double nsq = 0.0;
    for (int64_t j = 0; j < d; ++j) nsq += static_cast<double>(z[i * d + j]) * z[i * d + j];
    double norm = std::sqrt(nsq);
    norms[i] = norm;
    if (norm == 0.0) continue;
    for (int64_t j = 0; j < d; ++j) out[i * d + j] = z[i * d + j] / norm;
  }
  return out;
}

// gradient w.r.t. the unnormalized rows from the gradient w.r.t. the
// normalized rows: (g - y (y.g)) / |x|
void normalize_backward(const std::vector<double>& g_normed, const std::vector<double>& normed,
                        const std::vector<double>& norms, int64_t n, int64_t d,
                        std::vector<float>& grad_out) {
  for (int64_t i = 0; i < n; ++i) {
    if (norms[i] == 0.0) continue;
    double dot = 0.0;
    for (int64_t j = 0; j < d; ++j) dot += g_normed[i * d + j] * normed[i * d + j];
    for (int64_t j = 0; j < d; ++j)
      grad_out[i * d + j] += static_cast<float>(
          (g_normed[i * d + j] - dot * normed[i * d + j]) / norms[i]);
  }
}

}  // namespace

namespace {

struct LossInternals {
  double total = 0.0;
  std::vector<double> na, nb, norms_a, norms_b;
  // per-entry dL/d(similarity); g_saa/g_sbb are used by the standard variant
  std::vector<double> g_sab, g_saa, g_sbb;
};

LossInternals compute_contrastive(const std::vector<float>& za_data,
                                  const std::vector<float>& zb_data, int64_t n, int64_t d,
                                  const LossConfig& cfg, bool want_grads);

}  // namespace

void validate_loss_args(const Tensor& z_a, const Tensor& z_b, const LossConfig& cfg) {
  if (cfg.temperature <= 0.0f) throw std::invalid_argument("contrastive_loss: temperature must be > 0");
  if (z_a.shape().size() != 2 || z_a.shape() != z_b.shape())
    throw std::invalid_argument("contrastive_loss shape mismatch: " + shape_str(z_a.shape()) +
                                " vs " + shape_str(z_b.shape()));
  if (z_a.dim(0) < 2)
    throw std::invalid_argument("contrastive_loss: batch of " + std::to_string(z_a.dim(0)) +
                                " has no negative pairs (need N >= 2)");
}

double contrastive_loss_value(const Tensor& z_a, const Tensor& z_b, const LossConfig& cfg) {
  validate_loss_args(z_a, z_b, cfg);
  return compute_contrastive(z_a.data(), z_b.data(), z_a.dim(0), z_a.dim(1), cfg, false).total;
}

// Fused implementation: the forward value is computed entirely in double with
// one final rounding, and the backward pass uses the closed-form
// similarity-matrix gradients.
Tensor contrastive_loss(const Tensor& z_a, const Tensor& z_b, const LossConfig& cfg) {
  validate_loss_args(z_a, z_b, cfg);
  const int64_t n = z_a.dim(0);
  const int64_t d = z_a.dim(1);
  bool needs = grad_enabled() && (z_a.requires_grad() || z_b.requires_grad());
  auto internals = std::make_shared<LossInternals>(
      compute_contrastive(z_a.data(), z_b.data(), n, d, cfg, needs));
  const bool exclude = cfg.exclude_positive_in_denominator;

  auto out = std::make_shared<detail::Node>();
  out->shape = {1};
  out->data = {static_cast<float>(internals->total)};
  out->requires_grad = needs;
  if (needs) {
    out->parents = {z_a.node(), z_b.node()};
    detail::Node* self = out.get();
    auto pa = z_a.node();
    auto pb = z_b.node();
    out->backprop = [self, pa, pb, internals, n, d, exclude]() {
      double g0 = static_cast<double>(self->grad[0]);
      const auto& na = internals->na;
      const auto& nb = internals->nb;
      // gradients w.r.t. the normalized rows
      std::vector<double> gna(static_cast<size_t>(n * d), 0.0);
      std::vector<double> gnb(static_cast<size_t>(n * d), 0.0);
      if (exclude) {
        // similarity entry (i,k) is nb_i . na_k
        for (int64_t i = 0; i < n; ++i)
          for (int64_t k = 0; k < n; ++k) {
            double g = g0 * internals->g_sab[i * n + k];
            if (g == 0.0) continue;
            for (int64_t j = 0; j < d; ++j) {
              gnb[i * d + j] += g * na[k * d + j];
              gna[k * d + j] += g * nb[i * d + j];
            }
          }
      } else {
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < n; ++j) {
            double gab = g0 * internals->g_sab[i * n + j];
            for (int64_t t = 0; t < d; ++t) {
              gna[i * d + t] += gab * nb[j * d + t];
              gnb[j * d + t] += gab * na[i * d + t];
            }
            double gaa = g0 * internals->g_saa[i * n + j];
            if (gaa != 0.0)
              for (int64_t t = 0; t < d; ++t) gna[i * d + t] += gaa * na[j * d + t];
            double gbb = g0 * internals->g_sbb[i * n + j];
            if (gbb != 0.0)
              for (int64_t t = 0; t < d; ++t) gnb[i * d + t] += gbb * nb[j * d + t];
          }
      }
      if (pa->requires_grad) {
        pa->ensure_grad();
        normalize_backward(gna, na, internals->norms_a, n, d, pa->grad);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        normalize_backward(gnb, nb, internals->norms_b, n, d, pb->grad);
      }
    };
  }
  return detail::wrap_node(std::move(out));
}

namespace {

LossInternals compute_contrastive(const std::vector<float>& za_data,
                                  const std::vector<float>& zb_data, int64_t n, int64_t d,
                                  const LossConfig& cfg, bool want_grads) {
  const double tau = static_cast<double>(cfg.temperature);
  const bool mean_red = cfg.reduction == Reduction::mean;
  const bool exclude = cfg.exclude_positive_in_denominator;

  LossInternals res;
  res.na = normalize_rows(za_data, n, d, res.norms_a);
  res.nb = normalize_rows(zb_data, n, d, res.norms_b);
  const auto& na = res.na;
  const auto& nb = res.nb;

  double total = 0.0;
  double red = 1.0;
  auto* g_sab = &res.g_sab;
  auto* g_saa = &res.g_saa;
  auto* g_sbb = &res.g_sbb;

  if (exclude) {
    // S[i][k] = nb_i . na_k; term i: log(sum_{k!=i} e(S[i][k]) + e(S[k][i])) - S[i][i]/tau
    std::vector<double> S(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < n; ++k) {
        double acc = 0.0;
        for (int64_t j = 0; j < d; ++j) acc += nb[i * d + j] * na[k * d + j];
        S[i * n + k] = acc;
      }
    std::vector<double> E(S.size());
    for (size_t i = 0; i < S.size(); ++i) E[i] = std::exp(S[i] / tau);
    std::vector<double> den(n, 0.0);
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t k = 0; k < n; ++k) {
        if (k == i) continue;
        den[i] += E[i * n + k] + E[k * n + i];
      }
      total += std::log(den[i]) - S[i * n + i] / tau;
    }
    red = mean_red ? 1.0 / static_cast<double>(n) : 1.0;
    total *= red;

    if (want_grads) {
      // dL/dS[i][k] = (E[i][k]/tau)(1/den_i + 1/den_k) off-diagonal, -1/tau on it
      g_sab->assign(S.size(), 0.0);  // indexed [i*n+k] as d/d(nb_i . na_k)
      for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < n; ++k)
          (*g_sab)[i * n + k] = red * (i == k ? -1.0 / tau
                                              : E[i * n + k] / tau * (1.0 / den[i] + 1.0 / den[k]));
    }
  } else {
    // standard NT-Xent over 2N anchors u = [na; nb], positives (i, i+N)
    std::vector<double> u(static_cast<size_t>(2 * n * d));
    std::copy(na.begin(), na.end(), u.begin());
    std::copy(nb.begin(), nb.end(), u.begin() + n * d);
    std::vector<double> P(static_cast<size_t>(2 * n * 2 * n));
    for (int64_t i = 0; i < 2 * n; ++i)
      for (int64_t j = 0; j < 2 * n; ++j) {
        double acc = 0.0;
        for (int64_t t = 0; t < d; ++t) acc += u[i * d + t] * u[j * d + t];
        P[i * 2 * n + j] = acc;
      }
    std::vector<double> den(2 * n, 0.0);
    for (int64_t i = 0; i < 2 * n; ++i) {
      for (int64_t j = 0; j < 2 * n; ++j)
        if (j != i) den[i] += std::exp(P[i * 2 * n + j] / tau);
      int64_t partner = i < n ? i + n : i - n;
      total += std::log(den[i]) - P[i * 2 * n + partner] / tau;
    }
    red = mean_red ? 1.0 / static_cast<double>(2 * n) : 1.0;
    total *= red;

    if (want_grads) {
      // directed similarity gradients over the 2N x 2N matrix
      std::vector<double> g_full(P.size(), 0.0);
      for (int64_t i = 0; i < 2 * n; ++i)
        for (int64_t j = 0; j < 2 * n; ++j) {
          if (i == j) continue;
          double g = std::exp(P[i * 2 * n + j] / tau) / tau / den[i];
          int64_t partner = i < n ? i + n : i - n;
          if (j == partner) g -= 1.0 / tau;
          g_full[i * 2 * n + j] = red * g;
        }
      // fold the two directed entries per unordered pair into block gradients
      g_saa->assign(static_cast<size_t>(n * n), 0.0);
      g_sbb->assign(static_cast<size_t>(n * n), 0.0);
      g_sab->assign(static_cast<size_t>(n * n), 0.0);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
          (*g_saa)[i * n + j] = g_full[i * 2 * n + j] + g_full[j * 2 * n + i];
          (*g_sbb)[i * n + j] =
              g_full[(n + i) * 2 * n + (n + j)] + g_full[(n + j) * 2 * n + (n + i)];
          // d/d(na_i . nb_j): directed entries (i, n+j) and (n+j, i)
          (*g_sab)[i * n + j] = g_full[i * 2 * n + (n + j)] + g_full[(n + j) * 2 * n + i];
        }
    }
  }

  res.total = total;
  return res;
}

}  // namespace

std::string TrainLog::to_csv(bool include_wall_ms) const {
  std::string out = include_wall_ms ? "epoch,mean_loss,wall_ms\n" : "epoch,mean_loss\n";
  char buf[96];
  for (const auto& e : entries) {
    if (include_wall_ms)
      std::snprintf(buf, sizeof(buf), "%d,%.9g,%.3f\n", e.epoch, e.mean_loss, e.wall_ms);
    else
      std::snprintf(buf, sizeof(buf), "%d,%.9g\n", e.epoch, e.mean_loss);
    out += buf;
  }
  return out;
}

namespace {

std::vector<int64_t> epoch_order(int64_t n, uint64_t seed, int epoch, const char* stream) {
  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = substream(seed, stream, static_cast<uint64_t>(epoch));
  rng.shuffle(order);
  return order;
}

}  // namespace

TrainLog train_phase_a(Model& model, const Dataset& data, int epochs, int batch,
                       const AugmentationConfig& aug, const LossConfig& loss_cfg,
                       const OptimizerConfig& opt, uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("train_phase_a: empty dataset");
  if (batch < 2) throw std::invalid_argument("train_phase_a: batch must be >= 2");
  aug.validate();

  std::vector<Parameter*> params = model.encoder_parameters();
  for (auto* p : model.projection_parameters()) params.push_back(p);

  TrainLog log;
  int64_t n = data.size();
  int64_t num_batches = n / batch + ((n % batch) >= 2 ? 1 : 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    auto order = epoch_order(n, seed, epoch, "phase_a_order");
    double loss_sum = 0.0;
    int64_t batches_done = 0;
    for (int64_t b = 0; b < num_batches; ++b) {
      int64_t start = b * batch;
      int64_t end = std::min<int64_t>(start + batch, n);
      std::vector<int64_t> idx(order.begin() + start, order.begin() + end);
      Tensor images = data.to_tensor(idx);
      ContrastiveBatch views = augment_pair(images, aug, epoch * num_batches + b);
      Tensor z_a = model.project(model.encode(views.view_a));
      Tensor z_b = model.project(model.encode(views.view_b));
      Tensor loss = contrastive_loss(z_a, z_b, loss_cfg);
      zero_grad(params);
      backward(loss);
      optimizer_step(params, opt);
      zero_grad(params);
      loss_sum += loss.item();
      ++batches_done;
    }
    auto t1 = std::chrono::steady_clock::now();
    TrainLogEntry e;
    e.epoch = epoch + 1;
    e.mean_loss = batches_done ? loss_sum / static_cast<double>(batches_done) : 0.0;
    e.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    log.entries.push_back(e);
  }
  if (model.phase == "none") model.phase = "a";
  return log;
}

TrainLog train_phase_b(Model& model, const Dataset& data, int epochs, int batch,
                       const OptimizerConfig& opt, uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("train_phase_b: empty dataset");
  if (!data.labeled()) throw std::invalid_argument("train_phase_b: labeled data required");

  // encoder and head are frozen, so embeddings are computed once up front
  int64_t n = data.size();
  int64_t d = model.config.embedding_dim;
  std::vector<float> embeddings(static_cast<size_t>(n * d));
  {
    NoGradGuard ng;
    for (int64_t start = 0; start < n; start += batch) {
      int64_t end = std::min<int64_t>(start + batch, n);
      std::vector<int64_t> idx(end - start);
      for (int64_t i = start; i < end; ++i) idx[i - start] = i;
      Tensor h = model.encode(data.to_tensor(idx));
      std::copy(h.data().begin(), h.data().end(), embeddings.begin() + start * d);
    }
  }

  std::vector<Parameter*> params = model.classifier_parameters();
  TrainLog log;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    auto order = epoch_order(n, seed, epoch, "phase_b_order");
    double loss_sum = 0.0;
    int64_t count = 0;
    for (int64_t start = 0; start < n; start += batch) {
      int64_t end = std::min<int64_t>(start + batch, n);
      int64_t bsz = end - start;
      std::vector<float> hdata(static_cast<size_t>(bsz * d));
      std::vector<int> labels(bsz);
      for (int64_t i = 0; i < bsz; ++i) {
        int64_t src = order[start + i];
        std::copy(embeddings.begin() + src * d, embeddings.begin() + (src + 1) * d,
                  hdata.begin() + i * d);
        labels[i] = data.labels[src];
      }
      Tensor h = Tensor::from_data({bsz, d}, std::move(hdata));
      Tensor ce = cross_entropy(model.classify(h), labels);
      zero_grad(params);
      backward(ce);
      optimizer_step(params, opt);
      zero_grad(params);
      loss_sum += ce.item() * static_cast<double>(bsz);
      count += bsz;
    }
    auto t1 = std::chrono::steady_clock::now();
    TrainLogEntry e;
    e.epoch = epoch + 1;
    e.mean_loss = count ? loss_sum / static_cast<double>(count) : 0.0;
    e.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    log.entries.push_back(e);
  }
  if (epochs > 0 && (model.phase == "a" || model.phase == "a+b")) model.phase = "a+b";
  return log;
}

}  // namespace cfdr
