#pragma once

// Per-op finite-difference gradient checks, shared by the unit tests and the
// acceptance suite. Each case builds a random small instance, runs the
// library backward pass, and compares against central differences through the
// double-precision reference forwards in oracles.hpp.

#include <functional>
#include <string>
#include <vector>

#include "cfdr/contrastive.hpp"
#include "cfdr/rng.hpp"
#include "cfdr/tensor.hpp"
#include "oracles.hpp"

namespace gradsuite {

using cfdr::Shape;
using cfdr::Tensor;
using oracle::dvec;

struct OpCheck {
  std::string name;
  std::function<oracle::GradCheckResult(cfdr::Rng&)> run;
};

namespace detail {

inline std::vector<float> rand_vec(cfdr::Rng& rng, int64_t n, float lo, float hi) {
  std::vector<float> out(n);
  for (auto& v : out) v = rng.uniform(lo, hi);
  return out;
}

// keeps values away from the relu/maxpool kink so eps=1e-3 differences stay
// one-sided
inline std::vector<float> rand_vec_off_kink(cfdr::Rng& rng, int64_t n, float margin = 0.05f) {
  std::vector<float> out(n);
  for (auto& v : out) {
    v = rng.uniform(-1.0f, 1.0f);
    if (v >= 0.0f && v < margin) v += margin;
    if (v < 0.0f && v > -margin) v -= margin;
  }
  return out;
}

inline Tensor weight_const(cfdr::Rng& rng, const Shape& shape, std::vector<float>& out_store) {
  out_store = rand_vec(rng, cfdr::shape_numel(shape), -1.0f, 1.0f);
  return Tensor::from_data(shape, out_store);
}

inline double dot_ref(const dvec& a, const std::vector<float>& w) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * w[i];
  return acc;
}

}  // namespace detail

inline std::vector<OpCheck> all_op_checks() {
  using namespace detail;
  std::vector<OpCheck> checks;

  auto weighted = [](Tensor out, const Tensor& w) { return cfdr::sum_all(cfdr::mul(out, w)); };

  checks.push_back({"add.a", [&weighted](cfdr::Rng& rng) {
    Shape s{3, 4};
    auto x0 = rand_vec(rng, 12, -2.0f, 2.0f);
    auto b0 = rand_vec(rng, 12, -2.0f, 2.0f);
    std::vector<float> w;
    Tensor wt = weight_const(rng, s, w);
    Tensor bt = Tensor::from_data(s, b0);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::add(x, bt), wt)); },
        [&](const dvec& xd) {
          dvec out(xd);
          for (size_t i = 0; i < out.size(); ++i) out[i] += b0[i];
          return dot_ref(out, w);
        });
  }});

  checks.push_back({"add.bias_broadcast", [](cfdr::Rng& rng) {
    Shape sa{4, 3}, sb{3};
    auto a0 = rand_vec(rng, 12, -2.0f, 2.0f);
    std::vector<float> w;
    Tensor at = Tensor::from_data(sa, a0);
    Tensor wt = weight_const(rng, sa, w);
    auto b0 = rand_vec(rng, 3, -2.0f, 2.0f);
    return oracle::gradcheck(sb, b0,
        [&](Tensor b) { return cfdr::sum_all(cfdr::mul(cfdr::add(at, b), wt)); },
        [&](const dvec& bd) {
          dvec out(a0.begin(), a0.end());
          for (int64_t r = 0; r < 4; ++r)
            for (int64_t j = 0; j < 3; ++j) out[r * 3 + j] += bd[j];
          return dot_ref(out, w);
        });
  }});

  checks.push_back({"sub.b", [](cfdr::Rng& rng) {
    Shape s{2, 5};
    auto a0 = rand_vec(rng, 10, -2.0f, 2.0f);
    auto b0 = rand_vec(rng, 10, -2.0f, 2.0f);
    std::vector<float> w;
    Tensor at = Tensor::from_data(s, a0);
    Tensor wt = weight_const(rng, s, w);
    return oracle::gradcheck(s, b0,
        [&](Tensor b) { return cfdr::sum_all(cfdr::mul(cfdr::sub(at, b), wt)); },
        [&](const dvec& bd) {
          dvec out(bd.size());
          for (size_t i = 0; i < bd.size(); ++i) out[i] = a0[i] - bd[i];
          return dot_ref(out, w);
        });
  }});

  checks.push_back({"mul.a", [](cfdr::Rng& rng) {
    Shape s{3, 3};
    auto a0 = rand_vec(rng, 9, -2.0f, 2.0f);
    auto b0 = rand_vec(rng, 9, -2.0f, 2.0f);
    std::vector<float> w;
    Tensor bt = Tensor::from_data(s, b0);
    Tensor wt = weight_const(rng, s, w);
    return oracle::gradcheck(s, a0,
        [&](Tensor a) { return cfdr::sum_all(cfdr::mul(cfdr::mul(a, bt), wt)); },
        [&](const dvec& ad) {
          dvec out(ad.size());
          for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * b0[i];
          return dot_ref(out, w);
        });
  }});

  checks.push_back({"scale", [](cfdr::Rng& rng) {
    Shape s{6};
    auto x0 = rand_vec(rng, 6, -2.0f, 2.0f);
    float c = rng.uniform(-3.0f, 3.0f);
    std::vector<float> w;
    Tensor wt = weight_const(rng, s, w);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::scale(x, c), wt)); },
        [&](const dvec& xd) {
          dvec out(xd);
          for (auto& v : out) v *= c;
          return dot_ref(out, w);
        });
  }});

  auto add_matmul_case = [&checks](bool transpose_b, bool wrt_a) {
    std::string name = std::string(transpose_b ? "matmul_t" : "matmul") + (wrt_a ? ".a" : ".b");
    checks.push_back({name, [transpose_b, wrt_a](cfdr::Rng& rng) {
      int64_t m = 3, k = 4, n = 2;
      Shape sa{m, k};
      Shape sb = transpose_b ? Shape{n, k} : Shape{k, n};
      auto a0 = rand_vec(rng, m * k, -1.5f, 1.5f);
      auto b0 = rand_vec(rng, k * n, -1.5f, 1.5f);
      std::vector<float> w;
      Tensor wt = weight_const(rng, {m, n}, w);
      auto oracle_fn = [=, &w](const dvec& a, const dvec& b) {
        return dot_ref(oracle::ref_matmul(a, b, m, k, n, transpose_b), w);
      };
      if (wrt_a) {
        Tensor bt = Tensor::from_data(sb, b0);
        return oracle::gradcheck(sa, a0,
            [&](Tensor a) { return cfdr::sum_all(cfdr::mul(cfdr::matmul(a, bt, transpose_b), wt)); },
            [&, b0](const dvec& ad) { return oracle_fn(ad, oracle::widen(b0)); });
      }
      Tensor at = Tensor::from_data(sa, a0);
      return oracle::gradcheck(sb, b0,
          [&](Tensor b) { return cfdr::sum_all(cfdr::mul(cfdr::matmul(at, b, transpose_b), wt)); },
          [&, a0](const dvec& bd) { return oracle_fn(oracle::widen(a0), bd); });
    }});
  };
  add_matmul_case(false, true);
  add_matmul_case(false, false);
  add_matmul_case(true, true);
  add_matmul_case(true, false);

  auto add_conv_case = [&checks](const char* name, int stride, int pad, int wrt) {
    checks.push_back({name, [stride, pad, wrt](cfdr::Rng& rng) {
      int64_t N = 1, C = 2, H = 4, W = 4, O = 2, K = 3;
      int64_t OH = (H + 2 * pad - K) / stride + 1;
      int64_t OW = (W + 2 * pad - K) / stride + 1;
      auto x0 = rand_vec(rng, N * C * H * W, -1.0f, 1.0f);
      auto w0 = rand_vec(rng, O * C * K * K, -1.0f, 1.0f);
      auto b0 = rand_vec(rng, O, -0.5f, 0.5f);
      std::vector<float> w;
      Tensor wt = weight_const(rng, {N, O, OH, OW}, w);
      auto oracle_fn = [=, &w](const dvec& x, const dvec& wd, const dvec& bd) {
        return dot_ref(oracle::ref_conv2d(x, wd, bd, N, C, H, W, O, K, stride, pad), w);
      };
      if (wrt == 0) {
        Tensor wtt = Tensor::from_data({O, C, K, K}, w0);
        Tensor bt = Tensor::from_data({O}, b0);
        return oracle::gradcheck({N, C, H, W}, x0,
            [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::conv2d(x, wtt, bt, stride, pad), wt)); },
            [&, w0, b0](const dvec& xd) { return oracle_fn(xd, oracle::widen(w0), oracle::widen(b0)); });
      }
      if (wrt == 1) {
        Tensor xt = Tensor::from_data({N, C, H, W}, x0);
        Tensor bt = Tensor::from_data({O}, b0);
        return oracle::gradcheck({O, C, K, K}, w0,
            [&](Tensor wv) { return cfdr::sum_all(cfdr::mul(cfdr::conv2d(xt, wv, bt, stride, pad), wt)); },
            [&, x0, b0](const dvec& wd) { return oracle_fn(oracle::widen(x0), wd, oracle::widen(b0)); });
      }
      Tensor xt = Tensor::from_data({N, C, H, W}, x0);
      Tensor wtt = Tensor::from_data({O, C, K, K}, w0);
      return oracle::gradcheck({O}, b0,
          [&](Tensor bv) { return cfdr::sum_all(cfdr::mul(cfdr::conv2d(xt, wtt, bv, stride, pad), wt)); },
          [&, x0, w0](const dvec& bd) { return oracle_fn(oracle::widen(x0), oracle::widen(w0), bd); });
    }});
  };
  add_conv_case("conv2d.x", 1, 1, 0);
  add_conv_case("conv2d.w", 1, 1, 1);
  add_conv_case("conv2d.b", 1, 1, 2);
  add_conv_case("conv2d_s2p0.x", 2, 0, 0);
  add_conv_case("conv2d_s2p0.w", 2, 0, 1);

  checks.push_back({"relu", [](cfdr::Rng& rng) {
    Shape s{4, 4};
    auto x0 = rand_vec_off_kink(rng, 16);
    std::vector<float> w;
    Tensor wt = weight_const(rng, s, w);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::relu(x), wt)); },
        [&](const dvec& xd) { return dot_ref(oracle::ref_relu(xd), w); });
  }});

  checks.push_back({"max_pool2d", [](cfdr::Rng& rng) {
    int64_t N = 1, C = 2, H = 4, W = 4;
    // redraw until every pooling window has a clear max, so the finite
    // difference never crosses an argmax switch
    std::vector<float> x0;
    for (;;) {
      x0 = rand_vec(rng, N * C * H * W, -1.0f, 1.0f);
      bool ok = true;
      for (int64_t nc = 0; nc < N * C && ok; ++nc)
        for (int64_t oh = 0; oh < 2 && ok; ++oh)
          for (int64_t ow = 0; ow < 2 && ok; ++ow) {
            float best = -1e30f, second = -1e30f;
            for (int kh = 0; kh < 2; ++kh)
              for (int kw = 0; kw < 2; ++kw) {
                float v = x0[nc * 16 + (oh * 2 + kh) * 4 + (ow * 2 + kw)];
                if (v > best) {
                  second = best;
                  best = v;
                } else if (v > second) {
                  second = v;
                }
              }
            if (best - second < 5e-3f) ok = false;
          }
      if (ok) break;
    }
    std::vector<float> w;
    Tensor wt = weight_const(rng, {N, C, 2, 2}, w);
    return oracle::gradcheck({N, C, H, W}, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::max_pool2d(x, 2, 2), wt)); },
        [&](const dvec& xd) { return dot_ref(oracle::ref_maxpool2d(xd, N, C, H, W, 2, 2), w); });
  }});

  checks.push_back({"global_avg_pool", [](cfdr::Rng& rng) {
    int64_t N = 2, C = 3, H = 3, W = 3;
    auto x0 = rand_vec(rng, N * C * H * W, -1.0f, 1.0f);
    std::vector<float> w;
    Tensor wt = weight_const(rng, {N, C}, w);
    return oracle::gradcheck({N, C, H, W}, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::global_avg_pool(x), wt)); },
        [&](const dvec& xd) { return dot_ref(oracle::ref_global_avg_pool(xd, N * C, H * W), w); });
  }});

  checks.push_back({"mean_all", [](cfdr::Rng& rng) {
    Shape s{3, 5};
    auto x0 = rand_vec(rng, 15, -2.0f, 2.0f);
    float c = rng.uniform(0.5f, 2.0f);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::scale(cfdr::mean_all(x), c); },
        [&](const dvec& xd) {
          double acc = 0.0;
          for (double v : xd) acc += v;
          return c * acc / static_cast<double>(xd.size());
        });
  }});

  checks.push_back({"sum_all", [](cfdr::Rng& rng) {
    Shape s{7};
    auto x0 = rand_vec(rng, 7, -2.0f, 2.0f);
    float c = rng.uniform(0.5f, 2.0f);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::scale(cfdr::sum_all(x), c); },
        [&](const dvec& xd) {
          double acc = 0.0;
          for (double v : xd) acc += v;
          return c * acc;
        });
  }});

  checks.push_back({"softmax", [](cfdr::Rng& rng) {
    Shape s{3, 4};
    auto x0 = rand_vec(rng, 12, -2.0f, 2.0f);
    std::vector<float> w;
    Tensor wt = weight_const(rng, s, w);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::softmax(x), wt)); },
        [&](const dvec& xd) { return dot_ref(oracle::ref_softmax(xd, 3, 4), w); });
  }});

  checks.push_back({"log", [](cfdr::Rng& rng) {
    Shape s{8};
    auto x0 = rand_vec(rng, 8, 0.5f, 2.0f);
    std::vector<float> w;
    Tensor wt = weight_const(rng, s, w);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::log(x), wt)); },
        [&](const dvec& xd) {
          dvec out(xd);
          for (auto& v : out) v = std::log(v);
          return dot_ref(out, w);
        });
  }});

  checks.push_back({"exp", [](cfdr::Rng& rng) {
    Shape s{8};
    auto x0 = rand_vec(rng, 8, -1.0f, 1.0f);
    std::vector<float> w;
    Tensor wt = weight_const(rng, s, w);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::exp(x), wt)); },
        [&](const dvec& xd) {
          dvec out(xd);
          for (auto& v : out) v = std::exp(v);
          return dot_ref(out, w);
        });
  }});

  checks.push_back({"l2_normalize", [](cfdr::Rng& rng) {
    Shape s{3, 4};
    // rows with healthy norms; the zero-row case has its own unit test
    std::vector<float> x0;
    for (;;) {
      x0 = rand_vec(rng, 12, -1.0f, 1.0f);
      bool ok = true;
      for (int r = 0; r < 3; ++r) {
        double nsq = 0.0;
        for (int j = 0; j < 4; ++j) nsq += static_cast<double>(x0[r * 4 + j]) * x0[r * 4 + j];
        if (std::sqrt(nsq) < 0.3) ok = false;
      }
      if (ok) break;
    }
    std::vector<float> w;
    Tensor wt = weight_const(rng, s, w);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::l2_normalize(x), wt)); },
        [&](const dvec& xd) { return dot_ref(oracle::ref_l2_normalize(xd, 3, 4), w); });
  }});

  checks.push_back({"concat.axis0", [](cfdr::Rng& rng) {
    Shape s{2, 3};
    auto a0 = rand_vec(rng, 6, -1.0f, 1.0f);
    auto b0 = rand_vec(rng, 6, -1.0f, 1.0f);
    std::vector<float> w;
    Tensor bt = Tensor::from_data(s, b0);
    Tensor wt = weight_const(rng, {4, 3}, w);
    return oracle::gradcheck(s, a0,
        [&](Tensor a) { return cfdr::sum_all(cfdr::mul(cfdr::concat({a, bt}, 0), wt)); },
        [&](const dvec& ad) {
          dvec out(ad);
          out.insert(out.end(), b0.begin(), b0.end());
          return dot_ref(out, w);
        });
  }});

  checks.push_back({"row_sum", [](cfdr::Rng& rng) {
    Shape s{3, 4};
    auto x0 = rand_vec(rng, 12, -1.0f, 1.0f);
    std::vector<float> w;
    Tensor wt = weight_const(rng, {3}, w);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::row_sum(x), wt)); },
        [&](const dvec& xd) {
          dvec out(3, 0.0);
          for (int r = 0; r < 3; ++r)
            for (int j = 0; j < 4; ++j) out[r] += xd[r * 4 + j];
          return dot_ref(out, w);
        });
  }});

  checks.push_back({"col_sum", [](cfdr::Rng& rng) {
    Shape s{3, 4};
    auto x0 = rand_vec(rng, 12, -1.0f, 1.0f);
    std::vector<float> w;
    Tensor wt = weight_const(rng, {4}, w);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::col_sum(x), wt)); },
        [&](const dvec& xd) {
          dvec out(4, 0.0);
          for (int r = 0; r < 3; ++r)
            for (int j = 0; j < 4; ++j) out[j] += xd[r * 4 + j];
          return dot_ref(out, w);
        });
  }});

  checks.push_back({"diag", [](cfdr::Rng& rng) {
    Shape s{4, 4};
    auto x0 = rand_vec(rng, 16, -1.0f, 1.0f);
    std::vector<float> w;
    Tensor wt = weight_const(rng, {4}, w);
    return oracle::gradcheck(s, x0,
        [&](Tensor x) { return cfdr::sum_all(cfdr::mul(cfdr::diag(x), wt)); },
        [&](const dvec& xd) {
          dvec out(4);
          for (int i = 0; i < 4; ++i) out[i] = xd[i * 4 + i];
          return dot_ref(out, w);
        });
  }});

  checks.push_back({"cross_entropy", [](cfdr::Rng& rng) {
    int64_t n = 4, c = 5;
    auto x0 = rand_vec(rng, n * c, -2.0f, 2.0f);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.below(c));
    return oracle::gradcheck({n, c}, x0,
        [&](Tensor x) { return cfdr::cross_entropy(x, labels); },
        [&](const dvec& xd) { return oracle::ref_cross_entropy(xd, labels, n, c); });
  }});

  auto add_contrastive_case = [&checks](const char* name, bool exclude_positive, bool wrt_a) {
    checks.push_back({name, [exclude_positive, wrt_a](cfdr::Rng& rng) {
      int64_t n = 3, d = 4;
      auto za = rand_vec(rng, n * d, 0.2f, 1.0f);
      auto zb = rand_vec(rng, n * d, 0.2f, 1.0f);
      cfdr::LossConfig cfg;
      cfg.temperature = 0.5f;
      cfg.exclude_positive_in_denominator = exclude_positive;
      auto oracle_fn = [=](const dvec& a, const dvec& b) {
        return oracle::ref_contrastive_loss(a, b, n, d, cfg.temperature, exclude_positive, false);
      };
      if (wrt_a) {
        Tensor zbt = Tensor::from_data({n, d}, zb);
        return oracle::gradcheck({n, d}, za,
            [&](Tensor z) { return cfdr::contrastive_loss(z, zbt, cfg); },
            [&, zb](const dvec& ad) { return oracle_fn(ad, oracle::widen(zb)); });
      }
      Tensor zat = Tensor::from_data({n, d}, za);
      return oracle::gradcheck({n, d}, zb,
          [&](Tensor z) { return cfdr::contrastive_loss(zat, z, cfg); },
          [&, za](const dvec& bd) { return oracle_fn(oracle::widen(za), bd); });
    }});
  };
  add_contrastive_case("contrastive_loss.z_a", true, true);
  add_contrastive_case("contrastive_loss.z_b", true, false);
  add_contrastive_case("contrastive_loss_ntxent.z_a", false, true);

  return checks;
}

struct SuiteResult {
  double max_rel_err = 0.0;
  double max_forward_err = 0.0;
  std::string worst_op;
  int64_t instances = 0;
};

inline SuiteResult run_all(int instances_per_op, uint64_t seed) {
  SuiteResult res;
  for (auto& check : all_op_checks()) {
    cfdr::Rng rng = cfdr::substream(seed, check.name);
    for (int i = 0; i < instances_per_op; ++i) {
      auto r = check.run(rng);
      if (r.max_rel_err > res.max_rel_err) {
        res.max_rel_err = r.max_rel_err;
        res.worst_op = check.name;
      }
      res.max_forward_err = std::max(res.max_forward_err, r.forward_rel_err);
      ++res.instances;
    }
  }
  return res;
}

}  // namespace gradsuite
