#include "cfdr/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace cfdr {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

namespace {

thread_local bool g_grad_enabled = true;

std::atomic<uint64_t> g_zero_norm_warnings{0};

void check_shape_valid(const Shape& s) {
  for (int64_t d : s) {
    if (d <= 0) throw std::invalid_argument("invalid tensor shape " + shape_str(s));
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + " shape mismatch: " + shape_str(a) + " vs " +
                              shape_str(b));
}

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(Shape shape, std::vector<float> data, bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

}  // namespace

namespace detail {
Tensor wrap_node(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
}  // namespace detail

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  check_shape_valid(shape);
  return Tensor(make_node(shape, std::vector<float>(shape_numel(shape), 0.0f), requires_grad));
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
  check_shape_valid(shape);
  return Tensor(make_node(shape, std::vector<float>(shape_numel(shape), value), requires_grad));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data, bool requires_grad) {
  check_shape_valid(shape);
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  return Tensor(make_node(shape, std::move(data), requires_grad));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor(make_node({1}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }
int64_t Tensor::numel() const { return node_->numel(); }
int64_t Tensor::dim(size_t i) const { return node_->shape.at(i); }

const std::vector<float>& Tensor::data() const { return node_->data; }
std::vector<float>& Tensor::data() { return node_->data; }

float Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<float>& Tensor::grad() const {
  if (!has_grad()) throw std::runtime_error("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.clear();
  node_->backward_ran = false;
}

Tensor Tensor::detach() const {
  return Tensor(make_node(node_->shape, node_->data, false));
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

uint64_t zero_norm_warning_count() { return g_zero_norm_warnings.load(); }
void reset_zero_norm_warning_count() { g_zero_norm_warnings.store(0); }

// ---------------------------------------------------------------------------
// op plumbing

namespace {

// Builds the result node and, when recording, wires parents + backward fn.
// The backward fn receives raw node pointers; parents are kept alive by the
// result node's parent list.
Tensor op_result(Shape out_shape, std::vector<float> out_data, std::vector<NodePtr> inputs,
                 std::function<void(detail::Node*, const std::vector<NodePtr>&)> backprop) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  NodePtr out = make_node(std::move(out_shape), std::move(out_data), needs);
  if (needs && backprop) {
    out->parents = inputs;
    detail::Node* self = out.get();
    auto fn = std::move(backprop);
    auto parents = std::move(inputs);
    out->backprop = [self, parents, fn]() { fn(self, parents); };
  }
  return detail::wrap_node(std::move(out));
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward on undefined tensor");
  NodePtr root = loss.node();
  if (root->numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_str(root->shape));
  }
  if (!root->requires_grad) {
    throw std::runtime_error("backward on detached tensor: loss does not require gradients");
  }
  if (root->backward_ran) {
    throw std::runtime_error("backward called twice on the same loss without zero_grad");
  }
  root->backward_ran = true;

  // iterative post-order topological sort over parents
  std::vector<detail::Node*> topo;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::Node* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0f;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop();
  }
}

// ---------------------------------------------------------------------------
// elementwise and broadcast ops

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool bias_bcast = sb.size() == 1 && !sa.empty() && sa.back() == sb[0] && sa != sb;
  if (!bias_bcast && sa != sb) shape_mismatch("add", sa, sb);

  std::vector<float> out(a.data());
  if (bias_bcast) {
    int64_t d = sb[0];
    int64_t rows = a.numel() / d;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j) out[r * d + j] += b.data()[j];
  } else {
    for (size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  }

  return op_result(sa, std::move(out), {a.node(), b.node()},
                   [bias_bcast](detail::Node* self, const std::vector<NodePtr>& in) {
                     auto& pa = in[0];
                     auto& pb = in[1];
                     if (pa->requires_grad) {
                       pa->ensure_grad();
                       for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       if (bias_bcast) {
                         int64_t d = pb->numel();
                         int64_t rows = self->numel() / d;
                         for (int64_t r = 0; r < rows; ++r)
                           for (int64_t j = 0; j < d; ++j) pb->grad[j] += self->grad[r * d + j];
                       } else {
                         for (size_t i = 0; i < self->grad.size(); ++i)
                           pb->grad[i] += self->grad[i];
                       }
                     }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch("sub", a.shape(), b.shape());
  std::vector<float> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  return op_result(a.shape(), std::move(out), {a.node(), b.node()},
                   [](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (in[0]->requires_grad) {
                       in[0]->ensure_grad();
                       for (size_t i = 0; i < self->grad.size(); ++i)
                         in[0]->grad[i] += self->grad[i];
                     }
                     if (in[1]->requires_grad) {
                       in[1]->ensure_grad();
                       for (size_t i = 0; i < self->grad.size(); ++i)
                         in[1]->grad[i] -= self->grad[i];
                     }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  std::vector<float> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return op_result(a.shape(), std::move(out), {a.node(), b.node()},
                   [](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (in[0]->requires_grad) {
                       in[0]->ensure_grad();
                       for (size_t i = 0; i < self->grad.size(); ++i)
                         in[0]->grad[i] += self->grad[i] * in[1]->data[i];
                     }
                     if (in[1]->requires_grad) {
                       in[1]->ensure_grad();
                       for (size_t i = 0; i < self->grad.size(); ++i)
                         in[1]->grad[i] += self->grad[i] * in[0]->data[i];
                     }
                   });
}

Tensor scale(const Tensor& a, float c) {
  std::vector<float> out(a.data());
  for (auto& v : out) v *= c;
  return op_result(a.shape(), std::move(out), {a.node()},
                   [c](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (size_t i = 0; i < self->grad.size(); ++i)
                       in[0]->grad[i] += self->grad[i] * c;
                   });
}

Tensor add_scalar(const Tensor& a, float c) {
  std::vector<float> out(a.data());
  for (auto& v : out) v += c;
  return op_result(a.shape(), std::move(out), {a.node()},
                   [](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (size_t i = 0; i < self->grad.size(); ++i)
                       in[0]->grad[i] += self->grad[i];
                   });
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2) shape_mismatch("matmul", sa, sb);
  int64_t m = sa[0], k = sa[1];
  int64_t bk = transpose_b ? sb[1] : sb[0];
  int64_t n = transpose_b ? sb[0] : sb[1];
  if (k != bk) shape_mismatch("matmul", sa, sb);

  std::vector<float> out(static_cast<size_t>(m * n), 0.0f);
  const float* A = a.data().data();
  const float* B = b.data().data();
  if (transpose_b) {
    // C[i][j] = sum_k A[i][k] * B[j][k] -- both rows contiguous
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        float acc = 0.0f;
        const float* ar = A + i * k;
        const float* br = B + j * k;
#pragma omp simd reduction(+ : acc)
        for (int64_t t = 0; t < k; ++t) acc += ar[t] * br[t];
        out[i * n + j] = acc;
      }
    }
  } else {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
      float* cr = out.data() + i * n;
      const float* ar = A + i * k;
      for (int64_t t = 0; t < k; ++t) {
        float av = ar[t];
        const float* br = B + t * n;
        for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
      }
    }
  }

  return op_result(
      {m, n}, std::move(out), {a.node(), b.node()},
      [m, n, k, transpose_b](detail::Node* self, const std::vector<NodePtr>& in) {
        const float* G = self->grad.data();
        auto& pa = in[0];
        auto& pb = in[1];
        if (pa->requires_grad) {
          pa->ensure_grad();
          const float* B = pb->data.data();
          // dA[i][t] += sum_j G[i][j] * (transpose_b ? B[j][t] : B[t][j])
#pragma omp parallel for schedule(static)
          for (int64_t i = 0; i < m; ++i) {
            float* dar = pa->grad.data() + i * k;
            const float* gr = G + i * n;
            if (transpose_b) {
              for (int64_t j = 0; j < n; ++j) {
                float gv = gr[j];
                const float* br = B + j * k;
                for (int64_t t = 0; t < k; ++t) dar[t] += gv * br[t];
              }
            } else {
              for (int64_t t = 0; t < k; ++t) {
                const float* br = B + t * n;
                float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
                for (int64_t j = 0; j < n; ++j) acc += gr[j] * br[j];
                dar[t] += acc;
              }
            }
          }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          const float* A = pa->data.data();
          if (transpose_b) {
            // dB[j][t] += sum_i G[i][j] * A[i][t]
#pragma omp parallel for schedule(static)
            for (int64_t j = 0; j < n; ++j) {
              float* dbr = pb->grad.data() + j * k;
              for (int64_t i = 0; i < m; ++i) {
                float gv = G[i * n + j];
                const float* ar = A + i * k;
                for (int64_t t = 0; t < k; ++t) dbr[t] += gv * ar[t];
              }
            }
          } else {
            // dB[t][j] += sum_i A[i][t] * G[i][j]
#pragma omp parallel for schedule(static)
            for (int64_t t = 0; t < k; ++t) {
              float* dbr = pb->grad.data() + t * n;
              for (int64_t i = 0; i < m; ++i) {
                float av = A[i * k + t];
                const float* gr = G + i * n;
                for (int64_t j = 0; j < n; ++j) dbr[j] += av * gr[j];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// conv2d, NCHW

namespace {

// input batch copied once into a zero-padded buffer so the kernels run
// branch-free over contiguous rows
std::vector<float> pad_input(const float* X, int64_t N, int64_t C, int64_t H, int64_t W,
                             int pad) {
  int64_t PH = H + 2 * pad, PW = W + 2 * pad;
  std::vector<float> xp(static_cast<size_t>(N * C * PH * PW), 0.0f);
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* src = X + nc * H * W;
    float* dst = xp.data() + nc * PH * PW + pad * PW + pad;
    for (int64_t h = 0; h < H; ++h) std::copy(src + h * W, src + (h + 1) * W, dst + h * PW);
  }
  return xp;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4) shape_mismatch("conv2d", sx, sw);
  if (sx[1] != sw[1]) shape_mismatch("conv2d", sx, sw);
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  int64_t N = sx[0], C = sx[1], H = sx[2], W = sx[3];
  int64_t O = sw[0], KH = sw[2], KW = sw[3];
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != O))
    shape_mismatch("conv2d bias", sw, b.shape());
  int64_t OH = (H + 2 * pad - KH) / stride + 1;
  int64_t OW = (W + 2 * pad - KW) / stride + 1;
  if (OH <= 0 || OW <= 0)
    throw std::invalid_argument("conv2d: kernel " + shape_str(sw) + " too large for input " +
                                shape_str(sx));
  int64_t PW = W + 2 * pad;

  std::vector<float> out(static_cast<size_t>(N * O * OH * OW), 0.0f);
  const float* Wd = w.data().data();
  const float* Bd = b.defined() ? b.data().data() : nullptr;
  std::vector<float> xp = pad_input(x.data().data(), N, C, H, W, pad);
  int64_t PH = H + 2 * pad;

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t o = 0; o < O; ++o) {
      for (int64_t oh = 0; oh < OH; ++oh) {
        float* orow = out.data() + ((n * O + o) * OH + oh) * OW;
        if (Bd)
          for (int64_t ow = 0; ow < OW; ++ow) orow[ow] = Bd[o];
        for (int64_t c = 0; c < C; ++c) {
          const float* xc = xp.data() + (n * C + c) * PH * PW;
          const float* wc = Wd + ((o * C + c) * KH) * KW;
          for (int64_t kh = 0; kh < KH; ++kh) {
            const float* xr = xc + (oh * stride + kh) * PW;
            const float* wr = wc + kh * KW;
            for (int64_t kw = 0; kw < KW; ++kw) {
              float wv = wr[kw];
              if (stride == 1) {
                const float* xs = xr + kw;
                for (int64_t ow = 0; ow < OW; ++ow) orow[ow] += wv * xs[ow];
              } else {
                for (int64_t ow = 0; ow < OW; ++ow) orow[ow] += wv * xr[ow * stride + kw];
              }
            }
          }
        }
      }
    }
  }

  std::vector<NodePtr> inputs = {x.node(), w.node()};
  if (b.defined()) inputs.push_back(b.node());
  return op_result(
      {N, O, OH, OW}, std::move(out), std::move(inputs),
      [N, C, H, W, O, KH, KW, OH, OW, stride, pad, PW](detail::Node* self,
                                                       const std::vector<NodePtr>& in) {
        const float* G = self->grad.data();
        auto& px = in[0];
        auto& pw = in[1];
        const int64_t PH = H + 2 * pad;
        const int64_t R = N * OH * OW;   // im2col rows
        const int64_t CKK = C * KH * KW; // im2col columns
        const bool need_dx = px->requires_grad;
        const bool need_dw = pw->requires_grad;

        // grad transposed to [O, N*OH*OW] so both products below are
        // axpy-shaped over long contiguous rows
        std::vector<float> gt;
        if (need_dx || need_dw) {
          gt.resize(static_cast<size_t>(O * R));
#pragma omp parallel for schedule(static)
          for (int64_t o = 0; o < O; ++o)
            for (int64_t n = 0; n < N; ++n) {
              const float* src = G + ((n * O + o) * OH) * OW;
              std::copy(src, src + OH * OW, gt.data() + o * R + n * OH * OW);
            }
        }

        if (need_dw) {
          pw->ensure_grad();
          // im2col of the padded input, rows indexed by (n,oh,ow)
          std::vector<float> xp = pad_input(px->data.data(), N, C, H, W, pad);
          std::vector<float> col(static_cast<size_t>(R) * CKK);
#pragma omp parallel for schedule(static)
          for (int64_t n = 0; n < N; ++n)
            for (int64_t oh = 0; oh < OH; ++oh)
              for (int64_t ow = 0; ow < OW; ++ow) {
                float* crow = col.data() + ((n * OH + oh) * OW + ow) * CKK;
                for (int64_t c = 0; c < C; ++c) {
                  const float* xc = xp.data() + (n * C + c) * PH * PW;
                  for (int64_t kh = 0; kh < KH; ++kh) {
                    const float* xr = xc + (oh * stride + kh) * PW + ow * stride;
                    for (int64_t kw = 0; kw < KW; ++kw) crow[c * KH * KW + kh * KW + kw] = xr[kw];
                  }
                }
              }
          // dW[o][:] += sum_r gt[o][r] * col[r][:]
#pragma omp parallel for schedule(static)
          for (int64_t o = 0; o < O; ++o) {
            float* dwo = pw->grad.data() + o * CKK;
            const float* gto = gt.data() + o * R;
            for (int64_t r = 0; r < R; ++r) {
              float gv = gto[r];
              if (gv == 0.0f) continue;
              const float* crow = col.data() + r * CKK;
              for (int64_t j = 0; j < CKK; ++j) dwo[j] += gv * crow[j];
            }
          }
        }

        if (need_dx) {
          px->ensure_grad();
          const float* Wd = pw->data.data();
          // dcol[r][:] = sum_o gt[o][r] * W[o][:], then scatter back (col2im)
          std::vector<float> dcol(static_cast<size_t>(R) * CKK, 0.0f);
#pragma omp parallel for schedule(static)
          for (int64_t r = 0; r < R; ++r) {
            float* drow = dcol.data() + r * CKK;
            for (int64_t o = 0; o < O; ++o) {
              float gv = gt[o * R + r];
              if (gv == 0.0f) continue;
              const float* wo = Wd + o * CKK;
              for (int64_t j = 0; j < CKK; ++j) drow[j] += gv * wo[j];
            }
          }
          // each thread owns whole images, so the scatter adds stay ordered
#pragma omp parallel
          {
            std::vector<float> dxp(static_cast<size_t>(C * PH * PW));
#pragma omp for schedule(static)
            for (int64_t n = 0; n < N; ++n) {
              std::fill(dxp.begin(), dxp.end(), 0.0f);
              for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                  const float* drow = dcol.data() + ((n * OH + oh) * OW + ow) * CKK;
                  for (int64_t c = 0; c < C; ++c) {
                    float* dxc = dxp.data() + c * PH * PW;
                    for (int64_t kh = 0; kh < KH; ++kh) {
                      float* dxr = dxc + (oh * stride + kh) * PW + ow * stride;
                      for (int64_t kw = 0; kw < KW; ++kw) dxr[kw] += drow[c * KH * KW + kh * KW + kw];
                    }
                  }
                }
              float* dst = px->grad.data() + n * C * H * W;
              for (int64_t c = 0; c < C; ++c) {
                const float* src = dxp.data() + c * PH * PW + pad * PW + pad;
                for (int64_t h = 0; h < H; ++h)
                  for (int64_t wcol = 0; wcol < W; ++wcol)
                    dst[c * H * W + h * W + wcol] += src[h * PW + wcol];
              }
            }
          }
        }

        if (in.size() > 2 && in[2]->requires_grad) {
          auto& pb = in[2];
          pb->ensure_grad();
          for (int64_t n = 0; n < N; ++n)
            for (int64_t o = 0; o < O; ++o) {
              const float* gc = G + ((n * O + o) * OH) * OW;
              double acc = 0.0;
              for (int64_t i = 0; i < OH * OW; ++i) acc += gc[i];
              pb->grad[o] += static_cast<float>(acc);
            }
        }
      });
}

// ---------------------------------------------------------------------------
// activations and reductions

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.data());
  for (auto& v : out) v = v > 0.0f ? v : 0.0f;
  return op_result(x.shape(), std::move(out), {x.node()},
                   [](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (size_t i = 0; i < self->grad.size(); ++i)
                       if (in[0]->data[i] > 0.0f) in[0]->grad[i] += self->grad[i];
                   });
}

Tensor max_pool2d(const Tensor& x, int k, int stride) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("max_pool2d expects [N,C,H,W], got " + shape_str(s));
  int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  int64_t OH = (H - k) / stride + 1;
  int64_t OW = (W - k) / stride + 1;
  if (OH <= 0 || OW <= 0) throw std::invalid_argument("max_pool2d: window larger than input " + shape_str(s));

  std::vector<float> out(static_cast<size_t>(N * C * OH * OW));
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  const float* X = x.data().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* xc = X + nc * H * W;
    for (int64_t oh = 0; oh < OH; ++oh) {
      for (int64_t ow = 0; ow < OW; ++ow) {
        int64_t ih0 = oh * stride, iw0 = ow * stride;
        float best = -std::numeric_limits<float>::infinity();
        int64_t best_idx = ih0 * W + iw0;
        for (int64_t kh = 0; kh < k; ++kh) {
          for (int64_t kw = 0; kw < k; ++kw) {
            int64_t idx = (ih0 + kh) * W + (iw0 + kw);
            if (xc[idx] > best) {  // strict >: ties go to the first row-major index
              best = xc[idx];
              best_idx = idx;
            }
          }
        }
        out[nc * OH * OW + oh * OW + ow] = best;
        (*argmax)[nc * OH * OW + oh * OW + ow] = nc * H * W + best_idx;
      }
    }
  }

  return op_result({N, C, OH, OW}, std::move(out), {x.node()},
                   [argmax](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (size_t i = 0; i < self->grad.size(); ++i)
                       in[0]->grad[(*argmax)[i]] += self->grad[i];
                   });
}

Tensor global_avg_pool(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 4)
    throw std::invalid_argument("global_avg_pool expects [N,C,H,W], got " + shape_str(s));
  int64_t N = s[0], C = s[1], HW = s[2] * s[3];
  std::vector<float> out(static_cast<size_t>(N * C));
  const float* X = x.data().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    for (int64_t i = 0; i < HW; ++i) acc += X[nc * HW + i];
    out[nc] = static_cast<float>(acc / static_cast<double>(HW));
  }
  return op_result({N, C}, std::move(out), {x.node()},
                   [HW](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     float inv = 1.0f / static_cast<float>(HW);
                     for (size_t i = 0; i < self->grad.size(); ++i) {
                       float g = self->grad[i] * inv;
                       for (int64_t j = 0; j < HW; ++j) in[0]->grad[i * HW + j] += g;
                     }
                   });
}

Tensor mean_all(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  int64_t n = x.numel();
  return op_result({1}, {static_cast<float>(acc / static_cast<double>(n))}, {x.node()},
                   [n](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     float g = self->grad[0] / static_cast<float>(n);
                     for (auto& v : in[0]->grad) v += g;
                   });
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return op_result({1}, {static_cast<float>(acc)}, {x.node()},
                   [](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     float g = self->grad[0];
                     for (auto& v : in[0]->grad) v += g;
                   });
}

Tensor softmax(const Tensor& x) {
  const auto& s = x.shape();
  int64_t d = s.back();
  int64_t rows = x.numel() / d;
  std::vector<float> out(x.data().size());
  const float* X = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = X + r * d;
    float mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double den = 0.0;
    for (int64_t j = 0; j < d; ++j) den += std::exp(static_cast<double>(xr[j] - mx));
    for (int64_t j = 0; j < d; ++j)
      out[r * d + j] = static_cast<float>(std::exp(static_cast<double>(xr[j] - mx)) / den);
  }
  return op_result(s, std::move(out), {x.node()},
                   [d, rows](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r) {
                       const float* y = self->data.data() + r * d;
                       const float* gy = self->grad.data() + r * d;
                       double dot = 0.0;
                       for (int64_t j = 0; j < d; ++j) dot += static_cast<double>(gy[j]) * y[j];
                       float* gx = in[0]->grad.data() + r * d;
                       for (int64_t j = 0; j < d; ++j)
                         gx[j] += y[j] * (gy[j] - static_cast<float>(dot));
                     }
                   });
}

Tensor log(const Tensor& x) {
  std::vector<float> out(x.data());
  for (auto& v : out) v = std::log(v);
  return op_result(x.shape(), std::move(out), {x.node()},
                   [](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (size_t i = 0; i < self->grad.size(); ++i)
                       in[0]->grad[i] += self->grad[i] / in[0]->data[i];
                   });
}

Tensor exp(const Tensor& x) {
  std::vector<float> out(x.data());
  for (auto& v : out) v = std::exp(v);
  return op_result(x.shape(), std::move(out), {x.node()},
                   [](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (size_t i = 0; i < self->grad.size(); ++i)
                       in[0]->grad[i] += self->grad[i] * self->data[i];
                   });
}

Tensor l2_normalize(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() > 2) throw std::invalid_argument("l2_normalize expects 1-D or 2-D, got " + shape_str(s));
  int64_t d = s.back();
  int64_t rows = x.numel() / d;
  std::vector<float> out(x.data().size());
  auto norms = std::make_shared<std::vector<float>>(rows);
  const float* X = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t j = 0; j < d; ++j) acc += static_cast<double>(X[r * d + j]) * X[r * d + j];
    float norm = static_cast<float>(std::sqrt(acc));
    (*norms)[r] = norm;
    if (norm == 0.0f) {
      // degenerate embedding: keep the zero vector rather than emit NaN
      if (g_zero_norm_warnings.fetch_add(1) == 0)
        std::fprintf(stderr, "warning: l2_normalize of a zero vector, returning zeros\n");
      for (int64_t j = 0; j < d; ++j) out[r * d + j] = 0.0f;
    } else {
      for (int64_t j = 0; j < d; ++j) out[r * d + j] = X[r * d + j] / norm;
    }
  }
  return op_result(s, std::move(out), {x.node()},
                   [d, rows, norms](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r) {
                       float norm = (*norms)[r];
                       if (norm == 0.0f) continue;  // subgradient 0 at the zero vector
                       const float* y = self->data.data() + r * d;
                       const float* gy = self->grad.data() + r * d;
                       double dot = 0.0;
                       for (int64_t j = 0; j < d; ++j) dot += static_cast<double>(gy[j]) * y[j];
                       float* gx = in[0]->grad.data() + r * d;
                       for (int64_t j = 0; j < d; ++j)
                         gx[j] += (gy[j] - static_cast<float>(dot) * y[j]) / norm;
                     }
                   });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat of zero tensors");
  const auto& s0 = xs[0].shape();
  if (axis != 0 && !(axis == 1 && s0.size() == 2))
    throw std::invalid_argument("concat supports axis 0, or axis 1 for 2-D tensors");
  for (const auto& x : xs) {
    if (x.shape().size() != s0.size()) shape_mismatch("concat", s0, x.shape());
    for (size_t i = 0; i < s0.size(); ++i)
      if (static_cast<int>(i) != axis && x.shape()[i] != s0[i])
        shape_mismatch("concat", s0, x.shape());
  }

  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& x : xs) out_shape[axis] += x.shape()[axis];

  std::vector<float> out;
  out.reserve(shape_numel(out_shape));
  std::vector<NodePtr> inputs;
  if (axis == 0) {
    for (const auto& x : xs) {
      out.insert(out.end(), x.data().begin(), x.data().end());
      inputs.push_back(x.node());
    }
    return op_result(out_shape, std::move(out), std::move(inputs),
                     [](detail::Node* self, const std::vector<NodePtr>& in) {
                       size_t off = 0;
                       for (auto& p : in) {
                         if (p->requires_grad) {
                           p->ensure_grad();
                           for (size_t i = 0; i < p->grad.size(); ++i)
                             p->grad[i] += self->grad[off + i];
                         }
                         off += p->data.size();
                       }
                     });
  }
  // axis == 1, 2-D
  int64_t rows = s0[0];
  out.assign(shape_numel(out_shape), 0.0f);
  int64_t total = out_shape[1];
  int64_t coloff = 0;
  for (const auto& x : xs) {
    int64_t c = x.shape()[1];
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < c; ++j) out[r * total + coloff + j] = x.data()[r * c + j];
    coloff += c;
    inputs.push_back(x.node());
  }
  return op_result(out_shape, std::move(out), std::move(inputs),
                   [rows, total](detail::Node* self, const std::vector<NodePtr>& in) {
                     int64_t coloff = 0;
                     for (auto& p : in) {
                       int64_t c = p->shape[1];
                       if (p->requires_grad) {
                         p->ensure_grad();
                         for (int64_t r = 0; r < rows; ++r)
                           for (int64_t j = 0; j < c; ++j)
                             p->grad[r * c + j] += self->grad[r * total + coloff + j];
                       }
                       coloff += c;
                     }
                   });
}

Tensor row_sum(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("row_sum expects 2-D, got " + shape_str(s));
  int64_t n = s[0], m = s[1];
  std::vector<float> out(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (int64_t j = 0; j < m; ++j) acc += x.data()[r * m + j];
    out[r] = static_cast<float>(acc);
  }
  return op_result({n}, std::move(out), {x.node()},
                   [n, m](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (int64_t r = 0; r < n; ++r)
                       for (int64_t j = 0; j < m; ++j) in[0]->grad[r * m + j] += self->grad[r];
                   });
}

Tensor col_sum(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("col_sum expects 2-D, got " + shape_str(s));
  int64_t n = s[0], m = s[1];
  std::vector<float> out(static_cast<size_t>(m));
  for (int64_t j = 0; j < m; ++j) {
    double acc = 0.0;
    for (int64_t r = 0; r < n; ++r) acc += x.data()[r * m + j];
    out[j] = static_cast<float>(acc);
  }
  return op_result({m}, std::move(out), {x.node()},
                   [n, m](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (int64_t r = 0; r < n; ++r)
                       for (int64_t j = 0; j < m; ++j) in[0]->grad[r * m + j] += self->grad[j];
                   });
}

Tensor diag(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 2 || s[0] != s[1])
    throw std::invalid_argument("diag expects a square matrix, got " + shape_str(s));
  int64_t n = s[0];
  std::vector<float> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = x.data()[i * n + i];
  return op_result({n}, std::move(out), {x.node()},
                   [n](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     for (int64_t i = 0; i < n; ++i) in[0]->grad[i * n + i] += self->grad[i];
                   });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw std::invalid_argument("cross_entropy expects 2-D logits, got " + shape_str(s));
  int64_t n = s[0], c = s[1];
  if (static_cast<int64_t>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " rows");
  for (int l : labels)
    if (l < 0 || l >= c)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(l) +
                                  " out of range [0," + std::to_string(c) + ")");

  auto probs = std::make_shared<std::vector<float>>(logits.data().size());
  const float* X = logits.data().data();
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const float* xr = X + r * c;
    float mx = xr[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    double den = 0.0;
    for (int64_t j = 0; j < c; ++j) den += std::exp(static_cast<double>(xr[j] - mx));
    for (int64_t j = 0; j < c; ++j)
      (*probs)[r * c + j] = static_cast<float>(std::exp(static_cast<double>(xr[j] - mx)) / den);
    total += -(static_cast<double>(xr[labels[r]] - mx) - std::log(den));
  }

  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return op_result({1}, {static_cast<float>(total / static_cast<double>(n))}, {logits.node()},
                   [n, c, probs, labels_copy](detail::Node* self, const std::vector<NodePtr>& in) {
                     if (!in[0]->requires_grad) return;
                     in[0]->ensure_grad();
                     float g = self->grad[0] / static_cast<float>(n);
                     for (int64_t r = 0; r < n; ++r) {
                       for (int64_t j = 0; j < c; ++j)
                         in[0]->grad[r * c + j] += g * (*probs)[r * c + j];
                       in[0]->grad[r * c + (*labels_copy)[r]] -= g;
                     }
                   });
}

}  // namespace cfdr
