#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace ecgstress {

namespace fault {
// Negative-control hook for the gradient checker: when set, conv1d's weight
// gradient is deliberately scaled wrong.
inline std::atomic<bool> corrupt_conv1d_backward{false};
} // namespace fault

// Records which side of every ReLU/max-pool kink a forward pass landed on, so
// a finite-difference probe can tell when a perturbation crossed one.
struct KinkSignature {
    std::vector<std::uint64_t> codes;
    bool operator==(const KinkSignature&) const = default;
};

namespace detail {

inline thread_local KinkSignature* kink_recorder = nullptr;

// Grad buffer of parent i, or nullptr when that input does not need one.
inline std::vector<double>* parent_grad(Node& self, std::size_t i) {
    auto& p = self.parents[i];
    return p->requires_grad ? &p->grad : nullptr;
}

inline const std::vector<double>& parent_data(const Node& self, std::size_t i) {
    return self.parents[i]->data;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* arg) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                             ", got " + shape_string(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

// c[b] += a[b] · b[b] for row-major blocks, i-k-j order.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            if (aip == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// da += dc · bᵀ
inline void gemm_acc_nt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k,
                        std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* dci = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += dci[j] * bp[j];
            da[i * k + p] += acc;
        }
    }
}

// db += aᵀ · dc
inline void gemm_acc_tn(const double* a, const double* dc, double* db, std::size_t m, std::size_t k,
                        std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* dci = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            if (aip == 0.0) continue;
            double* dbp = db + p * n;
            for (std::size_t j = 0; j < n; ++j) dbp[j] += aip * dci[j];
        }
    }
}

} // namespace detail

// Scoped capture of kink decisions made by relu and maxpool1d on this thread.
class KinkRecording {
public:
    explicit KinkRecording(KinkSignature& sink) : previous_(detail::kink_recorder) {
        sink.codes.clear();
        detail::kink_recorder = &sink;
    }
    ~KinkRecording() { detail::kink_recorder = previous_; }
    KinkRecording(const KinkRecording&) = delete;
    KinkRecording& operator=(const KinkRecording&) = delete;

private:
    KinkSignature* previous_;
};

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return Tensor::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (auto* g = detail::parent_grad(self, p)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
            }
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return Tensor::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const auto& ad = detail::parent_data(self, 0);
        const auto& bd = detail::parent_data(self, 1);
        if (auto* g = detail::parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * bd[i];
        }
        if (auto* g = detail::parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * ad[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    return Tensor::make_result("scale", x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
        auto* g = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * factor;
    });
}

// x[..., d] + bias[d]
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(bias, 1, "add_bias", "bias");
    const std::size_t d = bias.numel();
    if (x.rank() == 0 || x.shape().back() != d) {
        throw DimensionError("add_bias: last dim of " + shape_string(x.shape()) + " does not match bias " +
                             shape_string(bias.shape()));
    }
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % d];
    return Tensor::make_result("add_bias", x.shape(), std::move(out), {x, bias}, [d](detail::Node& self) {
        if (auto* g = detail::parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        }
        if (auto* g = detail::parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % d] += self.grad[i];
        }
    });
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return Tensor::make_result("sum", {}, {s}, {x}, [](detail::Node& self) {
        auto* g = detail::parent_grad(self, 0);
        for (double& v : *g) v += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// Layout

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return Tensor::make_result("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
        auto* g = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    });
}

// out.shape[i] = x.shape[perm[i]]
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    if (perm.size() != r) throw DimensionError("permute: permutation rank does not match tensor rank");
    std::vector<bool> used(r, false);
    for (auto p : perm) {
        if (p >= r || used[p]) throw ArgumentError("permute: invalid permutation");
        used[p] = true;
    }
    Shape out_shape(r);
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);

    // source offset for each destination element
    const std::size_t n = x.numel();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
        src[flat] = off;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x[src[i]];
    return Tensor::make_result("permute", std::move(out_shape), std::move(out), {x},
                               [src = std::move(src)](detail::Node& self) {
                                   auto* g = detail::parent_grad(self, 0);
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[src[i]] += self.grad[i];
                               });
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose", "x");
    return permute(x, {1, 0});
}

// ---------------------------------------------------------------------------
// Linear algebra

// Batched product of rank-3 tensors: [B×m×k] · [B×k×n] -> [B×m×n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 3, "bmm", "a");
    detail::require_rank(b, 3, "bmm", "b");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw DimensionError("bmm: incompatible shapes " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()));
    }
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
        detail::gemm_acc(a.data().data() + s * m * k, b.data().data() + s * k * n, out.data() + s * m * n, m, k, n);
    }
    return Tensor::make_result("bmm", {batch, m, n}, std::move(out), {a, b},
                               [batch, m, k, n](detail::Node& self) {
                                   const auto& ad = detail::parent_data(self, 0);
                                   const auto& bd = detail::parent_data(self, 1);
                                   auto* ga = detail::parent_grad(self, 0);
                                   auto* gb = detail::parent_grad(self, 1);
                                   for (std::size_t s = 0; s < batch; ++s) {
                                       const double* dc = self.grad.data() + s * m * n;
                                       if (ga) detail::gemm_acc_nt(dc, bd.data() + s * k * n, ga->data() + s * m * k, m, k, n);
                                       if (gb) detail::gemm_acc_tn(ad.data() + s * m * k, dc, gb->data() + s * k * n, m, k, n);
                                   }
                               });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    return Tensor::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        const auto& ad = detail::parent_data(self, 0);
        const auto& bd = detail::parent_data(self, 1);
        if (auto* ga = detail::parent_grad(self, 0)) detail::gemm_acc_nt(self.grad.data(), bd.data(), ga->data(), m, k, n);
        if (auto* gb = detail::parent_grad(self, 1)) detail::gemm_acc_tn(ad.data(), self.grad.data(), gb->data(), m, k, n);
    });
}

// x[..., in] · w[in×out], applied row-wise over all leading dims.
inline Tensor linear(const Tensor& x, const Tensor& w) {
    detail::require_rank(w, 2, "linear", "w");
    if (x.rank() == 0 || x.shape().back() != w.dim(0)) {
        throw DimensionError("dense: input " + shape_string(x.shape()) + " does not match weight " +
                             shape_string(w.shape()));
    }
    if (x.rank() == 2) return matmul(x, w);
    const std::size_t rows = x.numel() / w.dim(0);
    Shape out_shape = x.shape();
    out_shape.back() = w.dim(1);
    return reshape(matmul(reshape(x, {rows, w.dim(0)}), w), std::move(out_shape));
}

inline Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (b.rank() != 1 || w.rank() != 2 || b.dim(0) != w.dim(1)) {
        throw DimensionError("dense: bias " + (b.defined() ? shape_string(b.shape()) : std::string("<none>")) +
                             " does not match weight " + shape_string(w.shape()));
    }
    return add_bias(linear(x, w), b);
}

// ---------------------------------------------------------------------------
// Convolution and pooling

// Valid (unpadded) 1-D convolution: x[B×Cin×L], w[Cout×Cin×K], bias[Cout].
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride) {
    if (stride == 0) throw ArgumentError("conv1d: stride must be positive");
    detail::require_rank(x, 3, "conv1d", "x");
    detail::require_rank(w, 3, "conv1d", "w");
    detail::require_rank(bias, 1, "conv1d", "bias");
    const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
    const std::size_t cout = w.dim(0), kernel = w.dim(2);
    if (w.dim(1) != cin || bias.dim(0) != cout) {
        throw DimensionError("conv1d: input " + shape_string(x.shape()) + ", weight " + shape_string(w.shape()) +
                             " and bias " + shape_string(bias.shape()) + " disagree");
    }
    if (len < kernel) {
        throw DimensionError("conv1d: empty output, input length " + std::to_string(len) + " < kernel " +
                             std::to_string(kernel));
    }
    const std::size_t out_len = (len - kernel) / stride + 1;
    std::vector<double> out(batch * cout * out_len);
    const auto xd = x.data();
    const auto wd = w.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < cout; ++o) {
            double* row = out.data() + (b * cout + o) * out_len;
            std::fill(row, row + out_len, bias[o]);
            for (std::size_t i = 0; i < cin; ++i) {
                const double* xi = xd.data() + (b * cin + i) * len;
                const double* wo = wd.data() + (o * cin + i) * kernel;
                for (std::size_t k = 0; k < kernel; ++k) {
                    const double wk = wo[k];
                    const double* xs = xi + k;
                    for (std::size_t t = 0; t < out_len; ++t) row[t] += wk * xs[t * stride];
                }
            }
        }
    }
    return Tensor::make_result(
        "conv1d", {batch, cout, out_len}, std::move(out), {x, w, bias},
        [=](detail::Node& self) {
            const auto& xv = detail::parent_data(self, 0);
            const auto& wv = detail::parent_data(self, 1);
            auto* gx = detail::parent_grad(self, 0);
            auto* gw = detail::parent_grad(self, 1);
            auto* gb = detail::parent_grad(self, 2);
            const double w_scale = fault::corrupt_conv1d_backward.load() ? 1.05 : 1.0;
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t o = 0; o < cout; ++o) {
                    const double* dy = self.grad.data() + (b * cout + o) * out_len;
                    if (gb) {
                        double acc = 0.0;
                        for (std::size_t t = 0; t < out_len; ++t) acc += dy[t];
                        (*gb)[o] += acc;
                    }
                    for (std::size_t i = 0; i < cin; ++i) {
                        const std::size_t xoff = (b * cin + i) * len;
                        const std::size_t woff = (o * cin + i) * kernel;
                        for (std::size_t k = 0; k < kernel; ++k) {
                            if (gw) {
                                double acc = 0.0;
                                for (std::size_t t = 0; t < out_len; ++t) acc += dy[t] * xv[xoff + t * stride + k];
                                (*gw)[woff + k] += acc * w_scale;
                            }
                            if (gx) {
                                const double wk = wv[woff + k];
                                for (std::size_t t = 0; t < out_len; ++t) (*gx)[xoff + t * stride + k] += wk * dy[t];
                            }
                        }
                    }
                }
            }
        });
}

// Max over windows of the last axis; ties go to the first maximum.
inline Tensor maxpool1d(const Tensor& x, std::size_t pool, std::size_t stride) {
    if (pool == 0 || stride == 0) throw ArgumentError("maxpool1d: pool and stride must be positive");
    detail::require_rank(x, 3, "maxpool1d", "x");
    const std::size_t rows = x.dim(0) * x.dim(1), len = x.dim(2);
    if (len < pool) {
        throw DimensionError("maxpool1d: empty output, input length " + std::to_string(len) + " < pool " +
                             std::to_string(pool));
    }
    const std::size_t out_len = (len - pool) / stride + 1;
    std::vector<double> out(rows * out_len);
    std::vector<std::size_t> argmax(rows * out_len);
    const auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t t = 0; t < out_len; ++t) {
            std::size_t best = r * len + t * stride;
            for (std::size_t k = 1; k < pool; ++k) {
                const std::size_t j = r * len + t * stride + k;
                if (xd[j] > xd[best]) best = j;
            }
            out[r * out_len + t] = xd[best];
            argmax[r * out_len + t] = best;
        }
    }
    if (detail::kink_recorder) {
        auto& codes = detail::kink_recorder->codes;
        codes.insert(codes.end(), argmax.begin(), argmax.end());
    }
    return Tensor::make_result("maxpool1d", {x.dim(0), x.dim(1), out_len}, std::move(out), {x},
                               [argmax = std::move(argmax)](detail::Node& self) {
                                   auto* g = detail::parent_grad(self, 0);
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[argmax[i]] += self.grad[i];
                               });
}

// ---------------------------------------------------------------------------
// Nonlinearities

enum class Activation { relu, sigmoid };

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    if (detail::kink_recorder) {
        auto& codes = detail::kink_recorder->codes;
        std::uint64_t word = 0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (x[i] > 0.0) word |= std::uint64_t{1} << (i % 64);
            if (i % 64 == 63 || i + 1 == out.size()) {
                codes.push_back(word);
                word = 0;
            }
        }
    }
    return Tensor::make_result("relu", x.shape(), std::move(out), {x}, [](detail::Node& self) {
        const auto& xd = detail::parent_data(self, 0);
        auto* g = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (xd[i] > 0.0) (*g)[i] += self.grad[i];
        }
    });
}

// Input is clamped to ±700 so both tails stay finite and strictly inside (0, 1]
// (e^-700 ≈ 9.9e-305).
inline Tensor sigmoid(const Tensor& x) {
    constexpr double limit = 700.0;
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = std::clamp(x[i], -limit, limit);
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    return Tensor::make_result("sigmoid", x.shape(), out, {x}, [y = out](detail::Node& self) {
        auto* g = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * y[i] * (1.0 - y[i]);
    });
}

inline Tensor elementwise(const Tensor& x, Activation kind) {
    return kind == Activation::relu ? relu(x) : sigmoid(x);
}

inline Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("softmax_lastdim: empty last dimension");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * n;
        double* yr = out.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += (yr[j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
    }
    return Tensor::make_result("softmax", x.shape(), out, {x}, [y = out, n, rows](detail::Node& self) {
        auto* g = detail::parent_grad(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = y.data() + r * n;
            const double* dy = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dy[j] * yr[j];
            for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += yr[j] * (dy[j] - dot);
        }
    });
}

// Normalizes each last-axis slice with its biased variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    detail::require_rank(gamma, 1, "layer_norm", "gamma");
    detail::require_rank(beta, 1, "layer_norm", "beta");
    if (x.rank() == 0 || x.shape().back() != gamma.dim(0) || gamma.shape() != beta.shape() || gamma.dim(0) == 0) {
        throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " does not match gamma " +
                             shape_string(gamma.shape()) + " / beta " + shape_string(beta.shape()));
    }
    const std::size_t d = gamma.dim(0);
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
            out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
        }
    }
    return Tensor::make_result(
        "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
        [xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](detail::Node& self) {
            const auto& gam = detail::parent_data(self, 1);
            auto* gx = detail::parent_grad(self, 0);
            auto* gg = detail::parent_grad(self, 1);
            auto* gb = detail::parent_grad(self, 2);
            std::vector<double> dxhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dy = self.grad.data() + r * d;
                const double* xh = xhat.data() + r * d;
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    dxhat[j] = dy[j] * gam[j];
                    sum_dxhat += dxhat[j];
                    sum_dxhat_xhat += dxhat[j] * xh[j];
                    if (gg) (*gg)[j] += dy[j] * xh[j];
                    if (gb) (*gb)[j] += dy[j];
                }
                if (gx) {
                    const double k = inv_std[r] / static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        (*gx)[r * d + j] +=
                            k * (static_cast<double>(d) * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
                    }
                }
            }
        });
}

// Inverted dropout; identity at inference or when rate == 0.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("dropout: rate must lie in [0, 1)");
    if (!training || rate == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.numel());
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
        out[i] = x[i] * mask[i];
    }
    return Tensor::make_result("dropout", x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
        auto* g = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * mask[i];
    });
}

} // namespace ecgstress
