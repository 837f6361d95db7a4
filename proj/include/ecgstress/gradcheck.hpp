#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "model.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "training.hpp"

namespace ecgstress::gradcheck {

struct Tolerance {
    double relative = 1e-6;
    // Denominator floor: |a − n| / max(|a|, |n|, floor).
    double floor = 1e-3;
    double step = 1e-5;
};

struct Result {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t checked = 0;
    std::size_t failed = 0;
    std::size_t kink_excluded = 0;
    double max_kink_fraction = 0.0;
    bool passed = false;
    double seconds = 0.0;
};

inline double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central differences on every element of every input against the analytic
// gradient of loss_fn(). With detect_kinks set, a coordinate whose ±step probes
// change any ReLU/max-pool decision is excluded instead of compared; at most
// max_kink_fraction of coordinates may be excluded.
inline Result check(const std::string& name, std::vector<Tensor> inputs, const std::function<Tensor()>& loss_fn,
                    const Tolerance& tol, bool detect_kinks = false, double max_kink_fraction = 0.0) {
    const auto t0 = std::chrono::steady_clock::now();
    Result r;
    r.name = name;
    r.tolerance = tol.relative;
    r.max_kink_fraction = max_kink_fraction;

    for (auto& t : inputs) t.zero_grad();
    KinkSignature base;
    {
        KinkRecording rec(base);
        loss_fn().backward();
    }
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
        if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0);
        t.zero_grad();
    }

    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            KinkSignature plus_sig, minus_sig;
            data[i] = saved + tol.step;
            double plus;
            {
                KinkRecording rec(plus_sig);
                plus = loss_fn().item();
            }
            data[i] = saved - tol.step;
            double minus;
            {
                KinkRecording rec(minus_sig);
                minus = loss_fn().item();
            }
            data[i] = saved;
            if (detect_kinks && (!(plus_sig == base) || !(minus_sig == base))) {
                ++r.kink_excluded;
                continue;
            }
            const double numeric = (plus - minus) / (2.0 * tol.step);
            const double err = relative_error(analytic[k][i], numeric, tol.floor);
            ++r.checked;
            r.max_rel_error = std::max(r.max_rel_error, err);
            if (!(err <= tol.relative)) ++r.failed;
        }
    }
    const double total = static_cast<double>(r.checked + r.kink_excluded);
    r.passed = r.failed == 0 && r.checked > 0 &&
               static_cast<double>(r.kink_excluded) <= max_kink_fraction * total;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(data), true);
}

// Projects an output onto fixed random weights so every output element
// contributes a distinct gradient.
inline Tensor probe_loss(const Tensor& out, const std::vector<double>& weights) {
    return sum(mul(out, Tensor(out.shape(), weights)));
}

inline std::vector<double> random_weights(std::size_t n, Rng& rng) {
    std::vector<double> w(n);
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    return w;
}

// Full reduced-configuration network, batch of 2, eval mode, weighted BCE.
inline Result check_model(std::uint64_t seed = 7, const Tolerance& tol = {1e-4, 1e-6, 1e-5}) {
    const auto cfg = ModelConfig::reduced();
    Rng rng(seed);
    auto params = init_params(cfg, rng);
    // nonzero biases and norm parameters so their gradients are exercised off the init point
    for (auto& nt : params.named()) {
        if (nt.name.find("bias") != std::string::npos || nt.name.find("beta") != std::string::npos) {
            for (auto& v : nt.tensor.mutable_data()) v = rng.uniform(-0.1, 0.1);
        } else if (nt.name.find("gamma") != std::string::npos) {
            for (auto& v : nt.tensor.mutable_data()) v = rng.uniform(0.8, 1.2);
        }
    }
    std::vector<double> x(2 * cfg.window_len);
    for (auto& v : x) v = rng.normal();
    const Tensor input({2, 1, cfg.window_len}, std::move(x));
    const std::vector<double> y{1.0, 0.0};
    auto loss = [&] {
        Rng unused(0);
        return weighted_bce(forward(params, cfg, input, unused, false), y, 1.5, 0.75);
    };
    return check("model(reduced)", params.tensors(), loss, tol, true, 0.01);
}

// Every primitive the network uses, then the reduced full model.
inline std::vector<Result> run_suite(std::uint64_t seed = 1, bool include_model = true) {
    std::vector<Result> out;
    Rng rng(seed);
    const Tolerance smooth{1e-6, 1e-3, 1e-5};

    {
        auto a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
        auto w = random_weights(12, rng);
        out.push_back(check("matmul", {a, b}, [&] { return probe_loss(matmul(a, b), w); }, smooth));
    }
    {
        auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng);
        auto w = random_weights(30, rng);
        out.push_back(check("bmm", {a, b}, [&] { return probe_loss(bmm(a, b), w); }, smooth));
    }
    {
        auto x = random_tensor({2, 3, 20}, rng), k = random_tensor({4, 3, 5}, rng), b = random_tensor({4}, rng);
        auto w = random_weights(2 * 4 * 8, rng);
        out.push_back(check("conv1d", {x, k, b}, [&] { return probe_loss(conv1d(x, k, b, 2), w); }, smooth));
    }
    {
        auto x = random_tensor({2, 2, 17}, rng);
        auto w = random_weights(2 * 2 * 8, rng);
        out.push_back(check("maxpool1d", {x}, [&] { return probe_loss(maxpool1d(x, 2, 2), w); }, smooth, true, 0.0));
    }
    {
        auto x = random_tensor({3, 4}, rng), k = random_tensor({4, 2}, rng), b = random_tensor({2}, rng);
        auto w = random_weights(6, rng);
        out.push_back(check("dense", {x, k, b}, [&] { return probe_loss(dense(x, k, b), w); }, smooth));
    }
    {
        auto x = random_tensor({3, 7}, rng);
        auto w = random_weights(21, rng);
        out.push_back(check("relu", {x}, [&] { return probe_loss(relu(x), w); }, smooth, true, 0.0));
    }
    {
        auto x = random_tensor({3, 7}, rng, -4.0, 4.0);
        auto w = random_weights(21, rng);
        out.push_back(check("sigmoid", {x}, [&] { return probe_loss(sigmoid(x), w); }, smooth));
    }
    {
        auto x = random_tensor({3, 5}, rng, -2.0, 2.0);
        auto w = random_weights(15, rng);
        out.push_back(check("softmax", {x}, [&] { return probe_loss(softmax_lastdim(x), w); }, smooth));
    }
    {
        auto x = random_tensor({2, 6}, rng), g = random_tensor({6}, rng, 0.5, 1.5), b = random_tensor({6}, rng);
        auto w = random_weights(12, rng);
        out.push_back(check("layer_norm", {x, g, b}, [&] { return probe_loss(layer_norm(x, g, b, 1e-5), w); }, smooth));
    }
    {
        auto x = random_tensor({4, 6}, rng);
        auto w = random_weights(24, rng);
        const auto mask_seed = rng.next_u64();
        out.push_back(check("dropout", {x}, [&] {
            Rng r(mask_seed); // identical mask for every probe
            return probe_loss(dropout(x, 0.5, r, true), w);
        }, smooth));
    }
    {
        auto x = random_tensor({2, 3, 4}, rng);
        auto w = random_weights(24, rng);
        out.push_back(check("permute+reshape", {x}, [&] {
            return probe_loss(reshape(permute(x, {2, 0, 1}), {4, 6}), w);
        }, smooth));
    }
    {
        auto p = random_tensor({16}, rng, 0.05, 0.95);
        std::vector<double> y(16);
        for (auto& v : y) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        out.push_back(check("weighted_bce", {p}, [&] { return weighted_bce(p, y, 1.7, 0.6); }, smooth));
    }
    {
        auto q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng), v = random_tensor({3, 4}, rng);
        auto w = random_weights(12, rng);
        out.push_back(check("attention", {q, k, v}, [&] { return probe_loss(attention(q, k, v), w); },
                            {1e-5, 1e-3, 1e-5}));
    }
    {
        AttentionParams p{random_tensor({8, 8}, rng, -0.5, 0.5), random_tensor({8, 8}, rng, -0.5, 0.5),
                          random_tensor({8, 8}, rng, -0.5, 0.5), random_tensor({8, 8}, rng, -0.5, 0.5)};
        auto x = random_tensor({2, 3, 8}, rng);
        auto w = random_weights(48, rng);
        out.push_back(check("multi_head_attention", {x, p.w_q, p.w_k, p.w_v, p.w_o},
                            [&] { return probe_loss(multi_head_attention(x, p, 2), w); }, {1e-5, 1e-3, 1e-5}));
    }
    if (include_model) out.push_back(check_model(seed + 6));
    return out;
}

} // namespace ecgstress::gradcheck
