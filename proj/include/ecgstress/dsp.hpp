#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "windows.hpp"

namespace ecgstress::dsp {

struct FilterSpec {
    int order = 5;
    double cutoff_hz = 0.5;
    double sample_rate_hz = 256.0;

    void validate() const {
        if (order < 1) throw ArgumentError("filter order must be >= 1");
        if (!(sample_rate_hz > 0.0)) throw ArgumentError("sample rate must be positive");
        if (!(cutoff_hz > 0.0 && cutoff_hz < sample_rate_hz / 2.0)) {
            throw ArgumentError("cutoff " + std::to_string(cutoff_hz) + " Hz must lie strictly between 0 and Nyquist (" +
                                std::to_string(sample_rate_hz / 2.0) + " Hz)");
        }
    }
};

// One biquad, a0 normalized to 1:
//   H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)
struct Biquad {
    double b0 = 1.0, b1 = 0.0, b2 = 0.0, a1 = 0.0, a2 = 0.0;

    std::complex<double> response(double omega) const {
        const auto z1 = std::polar(1.0, -omega);
        const auto z2 = z1 * z1;
        return (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2);
    }

    // Roots of z² + a1·z + a2 strictly inside the unit circle.
    bool stable() const {
        const std::complex<double> disc = std::sqrt(std::complex<double>(a1 * a1 - 4.0 * a2, 0.0));
        const auto r1 = (-a1 + disc) / 2.0;
        const auto r2 = (-a1 - disc) / 2.0;
        return std::abs(r1) < 1.0 && std::abs(r2) < 1.0;
    }
};

struct Sos {
    std::vector<Biquad> sections;

    std::complex<double> response(double freq_hz, double sample_rate_hz) const {
        const double omega = 2.0 * std::numbers::pi * freq_hz / sample_rate_hz;
        std::complex<double> h{1.0, 0.0};
        for (const auto& s : sections) h *= s.response(omega);
        return h;
    }

    double magnitude(double freq_hz, double sample_rate_hz) const { return std::abs(response(freq_hz, sample_rate_hz)); }
};

// Digital Butterworth high-pass: analog low-pass prototype, s -> Ωc/s, then the
// bilinear transform with the cutoff prewarped so |H| = 1/√2 lands exactly on
// cutoff_hz. Each section is scaled to unit gain at Nyquist.
inline Sos design_butterworth_highpass(const FilterSpec& spec) {
    spec.validate();
    const int n = spec.order;
    const double warped = std::tan(std::numbers::pi * spec.cutoff_hz / spec.sample_rate_hz);
    Sos sos;
    // Prototype poles exp(jπ(2k+n-1)/(2n)); k ≤ n/2 yields one pole of each conjugate pair.
    for (int k = 1; k <= n / 2; ++k) {
        const auto proto = std::polar(1.0, std::numbers::pi * (2.0 * k + n - 1) / (2.0 * n));
        const auto analog = warped / proto;
        const auto digital = (1.0 + analog) / (1.0 - analog);
        Biquad s;
        s.a1 = -2.0 * digital.real();
        s.a2 = std::norm(digital);
        const double gain = (1.0 - s.a1 + s.a2) / 4.0;
        s.b0 = gain;
        s.b1 = -2.0 * gain;
        s.b2 = gain;
        sos.sections.push_back(s);
    }
    if (n % 2 == 1) {
        const double pole = (1.0 - warped) / (1.0 + warped);
        Biquad s;
        s.a1 = -pole;
        const double gain = (1.0 + pole) / 2.0;
        s.b0 = gain;
        s.b1 = -gain;
        sos.sections.push_back(s);
    }
    return sos;
}

// Causal cascade in transposed direct form II, zero initial state.
inline std::vector<double> filter_forward(const Sos& sos, std::span<const double> x) {
    if (x.empty()) throw ArgumentError("filter_forward: empty input");
    std::vector<double> y(x.begin(), x.end());
    for (const auto& s : sos.sections) {
        double z1 = 0.0, z2 = 0.0;
        for (double& v : y) {
            const double in = v;
            const double out = s.b0 * in + z1;
            z1 = s.b1 * in - s.a1 * out + z2;
            z2 = s.b2 * in - s.a2 * out;
            v = out;
        }
    }
    return y;
}

struct ResampleRatio {
    std::int64_t up = 1;
    std::int64_t down = 1;
};

inline ResampleRatio resample_ratio(int from_hz, int to_hz) {
    if (from_hz <= 0 || to_hz <= 0) throw ArgumentError("resample: rates must be positive");
    if (to_hz > from_hz) {
        throw UnsupportedError("resample: upsampling " + std::to_string(from_hz) + " -> " + std::to_string(to_hz) +
                               " Hz is not supported");
    }
    const auto g = std::gcd(from_hz, to_hz);
    return {to_hz / g, from_hz / g};
}

// Taps scale with max(L, M) so the transition band is a fixed fraction of
// the output Nyquist whichever side sets the cutoff.
inline constexpr std::int64_t resample_taps_per_phase = 64;
inline constexpr double resample_kaiser_beta = 8.6;

// Anti-aliasing prototype at the upsampled rate: Kaiser-windowed sinc with
// cutoff min(π/L, π/M), 64·max(L, M) + 1 taps, DC gain L.
inline std::vector<double> resample_prototype(const ResampleRatio& r) {
    const std::int64_t half = resample_taps_per_phase / 2 * std::max(r.up, r.down);
    const std::int64_t taps = 2 * half + 1;
    const double fc = 0.5 / static_cast<double>(std::max(r.up, r.down)); // cycles per upsampled sample
    const double i0_beta = std::cyl_bessel_i(0.0, resample_kaiser_beta);
    std::vector<double> h(static_cast<std::size_t>(taps));
    for (std::int64_t i = 0; i < taps; ++i) {
        const double t = static_cast<double>(i - half);
        const double arg = 2.0 * fc * t;
        const double sinc = t == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
        const double ratio = t / static_cast<double>(half);
        const double window = std::cyl_bessel_i(0.0, resample_kaiser_beta * std::sqrt(std::max(0.0, 1.0 - ratio * ratio))) / i0_beta;
        h[static_cast<std::size_t>(i)] = 2.0 * fc * sinc * window;
    }
    const double total = std::accumulate(h.begin(), h.end(), 0.0);
    for (auto& v : h) v *= static_cast<double>(r.up) / total;
    return h;
}

// Rational polyphase resampling by L/M (lowest terms). The filter delay is
// compensated, so output sample m is aligned with input time m·M/L.
inline std::vector<double> resample(std::span<const double> x, int from_hz, int to_hz) {
    const auto r = resample_ratio(from_hz, to_hz);
    if (r.up == 1 && r.down == 1) return {x.begin(), x.end()};
    const auto h = resample_prototype(r);
    const std::int64_t half = static_cast<std::int64_t>(h.size() / 2);
    const auto len = static_cast<std::int64_t>(x.size());
    const std::int64_t out_len = (len * r.up + r.down - 1) / r.down;
    std::vector<double> y(static_cast<std::size_t>(out_len));
    for (std::int64_t m = 0; m < out_len; ++m) {
        const std::int64_t t = m * r.down + half; // position in the filter's upsampled frame
        std::int64_t j_lo = t - 2 * half <= 0 ? 0 : (t - 2 * half + r.up - 1) / r.up;
        std::int64_t j_hi = std::min(t / r.up, len - 1);
        double acc = 0.0;
        for (std::int64_t j = j_lo; j <= j_hi; ++j) acc += x[static_cast<std::size_t>(j)] * h[static_cast<std::size_t>(t - j * r.up)];
        y[static_cast<std::size_t>(m)] = acc;
    }
    return y;
}

// Per-sample labels carried across a rate change by nearest preceding sample.
inline std::vector<std::int8_t> resample_labels(std::span<const std::int8_t> labels, int from_hz, int to_hz) {
    const auto r = resample_ratio(from_hz, to_hz);
    const auto len = static_cast<std::int64_t>(labels.size());
    const std::int64_t out_len = (len * r.up + r.down - 1) / r.down;
    std::vector<std::int8_t> out(static_cast<std::size_t>(out_len));
    for (std::int64_t m = 0; m < out_len; ++m) {
        out[static_cast<std::size_t>(m)] = labels[static_cast<std::size_t>(std::min(len - 1, m * r.down / r.up))];
    }
    return out;
}

// (x − mean) / std with the population std of the whole subject signal.
inline std::vector<double> zscore_per_subject(std::span<const double> x, const std::string& subject_id = "<unnamed>") {
    if (x.size() < 2) throw DataError("z-score: subject " + subject_id + " has fewer than 2 samples");
    const double n = static_cast<double>(x.size());
    const double mu = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= n;
    if (!(var > 0.0)) throw DataError("z-score: degenerate (zero-variance) signal for subject " + subject_id);
    const double inv = 1.0 / std::sqrt(var);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) * inv;
    return out;
}

inline std::size_t window_count(std::size_t len, std::size_t win, std::size_t step) {
    return len < win ? 0 : (len - win) / step + 1;
}

// Sliding windows at offsets 0, step, 2·step, ... Labels are per-sample
// {-1 masked, 0, 1}; a window touching any masked sample is dropped, otherwise
// it takes the majority label with ties going to stress.
inline WindowSet segment_windows(std::span<const double> x, std::span<const std::int8_t> labels, int fs_hz, int win_s,
                                 int step_s, const std::string& subject_id,
                                 std::vector<std::string>* warnings = nullptr) {
    if (labels.size() != x.size()) throw DimensionError("segment_windows: labels are not aligned to samples");
    if (fs_hz <= 0 || win_s <= 0 || step_s <= 0) throw ArgumentError("segment_windows: rate, window and step must be positive");
    const auto win = static_cast<std::size_t>(win_s) * static_cast<std::size_t>(fs_hz);
    const auto step = static_cast<std::size_t>(step_s) * static_cast<std::size_t>(fs_hz);
    WindowSet ws;
    ws.fs_hz = fs_hz;
    ws.window_len = win;
    if (x.size() < win) {
        if (warnings) {
            warnings->push_back("subject " + subject_id + ": record of " + std::to_string(x.size()) +
                                " samples is shorter than one window (" + std::to_string(win) + "), skipped");
        }
        return ws;
    }
    const std::size_t count = window_count(x.size(), win, step);
    for (std::size_t w = 0; w < count; ++w) {
        const std::size_t start = w * step;
        std::size_t stress = 0;
        bool masked = false;
        for (std::size_t i = start; i < start + win; ++i) {
            if (labels[i] < 0) {
                masked = true;
                break;
            }
            stress += labels[i] == 1;
        }
        if (masked) continue;
        const std::uint8_t label = 2 * stress >= win ? 1 : 0;
        ws.push_back(x.subspan(start, win), label, subject_id, start);
    }
    return ws;
}

} // namespace ecgstress::dsp
