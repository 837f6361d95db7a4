#pragma once

#include <string>
#include <vector>

#include "dsp.hpp"
#include "ingest.hpp"
#include "windows.hpp"

namespace ecgstress {

struct PreprocessOptions {
    int target_fs_hz = 256;
    int window_s = 30;
    int step_s = 1;
    int filter_order = 5;
    double cutoff_hz = 0.5;
};

// Fixed order: high-pass at the native rate -> resample -> z-score -> window.
inline WindowSet preprocess_record(const EcgRecord& record, const PreprocessOptions& opt = {},
                                   std::vector<std::string>* warnings = nullptr) {
    record.validate();
    const auto labels = binarize_labels(record.condition, record.dataset);
    const auto sos = dsp::design_butterworth_highpass(
        {.order = opt.filter_order, .cutoff_hz = opt.cutoff_hz, .sample_rate_hz = static_cast<double>(record.fs_hz)});
    const auto filtered = dsp::filter_forward(sos, record.samples);
    const auto resampled = dsp::resample(filtered, record.fs_hz, opt.target_fs_hz);
    const auto resampled_labels = dsp::resample_labels(labels, record.fs_hz, opt.target_fs_hz);
    const auto normalized = dsp::zscore_per_subject(resampled, record.subject_id);
    return dsp::segment_windows(normalized, resampled_labels, opt.target_fs_hz, opt.window_s, opt.step_s,
                                record.subject_id, warnings);
}

// Small synthetic cohort for end-to-end runs without real data. Subjects
// differ in resting heart rate so that leave-one-subject-out has a real
// between-subject shift; half start at rest, half under stress.
struct CohortOptions {
    std::vector<double> rest_bpm{60.0, 64.0, 68.0, 72.0};
    double stress_delta_bpm = 22.0;
    double segment_s = 120.0;
    std::uint64_t seed_base = 1000;
    int fs_hz = 256;
};

inline std::vector<EcgRecord> synthetic_records(const CohortOptions& opt = {}) {
    if (opt.rest_bpm.size() < 2) throw ArgumentError("synthetic_records: a cohort needs at least two subjects");
    std::vector<EcgRecord> out;
    for (std::size_t s = 0; s < opt.rest_bpm.size(); ++s) {
        SynthOptions o;
        o.subject_seed = opt.seed_base + s;
        o.subject_id = "synth" + std::to_string(s + 1);
        o.fs_hz = opt.fs_hz;
        o.rest_bpm = opt.rest_bpm[s];
        o.stress_bpm = opt.rest_bpm[s] + opt.stress_delta_bpm;
        const bool stress_first = s % 2 == 1;
        o.schedule = {{stress_first, opt.segment_s}, {!stress_first, opt.segment_s}};
        out.push_back(synth_ecg(o));
    }
    return out;
}

inline WindowSet synthetic_cohort(const CohortOptions& opt = {}, const PreprocessOptions& pre = {.window_s = 8}) {
    WindowSet ws;
    for (const auto& r : synthetic_records(opt)) ws.append(preprocess_record(r, pre));
    return ws;
}

} // namespace ecgstress
