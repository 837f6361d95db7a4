#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "binary_io.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace ecgstress {

enum class Dataset : std::uint8_t { wesad = 0, swell = 1, synthetic = 2 };

inline const char* to_string(Dataset d) {
    switch (d) {
    case Dataset::wesad: return "wesad";
    case Dataset::swell: return "swell";
    case Dataset::synthetic: return "synthetic";
    }
    return "unknown";
}

inline Dataset parse_dataset(std::string_view name) {
    if (name == "wesad") return Dataset::wesad;
    if (name == "swell") return Dataset::swell;
    if (name == "synthetic") return Dataset::synthetic;
    throw ConfigError("unknown dataset '" + std::string(name) + "' (expected wesad, swell or synthetic)");
}

// Native sampling rate of each source.
inline int native_rate_hz(Dataset d) {
    switch (d) {
    case Dataset::wesad: return 700;
    case Dataset::swell: return 2048;
    case Dataset::synthetic: return 256;
    }
    return 0;
}

// Condition codes as published with each dataset.
namespace wesad_code {
inline constexpr std::int8_t transient = 0;
inline constexpr std::int8_t baseline = 1; // the neutral state
inline constexpr std::int8_t stress = 2;
inline constexpr std::int8_t amusement = 3;
inline constexpr std::int8_t meditation = 4;
// 5, 6, 7: protocol segments the dataset documents as "ignore"
inline constexpr std::int8_t last_documented = 7;
} // namespace wesad_code

namespace swell_code {
inline constexpr std::int8_t rest = 0;
inline constexpr std::int8_t neutral = 1;
inline constexpr std::int8_t time_pressure = 2;
inline constexpr std::int8_t interruptions = 3;
} // namespace swell_code

namespace synthetic_code {
inline constexpr std::int8_t non_stress = 0;
inline constexpr std::int8_t stress = 1;
} // namespace synthetic_code

struct EcgRecord {
    std::string subject_id;
    int fs_hz = 256;
    Dataset dataset = Dataset::synthetic;
    std::vector<double> samples;
    std::vector<std::int8_t> condition;

    void validate() const {
        if (samples.size() != condition.size()) {
            throw DataError("record " + subject_id + ": " + std::to_string(samples.size()) + " samples but " +
                            std::to_string(condition.size()) + " condition codes");
        }
        if (fs_hz != 700 && fs_hz != 2048 && fs_hz != 256) {
            throw DataError("record " + subject_id + ": unsupported sampling rate " + std::to_string(fs_hz) + " Hz");
        }
    }
};

// Per-sample binary labels: 1 stress, 0 non-stress, -1 excluded from windowing.
inline std::vector<std::int8_t> binarize_labels(std::span<const std::int8_t> codes, Dataset dataset) {
    std::vector<std::int8_t> out(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) {
        const auto c = codes[i];
        std::int8_t label = -2;
        switch (dataset) {
        case Dataset::wesad:
            if (c == wesad_code::stress) label = 1;
            else if (c == wesad_code::baseline || c == wesad_code::amusement) label = 0;
            else if (c >= 0 && c <= wesad_code::last_documented) label = -1;
            break;
        case Dataset::swell:
            if (c == swell_code::time_pressure || c == swell_code::interruptions) label = 1;
            else if (c == swell_code::neutral) label = 0;
            else if (c == swell_code::rest) label = -1;
            break;
        case Dataset::synthetic:
            if (c == synthetic_code::stress) label = 1;
            else if (c == synthetic_code::non_stress) label = 0;
            break;
        }
        if (label == -2) {
            throw DataError("unknown " + std::string(to_string(dataset)) + " condition code " + std::to_string(c) +
                            " at sample " + std::to_string(i));
        }
        out[i] = label;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Canonical record file (.ecgr), little-endian:
//   "ECGR" | version u16 | fs u32 | n u64 | subject (u32 len + UTF-8) | dataset u8
//   | n × f64 samples | n × i8 condition codes

inline constexpr std::uint16_t canonical_version = 1;

inline io::ByteWriter encode_canonical(const EcgRecord& record) {
    record.validate();
    if (record.samples.empty()) throw DataError("record " + record.subject_id + ": refusing to write empty samples");
    io::ByteWriter w;
    w.put_bytes("ECGR");
    w.put(canonical_version);
    w.put(static_cast<std::uint32_t>(record.fs_hz));
    w.put(static_cast<std::uint64_t>(record.samples.size()));
    w.put_string(record.subject_id);
    w.put(static_cast<std::uint8_t>(record.dataset));
    for (double v : record.samples) w.put(v);
    for (auto c : record.condition) w.put(c);
    return w;
}

inline void write_canonical(const EcgRecord& record, const std::filesystem::path& path) {
    encode_canonical(record).save(path);
}

inline EcgRecord decode_canonical(io::ByteReader r) {
    r.expect_magic("ECGR");
    const auto version_at = r.offset();
    if (r.get<std::uint16_t>("version") != canonical_version) throw FormatError("unsupported record version", version_at);
    EcgRecord rec;
    rec.fs_hz = static_cast<int>(r.get<std::uint32_t>("fs"));
    const auto n = r.get<std::uint64_t>("sample count");
    rec.subject_id = r.get_string("subject id");
    const auto dataset_at = r.offset();
    const auto dataset = r.get<std::uint8_t>("dataset");
    if (dataset > 2) throw FormatError("unknown dataset tag " + std::to_string(dataset), dataset_at);
    rec.dataset = static_cast<Dataset>(dataset);
    if (r.remaining() != n * 9) {
        throw FormatError("length mismatch: header declares " + std::to_string(n) + " samples (" +
                              std::to_string(n * 9) + " payload bytes) but " + std::to_string(r.remaining()) +
                              " bytes remain",
                          r.offset());
    }
    rec.samples.resize(n);
    for (auto& v : rec.samples) v = r.get<double>("sample");
    rec.condition.resize(n);
    for (auto& c : rec.condition) c = r.get<std::int8_t>("condition");
    r.expect_end();
    if (rec.fs_hz != 700 && rec.fs_hz != 2048 && rec.fs_hz != 256) {
        throw FormatError("unsupported sampling rate " + std::to_string(rec.fs_hz), 6);
    }
    return rec;
}

inline EcgRecord read_canonical(const std::filesystem::path& path) {
    return decode_canonical(io::ByteReader::from_file(path));
}

// ---------------------------------------------------------------------------
// Dataset import.
//
// The published containers (WESAD pickles, SWELL exports) are converted once
// by tools/convert_wesad.py into an adapter layout the C++ side can read:
//   <src>/<subject>.csv
//     # fs_hz=<rate>
//     ecg,condition
//     <float>,<int>
//     ...

struct ImportReport {
    std::vector<std::string> imported;
    std::vector<std::string> missing;
    std::vector<std::pair<std::string, std::string>> failed; // subject, reason

    std::string to_text() const {
        std::ostringstream os;
        for (const auto& s : imported) os << "ok " << s << '\n';
        for (const auto& s : missing) os << "missing " << s << '\n';
        for (const auto& [s, why] : failed) os << "failed " << s << ": " << why << '\n';
        return os.str();
    }
};

struct ImportResult {
    std::vector<EcgRecord> records;
    ImportReport report;
};

inline std::vector<std::string> expected_subjects(Dataset d) {
    std::vector<std::string> out;
    if (d == Dataset::wesad) {
        for (int i = 2; i <= 17; ++i) {
            if (i != 12) out.push_back("S" + std::to_string(i));
        }
    } else if (d == Dataset::swell) {
        for (int i = 1; i <= 25; ++i) out.push_back("pp" + std::to_string(i));
    }
    return out;
}

inline EcgRecord read_adapter_csv(const std::filesystem::path& path, Dataset dataset) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    EcgRecord rec;
    rec.subject_id = path.stem().string();
    rec.dataset = dataset;
    rec.fs_hz = native_rate_hz(dataset);
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto pos = line.find("fs_hz=");
            if (pos != std::string::npos) {
                const int fs = std::stoi(line.substr(pos + 6));
                if (fs != native_rate_hz(dataset)) {
                    throw DataError("sampling rate " + std::to_string(fs) + " Hz does not match " + to_string(dataset) +
                                    " (" + std::to_string(native_rate_hz(dataset)) + " Hz)");
                }
            }
            continue;
        }
        if (!header_seen) {
            header_seen = true;
            if (line.rfind("ecg", 0) == 0) continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw DataError("line " + std::to_string(line_no) + ": expected 'ecg,condition'");
        try {
            rec.samples.push_back(std::stod(line.substr(0, comma)));
            rec.condition.push_back(static_cast<std::int8_t>(std::stoi(line.substr(comma + 1))));
        } catch (const std::logic_error&) {
            throw DataError("line " + std::to_string(line_no) + ": unparseable value");
        }
    }
    if (rec.samples.empty()) throw DataError("no samples");
    binarize_labels(rec.condition, dataset); // rejects undocumented codes
    return rec;
}

inline ImportResult import_dataset(const std::filesystem::path& src, Dataset dataset) {
    ImportResult result;
    std::vector<std::filesystem::path> files;
    if (std::filesystem::is_directory(src)) {
        for (const auto& entry : std::filesystem::directory_iterator(src)) {
            if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<std::string> seen;
    for (const auto& f : files) {
        const auto subject = f.stem().string();
        seen.push_back(subject);
        try {
            result.records.push_back(read_adapter_csv(f, dataset));
            result.report.imported.push_back(subject);
        } catch (const Error& e) {
            result.report.failed.emplace_back(subject, e.what());
        }
    }
    for (const auto& s : expected_subjects(dataset)) {
        if (std::find(seen.begin(), seen.end(), s) == seen.end()) result.report.missing.push_back(s);
    }
    return result;
}

inline ImportResult import_wesad(const std::filesystem::path& src) { return import_dataset(src, Dataset::wesad); }
inline ImportResult import_swell(const std::filesystem::path& src) { return import_dataset(src, Dataset::swell); }

// ---------------------------------------------------------------------------
// Synthetic ECG

struct SynthSegment {
    bool stress = false;
    double seconds = 0.0;
};

struct SynthOptions {
    std::uint64_t subject_seed = 0;
    int fs_hz = 256;
    std::vector<SynthSegment> schedule;
    double rest_bpm = 65.0;
    double stress_bpm = 90.0;
    double rest_rr_jitter_s = 0.05;
    double stress_rr_jitter_s = 0.015;
    std::string subject_id;
};

// Sum-of-Gaussians PQRST beats on a jittered RR grid, plus baseline wander and
// white noise. Subject seed perturbs heart rate, amplitude and morphology.
inline EcgRecord synth_ecg(const SynthOptions& opt) {
    double duration = 0.0;
    for (const auto& s : opt.schedule) {
        if (!(s.seconds > 0.0)) throw ArgumentError("synth_ecg: segment durations must be positive");
        duration += s.seconds;
    }
    if (duration < 60.0) throw ArgumentError("synth_ecg: total duration must be at least 60 s");
    if (opt.fs_hz <= 0) throw ArgumentError("synth_ecg: sampling rate must be positive");

    Rng rng(opt.subject_seed);
    const double hr_offset = rng.uniform(-4.0, 4.0);
    const double amplitude = rng.uniform(0.8, 1.25);
    const double t_wave = rng.uniform(0.2, 0.4);
    const double wander_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double noise_sd = 0.02;

    const auto n = static_cast<std::size_t>(std::llround(duration * opt.fs_hz));
    EcgRecord rec;
    rec.subject_id = opt.subject_id.empty() ? "synth" + std::to_string(opt.subject_seed) : opt.subject_id;
    rec.fs_hz = opt.fs_hz;
    rec.dataset = Dataset::synthetic;
    rec.samples.assign(n, 0.0);
    rec.condition.resize(n);

    // sample-exact schedule boundaries
    std::vector<std::size_t> ends;
    double acc = 0.0;
    for (const auto& s : opt.schedule) {
        acc += s.seconds;
        ends.push_back(std::min(n, static_cast<std::size_t>(std::llround(acc * opt.fs_hz))));
    }
    auto segment_at = [&](std::size_t i) {
        std::size_t k = 0;
        while (k + 1 < ends.size() && i >= ends[k]) ++k;
        return k;
    };
    for (std::size_t i = 0; i < n; ++i) {
        rec.condition[i] = opt.schedule[segment_at(i)].stress ? synthetic_code::stress : synthetic_code::non_stress;
    }

    struct Wave {
        double offset; // seconds relative to R, scaled by sqrt(RR) for P and T
        double amp;
        double width;
        bool scales;
    };
    const Wave waves[] = {{-0.2, 0.12, 0.025, true},
                          {-0.035, -0.12, 0.01, false},
                          {0.0, 1.0, 0.011, false},
                          {0.035, -0.22, 0.011, false},
                          {0.3, t_wave, 0.055, true}};

    const double fs = opt.fs_hz;
    double beat = rng.uniform(0.1, 0.6);
    while (beat < duration + 0.5) {
        const auto idx = std::min(n - 1, static_cast<std::size_t>(std::max(0.0, beat) * fs));
        const bool stress = opt.schedule[segment_at(idx)].stress;
        const double bpm = (stress ? opt.stress_bpm : opt.rest_bpm) + hr_offset;
        const double jitter = stress ? opt.stress_rr_jitter_s : opt.rest_rr_jitter_s;
        const double rr = std::max(0.3, 60.0 / bpm + rng.normal(0.0, jitter));
        const double scale = std::sqrt(rr);
        for (const auto& w : waves) {
            const double centre = beat + (w.scales ? w.offset * scale : w.offset);
            const double width = w.scales ? w.width * scale : w.width;
            const auto lo = static_cast<std::int64_t>(std::floor((centre - 5 * width) * fs));
            const auto hi = static_cast<std::int64_t>(std::ceil((centre + 5 * width) * fs));
            for (std::int64_t i = std::max<std::int64_t>(lo, 0); i <= hi && i < static_cast<std::int64_t>(n); ++i) {
                const double d = (static_cast<double>(i) / fs - centre) / width;
                rec.samples[static_cast<std::size_t>(i)] += amplitude * w.amp * std::exp(-0.5 * d * d);
            }
        }
        beat += rr;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / fs;
        rec.samples[i] += 0.15 * std::sin(2.0 * std::numbers::pi * 0.25 * t + wander_phase) +
                          0.3 * std::sin(2.0 * std::numbers::pi * 0.03 * t) + rng.normal(0.0, noise_sd);
    }
    return rec;
}

} // namespace ecgstress
