#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "binary_io.hpp"
#include "errors.hpp"

namespace ecgstress {

// Identity of one window: its subject and its start sample in that subject's
// resampled signal. Carried through the pipeline so training can prove which
// windows reached a gradient update.
inline std::uint64_t provenance_tag(std::string_view subject_id, std::uint64_t start_sample) {
    char bytes[9] = {'#'};
    for (int i = 0; i < 8; ++i) bytes[i + 1] = static_cast<char>((start_sample >> (8 * i)) & 0xff);
    return io::fnv1a64(std::string_view(bytes, sizeof bytes), io::fnv1a64(subject_id));
}

// Segmented, normalized windows with binary labels (1 = stress).
struct WindowSet {
    int fs_hz = 256;
    std::size_t window_len = 0;
    std::vector<double> samples; // size() × window_len, row-major
    std::vector<std::uint8_t> labels;
    std::vector<std::string> subject_ids;
    std::vector<std::uint64_t> starts;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }

    std::span<const double> window(std::size_t i) const {
        return std::span<const double>(samples).subspan(i * window_len, window_len);
    }

    std::uint64_t tag(std::size_t i) const { return provenance_tag(subject_ids[i], starts[i]); }

    void push_back(std::span<const double> w, std::uint8_t label, std::string subject, std::uint64_t start) {
        if (window_len == 0 && empty()) window_len = w.size();
        if (w.size() != window_len) throw DimensionError("window length mismatch in WindowSet");
        samples.insert(samples.end(), w.begin(), w.end());
        labels.push_back(label);
        subject_ids.push_back(std::move(subject));
        starts.push_back(start);
    }

    void append(const WindowSet& other) {
        if (other.empty()) return;
        if (empty() && window_len == 0) {
            window_len = other.window_len;
            fs_hz = other.fs_hz;
        }
        if (other.window_len != window_len || other.fs_hz != fs_hz) {
            throw DimensionError("cannot merge window sets with different window length or rate");
        }
        samples.insert(samples.end(), other.samples.begin(), other.samples.end());
        labels.insert(labels.end(), other.labels.begin(), other.labels.end());
        subject_ids.insert(subject_ids.end(), other.subject_ids.begin(), other.subject_ids.end());
        starts.insert(starts.end(), other.starts.begin(), other.starts.end());
    }

    WindowSet subset(std::span<const std::size_t> indices) const {
        WindowSet out;
        out.fs_hz = fs_hz;
        out.window_len = window_len;
        out.samples.reserve(indices.size() * window_len);
        for (auto i : indices) out.push_back(window(i), labels[i], subject_ids[i], starts[i]);
        return out;
    }

    // Sorted, unique.
    std::vector<std::string> subjects() const {
        std::set<std::string> s(subject_ids.begin(), subject_ids.end());
        return {s.begin(), s.end()};
    }

    std::vector<std::size_t> indices_of(std::string_view subject) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < size(); ++i) {
            if (subject_ids[i] == subject) out.push_back(i);
        }
        return out;
    }

    void validate() const {
        if (samples.size() != size() * window_len || subject_ids.size() != size() || starts.size() != size()) {
            throw DataError("WindowSet fields have inconsistent lengths");
        }
        for (auto l : labels) {
            if (l > 1) throw DataError("WindowSet label outside {0,1}");
        }
    }
};

struct SubjectCounts {
    std::size_t windows = 0;
    std::size_t stress = 0;
    std::size_t non_stress = 0;
};

inline std::map<std::string, SubjectCounts> count_by_subject(const WindowSet& ws) {
    std::map<std::string, SubjectCounts> out;
    for (std::size_t i = 0; i < ws.size(); ++i) {
        auto& c = out[ws.subject_ids[i]];
        ++c.windows;
        (ws.labels[i] ? c.stress : c.non_stress)++;
    }
    return out;
}

// Window archive (.ecgw), little-endian:
//   "ECGW" | version u16 | fs u32 | window_len u32 | n u64
//   n × { subject (u32 len + bytes) | label u8 | start u64 | window_len × f64 }
inline constexpr std::uint16_t window_archive_version = 1;

inline io::ByteWriter encode_windows(const WindowSet& ws) {
    ws.validate();
    io::ByteWriter w;
    w.put_bytes("ECGW");
    w.put(window_archive_version);
    w.put(static_cast<std::uint32_t>(ws.fs_hz));
    w.put(static_cast<std::uint32_t>(ws.window_len));
    w.put(static_cast<std::uint64_t>(ws.size()));
    for (std::size_t i = 0; i < ws.size(); ++i) {
        w.put_string(ws.subject_ids[i]);
        w.put(ws.labels[i]);
        w.put(ws.starts[i]);
        for (double v : ws.window(i)) w.put(v);
    }
    return w;
}

inline void write_windows(const WindowSet& ws, const std::filesystem::path& path) {
    encode_windows(ws).save(path);
}

inline WindowSet read_windows(const std::filesystem::path& path) {
    auto r = io::ByteReader::from_file(path);
    r.expect_magic("ECGW");
    const auto version_at = r.offset();
    if (r.get<std::uint16_t>("version") != window_archive_version) throw FormatError("unsupported window archive version", version_at);
    WindowSet ws;
    ws.fs_hz = static_cast<int>(r.get<std::uint32_t>("fs"));
    ws.window_len = r.get<std::uint32_t>("window_len");
    const auto n = r.get<std::uint64_t>("window count");
    std::vector<double> buf(ws.window_len);
    for (std::uint64_t i = 0; i < n; ++i) {
        auto subject = r.get_string("subject id");
        const auto label_at = r.offset();
        const auto label = r.get<std::uint8_t>("label");
        if (label > 1) throw FormatError("window label outside {0,1}", label_at);
        const auto start = r.get<std::uint64_t>("start");
        r.need(ws.window_len * 8, "window samples");
        for (auto& v : buf) v = r.get<double>("sample");
        ws.push_back(buf, label, std::move(subject), start);
    }
    r.expect_end();
    return ws;
}

} // namespace ecgstress
