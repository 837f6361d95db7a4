#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <ecgstress/ingest.hpp>
#include <ecgstress/pipeline.hpp>

#include "oracles.hpp"

using namespace ecgstress;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("ecgstress_ingest_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

EcgRecord random_record(Rng& rng, std::size_t n) {
    EcgRecord r;
    r.subject_id = "subj-" + std::to_string(rng.below(1000)) + "-é";
    const int rates[] = {256, 700, 2048};
    r.fs_hz = rates[rng.below(3)];
    r.dataset = static_cast<Dataset>(rng.below(3));
    for (std::size_t i = 0; i < n; ++i) {
        r.samples.push_back(rng.normal() * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0));
        r.condition.push_back(static_cast<std::int8_t>(rng.below(8)));
    }
    return r;
}

bool bit_identical(const EcgRecord& a, const EcgRecord& b) {
    if (a.subject_id != b.subject_id || a.fs_hz != b.fs_hz || a.dataset != b.dataset || a.condition != b.condition ||
        a.samples.size() != b.samples.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(a.samples[i]) != std::bit_cast<std::uint64_t>(b.samples[i])) return false;
    }
    return true;
}

void write_csv(const fs::path& path, int fs_hz, const std::vector<std::pair<double, int>>& rows) {
    std::ofstream out(path);
    out << "# fs_hz=" << fs_hz << "\n" << "ecg,condition\n";
    for (const auto& [v, c] : rows) out << v << ',' << c << '\n';
}

} // namespace

// ---------------------------------------------------------------------------
// binarize_labels

TEST(Binarize, WesadNamedStates) {
    const std::vector<std::int8_t> codes{wesad_code::baseline, wesad_code::amusement, wesad_code::stress};
    EXPECT_EQ(binarize_labels(codes, Dataset::wesad), (std::vector<std::int8_t>{0, 0, 1}));
}

TEST(Binarize, SwellNamedStates) {
    const std::vector<std::int8_t> codes{swell_code::neutral, swell_code::time_pressure, swell_code::interruptions};
    EXPECT_EQ(binarize_labels(codes, Dataset::swell), (std::vector<std::int8_t>{0, 1, 1}));
}

TEST(Binarize, WesadOtherCodesAreMasked) {
    for (std::int8_t c : {0, 4, 5, 6, 7}) {
        EXPECT_EQ(binarize_labels(std::vector<std::int8_t>{c}, Dataset::wesad)[0], -1) << int(c);
    }
    EXPECT_EQ(binarize_labels(std::vector<std::int8_t>{swell_code::rest}, Dataset::swell)[0], -1);
}

TEST(Binarize, TotalOverDocumentedCodesAndRejectsOthers) {
    for (int c = -128; c < 128; ++c) {
        const std::vector<std::int8_t> v{static_cast<std::int8_t>(c)};
        const bool wesad_ok = c >= 0 && c <= 7;
        const bool swell_ok = c >= 0 && c <= 3;
        const bool synth_ok = c == 0 || c == 1;
        if (wesad_ok) EXPECT_NO_THROW(binarize_labels(v, Dataset::wesad));
        else EXPECT_THROW(binarize_labels(v, Dataset::wesad), DataError);
        if (swell_ok) EXPECT_NO_THROW(binarize_labels(v, Dataset::swell));
        else EXPECT_THROW(binarize_labels(v, Dataset::swell), DataError);
        if (synth_ok) EXPECT_NO_THROW(binarize_labels(v, Dataset::synthetic));
        else EXPECT_THROW(binarize_labels(v, Dataset::synthetic), DataError);
    }
}

TEST(Binarize, UnknownCodeIsNamed) {
    try {
        binarize_labels(std::vector<std::int8_t>{1, 9}, Dataset::wesad);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("code 9"), std::string::npos) << e.what();
    }
}

TEST(Binarize, MeditationSegmentIsExcludedFromWindows) {
    // 40 s baseline, 40 s meditation, 40 s stress at 256 Hz; 10 s windows, 5 s step.
    EcgRecord rec;
    rec.subject_id = "S2";
    rec.fs_hz = 256;
    rec.dataset = Dataset::wesad;
    Rng rng(1);
    for (int seg = 0; seg < 3; ++seg) {
        const std::int8_t code = seg == 0 ? wesad_code::baseline : seg == 1 ? wesad_code::meditation : wesad_code::stress;
        for (int i = 0; i < 40 * 256; ++i) {
            rec.samples.push_back(rng.normal());
            rec.condition.push_back(code);
        }
    }
    PreprocessOptions opt;
    opt.window_s = 10;
    opt.step_s = 5;
    const auto ws = preprocess_record(rec, opt);
    // starts 0..30 s lie in baseline (7 windows), starts 80..110 s in stress (7 windows)
    EXPECT_EQ(ws.size(), 14u);
    for (std::size_t i = 0; i < ws.size(); ++i) {
        const auto start_s = ws.starts[i] / 256;
        EXPECT_TRUE(start_s + 10 <= 40 || start_s >= 80) << start_s;
        EXPECT_EQ(ws.labels[i], start_s >= 80 ? 1 : 0);
    }
}

// ---------------------------------------------------------------------------
// canonical records

TEST(Canonical, RoundTripIsBitExact) {
    Rng rng(2);
    const auto dir = scratch_dir("roundtrip");
    auto rec = random_record(rng, 1000);
    rec.samples[0] = -0.0;
    rec.samples[1] = std::numeric_limits<double>::denorm_min();
    rec.samples[2] = std::numeric_limits<double>::infinity();
    write_canonical(rec, dir / "a.ecgr");
    EXPECT_TRUE(bit_identical(rec, read_canonical(dir / "a.ecgr")));
}

TEST(Canonical, RoundTripPropertyOverManyRecords) {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const auto rec = random_record(rng, 1 + rng.below(64));
        const auto bytes = encode_canonical(rec).bytes();
        ASSERT_TRUE(bit_identical(rec, decode_canonical(io::ByteReader(bytes)))) << i;
    }
}

TEST(Canonical, HeaderLayout) {
    EcgRecord rec{"S9", 700, Dataset::wesad, {1.5}, {2}};
    const auto b = encode_canonical(rec).bytes();
    ASSERT_EQ(b.size(), 4u + 2 + 4 + 8 + 4 + 2 + 1 + 8 + 1);
    EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "ECGR");
    EXPECT_EQ(b[4], 1);
    EXPECT_EQ(b[5], 0);
    EXPECT_EQ(static_cast<unsigned char>(b[6]), 700 & 0xff);
    EXPECT_EQ(static_cast<unsigned char>(b[7]), 700 >> 8);
    EXPECT_EQ(b[10], 1); // n = 1
    EXPECT_EQ(b[18], 2); // subject length
    EXPECT_EQ(std::string(b.begin() + 22, b.begin() + 24), "S9");
    EXPECT_EQ(b.back(), 2);
}

TEST(Canonical, TruncatedFileReportsOffset) {
    Rng rng(4);
    const auto full = encode_canonical(random_record(rng, 50)).bytes();
    for (std::size_t cut : {std::size_t{3}, std::size_t{10}, std::size_t{25}, full.size() - 1}) {
        std::vector<char> part(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(cut));
        try {
            decode_canonical(io::ByteReader(part));
            FAIL() << "cut at " << cut;
        } catch (const FormatError& e) {
            EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos) << e.what();
        }
    }
}

TEST(Canonical, BadMagic) {
    Rng rng(5);
    auto bytes = encode_canonical(random_record(rng, 5)).bytes();
    bytes[0] = 'X';
    try {
        decode_canonical(io::ByteReader(bytes));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
}

TEST(Canonical, LengthMismatchIsAFormatError) {
    Rng rng(6);
    auto bytes = encode_canonical(random_record(rng, 5)).bytes();
    bytes.push_back(0); // one stray condition byte
    EXPECT_THROW(decode_canonical(io::ByteReader(bytes)), FormatError);
    bytes[10] = 9; // header now claims 9 samples
    bytes.pop_back();
    EXPECT_THROW(decode_canonical(io::ByteReader(bytes)), FormatError);
}

TEST(Canonical, EmptySamplesRejectedAtWrite) {
    const auto dir = scratch_dir("empty");
    EcgRecord rec{"S2", 700, Dataset::wesad, {}, {}};
    EXPECT_THROW(write_canonical(rec, dir / "e.ecgr"), DataError);
    EXPECT_FALSE(fs::exists(dir / "e.ecgr"));
}

TEST(Canonical, MisalignedRecordRejectedAtWrite) {
    EcgRecord rec{"S2", 700, Dataset::wesad, {1.0, 2.0}, {1}};
    EXPECT_THROW(encode_canonical(rec), DataError);
}

// ---------------------------------------------------------------------------
// import

TEST(Import, WesadYieldsFifteenRecords) {
    const auto dir = scratch_dir("wesad");
    for (const auto& s : expected_subjects(Dataset::wesad)) write_csv(dir / (s + ".csv"), 700, {{0.1, 1}, {0.2, 2}});
    const auto r = import_wesad(dir);
    EXPECT_EQ(r.records.size(), 15u);
    EXPECT_TRUE(r.report.missing.empty());
    for (const auto& rec : r.records) {
        EXPECT_EQ(rec.fs_hz, 700);
        EXPECT_EQ(rec.condition, (std::vector<std::int8_t>{1, 2})); // dataset-native codes kept
    }
}

TEST(Import, SwellYieldsTwentyFiveRecords) {
    const auto dir = scratch_dir("swell");
    for (const auto& s : expected_subjects(Dataset::swell)) write_csv(dir / (s + ".csv"), 2048, {{0.1, 1}});
    const auto r = import_swell(dir);
    EXPECT_EQ(r.records.size(), 25u);
    for (const auto& rec : r.records) EXPECT_EQ(rec.fs_hz, 2048);
}

TEST(Import, MissingAndBrokenSubjectsAreReportedNotFatal) {
    const auto dir = scratch_dir("partial");
    write_csv(dir / "S2.csv", 700, {{0.1, 1}});
    write_csv(dir / "S3.csv", 2048, {{0.1, 1}}); // wrong rate
    write_csv(dir / "S4.csv", 700, {{0.1, 42}}); // undocumented code
    const auto r = import_wesad(dir);
    EXPECT_EQ(r.records.size(), 1u);
    EXPECT_EQ(r.report.imported, std::vector<std::string>{"S2"});
    ASSERT_EQ(r.report.failed.size(), 2u);
    EXPECT_EQ(r.report.failed[0].first, "S3");
    EXPECT_NE(r.report.failed[0].second.find("2048"), std::string::npos);
    EXPECT_EQ(r.report.missing.size(), 12u);
    const auto text = r.report.to_text();
    EXPECT_NE(text.find("missing S17"), std::string::npos);
}

TEST(Import, EmptyOrAbsentDirectory) {
    const auto dir = scratch_dir("none");
    EXPECT_TRUE(import_wesad(dir).records.empty());
    EXPECT_TRUE(import_wesad(dir / "does-not-exist").records.empty());
}

// ---------------------------------------------------------------------------
// synthetic ECG

TEST(Synth, ScheduleSwitchesAtExactSample) {
    SynthOptions o;
    o.subject_seed = 1;
    o.schedule = {{false, 30}, {true, 30}};
    const auto rec = synth_ecg(o);
    ASSERT_EQ(rec.samples.size(), 60u * 256u);
    EXPECT_EQ(rec.condition[30 * 256 - 1], synthetic_code::non_stress);
    EXPECT_EQ(rec.condition[30 * 256], synthetic_code::stress);
    EXPECT_EQ(rec.dataset, Dataset::synthetic);
}

TEST(Synth, FixedSeedIsBitIdentical) {
    SynthOptions o;
    o.subject_seed = 77;
    o.schedule = {{false, 40}, {true, 40}};
    const auto a = synth_ecg(o), b = synth_ecg(o);
    EXPECT_TRUE(bit_identical(a, b));
    o.subject_seed = 78;
    EXPECT_FALSE(bit_identical(a, synth_ecg(o)));
}

TEST(Synth, StressBeatsFasterByPeakCount) {
    for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
        SynthOptions o;
        o.subject_seed = seed;
        o.schedule = {{false, 60}, {true, 60}};
        const auto rec = synth_ecg(o);
        const std::size_t half = 60 * 256;
        const auto rest = oracle::count_peaks(rec.samples, 0, half, 0.65, 51);
        const auto stress = oracle::count_peaks(rec.samples, half, 2 * half, 0.65, 51);
        EXPECT_GT(stress, rest) << seed;
        EXPECT_NEAR(static_cast<double>(rest), 65.0, 8.0) << seed << " stress=" << stress;
        EXPECT_NEAR(static_cast<double>(stress), 90.0, 8.0);
    }
}

TEST(Synth, RequiresSixtySeconds) {
    SynthOptions o;
    o.schedule = {{false, 20}, {true, 20}};
    EXPECT_THROW(synth_ecg(o), ArgumentError);
}

TEST(Synth, PreprocessedWindowsHaveStandardLength) {
    SynthOptions o;
    o.subject_seed = 5;
    o.fs_hz = 700;
    o.schedule = {{false, 35}, {true, 35}};
    auto rec = synth_ecg(o);
    const auto ws = preprocess_record(rec);
    EXPECT_EQ(ws.window_len, 7680u);
    EXPECT_EQ(ws.size(), 41u);
    ws.validate();
}
