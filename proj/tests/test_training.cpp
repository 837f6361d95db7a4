#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <ecgstress/ecgstress.hpp>

#include "oracles.hpp"

using namespace ecgstress;

namespace {

// 1 s windows at 256 Hz fit ModelConfig::reduced().
const WindowSet& tiny_cohort() {
    static const WindowSet ws = [] {
        CohortOptions c;
        c.segment_s = 30;
        return synthetic_cohort(c, {.window_s = 1, .step_s = 1});
    }();
    return ws;
}

TrainConfig quick_config() {
    TrainConfig t;
    t.lr0 = 1e-3;
    t.epochs = 3;
    t.loso_pretrain_epochs = 2;
    t.finetune_epochs = 2;
    t.batch = 16;
    t.seed = 7;
    return t;
}

WindowSet labelled_set(const std::vector<std::pair<std::string, std::vector<int>>>& subjects) {
    WindowSet ws;
    const std::vector<double> w(4, 0.0);
    for (const auto& [id, labels] : subjects) {
        for (std::size_t i = 0; i < labels.size(); ++i) ws.push_back(w, static_cast<std::uint8_t>(labels[i]), id, i * 256);
    }
    return ws;
}

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

} // namespace

// ---------------------------------------------------------------------------
// loss and weights

TEST(Loss, HalfProbabilityGivesLn2) {
    const std::vector<double> y{1, 0, 1};
    const auto l = weighted_bce(Tensor({3}, {0.5, 0.5, 0.5}), y, 1.0, 1.0);
    EXPECT_NEAR(l.item(), std::log(2.0), 1e-12);
}

TEST(Loss, NearPerfectIsNearZeroAndFinite) {
    const std::vector<double> y{1, 0};
    EXPECT_LT(weighted_bce(Tensor({2}, {1.0 - 1e-9, 1e-9}), y, 1.0, 1.0).item(), 1e-8);
    const auto extreme = weighted_bce(Tensor({2}, {0.0, 1.0}), y, 1.0, 1.0).item();
    EXPECT_TRUE(std::isfinite(extreme));
    EXPECT_NEAR(extreme, -std::log(1e-12), 1e-3);
}

TEST(Loss, WeightsScaleEachClass) {
    const std::vector<double> y{1, 0};
    const Tensor p({2}, {0.3, 0.4});
    const double expected = (-2.0 * std::log(0.3) - 0.5 * std::log(0.6)) / 2.0;
    EXPECT_NEAR(weighted_bce(p, y, 2.0, 0.5).item(), expected, 1e-12);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
    Rng rng(1);
    std::vector<double> pv(6), y{1, 0, 1, 1, 0, 0};
    for (auto& v : pv) v = rng.uniform(0.1, 0.9);
    Tensor p({6}, pv, true);
    const auto r = gradcheck::check("weighted_bce", {p}, [&] { return weighted_bce(p, y, 1.7, 0.6); }, {1e-6, 1e-3, 1e-6});
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Loss, ShapeMismatch) {
    const std::vector<double> y{1, 0};
    EXPECT_THROW(weighted_bce(Tensor({3}, {0.5, 0.5, 0.5}), y, 1, 1), DimensionError);
}

TEST(ClassWeights, BalancedAndSkewed) {
    const std::vector<std::uint8_t> balanced{1, 0, 1, 0};
    const auto b = class_weights(balanced);
    EXPECT_DOUBLE_EQ(b.positive, 1.0);
    EXPECT_DOUBLE_EQ(b.negative, 1.0);
    const std::vector<std::uint8_t> skewed{1, 1, 0, 0, 0, 0, 0, 0, 0, 0};
    const auto s = class_weights(skewed);
    EXPECT_DOUBLE_EQ(s.positive, 2.5);
    EXPECT_DOUBLE_EQ(s.negative, 10.0 / 16.0);
    const std::vector<std::uint8_t> ex{1, 0, 0};
    EXPECT_NEAR(class_weights(ex).positive, 1.5, 1e-15);
    EXPECT_NEAR(class_weights(ex).negative, 0.75, 1e-15);
}

TEST(ClassWeights, EqualTotalMassProperty) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::uint8_t> labels(2 + rng.below(300));
        for (auto& l : labels) l = rng.bernoulli(rng.uniform(0.05, 0.95));
        labels[0] = 1, labels[1] = 0;
        const auto w = class_weights(labels);
        double pos = 0, neg = 0;
        for (auto l : labels) (l ? pos : neg) += l ? w.positive : w.negative;
        EXPECT_NEAR(pos, neg, 1e-9);
        EXPECT_NEAR(pos + neg, static_cast<double>(labels.size()), 1e-9);
    }
}

TEST(ClassWeights, SingleClassIsADataError) {
    const std::vector<std::uint8_t> ones{1, 1, 1};
    try {
        class_weights(ones);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("single class"), std::string::npos);
    }
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, FirstStepMovesByLrAgainstGradientSign) {
    std::vector<Tensor> p{Tensor({3}, {1.0, -2.0, 0.5}, true)};
    p[0].mutable_grad()[0] = 3.0;
    p[0].mutable_grad()[1] = -0.01;
    p[0].mutable_grad()[2] = 0.0;
    AdamState s;
    ASSERT_TRUE(adam_step(p, s, 0.1));
    EXPECT_NEAR(p[0][0], 1.0 - 0.1, 1e-7);
    EXPECT_NEAR(p[0][1], -2.0 + 0.1, 1e-5);
    EXPECT_EQ(p[0][2], 0.5);
    EXPECT_EQ(s.t, 1u);
}

TEST(Adam, ZeroGradientLeavesParametersAlone) {
    std::vector<Tensor> p{Tensor({4}, {1, 2, 3, 4}, true)};
    AdamState s;
    for (int i = 0; i < 5; ++i) adam_step(p, s, 0.1);
    EXPECT_EQ(std::vector<double>(p[0].data().begin(), p[0].data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Adam, MinimizesQuadratic) {
    std::vector<Tensor> p{Tensor({1}, {1.0}, true)};
    AdamState s;
    for (int i = 0; i < 100; ++i) {
        p[0].zero_grad();
        auto loss = mul(p[0], p[0]);
        sum(loss).backward();
        adam_step(p, s, 0.1);
    }
    EXPECT_LT(std::abs(p[0][0]), 0.05);
}

TEST(Adam, NonFiniteGradientSkipsTheWholeStep) {
    std::vector<Tensor> p{Tensor({2}, {1.0, 1.0}, true), Tensor({1}, {5.0}, true)};
    p[0].mutable_grad()[0] = 1.0;
    p[1].mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
    AdamState s;
    EXPECT_FALSE(adam_step(p, s, 0.1));
    EXPECT_EQ(p[0][0], 1.0);
    EXPECT_EQ(p[1][0], 5.0);
    EXPECT_EQ(s.skipped, 1u);
    EXPECT_EQ(s.t, 0u);
}

TEST(Schedule, ExponentialDecayPerEpoch) {
    const TrainConfig t;
    EXPECT_DOUBLE_EQ(lr_schedule(t, 0), 1e-4);
    EXPECT_NEAR(lr_schedule(t, 1), 9.85e-5, 1e-18);
    EXPECT_NEAR(lr_schedule(t, 70), 1e-4 * std::pow(0.985, 70), 1e-18);
    EXPECT_NEAR(lr_schedule(t, 70), 3.47e-5, 1e-7);
}

TEST(TrainConfig, Validation) {
    auto t = quick_config();
    t.finetune_fracs = {0.0};
    EXPECT_THROW(t.validate(), ConfigError);
    t = quick_config();
    t.batch = 0;
    EXPECT_THROW(t.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// folds and splits

TEST(Folds, OneFoldPerSubjectAndPartition) {
    for (std::size_t subjects : {15u, 25u}) {
        std::vector<std::pair<std::string, std::vector<int>>> spec;
        for (std::size_t s = 0; s < subjects; ++s) spec.push_back({"S" + std::to_string(s), {0, 1, 0, 1, 1}});
        const auto ws = labelled_set(spec);
        const auto folds = loso_folds(ws);
        ASSERT_EQ(folds.size(), subjects);
        for (const auto& f : folds) {
            EXPECT_EQ(f.train.size() + f.test.size(), ws.size());
            std::set<std::size_t> all(f.train.begin(), f.train.end());
            all.insert(f.test.begin(), f.test.end());
            EXPECT_EQ(all.size(), ws.size());
            for (auto i : f.test) EXPECT_EQ(ws.subject_ids[i], f.test_subject);
            for (auto i : f.train) EXPECT_NE(ws.subject_ids[i], f.test_subject);
        }
    }
}

TEST(Folds, SingleSubjectIsAnError) {
    const auto ws = labelled_set({{"S1", {0, 1}}});
    EXPECT_THROW(loso_folds(ws), DataError);
}

TEST(Split, SizesForThousandWindows) {
    std::vector<int> labels(1000);
    for (std::size_t i = 0; i < 1000; ++i) labels[i] = i < 300;
    const auto ws = labelled_set({{"S1", labels}});
    const auto idx = iota(1000);
    Rng rng(3);
    const auto s = finetune_split(ws, idx, 0.10, rng);
    EXPECT_EQ(s.calibration.size(), 100u);
    EXPECT_EQ(s.evaluation.size(), 900u);
    EXPECT_EQ(calibration_size(0.01, 1000), 10u);
    EXPECT_EQ(calibration_size(0.05, 1000), 50u);
    EXPECT_EQ(calibration_size(0.01, 150), 2u);
}

TEST(Split, StratifiedDisjointAndCovering) {
    Rng gen(4);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 20 + gen.below(400);
        std::vector<int> labels(n);
        for (auto& l : labels) l = gen.bernoulli(gen.uniform(0.1, 0.9));
        labels[0] = 1, labels[1] = 0;
        const auto ws = labelled_set({{"S", labels}});
        const auto idx = iota(n);
        const double frac = std::array{0.01, 0.05, 0.10}[gen.below(3)];
        const std::size_t c = calibration_size(frac, n);
        if (c < 2) continue;
        Rng rng(static_cast<std::uint64_t>(trial));
        const auto s = finetune_split(ws, idx, frac, rng);
        ASSERT_EQ(s.calibration.size(), c);
        ASSERT_EQ(s.calibration.size() + s.evaluation.size(), n);
        std::set<std::size_t> cal(s.calibration.begin(), s.calibration.end());
        for (auto i : s.evaluation) EXPECT_FALSE(cal.count(i));
        std::size_t pos = 0, cal_pos = 0;
        for (auto l : labels) pos += l;
        for (auto i : s.calibration) cal_pos += labels[i];
        EXPECT_GE(cal_pos, 1u);
        EXPECT_LE(cal_pos, c - 1);
        const double ideal = static_cast<double>(c) * static_cast<double>(pos) / static_cast<double>(n);
        EXPECT_LE(std::abs(static_cast<double>(cal_pos) - ideal), 1.0);
    }
}

TEST(Split, FractionLeavingNothingToEvaluate) {
    const auto ws = labelled_set({{"S", {0, 1}}});
    const auto idx = iota(2);
    Rng rng(5);
    EXPECT_THROW(finetune_split(ws, idx, 0.9, rng), ArgumentError);
    EXPECT_THROW(finetune_split(ws, idx, 0.0, rng), ArgumentError);
}

TEST(Split, SameSeedSameSplit) {
    std::vector<int> labels(300);
    for (std::size_t i = 0; i < 300; ++i) labels[i] = (i / 7) % 2;
    const auto ws = labelled_set({{"S", labels}});
    const auto idx = iota(300);
    Rng a(9), b(9);
    EXPECT_EQ(finetune_split(ws, idx, 0.05, a).calibration, finetune_split(ws, idx, 0.05, b).calibration);
}

// ---------------------------------------------------------------------------
// training

TEST(Train, LossCurveDeterministicAndDecreasing) {
    const auto& ws = tiny_cohort();
    const auto cfg = ModelConfig::reduced();
    auto t = quick_config();
    t.epochs = 6;
    const auto idx = iota(ws.size());
    auto run = [&] {
        Rng init(1);
        auto p = init_params(cfg, init);
        return train(p, cfg, ws, idx, t, TrainMode::plain, Rng(t.seed));
    };
    const auto a = run(), b = run();
    ASSERT_EQ(a.loss_curve.size(), 6u);
    EXPECT_EQ(a.loss_curve, b.loss_curve);
    EXPECT_LT(a.loss_curve.back(), a.loss_curve.front());
    for (double l : a.loss_curve) EXPECT_TRUE(std::isfinite(l));
}

TEST(Train, PretrainModeUsesPretrainEpochs) {
    const auto& ws = tiny_cohort();
    const auto cfg = ModelConfig::reduced();
    const auto t = quick_config();
    const auto idx = iota(ws.size());
    Rng init(2);
    auto p = init_params(cfg, init);
    EXPECT_EQ(train(p, cfg, ws, idx, t, TrainMode::loso_pretrain, Rng(1)).loss_curve.size(), t.loso_pretrain_epochs);
}

TEST(Train, AuditRecordsExactlyTheTrainingWindows) {
    const auto& ws = tiny_cohort();
    const auto cfg = ModelConfig::reduced();
    const auto t = quick_config();
    const auto folds = loso_folds(ws);
    Rng init(3);
    auto p = init_params(cfg, init);
    UpdateAudit audit;
    train(p, cfg, ws, folds[0].train, t, TrainMode::plain, Rng(1), &audit);
    EXPECT_EQ(audit.tags.size(), folds[0].train.size());
    for (auto i : folds[0].test) EXPECT_FALSE(audit.tags.count(ws.tag(i)));
    EXPECT_EQ(audit.updates, t.epochs * ((folds[0].train.size() + t.batch - 1) / t.batch));
}

TEST(Train, WrongWindowLengthIsRejected) {
    const auto& ws = tiny_cohort();
    const auto cfg = ModelConfig::compact();
    const auto idx = iota(4);
    Rng init(4);
    auto p = init_params(cfg, init);
    EXPECT_THROW(train(p, cfg, ws, idx, quick_config(), TrainMode::plain, Rng(1)), DimensionError);
}

TEST(Finetune, EmptyCalibrationAndMinimalCalibration) {
    const auto& ws = tiny_cohort();
    const auto cfg = ModelConfig::reduced();
    const auto t = quick_config();
    Rng init(5);
    auto p = init_params(cfg, init);
    EXPECT_THROW(finetune(p, cfg, ws, std::vector<std::size_t>{}, t, Rng(1)), DataError);
    std::vector<std::size_t> two;
    for (std::size_t i = 0; i < ws.size() && two.size() < 2; ++i) {
        if (two.empty() || ws.labels[i] != ws.labels[two[0]]) {
            if (two.empty() || ws.subject_ids[i] == ws.subject_ids[two[0]]) two.push_back(i);
        }
    }
    ASSERT_EQ(two.size(), 2u);
    const auto r = finetune(p, cfg, ws, two, t, Rng(1));
    EXPECT_EQ(r.loss_curve.size(), t.finetune_epochs);
    EXPECT_TRUE(p.all_finite());
}

TEST(Train, OverfitsASmallBalancedSet) {
    const auto& ws = tiny_cohort();
    const auto cfg = ModelConfig::reduced();
    std::vector<std::size_t> idx;
    std::size_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < ws.size(); i += 3) {
        if (ws.labels[i] && pos < 16) idx.push_back(i), ++pos;
        if (!ws.labels[i] && neg < 16) idx.push_back(i), ++neg;
    }
    ASSERT_EQ(idx.size(), 32u);
    auto t = quick_config();
    t.epochs = 60;
    t.batch = 8;
    auto train_cfg = cfg;
    train_cfg.fc_dropout = 0.0;
    train_cfg.encoder_dropout = 0.0;
    Rng init(6);
    auto p = init_params(train_cfg, init);
    train(p, train_cfg, ws, idx, t, TrainMode::plain, Rng(1));
    EXPECT_GE(evaluate(p, train_cfg, ws, idx).counts.accuracy(), 0.95);
}

// ---------------------------------------------------------------------------
// metrics

TEST(Metrics, HandComputedConfusion) {
    Confusion c{9, 1, 89, 1};
    EXPECT_DOUBLE_EQ(c.accuracy(), 0.98);
    EXPECT_DOUBLE_EQ(c.f1(), 0.9);
    EXPECT_EQ(Confusion{}.f1(), 0.0);
    Confusion only_negatives{0, 0, 10, 0};
    EXPECT_EQ(only_negatives.f1(), 0.0);
    EXPECT_EQ(only_negatives.accuracy(), 1.0);
}

TEST(Metrics, ThresholdIsInclusive) {
    EXPECT_EQ(classify(0.5), 1);
    EXPECT_EQ(classify(std::nextafter(0.5, 0.0)), 0);
}

TEST(Metrics, FoldMeanAndPooled) {
    EvalReport r;
    r.add_fold("A", {10, 0, 10, 0});
    r.add_fold("B", {0, 0, 5, 5});
    EXPECT_DOUBLE_EQ(r.accuracy, 0.75);
    EXPECT_DOUBLE_EQ(r.f1, 0.5);
    EXPECT_EQ(r.pooled.total(), 30u);
    EXPECT_NEAR(r.pooled.accuracy(), 25.0 / 30.0, 1e-15);
    EXPECT_NE(r.to_text().find("subject=B tp=0 fp=0 tn=5 fn=5 accuracy=0.5 f1=0"), std::string::npos) << r.to_text();
}

// ---------------------------------------------------------------------------
// LOSO

namespace {

const LosoResult& tiny_loso() {
    static const LosoResult r = [] {
        LosoOptions o;
        o.fractions = {0.0, 0.1};
        return run_loso(tiny_cohort(), ModelConfig::reduced(), quick_config(), o);
    }();
    return r;
}

} // namespace

TEST(Loso, ColumnsFoldsAndProtocol) {
    const auto& r = tiny_loso();
    ASSERT_EQ(r.reports.size(), 2u);
    for (const auto& rep : r.reports) EXPECT_EQ(rep.folds.size(), 4u);
    EXPECT_TRUE(protocol_violations(r, tiny_cohort()).empty());
    for (const auto& cell : r.cells[0]) EXPECT_TRUE(cell.calibration.empty());
    for (const auto& cell : r.cells[1]) {
        EXPECT_EQ(cell.calibration.size(), calibration_size(0.1, 60));
        EXPECT_EQ(cell.calibration.size() + cell.evaluation.size(), 60u);
    }
}

TEST(Loso, ProtocolCheckCatchesLeaks) {
    auto r = tiny_loso();
    const auto& ws = tiny_cohort();
    auto& cell = r.cells[1][2];
    cell.audit.tags.insert(ws.tag(cell.evaluation.front()));
    const auto v = protocol_violations(r, ws);
    ASSERT_FALSE(v.empty());
    EXPECT_NE(v.front().find("ft10/" + cell.subject), std::string::npos) << v.front();

    auto r2 = tiny_loso();
    r2.cells[1][0].evaluation.push_back(r2.cells[1][0].calibration.front());
    EXPECT_FALSE(protocol_violations(r2, ws).empty());
}

TEST(Loso, ThreadCountDoesNotChangeResults) {
    LosoOptions o;
    o.fractions = {0.0, 0.1};
    o.threads = 4;
    const auto par = run_loso(tiny_cohort(), ModelConfig::reduced(), quick_config(), o);
    const auto& ser = tiny_loso();
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(par.reports[c].to_text(), ser.reports[c].to_text());
}

TEST(Loso, PredictionsFileRecountsToReport) {
    const auto dir = std::filesystem::temp_directory_path() / "ecgstress_loso_outputs";
    std::filesystem::remove_all(dir);
    const auto& r = tiny_loso();
    write_loso_outputs(r, tiny_cohort(), quick_config(), dir, "synthetic");
    for (const auto& name : {"no_tuning", "ft10"}) {
        std::ifstream in(dir / (std::string("predictions_") + name + ".txt"));
        std::string header;
        std::getline(in, header);
        std::map<std::string, std::pair<std::vector<int>, std::vector<int>>> by_subject;
        std::string subject;
        std::uint64_t start;
        int label, predicted;
        double probability;
        while (in >> subject >> start >> label >> probability >> predicted) {
            EXPECT_EQ(predicted, probability >= 0.5 ? 1 : 0);
            by_subject[subject].first.push_back(label);
            by_subject[subject].second.push_back(predicted);
        }
        ASSERT_EQ(by_subject.size(), 4u);
        const std::size_t col = std::string(name) == "ft10" ? 1 : 0;
        double mean_acc = 0;
        for (const auto& f : r.reports[col].folds) {
            const auto rc = oracle::recount(by_subject[f.subject].first, by_subject[f.subject].second);
            EXPECT_EQ(rc.tp, f.counts.tp);
            EXPECT_EQ(rc.fp, f.counts.fp);
            EXPECT_EQ(rc.tn, f.counts.tn);
            EXPECT_EQ(rc.fn, f.counts.fn);
            EXPECT_NEAR(rc.accuracy, f.accuracy, 1e-15);
            EXPECT_NEAR(rc.f1, f.f1, 1e-15);
            mean_acc += rc.accuracy;
        }
        EXPECT_NEAR(mean_acc / 4.0, r.reports[col].accuracy, 1e-12);
    }
    EXPECT_TRUE(std::filesystem::exists(dir / "summary.json"));
    std::ifstream table(dir / "table.txt");
    std::string first;
    std::getline(table, first);
    EXPECT_EQ(first, "Dataset\tNo Tuning\t10%");
}

TEST(Loso, RejectsBadFractions) {
    LosoOptions o;
    o.fractions = {1.0};
    EXPECT_THROW(run_loso(tiny_cohort(), ModelConfig::reduced(), quick_config(), o), ConfigError);
}
