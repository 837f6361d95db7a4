#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "windows.hpp"

namespace ecgstress {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    double lr0 = 1e-4;
    double decay = 0.985; // per epoch
    std::size_t epochs = 70;
    std::size_t batch = 256;
    std::size_t loso_pretrain_epochs = 40;
    std::size_t finetune_epochs = 30;
    std::vector<double> finetune_fracs{0.01, 0.05, 0.10};
    std::uint64_t seed = 0;
    AdamConfig adam;

    void validate() const {
        if (!(lr0 > 0.0) || !(decay > 0.0)) throw ConfigError("learning rate and decay must be positive");
        if (epochs == 0 || loso_pretrain_epochs == 0 || finetune_epochs == 0) throw ConfigError("epoch counts must be positive");
        if (batch == 0) throw ConfigError("batch size must be positive");
        for (double f : finetune_fracs) {
            if (!(f > 0.0 && f < 1.0)) throw ConfigError("fine-tune fractions must lie in (0, 1)");
        }
    }
};

namespace detail {

// Shortest round-trip decimal form; locale independent.
inline std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Loss and class balance

inline constexpr double bce_clamp = 1e-12;

// mean_b −[w_pos·y·log p + w_neg·(1−y)·log(1−p)], log arguments clamped at 1e-12.
inline Tensor weighted_bce(const Tensor& p, std::span<const double> y, double w_pos, double w_neg) {
    if (p.rank() != 1 || p.numel() != y.size() || y.empty()) {
        throw DimensionError("weighted_bce: probabilities " + shape_string(p.shape()) + " vs " +
                             std::to_string(y.size()) + " labels");
    }
    const double inv_n = 1.0 / static_cast<double>(y.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!(p[i] >= 0.0 && p[i] <= 1.0)) {
            throw NumericError("weighted_bce: probability " + detail::fmt(p[i]) + " outside [0, 1] at index " + std::to_string(i));
        }
        const double pc = std::clamp(p[i], bce_clamp, 1.0 - bce_clamp);
        loss -= w_pos * y[i] * std::log(pc) + w_neg * (1.0 - y[i]) * std::log(1.0 - pc);
    }
    loss *= inv_n;
    std::vector<double> labels(y.begin(), y.end());
    return Tensor::make_result("weighted_bce", {}, {loss}, {p},
                               [labels = std::move(labels), w_pos, w_neg, inv_n](detail::Node& self) {
                                   const auto& pd = detail::parent_data(self, 0);
                                   auto* g = detail::parent_grad(self, 0);
                                   for (std::size_t i = 0; i < labels.size(); ++i) {
                                       const double pc = std::clamp(pd[i], bce_clamp, 1.0 - bce_clamp);
                                       const double d = -(w_pos * labels[i] / pc - w_neg * (1.0 - labels[i]) / (1.0 - pc));
                                       (*g)[i] += self.grad[0] * d * inv_n;
                                   }
                               });
}

struct ClassWeights {
    double positive = 1.0;
    double negative = 1.0;
};

// w_c = N / (2·N_c): both classes contribute equal total weight.
inline ClassWeights class_weights(std::span<const std::uint8_t> labels) {
    std::size_t pos = 0;
    for (auto l : labels) pos += l == 1;
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) {
        throw DataError("class_weights: training labels contain a single class (" + std::to_string(pos) + " stress, " +
                        std::to_string(neg) + " non-stress); training aborted");
    }
    const double n = static_cast<double>(labels.size());
    return {n / (2.0 * static_cast<double>(pos)), n / (2.0 * static_cast<double>(neg))};
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t t = 0;
    std::uint64_t skipped = 0;
};

// Bias-corrected Adam. A step whose gradient contains any non-finite value is
// skipped as a whole (state untouched, skipped counter bumped); returns false then.
inline bool adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamConfig& cfg = {}) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw DimensionError("adam_step: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].numel()) throw DimensionError("adam_step: parameter shape changed");
        for (double g : params[i].grad()) {
            if (!std::isfinite(g)) {
                ++state.skipped;
                return false;
            }
        }
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto theta = params[i].mutable_data();
        const auto g = params[i].mutable_grad(); // zero-filled when the loss did not reach this tensor
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < theta.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            theta[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
        }
    }
    return true;
}

inline double lr_schedule(const TrainConfig& cfg, std::size_t epoch) {
    return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(epoch));
}

// ---------------------------------------------------------------------------
// Folds and calibration splits

struct Fold {
    std::string test_subject;
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

// One fold per subject, ordered by subject id.
inline std::vector<Fold> loso_folds(const WindowSet& ws) {
    const auto subjects = ws.subjects();
    if (subjects.size() < 2) {
        throw DataError("loso_folds: need at least 2 subjects, got " + std::to_string(subjects.size()));
    }
    std::vector<Fold> folds;
    for (const auto& s : subjects) {
        Fold f{s, {}, {}};
        for (std::size_t i = 0; i < ws.size(); ++i) (ws.subject_ids[i] == s ? f.test : f.train).push_back(i);
        folds.push_back(std::move(f));
    }
    return folds;
}

struct CalibrationSplit {
    std::vector<std::size_t> calibration;
    std::vector<std::size_t> evaluation;
};

inline std::size_t calibration_size(double frac, std::size_t n) {
    return static_cast<std::size_t>(std::ceil(frac * static_cast<double>(n) - 1e-9));
}

// Stratified random draw of ⌈frac·n⌉ windows; when the subject has both
// classes, each class gets its proportional share (at least one window).
inline CalibrationSplit finetune_split(const WindowSet& ws, std::span<const std::size_t> subject_windows, double frac,
                                       Rng& rng) {
    if (!(frac > 0.0 && frac < 1.0)) throw ArgumentError("finetune_split: fraction must lie in (0, 1)");
    const std::size_t n = subject_windows.size();
    const std::size_t c = calibration_size(frac, n);
    if (c >= n) {
        throw ArgumentError("finetune_split: calibration of " + std::to_string(c) + " windows leaves nothing of " +
                            std::to_string(n) + " to evaluate");
    }
    std::vector<std::size_t> pos, neg;
    for (auto i : subject_windows) (ws.labels[i] ? pos : neg).push_back(i);

    std::size_t c_pos = 0;
    if (pos.empty() || neg.empty()) {
        c_pos = pos.empty() ? 0 : c;
    } else {
        if (c < 2) {
            throw DataError("finetune_split: calibration of " + std::to_string(c) +
                            " window cannot cover both classes of subject " + ws.subject_ids[subject_windows[0]]);
        }
        c_pos = static_cast<std::size_t>(std::llround(static_cast<double>(c) * static_cast<double>(pos.size()) /
                                                      static_cast<double>(n)));
        c_pos = std::clamp<std::size_t>(c_pos, 1, c - 1);
        c_pos = std::min(c_pos, pos.size());
        c_pos = std::max(c_pos, c - std::min(c - 1, neg.size()));
    }
    const std::size_t c_neg = c - c_pos;
    rng.shuffle(std::span(pos));
    rng.shuffle(std::span(neg));
    CalibrationSplit split;
    split.calibration.assign(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(c_pos));
    split.calibration.insert(split.calibration.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(c_neg));
    std::sort(split.calibration.begin(), split.calibration.end());
    for (auto i : subject_windows) {
        if (!std::binary_search(split.calibration.begin(), split.calibration.end(), i)) split.evaluation.push_back(i);
    }
    return split;
}

// ---------------------------------------------------------------------------
// Training

enum class TrainMode { plain, loso_pretrain };

// Provenance tags of every window that contributed to a parameter update.
struct UpdateAudit {
    std::unordered_set<std::uint64_t> tags;
    std::size_t updates = 0;
};

struct TrainResult {
    std::vector<double> loss_curve; // per-epoch mean loss
    std::uint64_t skipped_updates = 0;
};

namespace detail {

inline Tensor batch_input(const WindowSet& ws, std::span<const std::size_t> idx) {
    std::vector<double> x;
    x.reserve(idx.size() * ws.window_len);
    for (auto i : idx) {
        const auto w = ws.window(i);
        x.insert(x.end(), w.begin(), w.end());
    }
    return Tensor({idx.size(), 1, ws.window_len}, std::move(x));
}

inline TrainResult run_epochs(ModelParams& params, const ModelConfig& cfg, const WindowSet& ws,
                              std::span<const std::size_t> indices, const TrainConfig& tcfg, std::size_t first_epoch,
                              std::size_t epochs, const Rng& rng, UpdateAudit* audit) {
    if (indices.empty()) throw DataError("train: no training windows");
    if (ws.window_len != cfg.window_len) {
        throw DimensionError("train: windows have length " + std::to_string(ws.window_len) + ", model expects " +
                             std::to_string(cfg.window_len));
    }
    std::vector<std::uint8_t> labels;
    for (auto i : indices) labels.push_back(ws.labels[i]);
    const auto weights = class_weights(labels);

    auto tensors = params.tensors();
    AdamState adam;
    TrainResult result;
    std::vector<std::size_t> order(indices.begin(), indices.end());
    for (std::size_t e = 0; e < epochs; ++e) {
        const std::size_t epoch = first_epoch + e;
        const double lr = lr_schedule(tcfg, epoch);
        Rng epoch_rng = rng.derive(epoch);
        std::copy(indices.begin(), indices.end(), order.begin());
        epoch_rng.shuffle(std::span(order));
        double total = 0.0;
        for (std::size_t start = 0, b = 0; start < order.size(); start += tcfg.batch, ++b) {
            const auto batch = std::span(order).subspan(start, std::min(tcfg.batch, order.size() - start));
            std::vector<double> y;
            for (auto i : batch) y.push_back(ws.labels[i]);
            Rng dropout_rng = epoch_rng.derive(b + 1);
            params.zero_grad();
            auto p = forward(params, cfg, batch_input(ws, batch), dropout_rng, true);
            auto loss = weighted_bce(p, y, weights.positive, weights.negative);
            if (!std::isfinite(loss.item())) {
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
            }
            loss.backward();
            if (adam_step(tensors, adam, lr, tcfg.adam) && audit) {
                for (auto i : batch) audit->tags.insert(ws.tag(i));
                ++audit->updates;
            }
            total += loss.item() * static_cast<double>(batch.size());
        }
        result.loss_curve.push_back(total / static_cast<double>(order.size()));
    }
    result.skipped_updates = adam.skipped;
    params.zero_grad();
    return result;
}

} // namespace detail

// Seeded shuffle -> batches (last partial batch kept) -> forward -> weighted BCE
// -> backward -> Adam, with lr decayed once per epoch.
inline TrainResult train(ModelParams& params, const ModelConfig& cfg, const WindowSet& ws,
                         std::span<const std::size_t> indices, const TrainConfig& tcfg, TrainMode mode, const Rng& rng,
                         UpdateAudit* audit = nullptr) {
    tcfg.validate();
    const auto epochs = mode == TrainMode::plain ? tcfg.epochs : tcfg.loso_pretrain_epochs;
    return detail::run_epochs(params, cfg, ws, indices, tcfg, 0, epochs, rng, audit);
}

// Continues training on calibration windows with fresh class weights; the lr
// schedule resumes at epoch loso_pretrain_epochs. All layers are updated.
inline TrainResult finetune(ModelParams& params, const ModelConfig& cfg, const WindowSet& ws,
                            std::span<const std::size_t> calibration, const TrainConfig& tcfg, const Rng& rng,
                            UpdateAudit* audit = nullptr) {
    tcfg.validate();
    if (calibration.empty()) throw DataError("finetune: empty calibration set");
    return detail::run_epochs(params, cfg, ws, calibration, tcfg, tcfg.loso_pretrain_epochs, tcfg.finetune_epochs, rng,
                              audit);
}

// ---------------------------------------------------------------------------
// Evaluation

struct Confusion {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::size_t total() const noexcept { return tp + fp + tn + fn; }
    double accuracy() const noexcept {
        return total() ? static_cast<double>(tp + tn) / static_cast<double>(total()) : 0.0;
    }
    // Stress is the positive class; 0 when there are no positives at all.
    double f1() const noexcept {
        const std::size_t denom = 2 * tp + fp + fn;
        return denom ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom) : 0.0;
    }
    void add(std::uint8_t label, std::uint8_t predicted) noexcept {
        if (label) (predicted ? tp : fn)++;
        else (predicted ? fp : tn)++;
    }
    Confusion& operator+=(const Confusion& o) noexcept {
        tp += o.tp, fp += o.fp, tn += o.tn, fn += o.fn;
        return *this;
    }
};

inline constexpr double decision_threshold = 0.5;

inline std::uint8_t classify(double probability) { return probability >= decision_threshold ? 1 : 0; }

struct FoldReport {
    std::string subject;
    Confusion counts;
    double accuracy = 0.0;
    double f1 = 0.0;
};

struct Prediction {
    std::size_t index;
    double probability;
};

struct Evaluation {
    Confusion counts;
    std::vector<Prediction> predictions;
};

inline Evaluation evaluate(const ModelParams& params, const ModelConfig& cfg, const WindowSet& ws,
                           std::span<const std::size_t> indices, std::size_t batch = 256) {
    if (indices.empty()) throw DataError("evaluate: no evaluation windows");
    NoGradGuard no_grad;
    Rng unused(0);
    Evaluation ev;
    for (std::size_t start = 0; start < indices.size(); start += batch) {
        const auto chunk = indices.subspan(start, std::min(batch, indices.size() - start));
        const auto p = forward(params, cfg, detail::batch_input(ws, chunk), unused, false);
        for (std::size_t j = 0; j < chunk.size(); ++j) {
            ev.predictions.push_back({chunk[j], p[j]});
            ev.counts.add(ws.labels[chunk[j]], classify(p[j]));
        }
    }
    return ev;
}

// Per-fold metrics plus the unweighted fold mean; pooled counts are kept so a
// window-level aggregate can be recomputed.
struct EvalReport {
    std::vector<FoldReport> folds;
    double accuracy = 0.0;
    double f1 = 0.0;
    Confusion pooled;

    void add_fold(const std::string& subject, const Confusion& c) {
        folds.push_back({subject, c, c.accuracy(), c.f1()});
        pooled += c;
        accuracy = f1 = 0.0;
        for (const auto& f : folds) {
            accuracy += f.accuracy;
            f1 += f.f1;
        }
        accuracy /= static_cast<double>(folds.size());
        f1 /= static_cast<double>(folds.size());
    }

    std::string to_text() const {
        std::ostringstream os;
        for (const auto& f : folds) {
            os << "subject=" << f.subject << " tp=" << f.counts.tp << " fp=" << f.counts.fp << " tn=" << f.counts.tn
               << " fn=" << f.counts.fn << " accuracy=" << detail::fmt(f.accuracy) << " f1=" << detail::fmt(f.f1) << '\n';
        }
        os << "aggregate=fold_mean accuracy=" << detail::fmt(accuracy) << " f1=" << detail::fmt(f1) << '\n';
        os << "aggregate=pooled tp=" << pooled.tp << " fp=" << pooled.fp << " tn=" << pooled.tn << " fn=" << pooled.fn
           << " accuracy=" << detail::fmt(pooled.accuracy()) << " f1=" << detail::fmt(pooled.f1()) << '\n';
        return os.str();
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["accuracy"] = accuracy;
        j["f1"] = f1;
        j["pooled"] = {{"tp", pooled.tp}, {"fp", pooled.fp}, {"tn", pooled.tn}, {"fn", pooled.fn},
                       {"accuracy", pooled.accuracy()}, {"f1", pooled.f1()}};
        auto folds_json = nlohmann::ordered_json::array();
        for (const auto& f : folds) {
            folds_json.push_back({{"subject", f.subject}, {"tp", f.counts.tp}, {"fp", f.counts.fp}, {"tn", f.counts.tn},
                                  {"fn", f.counts.fn}, {"accuracy", f.accuracy}, {"f1", f.f1}});
        }
        j["folds"] = folds_json;
        return j;
    }
};

// ---------------------------------------------------------------------------
// Leave-one-subject-out driver

struct LosoOptions {
    std::vector<double> fractions{0.0, 0.01, 0.05, 0.10}; // 0 = no tuning
    std::size_t threads = 1;
};

// Everything one (fold, fraction) cell produced, kept for auditing.
struct CellRun {
    std::string subject;
    double fraction = 0.0;
    std::vector<double> pretrain_loss;
    std::vector<double> finetune_loss;
    std::vector<std::size_t> calibration;
    std::vector<std::size_t> evaluation;
    Evaluation result;
    UpdateAudit audit;
};

struct LosoResult {
    std::vector<double> fractions;
    std::vector<EvalReport> reports;        // per fraction
    std::vector<std::vector<CellRun>> cells; // [fraction][fold]
};

inline std::string column_name(double fraction) {
    if (fraction == 0.0) return "no_tuning";
    return "ft" + std::to_string(static_cast<int>(std::lround(fraction * 100.0)));
}

inline std::string column_title(double fraction) {
    if (fraction == 0.0) return "No Tuning";
    return std::to_string(static_cast<int>(std::lround(fraction * 100.0))) + "%";
}

namespace detail {

inline std::vector<CellRun> run_fold(const WindowSet& ws, const Fold& fold, std::size_t fold_index,
                                     const ModelConfig& cfg, const TrainConfig& tcfg,
                                     const std::vector<double>& fractions) {
    const Rng fold_rng = Rng(tcfg.seed).derive(fold_index);
    std::vector<CellRun> cells(fractions.size());
    const bool any_tuning = std::any_of(fractions.begin(), fractions.end(), [](double f) { return f > 0.0; });
    ModelParams pretrained;
    std::vector<double> pretrain_loss;
    UpdateAudit pretrain_audit;
    if (any_tuning) {
        Rng init_rng = fold_rng.derive(1);
        pretrained = init_params(cfg, init_rng);
        pretrain_loss = train(pretrained, cfg, ws, fold.train, tcfg, TrainMode::loso_pretrain, fold_rng.derive(3),
                              &pretrain_audit).loss_curve;
    }
    for (std::size_t c = 0; c < fractions.size(); ++c) {
        auto& cell = cells[c];
        cell.subject = fold.test_subject;
        cell.fraction = fractions[c];
        if (fractions[c] == 0.0) {
            Rng init_rng = fold_rng.derive(1);
            auto params = init_params(cfg, init_rng);
            cell.pretrain_loss =
                train(params, cfg, ws, fold.train, tcfg, TrainMode::plain, fold_rng.derive(2), &cell.audit).loss_curve;
            cell.evaluation = fold.test;
            cell.result = evaluate(params, cfg, ws, cell.evaluation);
        } else {
            Rng split_rng = fold_rng.derive(100 + c);
            auto split = finetune_split(ws, fold.test, fractions[c], split_rng);
            auto params = pretrained.clone();
            cell.audit = pretrain_audit;
            cell.pretrain_loss = pretrain_loss;
            cell.finetune_loss =
                finetune(params, cfg, ws, split.calibration, tcfg, fold_rng.derive(200 + c), &cell.audit).loss_curve;
            cell.calibration = std::move(split.calibration);
            cell.evaluation = std::move(split.evaluation);
            cell.result = evaluate(params, cfg, ws, cell.evaluation);
        }
    }
    return cells;
}

} // namespace detail

// Runs every fold × fraction cell. Folds are independent (seeds derive from
// the master seed and fold index), so running them on several threads gives
// the same result as running them serially.
inline LosoResult run_loso(const WindowSet& ws, const ModelConfig& cfg, const TrainConfig& tcfg,
                           const LosoOptions& opt = {}) {
    cfg.validate();
    tcfg.validate();
    for (double f : opt.fractions) {
        if (!(f >= 0.0 && f < 1.0)) throw ConfigError("LOSO fractions must lie in [0, 1)");
    }
    const auto folds = loso_folds(ws);
    std::vector<std::vector<CellRun>> by_fold(folds.size());
    std::vector<std::exception_ptr> errors(folds.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t f; (f = next++) < folds.size();) {
            try {
                by_fold[f] = detail::run_fold(ws, folds[f], f, cfg, tcfg, opt.fractions);
            } catch (...) {
                errors[f] = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(opt.threads, 1, folds.size());
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    for (std::size_t f = 0; f < folds.size(); ++f) {
        if (!errors[f]) continue;
        try {
            std::rethrow_exception(errors[f]);
        } catch (const Error& e) {
            throw Error(e.kind(), "fold " + folds[f].test_subject + ": " + e.what());
        }
    }

    LosoResult out;
    out.fractions = opt.fractions;
    out.reports.resize(opt.fractions.size());
    out.cells.resize(opt.fractions.size());
    for (std::size_t c = 0; c < opt.fractions.size(); ++c) {
        for (std::size_t f = 0; f < folds.size(); ++f) {
            auto& cell = by_fold[f][c];
            out.reports[c].add_fold(cell.subject, cell.result.counts);
            out.cells[c].push_back(std::move(cell));
        }
    }
    return out;
}

// Each cell: calibration and evaluation are disjoint, no evaluation window's
// tag reached an update, and no test-subject window outside the calibration
// set did either. Returns one message per violation.
inline std::vector<std::string> protocol_violations(const LosoResult& result, const WindowSet& ws) {
    std::vector<std::string> out;
    for (const auto& column : result.cells) {
        for (const auto& cell : column) {
            const std::string where = column_name(cell.fraction) + "/" + cell.subject;
            std::unordered_set<std::uint64_t> calib;
            for (auto i : cell.calibration) calib.insert(ws.tag(i));
            for (auto i : cell.evaluation) {
                const auto t = ws.tag(i);
                if (calib.count(t)) out.push_back(where + ": window " + std::to_string(i) + " is in both calibration and evaluation");
                if (cell.audit.tags.count(t)) out.push_back(where + ": evaluation window " + std::to_string(i) + " reached an update");
            }
            for (std::size_t i = 0; i < ws.size(); ++i) {
                if (ws.subject_ids[i] == cell.subject && !calib.count(ws.tag(i)) && cell.audit.tags.count(ws.tag(i))) {
                    out.push_back(where + ": uncalibrated test-subject window " + std::to_string(i) + " reached an update");
                }
            }
        }
    }
    return out;
}

inline std::string loso_table(const LosoResult& result, const std::string& dataset) {
    std::ostringstream os;
    os << "Dataset";
    for (double f : result.fractions) os << '\t' << column_title(f);
    os << '\n' << dataset;
    char cell[64];
    for (const auto& r : result.reports) {
        std::snprintf(cell, sizeof cell, "%.1f (%.1f)", 100.0 * r.accuracy, 100.0 * r.f1);
        os << '\t' << cell;
    }
    os << '\n';
    return os.str();
}

inline void write_loss_curve(const std::filesystem::path& path, const std::vector<double>& curve, std::size_t first_epoch = 0) {
    std::ofstream out(path, std::ios::trunc);
    for (std::size_t e = 0; e < curve.size(); ++e) out << first_epoch + e << ' ' << detail::fmt(curve[e]) << '\n';
}

// report_<col>.txt, predictions_<col>.txt, loss curves, summary.json, table.txt
inline void write_loso_outputs(const LosoResult& result, const WindowSet& ws, const TrainConfig& tcfg,
                               const std::filesystem::path& dir, const std::string& dataset) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json summary;
    summary["dataset"] = dataset;
    summary["aggregation"] = "fold_mean";
    summary["columns"] = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < result.fractions.size(); ++c) {
        const auto name = column_name(result.fractions[c]);
        std::ofstream(dir / ("report_" + name + ".txt"), std::ios::trunc) << result.reports[c].to_text();
        std::ofstream preds(dir / ("predictions_" + name + ".txt"), std::ios::trunc);
        preds << "subject start label probability predicted\n";
        for (const auto& cell : result.cells[c]) {
            for (const auto& p : cell.result.predictions) {
                preds << ws.subject_ids[p.index] << ' ' << ws.starts[p.index] << ' ' << int(ws.labels[p.index]) << ' '
                      << detail::fmt(p.probability) << ' ' << int(classify(p.probability)) << '\n';
            }
            write_loss_curve(dir / ("loss_" + name + "_" + cell.subject + ".txt"), cell.pretrain_loss);
            if (!cell.finetune_loss.empty()) {
                write_loss_curve(dir / ("loss_" + name + "_" + cell.subject + "_finetune.txt"), cell.finetune_loss,
                                 tcfg.loso_pretrain_epochs);
            }
        }
        auto col = result.reports[c].to_json();
        col["fraction"] = result.fractions[c];
        col["name"] = name;
        summary["columns"].push_back(col);
    }
    std::ofstream(dir / "summary.json", std::ios::trunc) << summary.dump(2) << '\n';
    std::ofstream(dir / "table.txt", std::ios::trunc) << loso_table(result, dataset);
}

} // namespace ecgstress
