#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <ecgstress/ecgstress.hpp>

namespace fs = std::filesystem;
using namespace ecgstress;

namespace {

enum ExitCode : int { ok = 0, internal = 1, config_failure = 2, data_failure = 3, numeric_failure = 4 };

int exit_code_for(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::argument:
    case ErrorKind::config:
    case ErrorKind::dimension: return config_failure;
    case ErrorKind::data:
    case ErrorKind::format:
    case ErrorKind::unsupported: return data_failure;
    case ErrorKind::numeric: return numeric_failure;
    }
    return internal;
}

// ---------------------------------------------------------------------------
// Run configuration: defaults, then the config file, then --set overrides.

struct RunConfig {
    std::string dataset = "synthetic";
    std::string preset = "standard";
    std::uint64_t seed = 0;
    ModelConfig model = ModelConfig::standard();
    TrainConfig train;
    PreprocessOptions pre;
    CohortOptions cohort;
};

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const auto* end = value.data() + value.size();
    const auto r = std::from_chars(value.data(), end, out);
    if (r.ec != std::errc() || r.ptr != end) {
        throw ConfigError(key + ": cannot parse '" + value + "' as " + (std::is_floating_point_v<T> ? "a number" : "an integer"));
    }
    return out;
}

std::vector<double> parse_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    std::stringstream ss(value);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<double>(key, item));
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <class T, class Get>
Setter number(Get get) {
    return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_number<T>(k, v); };
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"dataset",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v != "wesad" && v != "swell" && v != "synthetic") throw ConfigError(k + ": expected wesad, swell or synthetic");
             c.dataset = v;
         }},
        {"seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.seed; })},
        {"model.conv1.filters", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.conv1.filters; })},
        {"model.conv1.kernel", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.conv1.kernel; })},
        {"model.conv1.stride", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.conv1.stride; })},
        {"model.conv2.filters", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.conv2.filters; })},
        {"model.conv2.kernel", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.conv2.kernel; })},
        {"model.conv2.stride", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.conv2.stride; })},
        {"model.pool.size", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.pool.size; })},
        {"model.pool.stride", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.pool.stride; })},
        {"model.fc_dims",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.fc_dims.clear();
             std::stringstream ss(v);
             for (std::string item; std::getline(ss, item, ',');) c.model.fc_dims.push_back(parse_number<std::size_t>(k, item));
         }},
        {"model.d_model", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.d_model; })},
        {"model.d_qkv", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.d_qkv; })},
        {"model.d_ff", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.d_ff; })},
        {"model.heads", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.heads; })},
        {"model.encoder_layers", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.encoder_layers; })},
        {"model.window_len", number<std::size_t>([](RunConfig& c) -> auto& { return c.model.window_len; })},
        {"model.fc_dropout", number<double>([](RunConfig& c) -> auto& { return c.model.fc_dropout; })},
        {"model.encoder_dropout", number<double>([](RunConfig& c) -> auto& { return c.model.encoder_dropout; })},
        {"model.layer_norm_eps", number<double>([](RunConfig& c) -> auto& { return c.model.layer_norm_eps; })},
        {"train.lr0", number<double>([](RunConfig& c) -> auto& { return c.train.lr0; })},
        {"train.decay", number<double>([](RunConfig& c) -> auto& { return c.train.decay; })},
        {"train.epochs", number<std::size_t>([](RunConfig& c) -> auto& { return c.train.epochs; })},
        {"train.batch", number<std::size_t>([](RunConfig& c) -> auto& { return c.train.batch; })},
        {"train.loso_pretrain_epochs",
         number<std::size_t>([](RunConfig& c) -> auto& { return c.train.loso_pretrain_epochs; })},
        {"train.finetune_epochs", number<std::size_t>([](RunConfig& c) -> auto& { return c.train.finetune_epochs; })},
        {"train.finetune_fracs",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.train.finetune_fracs = parse_list(k, v); }},
        {"preprocess.target_fs_hz", number<int>([](RunConfig& c) -> auto& { return c.pre.target_fs_hz; })},
        {"preprocess.window_s", number<int>([](RunConfig& c) -> auto& { return c.pre.window_s; })},
        {"preprocess.step_s", number<int>([](RunConfig& c) -> auto& { return c.pre.step_s; })},
        {"preprocess.filter_order", number<int>([](RunConfig& c) -> auto& { return c.pre.filter_order; })},
        {"preprocess.cutoff_hz", number<double>([](RunConfig& c) -> auto& { return c.pre.cutoff_hz; })},
        {"synth.rest_bpm", [](RunConfig& c, const std::string& k, const std::string& v) { c.cohort.rest_bpm = parse_list(k, v); }},
        {"synth.stress_delta_bpm", number<double>([](RunConfig& c) -> auto& { return c.cohort.stress_delta_bpm; })},
        {"synth.segment_s", number<double>([](RunConfig& c) -> auto& { return c.cohort.segment_s; })},
        {"synth.seed_base", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.cohort.seed_base; })},
    };
    return table;
}

std::pair<std::string, std::string> split_assignment(const std::string& line, const std::string& where) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + line + "'");
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t"), e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    return {key, value};
}

RunConfig resolve_config(const std::string& file, const std::vector<std::string>& overrides) {
    std::vector<std::pair<std::string, std::string>> entries;
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw ConfigError("cannot read config file " + file);
        std::string line;
        for (std::size_t n = 1; std::getline(in, line); ++n) {
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos || line[first] == '#') continue;
            entries.push_back(split_assignment(line, file + ":" + std::to_string(n)));
        }
    }
    for (const auto& o : overrides) entries.push_back(split_assignment(o, "--set"));

    RunConfig c;
    // The preset replaces the whole model block, so it is applied before any model.* key.
    for (const auto& [k, v] : entries) {
        if (k != "model.preset") continue;
        if (v == "standard") c.model = ModelConfig::standard();
        else if (v == "reduced") c.model = ModelConfig::reduced();
        else if (v == "compact") c.model = ModelConfig::compact();
        else throw ConfigError("model.preset: expected standard, reduced or compact, got '" + v + "'");
        c.preset = v;
    }
    for (const auto& [k, v] : entries) {
        if (k == "model.preset") continue;
        const auto it = setters().find(k);
        if (it == setters().end()) throw ConfigError("unknown config key '" + k + "'");
        it->second(c, k, v);
    }
    c.train.seed = c.seed;
    c.model.validate();
    c.train.validate();
    return c;
}

std::string config_text(const RunConfig& c) {
    std::ostringstream os;
    os << "dataset=" << c.dataset << '\n' << "seed=" << c.seed << '\n' << "model.preset=" << c.preset << '\n';
    os << c.model.to_text();
    os << "train.lr0=" << detail::fmt(c.train.lr0) << '\n'
       << "train.decay=" << detail::fmt(c.train.decay) << '\n'
       << "train.epochs=" << c.train.epochs << '\n'
       << "train.batch=" << c.train.batch << '\n'
       << "train.loso_pretrain_epochs=" << c.train.loso_pretrain_epochs << '\n'
       << "train.finetune_epochs=" << c.train.finetune_epochs << '\n'
       << "train.finetune_fracs=";
    for (std::size_t i = 0; i < c.train.finetune_fracs.size(); ++i) os << (i ? "," : "") << detail::fmt(c.train.finetune_fracs[i]);
    os << '\n'
       << "preprocess.target_fs_hz=" << c.pre.target_fs_hz << '\n'
       << "preprocess.window_s=" << c.pre.window_s << '\n'
       << "preprocess.step_s=" << c.pre.step_s << '\n'
       << "preprocess.filter_order=" << c.pre.filter_order << '\n'
       << "preprocess.cutoff_hz=" << detail::fmt(c.pre.cutoff_hz) << '\n';
    return os.str();
}

std::size_t thread_count() {
    const char* env = std::getenv("ECGSTRESS_THREADS");
    if (!env || !*env) return 1;
    return parse_number<std::size_t>("ECGSTRESS_THREADS", env);
}

fs::path run_directory(const std::string& out, std::uint64_t seed) {
    if (!out.empty()) return out;
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
    return fs::path("runs") / (std::string(stamp) + "-seed" + std::to_string(seed));
}

std::vector<fs::path> files_with_extension(const fs::path& dir, const std::string& ext) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

WindowSet load_windows_for(const fs::path& path, const ModelConfig& cfg) {
    auto ws = read_windows(path);
    if (ws.window_len != cfg.window_len) {
        throw ConfigError("windows in " + path.string() + " have " + std::to_string(ws.window_len) +
                          " samples but model.window_len is " + std::to_string(cfg.window_len) +
                          "; set model.window_len or re-run preprocess with a matching preprocess.window_s");
    }
    return ws;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_import(const RunConfig& c, const fs::path& src, const fs::path& out) {
    const auto dataset = c.dataset == "wesad" ? Dataset::wesad : c.dataset == "swell" ? Dataset::swell : Dataset::synthetic;
    if (dataset == Dataset::synthetic) throw ConfigError("import: dataset must be wesad or swell (use 'synth' for synthetic data)");
    const auto result = import_dataset(src, dataset);
    fs::create_directories(out);
    for (const auto& r : result.records) write_canonical(r, out / (r.subject_id + ".ecgr"));
    std::ofstream(out / "import_report.txt", std::ios::trunc) << result.report.to_text();
    std::cout << "imported " << result.records.size() << " record(s) into " << out.string() << '\n';
    for (const auto& [s, why] : result.report.failed) std::cerr << "failed " << s << ": " << why << '\n';
    if (result.records.empty()) {
        std::cerr << "error: no records imported from " << src.string() << '\n';
        return data_failure;
    }
    return ok;
}

int cmd_synth(const RunConfig& c, const fs::path& out) {
    fs::create_directories(out);
    const auto records = synthetic_records(c.cohort);
    for (const auto& r : records) write_canonical(r, out / (r.subject_id + ".ecgr"));
    std::cout << "wrote " << records.size() << " synthetic record(s) to " << out.string() << '\n';
    return ok;
}

int cmd_preprocess(const RunConfig& c, const fs::path& in, const fs::path& out) {
    const auto files = files_with_extension(in, ".ecgr");
    if (files.empty()) throw DataError("preprocess: no .ecgr records in " + in.string());
    WindowSet all;
    nlohmann::ordered_json skipped = nlohmann::ordered_json::array();
    std::vector<std::string> warnings;
    for (const auto& f : files) {
        const auto rec = read_canonical(f);
        try {
            all.append(preprocess_record(rec, c.pre, &warnings));
        } catch (const DataError& e) {
            skipped.push_back({{"subject", rec.subject_id}, {"reason", e.what()}});
        }
    }
    if (all.empty()) throw DataError("preprocess: no windows produced from " + in.string());
    fs::create_directories(out);
    write_windows(all, out / "windows.ecgw");

    nlohmann::ordered_json manifest;
    manifest["window_len"] = all.window_len;
    manifest["fs_hz"] = all.fs_hz;
    manifest["total_windows"] = all.size();
    auto subjects = nlohmann::ordered_json::object();
    std::size_t stress = 0;
    for (const auto& [id, counts] : count_by_subject(all)) {
        subjects[id] = {{"windows", counts.windows}, {"stress", counts.stress}, {"non_stress", counts.non_stress}};
        stress += counts.stress;
    }
    manifest["stress"] = stress;
    manifest["non_stress"] = all.size() - stress;
    manifest["subjects"] = subjects;
    manifest["skipped"] = skipped;
    manifest["warnings"] = warnings;
    std::ofstream(out / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
    std::cout << "wrote " << all.size() << " window(s) from " << subjects.size() << " subject(s) to " << out.string() << '\n';
    for (const auto& s : skipped) std::cerr << "skipped " << s["subject"].get<std::string>() << ": " << s["reason"].get<std::string>() << '\n';
    return ok;
}

int cmd_loso(const RunConfig& c, const fs::path& windows, const fs::path& out) {
    const auto ws = load_windows_for(windows, c.model);
    LosoOptions opt;
    opt.fractions = {0.0};
    opt.fractions.insert(opt.fractions.end(), c.train.finetune_fracs.begin(), c.train.finetune_fracs.end());
    opt.threads = thread_count();
    const auto result = run_loso(ws, c.model, c.train, opt);
    const auto violations = protocol_violations(result, ws);
    fs::create_directories(out);
    std::ofstream(out / "config.txt", std::ios::trunc) << config_text(c);
    write_loso_outputs(result, ws, c.train, out, c.dataset);
    std::cout << loso_table(result, c.dataset);
    if (!violations.empty()) {
        for (const auto& v : violations) std::cerr << "protocol violation: " << v << '\n';
        return internal;
    }
    return ok;
}

int cmd_train(const RunConfig& c, const fs::path& windows, const fs::path& out) {
    const auto ws = load_windows_for(windows, c.model);
    std::vector<std::size_t> all(ws.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    Rng init = Rng(c.seed).derive(1);
    auto params = init_params(c.model, init);
    const auto r = train(params, c.model, ws, all, c.train, TrainMode::plain, Rng(c.seed));
    fs::create_directories(out);
    std::ofstream(out / "config.txt", std::ios::trunc) << config_text(c);
    save_checkpoint(params, c.model, out / "model.ckpt");
    write_loss_curve(out / "loss.txt", r.loss_curve);
    std::cout << "trained " << r.loss_curve.size() << " epoch(s); final loss " << detail::fmt(r.loss_curve.back()) << '\n';
    if (r.skipped_updates) std::cerr << "warning: " << r.skipped_updates << " update(s) skipped on non-finite gradients\n";
    return ok;
}

int cmd_finetune(const RunConfig& c, const fs::path& checkpoint, const fs::path& windows, const std::string& subject,
                 double fraction, const fs::path& out) {
    const auto ws = load_windows_for(windows, c.model);
    const auto idx = ws.indices_of(subject);
    if (idx.empty()) throw DataError("finetune: subject " + subject + " has no windows in " + windows.string());
    auto params = load_checkpoint(checkpoint, c.model);
    Rng split_rng = Rng(c.seed).derive(2);
    const auto split = finetune_split(ws, idx, fraction, split_rng);
    const auto r = finetune(params, c.model, ws, split.calibration, c.train, Rng(c.seed).derive(3));
    const auto ev = evaluate(params, c.model, ws, split.evaluation);
    EvalReport report;
    report.add_fold(subject, ev.counts);
    fs::create_directories(out);
    std::ofstream(out / "config.txt", std::ios::trunc) << config_text(c);
    save_checkpoint(params, c.model, out / "model.ckpt");
    write_loss_curve(out / "loss.txt", r.loss_curve, c.train.loso_pretrain_epochs);
    std::ofstream(out / "report.txt", std::ios::trunc) << report.to_text();
    std::cout << report.to_text();
    return ok;
}

int cmd_gradcheck(const std::string& inject, bool skip_model, std::uint64_t seed) {
    if (!inject.empty() && inject != "conv1d") throw ConfigError("--inject-fault: only 'conv1d' is available");
    fault::corrupt_conv1d_backward = inject == "conv1d";
    const auto results = gradcheck::run_suite(seed == 0 ? 1 : seed, !skip_model);
    fault::corrupt_conv1d_backward = false;
    std::vector<std::string> failed;
    std::printf("%-22s %-12s %-9s %-8s %-6s %s\n", "op", "max_rel_err", "tol", "checked", "kinks", "status");
    for (const auto& r : results) {
        std::printf("%-22s %-12.3e %-9.1e %-8zu %-6zu %s\n", r.name.c_str(), r.max_rel_error, r.tolerance, r.checked,
                    r.kink_excluded, r.passed ? "PASS" : "FAIL");
        if (!r.passed) failed.push_back(r.name);
    }
    if (failed.empty()) return ok;
    std::cerr << "gradient check failed for:";
    for (const auto& f : failed) std::cerr << ' ' << f;
    std::cerr << '\n';
    return numeric_failure;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ECG stress classification: import, preprocess, train and evaluate"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_file, out;
    std::vector<std::string> overrides;
    app.add_option("-c,--config", config_file, "key=value config file");
    app.add_option("-s,--set", overrides, "override a config key, e.g. --set model.preset=reduced");
    app.add_option("-o,--out", out, "output directory (default: runs/<timestamp>-seed<seed>)");

    std::string src, in, windows, checkpoint, subject, inject;
    double fraction = 0.10;
    bool skip_model = false;

    auto* import = app.add_subcommand("import", "convert adapter CSVs to canonical .ecgr records");
    import->add_option("--src", src, "directory of <subject>.csv files")->required();
    auto* synth = app.add_subcommand("synth", "write a synthetic cohort as .ecgr records");
    auto* preprocess = app.add_subcommand("preprocess", "filter, resample, normalize and window .ecgr records");
    preprocess->add_option("--in", in, "directory of .ecgr records")->required();
    auto* loso = app.add_subcommand("loso", "leave-one-subject-out evaluation with fine-tuning sweep");
    loso->add_option("--windows", windows, "window archive from preprocess")->required();
    auto* trn = app.add_subcommand("train", "train on every window and save a checkpoint");
    trn->add_option("--windows", windows, "window archive from preprocess")->required();
    auto* ft = app.add_subcommand("finetune", "fine-tune a checkpoint on part of one subject and evaluate the rest");
    ft->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    ft->add_option("--windows", windows, "window archive from preprocess")->required();
    ft->add_option("--subject", subject, "subject id")->required();
    ft->add_option("--fraction", fraction, "calibration fraction of the subject's windows");
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every primitive and the reduced model");
    gc->add_option("--inject-fault", inject, "corrupt one backward pass (conv1d) to confirm the check catches it");
    gc->add_flag("--skip-model", skip_model, "primitives only");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_failure;
    }

    try {
        const auto cfg = resolve_config(config_file, overrides);
        if (gc->parsed()) return cmd_gradcheck(inject, skip_model, cfg.seed);
        const auto dir = run_directory(out, cfg.seed);
        if (import->parsed()) return cmd_import(cfg, src, dir);
        if (synth->parsed()) return cmd_synth(cfg, dir);
        if (preprocess->parsed()) return cmd_preprocess(cfg, in, dir);
        if (loso->parsed()) return cmd_loso(cfg, windows, dir);
        if (trn->parsed()) return cmd_train(cfg, windows, dir);
        if (ft->parsed()) return cmd_finetune(cfg, checkpoint, windows, subject, fraction, dir);
    } catch (const Error& e) {
        std::cerr << to_string(e.kind()) << " error: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return internal;
    }
    return internal;
}
