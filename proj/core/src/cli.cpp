#include "coinseg/cli.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "coinseg/errors.hpp"

namespace coinseg {
namespace fs = std::filesystem;
namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw DataError(fmt::format("cannot write '{}'", path.string()));
    os << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError(fmt::format("cannot read '{}'", path.string()));
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("invalid JSON in '{}': {}", path.string(), e.what()));
    }
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p)); }

SyntheticSpec validation_spec(const SyntheticSpec& train, int per_class) {
    return {train.num_classes, per_class, train.image_size, derive_seed(train.seed, "validation")};
}

std::string pct(double v) { return std::isnan(v) ? "n/a" : fmt::format("{:.2f}", 100.0 * v); }

nlohmann::json number_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

/// Step whose seen classes (plus c_u) are exactly the model's channels.
int step_for_channels(const IncrementalScenario& scenario, const std::vector<ClassId>& channels) {
    for (int t = 1; t <= scenario.num_steps(); ++t) {
        std::vector<ClassId> expected{kUnknownId};
        const auto seen = scenario.seen_classes(t);
        expected.insert(expected.end(), seen.begin(), seen.end());
        if (expected == channels) return t;
    }
    throw DataError("checkpoint channels do not correspond to any step of its scenario");
}

}  // namespace

nlohmann::json DataSource::to_json() const {
    return {{"path", path.string()},
            {"synthetic",
             {{"num_classes", synthetic.num_classes},
              {"samples_per_class", synthetic.samples_per_class},
              {"image_size", synthetic.image_size},
              {"seed", synthetic.seed}}},
            {"validation_per_class", validation_per_class}};
}

DataSource DataSource::from_json(const nlohmann::json& j) {
    DataSource d;
    d.path = j.value("path", std::string{});
    if (j.contains("synthetic")) {
        const auto& s = j.at("synthetic");
        d.synthetic.num_classes = s.value("num_classes", d.synthetic.num_classes);
        d.synthetic.samples_per_class = s.value("samples_per_class", d.synthetic.samples_per_class);
        d.synthetic.image_size = s.value("image_size", d.synthetic.image_size);
        d.synthetic.seed = s.value("seed", d.synthetic.seed);
    }
    d.validation_per_class = j.value("validation_per_class", d.validation_per_class);
    return d;
}

IncrementalScenario RunConfig::build_scenario() const {
    std::optional<std::vector<ClassId>> order;
    if (shuffle_class_order) order = shuffled_class_order(classes, derive_seed(seed, "class_order"));
    return parse_scenario(scenario, classes, order, mode);
}

nlohmann::json RunConfig::to_json() const {
    return {{"scenario", scenario},
            {"classes", classes},
            {"mode", to_string(mode)},
            {"shuffle_class_order", shuffle_class_order},
            {"data", data.to_json()},
            {"train", train.to_json()},
            {"eval", {{"unknown_as_background", eval.unknown_as_background}}},
            {"out", out.string()},
            {"seed", seed}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
        c.scenario = j.value("scenario", c.scenario);
        c.classes = j.value("classes", c.classes);
        if (j.contains("mode")) c.mode = parse_split_mode(j.at("mode").get<std::string>());
        c.shuffle_class_order = j.value("shuffle_class_order", c.shuffle_class_order);
        if (j.contains("data")) c.data = DataSource::from_json(j.at("data"));
        if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
        if (j.contains("eval")) c.eval.unknown_as_background = j.at("eval").value("unknown_as_background", true);
        c.out = j.value("out", c.out.string());
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("invalid run config: {}", e.what()));
    }
    return c;
}

RunConfig RunConfig::from_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(fmt::format("cannot open config file '{}'", path.string()));
    try {
        return from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(fmt::format("config file '{}' is not valid JSON: {}", path.string(), e.what()));
    }
}

LoadedData load_run_data(const RunConfig& config) {
    if (config.data.path.empty()) {
        SyntheticSpec spec = config.data.synthetic;
        spec.num_classes = config.classes;
        return {generate_synthetic_dataset(spec),
                generate_synthetic_dataset(validation_spec(spec, config.data.validation_per_class))};
    }
    const fs::path root = config.data.path;
    if (!fs::exists(root)) throw DataError(fmt::format("data directory '{}' does not exist", root.string()));
    if (fs::exists(root / "train")) {
        LoadedData d{load_voc_style(root / "train", config.classes), std::nullopt};
        if (fs::exists(root / "val")) d.validation = load_voc_style(root / "val", config.classes);
        return d;
    }
    spdlog::warn("'{}' has no train/ folder; using it as training data without validation", root.string());
    return {load_voc_style(root, config.classes), std::nullopt};
}

void cmd_generate(const GenerateOptions& options) {
    if (non_empty_dir(options.out)) {
        if (!options.force) {
            throw ConfigError(fmt::format("output directory '{}' exists; pass --force to overwrite", options.out.string()));
        }
        fs::remove_all(options.out);
    }
    const Dataset train = generate_synthetic_dataset(options.synthetic);
    const Dataset val = generate_synthetic_dataset(validation_spec(options.synthetic, options.validation_per_class));
    write_voc_style(train, options.out / "train");
    write_voc_style(val, options.out / "val");
    write_json(options.out / "dataset.json",
               {{"num_classes", options.synthetic.num_classes},
                {"samples_per_class", options.synthetic.samples_per_class},
                {"validation_per_class", options.validation_per_class},
                {"image_size", options.synthetic.image_size},
                {"seed", options.synthetic.seed},
                {"train_samples", train.size()},
                {"val_samples", val.size()}});
    spdlog::info("wrote {} training and {} validation samples to {}", train.size(), val.size(), options.out.string());
}

RunResult cmd_train(const RunConfig& config, const TrainOptions& options) {
    RunConfig resolved = config;
    resolved.train.seed = config.seed;
    resolved.train.validate();
    const IncrementalScenario scenario = resolved.build_scenario();

    if (!options.resume && non_empty_dir(resolved.out)) {
        if (!options.force) {
            throw ConfigError(
                fmt::format("run directory '{}' exists; pass --force to overwrite or --resume", resolved.out.string()));
        }
        fs::remove_all(resolved.out);
    }
    if (options.resume && fs::exists(resolved.out / "run_config.json")) {
        const auto recorded = read_json(resolved.out / "run_config.json");
        if (recorded.at("train") != resolved.train.to_json() || recorded.at("scenario") != resolved.scenario) {
            throw ConfigError("cannot resume: the run directory was created with a different configuration");
        }
    }
    fs::create_directories(resolved.out);
    write_json(resolved.out / "run_config.json", resolved.to_json());

    LoadedData data = load_run_data(resolved);
    RunOptions run;
    run.out_dir = resolved.out;
    run.validation = data.validation ? &*data.validation : nullptr;
    run.eval = resolved.eval;
    run.eval.workers = options.workers;
    run.resume = options.resume;
    run.workers = options.workers;
    RunResult result = run_scenario(scenario, data.train, resolved.train, run);
    for (const auto& r : result.reports) {
        if (!r.metrics) continue;
        spdlog::info("step {}: mIoU base {} novel {} all {}", r.step, pct(r.metrics->base_miou),
                     pct(r.metrics->novel_miou), pct(r.metrics->all_miou));
    }
    return result;
}

MetricsRecord cmd_eval(const EvalCommandOptions& options) {
    const fs::path dir = options.checkpoint;
    if (!fs::exists(dir / "weights.bin") || !fs::exists(dir / "channels.json")) {
        throw DataError(fmt::format("no checkpoint found at '{}'", dir.string()));
    }
    if (!fs::exists(dir / "scenario.json")) {
        throw DataError(fmt::format("checkpoint '{}' has no scenario manifest", dir.string()));
    }
    const SegModel model = SegModel::load(dir);
    const IncrementalScenario scenario = IncrementalScenario::from_json(read_json(dir / "scenario.json"));
    const int t = step_for_channels(scenario, model.channel_ids());

    RunConfig cfg;
    cfg.classes = scenario.total_foreground_classes();
    if (options.data) {
        cfg.data = *options.data;
    } else if (fs::exists(dir.parent_path() / "run_config.json")) {
        cfg = RunConfig::from_json(read_json(dir.parent_path() / "run_config.json"));
    } else {
        throw ConfigError("no data source given and the checkpoint has no recorded run config");
    }
    const LoadedData data = load_run_data(cfg);
    if (!data.validation) throw DataError("the data source has no validation split");
    const MetricsRecord record = evaluate(model, *data.validation, scenario, t, options.eval);
    if (!options.out.empty()) write_json(options.out, record.to_json());
    return record;
}

BenchOptions BenchOptions::defaults() {
    BenchOptions o;
    // A scratch-trained backbone on a few hundred images needs a larger base
    // LR and old-parameter plasticity than the pretrained setting: with
    // lambda_lr = e^2 the old parameters start step 2 at lr0 and decay from there.
    o.base.lr0 = 1e-3;
    o.base.lambda_lr = std::exp(2.0);
    o.base.epochs = 30;
    o.base.batch_size = 8;
    o.base.model.init_new_from_unknown = true;
    return o;
}

TrainConfig bench_method_config(const std::string& method, const TrainConfig& base) {
    TrainConfig c = base;
    if (method == "finetune") {
        c.lr_mode = LrMode::uniform;
        c.lambda_c = 0.0;
        c.lambda_r = 0.0;
        c.pseudo_labels = false;
    } else if (method == "freeze") {
        c.lr_mode = LrMode::freeze;
    } else if (method == "coinseg") {
        c.lr_mode = LrMode::flexible;
    } else {
        throw ConfigError(fmt::format("unknown benchmark method '{}'", method));
    }
    return c;
}

const BenchRow& BenchReport::row(const std::string& method) const {
    for (const auto& r : rows) {
        if (r.method == method) return r;
    }
    throw ConfigError(fmt::format("benchmark report has no row '{}'", method));
}

nlohmann::json BenchReport::to_json() const {
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : rows) {
        rs.push_back({{"method", r.method},
                      {"miou_base_step1", number_or_null(r.base_step1)},
                      {"miou_base", number_or_null(r.base)},
                      {"miou_novel", number_or_null(r.novel)},
                      {"miou_all", number_or_null(r.all)},
                      {"base_drop", number_or_null(r.base_drop())}});
    }
    return {{"scenario", scenario}, {"rows", rs}};
}

std::string BenchReport::markdown() const {
    std::string s = fmt::format("scenario {}\n\n| method | base (step 1) | base | novel | all | base drop |\n"
                                "|---|---|---|---|---|---|\n",
                                scenario);
    for (const auto& r : rows) {
        s += fmt::format("| {} | {} | {} | {} | {} | {} |\n", r.method, pct(r.base_step1), pct(r.base), pct(r.novel),
                         pct(r.all), pct(r.base_drop()));
    }
    return s;
}

BenchReport cmd_bench(const BenchOptions& options) {
    SyntheticSpec spec = options.synthetic;
    const Dataset train = generate_synthetic_dataset(spec);
    const Dataset val = generate_synthetic_dataset(validation_spec(spec, options.validation_per_class));
    const IncrementalScenario scenario = parse_scenario(options.scenario, spec.num_classes);

    BenchReport report;
    report.scenario = options.scenario;
    for (const std::string method : {"finetune", "freeze", "coinseg"}) {
        TrainConfig cfg = bench_method_config(method, options.base);
        cfg.seed = options.seed;
        RunOptions run;
        if (!options.out.empty()) {
            run.out_dir = options.out / method;
            if (fs::exists(run.out_dir)) fs::remove_all(run.out_dir);
        }
        run.validation = &val;
        run.workers = options.workers;
        run.eval.workers = options.workers;
        spdlog::info("bench: training {}", method);
        const RunResult result = run_scenario(scenario, train, cfg, run);
        const auto& first = *result.reports.front().metrics;
        const auto& last = *result.reports.back().metrics;
        report.rows.push_back({method, first.base_miou, last.base_miou, last.novel_miou, last.all_miou});
    }
    if (!options.out.empty()) {
        fs::create_directories(options.out);
        write_json(options.out / "bench.json", report.to_json());
        std::ofstream(options.out / "bench.md") << report.markdown();
    }
    return report;
}

std::vector<MetricsRecord> cmd_plot(const fs::path& run_dir) {
    std::vector<MetricsRecord> records;
    for (int t = 1;; ++t) {
        const fs::path p = step_dir(run_dir, t) / "metrics.json";
        if (!fs::exists(p)) break;
        records.push_back(MetricsRecord::from_json(read_json(p)));
    }
    if (records.empty()) throw DataError(fmt::format("no step metrics found under '{}'", run_dir.string()));
    emit_curves(records, run_dir / "curves.csv", run_dir / "curves.svg");
    return records;
}

}  // namespace coinseg
