#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "coinseg/cli.hpp"
#include "coinseg/errors.hpp"
#include "coinseg/parallel.hpp"

namespace {

using namespace coinseg;

/// Flags shared by train and bench that override config-file values.
struct Overrides {
    std::optional<std::string> scenario;
    std::optional<int> classes;
    std::optional<std::string> data;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<int> memory;
    bool freeze = false;
    std::optional<std::string> lr_mode;
    std::optional<double> lambda_c, lambda_r, lambda_lr, tau, lr0;
    std::optional<int> epochs, batch_size;
    std::optional<std::string> split_mode;

    void add_flags(CLI::App& app) {
        app.add_option("--scenario", scenario, "incremental scenario \"X-Y\"");
        app.add_option("--classes", classes, "number of foreground classes");
        app.add_option("--data", data, "VOC-style data directory (default: synthetic shapes)");
        app.add_option("--out", out, "output directory");
        app.add_option("--seed", seed, "root seed");
        app.add_option("--memory", memory, "enable rehearsal memory with capacity M (0: 2 x classes)");
        app.add_flag("--freeze", freeze, "freeze old parameters after step 1");
        app.add_option("--lr-mode", lr_mode, "flexible | freeze | uniform");
        app.add_option("--lambda-c", lambda_c, "contrastive loss weight");
        app.add_option("--lambda-r", lambda_r, "distillation loss weight");
        app.add_option("--lambda-lr", lambda_lr, "initial learning-rate decay factor");
        app.add_option("--tau", tau, "pseudo-label confidence threshold");
        app.add_option("--lr0", lr0, "base learning rate");
        app.add_option("--epochs", epochs, "epochs per step");
        app.add_option("--batch-size", batch_size, "batch size");
        app.add_option("--split", split_mode, "overlapped | disjoint");
    }

    void apply(TrainConfig& t) const {
        if (memory) {
            t.memory = true;
            t.memory_capacity = *memory;
        }
        if (lr_mode) t.lr_mode = parse_lr_mode(*lr_mode);
        if (freeze) t.lr_mode = LrMode::freeze;
        if (lambda_c) t.lambda_c = *lambda_c;
        if (lambda_r) t.lambda_r = *lambda_r;
        if (lambda_lr) t.lambda_lr = *lambda_lr;
        if (tau) t.tau = *tau;
        if (lr0) t.lr0 = *lr0;
        if (epochs) t.epochs = *epochs;
        if (batch_size) t.batch_size = *batch_size;
    }

    void apply(RunConfig& c) const {
        if (scenario) c.scenario = *scenario;
        if (classes) c.classes = *classes;
        if (data) c.data.path = *data;
        if (out) c.out = *out;
        if (seed) c.seed = *seed;
        if (split_mode) c.mode = parse_split_mode(*split_mode);
        apply(c.train);
    }
};

int run(int argc, char** argv) {
    CLI::App app{"Class-incremental semantic segmentation toolkit"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "debug logging");

    // generate
    auto* gen = app.add_subcommand("generate", "write a synthetic shapes dataset");
    GenerateOptions gen_opts;
    std::string gen_out = gen_opts.out.string();
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--classes", gen_opts.synthetic.num_classes, "number of shape classes");
    gen->add_option("--samples-per-class", gen_opts.synthetic.samples_per_class, "training images per class");
    gen->add_option("--val-per-class", gen_opts.validation_per_class, "validation images per class");
    gen->add_option("--image-size", gen_opts.synthetic.image_size, "square image extent");
    gen->add_option("--seed", gen_opts.synthetic.seed, "generator seed");
    gen->add_flag("--force", gen_opts.force, "overwrite an existing directory");

    // train
    auto* train = app.add_subcommand("train", "train all incremental steps");
    Overrides train_over;
    std::string train_config;
    TrainOptions train_opts;
    train->add_option("--config", train_config, "JSON run config (flags take precedence)");
    train_over.add_flags(*train);
    train->add_flag("--resume", train_opts.resume, "continue after the last complete step");
    train->add_flag("--force", train_opts.force, "overwrite an existing run directory");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a step checkpoint");
    EvalCommandOptions eval_opts;
    std::string eval_ckpt, eval_data, eval_out;
    bool exclude_unknown = false;
    eval->add_option("checkpoint", eval_ckpt, "step checkpoint directory")->required();
    eval->add_option("--data", eval_data, "VOC-style data directory with a val/ split");
    eval->add_option("--out", eval_out, "write the metrics JSON here");
    eval->add_flag("--exclude-unknown", exclude_unknown, "leave c_u out of the group means");

    // bench
    auto* bench = app.add_subcommand("bench", "compare fine-tune, freeze and the full method");
    BenchOptions bench_opts = BenchOptions::defaults();
    Overrides bench_over;
    bench_over.add_flags(*bench);

    // plot
    auto* plot = app.add_subcommand("plot", "rebuild the mIoU curve of a run");
    std::string plot_dir;
    plot->add_option("run_dir", plot_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfigError;
    }
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
    const int workers = worker_count_from_env();

    if (*gen) {
        gen_opts.out = gen_out;
        cmd_generate(gen_opts);
    } else if (*train) {
        RunConfig cfg = train_config.empty() ? RunConfig{} : RunConfig::from_file(train_config);
        train_over.apply(cfg);
        train_opts.workers = workers;
        cmd_train(cfg, train_opts);
        std::cout << fmt::format("run written to {}\n", cfg.out.string());
    } else if (*eval) {
        eval_opts.checkpoint = eval_ckpt;
        if (!eval_data.empty()) {
            DataSource d;
            d.path = eval_data;
            eval_opts.data = d;
        }
        eval_opts.out = eval_out;
        eval_opts.eval.unknown_as_background = !exclude_unknown;
        eval_opts.eval.workers = workers;
        const MetricsRecord r = cmd_eval(eval_opts);
        std::cout << r.to_json().dump(2) << '\n';
    } else if (*bench) {
        if (bench_over.out) bench_opts.out = *bench_over.out;
        if (bench_over.scenario) bench_opts.scenario = *bench_over.scenario;
        if (bench_over.classes) bench_opts.synthetic.num_classes = *bench_over.classes;
        if (bench_over.seed) bench_opts.seed = *bench_over.seed;
        if (bench_over.data) throw ConfigError("bench runs on the synthetic benchmark only");
        bench_over.apply(bench_opts.base);
        bench_opts.workers = workers;
        const BenchReport report = cmd_bench(bench_opts);
        std::cout << report.markdown();
    } else if (*plot) {
        const auto records = cmd_plot(plot_dir);
        std::cout << fmt::format("plotted {} steps to {}/curves.svg\n", records.size(), plot_dir);
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const coinseg::ConfigError& e) {
        spdlog::error("configuration error: {}", e.what());
        return coinseg::kExitConfigError;
    } catch (const coinseg::DataError& e) {
        spdlog::error("data error: {}", e.what());
        return coinseg::kExitDataError;
    } catch (const coinseg::TrainingError& e) {
        spdlog::error("training error: {}", e.what());
        return coinseg::kExitTrainingError;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return coinseg::kExitFailure;
    }
}
