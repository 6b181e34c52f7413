#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coinseg/data.hpp"
#include "coinseg/eval.hpp"
#include "coinseg/scenario.hpp"
#include "coinseg/trainer.hpp"

namespace coinseg {

/// Process exit codes of the command-line tool.
enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitConfigError = 2,
    kExitDataError = 3,
    kExitTrainingError = 4,
};

/// Where training and validation samples come from. An empty path selects
/// the in-memory synthetic generator.
struct DataSource {
    std::filesystem::path path;
    SyntheticSpec synthetic;
    int validation_per_class = 10;

    [[nodiscard]] nlohmann::json to_json() const;
    static DataSource from_json(const nlohmann::json& j);
};

struct RunConfig {
    std::string scenario = "2-2";
    int classes = 6;
    SplitMode mode = SplitMode::overlapped;
    bool shuffle_class_order = false;  // seed-derived class order
    DataSource data;
    TrainConfig train;
    EvalOptions eval;
    std::filesystem::path out = "runs/coinseg";
    std::uint64_t seed = 1;  // root seed; training randomness derives from it

    [[nodiscard]] IncrementalScenario build_scenario() const;
    [[nodiscard]] nlohmann::json to_json() const;
    /// Missing keys keep their defaults.
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig from_file(const std::filesystem::path& path);
};

struct LoadedData {
    Dataset train;
    std::optional<Dataset> validation;
};
LoadedData load_run_data(const RunConfig& config);

struct GenerateOptions {
    std::filesystem::path out = "data/shapes";
    SyntheticSpec synthetic;
    int validation_per_class = 10;
    bool force = false;
};

/// Writes <out>/train and <out>/val VOC-style folders plus dataset.json.
/// Refuses a non-empty output directory unless `force` is set.
void cmd_generate(const GenerateOptions& options);

struct TrainOptions {
    bool resume = false;
    bool force = false;
    int workers = 1;
};

/// Serializes the config into the run directory, trains every step and
/// writes checkpoints, metrics.jsonl and curves.
RunResult cmd_train(const RunConfig& config, const TrainOptions& options = {});

struct EvalCommandOptions {
    std::filesystem::path checkpoint;
    std::optional<DataSource> data;  // defaults to the run's recorded source
    EvalOptions eval;
    std::filesystem::path out;       // optional metrics JSON destination
};

MetricsRecord cmd_eval(const EvalCommandOptions& options);

struct BenchOptions {
    std::filesystem::path out = "runs/bench";
    std::string scenario = "2-2";
    SyntheticSpec synthetic;
    int validation_per_class = 10;
    std::uint64_t seed = 1;
    TrainConfig base;  // shared settings; each method overrides its own fields
    int workers = 1;

    /// Desk-scale defaults used by the benchmark.
    static BenchOptions defaults();
};

struct BenchRow {
    std::string method;
    double base_step1 = 0.0;
    double base = 0.0;
    double novel = 0.0;
    double all = 0.0;
    [[nodiscard]] double base_drop() const { return base_step1 - base; }
    bool operator==(const BenchRow&) const = default;
};

struct BenchReport {
    std::string scenario;
    std::vector<BenchRow> rows;
    [[nodiscard]] const BenchRow& row(const std::string& method) const;
    [[nodiscard]] nlohmann::json to_json() const;
    [[nodiscard]] std::string markdown() const;
    bool operator==(const BenchReport&) const = default;
};

/// Training configs of the three compared methods.
TrainConfig bench_method_config(const std::string& method, const TrainConfig& base);

/// Fine-tune baseline, freeze ablation and full method on one scenario.
BenchReport cmd_bench(const BenchOptions& options);

/// Rebuilds curves.csv / curves.svg from the per-step metrics of a run.
std::vector<MetricsRecord> cmd_plot(const std::filesystem::path& run_dir);

}  // namespace coinseg
