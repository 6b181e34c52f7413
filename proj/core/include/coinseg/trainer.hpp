#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coinseg/data.hpp"
#include "coinseg/eval.hpp"
#include "coinseg/losses.hpp"
#include "coinseg/model.hpp"
#include "coinseg/optimizer.hpp"
#include "coinseg/proposals.hpp"
#include "coinseg/scenario.hpp"

namespace coinseg {

/// How old parameters (feature extractor, c_u and old-class channels) are tuned after step 1.
enum class LrMode {
    flexible,  // exponentially reduced initial LR
    freeze,    // LR 0: old parameters never change
    uniform,   // every parameter at lr0 (fine-tune baseline)
};
std::string to_string(LrMode mode);
LrMode parse_lr_mode(std::string_view text);

struct TrainConfig {
    double lr0 = 1e-4;
    double lambda_lr = 1e-3;
    double lambda_c = 0.01;
    double lambda_r = 0.1;
    double tau = 0.7;
    int proposals = 100;  // N
    int batch_size = 8;
    int epochs = 30;
    std::uint64_t seed = 1;
    bool memory = false;
    int memory_capacity = 0;  // 0 selects 2 x total foreground classes
    LrMode lr_mode = LrMode::flexible;
    bool pseudo_labels = true;
    bool normalize_prototypes = true;
    double weight_decay = 1e-4;
    bool augment = true;
    AugmentConfig augmentation;
    ModelConfig model;

    /// Throws ConfigError when a field is out of range.
    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    /// Missing keys keep their defaults.
    static TrainConfig from_json(const nlohmann::json& j);
    bool operator==(const TrainConfig&) const = default;
};

/// Initial LR of step t: lr0 at t = 1, e^{-t} lambda_lr lr0 afterwards.
double lr_for_step(int t, double lr0, double lambda_lr);

/// t = 1: one group at lr0. t > 1: group A (feature extractor, c_u and
/// C^{1:t-1} channels) at the mode's LR and group B (C^t channels) at lr0.
std::vector<ParamGroup> build_param_groups(const SegModel& model, const IncrementalScenario& scenario, int t,
                                           const TrainConfig& config);

struct StepReport {
    int step = 0;
    LossBreakdown mean_losses;        // averaged over the step's iterations
    std::optional<MetricsRecord> metrics;
    std::string checkpoint;
    double wall_seconds = 0.0;
    int iterations = 0;
    int samples = 0;                  // training samples in the step (incl. memory)
    int memory_samples = 0;

    [[nodiscard]] nlohmann::json to_json() const;
    static StepReport from_json(const nlohmann::json& j);
};

/// Per-iteration record appended to metrics.jsonl.
struct IterationRecord {
    int step = 0;
    int epoch = 0;
    int iteration = 0;
    LossBreakdown losses;
};

struct StepContext {
    const IncrementalScenario* scenario = nullptr;
    const Dataset* train = nullptr;
    const ProposalCache* proposals = nullptr;  // required when lambda_c > 0
    std::filesystem::path out_dir;             // empty: no files written
    int workers = 1;
};

/// A fresh model whose classifier covers c_u and C^1.
SegModel make_initial_model(const IncrementalScenario& scenario, const TrainConfig& config);

/// Trains step t. At t > 1 the model must cover exactly c_u and C^{1:t-1};
/// it is snapshotted as the teacher and then expanded with C^t.
StepReport train_step_t(SegModel& model, const StepContext& context, const TrainConfig& config, int t,
                        std::vector<IterationRecord>* log = nullptr);

struct RunOptions {
    std::filesystem::path out_dir;           // empty: in-memory run
    const Dataset* validation = nullptr;     // evaluated after every step when set
    EvalOptions eval;
    bool resume = false;                     // continue after the last complete checkpoint
    int workers = 1;
};

struct RunResult {
    std::vector<StepReport> reports;
    SegModel model;
};

RunResult run_scenario(const IncrementalScenario& scenario, const Dataset& train, const TrainConfig& config,
                       const RunOptions& options = {});

/// Samples admitted at step t plus, with memory on, the rehearsal bank.
struct StepData {
    std::vector<std::size_t> current;
    MemoryBank memory;
};
StepData step_data(const IncrementalScenario& scenario, const Dataset& train, const TrainConfig& config, int t);

std::filesystem::path step_dir(const std::filesystem::path& out_dir, int t);

}  // namespace coinseg
