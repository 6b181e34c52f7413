#include "coinseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "coinseg/errors.hpp"
#include "coinseg/parallel.hpp"

namespace coinseg {
namespace {

struct TrainItem {
    std::size_t index = 0;
    bool memory = false;
};

struct SampleResult {
    LossComponents components;
    nn::FloatBuffer grad;
};

void add_scaled(Tensor& dst, const Tensor& src, double scale) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

LossComponents mean_components(const std::vector<LossComponents>& parts) {
    LossComponents m;
    if (parts.empty()) return m;
    for (const auto& p : parts) {
        m.bce += p.bce;
        m.inter += p.inter;
        m.intra += p.intra;
        m.feature_kd += p.feature_kd;
        m.logit_kd += p.logit_kd;
    }
    const double n = static_cast<double>(parts.size());
    m.bce /= n;
    m.inter /= n;
    m.intra /= n;
    m.feature_kd /= n;
    m.logit_kd /= n;
    return m;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw DataError(fmt::format("cannot write '{}'", path.string()));
    os << j.dump(2) << '\n';
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError(fmt::format("cannot read '{}'", path.string()));
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("invalid JSON in '{}': {}", path.string(), e.what()));
    }
}

nlohmann::json iteration_json(const IterationRecord& r) {
    nlohmann::json j = r.losses.to_json();
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    j["iteration"] = r.iteration;
    return j;
}

SampleResult process_sample(const SegModel& model, const FrozenModel* teacher, const StepContext& ctx,
                            const TrainConfig& cfg, int t, const TrainItem& item, std::uint64_t augment_seed,
                            double batch_weight) {
    const auto& scenario = *ctx.scenario;
    const SegSample sample = ctx.train->sample(item.index);
    const int size = model.config().input_size;
    const AugmentParams params = cfg.augment
                                     ? sample_augment_params(sample.mask.height(), sample.mask.width(), size, size,
                                                             augment_seed, cfg.augmentation)
                                     : AugmentParams{false, 1.0, 0, 0, size, size};
    const SegSample aug = apply_augment(sample, params);

    LabelGrid labels = item.memory ? relabel_keep(aug.mask, scenario.seen_classes(t - 1),
                                                  scenario.total_foreground_classes())
                                   : relabel_for_step(aug.mask, scenario, t);
    std::optional<ForwardOutput> previous;
    if (teacher) {
        previous = teacher->forward(aug.image);
        if (cfg.pseudo_labels) {
            const auto pred = predict_from_logits(previous->logits);
            labels = mix_labels(labels, pred.labels, pred.confidence, cfg.tau);
        }
    }

    Activations acts;
    const ForwardOutput out = model.forward(aug.image, acts);
    SampleResult result;
    LossValue bce = bce_seg(out.logits, labels, true);
    result.components.bce = bce.loss;
    Tensor dlogits = std::move(bce.gradient);
    Tensor dfeatures;

    if (teacher) {
        const bool grad_c = cfg.lambda_c > 0.0;
        const bool grad_r = cfg.lambda_r > 0.0;
        const ContrastiveOptions copts{cfg.normalize_prototypes};
        dfeatures = Tensor(out.features.channels(), out.features.height(), out.features.width());

        const auto inter = inter_class_loss(labels, out.features, previous->features, copts, grad_c);
        result.components.inter = inter.loss;
        if (grad_c && !inter.skipped) add_scaled(dfeatures, inter.gradient, cfg.lambda_c);

        if (ctx.proposals) {
            const MaskProposalSet& cached = ctx.proposals->get(ctx.train->id(item.index));
            const MaskProposalSet warped(cached.slots(), warp_nearest(cached.assignment(), params, kNoProposal));
            const auto intra = intra_class_loss(warped, out.features, previous->features, copts, grad_c);
            result.components.intra = intra.loss;
            if (grad_c && !intra.skipped) add_scaled(dfeatures, intra.gradient, cfg.lambda_c);
        } else if (grad_c) {
            throw ConfigError("the intra-class loss needs a proposal cache");
        }

        const LossValue fkd = feature_kd(out.features, previous->features, grad_r);
        result.components.feature_kd = fkd.loss;
        if (grad_r) add_scaled(dfeatures, fkd.gradient, cfg.lambda_r);

        const auto current = scenario.classes_at(t);
        const LogitMap remodeled = remodel_logits(out.logits, current);
        const LossValue lkd = logit_kd(remodeled, previous->logits, grad_r);
        result.components.logit_kd = lkd.loss;
        if (grad_r) add_scaled(dlogits, remodel_logits_backward(out.logits, current, lkd.gradient), cfg.lambda_r);
    }

    // Validates this sample's components before they reach the batch mean.
    (void)total_objective(result.components, cfg.lambda_c, cfg.lambda_r);

    for (std::size_t i = 0; i < dlogits.size(); ++i) dlogits[i] *= batch_weight;
    for (std::size_t i = 0; i < dfeatures.size(); ++i) dfeatures[i] *= batch_weight;
    result.grad.assign(model.parameter_count(), 0.0f);
    model.backward(acts, &dlogits, dfeatures.size() ? &dfeatures : nullptr, result.grad);
    return result;
}

}  // namespace

std::string to_string(LrMode mode) {
    switch (mode) {
        case LrMode::flexible: return "flexible";
        case LrMode::freeze: return "freeze";
        case LrMode::uniform: return "uniform";
    }
    return "flexible";
}

LrMode parse_lr_mode(std::string_view text) {
    if (text == "flexible") return LrMode::flexible;
    if (text == "freeze") return LrMode::freeze;
    if (text == "uniform") return LrMode::uniform;
    throw ConfigError(fmt::format("unknown lr mode '{}' (expected flexible, freeze or uniform)", text));
}

void TrainConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(what);
    };
    require(std::isfinite(lr0) && lr0 > 0, fmt::format("lr0 must be positive, got {}", lr0));
    require(std::isfinite(lambda_lr) && lambda_lr >= 0, fmt::format("lambda_lr must be >= 0, got {}", lambda_lr));
    require(std::isfinite(lambda_c) && lambda_c >= 0, fmt::format("lambda_c must be >= 0, got {}", lambda_c));
    require(std::isfinite(lambda_r) && lambda_r >= 0, fmt::format("lambda_r must be >= 0, got {}", lambda_r));
    require(tau > 0 && tau < 1, fmt::format("tau must lie in (0,1), got {}", tau));
    require(proposals >= 2 && proposals < kNoProposal, fmt::format("proposal count must be >= 2, got {}", proposals));
    require(batch_size >= 1, fmt::format("batch size must be >= 1, got {}", batch_size));
    require(epochs >= 0, fmt::format("epochs must be >= 0, got {}", epochs));
    require(memory_capacity >= 0, fmt::format("memory capacity must be >= 0, got {}", memory_capacity));
    require(std::isfinite(weight_decay) && weight_decay >= 0, "weight decay must be >= 0");
    require(augmentation.min_scale > 0 && augmentation.min_scale <= augmentation.max_scale,
            "augmentation scale range is invalid");
    require(model.input_size >= 16 && model.input_size % 16 == 0, "model input size must be a multiple of 16");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"lr0", lr0},
            {"lambda_lr", lambda_lr},
            {"lambda_c", lambda_c},
            {"lambda_r", lambda_r},
            {"tau", tau},
            {"proposals", proposals},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"seed", seed},
            {"memory", memory},
            {"memory_capacity", memory_capacity},
            {"lr_mode", to_string(lr_mode)},
            {"pseudo_labels", pseudo_labels},
            {"normalize_prototypes", normalize_prototypes},
            {"weight_decay", weight_decay},
            {"augment", augment},
            {"augmentation",
             {{"flip_probability", augmentation.flip_probability},
              {"min_scale", augmentation.min_scale},
              {"max_scale", augmentation.max_scale}}},
            {"model", model.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.lr0 = j.value("lr0", c.lr0);
        c.lambda_lr = j.value("lambda_lr", c.lambda_lr);
        c.lambda_c = j.value("lambda_c", c.lambda_c);
        c.lambda_r = j.value("lambda_r", c.lambda_r);
        c.tau = j.value("tau", c.tau);
        c.proposals = j.value("proposals", c.proposals);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.seed = j.value("seed", c.seed);
        c.memory = j.value("memory", c.memory);
        c.memory_capacity = j.value("memory_capacity", c.memory_capacity);
        if (j.contains("lr_mode")) c.lr_mode = parse_lr_mode(j.at("lr_mode").get<std::string>());
        c.pseudo_labels = j.value("pseudo_labels", c.pseudo_labels);
        c.normalize_prototypes = j.value("normalize_prototypes", c.normalize_prototypes);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.augment = j.value("augment", c.augment);
        if (j.contains("augmentation")) {
            const auto& a = j.at("augmentation");
            c.augmentation.flip_probability = a.value("flip_probability", c.augmentation.flip_probability);
            c.augmentation.min_scale = a.value("min_scale", c.augmentation.min_scale);
            c.augmentation.max_scale = a.value("max_scale", c.augmentation.max_scale);
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            c.model.input_size = m.value("input_size", c.model.input_size);
            c.model.feature_channels = m.value("feature_channels", c.model.feature_channels);
            c.model.seed = m.value("seed", c.model.seed);
            c.model.init_new_from_unknown = m.value("init_new_from_unknown", c.model.init_new_from_unknown);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("invalid training config: {}", e.what()));
    }
    return c;
}

double lr_for_step(int t, double lr0, double lambda_lr) {
    if (t < 1) throw ConfigError(fmt::format("learning step must be >= 1, got {}", t));
    if (t == 1) return lr0;
    return std::exp(-static_cast<double>(t)) * lambda_lr * lr0;
}

std::vector<ParamGroup> build_param_groups(const SegModel& model, const IncrementalScenario& scenario, int t,
                                           const TrainConfig& config) {
    if (t < 1 || t > scenario.num_steps()) throw ConfigError(fmt::format("step {} is out of range", t));
    if (t == 1) {
        ParamGroup all{"all", {}, config.lr0};
        for (std::size_t s = 0; s < model.parameters().slice_count(); ++s) all.slices.push_back(s);
        return {all};
    }
    const auto current = scenario.classes_at(t);
    ParamGroup old_group{"feature_extractor+old_classifier", model.feature_extractor_slices(), 0.0};
    ParamGroup new_group{"new_classifier", {}, config.lr0};
    for (int c = 0; c < model.num_channels(); ++c) {
        const ClassId id = model.channel_ids()[static_cast<std::size_t>(c)];
        const bool is_new = std::find(current.begin(), current.end(), id) != current.end();
        (is_new ? new_group : old_group).slices.push_back(model.classifier_slice(c));
    }
    switch (config.lr_mode) {
        case LrMode::flexible: old_group.lr = lr_for_step(t, config.lr0, config.lambda_lr); break;
        case LrMode::freeze: old_group.lr = 0.0; break;
        case LrMode::uniform: old_group.lr = config.lr0; break;
    }
    return {old_group, new_group};
}

nlohmann::json StepReport::to_json() const {
    return {{"step", step},
            {"mean_losses", mean_losses.to_json()},
            {"metrics", metrics ? metrics->to_json() : nlohmann::json(nullptr)},
            {"checkpoint", checkpoint},
            {"wall_seconds", wall_seconds},
            {"iterations", iterations},
            {"samples", samples},
            {"memory_samples", memory_samples}};
}

StepReport StepReport::from_json(const nlohmann::json& j) {
    StepReport r;
    r.step = j.at("step").get<int>();
    r.mean_losses = LossBreakdown::from_json(j.at("mean_losses"));
    if (!j.at("metrics").is_null()) r.metrics = MetricsRecord::from_json(j.at("metrics"));
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.iterations = j.at("iterations").get<int>();
    r.samples = j.at("samples").get<int>();
    r.memory_samples = j.value("memory_samples", 0);
    return r;
}

std::filesystem::path step_dir(const std::filesystem::path& out_dir, int t) {
    return out_dir / fmt::format("step_{}", t);
}

SegModel make_initial_model(const IncrementalScenario& scenario, const TrainConfig& config) {
    ModelConfig mc = config.model;
    mc.seed = derive_seed(config.seed, "model", config.model.seed);
    const auto base = scenario.classes_at(1);
    return SegModel(mc, base);
}

StepData step_data(const IncrementalScenario& scenario, const Dataset& train, const TrainConfig& config, int t) {
    StepData data;
    data.current = filter_images_for_step(train, scenario, t);
    if (config.memory && t > 1) {
        std::vector<std::size_t> candidates;
        for (int s = 1; s < t; ++s) {
            const auto idx = filter_images_for_step(train, scenario, s);
            candidates.insert(candidates.end(), idx.begin(), idx.end());
        }
        const int capacity =
            config.memory_capacity > 0 ? config.memory_capacity : 2 * scenario.total_foreground_classes();
        const auto seen = scenario.seen_classes(t - 1);
        if (!candidates.empty()) {
            data.memory = sample_memory(train, seen, capacity, derive_seed(config.seed, "memory", t), candidates);
        } else {
            data.memory.capacity = capacity;
        }
    }
    return data;
}

StepReport train_step_t(SegModel& model, const StepContext& ctx, const TrainConfig& cfg, int t,
                        std::vector<IterationRecord>* log) {
    cfg.validate();
    if (!ctx.scenario || !ctx.train) throw ConfigError("training step needs a scenario and a dataset");
    const auto& scenario = *ctx.scenario;
    if (t < 1 || t > scenario.num_steps()) throw ConfigError(fmt::format("step {} is out of range", t));
    const auto started = std::chrono::steady_clock::now();

    std::vector<ClassId> expected{kUnknownId};
    const auto known = t == 1 ? scenario.classes_at(1) : scenario.seen_classes(t - 1);
    expected.insert(expected.end(), known.begin(), known.end());
    if (model.channel_ids() != expected) {
        throw TrainingError(fmt::format("model channels do not match the label space before step {}", t));
    }

    std::optional<FrozenModel> teacher;
    if (t > 1) {
        teacher = snapshot(model);
        model.expand_classifier(scenario.classes_at(t), derive_seed(cfg.seed, "expand", t));
    }

    const StepData data = step_data(scenario, *ctx.train, cfg, t);
    std::vector<TrainItem> items;
    for (std::size_t i : data.current) items.push_back({i, false});
    int memory_count = 0;
    for (std::size_t i : data.memory.indices) {
        if (std::binary_search(data.current.begin(), data.current.end(), i)) continue;
        items.push_back({i, true});
        ++memory_count;
    }

    const auto groups = build_param_groups(model, scenario, t, cfg);
    AdamW optimizer(AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay}, model.parameter_count());

    std::vector<LossComponents> iteration_means;
    nn::FloatBuffer grad(model.parameter_count());
    int iteration = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(items.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng order_rng(derive_seed(cfg.seed, fmt::format("order/{}", t), static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), order_rng);

        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t n = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch_size));
            std::vector<SampleResult> results(n);
            parallel_for(n, ctx.workers, [&](std::size_t b) {
                const std::size_t pos = start + b;
                const std::uint64_t aug_seed = derive_seed(cfg.seed, fmt::format("augment/{}/{}", t, epoch), pos);
                results[b] = process_sample(model, teacher ? &*teacher : nullptr, ctx, cfg, t,
                                            items[order[pos]], aug_seed, 1.0 / static_cast<double>(n));
            });
            std::fill(grad.begin(), grad.end(), 0.0f);
            std::vector<LossComponents> parts;
            for (const auto& r : results) {
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += r.grad[i];
                parts.push_back(r.components);
            }
            const LossComponents mean = mean_components(parts);
            const LossBreakdown breakdown = total_objective(mean, cfg.lambda_c, cfg.lambda_r);
            optimizer.step(model.parameters(), grad, groups);
            iteration_means.push_back(mean);
            if (log) log->push_back({t, epoch, iteration, breakdown});
            ++iteration;
        }
    }

    StepReport report;
    report.step = t;
    report.mean_losses = total_objective(mean_components(iteration_means), cfg.lambda_c, cfg.lambda_r);
    report.iterations = iteration;
    report.samples = static_cast<int>(items.size());
    report.memory_samples = memory_count;
    if (!ctx.out_dir.empty()) {
        const auto dir = step_dir(ctx.out_dir, t);
        model.save(dir);
        write_json(dir / "scenario.json", scenario.to_json());
        if (cfg.memory && t > 1) write_json(dir / "memory.json", memory_manifest_entry(data.memory, t));
        report.checkpoint = dir.string();
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    spdlog::info("step {}/{}: {} samples ({} memory), {} iterations, L_total {:.4f}, {:.1f}s", t, scenario.num_steps(),
                 report.samples, memory_count, iteration, report.mean_losses.total, report.wall_seconds);
    return report;
}

RunResult run_scenario(const IncrementalScenario& scenario, const Dataset& train, const TrainConfig& config,
                       const RunOptions& options) {
    config.validate();
    const bool to_disk = !options.out_dir.empty();
    if (to_disk) std::filesystem::create_directories(options.out_dir);

    std::optional<ProposalCache> cache;
    if (config.lambda_c > 0 && scenario.num_steps() > 1) {
        const auto path = to_disk ? options.out_dir / "proposals.bin" : std::filesystem::path{};
        if (to_disk && std::filesystem::exists(path)) {
            cache = ProposalCache::load(path);
            for (std::size_t i = 0; i < train.size(); ++i) {
                if (!cache->contains(train.id(i))) {
                    cache.reset();
                    break;
                }
            }
        }
        if (!cache) {
            cache = build_proposal_cache(train, config.proposals, {}, options.workers);
            if (to_disk) cache->save(path);
        }
    }

    std::vector<StepReport> reports;
    std::optional<SegModel> model;
    int first_step = 1;
    if (options.resume && to_disk) {
        int last = 0;
        for (int t = 1; t <= scenario.num_steps(); ++t) {
            if (std::filesystem::exists(step_dir(options.out_dir, t) / "step_report.json")) last = t;
        }
        for (int t = 1; t <= last; ++t) {
            const auto path = step_dir(options.out_dir, t) / "step_report.json";
            if (!std::filesystem::exists(path)) {
                throw DataError(fmt::format("cannot resume: checkpoint for step {} is missing", t));
            }
            reports.push_back(StepReport::from_json(read_json(path)));
        }
        if (last > 0) {
            const auto stored = IncrementalScenario::from_json(read_json(step_dir(options.out_dir, last) / "scenario.json"));
            if (!(stored == scenario)) throw ConfigError("cannot resume: checkpoint was trained on a different scenario");
            model = SegModel::load(step_dir(options.out_dir, last));
            first_step = last + 1;
            spdlog::info("resuming after step {}", last);
        }
    }

    const auto log_path = options.out_dir / "metrics.jsonl";
    if (to_disk) {
        // Keep only iteration records of steps that are already complete.
        std::vector<std::string> kept;
        if (first_step > 1 && std::filesystem::exists(log_path)) {
            std::ifstream is(log_path);
            std::string line;
            while (std::getline(is, line)) {
                if (!line.empty() && nlohmann::json::parse(line).at("step").get<int>() < first_step) kept.push_back(line);
            }
        }
        std::ofstream os(log_path, std::ios::trunc);
        for (const auto& line : kept) os << line << '\n';
        write_json(options.out_dir / "scenario.json", scenario.to_json());
    }

    const StepContext ctx{&scenario, &train, cache ? &*cache : nullptr, options.out_dir, options.workers};
    for (int t = first_step; t <= scenario.num_steps(); ++t) {
        if (!model) model = make_initial_model(scenario, config);
        std::vector<IterationRecord> log;
        StepReport report = train_step_t(*model, ctx, config, t, &log);
        if (options.validation) report.metrics = evaluate(*model, *options.validation, scenario, t, options.eval);
        if (to_disk) {
            std::ofstream os(log_path, std::ios::app);
            for (const auto& r : log) os << iteration_json(r).dump() << '\n';
            const auto dir = step_dir(options.out_dir, t);
            if (report.metrics) write_json(dir / "metrics.json", report.metrics->to_json());
            write_json(dir / "step_report.json", report.to_json());
        }
        reports.push_back(std::move(report));
    }

    if (to_disk && options.validation) {
        std::vector<MetricsRecord> records;
        for (const auto& r : reports) {
            if (r.metrics) records.push_back(*r.metrics);
        }
        if (!records.empty()) emit_curves(records, options.out_dir / "curves.csv", options.out_dir / "curves.svg");
    }
    if (!model) model = make_initial_model(scenario, config);
    return {std::move(reports), std::move(*model)};
}

}  // namespace coinseg
