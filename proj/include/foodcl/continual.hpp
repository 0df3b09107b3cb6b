#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "foodcl/backbone.hpp"
#include "foodcl/foodstream.hpp"
#include "foodcl/lora.hpp"
#include "foodcl/metrics.hpp"
#include "foodcl/optim.hpp"
#include "foodcl/replay.hpp"

namespace foodcl {

enum class Method { kNaiveLora, kOrthoLora, kDualLora };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::kNaiveLora: return "naive-lora";
        case Method::kOrthoLora: return "ortho-lora";
        case Method::kDualLora: return "dual-lora";
    }
    return "?";
}

inline Method method_from_name(const std::string& s) {
    if (s == "naive-lora") return Method::kNaiveLora;
    if (s == "ortho-lora") return Method::kOrthoLora;
    if (s == "dual-lora") return Method::kDualLora;
    throw std::invalid_argument("unknown method '" + s + "'");
}

// One adapter per query and value site of every layer, in a fixed order
// (layer-major, query before value).
inline std::vector<LoRAAdapter> make_site_adapters(const BackboneConfig& cfg, int rank, Rng rng, double a_std = 0.1) {
    std::vector<LoRAAdapter> out;
    for (int l = 0; l < cfg.num_layers; ++l)
        for (SiteKind kind : {SiteKind::kQuery, SiteKind::kValue})
            out.push_back(make_adapter({l, kind}, rank, cfg.model_dim, cfg.model_dim, rng, a_std));
    return out;
}

// ---- shared training loop ---------------------------------------------------

struct OrthoSpecEntry {
    size_t binding_index{0};       // trainable adapter whose A is penalized
    std::vector<Matrix> targets;   // frozen A matrices it must stay orthogonal to
};

struct TrainLoopConfig {
    int epochs{3};
    int batch_size{16};
    double lambda_ortho{0.0};
    AdamWConfig adamw{};
};

struct TrainLoopResult {
    double final_task_loss{0.0};
    double start_ortho{0.0};
    double final_ortho{0.0};
    std::vector<double> ortho_per_epoch;  // index 0 = before training
    int steps{0};
};

// Mini-batch AdamW over the trainable bindings. The objective is the mean
// answer loss of the batch plus lambda times the summed orthogonality
// penalty; with no penalty entries this is plain cross-entropy tuning.
inline TrainLoopResult train_adapters(const BackboneWeights& weights, const std::vector<const Sample*>& data,
                                      std::span<const AdapterBinding> bindings,
                                      std::span<const std::string> binding_names,
                                      const std::vector<OrthoSpecEntry>& ortho, const TrainLoopConfig& cfg,
                                      Rng order_rng) {
    if (data.empty()) throw std::invalid_argument("train_adapters: empty training data");
    for (const auto& entry : ortho) {
        if (entry.binding_index >= bindings.size() || !bindings[entry.binding_index].trainable)
            throw std::invalid_argument("train_adapters: penalty entry does not reference a trainable binding");
    }

    auto plain_ortho = [&]() {
        double total = 0.0;
        for (const auto& entry : ortho)
            for (const auto& target : entry.targets)
                total += orthogonality_loss(bindings[entry.binding_index].adapter->a, target);
        return total;
    };

    TrainLoopResult res;
    res.ortho_per_epoch.push_back(plain_ortho());

    AdamW optimizer(cfg.adamw);
    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    Tape tape;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            tape.reset();
            BatchGraph graph(tape, weights, bindings, binding_names);
            int combined = -1;
            for (size_t bi = start; bi < end; ++bi) {
                const Sample& s = *data[order[bi]];
                const auto full = full_sequence(s);
                const auto targets = shifted_targets(full);
                const auto mask = answer_mask_positions(s);
                const int loss = tape.nll_loss(graph.forward(full), targets, mask);
                combined = combined < 0 ? loss : tape.add(combined, loss);
            }
            const int task_mean = tape.scale(combined, 1.0 / static_cast<double>(end - start));
            int total = task_mean;
            if (cfg.lambda_ortho > 0.0 && !ortho.empty()) {
                int penalty = -1;
                for (const auto& entry : ortho) {
                    const int a_node = graph.adapter_a_node(entry.binding_index);
                    for (const auto& target : entry.targets) {
                        const int term = tape.frobenius_sq(tape.matmul_nt(a_node, tape.constant(target)));
                        penalty = penalty < 0 ? term : tape.add(penalty, term);
                    }
                }
                total = tape.add(task_mean, tape.scale(penalty, cfg.lambda_ortho));
            }
            const double loss_value = tape.value(total).data[0];
            if (!std::isfinite(loss_value))
                throw std::runtime_error("training diverged: non-finite loss at step " + std::to_string(res.steps));
            tape.backward(total);
            std::vector<ParamUpdate> updates;
            for (const auto& t : graph.trainables()) updates.push_back({t.name, t.dest, &tape.grad(t.node)});
            optimizer.step(updates);
            epoch_loss += tape.value(task_mean).data[0];
            ++batches;
            ++res.steps;
        }
        res.ortho_per_epoch.push_back(plain_ortho());
        if (epoch == cfg.epochs - 1 && batches > 0) res.final_task_loss = epoch_loss / batches;
    }
    res.start_ortho = res.ortho_per_epoch.front();
    res.final_ortho = res.ortho_per_epoch.back();
    return res;
}

// ---- the two dual-lora training passes --------------------------------------

namespace detail {

inline std::vector<const Sample*> sample_ptrs(const std::vector<Sample>& v) {
    std::vector<const Sample*> out;
    out.reserve(v.size());
    for (const auto& s : v) out.push_back(&s);
    return out;
}

inline Sample pseudo_to_sample(const PseudoSample& ps, int64_t id) {
    Sample s;
    s.id = id;
    s.task = ps.task;
    s.dish_id = ps.dish_id;
    s.prompt_tokens = ps.prompt_tokens;
    s.answer_tokens = ps.answer_tokens;
    return s;
}

inline uint64_t adapters_checksum(const std::vector<LoRAAdapter>& ads) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& a : ads) h = hash_combine(h, adapter_checksum(a));
    return h;
}

}  // namespace detail

struct PassOutcome {
    std::vector<LoRAAdapter> adapters;
    StageResult result;
};

// New-task pass: fresh specialized adapters learn task t with the previous
// cooperative deltas active in the forward pass and an orthogonality penalty
// against the previous cooperative subspace (no penalty for the first task).
inline PassOutcome train_specialized(const BackboneWeights& weights, const std::vector<const Sample*>& task_data,
                                     AdapterRegistry& registry, int stage, const DualLoraHyper& hyper, Rng root) {
    hyper.validate();
    if (stage < 1) throw std::invalid_argument("train_specialized: bad stage");
    if (stage > 1 && static_cast<int>(registry.stages()) != stage - 1)
        throw std::logic_error("train_specialized: registry has " + std::to_string(registry.stages()) +
                               " stages, expected cooperative set for stage " + std::to_string(stage - 1));

    PassOutcome out;
    out.adapters = make_site_adapters(weights.config, hyper.rank, root.derive("spec-init", static_cast<uint64_t>(stage)));

    std::vector<AdapterBinding> bindings;
    std::vector<std::string> names;
    std::vector<OrthoSpecEntry> ortho;
    if (stage > 1) {
        auto& prev_coop = registry.history()[static_cast<size_t>(stage) - 2].cooperative;
        for (auto& ad : prev_coop) {
            bindings.push_back({&ad, false});
            names.push_back("coop" + std::to_string(stage - 1) + "." + ad.site.str());
        }
    }
    const size_t spec_base = bindings.size();
    for (auto& ad : out.adapters) {
        bindings.push_back({&ad, true});
        names.push_back("spec" + std::to_string(stage) + "." + ad.site.str());
    }
    if (stage > 1) {
        const auto& prev_coop = registry.history()[static_cast<size_t>(stage) - 2].cooperative;
        for (size_t i = 0; i < out.adapters.size(); ++i) {
            if (!(prev_coop[i].site == out.adapters[i].site))
                throw std::logic_error("train_specialized: site order mismatch with previous cooperative set");
            OrthoSpecEntry entry;
            entry.binding_index = spec_base + i;
            entry.targets.push_back(prev_coop[i].a);
            ortho.push_back(std::move(entry));
        }
    }

    TrainLoopConfig cfg;
    cfg.epochs = hyper.epochs;
    cfg.batch_size = hyper.batch_size;
    cfg.lambda_ortho = stage > 1 ? hyper.lambda_ortho : 0.0;
    cfg.adamw.lr = hyper.learning_rate;

    const auto t0 = std::chrono::steady_clock::now();
    const TrainLoopResult r =
        train_adapters(weights, task_data, bindings, names, ortho, cfg, root.derive("spec-order", static_cast<uint64_t>(stage)));
    out.result.task_index = stage;
    out.result.role = "specialized";
    out.result.final_task_loss = r.final_task_loss;
    out.result.start_ortho_loss = r.start_ortho;
    out.result.final_ortho_loss = r.final_ortho;
    out.result.ortho_loss_per_epoch = r.ortho_per_epoch;
    out.result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.result.backbone_checksum = weights.checksum();
    return out;
}

// Consolidation pass: cooperative adapters initialized from the previous
// stage's cooperative set train on the shuffled union of current-task data
// and the quality-enhanced replay buffer, cross-entropy only. The current
// specialized adapters stay attached (frozen), matching the default
// inference composition.
inline PassOutcome train_cooperative(const BackboneWeights& weights, const std::vector<const Sample*>& task_data,
                                     const std::vector<PseudoSample>& replay, AdapterRegistry& registry, int stage,
                                     std::vector<LoRAAdapter>& spec_current, const std::vector<TaskKind>& task_order,
                                     const DualLoraHyper& hyper, Rng root) {
    hyper.validate();
    if (stage < 1) throw std::invalid_argument("train_cooperative: bad stage");
    if (stage == 1 && !replay.empty()) throw std::invalid_argument("train_cooperative: replay must be empty for task 1");
    for (const auto& ps : replay) {
        bool known = false;
        for (int prev = 0; prev < stage - 1; ++prev)
            if (task_order.at(static_cast<size_t>(prev)) == ps.task) known = true;
        if (!known)
            throw std::runtime_error("train_cooperative: replay sample with unknown task tag '" +
                                     std::string(task_kind_name(ps.task)) + "' for stage " + std::to_string(stage));
    }

    PassOutcome out;
    if (stage == 1) {
        out.adapters = make_site_adapters(weights.config, hyper.rank, root.derive("coop-init", static_cast<uint64_t>(stage)));
    } else {
        out.adapters = registry.history()[static_cast<size_t>(stage) - 2].cooperative;  // warm start
    }

    std::vector<AdapterBinding> bindings;
    std::vector<std::string> names;
    for (auto& ad : out.adapters) {
        bindings.push_back({&ad, true});
        names.push_back("coop" + std::to_string(stage) + "." + ad.site.str());
    }
    for (size_t past = 0; past + 1 < static_cast<size_t>(stage); ++past) {
        for (auto& ad : registry.history()[past].specialized) {
            bindings.push_back({&ad, false});
            names.push_back("spec" + std::to_string(past + 1) + "." + ad.site.str());
        }
    }
    for (auto& ad : spec_current) {
        bindings.push_back({&ad, false});
        names.push_back("spec" + std::to_string(stage) + "." + ad.site.str());
    }

    std::vector<Sample> replay_samples;
    replay_samples.reserve(replay.size());
    int64_t next_id = 1'000'000'000 + static_cast<int64_t>(stage) * 1'000'000;
    for (const auto& ps : replay) replay_samples.push_back(detail::pseudo_to_sample(ps, next_id++));
    std::vector<const Sample*> union_data = task_data;
    for (const auto& s : replay_samples) union_data.push_back(&s);

    TrainLoopConfig cfg;
    cfg.epochs = hyper.epochs;
    cfg.batch_size = hyper.batch_size;
    cfg.lambda_ortho = 0.0;  // cross-entropy only
    cfg.adamw.lr = hyper.learning_rate;

    const auto t0 = std::chrono::steady_clock::now();
    const TrainLoopResult r = train_adapters(weights, union_data, bindings, names, {}, cfg,
                                             root.derive("coop-order", static_cast<uint64_t>(stage)));
    out.result.task_index = stage;
    out.result.role = "cooperative";
    out.result.final_task_loss = r.final_task_loss;
    out.result.ortho_loss_per_epoch = r.ortho_per_epoch;
    out.result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.result.backbone_checksum = weights.checksum();
    return out;
}

// ---- full stream controller --------------------------------------------------

struct StreamRunConfig {
    Method method{Method::kDualLora};
    DualLoraHyper hyper{};
    ReplayConfig replay{};
    uint64_t seed{1};
    uint64_t config_hash{0};
    int eval_max_new_tokens{48};
};

struct StageEval {
    int stage{0};
    int task_index{0};
    std::vector<PredRecord> records;
};

struct StreamRunResult {
    Method method{Method::kDualLora};
    uint64_t seed{0};
    std::vector<StageResult> stage_results;
    std::vector<StageEval> evals;
    std::vector<std::vector<PseudoSample>> replay_by_stage;  // [stage-1]; empty for stage 1
    AdapterRegistry registry;                                 // dual-lora history
    std::vector<LoRAAdapter> naive_adapters;                  // naive-lora single pair
    std::vector<std::vector<LoRAAdapter>> ortho_adapters;     // ortho-lora per-task adapters
    uint64_t backbone_checksum{0};
    double wall_seconds{0.0};
    double train_wall_seconds{0.0};
    MetricsReport report;
};

using StageCallback = std::function<void(const StreamRunResult& partial, int completed_stage)>;

namespace detail {

inline StageEval evaluate_task(const Tokenizer& tok, const TaskData& task, int stage, int task_index,
                               const InferenceModel& model, int max_new_tokens) {
    StageEval ev;
    ev.stage = stage;
    ev.task_index = task_index;
    GenOptions opts;
    opts.greedy = true;
    opts.max_new_tokens = max_new_tokens;
    opts.eos_id = tok.eos();
    for (const auto& s : task.test) {
        const GenResult gen = model.generate(s.prompt_tokens, opts);
        PredRecord rec;
        rec.sample_id = s.id;
        rec.dish_id = s.dish_id;
        rec.pred_tokens = gen.tokens;
        while (!rec.pred_tokens.empty() && rec.pred_tokens.back() == tok.eos()) rec.pred_tokens.pop_back();
        rec.truth_tokens = s.answer_tokens;
        while (!rec.truth_tokens.empty() && rec.truth_tokens.back() == tok.eos()) rec.truth_tokens.pop_back();
        ev.records.push_back(std::move(rec));
    }
    return ev;
}

}  // namespace detail

// Runs the selected strategy over the ordered task stream. Per stage t:
// (1) generate and enhance pseudo samples with the stage-(t-1) model,
// (2) train the new-task adapters, (3) train the consolidation adapters,
// (4) evaluate every task seen so far. Raw data of earlier tasks is never
// read after its own stage. Baselines skip the steps they ablate.
inline StreamRunResult run_task_stream(const Tokenizer& tok, const TaskStream& stream, const BackboneWeights& weights,
                                       const StreamRunConfig& cfg, const StageCallback& on_stage = {}) {
    cfg.hyper.validate();
    cfg.replay.validate();
    if (stream.tasks.empty()) throw std::invalid_argument("run_task_stream: empty stream");
    const uint64_t frozen_checksum = weights.checksum();
    const auto run_start = std::chrono::steady_clock::now();

    StreamRunResult res;
    res.method = cfg.method;
    res.seed = cfg.seed;
    res.registry.set_policy(cfg.hyper.policy);
    res.backbone_checksum = frozen_checksum;

    std::vector<TaskKind> task_order;
    for (const auto& t : stream.tasks) task_order.push_back(t.kind);
    Rng root(cfg.seed);

    const int M = static_cast<int>(stream.tasks.size());
    for (int stage = 1; stage <= M; ++stage) {
        const TaskData& task = stream.tasks[static_cast<size_t>(stage) - 1];
        const auto task_data = detail::sample_ptrs(task.train);

        if (cfg.method == Method::kDualLora) {
            // (1) pseudo replay from the model as of stage t-1
            std::vector<PseudoSample> replay;
            if (stage > 1 && cfg.replay.proportion > 0.0) {
                InferenceModel prev_model(weights, res.registry.compose_for_inference());
                replay = build_replay_buffer(tok, stream, stage, task.train.size(), prev_model, cfg.replay, cfg.seed);
            }

            // (2) specialized pass; context adapters must stay bit-frozen
            const uint64_t coop_before =
                stage > 1 ? detail::adapters_checksum(res.registry.history().back().cooperative) : 0;
            auto spec_start = std::chrono::steady_clock::now();
            PassOutcome spec = train_specialized(weights, task_data, res.registry, stage, cfg.hyper, root);
            res.train_wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - spec_start).count();
            if (stage > 1 && detail::adapters_checksum(res.registry.history().back().cooperative) != coop_before)
                throw std::logic_error("invariant violation: cooperative adapters mutated during specialized pass");

            // (3) cooperative pass over the shuffled union
            std::vector<uint64_t> spec_hist_before;
            for (const auto& s : res.registry.history()) spec_hist_before.push_back(detail::adapters_checksum(s.specialized));
            const uint64_t spec_cur_before = detail::adapters_checksum(spec.adapters);
            auto coop_start = std::chrono::steady_clock::now();
            PassOutcome coop = train_cooperative(weights, task_data, replay, res.registry, stage, spec.adapters,
                                                 task_order, cfg.hyper, root);
            res.train_wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - coop_start).count();
            for (size_t i = 0; i < spec_hist_before.size(); ++i)
                if (detail::adapters_checksum(res.registry.history()[i].specialized) != spec_hist_before[i])
                    throw std::logic_error("invariant violation: historical specialized adapters mutated");
            if (detail::adapters_checksum(spec.adapters) != spec_cur_before)
                throw std::logic_error("invariant violation: specialized adapters mutated during cooperative pass");

            TaskAdapterSet set;
            set.task_index = stage;
            set.specialized = std::move(spec.adapters);
            set.cooperative = std::move(coop.adapters);
            res.registry.push_stage(std::move(set));
            res.replay_by_stage.push_back(std::move(replay));
            res.stage_results.push_back(spec.result);
            res.stage_results.push_back(coop.result);
        } else if (cfg.method == Method::kNaiveLora) {
            if (stage == 1)
                res.naive_adapters = make_site_adapters(weights.config, cfg.hyper.rank, root.derive("naive-init"));
            std::vector<AdapterBinding> bindings;
            std::vector<std::string> names;
            for (auto& ad : res.naive_adapters) {
                bindings.push_back({&ad, true});
                names.push_back("shared." + ad.site.str());
            }
            TrainLoopConfig tcfg;
            tcfg.epochs = cfg.hyper.epochs;
            tcfg.batch_size = cfg.hyper.batch_size;
            tcfg.adamw.lr = cfg.hyper.learning_rate;
            const auto t0 = std::chrono::steady_clock::now();
            const TrainLoopResult r = train_adapters(weights, task_data, bindings, names, {}, tcfg,
                                                     root.derive("naive-order", static_cast<uint64_t>(stage)));
            StageResult sr;
            sr.task_index = stage;
            sr.role = "shared";
            sr.final_task_loss = r.final_task_loss;
            sr.ortho_loss_per_epoch = r.ortho_per_epoch;
            sr.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            sr.backbone_checksum = weights.checksum();
            res.train_wall_seconds += sr.wall_seconds;
            res.stage_results.push_back(sr);
            res.replay_by_stage.emplace_back();
        } else {  // ortho-lora: per-task adapter, penalty against all previous A's
            std::vector<LoRAAdapter> current = make_site_adapters(weights.config, cfg.hyper.rank,
                                                                  root.derive("ortho-init", static_cast<uint64_t>(stage)));
            std::vector<AdapterBinding> bindings;
            std::vector<std::string> names;
            for (size_t past = 0; past < res.ortho_adapters.size(); ++past)
                for (auto& ad : res.ortho_adapters[past]) {
                    bindings.push_back({&ad, false});
                    names.push_back("task" + std::to_string(past + 1) + "." + ad.site.str());
                }
            const size_t cur_base = bindings.size();
            for (auto& ad : current) {
                bindings.push_back({&ad, true});
                names.push_back("task" + std::to_string(stage) + "." + ad.site.str());
            }
            std::vector<OrthoSpecEntry> ortho;
            for (size_t i = 0; i < current.size(); ++i) {
                OrthoSpecEntry entry;
                entry.binding_index = cur_base + i;
                for (const auto& past : res.ortho_adapters) entry.targets.push_back(past[i].a);
                if (!entry.targets.empty()) ortho.push_back(std::move(entry));
            }
            TrainLoopConfig tcfg;
            tcfg.epochs = cfg.hyper.epochs;
            tcfg.batch_size = cfg.hyper.batch_size;
            tcfg.lambda_ortho = stage > 1 ? cfg.hyper.lambda_ortho : 0.0;
            tcfg.adamw.lr = cfg.hyper.learning_rate;
            std::vector<uint64_t> hist_before;
            for (const auto& past : res.ortho_adapters) hist_before.push_back(detail::adapters_checksum(past));
            const auto t0 = std::chrono::steady_clock::now();
            const TrainLoopResult r = train_adapters(weights, task_data, bindings, names, ortho, tcfg,
                                                     root.derive("ortho-order", static_cast<uint64_t>(stage)));
            for (size_t i = 0; i < hist_before.size(); ++i)
                if (detail::adapters_checksum(res.ortho_adapters[i]) != hist_before[i])
                    throw std::logic_error("invariant violation: past ortho-lora adapters mutated");
            StageResult sr;
            sr.task_index = stage;
            sr.role = "ortho-task";
            sr.final_task_loss = r.final_task_loss;
            sr.start_ortho_loss = r.start_ortho;
            sr.final_ortho_loss = r.final_ortho;
            sr.ortho_loss_per_epoch = r.ortho_per_epoch;
            sr.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            sr.backbone_checksum = weights.checksum();
            res.train_wall_seconds += sr.wall_seconds;
            res.stage_results.push_back(sr);
            res.ortho_adapters.push_back(std::move(current));
            res.replay_by_stage.emplace_back();
        }

        if (weights.checksum() != frozen_checksum)
            throw std::logic_error("invariant violation: backbone weights changed during stage " + std::to_string(stage));

        // (4) evaluate every task seen so far on the composed model
        std::vector<AdapterBinding> eval_bindings;
        if (cfg.method == Method::kDualLora) {
            eval_bindings = res.registry.compose_for_inference();
        } else if (cfg.method == Method::kNaiveLora) {
            for (auto& ad : res.naive_adapters) eval_bindings.push_back({&ad, false});
        } else {
            for (auto& past : res.ortho_adapters)
                for (auto& ad : past) eval_bindings.push_back({&ad, false});
        }
        InferenceModel eval_model(weights, eval_bindings);
        for (int tix = 1; tix <= stage; ++tix)
            res.evals.push_back(detail::evaluate_task(tok, stream.tasks[static_cast<size_t>(tix) - 1], stage, tix,
                                                      eval_model, cfg.eval_max_new_tokens));

        if (on_stage) on_stage(res, stage);
    }

    // assemble the metrics report from the collected predictions
    ReportInputs inputs;
    inputs.method = method_name(cfg.method);
    inputs.seed = cfg.seed;
    inputs.config_hash = cfg.config_hash;
    inputs.dataset_hash = stream.dataset_hash();
    for (const auto& t : stream.tasks) {
        inputs.task_names.push_back(t.name);
        inputs.task_kinds.push_back(t.kind);
        inputs.expected_counts.push_back(t.test.size());
    }
    inputs.predictions.assign(static_cast<size_t>(M), {});
    for (int s = 1; s <= M; ++s) inputs.predictions[static_cast<size_t>(s) - 1].resize(static_cast<size_t>(s));
    for (const auto& ev : res.evals)
        inputs.predictions.at(static_cast<size_t>(ev.stage) - 1).at(static_cast<size_t>(ev.task_index) - 1) = ev.records;
    res.report = build_report(tok, inputs);
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();
    return res;
}

// ---- adapter persistence -----------------------------------------------------

inline void save_adapters(const std::vector<LoRAAdapter>& adapters, const nlohmann::json& extra_meta,
                          const std::filesystem::path& path) {
    TensorContainer c;
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& ad : adapters) sites.push_back({{"site", ad.site.str()}, {"rank", ad.rank}});
    c.meta = {{"format", "foodcl-adapters"}, {"version", 1}, {"sites", sites}, {"extra", extra_meta}};
    for (const auto& ad : adapters) {
        c.tensors.emplace_back(ad.site.str() + ".a", ad.a);
        c.tensors.emplace_back(ad.site.str() + ".b", ad.b);
    }
    save_container(c, path);
}

inline std::vector<LoRAAdapter> load_adapters(const std::filesystem::path& path, nlohmann::json* extra_meta = nullptr) {
    const TensorContainer c = load_container(path);
    if (c.meta.value("format", "") != "foodcl-adapters")
        throw std::runtime_error("not an adapter checkpoint: " + path.string());
    std::vector<LoRAAdapter> out;
    for (const auto& site_meta : c.meta.at("sites")) {
        LoRAAdapter ad;
        ad.site = site_from_str(site_meta.at("site").get<std::string>());
        ad.rank = site_meta.at("rank").get<int>();
        ad.a = c.get(ad.site.str() + ".a");
        ad.b = c.get(ad.site.str() + ".b");
        if (ad.a.rows != ad.rank || ad.b.cols != ad.rank)
            throw std::runtime_error("adapter rank/shape mismatch in " + path.string());
        out.push_back(std::move(ad));
    }
    if (extra_meta) *extra_meta = c.meta.value("extra", nlohmann::json::object());
    return out;
}

// Registry manifest + one adapter file per task per role.
inline void save_registry(const AdapterRegistry& registry, const std::filesystem::path& dir,
                          const nlohmann::json& extra_meta = nlohmann::json::object()) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest{{"format", "foodcl-registry"},
                            {"version", 1},
                            {"policy", compose_policy_name(registry.policy())},
                            {"extra", extra_meta},
                            {"stages", nlohmann::json::array()}};
    for (const auto& set : registry.history()) {
        const std::string spec_file = "spec.task" + std::to_string(set.task_index) + ".fct";
        const std::string coop_file = "coop.task" + std::to_string(set.task_index) + ".fct";
        save_adapters(set.specialized, {{"task_index", set.task_index}, {"role", "specialized"}}, dir / spec_file);
        save_adapters(set.cooperative, {{"task_index", set.task_index}, {"role", "cooperative"}}, dir / coop_file);
        manifest["stages"].push_back(
            {{"task_index", set.task_index}, {"specialized", spec_file}, {"cooperative", coop_file}});
    }
    std::ofstream out(dir / "registry.json");
    if (!out) throw std::runtime_error("cannot write registry manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
}

inline AdapterRegistry load_registry(const std::filesystem::path& dir) {
    std::ifstream in(dir / "registry.json");
    if (!in) throw std::runtime_error("missing registry manifest in " + dir.string());
    nlohmann::json manifest;
    in >> manifest;
    AdapterRegistry registry(compose_policy_from_name(manifest.at("policy").get<std::string>()));
    for (const auto& stage : manifest.at("stages")) {
        TaskAdapterSet set;
        set.task_index = stage.at("task_index").get<int>();
        set.specialized = load_adapters(dir / stage.at("specialized").get<std::string>());
        set.cooperative = load_adapters(dir / stage.at("cooperative").get<std::string>());
        registry.push_stage(std::move(set));
    }
    return registry;
}

}  // namespace foodcl
