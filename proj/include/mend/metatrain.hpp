#pragma once
// Editor training and the fine-tuning baselines.
//
// The editor objective for a group of simultaneous edits is
//
//   L = c_e * mean NLL(y'_e | x'_e; W~) + mean KL(p(. | x_loc; W) || p(. | x_loc; W~))
//
// with W~ = W - alpha * sum_i outer(delta~_i, u~_i). Its gradient reaches the
// editor through three hops, all first order: the dense gradient G of L with
// respect to W~ (ordinary backprop through the edited model), then
// dL/dalpha = -<G, grad~> and dL/d grad~ = -alpha G, then
// dL/d delta~_i = (-alpha G) u~_i and dL/d u~_i = (-alpha G)^T delta~_i into the
// editor network. The factors (u, delta) come from the un-edited model and are
// constants.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mend/basenet.hpp"
#include "mend/editbench.hpp"
#include "mend/errors.hpp"
#include "mend/json_io.hpp"
#include "mend/mendcore.hpp"
#include "mend/numkit.hpp"

namespace mend {

struct TrainConfig {
    double edit_loss_weight = 0.1;  // c_e
    double meta_lr = 1e-3;
    std::size_t max_steps = 20000;
    std::size_t eval_every = 500;
    std::size_t patience = 8;
    std::size_t batch_size = 10;      // edit groups averaged per optimizer step
    std::size_t edits_per_step = 1;   // simultaneous edits per group (k)
    std::uint64_t seed = 0;

    bool operator==(const TrainConfig&) const = default;

    void validate() const {
        if (!(edit_loss_weight >= 0.0)) throw ConfigError("TrainConfig: c_e must be >= 0");
        if (!(meta_lr > 0.0)) throw ConfigError("TrainConfig: meta_lr must be > 0");
        if (eval_every == 0) throw ConfigError("TrainConfig: eval_every must be >= 1");
        if (batch_size == 0) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (edits_per_step == 0) throw ConfigError("TrainConfig: edits_per_step must be >= 1");
    }
};

struct StepLosses {
    double edit = 0.0;      // L_e
    double locality = 0.0;  // L_loc
    double total = 0.0;     // c_e * L_e + L_loc

    bool operator==(const StepLosses&) const = default;
};

// Everything one evaluation of the objective needs: the edit pairs applied
// together, the equivalence targets scored by L_e and the locality inputs
// scored by L_loc.
struct MetaSample {
    std::vector<LabeledExample> edits;
    std::vector<LabeledExample> equivalents;
    std::vector<Vector> locality;
};

inline MetaSample sample_from_records(std::span<const EditRecord> group, Rng& rng) {
    MetaSample s;
    for (const auto& r : group) {
        if (r.neighborhood.empty()) throw DataError("edit record without equivalence examples");
        if (r.x_loc.empty()) throw DataError("edit record without a locality input");
        s.edits.push_back(r.edit_pair());
        s.equivalents.push_back(r.neighborhood[rng.uniform_index(r.neighborhood.size())]);
        s.locality.push_back(r.x_loc);
    }
    return s;
}

// Training form: the locality input comes from a random pool record of a
// fact outside the group (any of its neighborhood inputs), so it is drawn
// independently of the edit example rather than fixed per record.
inline MetaSample sample_with_pool(std::span<const EditRecord> group, std::span<const EditRecord> pool, Rng& rng) {
    MetaSample s = sample_from_records(group, rng);
    s.locality.clear();
    for (std::size_t i = 0; i < group.size(); ++i) {
        for (std::size_t attempt = 0;; ++attempt) {
            if (attempt > 1000) throw DataError("locality sampler: no record outside the edited facts");
            const auto& r = pool[rng.uniform_index(pool.size())];
            const bool clash = std::any_of(group.begin(), group.end(),
                                           [&](const EditRecord& g) { return g.fact_id == r.fact_id; });
            if (clash) continue;
            s.locality.push_back(r.neighborhood[rng.uniform_index(r.neighborhood.size())].x);
            break;
        }
    }
    return s;
}

// Deterministic form used for validation: every neighborhood member scored.
inline MetaSample full_sample_from_records(std::span<const EditRecord> group) {
    MetaSample s;
    for (const auto& r : group) {
        s.edits.push_back(r.edit_pair());
        s.equivalents.insert(s.equivalents.end(), r.neighborhood.begin(), r.neighborhood.end());
        s.locality.push_back(r.x_loc);
    }
    return s;
}

// Objective (and optionally its editor gradient, accumulated into *grad)
// from precomputed factors indexed by layer id.
inline StepLosses meta_objective_from_factors(const BaseModel& model, const EditorParams& params,
                                              const Normalizer& normalizer, const std::vector<GradFactors>& factors,
                                              const MetaSample& sample, double c_e, EditorParams* grad = nullptr,
                                              double grad_scale = 1.0) {
    if (sample.equivalents.empty() || sample.locality.empty()) {
        throw DataError("meta objective: need at least one equivalence and one locality example");
    }
    const EditComputation edit = compute_edit_from_factors(model, params, normalizer, factors);

    const auto pre_loc = forward(model, sample.locality);
    std::vector<Vector> inputs;
    for (const auto& e : sample.equivalents) inputs.push_back(e.x);
    inputs.insert(inputs.end(), sample.locality.begin(), sample.locality.end());
    const auto post = forward(edit.edited, inputs);

    const std::size_t n_eq = sample.equivalents.size();
    const std::size_t n_loc = sample.locality.size();
    StepLosses losses;
    std::vector<Vector> grad_logits;
    grad_logits.reserve(inputs.size());
    for (std::size_t i = 0; i < n_eq; ++i) {
        auto nll = softmax_nll(post.logits[i], sample.equivalents[i].y);
        losses.edit += nll.loss / static_cast<double>(n_eq);
        for (double& g : nll.grad_logits) g *= c_e / static_cast<double>(n_eq);
        grad_logits.push_back(std::move(nll.grad_logits));
    }
    for (std::size_t j = 0; j < n_loc; ++j) {
        const Vector& p = pre_loc.logits[j];
        const Vector& q = post.logits[n_eq + j];
        losses.locality += kl_divergence(p, q) / static_cast<double>(n_loc);
        Vector g = kl_grad_q(p, q);
        for (double& x : g) x /= static_cast<double>(n_loc);
        grad_logits.push_back(std::move(g));
    }
    losses.total = c_e * losses.edit + losses.locality;
    if (grad == nullptr) return losses;

    const Gradients dense = backward(edit.edited, post, grad_logits);
    for (const LayerEdit& le : edit.layers) {
        const Matrix& G = dense.weight[le.layer];
        const double alpha = params.layers[le.slot].film.alpha;
        grad->layers[le.slot].film.alpha -= grad_scale * dot(G.values(), le.pseudogradient.values());
        Matrix H = G;
        for (double& x : H.values()) x *= -alpha * grad_scale;
        for (const auto& app : le.applications) {
            backprop_editor(params, le.slot, app, matvec_transposed(H, app.delta_tilde), matvec(H, app.u_tilde), *grad);
        }
    }
    return losses;
}

inline StepLosses meta_objective(const BaseModel& model, const EditorParams& params, const Normalizer& normalizer,
                                 const MetaSample& sample, double c_e, EditorParams* grad = nullptr,
                                 double grad_scale = 1.0) {
    if (sample.edits.empty()) throw DataError("meta objective: empty edit batch");
    std::vector<Vector> xs;
    std::vector<ClassIndex> ys;
    for (const auto& e : sample.edits) {
        xs.push_back(e.x);
        ys.push_back(e.y);
    }
    const auto trace = forward(model, xs);
    const auto back = backward_nll(model, trace, ys);
    return meta_objective_from_factors(model, params, normalizer, back.grads.factors, sample, c_e, grad, grad_scale);
}

// One optimizer step on the mean objective over `batch`. The base model and
// the normalizer are read-only.
inline StepLosses mend_train_step(const BaseModel& model, EditorParams& params, const Normalizer& normalizer,
                                  std::span<const MetaSample> batch, double c_e, AdamState& adam) {
    if (batch.empty()) throw DataError("mend_train_step: empty batch");
    EditorParams grad = params.zeros_like();
    StepLosses mean;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const auto& sample : batch) {
        const auto l = meta_objective(model, params, normalizer, sample, c_e, &grad, scale);
        mean.edit += l.edit * scale;
        mean.locality += l.locality * scale;
    }
    mean.total = c_e * mean.edit + mean.locality;
    std::vector<double> flat = params.flatten();
    adam_step(flat, grad.flatten(), adam);
    params.assign(flat);
    return mean;
}

inline StepLosses mend_train_step(const BaseModel& model, EditorParams& params, const Normalizer& normalizer,
                                  const EditRecord& record, const TrainConfig& config, AdamState& adam, Rng& rng) {
    const MetaSample sample = sample_from_records(std::span<const EditRecord>(&record, 1), rng);
    return mend_train_step(model, params, normalizer, std::span<const MetaSample>(&sample, 1), config.edit_loss_weight,
                           adam);
}

// Groups of k consecutive records, each scored on its whole neighborhood.
// k is clipped to the number of distinct facts so a group never holds two
// contradictory edits of one fact.
inline StepLosses validation_losses(const BaseModel& model, const EditorParams& params, const Normalizer& normalizer,
                                    std::span<const EditRecord> records, std::size_t k, double c_e) {
    if (records.empty()) throw DataError("validation: no records");
    std::vector<std::size_t> facts;
    for (const auto& r : records)
        if (std::find(facts.begin(), facts.end(), r.fact_id) == facts.end()) facts.push_back(r.fact_id);
    k = std::clamp<std::size_t>(k, 1, facts.size());
    const std::size_t groups = std::max<std::size_t>(1, records.size() / k);
    StepLosses mean;
    for (std::size_t g = 0; g < groups; ++g) {
        const auto group = records.subspan(g * k, std::min(k, records.size() - g * k));
        const auto l = meta_objective(model, params, normalizer, full_sample_from_records(group), c_e);
        mean.edit += l.edit / static_cast<double>(groups);
        mean.locality += l.locality / static_cast<double>(groups);
    }
    mean.total = c_e * mean.edit + mean.locality;
    return mean;
}

struct TrainLogEntry {
    std::size_t step = 0;
    StepLosses train;  // mean over the steps since the previous entry
    StepLosses validation;

    bool operator==(const TrainLogEntry&) const = default;
};

struct TrainResult {
    EditorParams params;  // best validation checkpoint
    std::vector<TrainLogEntry> log;
    std::size_t best_step = 0;
    std::size_t steps_run = 0;
};

// k records with pairwise distinct facts, drawn uniformly.
inline std::vector<EditRecord> sample_group(std::span<const EditRecord> records, std::size_t k, Rng& rng) {
    std::vector<EditRecord> group;
    std::size_t attempts = 0;
    while (group.size() < k) {
        const auto& r = records[rng.uniform_index(records.size())];
        const bool clash = std::any_of(group.begin(), group.end(), [&](const EditRecord& g) { return g.fact_id == r.fact_id; });
        if (!clash) group.push_back(r);
        if (++attempts > 1000 * k) throw ConfigError("sample_group: not enough distinct facts for k simultaneous edits");
    }
    return group;
}

inline TrainResult train_mend(const BaseModel& model, const EditorParams& init, const Normalizer& normalizer,
                              std::span<const EditRecord> train, std::span<const EditRecord> validation,
                              const TrainConfig& config) {
    config.validate();
    if (train.empty() || validation.empty()) throw DataError("train_mend: empty training or validation set");
    Rng rng(config.seed);
    AdamState adam(config.meta_lr);
    EditorParams params = init;
    TrainResult result{init, {}, 0, 0};
    const double c_e = config.edit_loss_weight;
    const std::size_t k = config.edits_per_step;

    StepLosses running;
    std::size_t running_count = 0;
    auto evaluate = [&](std::size_t step) {
        TrainLogEntry e;
        e.step = step;
        if (running_count > 0) {
            e.train.edit = running.edit / static_cast<double>(running_count);
            e.train.locality = running.locality / static_cast<double>(running_count);
            e.train.total = c_e * e.train.edit + e.train.locality;
        }
        e.validation = validation_losses(model, params, normalizer, validation, k, c_e);
        result.log.push_back(e);
        running = {};
        running_count = 0;
        return e.validation.total;
    };

    double best = evaluate(0);
    std::size_t stale = 0;
    for (std::size_t step = 1; step <= config.max_steps; ++step) {
        std::vector<MetaSample> batch;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            const auto group = sample_group(train, k, rng);
            batch.push_back(sample_with_pool(group, train, rng));
        }
        const auto l = mend_train_step(model, params, normalizer, batch, c_e, adam);
        running.edit += l.edit;
        running.locality += l.locality;
        ++running_count;
        result.steps_run = step;
        if (step % config.eval_every == 0 || step == config.max_steps) {
            const double val = evaluate(step);
            if (val < best) {
                best = val;
                result.params = params;
                result.best_step = step;
                stale = 0;
            } else if (++stale >= config.patience && config.patience > 0) {
                break;
            }
        }
    }
    return result;
}

// Training log: JSON lines, header {"format": "mend-train-log", "version": 1}
// followed by {"step", "L_e", "L_loc", "L_total", "val_L_e", "val_L_loc", "val_L_total"}.
inline std::string train_log_to_jsonl(std::span<const TrainLogEntry> log) {
    std::string out = io::json{{"format", "mend-train-log"}, {"version", 1}}.dump() + "\n";
    for (const auto& e : log) {
        out += io::json{{"step", e.step},
                        {"L_e", e.train.edit},
                        {"L_loc", e.train.locality},
                        {"L_total", e.train.total},
                        {"val_L_e", e.validation.edit},
                        {"val_L_loc", e.validation.locality},
                        {"val_L_total", e.validation.total}}
                   .dump();
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning baselines

struct FinetuneResult {
    BaseModel model;
    std::size_t steps = 0;
};

inline bool all_predicted(const BaseModel& model, std::span<const LabeledExample> edits) {
    return std::all_of(edits.begin(), edits.end(), [&](const LabeledExample& e) { return predict(model, e.x) == e.y; });
}

namespace detail {
inline void descend(BaseModel& model, std::span<const std::size_t> layers, const Gradients& g, double lr) {
    model.mutate([&](std::vector<DenseLayer>& ls) {
        for (std::size_t id : layers) axpy(-lr, g.weight.at(id).values(), ls.at(id).weight.values());
    });
}
}  // namespace detail

// Gradient descent on the mean NLL of the edit pairs over the weights of
// `layers`, stopping as soon as every edit input predicts its new label.
inline FinetuneResult finetune_edit(const BaseModel& model, std::span<const LabeledExample> edits,
                                    std::span<const std::size_t> layers, double lr, std::size_t max_steps = 100) {
    if (!(lr > 0.0)) throw ConfigError("finetune_edit: lr must be > 0");
    if (edits.empty()) throw DataError("finetune_edit: no edits");
    for (std::size_t id : layers) (void)model.layer(id);
    FinetuneResult r{model, 0};
    std::vector<Vector> xs;
    std::vector<ClassIndex> ys;
    for (const auto& e : edits) {
        xs.push_back(e.x);
        ys.push_back(e.y);
    }
    while (r.steps < max_steps && !all_predicted(r.model, edits)) {
        const auto trace = forward(r.model, xs);
        const auto back = backward_nll(r.model, trace, ys, Reduction::mean);
        detail::descend(r.model, layers, back.grads, lr);
        ++r.steps;
    }
    return r;
}

struct FinetuneKlConfig {
    double edit_weight = 1.0;  // c_edit
    double kl_weight = 1.0;
    double lr = 0.1;
    std::size_t max_steps = 100;
};

// As finetune_edit, adding kl_weight * KL(p_pre || p_current) at one fresh
// locality input per step.
inline FinetuneResult finetune_kl_edit(const BaseModel& model, std::span<const LabeledExample> edits,
                                       std::span<const std::size_t> layers, const std::function<Vector()>& loc_sampler,
                                       const FinetuneKlConfig& config) {
    if (!(config.lr > 0.0)) throw ConfigError("finetune_kl_edit: lr must be > 0");
    if (edits.empty()) throw DataError("finetune_kl_edit: no edits");
    for (std::size_t id : layers) (void)model.layer(id);
    FinetuneResult r{model, 0};
    const double k = static_cast<double>(edits.size());
    while (r.steps < config.max_steps && !all_predicted(r.model, edits)) {
        const Vector x_loc = loc_sampler();
        std::vector<Vector> xs;
        for (const auto& e : edits) xs.push_back(e.x);
        xs.push_back(x_loc);
        const auto trace = forward(r.model, xs);
        std::vector<Vector> grad_logits;
        for (std::size_t i = 0; i < edits.size(); ++i) {
            auto nll = softmax_nll(trace.logits[i], edits[i].y);
            for (double& g : nll.grad_logits) g *= config.edit_weight / k;
            grad_logits.push_back(std::move(nll.grad_logits));
        }
        Vector kl = kl_grad_q(logits(model, x_loc), trace.logits.back());
        for (double& g : kl) g *= config.kl_weight;
        grad_logits.push_back(std::move(kl));
        const auto g = backward(r.model, trace, grad_logits);
        detail::descend(r.model, layers, g, config.lr);
        ++r.steps;
    }
    return r;
}

}  // namespace mend
