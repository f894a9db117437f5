#pragma once
// Editor networks that map a layer's gradient factors (u, delta) to
// pseudo-factors (u~, delta~) whose outer-product sum is the edit direction.
//
// Per shape group the editor is a two-block residual MLP with low-rank
// weights over z = concat(norm(u), norm(delta)):
//
//   h = z + relu(s1 * (U1 V1 z + b1) + o1)
//   g = h + s2 * (U2 V2 h) + o2
//
// where (s1, o1, s2, o2) and the step size alpha are per edited layer. With
// U1 = U2 = 0, b1 = 0, s = 1 and o = 0 the editor is exactly the identity.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mend/basenet.hpp"
#include "mend/errors.hpp"
#include "mend/json_io.hpp"
#include "mend/numkit.hpp"

namespace mend {

enum class TransformMode { both, only_u, only_delta, only_smaller };

inline std::string to_string(TransformMode mode) {
    switch (mode) {
        case TransformMode::both: return "both";
        case TransformMode::only_u: return "only_u";
        case TransformMode::only_delta: return "only_delta";
        case TransformMode::only_smaller: return "only_smaller";
    }
    return "both";
}

inline TransformMode transform_from_string(std::string_view s) {
    if (s == "both") return TransformMode::both;
    if (s == "only_u") return TransformMode::only_u;
    if (s == "only_delta") return TransformMode::only_delta;
    if (s == "only_smaller") return TransformMode::only_smaller;
    throw ConfigError("unknown transform mode '" + std::string(s) + "'");
}

struct VariantConfig {
    bool share_params = true;
    bool normalize = true;
    bool identity_init = true;
    TransformMode transform = TransformMode::both;

    bool operator==(const VariantConfig&) const = default;
};

// Full editor plus the six ablations, in report order.
inline constexpr std::array<std::string_view, 7> kVariantNames = {
    "full", "no_sharing", "no_norm", "no_id_init", "only_u", "only_delta", "only_smaller"};

inline VariantConfig variant_by_name(std::string_view name) {
    VariantConfig v;
    if (name == "full") return v;
    if (name == "no_sharing") {
        v.share_params = false;
    } else if (name == "no_norm") {
        v.normalize = false;
    } else if (name == "no_id_init") {
        v.identity_init = false;
    } else if (name == "only_u") {
        v.transform = TransformMode::only_u;
    } else if (name == "only_delta") {
        v.transform = TransformMode::only_delta;
    } else if (name == "only_smaller") {
        v.transform = TransformMode::only_smaller;
    } else {
        throw ConfigError("unknown editor variant '" + std::string(name) + "'");
    }
    return v;
}

// Which of (u, delta) the editor rewrites for an m-input, n-output layer.
// only_smaller picks u on ties.
struct Coverage {
    bool u = true;
    bool delta = true;

    [[nodiscard]] std::size_t width(std::size_t m, std::size_t n) const noexcept {
        return (u ? m : 0) + (delta ? n : 0);
    }
};

inline Coverage coverage(TransformMode mode, std::size_t m, std::size_t n) noexcept {
    switch (mode) {
        case TransformMode::both: return {true, true};
        case TransformMode::only_u: return {true, false};
        case TransformMode::only_delta: return {false, true};
        case TransformMode::only_smaller: return m <= n ? Coverage{true, false} : Coverage{false, true};
    }
    return {true, true};
}

// Edited layers with one weight shape (or a single layer when sharing is off).
struct ShapeGroup {
    std::size_t m = 0;  // input dim (columns of W)
    std::size_t n = 0;  // output dim (rows of W)
    std::vector<std::size_t> layers;

    bool operator==(const ShapeGroup&) const = default;
};

inline std::vector<ShapeGroup> form_groups(const BaseModel& model, std::span<const std::size_t> editable,
                                           bool share_params) {
    if (editable.empty()) throw ConfigError("editor: the set of editable layers is empty");
    std::vector<ShapeGroup> groups;
    std::vector<bool> seen(model.num_layers(), false);
    for (std::size_t id : editable) {
        if (id >= model.num_layers()) throw ConfigError("editor: editable layer " + std::to_string(id) + " does not exist");
        if (seen[id]) throw ConfigError("editor: editable layer " + std::to_string(id) + " listed twice");
        seen[id] = true;
        const std::size_t m = model.layer(id).in_dim();
        const std::size_t n = model.layer(id).out_dim();
        auto it = std::find_if(groups.begin(), groups.end(),
                               [&](const ShapeGroup& g) { return share_params && g.m == m && g.n == n; });
        if (it == groups.end()) {
            groups.push_back({m, n, {id}});
        } else {
            it->layers.push_back(id);
        }
    }
    return groups;
}

struct EditorBlock {
    Matrix U1;  // k x r
    Matrix V1;  // r x k
    Vector b1;  // k
    Matrix U2;  // k x r
    Matrix V2;  // r x k

    bool operator==(const EditorBlock&) const = default;
};

// FiLM scale/offset pairs and the learned step size of one edited layer.
struct LayerModulation {
    Vector s1, o1, s2, o2;
    double alpha = 0.0;

    bool operator==(const LayerModulation&) const = default;
};

struct EditableLayer {
    std::size_t layer = 0;
    std::size_t group = 0;
    LayerModulation film;

    bool operator==(const EditableLayer&) const = default;
};

struct EditorParams {
    std::size_t rank = 0;
    VariantConfig variant;
    std::vector<ShapeGroup> groups;
    std::vector<EditorBlock> blocks;    // one per group
    std::vector<EditableLayer> layers;  // in editable-layer order

    bool operator==(const EditorParams&) const = default;

    [[nodiscard]] std::size_t slot(std::size_t layer_id) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].layer == layer_id) return i;
        throw IndexError("editor: layer " + std::to_string(layer_id) + " is not editable");
    }

    [[nodiscard]] std::vector<std::size_t> layer_ids() const {
        std::vector<std::size_t> ids;
        for (const auto& l : layers) ids.push_back(l.layer);
        return ids;
    }

    [[nodiscard]] Coverage coverage_of(std::size_t group) const {
        return coverage(variant.transform, groups[group].m, groups[group].n);
    }

    // Visits every trainable tensor as a span, in a fixed order.
    template <class F>
    void for_each_tensor(F&& f) {
        for (auto& b : blocks) {
            f(b.U1.values());
            f(b.V1.values());
            f(b.b1.values());
            f(b.U2.values());
            f(b.V2.values());
        }
        for (auto& l : layers) {
            f(l.film.s1.values());
            f(l.film.o1.values());
            f(l.film.s2.values());
            f(l.film.o2.values());
            f(std::span<double>(&l.film.alpha, 1));
        }
    }

    template <class F>
    void for_each_tensor(F&& f) const {
        const_cast<EditorParams*>(this)->for_each_tensor([&](std::span<double> s) { f(std::span<const double>(s)); });
    }

    [[nodiscard]] std::size_t shared_parameter_count() const {
        std::size_t n = 0;
        for (const auto& b : blocks) n += b.U1.size() + b.V1.size() + b.b1.size() + b.U2.size() + b.V2.size();
        return n;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each_tensor([&](std::span<const double> s) { n += s.size(); });
        return n;
    }

    [[nodiscard]] std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(parameter_count());
        for_each_tensor([&](std::span<const double> s) { out.insert(out.end(), s.begin(), s.end()); });
        return out;
    }

    void assign(std::span<const double> flat) {
        if (flat.size() != parameter_count()) throw ShapeError("EditorParams::assign: wrong parameter count");
        std::size_t pos = 0;
        for_each_tensor([&](std::span<double> s) {
            for (double& x : s) x = flat[pos++];
        });
    }

    // Same structure with every value zero; used as a gradient accumulator.
    [[nodiscard]] EditorParams zeros_like() const {
        EditorParams z = *this;
        z.for_each_tensor([](std::span<double> s) {
            for (double& x : s) x = 0.0;
        });
        return z;
    }
};

inline EditorParams init_editor(const BaseModel& model, std::span<const std::size_t> editable, std::size_t rank,
                                const VariantConfig& variant, double alpha_init, Rng& rng) {
    EditorParams p;
    p.rank = rank;
    p.variant = variant;
    p.groups = form_groups(model, editable, variant.share_params);
    if (rank == 0) throw ConfigError("editor: rank must be >= 1");
    for (std::size_t g = 0; g < p.groups.size(); ++g) {
        const std::size_t k = p.coverage_of(g).width(p.groups[g].m, p.groups[g].n);
        if (rank > k) {
            throw ConfigError("editor: rank " + std::to_string(rank) + " exceeds editor width " + std::to_string(k));
        }
        EditorBlock b;
        b.V1 = xavier_uniform(rank, k, rng);
        b.V2 = xavier_uniform(rank, k, rng);
        if (variant.identity_init) {
            b.U1 = Matrix(k, rank);
            b.U2 = Matrix(k, rank);
            b.b1 = Vector(k);
        } else {
            b.U1 = xavier_uniform(k, rank, rng);
            b.U2 = xavier_uniform(k, rank, rng);
            b.b1 = Vector(xavier_uniform(1, k, rng).data());
        }
        p.blocks.push_back(std::move(b));
    }
    for (std::size_t id : editable) {
        std::size_t group = 0;
        for (std::size_t g = 0; g < p.groups.size(); ++g) {
            const auto& members = p.groups[g].layers;
            if (std::find(members.begin(), members.end(), id) != members.end()) group = g;
        }
        const std::size_t k = p.coverage_of(group).width(p.groups[group].m, p.groups[group].n);
        p.layers.push_back({id, group, {Vector(k, 1.0), Vector(k), Vector(k, 1.0), Vector(k), alpha_init}});
    }
    return p;
}

// ---------------------------------------------------------------------------
// Input normalization

struct NormStats {
    Vector mean_u, var_u;          // m
    Vector mean_delta, var_delta;  // n

    bool operator==(const NormStats&) const = default;
};

struct Normalizer {
    double epsilon = 1e-6;
    std::vector<ShapeGroup> groups;
    std::vector<NormStats> stats;

    bool operator==(const Normalizer&) const = default;

    [[nodiscard]] const NormStats& for_layer(std::size_t layer_id) const {
        for (std::size_t g = 0; g < groups.size(); ++g)
            for (std::size_t id : groups[g].layers)
                if (id == layer_id) return stats[g];
        throw IndexError("normalizer: no statistics for layer " + std::to_string(layer_id));
    }
};

inline Vector standardize(const Vector& x, const Vector& mean, const Vector& var) {
    if (x.dim() != mean.dim()) throw ShapeError("normalizer: input dim mismatch");
    Vector out(x.dim());
    for (std::size_t i = 0; i < x.dim(); ++i) out[i] = (x[i] - mean[i]) / std::sqrt(var[i]);
    return out;
}

// Population mean/variance of u and delta per dimension, pooled over every
// edit pair and every member layer of a group, taken on the un-edited model.
inline Normalizer fit_normalizer(const BaseModel& model, std::span<const LabeledExample> edit_pairs,
                                 const std::vector<ShapeGroup>& groups, double epsilon = 1e-6) {
    if (edit_pairs.empty()) throw DataError("fit_normalizer: empty edit set");
    if (!(epsilon > 0.0)) throw ConfigError("fit_normalizer: variance floor must be positive");
    std::vector<Vector> xs;
    std::vector<ClassIndex> ys;
    for (const auto& e : edit_pairs) {
        xs.push_back(e.x);
        ys.push_back(e.y);
    }
    const auto trace = forward(model, xs);
    const auto back = backward_nll(model, trace, ys);

    Normalizer norm;
    norm.epsilon = epsilon;
    norm.groups = groups;
    for (const auto& g : groups) {
        NormStats s{Vector(g.m), Vector(g.m), Vector(g.n), Vector(g.n)};
        double count = 0.0;
        for (std::size_t id : g.layers) {
            const auto& f = back.grads.factors.at(id);
            for (std::size_t i = 0; i < f.batch_size(); ++i) {
                axpy(1.0, f.inputs[i].values(), s.mean_u.values());
                axpy(1.0, f.deltas[i].values(), s.mean_delta.values());
            }
            count += static_cast<double>(f.batch_size());
        }
        for (double& x : s.mean_u) x /= count;
        for (double& x : s.mean_delta) x /= count;
        for (std::size_t id : g.layers) {
            const auto& f = back.grads.factors.at(id);
            for (std::size_t i = 0; i < f.batch_size(); ++i) {
                for (std::size_t j = 0; j < g.m; ++j) {
                    const double d = f.inputs[i][j] - s.mean_u[j];
                    s.var_u[j] += d * d;
                }
                for (std::size_t j = 0; j < g.n; ++j) {
                    const double d = f.deltas[i][j] - s.mean_delta[j];
                    s.var_delta[j] += d * d;
                }
            }
        }
        for (double& x : s.var_u) x = std::max(x / count, epsilon);
        for (double& x : s.var_delta) x = std::max(x / count, epsilon);
        norm.stats.push_back(std::move(s));
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Editor forward / backward

namespace detail {

struct BlockTape {
    Vector z;   // editor input
    Vector a1;  // V1 z
    Vector p1;  // U1 a1 + b1
    Vector q1;  // s1 * p1 + o1
    Vector h;   // z + relu(q1)
    Vector a2;  // V2 h
    Vector p2;  // U2 a2
};

inline Vector run_block(const EditorBlock& b, const LayerModulation& film, const Vector& z, BlockTape& t) {
    t.z = z;
    t.a1 = matvec(b.V1, z);
    t.p1 = matvec(b.U1, t.a1);
    axpy(1.0, b.b1.values(), t.p1.values());
    t.q1 = hadamard(film.s1, t.p1);
    axpy(1.0, film.o1.values(), t.q1.values());
    t.h = relu(t.q1);
    axpy(1.0, z.values(), t.h.values());
    t.a2 = matvec(b.V2, t.h);
    t.p2 = matvec(b.U2, t.a2);
    Vector g = hadamard(film.s2, t.p2);
    axpy(1.0, film.o2.values(), g.values());
    axpy(1.0, t.h.values(), g.values());
    return g;
}

// Accumulates d(loss)/d(params) given d(loss)/dg. The input z is a constant.
inline void backprop_block(const EditorBlock& b, const LayerModulation& film, const BlockTape& t, const Vector& dg,
                           EditorBlock& db, LayerModulation& dfilm) {
    // g = h + s2 * p2 + o2
    Vector dh = dg;
    axpy(1.0, hadamard(dg, t.p2).values(), dfilm.s2.values());
    axpy(1.0, dg.values(), dfilm.o2.values());
    const Vector dp2 = hadamard(dg, film.s2);
    add_outer(db.U2, dp2, t.a2);
    const Vector da2 = matvec_transposed(b.U2, dp2);
    add_outer(db.V2, da2, t.h);
    axpy(1.0, matvec_transposed(b.V2, da2).values(), dh.values());
    // h = z + relu(q1)
    const Vector dq1 = hadamard(dh, relu_grad(t.q1));
    axpy(1.0, hadamard(dq1, t.p1).values(), dfilm.s1.values());
    axpy(1.0, dq1.values(), dfilm.o1.values());
    const Vector dp1 = hadamard(dq1, film.s1);
    axpy(1.0, dp1.values(), db.b1.values());
    add_outer(db.U1, dp1, t.a1);
    const Vector da1 = matvec_transposed(b.U1, dp1);
    add_outer(db.V1, da1, t.z);
}

}  // namespace detail

// One application of an editor to one example's factors.
struct EditorApplication {
    Vector u_tilde;
    Vector delta_tilde;
    detail::BlockTape tape;
};

inline EditorApplication apply_editor(const EditorParams& params, std::size_t slot, const Vector& u,
                                      const Vector& delta, const Normalizer& normalizer) {
    const EditableLayer& el = params.layers.at(slot);
    const ShapeGroup& group = params.groups[el.group];
    if (u.dim() != group.m || delta.dim() != group.n) {
        throw ShapeError("editor: layer " + std::to_string(el.layer) + " expects u[" + std::to_string(group.m) +
                         "], delta[" + std::to_string(group.n) + "]");
    }
    const Coverage cov = params.coverage_of(el.group);
    const bool norm = params.variant.normalize;
    const NormStats* stats = norm ? &normalizer.for_layer(el.layer) : nullptr;
    Vector z;
    if (cov.u) z = norm ? standardize(u, stats->mean_u, stats->var_u) : u;
    if (cov.delta) {
        Vector d = norm ? standardize(delta, stats->mean_delta, stats->var_delta) : delta;
        z = z.empty() ? std::move(d) : concat(z, d);
    }
    EditorApplication app;
    const Vector g = detail::run_block(params.blocks[el.group], el.film, z, app.tape);
    app.u_tilde = cov.u ? slice(g, 0, group.m) : u;
    app.delta_tilde = cov.delta ? slice(g, cov.u ? group.m : 0, group.n) : delta;
    return app;
}

inline std::pair<Vector, Vector> editor_forward(const EditorParams& params, std::size_t layer_id, const Vector& u,
                                                const Vector& delta, const Normalizer& normalizer) {
    auto app = apply_editor(params, params.slot(layer_id), u, delta, normalizer);
    return {std::move(app.u_tilde), std::move(app.delta_tilde)};
}

// Backward through apply_editor: the raw (untransformed) side receives no
// parameter gradient.
inline void backprop_editor(const EditorParams& params, std::size_t slot, const EditorApplication& app,
                            const Vector& d_u_tilde, const Vector& d_delta_tilde, EditorParams& grad) {
    const EditableLayer& el = params.layers[slot];
    const Coverage cov = params.coverage_of(el.group);
    Vector dg;
    if (cov.u) dg = d_u_tilde;
    if (cov.delta) dg = dg.empty() ? d_delta_tilde : concat(dg, d_delta_tilde);
    detail::backprop_block(params.blocks[el.group], el.film, app.tape, dg, grad.blocks[el.group],
                           grad.layers[slot].film);
}

inline Matrix pseudogradient(const EditorParams& params, std::size_t layer_id, const GradFactors& factors,
                             const Normalizer& normalizer) {
    if (factors.layer != layer_id) throw ContractError("pseudogradient: factors belong to another layer");
    const std::size_t slot = params.slot(layer_id);
    const ShapeGroup& group = params.groups[params.layers[slot].group];
    Matrix out(group.n, group.m);
    for (std::size_t i = 0; i < factors.batch_size(); ++i) {
        const auto app = apply_editor(params, slot, factors.inputs[i], factors.deltas[i], normalizer);
        add_outer(out, app.delta_tilde, app.u_tilde);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Edit application

struct LayerEdit {
    std::size_t layer = 0;
    std::size_t slot = 0;
    std::vector<EditorApplication> applications;  // per edit example
    Matrix pseudogradient;
};

struct EditComputation {
    BaseModel edited;
    std::vector<LayerEdit> layers;
};

// W~ = W - alpha * sum_i outer(delta~_i, u~_i) for every editable layer.
// factors are indexed by layer id and are treated as constants.
inline EditComputation compute_edit_from_factors(const BaseModel& model, const EditorParams& params,
                                                 const Normalizer& normalizer,
                                                 const std::vector<GradFactors>& factors) {
    std::map<std::size_t, Matrix> replacements;
    std::vector<LayerEdit> edits;
    for (std::size_t slot = 0; slot < params.layers.size(); ++slot) {
        const EditableLayer& el = params.layers[slot];
        const GradFactors& f = factors.at(el.layer);
        if (f.layer != el.layer) throw ContractError("edit: factors indexed out of order");
        if (f.batch_size() == 0) throw ContractError("edit: empty edit batch");
        const ShapeGroup& group = params.groups[el.group];
        LayerEdit edit{el.layer, slot, {}, Matrix(group.n, group.m)};
        for (std::size_t i = 0; i < f.batch_size(); ++i) {
            auto app = apply_editor(params, slot, f.inputs[i], f.deltas[i], normalizer);
            add_outer(edit.pseudogradient, app.delta_tilde, app.u_tilde);
            edit.applications.push_back(std::move(app));
        }
        Matrix w = model.layer(el.layer).weight;
        axpy(-el.film.alpha, edit.pseudogradient.values(), w.values());
        require_finite(w.values(), "edited weights");
        replacements.emplace(el.layer, std::move(w));
        edits.push_back(std::move(edit));
    }
    return {clone_with_weights(model, replacements), std::move(edits)};
}

inline EditComputation compute_edit(const BaseModel& model, const EditorParams& params, const Normalizer& normalizer,
                                    std::span<const LabeledExample> edit_batch) {
    if (edit_batch.empty()) throw ContractError("apply_edit: edit batch is empty");
    std::vector<Vector> xs;
    std::vector<ClassIndex> ys;
    for (const auto& e : edit_batch) {
        xs.push_back(e.x);
        ys.push_back(e.y);
    }
    const auto trace = forward(model, xs);
    const auto back = backward_nll(model, trace, ys);
    return compute_edit_from_factors(model, params, normalizer, back.grads.factors);
}

inline BaseModel apply_edit(const BaseModel& model, const EditorParams& params, const Normalizer& normalizer,
                            std::span<const LabeledExample> edit_batch) {
    return compute_edit(model, params, normalizer, edit_batch).edited;
}

// ---------------------------------------------------------------------------
// Checkpoint: {"format": "mend-editor", "version": 1, "rank", "variant",
//              "groups": [{m, n, layers, U1, V1, b1, U2, V2}],
//              "layers": [{layer, group, s1, o1, s2, o2, alpha}],
//              "normalizer": {epsilon, groups: [{m, n, layers, mean_u, var_u, mean_delta, var_delta}]}}

inline constexpr int kEditorFormatVersion = 1;

struct EditorCheckpoint {
    EditorParams params;
    Normalizer normalizer;
};

inline io::json variant_to_json(const VariantConfig& v) {
    return {{"share_params", v.share_params},
            {"normalize", v.normalize},
            {"identity_init", v.identity_init},
            {"transform", to_string(v.transform)}};
}

inline VariantConfig variant_from_json(const io::json& j) {
    VariantConfig v;
    v.share_params = j.at("share_params").get<bool>();
    v.normalize = j.at("normalize").get<bool>();
    v.identity_init = j.at("identity_init").get<bool>();
    v.transform = transform_from_string(j.at("transform").get<std::string>());
    return v;
}

inline io::json editor_to_json(const EditorParams& p, const Normalizer& norm) {
    io::json groups = io::json::array();
    for (std::size_t g = 0; g < p.groups.size(); ++g) {
        const auto& b = p.blocks[g];
        groups.push_back({{"m", p.groups[g].m},
                          {"n", p.groups[g].n},
                          {"layers", p.groups[g].layers},
                          {"U1", io::to_json(b.U1)},
                          {"V1", io::to_json(b.V1)},
                          {"b1", io::to_json(b.b1)},
                          {"U2", io::to_json(b.U2)},
                          {"V2", io::to_json(b.V2)}});
    }
    io::json layers = io::json::array();
    for (const auto& l : p.layers) {
        layers.push_back({{"layer", l.layer},
                          {"group", l.group},
                          {"s1", io::to_json(l.film.s1)},
                          {"o1", io::to_json(l.film.o1)},
                          {"s2", io::to_json(l.film.s2)},
                          {"o2", io::to_json(l.film.o2)},
                          {"alpha", l.film.alpha}});
    }
    io::json norm_groups = io::json::array();
    for (std::size_t g = 0; g < norm.groups.size(); ++g) {
        const auto& s = norm.stats[g];
        norm_groups.push_back({{"m", norm.groups[g].m},
                               {"n", norm.groups[g].n},
                               {"layers", norm.groups[g].layers},
                               {"mean_u", io::to_json(s.mean_u)},
                               {"var_u", io::to_json(s.var_u)},
                               {"mean_delta", io::to_json(s.mean_delta)},
                               {"var_delta", io::to_json(s.var_delta)}});
    }
    return {{"format", "mend-editor"},
            {"version", kEditorFormatVersion},
            {"rank", p.rank},
            {"variant", variant_to_json(p.variant)},
            {"groups", groups},
            {"layers", layers},
            {"normalizer", {{"epsilon", norm.epsilon}, {"groups", norm_groups}}}};
}

inline EditorCheckpoint editor_from_json(const io::json& j) {
    io::check_envelope(j, "mend-editor", kEditorFormatVersion);
    try {
        EditorCheckpoint ck;
        auto& p = ck.params;
        p.rank = j.at("rank").get<std::size_t>();
        p.variant = variant_from_json(j.at("variant"));
        for (const auto& gj : j.at("groups")) {
            p.groups.push_back(
                {gj.at("m").get<std::size_t>(), gj.at("n").get<std::size_t>(), gj.at("layers").get<std::vector<std::size_t>>()});
            p.blocks.push_back({io::matrix_from_json(gj.at("U1")), io::matrix_from_json(gj.at("V1")),
                                io::vector_from_json(gj.at("b1")), io::matrix_from_json(gj.at("U2")),
                                io::matrix_from_json(gj.at("V2"))});
        }
        for (const auto& lj : j.at("layers")) {
            EditableLayer l;
            l.layer = lj.at("layer").get<std::size_t>();
            l.group = lj.at("group").get<std::size_t>();
            if (l.group >= p.groups.size()) throw DataError("editor checkpoint: layer refers to unknown group");
            l.film = {io::vector_from_json(lj.at("s1")), io::vector_from_json(lj.at("o1")),
                      io::vector_from_json(lj.at("s2")), io::vector_from_json(lj.at("o2")),
                      lj.at("alpha").get<double>()};
            p.layers.push_back(std::move(l));
        }
        const auto& nj = j.at("normalizer");
        ck.normalizer.epsilon = nj.at("epsilon").get<double>();
        for (const auto& gj : nj.at("groups")) {
            ck.normalizer.groups.push_back(
                {gj.at("m").get<std::size_t>(), gj.at("n").get<std::size_t>(), gj.at("layers").get<std::vector<std::size_t>>()});
            ck.normalizer.stats.push_back({io::vector_from_json(gj.at("mean_u")), io::vector_from_json(gj.at("var_u")),
                                           io::vector_from_json(gj.at("mean_delta")),
                                           io::vector_from_json(gj.at("var_delta"))});
        }
        return ck;
    } catch (const io::json::exception& e) {
        throw DataError(std::string("editor checkpoint: ") + e.what());
    }
}

inline void save_editor(const EditorParams& params, const Normalizer& normalizer, const std::filesystem::path& path) {
    io::write_text(path, editor_to_json(params, normalizer).dump() + "\n");
}

inline EditorCheckpoint load_editor(const std::filesystem::path& path) {
    return editor_from_json(io::parse_json(io::read_text(path), path.string()));
}

}  // namespace mend
