#pragma once
// End-to-end experiment settings and the pipeline pieces the CLI and the
// acceptance suite share: world generation, base-model pre-training, editor
// training and evaluation.

#include <algorithm>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mend/basenet.hpp"
#include "mend/editbench.hpp"
#include "mend/errors.hpp"
#include "mend/evalkit.hpp"
#include "mend/json_io.hpp"
#include "mend/mendcore.hpp"
#include "mend/metatrain.hpp"

namespace mend {

struct ExperimentConfig {
    std::uint64_t seed = 0;
    WorldConfig world;
    std::vector<std::size_t> hidden = {128, 128};
    std::vector<std::size_t> editable;  // empty: every layer
    PretrainConfig pretrain;
    std::size_t rank = 8;
    double alpha_init = 1e-2;
    std::string variant = "full";
    TrainConfig train;
    std::size_t validation_facts = 8;
    std::vector<std::size_t> k_edits = {1, 5, 25};
    std::size_t ablation_steps = 5000;
    double ft_lr = 0.1;
    std::size_t ft_max_steps = 100;
    double ftkl_edit_weight = 1.0;
    double ftkl_kl_weight = 1.0;
    std::size_t parallel = 1;

    // Per-stage seeds derived from the single run seed.
    void apply_seed() {
        world.seed = seed;
        pretrain.seed = seed + 1;
        train.seed = seed + 3;
    }
    [[nodiscard]] std::uint64_t editor_seed() const noexcept { return seed + 2; }
    [[nodiscard]] std::uint64_t ftkl_seed() const noexcept { return seed + 4; }

    [[nodiscard]] std::vector<std::size_t> model_dims() const {
        std::vector<std::size_t> dims{world.feature_dim};
        dims.insert(dims.end(), hidden.begin(), hidden.end());
        dims.push_back(world.num_classes);
        return dims;
    }

    [[nodiscard]] std::vector<std::size_t> editable_layers() const {
        if (!editable.empty()) return editable;
        std::vector<std::size_t> all;
        for (std::size_t l = 0; l + 1 < model_dims().size(); ++l) all.push_back(l);
        return all;
    }

    void validate() const {
        world.validate();
        train.validate();
        (void)variant_by_name(variant);
        if (rank == 0) throw ConfigError("rank must be >= 1");
        if (k_edits.empty()) throw ConfigError("k_edits must not be empty");
        for (std::size_t k : k_edits)
            if (k == 0) throw ConfigError("k_edits entries must be >= 1");
        if (!(ft_lr > 0.0)) throw ConfigError("ft_lr must be > 0");
        if (parallel == 0) throw ConfigError("parallel must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// JSON form of the config. Unknown keys are rejected.

namespace detail {
inline void reject_unknown(const io::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, value] : j.items()) {
        if (!ok.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <class T>
void read_if(const io::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const io::json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}
}  // namespace detail

inline io::json config_to_json(const ExperimentConfig& c) {
    return {{"seed", c.seed},
            {"world",
             {{"num_entities", c.world.num_entities},
              {"num_relations", c.world.num_relations},
              {"num_classes", c.world.num_classes},
              {"feature_dim", c.world.feature_dim},
              {"paraphrases", c.world.paraphrases},
              {"noise_scale", c.world.noise_scale},
              {"pretrain_per_fact", c.world.pretrain_per_fact},
              {"records_per_fact", c.world.records_per_fact},
              {"test_facts", c.world.test_facts}}},
            {"model", {{"hidden", c.hidden}, {"editable", c.editable_layers()}}},
            {"pretrain",
             {{"epochs", c.pretrain.epochs},
              {"batch_size", c.pretrain.batch_size},
              {"learning_rate", c.pretrain.learning_rate}}},
            {"editor", {{"rank", c.rank}, {"alpha_init", c.alpha_init}, {"variant", c.variant}}},
            {"train",
             {{"c_e", c.train.edit_loss_weight},
              {"meta_lr", c.train.meta_lr},
              {"max_steps", c.train.max_steps},
              {"eval_every", c.train.eval_every},
              {"patience", c.train.patience},
              {"batch_size", c.train.batch_size},
              {"edits_per_step", c.train.edits_per_step},
              {"validation_facts", c.validation_facts}}},
            {"eval",
             {{"k_edits", c.k_edits},
              {"ablation_steps", c.ablation_steps},
              {"ft_lr", c.ft_lr},
              {"ft_max_steps", c.ft_max_steps},
              {"ftkl_edit_weight", c.ftkl_edit_weight},
              {"ftkl_kl_weight", c.ftkl_kl_weight},
              {"parallel", c.parallel}}}};
}

// Overlays the keys present in `j` onto `c`.
inline void merge_config(ExperimentConfig& c, const io::json& j) {
    using detail::read_if;
    detail::reject_unknown(j, {"seed", "world", "model", "pretrain", "editor", "train", "eval"}, "config");
    read_if(j, "seed", c.seed);
    if (j.contains("world")) {
        const auto& w = j.at("world");
        detail::reject_unknown(w,
                               {"num_entities", "num_relations", "num_classes", "feature_dim", "paraphrases",
                                "noise_scale", "pretrain_per_fact", "records_per_fact", "test_facts"},
                               "config.world");
        read_if(w, "num_entities", c.world.num_entities);
        read_if(w, "num_relations", c.world.num_relations);
        read_if(w, "num_classes", c.world.num_classes);
        read_if(w, "feature_dim", c.world.feature_dim);
        read_if(w, "paraphrases", c.world.paraphrases);
        read_if(w, "noise_scale", c.world.noise_scale);
        read_if(w, "pretrain_per_fact", c.world.pretrain_per_fact);
        read_if(w, "records_per_fact", c.world.records_per_fact);
        read_if(w, "test_facts", c.world.test_facts);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::reject_unknown(m, {"hidden", "editable"}, "config.model");
        read_if(m, "hidden", c.hidden);
        read_if(m, "editable", c.editable);
    }
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        detail::reject_unknown(p, {"epochs", "batch_size", "learning_rate"}, "config.pretrain");
        read_if(p, "epochs", c.pretrain.epochs);
        read_if(p, "batch_size", c.pretrain.batch_size);
        read_if(p, "learning_rate", c.pretrain.learning_rate);
    }
    if (j.contains("editor")) {
        const auto& e = j.at("editor");
        detail::reject_unknown(e, {"rank", "alpha_init", "variant"}, "config.editor");
        read_if(e, "rank", c.rank);
        read_if(e, "alpha_init", c.alpha_init);
        read_if(e, "variant", c.variant);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::reject_unknown(t,
                               {"c_e", "meta_lr", "max_steps", "eval_every", "patience", "batch_size",
                                "edits_per_step", "validation_facts"},
                               "config.train");
        read_if(t, "c_e", c.train.edit_loss_weight);
        read_if(t, "meta_lr", c.train.meta_lr);
        read_if(t, "max_steps", c.train.max_steps);
        read_if(t, "eval_every", c.train.eval_every);
        read_if(t, "patience", c.train.patience);
        read_if(t, "batch_size", c.train.batch_size);
        read_if(t, "edits_per_step", c.train.edits_per_step);
        read_if(t, "validation_facts", c.validation_facts);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        detail::reject_unknown(e,
                               {"k_edits", "ablation_steps", "ft_lr", "ft_max_steps", "ftkl_edit_weight",
                                "ftkl_kl_weight", "parallel"},
                               "config.eval");
        read_if(e, "k_edits", c.k_edits);
        read_if(e, "ablation_steps", c.ablation_steps);
        read_if(e, "ft_lr", c.ft_lr);
        read_if(e, "ft_max_steps", c.ft_max_steps);
        read_if(e, "ftkl_edit_weight", c.ftkl_edit_weight);
        read_if(e, "ftkl_kl_weight", c.ftkl_kl_weight);
        read_if(e, "parallel", c.parallel);
    }
}

// ---------------------------------------------------------------------------
// Pipeline

inline BaseModel pretrain_base(const EditDataset& ds, const ExperimentConfig& c) {
    Rng rng(c.pretrain.seed);
    const auto dims = c.model_dims();
    const BaseModel init = BaseModel::random(dims, rng);
    const auto data = ds.pretrain_examples();
    return train_classifier(init, data, c.pretrain);
}

struct EditSplits {
    std::vector<EditRecord> train;
    std::vector<EditRecord> validation;
};

inline EditSplits split_edit_train(const EditDataset& ds, const ExperimentConfig& c) {
    auto [train, val] = split_by_fact(ds.train, c.validation_facts);
    return {std::move(train), std::move(val)};
}

inline AblationSetup make_setup(const BaseModel& model, const EditSplits& splits, const EditDataset& ds,
                                const ExperimentConfig& c, std::size_t k) {
    AblationSetup s;
    s.model = &model;
    s.train = splits.train;
    s.validation = splits.validation;
    s.test = ds.test;
    s.editable = c.editable_layers();
    s.rank = c.rank;
    s.alpha_init = c.alpha_init;
    s.train_config = c.train;
    // batch_size counts edits per step, so larger k uses fewer groups.
    s.train_config.edits_per_step = k;
    s.train_config.batch_size = std::max<std::size_t>(1, c.train.batch_size / k);
    s.k = k;
    s.parallel = c.parallel;
    s.seed = c.editor_seed();
    return s;
}

inline FineTuneEditor make_ft_editor(const ExperimentConfig& c) { return {c.editable_layers(), c.ft_lr, c.ft_max_steps}; }

inline FineTuneKlEditor make_ftkl_editor(const ExperimentConfig& c, std::span<const EditRecord> train) {
    FineTuneKlEditor e;
    e.layers = c.editable_layers();
    e.config.edit_weight = c.ftkl_edit_weight;
    e.config.kl_weight = c.ftkl_kl_weight;
    e.config.lr = c.ft_lr;
    e.config.max_steps = c.ft_max_steps;
    for (const auto& r : train) e.loc_pool.push_back(r.x_loc);
    e.seed = c.ftkl_seed();
    return e;
}

}  // namespace mend
