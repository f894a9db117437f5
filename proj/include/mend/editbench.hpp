#pragma once
// Synthetic "fact lookup" benchmark. A fact is an (entity, relation) pair
// with a ground-truth class; its input is the concatenated one-hot codes of
// entity and relation plus Gaussian noise, and paraphrases of a fact are
// independent noise draws. Edit records ask the model to assign a different,
// uniformly chosen class to a fact and to all of its paraphrases.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mend/basenet.hpp"
#include "mend/errors.hpp"
#include "mend/json_io.hpp"
#include "mend/numkit.hpp"

namespace mend {

struct WorldConfig {
    std::size_t num_entities = 32;
    std::size_t num_relations = 4;
    std::size_t num_classes = 16;
    std::size_t feature_dim = 64;
    std::size_t paraphrases = 4;  // neighborhood size, edit pair included
    double noise_scale = 0.1;
    std::uint64_t seed = 0;
    std::size_t pretrain_per_fact = 16;
    std::size_t records_per_fact = 5;
    std::size_t test_facts = 60;

    bool operator==(const WorldConfig&) const = default;

    [[nodiscard]] std::size_t num_facts() const noexcept { return num_entities * num_relations; }

    void validate() const {
        if (num_classes < 2) throw ConfigError("WorldConfig: num_classes (C) must be >= 2");
        if (paraphrases < 1) throw ConfigError("WorldConfig: paraphrases (P) must be >= 1");
        if (num_entities < 1 || num_relations < 1) throw ConfigError("WorldConfig: need at least one entity and relation");
        if (feature_dim < num_entities + num_relations) {
            throw ConfigError("WorldConfig: feature_dim (d) must be >= num_entities + num_relations (E+R)");
        }
        if (!(noise_scale >= 0.0)) throw ConfigError("WorldConfig: noise_scale must be >= 0");
        if (records_per_fact < 1) throw ConfigError("WorldConfig: records_per_fact must be >= 1");
        if (test_facts < 1 || test_facts + 2 > num_facts()) {
            throw ConfigError("WorldConfig: test_facts must leave at least two training facts");
        }
    }
};

struct EditRecord {
    std::size_t fact_id = 0;
    Vector x_e;
    ClassIndex y_e = 0;
    ClassIndex y_true = 0;                     // label before the edit
    std::vector<LabeledExample> neighborhood;  // (x_e, y_e) first
    Vector x_loc;
    ClassIndex y_loc = 0;
    std::size_t loc_fact_id = 0;

    bool operator==(const EditRecord&) const = default;

    [[nodiscard]] LabeledExample edit_pair() const { return {x_e, y_e}; }
};

struct FactExample {
    std::size_t fact_id = 0;
    LabeledExample example;

    bool operator==(const FactExample&) const = default;
};

struct EditDataset {
    WorldConfig config;
    std::vector<ClassIndex> truth;  // ground-truth class per fact
    std::vector<FactExample> pretrain;
    std::vector<EditRecord> train;
    std::vector<EditRecord> test;

    bool operator==(const EditDataset&) const = default;

    [[nodiscard]] std::vector<LabeledExample> pretrain_examples() const {
        std::vector<LabeledExample> out;
        for (const auto& p : pretrain) out.push_back(p.example);
        return out;
    }
};

inline Vector encode_fact(const WorldConfig& c, std::size_t fact_id, Rng& rng) {
    Vector x(c.feature_dim);
    x[fact_id / c.num_relations] = 1.0;
    x[c.num_entities + fact_id % c.num_relations] = 1.0;
    for (double& v : x) v += c.noise_scale * rng.normal();
    return x;
}

inline EditDataset generate_world(const WorldConfig& config) {
    config.validate();
    const std::size_t F = config.num_facts();
    Rng rng(config.seed);
    EditDataset ds;
    ds.config = config;
    for (std::size_t f = 0; f < F; ++f) ds.truth.push_back(rng.uniform_index(config.num_classes));

    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t i = 0; i < config.pretrain_per_fact; ++i)
            ds.pretrain.push_back({f, {encode_fact(config, f, rng), ds.truth[f]}});

    // Shuffled fact ids; the first test_facts go to the test split.
    std::vector<std::size_t> facts(F);
    for (std::size_t f = 0; f < F; ++f) facts[f] = f;
    for (std::size_t i = F; i > 1; --i) std::swap(facts[i - 1], facts[rng.uniform_index(i)]);
    const std::vector<std::size_t> test_facts(facts.begin(), facts.begin() + static_cast<std::ptrdiff_t>(config.test_facts));
    const std::vector<std::size_t> train_facts(facts.begin() + static_cast<std::ptrdiff_t>(config.test_facts), facts.end());

    // Test locality inputs come from training facts, which are never edited at
    // test time; training locality inputs come from any other fact.
    auto make_record = [&](std::size_t fact, std::span<const std::size_t> loc_pool) {
        EditRecord r;
        r.fact_id = fact;
        r.y_true = ds.truth[fact];
        r.y_e = rng.uniform_index(config.num_classes - 1);
        if (r.y_e >= r.y_true) ++r.y_e;
        r.x_e = encode_fact(config, fact, rng);
        r.neighborhood.push_back({r.x_e, r.y_e});
        for (std::size_t p = 1; p < config.paraphrases; ++p) r.neighborhood.push_back({encode_fact(config, fact, rng), r.y_e});
        std::size_t loc = fact;
        while (loc == fact) loc = loc_pool[rng.uniform_index(loc_pool.size())];
        r.loc_fact_id = loc;
        r.x_loc = encode_fact(config, loc, rng);
        r.y_loc = ds.truth[loc];
        return r;
    };
    std::vector<std::size_t> all_facts(F);
    for (std::size_t f = 0; f < F; ++f) all_facts[f] = f;
    // Copy-major order: any window of up to |split| consecutive records has
    // distinct facts, so batched edits never contradict each other.
    for (std::size_t copy = 0; copy < config.records_per_fact; ++copy) {
        for (std::size_t f : train_facts) ds.train.push_back(make_record(f, all_facts));
        for (std::size_t f : test_facts) ds.test.push_back(make_record(f, train_facts));
    }
    return ds;
}

struct DatasetSummary {
    std::size_t pretrain = 0;
    std::size_t train = 0;
    std::size_t test = 0;
    std::size_t train_facts = 0;
    std::size_t test_facts = 0;
    std::vector<std::size_t> edit_label_histogram;  // y_e over train + test

    bool operator==(const DatasetSummary&) const = default;
};

inline DatasetSummary summarize(const EditDataset& ds) {
    DatasetSummary s;
    s.pretrain = ds.pretrain.size();
    s.train = ds.train.size();
    s.test = ds.test.size();
    s.edit_label_histogram.assign(ds.config.num_classes, 0);
    std::vector<bool> train_seen(ds.config.num_facts(), false), test_seen(ds.config.num_facts(), false);
    for (const auto& r : ds.train) {
        ++s.edit_label_histogram.at(r.y_e);
        train_seen.at(r.fact_id) = true;
    }
    for (const auto& r : ds.test) {
        ++s.edit_label_histogram.at(r.y_e);
        test_seen.at(r.fact_id) = true;
    }
    s.train_facts = static_cast<std::size_t>(std::count(train_seen.begin(), train_seen.end(), true));
    s.test_facts = static_cast<std::size_t>(std::count(test_seen.begin(), test_seen.end(), true));
    return s;
}

inline io::json summary_to_json(const DatasetSummary& s) {
    return {{"pretrain", s.pretrain},     {"train", s.train},           {"test", s.test},
            {"train_facts", s.train_facts}, {"test_facts", s.test_facts}, {"edit_label_histogram", s.edit_label_histogram}};
}

// Splits records into (train, validation) by fact: the facts of the last
// `validation_facts` distinct fact ids in first-appearance order are held out.
inline std::pair<std::vector<EditRecord>, std::vector<EditRecord>> split_by_fact(std::span<const EditRecord> records,
                                                                                 std::size_t validation_facts) {
    std::vector<std::size_t> order;
    for (const auto& r : records)
        if (std::find(order.begin(), order.end(), r.fact_id) == order.end()) order.push_back(r.fact_id);
    if (validation_facts >= order.size()) throw ConfigError("split_by_fact: not enough facts for a validation split");
    const std::vector<std::size_t> held(order.end() - static_cast<std::ptrdiff_t>(validation_facts), order.end());
    std::pair<std::vector<EditRecord>, std::vector<EditRecord>> out;
    for (const auto& r : records) {
        const bool is_val = std::find(held.begin(), held.end(), r.fact_id) != held.end();
        (is_val ? out.second : out.first).push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset file: JSON lines. Line 1 is the header
//   {"format": "mend-editbench", "version": 1, "config": {...}, "truth": [...]}
// and every further line is one example:
//   {"split": "pretrain", "fact_id", "x", "y"}
//   {"split": "train"|"test", "fact_id", "x", "y", "y_true",
//    "neighborhood": [{"x", "y"}, ...], "x_loc", "y_loc", "loc_fact_id"}

inline constexpr int kDatasetFormatVersion = 1;

inline io::json world_config_to_json(const WorldConfig& c) {
    return {{"num_entities", c.num_entities},   {"num_relations", c.num_relations},
            {"num_classes", c.num_classes},     {"feature_dim", c.feature_dim},
            {"paraphrases", c.paraphrases},     {"noise_scale", c.noise_scale},
            {"seed", c.seed},                   {"pretrain_per_fact", c.pretrain_per_fact},
            {"records_per_fact", c.records_per_fact}, {"test_facts", c.test_facts}};
}

inline WorldConfig world_config_from_json(const io::json& j) {
    WorldConfig c;
    c.num_entities = j.at("num_entities").get<std::size_t>();
    c.num_relations = j.at("num_relations").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.feature_dim = j.at("feature_dim").get<std::size_t>();
    c.paraphrases = j.at("paraphrases").get<std::size_t>();
    c.noise_scale = j.at("noise_scale").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.pretrain_per_fact = j.at("pretrain_per_fact").get<std::size_t>();
    c.records_per_fact = j.at("records_per_fact").get<std::size_t>();
    c.test_facts = j.at("test_facts").get<std::size_t>();
    return c;
}

inline io::json record_to_json(const EditRecord& r, const char* split) {
    io::json hood = io::json::array();
    for (const auto& n : r.neighborhood) hood.push_back({{"x", io::to_json(n.x)}, {"y", n.y}});
    return {{"split", split},          {"fact_id", r.fact_id}, {"x", io::to_json(r.x_e)},
            {"y", r.y_e},              {"y_true", r.y_true},   {"neighborhood", hood},
            {"x_loc", io::to_json(r.x_loc)}, {"y_loc", r.y_loc}, {"loc_fact_id", r.loc_fact_id}};
}

inline EditRecord record_from_json(const io::json& j) {
    EditRecord r;
    r.fact_id = j.at("fact_id").get<std::size_t>();
    r.x_e = io::vector_from_json(j.at("x"));
    r.y_e = j.at("y").get<ClassIndex>();
    r.y_true = j.at("y_true").get<ClassIndex>();
    for (const auto& n : j.at("neighborhood")) r.neighborhood.push_back({io::vector_from_json(n.at("x")), n.at("y").get<ClassIndex>()});
    r.x_loc = io::vector_from_json(j.at("x_loc"));
    r.y_loc = j.at("y_loc").get<ClassIndex>();
    r.loc_fact_id = j.at("loc_fact_id").get<std::size_t>();
    return r;
}

inline std::string dataset_to_jsonl(const EditDataset& ds) {
    std::string out;
    out += io::json{{"format", "mend-editbench"},
                    {"version", kDatasetFormatVersion},
                    {"config", world_config_to_json(ds.config)},
                    {"truth", ds.truth}}
               .dump();
    out += '\n';
    for (const auto& p : ds.pretrain) {
        out += io::json{{"split", "pretrain"}, {"fact_id", p.fact_id}, {"x", io::to_json(p.example.x)}, {"y", p.example.y}}.dump();
        out += '\n';
    }
    for (const auto& r : ds.train) out += record_to_json(r, "train").dump() + '\n';
    for (const auto& r : ds.test) out += record_to_json(r, "test").dump() + '\n';
    return out;
}

inline EditDataset dataset_from_jsonl(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    EditDataset ds;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = "dataset line " + std::to_string(line_no);
        io::json j;
        try {
            j = io::json::parse(line);
        } catch (const io::json::exception& e) {
            throw DataError(where + ": " + e.what());
        }
        try {
            if (!have_header) {
                io::check_envelope(j, "mend-editbench", kDatasetFormatVersion);
                ds.config = world_config_from_json(j.at("config"));
                ds.truth = j.at("truth").get<std::vector<ClassIndex>>();
                have_header = true;
                continue;
            }
            const auto split = j.at("split").get<std::string>();
            if (split == "pretrain") {
                ds.pretrain.push_back({j.at("fact_id").get<std::size_t>(), {io::vector_from_json(j.at("x")), j.at("y").get<ClassIndex>()}});
            } else if (split == "train") {
                ds.train.push_back(record_from_json(j));
            } else if (split == "test") {
                ds.test.push_back(record_from_json(j));
            } else {
                throw DataError("unknown split '" + split + "'");
            }
        } catch (const io::json::exception& e) {
            throw DataError(where + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(where + ": " + e.what());
        }
    }
    if (!have_header) throw DataError("dataset: missing header line");
    return ds;
}

inline void save_dataset(const EditDataset& ds, const std::filesystem::path& path) {
    io::write_text(path, dataset_to_jsonl(ds));
}

inline EditDataset load_dataset(const std::filesystem::path& path) { return dataset_from_jsonl(io::read_text(path)); }

}  // namespace mend
