#pragma once
// Edit success, drawdown and the batched-edit / ablation evaluation harness.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "mend/basenet.hpp"
#include "mend/editbench.hpp"
#include "mend/errors.hpp"
#include "mend/json_io.hpp"
#include "mend/mendcore.hpp"
#include "mend/metatrain.hpp"
#include "mend/numkit.hpp"

namespace mend {

// Fraction of the neighborhood (edit pair included) predicted as its label.
inline double edit_success(const BaseModel& edited, const EditRecord& record) {
    if (record.neighborhood.empty()) throw DataError("edit_success: empty neighborhood");
    std::size_t hits = 0;
    for (const auto& n : record.neighborhood) hits += predict(edited, n.x) == n.y ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(record.neighborhood.size());
}

struct Drawdown {
    double accuracy = 0.0;  // acc(pre) - acc(post)
    double kl = 0.0;        // mean KL(pre || post)
};

inline Drawdown drawdown(const BaseModel& pre, const BaseModel& post, std::span<const LabeledExample> locality) {
    if (locality.empty()) throw DataError("drawdown: empty locality set");
    Drawdown d;
    for (const auto& ex : locality) {
        const Vector p = logits(pre, ex.x);
        const Vector q = logits(post, ex.x);
        d.accuracy += (argmax(p) == ex.y ? 1.0 : 0.0) - (argmax(q) == ex.y ? 1.0 : 0.0);
        d.kl += kl_divergence(p, q);
    }
    const double n = static_cast<double>(locality.size());
    d.accuracy /= n;
    d.kl /= n;
    return d;
}

// ---------------------------------------------------------------------------
// Editors under evaluation

struct MendEditor {
    const EditorParams* params = nullptr;
    const Normalizer* normalizer = nullptr;
};

struct FineTuneEditor {
    std::vector<std::size_t> layers;
    double lr = 0.1;
    std::size_t max_steps = 100;
};

struct FineTuneKlEditor {
    std::vector<std::size_t> layers;
    FinetuneKlConfig config;
    std::vector<Vector> loc_pool;  // locality inputs drawn from the edit train set
    std::uint64_t seed = 0;
};

using Editor = std::variant<MendEditor, FineTuneEditor, FineTuneKlEditor>;

inline std::size_t editor_parameter_count(const Editor& editor) {
    if (const auto* m = std::get_if<MendEditor>(&editor)) return m->params->parameter_count();
    return 0;
}

// Applies all edits of one group in a single model update.
inline BaseModel run_editor(const Editor& editor, const BaseModel& model, std::span<const LabeledExample> edits,
                            std::size_t group_index) {
    return std::visit(
        [&](const auto& e) -> BaseModel {
            using T = std::decay_t<decltype(e)>;
            if constexpr (std::is_same_v<T, MendEditor>) {
                return apply_edit(model, *e.params, *e.normalizer, edits);
            } else if constexpr (std::is_same_v<T, FineTuneEditor>) {
                return finetune_edit(model, edits, e.layers, e.lr, e.max_steps).model;
            } else {
                if (e.loc_pool.empty()) throw ConfigError("FT+KL editor: empty locality pool");
                Rng rng = Rng(e.seed).fork(group_index);
                auto sampler = [&]() { return e.loc_pool[rng.uniform_index(e.loc_pool.size())]; };
                return finetune_kl_edit(model, edits, e.layers, sampler, e.config).model;
            }
        },
        editor);
}

struct RecordRow {
    std::size_t index = 0;  // position in the evaluated record list
    std::size_t fact_id = 0;
    std::size_t group = 0;
    double es = 0.0;
    bool flipped = false;  // argmax on x_e equals y_e after the edit
    double loc_kl = 0.0;
    bool loc_correct_pre = false;
    bool loc_correct_post = false;

    bool operator==(const RecordRow&) const = default;
};

struct EditReport {
    std::string editor;
    std::size_t k = 1;
    std::size_t records = 0;
    double es = 0.0;
    double dd_acc = 0.0;
    double dd_kl = 0.0;
    double flip_rate = 0.0;
    std::size_t params = 0;
    double wall_time_s = 0.0;  // excluded from the deterministic report files
    std::vector<RecordRow> rows;
    io::json config = io::json::object();
};

// Evaluates floor(N/k) groups of k consecutive records. Every group starts
// from the same pre-edit model; results do not depend on `parallel`.
inline EditReport evaluate_editor(const std::string& name, const Editor& editor, const BaseModel& model,
                                  std::span<const EditRecord> records, std::size_t k, std::size_t parallel = 1,
                                  io::json config = io::json::object()) {
    if (k == 0) throw ConfigError("evaluate_editor: k must be >= 1");
    if (k > records.size()) {
        throw ConfigError("evaluate_editor: k=" + std::to_string(k) + " exceeds the " + std::to_string(records.size()) +
                          " available test records");
    }
    const auto started = std::chrono::steady_clock::now();
    const std::size_t groups = records.size() / k;
    std::vector<std::vector<RecordRow>> per_group(groups);
    std::vector<std::exception_ptr> errors(groups);

    auto run_group = [&](std::size_t g) {
        try {
            const auto group = records.subspan(g * k, k);
            std::vector<LabeledExample> edits;
            for (const auto& r : group) edits.push_back(r.edit_pair());
            const BaseModel edited = run_editor(editor, model, edits, g);
            for (std::size_t i = 0; i < k; ++i) {
                const auto& r = group[i];
                RecordRow row;
                row.index = g * k + i;
                row.fact_id = r.fact_id;
                row.group = g;
                row.es = edit_success(edited, r);
                row.flipped = predict(edited, r.x_e) == r.y_e;
                const Vector p = logits(model, r.x_loc);
                const Vector q = logits(edited, r.x_loc);
                row.loc_kl = kl_divergence(p, q);
                row.loc_correct_pre = argmax(p) == r.y_loc;
                row.loc_correct_post = argmax(q) == r.y_loc;
                per_group[g].push_back(row);
            }
        } catch (...) {
            errors[g] = std::current_exception();
        }
    };

    const std::size_t workers = std::min(std::max<std::size_t>(parallel, 1), groups);
    if (workers <= 1) {
        for (std::size_t g = 0; g < groups; ++g) run_group(g);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t g = next++; g < groups; g = next++) run_group(g);
            });
        }
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    EditReport report;
    report.editor = name;
    report.k = k;
    report.params = editor_parameter_count(editor);
    report.config = std::move(config);
    for (auto& rows : per_group) report.rows.insert(report.rows.end(), rows.begin(), rows.end());
    report.records = report.rows.size();
    const double n = static_cast<double>(report.records);
    for (const auto& row : report.rows) {
        report.es += row.es / n;
        report.dd_kl += row.loc_kl / n;
        report.dd_acc += ((row.loc_correct_pre ? 1.0 : 0.0) - (row.loc_correct_post ? 1.0 : 0.0)) / n;
        report.flip_rate += (row.flipped ? 1.0 : 0.0) / n;
    }
    report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationSetup {
    const BaseModel* model = nullptr;
    std::span<const EditRecord> train;
    std::span<const EditRecord> validation;
    std::span<const EditRecord> test;
    std::vector<std::size_t> editable;
    std::size_t rank = 4;
    double alpha_init = 1e-2;
    TrainConfig train_config;
    std::size_t k = 1;
    std::size_t parallel = 1;
    std::uint64_t seed = 0;  // editor initialization
};

inline std::vector<LabeledExample> edit_pairs(std::span<const EditRecord> records) {
    std::vector<LabeledExample> out;
    for (const auto& r : records) out.push_back(r.edit_pair());
    return out;
}

struct TrainedEditor {
    EditorParams params;
    Normalizer normalizer;
    TrainResult training;
};

inline TrainedEditor train_variant(const AblationSetup& s, const VariantConfig& variant) {
    const BaseModel& model = *s.model;
    TrainedEditor out;
    const auto groups = form_groups(model, s.editable, variant.share_params);
    out.normalizer = fit_normalizer(model, edit_pairs(s.train), groups);
    Rng rng(s.seed);
    const EditorParams init = init_editor(model, s.editable, s.rank, variant, s.alpha_init, rng);
    out.training = train_mend(model, init, out.normalizer, s.train, s.validation, s.train_config);
    out.params = out.training.params;
    return out;
}

// Trains and evaluates every named variant under identical data, seeds and
// step budget; one report per variant, named after it.
inline std::vector<EditReport> run_ablations(const AblationSetup& s,
                                             std::span<const std::string_view> variants = kVariantNames) {
    std::vector<EditReport> reports;
    for (std::string_view name : variants) {
        const auto started = std::chrono::steady_clock::now();
        const TrainedEditor trained = train_variant(s, variant_by_name(name));
        EditReport r = evaluate_editor(std::string(name), MendEditor{&trained.params, &trained.normalizer}, *s.model,
                                       s.test, s.k, s.parallel,
                                       {{"variant", variant_to_json(trained.params.variant)},
                                        {"steps_run", trained.training.steps_run},
                                        {"best_step", trained.training.best_step}});
        r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        reports.push_back(std::move(r));
    }
    return reports;
}

// ---------------------------------------------------------------------------
// Report files
//
// CSV (schema "mend-report-csv" v1):
//   # mend-report-csv v1
//   editor,k,records,ES,DD_acc,DD_kl,flip_rate,params
// JSON mirror: {"format": "mend-report", "version": 1, "reports": [{..., "config", "rows": [...]}]}
// Timing sidecar CSV: editor,k,wall_time_s. Wall time is kept out of the two
// report files so identical runs produce identical bytes.

inline std::string format_real(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

inline std::string reports_to_csv(std::span<const EditReport> reports) {
    std::string out = "# mend-report-csv v1\neditor,k,records,ES,DD_acc,DD_kl,flip_rate,params\n";
    for (const auto& r : reports) {
        out += r.editor + "," + std::to_string(r.k) + "," + std::to_string(r.records) + "," + format_real(r.es) + "," +
               format_real(r.dd_acc) + "," + format_real(r.dd_kl) + "," + format_real(r.flip_rate) + "," +
               std::to_string(r.params) + "\n";
    }
    return out;
}

inline std::string timings_to_csv(std::span<const EditReport> reports) {
    std::string out = "editor,k,wall_time_s\n";
    for (const auto& r : reports) out += r.editor + "," + std::to_string(r.k) + "," + format_real(r.wall_time_s) + "\n";
    return out;
}

inline io::json report_to_json(const EditReport& r) {
    io::json rows = io::json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"index", row.index},
                        {"fact_id", row.fact_id},
                        {"group", row.group},
                        {"es", row.es},
                        {"flipped", row.flipped},
                        {"loc_kl", row.loc_kl},
                        {"loc_correct_pre", row.loc_correct_pre},
                        {"loc_correct_post", row.loc_correct_post}});
    }
    return {{"editor", r.editor}, {"k", r.k},           {"records", r.records}, {"ES", r.es},
            {"DD_acc", r.dd_acc}, {"DD_kl", r.dd_kl},   {"flip_rate", r.flip_rate},
            {"params", r.params}, {"config", r.config}, {"rows", rows}};
}

inline std::string reports_to_json(std::span<const EditReport> reports) {
    io::json arr = io::json::array();
    for (const auto& r : reports) arr.push_back(report_to_json(r));
    return io::json{{"format", "mend-report"}, {"version", 1}, {"reports", arr}}.dump(1) + "\n";
}

struct ReportPaths {
    std::filesystem::path csv, json, timings;
};

inline ReportPaths write_reports(const std::filesystem::path& dir, const std::string& stem,
                                 std::span<const EditReport> reports) {
    ReportPaths p{dir / (stem + ".csv"), dir / (stem + ".json"), dir / (stem + "_timings.csv")};
    io::write_text(p.csv, reports_to_csv(reports));
    io::write_text(p.json, reports_to_json(reports));
    io::write_text(p.timings, timings_to_csv(reports));
    return p;
}

}  // namespace mend
