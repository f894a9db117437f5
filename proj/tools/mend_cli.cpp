// mend_cli: dataset generation, pre-training, editor training, editing,
// evaluation and ablations. Exit codes: 0 ok, 1 other failure, 2 config
// error, 3 data error, 4 contract violation.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mend/mend.hpp"

namespace fs = std::filesystem;
using namespace mend;

namespace {

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::string dataset;
    std::string model;
    std::string editor;
    std::string input;
    std::optional<std::string> variant;
    std::vector<std::size_t> k_edits;
    std::optional<std::size_t> steps;
    std::optional<std::size_t> parallel;
};

ExperimentConfig resolve(const Options& o) {
    ExperimentConfig c;
    if (!o.config_path.empty()) {
        const auto text = io::read_text(o.config_path);
        io::json j;
        try {
            j = io::json::parse(text);
        } catch (const io::json::exception& e) {
            throw ConfigError(o.config_path + ": " + e.what());
        }
        merge_config(c, j);
    }
    if (o.seed) c.seed = *o.seed;
    if (o.variant) c.variant = *o.variant;
    if (!o.k_edits.empty()) c.k_edits = o.k_edits;
    if (o.parallel) c.parallel = *o.parallel;
    c.apply_seed();
    c.validate();
    return c;
}

fs::path out_dir(const Options& o) {
    fs::path p = o.out_dir;
    if (p.empty()) {
        const char* env = std::getenv("MEND_OUT_DIR");
        p = env != nullptr && *env != '\0' ? env : "out";
    }
    fs::create_directories(p);
    return p;
}

void snapshot(const fs::path& dir, const std::string& command, const ExperimentConfig& c, io::json extra) {
    io::json j = config_to_json(c);
    j["command"] = command;
    j["inputs"] = std::move(extra);
    io::write_text(dir / (command + "_config.json"), j.dump(2) + "\n");
}

const std::string& require(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string("missing required flag ") + flag);
    return value;
}

// Downstream commands take the world shape from the dataset file, not the config.
void adopt_world(const EditDataset& ds, ExperimentConfig& c) {
    const auto seed = c.world.seed;
    c.world = ds.config;
    c.world.seed = seed;
}

// Likewise the layer sizes come from the loaded checkpoint.
void adopt_model(const BaseModel& m, ExperimentConfig& c) {
    c.hidden.clear();
    for (std::size_t l = 0; l + 1 < m.num_layers(); ++l) c.hidden.push_back(m.layer(l).out_dim());
    for (std::size_t id : c.editable)
        if (id >= m.num_layers()) throw ConfigError("editable layer " + std::to_string(id) + " does not exist");
}

int cmd_gen_data(const Options& o) {
    const auto c = resolve(o);
    const auto dir = out_dir(o);
    const auto ds = generate_world(c.world);
    save_dataset(ds, dir / "dataset.jsonl");
    const auto summary = summary_to_json(summarize(ds));
    io::write_text(dir / "summary.json", summary.dump(2) + "\n");
    snapshot(dir, "gen-data", c, io::json::object());
    std::cout << "wrote " << (dir / "dataset.jsonl").string() << ": " << summary.dump() << "\n";
    return 0;
}

int cmd_pretrain(const Options& o) {
    auto c = resolve(o);
    const auto ds = load_dataset(require(o.dataset, "--dataset"));
    adopt_world(ds, c);
    const auto dir = out_dir(o);
    const auto model = pretrain_base(ds, c);
    const auto data = ds.pretrain_examples();
    const double acc = accuracy(model, data);
    save_model(model, dir / "model.json");
    io::write_text(dir / "pretrain_metrics.json", io::json{{"accuracy", acc}}.dump(2) + "\n");
    snapshot(dir, "pretrain", c, {{"dataset", o.dataset}});
    std::cout << "pretrain accuracy " << format_real(acc) << "\n";
    return 0;
}

int cmd_train_editor(const Options& o) {
    auto c = resolve(o);
    if (o.steps) c.train.max_steps = *o.steps;
    const auto ds = load_dataset(require(o.dataset, "--dataset"));
    adopt_world(ds, c);
    const auto model = load_model(require(o.model, "--model"));
    adopt_model(model, c);
    const auto dir = out_dir(o);
    const auto splits = split_edit_train(ds, c);
    const std::size_t k = c.k_edits.front();
    const auto setup = make_setup(model, splits, ds, c, k);
    const auto trained = train_variant(setup, variant_by_name(c.variant));
    save_editor(trained.params, trained.normalizer, dir / "editor.json");
    io::write_text(dir / "train_log.jsonl", train_log_to_jsonl(trained.training.log));
    snapshot(dir, "train-editor", c, {{"dataset", o.dataset}, {"model", o.model}, {"k", k}});
    const auto& first = trained.training.log.front().validation;
    double best_val = first.total;
    for (const auto& e : trained.training.log) best_val = std::min(best_val, e.validation.total);
    std::cout << "steps " << trained.training.steps_run << ", best step " << trained.training.best_step
              << ", validation loss " << format_real(first.total) << " -> " << format_real(best_val) << "\n";
    return 0;
}

// Edit input file: JSON lines of {"x": [...], "y": class}; all edits are applied together.
std::vector<LabeledExample> load_edit_inputs(const fs::path& path) {
    std::istringstream in(io::read_text(path));
    std::string line;
    std::vector<LabeledExample> out;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = io::json::parse(line);
            out.push_back({io::vector_from_json(j.at("x")), j.at("y").get<ClassIndex>()});
        } catch (const io::json::exception& e) {
            throw DataError("edit input line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (out.empty()) throw DataError("edit input file has no edits");
    return out;
}

int cmd_edit(const Options& o) {
    auto c = resolve(o);
    const auto model = load_model(require(o.model, "--model"));
    adopt_model(model, c);
    const auto ck = load_editor(require(o.editor, "--editor"));
    const auto edits = load_edit_inputs(require(o.input, "--input"));
    for (const auto& e : edits) {
        if (e.x.dim() != model.input_dim()) throw DataError("edit input has the wrong dimension");
        if (e.y >= model.num_classes()) throw DataError("edit label out of range");
    }
    const auto dir = out_dir(o);
    const auto edited = apply_edit(model, ck.params, ck.normalizer, edits);
    save_model(edited, dir / "edited_model.json");
    io::json rows = io::json::array();
    for (const auto& e : edits) {
        const auto before = predict(model, e.x);
        const auto after = predict(edited, e.x);
        rows.push_back({{"target", e.y}, {"before", before}, {"after", after}});
        std::cout << "target " << e.y << ": before " << before << ", after " << after << "\n";
    }
    io::write_text(dir / "predictions.json", rows.dump(2) + "\n");
    snapshot(dir, "edit", c, {{"model", o.model}, {"editor", o.editor}, {"input", o.input}});
    return 0;
}

void print_reports(std::span<const EditReport> reports) {
    std::cout << "editor        k   ES      DD_acc   DD_kl     flip   params\n";
    for (const auto& r : reports) {
        std::printf("%-12s %3zu  %.4f  %+.4f  %.6f  %.3f  %zu\n", r.editor.c_str(), r.k, r.es, r.dd_acc, r.dd_kl,
                    r.flip_rate, r.params);
    }
}

int cmd_eval(const Options& o) {
    auto c = resolve(o);
    const auto ds = load_dataset(require(o.dataset, "--dataset"));
    adopt_world(ds, c);
    const auto model = load_model(require(o.model, "--model"));
    adopt_model(model, c);
    const auto dir = out_dir(o);
    const auto splits = split_edit_train(ds, c);
    std::optional<EditorCheckpoint> ck;
    if (!o.editor.empty()) ck = load_editor(o.editor);
    std::vector<EditReport> reports;
    // Worker count never changes results, so it stays out of the report files.
    auto snap = config_to_json(c);
    snap["eval"].erase("parallel");
    for (std::size_t k : c.k_edits) {
        if (ck) {
            reports.push_back(evaluate_editor("mend", MendEditor{&ck->params, &ck->normalizer}, model, ds.test, k,
                                              c.parallel, snap));
        }
        reports.push_back(evaluate_editor("ft", make_ft_editor(c), model, ds.test, k, c.parallel, snap));
        reports.push_back(
            evaluate_editor("ft_kl", make_ftkl_editor(c, splits.train), model, ds.test, k, c.parallel, snap));
    }
    write_reports(dir, "eval", reports);
    snapshot(dir, "eval", c, {{"dataset", o.dataset}, {"model", o.model}, {"editor", o.editor}});
    print_reports(reports);
    return 0;
}

int cmd_ablate(const Options& o) {
    auto c = resolve(o);
    if (o.steps) c.ablation_steps = *o.steps;
    const auto ds = load_dataset(require(o.dataset, "--dataset"));
    adopt_world(ds, c);
    const auto model = load_model(require(o.model, "--model"));
    adopt_model(model, c);
    const auto dir = out_dir(o);
    const auto splits = split_edit_train(ds, c);
    auto setup = make_setup(model, splits, ds, c, c.k_edits.front());
    setup.train_config.max_steps = c.ablation_steps;
    setup.train_config.patience = 0;
    const auto reports = run_ablations(setup);
    write_reports(dir, "ablation", reports);
    snapshot(dir, "ablate", c, {{"dataset", o.dataset}, {"model", o.model}});
    print_reports(reports);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gradient-decomposition model editing on a synthetic fact benchmark"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "JSON config file; flags override it");
        sub->add_option("--seed", o.seed, "run seed");
        sub->add_option("--out-dir", o.out_dir, "output directory (default $MEND_OUT_DIR or ./out)");
        sub->add_option("--parallel", o.parallel, "evaluation workers");
    };

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic edit dataset");
    common(gen);

    auto* pre = app.add_subcommand("pretrain", "pre-train the base model");
    common(pre);
    pre->add_option("--dataset", o.dataset, "dataset.jsonl");

    auto* tr = app.add_subcommand("train-editor", "meta-train an editor");
    common(tr);
    tr->add_option("--dataset", o.dataset, "dataset.jsonl");
    tr->add_option("--model", o.model, "base model checkpoint");
    tr->add_option("--variant", o.variant, "editor variant");
    tr->add_option("--k-edits", o.k_edits, "simultaneous edits per training group (first value)")->delimiter(',');
    tr->add_option("--steps", o.steps, "maximum training steps");

    auto* ed = app.add_subcommand("edit", "apply an editor to a base model");
    common(ed);
    ed->add_option("--model", o.model, "base model checkpoint");
    ed->add_option("--editor", o.editor, "editor checkpoint");
    ed->add_option("--input", o.input, "edit inputs, JSON lines of {x, y}");

    auto* ev = app.add_subcommand("eval", "evaluate MEND, FT and FT+KL on the test edits");
    common(ev);
    ev->add_option("--dataset", o.dataset, "dataset.jsonl");
    ev->add_option("--model", o.model, "base model checkpoint");
    ev->add_option("--editor", o.editor, "editor checkpoint (optional)");
    ev->add_option("--k-edits", o.k_edits, "edits per group, comma separated")->delimiter(',');

    auto* ab = app.add_subcommand("ablate", "train and evaluate every editor variant");
    common(ab);
    ab->add_option("--dataset", o.dataset, "dataset.jsonl");
    ab->add_option("--model", o.model, "base model checkpoint");
    ab->add_option("--k-edits", o.k_edits, "edits per group (first value)")->delimiter(',');
    ab->add_option("--steps", o.steps, "training steps per variant");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen_data(o);
        if (*pre) return cmd_pretrain(o);
        if (*tr) return cmd_train_editor(o);
        if (*ed) return cmd_edit(o);
        if (*ev) return cmd_eval(o);
        if (*ab) return cmd_ablate(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ContractError& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
