// Command-line front end. Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mpcad/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mpcad;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<double> alpha;
    std::optional<std::size_t> tap_score_layer;
    std::vector<std::string> sets;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
    cmd->add_option("--config", c.config, "key = value configuration file");
    cmd->add_option("--seed", c.seed, "random seed");
    cmd->add_option("--alpha", c.alpha, "fusion weight of the visual branch, in [0, 1]");
    cmd->add_option("--tap-score-layer", c.tap_score_layer, "backbone layer whose output is scored");
    cmd->add_option("--set", c.sets, "extra KEY=VALUE setting (repeatable)");
    auto* o = cmd->add_option("--out", c.out, "output path");
    if (out_required) o->required();
}

RunConfig build_config(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
    for (const auto& kv : c.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
        apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (c.seed) cfg.seed = *c.seed;
    if (c.alpha) {
        if (*c.alpha < 0.0 || *c.alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
        cfg.train.alpha_fusion = *c.alpha;
    }
    if (c.tap_score_layer) cfg.backbone.tap_layer_score = *c.tap_score_layer;
    return cfg;
}

void progress(const std::string& msg) { std::cerr << msg << std::endl; }

std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

// ---------------------------------------------------------------------------

int gen_synthetic_cmd(const Common& c, const std::string& format) {
    RunConfig cfg = build_config(c);
    cfg.mode = DataMode::synthetic;
    cfg.validate();
    const fs::path root = c.out;
    fs::create_directories(root);
    std::optional<Backbone> backbone;
    if (format == "features") backbone.emplace(cfg.backbone);
    RunConfig out_cfg = cfg;
    out_cfg.mode = format == "features" ? DataMode::features : DataMode::images;
    out_cfg.out_dir.clear();
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        const SyntheticTask task = gen_synthetic(cfg.synthetic_spec(i), cfg.seed);
        const fs::path dir = root / cfg.tasks[i].name;
        if (backbone)
            save_task_features(task, *backbone, dir);
        else
            save_task_images(task, dir);
        out_cfg.tasks[i].path = cfg.tasks[i].name;
        out_cfg.tasks[i].texture.reset();
        std::cout << cfg.tasks[i].name << "\t" << dir.string() << "\n";
    }
    std::ofstream f(root / "tasks.cfg");
    write_run_config(f, out_cfg);
    if (!f) throw DataError("cannot write " + (root / "tasks.cfg").string());
    return 0;
}

int adapt_cmd(const Common& c, const std::string& task, const std::string& bank_in, const std::string& log_path) {
    const RunConfig cfg = build_config(c);
    cfg.validate();
    std::size_t index = cfg.tasks.size();
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i)
        if (cfg.tasks[i].name == task) index = i;
    if (index == cfg.tasks.size()) throw ConfigError("task '" + task + "' is not listed in the configuration");

    MemoryBank bank = bank_in.empty() ? MemoryBank{} : load_bank(bank_in);
    Backbone backbone(cfg.backbone);
    const TaskData data = load_task(cfg, index);
    AdaptReport report;
    const TrainConfig train = cfg.effective_train();
    bank = cfg.mode == DataMode::features ? adapt_task_features(data.train_features, bank, train, backbone, &report)
                                          : adapt_task(data.train_images, bank, train, backbone, &report);
    save_bank(bank, c.out);
    if (log_path.empty()) {
        write_training_log(std::cout, report.epochs);
    } else {
        std::ofstream log(log_path);
        write_training_log(log, report.epochs);
        if (!log) throw DataError("cannot write " + log_path);
    }
    return 0;
}

int infer_cmd(const Common& c, const std::string& bank_path, const std::vector<std::string>& inputs,
              const std::string& task) {
    const RunConfig cfg = build_config(c);
    cfg.backbone.validate();
    const MemoryBank bank = load_bank(bank_path);
    Backbone backbone(cfg.backbone);
    for (const auto& t : bank.tasks()) backbone.register_words(t.text_prompt.class_name);
    const Detector det(bank, backbone, cfg.train.alpha_fusion);
    std::optional<std::size_t> forced;
    if (!task.empty()) {
        forced = bank.find(task);
        if (!forced) throw DataError("task '" + task + "' is not in the memory bank");
    }
    const fs::path out = c.out;
    fs::create_directories(out);

    std::cout << "item\ttask\tsimilarity\timage_score\n";
    auto emit = [&](const std::string& name, const InferenceResult& r) {
        write_score_pgm(r.map, out / (name + ".pgm"));
        write_score_raw(r.map, out / (name + ".f32"));
        std::cout << name << "\t" << bank.at(r.task).task_name << "\t" << format_score(r.task_similarity) << "\t"
                  << format_score(r.image_score) << "\n";
    };
    for (const auto& in : inputs) {
        const fs::path p = in;
        if (p.extension() == ".cadf") {
            const FeatureFile f = ingest_features(p);
            for (std::size_t i = 0; i < f.grids.size(); ++i) {
                char idx[24];
                std::snprintf(idx, sizeof idx, "_%03zu", i);
                emit(p.stem().string() + idx, det.infer(f.grids[i], forced));
            }
        } else {
            emit(p.stem().string(), det.infer(read_pnm(p), forced));
        }
    }
    return 0;
}

int run_sequence_cmd(const Common& c) {
    RunConfig cfg = build_config(c);
    if (!c.out.empty()) cfg.out_dir = c.out;
    if (cfg.out_dir.empty()) throw ConfigError("run-sequence needs --out or an 'out' setting");
    RunHooks hooks;
    hooks.progress = progress;
    const RunResult r = run_sequence(cfg, hooks);
    write_run_outputs(r, cfg, cfg.out_dir);
    write_results_table(std::cout, r.final_rows, r.fm_image_auroc, r.fm_pixel_aupr);
    std::cout << "task_id_accuracy\t" << format_score(r.task_id_accuracy) << "\n";
    return 0;
}

int eval_cmd(const Common& c, const std::string& bank_path) {
    const RunConfig cfg = build_config(c);
    const RunResult r = evaluate_bank(cfg, load_bank(bank_path));
    if (!c.out.empty()) {
        const fs::path out = c.out;
        fs::create_directories(out);
        std::ofstream res(out / "results.tsv"), abl(out / "ablation.tsv"), meta(out / "metadata.json");
        write_results_table(res, r.final_rows, std::nullopt, std::nullopt);
        write_ablation(abl, r.ablation);
        meta << run_metadata_json(r, cfg);
        if (!res || !abl || !meta) throw DataError("cannot write evaluation outputs to " + out.string());
    }
    write_results_table(std::cout, r.final_rows, std::nullopt, std::nullopt);
    std::cout << "task_id_accuracy\t" << format_score(r.task_id_accuracy) << "\n";
    return 0;
}

int export_bank_cmd(const Common& c, const std::string& bank_path) {
    const std::string json = bank_to_json(load_bank(bank_path));
    if (c.out.empty()) {
        std::cout << json;
    } else {
        std::ofstream f(c.out);
        f << json;
        if (!f) throw DataError("cannot write " + c.out);
    }
    return 0;
}

int import_features_cmd(const Common& c, const std::string& path) {
    const FeatureFile f = ingest_features(path);
    nlohmann::ordered_json j;
    j["path"] = path;
    j["n_images"] = f.grids.size();
    j["grid_h"] = f.grids.front().grid_h();
    j["grid_w"] = f.grids.front().grid_w();
    j["channels"] = f.grids.front().channels();
    j["has_regions"] = !f.region_masks.empty();
    const std::string text = j.dump(2) + "\n";
    if (c.out.empty()) {
        std::cout << text;
    } else {
        std::ofstream out(c.out);
        out << text;
        if (!out) throw DataError("cannot write " + c.out);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual anomaly detection with multimodal prompt memory"};
    app.require_subcommand(1);

    Common gen, ad, inf, run, ev, exp, imp;
    std::string format = "images", task, bank_in, log_path, bank, feature_path;
    std::vector<std::string> inputs;

    auto* c_gen = app.add_subcommand("gen-synthetic", "write synthetic task directories and a matching config");
    add_common(c_gen, gen, true);
    c_gen->add_option("--format", format, "images or features")->check(CLI::IsMember({"images", "features"}));

    auto* c_adapt = app.add_subcommand("adapt", "adapt one configured task and append it to a bank");
    add_common(c_adapt, ad, true);
    c_adapt->add_option("--task", task, "task name from the configuration")->required();
    c_adapt->add_option("--bank", bank_in, "existing bank to extend");
    c_adapt->add_option("--log", log_path, "training log path (default: stdout)");

    auto* c_infer = app.add_subcommand("infer", "score images (.ppm/.pgm) or feature files (.cadf)");
    add_common(c_infer, inf, true);
    c_infer->add_option("--bank", bank, "memory bank")->required();
    c_infer->add_option("--task", task, "skip task identification and use this task");
    c_infer->add_option("inputs", inputs, "input files")->required();

    auto* c_run = app.add_subcommand("run-sequence", "adapt all tasks in order with continual evaluation");
    add_common(c_run, run, false);

    auto* c_eval = app.add_subcommand("eval", "evaluate a stored bank on the configured tasks");
    add_common(c_eval, ev, false);
    c_eval->add_option("--bank", bank, "memory bank")->required();

    auto* c_export = app.add_subcommand("export-bank", "dump a bank as JSON");
    add_common(c_export, exp, false);
    c_export->add_option("--bank", bank, "memory bank")->required();

    auto* c_import = app.add_subcommand("import-features", "validate a feature file and summarize it");
    add_common(c_import, imp, false);
    c_import->add_option("file", feature_path, "feature file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (c_gen->parsed()) return gen_synthetic_cmd(gen, format);
        if (c_adapt->parsed()) return adapt_cmd(ad, task, bank_in, log_path);
        if (c_infer->parsed()) return infer_cmd(inf, bank, inputs, task);
        if (c_run->parsed()) return run_sequence_cmd(run);
        if (c_eval->parsed()) return eval_cmd(ev, bank);
        if (c_export->parsed()) return export_bank_cmd(exp, bank);
        if (c_import->parsed()) return import_features_cmd(imp, feature_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    }
    return 0;
}
