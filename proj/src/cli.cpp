#include "fmalloc/cli.hpp"

#include "fmalloc/cl_engine.hpp"
#include "fmalloc/config.hpp"
#include "fmalloc/metrics.hpp"
#include "fmalloc/rng.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>

namespace fmalloc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    bool force = false;
    bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Run configuration JSON")->required();
    cmd->add_option("--override", args.overrides,
                    "Dotted-key override applied after the file parses (key=value)");
    cmd->add_flag("--force", args.force, "Re-execute even when outputs already exist");
    cmd->add_flag("--quiet", args.quiet, "Suppress progress output");
}

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = load_run_config(args.config_path, args.overrides);
    cfg.run_dir = resolve_run_dir(cfg.run_dir, cfg.name);
    return cfg;
}

int run_pretrain(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    RunPaths paths = RunPaths::create(cfg.run_dir);
    std::string ckpt = (fs::path(paths.checkpoints) / "pretrained.ckpt").string();
    if (fs::exists(ckpt) && !args.force) {
        std::cout << "pretrain: " << ckpt << " exists; no-op (use --force to redo)\n";
        return 0;
    }
    if (args.force && fs::exists(ckpt)) fs::remove(ckpt);
    Benchmark bench = build_benchmark(cfg);
    Seq2SeqModel model =
        pretrain_general(cfg, bench, (fs::path(paths.logs) / "pretrain.log").string(), !args.quiet);
    model.save_checkpoint(ckpt, bench.vocab_symbols);
    std::cout << "pretrain: wrote " << ckpt << "\n";
    return 0;
}

int run_prune(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    RunPaths paths = RunPaths::create(cfg.run_dir);
    std::string archive_path = (fs::path(paths.masks) / "archive.json").string();
    if (fs::exists(archive_path) && !args.force) {
        std::cout << "prune: " << archive_path << " exists; no-op (use --force to redo)\n";
        return 0;
    }
    Benchmark bench = build_benchmark(cfg);

    std::string ckpt = (fs::path(paths.checkpoints) / "pretrained.ckpt").string();
    Seq2SeqModel model = [&]() {
        if (!cfg.init_checkpoint.empty()) return Seq2SeqModel::load_checkpoint(cfg.init_checkpoint);
        if (fs::exists(ckpt)) return Seq2SeqModel::load_checkpoint(ckpt);
        Seq2SeqModel m = pretrain_general(cfg, bench,
                                          (fs::path(paths.logs) / "pretrain.log").string(), !args.quiet);
        m.save_checkpoint(ckpt, bench.vocab_symbols);
        return m;
    }();

    ImportanceScores importance = estimate_importance(model, bench.external, cfg.importance_batches,
                                                      cfg.batch_size, cfg.seeds.data, cfg.n_threads);
    save_importance_json(importance, (fs::path(paths.masks) / "importance.json").string());
    BinaryMaskSet general_mask = binarize_importance(importance, cfg.sparsity);

    MaskArchive archive;
    json task_meta;
    task_meta["sparsity"] = cfg.sparsity;
    task_meta["seed"] = cfg.seeds.data;
    task_meta["n_batches"] = cfg.importance_batches;
    archive.archive(0, cfg.general.spec.name, general_mask, task_meta);
    json meta;
    meta["lambda"] = cfg.lambda;
    meta["tau_max"] = cfg.tau_max;
    meta["alpha"] = cfg.alpha;
    meta["sparsity"] = cfg.sparsity;
    meta["seeds"] = {{"init", cfg.seeds.init}, {"data", cfg.seeds.data}, {"order", cfg.seeds.order}};
    meta["importance_batches"] = cfg.importance_batches;
    archive.save_json(archive_path, meta);

    model.save_checkpoint(paths.stage_checkpoint(0), bench.vocab_symbols);
    std::cout << "prune: wrote " << archive_path << " (capacity usage "
              << capacity_usage({general_mask}) << ")\n";
    return 0;
}

int run_cl_run(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    RunPaths paths = RunPaths::create(cfg.run_dir);
    std::string summary = (fs::path(paths.metrics) / "summary.json").string();
    if (fs::exists(summary) && !args.force) {
        std::cout << "cl-run: " << summary << " exists; no-op (use --force to redo)\n";
        return 0;
    }
    RunResult result = run_sequence(cfg, !args.quiet);
    std::cout << "cl-run: finished " << result.run_dir << "\n";
    return 0;
}

int run_evaluate(const CommonArgs& args, int stage, int task) {
    RunConfig cfg = load_config(args);
    RunPaths paths = RunPaths::create(cfg.run_dir);
    Benchmark bench = build_benchmark(cfg);
    const int n_tasks = 1 + static_cast<int>(bench.domains.size());

    if (stage < 0) {
        for (int t = n_tasks - 1; t >= 0; --t) {
            if (fs::exists(paths.stage_checkpoint(t))) {
                stage = t;
                break;
            }
        }
    }
    if (stage < 0) throw StateError("evaluate: no stage checkpoints in " + paths.checkpoints);
    Seq2SeqModel model = Seq2SeqModel::load_checkpoint(paths.stage_checkpoint(stage));

    MaskArchive archive;
    bool have_archive = fs::exists(fs::path(paths.masks) / "archive.json");
    if (have_archive) {
        archive = MaskArchive::load_json((fs::path(paths.masks) / "archive.json").string());
    }

    json output = json::array();
    for (int i = 0; i <= stage && i < n_tasks; ++i) {
        if (task >= 0 && i != task) continue;
        MaskSet masks = have_archive && archive.has(i) ? masks_from_binary(archive.mask(i))
                                                       : ones_masks(model.config());
        const auto& data = i == 0 ? bench.general.test : bench.domains[static_cast<size_t>(i - 1)].test;
        EvalResult ev = evaluate_bleu(model, data, bench.vocab, masks, cfg.beam_size);
        json row;
        row["task"] = i;
        row["name"] = i == 0 ? bench.general.name : bench.domains[static_cast<size_t>(i - 1)].name;
        row["stage"] = stage;
        row["bleu"] = ev.bleu;
        output.push_back(row);
    }
    std::cout << output.dump(2) << "\n";
    return 0;
}

std::vector<CapacityLogRow> load_capacity_csv(const std::string& path) {
    std::vector<CapacityLogRow> rows;
    std::ifstream in(path);
    if (!in) return rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        CapacityLogRow row;
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        row.stage = std::stoi(cell);
        std::getline(ss, cell, ',');
        row.global_step = std::stol(cell);
        std::getline(ss, cell, ',');
        row.epoch = std::stoi(cell);
        std::getline(ss, cell, ',');
        row.tau = std::stod(cell);
        std::getline(ss, cell, ',');
        row.train_loss = std::stod(cell);
        std::getline(ss, cell, ',');
        row.capacity = std::stod(cell);
        rows.push_back(row);
    }
    return rows;
}

int run_report(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    RunPaths paths = RunPaths::create(cfg.run_dir);

    RunReport report;
    report.method = method_to_string(cfg.method);
    report.task_names.push_back(cfg.general.spec.name);
    for (const auto& d : cfg.domains) report.task_names.push_back(d.spec.name);
    const int n_tasks = static_cast<int>(report.task_names.size());

    std::string matrix_path = (fs::path(paths.metrics) / "bleu_matrix.csv").string();
    if (fs::exists(matrix_path)) {
        std::vector<std::string> names;
        report.bleu = load_bleu_matrix_csv(matrix_path, &names);
        if (!names.empty()) report.task_names = names;
    } else {
        report.bleu = BleuMatrix(n_tasks);
    }
    report.partial = !report.bleu.complete();

    std::string archive_path = (fs::path(paths.masks) / "archive.json").string();
    if (fs::exists(archive_path)) {
        MaskArchive archive = MaskArchive::load_json(archive_path);
        for (int t = 0; t < archive.n_archived(); ++t) report.archived_masks.push_back(archive.mask(t));
    }
    report.capacity_log = load_capacity_csv((fs::path(paths.metrics) / "capacity.csv").string());

    report.upper_bounds.assign(report.task_names.size(), std::numeric_limits<double>::quiet_NaN());
    std::string ub_path = (fs::path(paths.metrics) / "upper_bounds.json").string();
    if (fs::exists(ub_path)) {
        std::ifstream in(ub_path);
        json ub;
        in >> ub;
        for (size_t i = 0; i < report.task_names.size(); ++i) {
            if (ub.contains(report.task_names[i])) {
                report.upper_bounds[i] = ub.at(report.task_names[i]).get<double>();
            }
        }
    }

    emit_report(report, paths.metrics);
    std::cout << "report: wrote " << (fs::path(paths.metrics) / "summary.json").string()
              << (report.partial ? " (partial)" : "") << "\n";
    return 0;
}

struct SweepRow {
    std::string label;
    std::string run_dir;
    bool ok = false;
    double avg_bleu = std::numeric_limits<double>::quiet_NaN();
    double final_fr = std::numeric_limits<double>::quiet_NaN();
    std::string error;
};

SweepRow execute_run(RunConfig cfg, const std::string& label, bool quiet) {
    SweepRow row;
    row.label = label;
    row.run_dir = cfg.run_dir;
    try {
        RunResult result = run_sequence(cfg, !quiet);
        const int n = result.bleu.n_tasks();
        double sum = 0.0;
        for (int i = 0; i < n; ++i) sum += result.bleu.get(i, n - 1);
        row.avg_bleu = sum / n;
        auto fr = forgetting_ratio(result.bleu, n - 1);
        if (fr) row.final_fr = *fr;
        row.ok = true;
    } catch (const std::exception& e) {
        row.error = e.what();
    }
    return row;
}

int run_sweep(const CommonArgs& args, const std::string& axis, const std::string& values_csv,
              int orders, uint64_t order_seed, int jobs) {
    RunConfig base = load_config(args);
    if ((axis.empty() || values_csv.empty()) && orders <= 0) {
        throw ConfigError("sweep: need either --axis with --values, or --orders");
    }
    if (!axis.empty() && orders > 0) {
        throw ConfigError("sweep: --axis and --orders are mutually exclusive");
    }

    // Share one pretrained model across all runs.
    RunPaths base_paths = RunPaths::create(base.run_dir);
    std::string shared_ckpt = (fs::path(base_paths.checkpoints) / "pretrained.ckpt").string();
    if (!fs::exists(shared_ckpt)) {
        Benchmark bench = build_benchmark(base);
        Seq2SeqModel model = pretrain_general(
            base, bench, (fs::path(base_paths.logs) / "pretrain.log").string(), !args.quiet);
        model.save_checkpoint(shared_ckpt, bench.vocab_symbols);
    }

    std::vector<RunConfig> run_cfgs;
    std::vector<std::string> labels;
    if (!axis.empty()) {
        if (axis != "tau_max" && axis != "sparsity") {
            throw ConfigError("sweep: axis must be tau_max or sparsity");
        }
        std::stringstream ss(values_csv);
        std::string piece;
        while (std::getline(ss, piece, ',')) {
            if (piece.empty()) continue;
            double v = std::stod(piece);
            RunConfig cfg = base;
            if (axis == "tau_max") {
                cfg.tau_max = v;
            } else {
                cfg.sparsity = v;
            }
            cfg.init_checkpoint = shared_ckpt;
            cfg.run_dir = base.run_dir + "_" + axis + "_" + piece;
            run_cfgs.push_back(cfg);
            labels.push_back(axis + "=" + piece);
        }
        if (run_cfgs.empty()) throw ConfigError("sweep: empty --values");
    } else {
        std::vector<std::string> names;
        for (const auto& d : base.domains) names.push_back(d.spec.name);
        auto permutations = generate_task_orders(names, orders, order_seed);
        for (int k = 0; k < orders; ++k) {
            RunConfig cfg = base;
            cfg.init_checkpoint = shared_ckpt;
            cfg.seeds.order = hash_combine(order_seed, static_cast<uint64_t>(k));
            // Reorder domains to the k-th permutation.
            std::vector<DomainSource> reordered;
            for (const auto& want : permutations[static_cast<size_t>(k)]) {
                for (const auto& d : base.domains) {
                    if (d.spec.name == want) reordered.push_back(d);
                }
            }
            cfg.domains = reordered;
            cfg.run_dir = base.run_dir + "_order" + std::to_string(k);
            run_cfgs.push_back(cfg);
            std::string label = "order" + std::to_string(k) + ":";
            for (const auto& n : permutations[static_cast<size_t>(k)]) label += n + ";";
            labels.push_back(label);
        }
    }

    std::vector<SweepRow> rows(run_cfgs.size());
    int max_jobs = std::max(1, jobs);
    for (size_t begin = 0; begin < run_cfgs.size(); begin += static_cast<size_t>(max_jobs)) {
        size_t end = std::min(run_cfgs.size(), begin + static_cast<size_t>(max_jobs));
        std::vector<std::future<SweepRow>> wave;
        for (size_t i = begin; i < end; ++i) {
            wave.push_back(std::async(std::launch::async, execute_run, run_cfgs[i], labels[i],
                                      args.quiet || max_jobs > 1));
        }
        for (size_t i = begin; i < end; ++i) rows[i] = wave[i - begin].get();
    }

    std::string table_path =
        base.run_dir + "_sweep_" + (!axis.empty() ? axis : "orders") + ".csv";
    {
        std::ofstream out(table_path);
        out << "label,run_dir,ok,avg_bleu,final_fr,error\n";
        for (const auto& row : rows) {
            out << row.label << ',' << row.run_dir << ',' << (row.ok ? 1 : 0) << ','
                << (std::isnan(row.avg_bleu) ? "" : fmt_double(row.avg_bleu)) << ','
                << (std::isnan(row.final_fr) ? "" : fmt_double(row.final_fr)) << ',' << row.error
                << '\n';
        }
    }
    std::cout << "sweep: wrote " << table_path << "\n";
    for (const auto& row : rows) {
        std::cout << "  " << row.label << ": "
                  << (row.ok ? "avg_bleu=" + std::to_string(row.avg_bleu) +
                                   " fr=" + std::to_string(row.final_fr)
                             : "FAILED: " + row.error)
                  << "\n";
    }
    bool all_ok = true;
    for (const auto& row : rows) all_ok = all_ok && row.ok;
    return all_ok ? 0 : 1;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"F-MALLOC continual-learning engine for masked feed-forward transformers"};
    app.require_subcommand(1);

    CommonArgs pretrain_args, prune_args, clrun_args, eval_args, report_args, sweep_args;
    int eval_stage = -1, eval_task = -1;
    std::string sweep_axis, sweep_values;
    int sweep_orders = 0, sweep_jobs = 1;
    uint64_t sweep_seed = 7;
    int clrun_jobs = 1;

    CLI::App* c_pretrain = app.add_subcommand("pretrain", "Train the general-domain model");
    add_common(c_pretrain, pretrain_args);
    CLI::App* c_prune = app.add_subcommand("prune", "Importance-prune the pretrained model");
    add_common(c_prune, prune_args);
    CLI::App* c_clrun = app.add_subcommand("cl-run", "Run the continual-learning sequence");
    add_common(c_clrun, clrun_args);
    c_clrun->add_option("--jobs", clrun_jobs, "Accepted for symmetry; a single run is serial");
    CLI::App* c_eval = app.add_subcommand("evaluate", "Evaluate stored checkpoints on test sets");
    add_common(c_eval, eval_args);
    c_eval->add_option("--stage", eval_stage, "Stage checkpoint to evaluate (default: latest)");
    c_eval->add_option("--task", eval_task, "Restrict evaluation to one task index");
    CLI::App* c_report = app.add_subcommand("report", "Regenerate metrics artifacts from a run dir");
    add_common(c_report, report_args);
    CLI::App* c_sweep = app.add_subcommand("sweep", "Run hyperparameter or task-order sweeps");
    add_common(c_sweep, sweep_args);
    c_sweep->add_option("--axis", sweep_axis, "Hyperparameter axis: tau_max or sparsity");
    c_sweep->add_option("--values", sweep_values, "Comma-separated axis values");
    c_sweep->add_option("--orders", sweep_orders, "Number of random task orders");
    c_sweep->add_option("--seed", sweep_seed, "Seed for task-order generation");
    c_sweep->add_option("--jobs", sweep_jobs, "Parallel worker count");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (c_pretrain->parsed()) return run_pretrain(pretrain_args);
        if (c_prune->parsed()) return run_prune(prune_args);
        if (c_clrun->parsed()) return run_cl_run(clrun_args);
        if (c_eval->parsed()) return run_evaluate(eval_args, eval_stage, eval_task);
        if (c_report->parsed()) return run_report(report_args);
        if (c_sweep->parsed()) {
            return run_sweep(sweep_args, sweep_axis, sweep_values, sweep_orders, sweep_seed, sweep_jobs);
        }
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace fmalloc
