// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Subcommands: train, report-params, eval-invariants,
// route-stats, gradcheck. Exit codes: 0 success, 1 validation error, 2 check
// failure, 3 numeric abort.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cktwam/diagnostics.hpp"

namespace {

using namespace cktwam;

std::string with_commas(int64_t v) {
    std::string s = std::to_string(v);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<size_t>(i), ",");
    return s;
}

RunConfig load_cfg(const std::string& path, const std::vector<std::string>& sets,
                   std::optional<uint64_t> seed, std::optional<int64_t> steps) {
    RunConfig cfg = load_config_file(path, sets);
    if (seed) cfg.seed = *seed;
    if (steps) cfg.train.steps = *steps;
    if (const char* env = std::getenv("CKTWAM_PRECISION")) cfg.precision = env;
    validate(cfg);
    return cfg;
}

template <typename T>
int do_train(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.out_dir);
    std::string metrics_path = (std::filesystem::path(cfg.out_dir) / "metrics.jsonl").string();
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw ConfigError("cannot write metrics file: " + metrics_path);
    TrainSession<T> session(cfg);
    RunReport report = session.run(&metrics);
    metrics.close();

    json summary{{"steps", report.steps},
                 {"frozen_ok", report.frozen_ok},
                 {"checkpoint", report.checkpoint_path},
                 {"metrics", metrics_path},
                 {"cache_hits", report.cache_hits},
                 {"cache_misses", report.cache_misses}};
    if (!report.metrics.empty()) {
        const auto& last = report.metrics.back();
        summary["final"] = {{"L_total", last.total}, {"L_act_avg", last.act_avg},
                            {"L_vid", last.vid},     {"L_bal", last.bal},
                            {"lr", last.lr}};
    }
    std::string summary_path = (std::filesystem::path(cfg.out_dir) / "report.json").string();
    std::ofstream(summary_path) << summary.dump(2) << "\n";
    std::cout << "trained " << report.steps << " step(s); frozen backbones "
              << (report.frozen_ok ? "intact" : "CHANGED") << "\n"
              << "metrics: " << metrics_path << "\n"
              << "checkpoint: " << report.checkpoint_path << "\n";
    return 0;
}

int do_report_params(const RunConfig& cfg, const std::string& grouping) {
    CountMode mode = grouping == "structural" ? CountMode::structural : CountMode::paper_table;
    ParamCountReport r = count_params(cfg.ckt, mode);
    std::cout << "Parameter budget (" << grouping << " grouping)\n";
    for (const auto& [name, count] : r.components)
        std::printf("  %-22s %18s\n", name.c_str(), with_commas(count).c_str());
    if (mode == CountMode::paper_table) {
        std::printf("  %-22s %18s\n", "single branch total", with_commas(r.per_branch).c_str());
        std::printf("  %-22s %18s\n", "generalized (x1)", with_commas(r.generalized).c_str());
        std::printf("  %-22s %18s\n",
                    ("specialized (x" + std::to_string(cfg.ckt.m) + ")").c_str(),
                    with_commas(r.specialized_total).c_str());
        std::printf("  %-22s %18s\n", "router", with_commas(r.router).c_str());
    }
    std::printf("  %-22s %18s\n", "bank total", with_commas(r.bank_total).c_str());
    std::printf("  %-22s %18s\n", "P_train", with_commas(r.p_train).c_str());
    std::printf("  %-22s %18s\n", "P_active", with_commas(r.p_active).c_str());
    std::printf("  overhead vs student 2.0B      %6.2f%%\n", 100.0 * static_cast<double>(r.bank_total) / 2.0e9);
    std::printf("  overhead vs teacher 14.0B     %6.2f%%\n", 100.0 * static_cast<double>(r.bank_total) / 14.0e9);
    std::printf("  overhead vs combined 16.0B    %6.2f%%\n", 100.0 * static_cast<double>(r.bank_total) / 16.0e9);
    return 0;
}

int do_eval_invariants(const RunConfig& cfg, int64_t permutations) {
    auto results = run_invariant_suite(cfg, permutations);
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 2;
}

template <typename T>
int do_route_stats(const RunConfig& cfg, const std::string& ckpt_path, const std::string& csv_path) {
    AdapterBank<T> bank(cfg.ckt);
    checkpoint::load(ckpt_path, cfg, bank);
    Teacher<T> teacher(cfg.teacher);
    Student<T> student(cfg.student);
    StagedTask<T> task(cfg, student);
    auto table = stage_routing_probs(task, teacher, bank);

    std::cout << "Average selection probabilities per stage (" << task.pool_size() << " observations)\n";
    std::cout << "stage";
    for (int64_t m = 0; m < cfg.ckt.m; ++m) std::printf("  adapter_%lld", static_cast<long long>(m));
    std::cout << "  argmax\n";
    for (size_t s = 0; s < table.size(); ++s) {
        std::printf("%5zu", s);
        size_t argmax = 0;
        for (size_t m = 0; m < table[s].size(); ++m) {
            std::printf("  %9.4f", table[s][m]);
            if (table[s][m] > table[s][argmax]) argmax = m;
        }
        std::printf("  %6zu\n", argmax);
    }
    if (!csv_path.empty()) {
        std::filesystem::path p(csv_path);
        if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
        std::ofstream csv(csv_path, std::ios::trunc);
        csv << "stage";
        for (int64_t m = 0; m < cfg.ckt.m; ++m) csv << ",adapter_" << m;
        csv << "\n";
        for (size_t s = 0; s < table.size(); ++s) {
            csv << s;
            for (double v : table[s]) csv << "," << v;
            csv << "\n";
        }
        std::cout << "csv: " << csv_path << "\n";
    }
    return 0;
}

int do_gradcheck(const RunConfig& cfg, double h, double tol, const std::string& fault) {
    if (!fault.empty() && fault != "gelu")
        throw ConfigError("unknown fault injection target: " + fault);
    GradcheckReport r = run_gradcheck(cfg, h, tol, fault == "gelu");
    std::printf("checked %lld gradient entries (64-bit, dropout forced off)\n",
                static_cast<long long>(r.entries_checked));
    std::printf("max relative error %.3e at %s (tolerance %.1e)\n", r.max_rel_err,
                r.worst_param.c_str(), tol);
    std::cout << (r.pass ? "PASS" : "FAIL") << "\n";
    return r.pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"context knowledge transfer between frozen world action models"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    std::optional<uint64_t> seed;
    std::optional<int64_t> steps;

    auto add_common = [&](CLI::App* sub, bool with_steps = false) {
        sub->add_option("--config", config_path, "JSON config file")->required();
        sub->add_option("--set", sets, "dotted-path override, e.g. ckt.k=2")->take_all();
        sub->add_option("--seed", seed, "override the global seed");
        if (with_steps) sub->add_option("--steps", steps, "override train.steps");
    };

    CLI::App* train = app.add_subcommand("train", "optimize the transfer module on the staged task");
    add_common(train, true);

    CLI::App* report = app.add_subcommand("report-params", "print the trainable-parameter budget");
    add_common(report);
    std::string grouping = "table";
    report->add_option("--grouping", grouping, "table | structural")
        ->check(CLI::IsMember({"table", "structural"}));

    CLI::App* inv = app.add_subcommand("eval-invariants", "run the invariance suite");
    add_common(inv);
    int64_t permutations = 20;
    inv->add_option("--permutations", permutations, "conditioning permutations to try");

    CLI::App* stats = app.add_subcommand("route-stats", "per-stage routing histograms");
    add_common(stats);
    std::string ckpt_path, csv_path;
    stats->add_option("--checkpoint", ckpt_path, "checkpoint to inspect")->required();
    stats->add_option("--csv", csv_path, "also write a CSV table here");

    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference check of the full objective");
    add_common(grad);
    double h = 1e-5, tol = 1e-4;
    std::string fault;
    grad->add_option("--fd-step", h, "finite-difference step");
    grad->add_option("--tol", tol, "max relative error");
    grad->add_option("--inject-fault", fault, "deliberately break a backward (gelu)");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = load_cfg(config_path, sets, seed, steps);
        if (train->parsed())
            return cfg.precision == "f64" ? do_train<double>(cfg) : do_train<float>(cfg);
        if (report->parsed()) return do_report_params(cfg, grouping);
        if (inv->parsed()) return do_eval_invariants(cfg, permutations);
        if (stats->parsed())
            return cfg.precision == "f64" ? do_route_stats<double>(cfg, ckpt_path, csv_path)
                                          : do_route_stats<float>(cfg, ckpt_path, csv_path);
        if (grad->parsed()) return do_gradcheck(cfg, h, tol, fault);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 3;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
