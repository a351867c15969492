// Command-line front end. Exit codes: 0 ok, 2 invalid input, 3 runtime failure.

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "brainwash/attack.hpp"
#include "brainwash/cl_trainer.hpp"
#include "brainwash/harness.hpp"
#include "brainwash/inversion.hpp"
#include "brainwash/metrics.hpp"
#include "brainwash/rng.hpp"
#include "brainwash/task_data.hpp"

using namespace brainwash;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct DataArgs {
    std::string dataset = "digits";
    int num_tasks = 5;
    std::uint64_t seed = 0;
};

void add_data_flags(CLI::App* cmd, DataArgs& d) {
    cmd->add_option("--dataset", d.dataset, "catalog id (digits, blobs, blobs-<K>, cifar100, ...)");
    cmd->add_option("--num-tasks", d.num_tasks, "number of class-disjoint tasks");
    cmd->add_option("--seed", d.seed, "data seed (class permutation and train/test split)");
}

TaskSequence load_tasks(const DataArgs& d) {
    return split_into_tasks(DatasetCatalog::from_environment(), d.dataset, d.num_tasks, d.seed);
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

json data_json(const DataArgs& d) { return {{"dataset", d.dataset}, {"num_tasks", d.num_tasks}, {"data_seed", d.seed}}; }

DataArgs data_from_extra(const json& extra, const DataArgs& fallback) {
    DataArgs d = fallback;
    d.dataset = extra.value("dataset", d.dataset);
    d.num_tasks = extra.value("num_tasks", d.num_tasks);
    d.seed = extra.value("data_seed", d.seed);
    return d;
}

json metrics_json(const AccuracyMatrix& m) {
    json j = {{"matrix", m.to_json()}};
    const int T = m.size();
    bool complete = T >= 2;
    for (int i = 1; i <= T && complete; ++i) complete = m.has(i, i) && m.has(T, i);
    if (complete) {
        j["bwt"] = bwt(m);
        j["forgetting"] = forgetting(m);
        j["last_task_accuracy"] = last_task_accuracy(m);
        j["average_past_accuracy"] = average_past_accuracy(m);
    }
    return j;
}

std::vector<json> parse_grid(const std::string& text) {
    json g;
    try {
        g = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError("--grid must be a JSON array: " + std::string(e.what()));
    }
    BRAINWASH_REQUIRE(g.is_array() && !g.empty(), "--grid must be a non-empty JSON array");
    return {g.begin(), g.end()};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Data-poisoning attacks on regularization-based continual learners"};
    app.require_subcommand(1);
    std::string artifacts;
    app.add_option("--artifacts", artifacts, "artifact root (overrides $BRAINWASH_ARTIFACTS)");

    // train ------------------------------------------------------------------
    auto* train = app.add_subcommand("train", "train the victim on tasks 1..upto");
    DataArgs train_data;
    add_data_flags(train, train_data);
    std::string method = "ewc";
    double lambda = 0.0;
    int epochs = 5, upto = 0;
    double lr = 1e-2;
    int batch = 16;
    std::uint64_t model_seed = 0;
    std::string arch_file, checkpoint;
    train->add_option("--method", method, "ewc | mas | rwalk");
    train->add_option("--lambda", lambda, "regularization strength");
    train->add_option("--epochs", epochs);
    train->add_option("--lr", lr);
    train->add_option("--batch", batch);
    train->add_option("--upto", upto, "last task to learn (default T-1)");
    train->add_option("--model-seed", model_seed);
    train->add_option("--arch", arch_file, "architecture JSON file");
    train->add_option("--checkpoint", checkpoint, "output checkpoint")->required();

    // invert -----------------------------------------------------------------
    auto* invert = app.add_subcommand("invert", "reconstruct a proxy dataset for one past task");
    InversionConfig inv;
    int inv_task = 1;
    std::string inv_ckpt, inv_out;
    invert->add_option("--checkpoint", inv_ckpt)->required();
    invert->add_option("--task", inv_task, "head to invert")->required();
    invert->add_option("--M", inv.samples, "samples");
    invert->add_option("--alpha-tv", inv.alpha_tv);
    invert->add_option("--alpha-l2", inv.alpha_l2);
    invert->add_option("--alpha-f", inv.alpha_f);
    invert->add_option("--steps", inv.steps);
    invert->add_option("--step-size", inv.step_size);
    invert->add_option("--batch", inv.batch_size, "optimization batch (0 = all)");
    invert->add_option("--seed", inv.seed);
    invert->add_option("--out", inv_out)->required();

    // poison -----------------------------------------------------------------
    auto* poison = app.add_subcommand("poison", "craft noise for the next task");
    DataArgs poison_data;
    add_data_flags(poison, poison_data);
    AttackConfig ac;
    std::string mode = "reckless", optimizer = "adam", gradient = "exact", bn_stats = "poisoned";
    double rate = 1.0;
    bool uniform = false;
    std::uint64_t mask_seed = 0;
    std::string poison_ckpt, poison_out;
    std::vector<std::string> proxy_files;
    poison->add_option("--checkpoint", poison_ckpt, "victim after tasks 1..T-1")->required();
    poison->add_option("--proxies", proxy_files, "one proxy file per past task");
    poison->add_flag("--uniform", uniform, "uniform-noise baseline instead of crafted noise");
    poison->add_option("--mode", mode, "reckless | cautious");
    poison->add_option("--epsilon", ac.epsilon);
    poison->add_option("--eta", ac.eta);
    poison->add_option("--rate", rate, "injection rate");
    poison->add_option("--k", ac.k, "unrolled SGD steps");
    poison->add_option("--outer-iterations", ac.outer_iterations);
    poison->add_option("--outer-step", ac.outer_step);
    poison->add_option("--inner-lr", ac.inner_lr);
    poison->add_option("--optimizer", optimizer, "adam | signed | gradient");
    poison->add_option("--gradient", gradient, "exact | finite_difference");
    poison->add_option("--bn-stats", bn_stats, "poisoned | frozen");
    poison->add_option("--attack-seed", ac.seed);
    poison->add_option("--mask-seed", mask_seed);
    poison->add_option("--out", poison_out)->required();

    // learn-poisoned ---------------------------------------------------------
    auto* learn = app.add_subcommand("learn-poisoned", "victim learns the (possibly poisoned) last task");
    DataArgs learn_data;
    add_data_flags(learn, learn_data);
    std::string learn_ckpt, learn_noise, learn_out;
    std::optional<double> learn_lambda;
    learn->add_option("--checkpoint", learn_ckpt, "victim after tasks 1..T-1")->required();
    learn->add_option("--noise", learn_noise, "noise pack (omit for a clean run)");
    learn->add_option("--lambda", learn_lambda, "override the checkpoint's λ");
    learn->add_option("--out", learn_out, "output checkpoint")->required();

    // evaluate ---------------------------------------------------------------
    auto* evaluate = app.add_subcommand("evaluate", "accuracy matrix and BWT of a checkpoint");
    DataArgs eval_data;
    add_data_flags(evaluate, eval_data);
    std::string eval_ckpt;
    evaluate->add_option("--checkpoint", eval_ckpt)->required();

    // run / tune-lambda / sweep / report -------------------------------------
    auto* run = app.add_subcommand("run", "run one experiment config end to end");
    std::string config_file;
    bool reuse_result = false;
    run->add_option("--config", config_file)->required()->check(CLI::ExistingFile);
    run->add_flag("--reuse-result", reuse_result, "return a stored record for the same config hash");

    auto* tune = app.add_subcommand("tune-lambda", "pick λ for a config's victim over its grid");
    tune->add_option("--config", config_file)->required()->check(CLI::ExistingFile);

    auto* sweep_cmd = app.add_subcommand("sweep", "run a config over one axis");
    std::string axis, grid_text, sweep_out;
    sweep_cmd->add_option("--config", config_file)->required()->check(CLI::ExistingFile);
    sweep_cmd->add_option("--axis", axis, "lambda | epsilon_rate | num_tasks | inversion_source | eta")->required();
    sweep_cmd->add_option("--grid", grid_text, "JSON array of axis values")->required();
    sweep_cmd->add_option("--out", sweep_out, "write the sweep table JSON here");

    auto* report_cmd = app.add_subcommand("report", "CSV, markdown and plots from stored records");
    std::string report_out;
    report_cmd->add_option("--out", report_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (!artifacts.empty()) ::setenv("BRAINWASH_ARTIFACTS", artifacts.c_str(), 1);

        if (*train) {
            const auto tasks = load_tasks(train_data);
            const int last = upto > 0 ? upto : tasks.num_tasks() - 1;
            BRAINWASH_REQUIRE(last >= 1 && last <= tasks.num_tasks(), "--upto out of range");
            ArchConfig arch;
            if (!arch_file.empty()) {
                std::ifstream in(arch_file);
                BRAINWASH_REQUIRE(in.good(), "cannot read '" + arch_file + "'");
                arch = arch_from_json(json::parse(in));
            }
            TrainConfig tc;
            tc.method = method_from_string(method);
            tc.lambda = lambda;
            tc.learning_rate = lr;
            tc.batch_size = batch;
            tc.epochs = epochs;
            tc.seed = model_seed;
            tc.validate();
            auto model = init_model(arch, model_seed);
            std::vector<ImportanceState> states;
            AccuracyMatrix m(tasks.num_tasks());
            for (int t = 1; t <= last; ++t) {
                auto out = train_task(model, tasks.train_task(t), states, tc);
                model = std::move(out.model);
                states.push_back(std::move(out.state));
                m.set_row(t, evaluate_matrix_row(model, tasks, t));
                std::cerr << "task " << t << ": accuracy " << m.at(t, t) << "\n";
            }
            json extra = data_json(train_data);
            extra["matrix"] = m.to_json();
            extra["train"] = {{"method", method}, {"lambda", lambda}, {"lr", lr}, {"batch", batch},
                              {"epochs", epochs}, {"model_seed", model_seed}};
            save_checkpoint(checkpoint, model, states, extra);
            print(metrics_json(m));
        } else if (*invert) {
            auto ck = load_checkpoint(inv_ckpt);
            const auto view = attacker_view(ck.model);
            const auto data = invert_task(view, inv_task, inv);
            save_synthetic(inv_out, data);
            print({{"task", inv_task},
                   {"samples", data.labels.size()},
                   {"initial_objective", data.initial_objective},
                   {"final_objective", data.final_objective},
                   {"warnings", data.warnings}});
        } else if (*poison) {
            // The attacker reads only the model: states and lineage are dropped.
            auto ck = load_checkpoint(poison_ckpt);
            const auto view = attacker_view(ck.model);
            const auto d = data_from_extra(ck.extra, poison_data);
            const auto tasks = load_tasks(d);
            const int T = view.num_heads() + 1;
            BRAINWASH_REQUIRE(T <= tasks.num_tasks(), "checkpoint already covers every task");
            const auto& task = tasks.train_task(T);
            const auto mask = select_injection_subset(task, rate, mask_seed);
            NoisePack pack;
            if (uniform) {
                pack = uniform_noise_baseline(task, ac.epsilon, mask, ac.seed);
            } else {
                ac.mode = attack_mode_from_string(mode);
                ac.optimizer = outer_optimizer_from_string(optimizer);
                ac.gradient = unroll_gradient_from_string(gradient);
                ac.bn_stats = bn_stats_model_from_string(bn_stats);
                ac.validate();
                BRAINWASH_REQUIRE(static_cast<int>(proxy_files.size()) == T - 1,
                                  "--proxies needs one file per past task (" + std::to_string(T - 1) + ")");
                std::vector<SyntheticDataset> proxies;
                for (const auto& f : proxy_files) proxies.push_back(load_synthetic(f));
                std::sort(proxies.begin(), proxies.end(),
                          [](const auto& a, const auto& b) { return a.task_id < b.task_id; });
                pack = craft_noise(view, task, proxies, mask, ac);
            }
            save_noise(poison_out, pack);
            json j = {{"task", T}, {"source", pack.source}, {"epsilon", pack.epsilon}, {"masked", mask.count()}};
            if (!pack.outer_trace.empty()) {
                j["outer_loss_first"] = pack.outer_trace.front();
                j["outer_loss_last"] = pack.outer_trace.back();
            }
            print(j);
        } else if (*learn) {
            auto ck = load_checkpoint(learn_ckpt);
            const auto d = data_from_extra(ck.extra, learn_data);
            const auto tasks = load_tasks(d);
            const int T = ck.model.num_heads() + 1;
            BRAINWASH_REQUIRE(T <= tasks.num_tasks(), "checkpoint already covers every task");
            TaskDataset task = tasks.train_task(T);
            if (!learn_noise.empty()) task = apply_noise(task, load_noise(learn_noise));
            const json tr = ck.extra.value("train", json::object());
            TrainConfig tc;
            tc.method = method_from_string(tr.value("method", std::string("ewc")));
            tc.lambda = learn_lambda.value_or(tr.value("lambda", 0.0));
            tc.learning_rate = tr.value("lr", tc.learning_rate);
            tc.batch_size = tr.value("batch", tc.batch_size);
            tc.epochs = tr.value("epochs", tc.epochs);
            tc.seed = tr.value("model_seed", tc.seed);
            auto out = train_task(ck.model, task, ck.states, tc);
            auto m = ck.extra.contains("matrix") ? AccuracyMatrix::from_json(ck.extra.at("matrix"))
                                                 : AccuracyMatrix(tasks.num_tasks());
            m.set_row(T, evaluate_matrix_row(out.model, tasks, T));
            ck.states.push_back(std::move(out.state));
            json extra = ck.extra;
            extra["matrix"] = m.to_json();
            extra["noise"] = learn_noise;
            save_checkpoint(learn_out, out.model, ck.states, extra);
            print(metrics_json(m));
        } else if (*evaluate) {
            auto ck = load_checkpoint(eval_ckpt);
            const auto d = data_from_extra(ck.extra, eval_data);
            const auto tasks = load_tasks(d);
            auto m = ck.extra.contains("matrix") ? AccuracyMatrix::from_json(ck.extra.at("matrix"))
                                                 : AccuracyMatrix(tasks.num_tasks());
            const int t = ck.model.num_heads();
            m.set_row(t, evaluate_matrix_row(ck.model, tasks, t));
            print(metrics_json(m));
        } else if (*run) {
            const auto cfg = load_config(config_file);
            RunOptions opts;
            opts.reuse_result = reuse_result;
            const auto rec = run_experiment(cfg, opts);
            print(rec.to_json());
            if (!rec.ok()) return 3;
        } else if (*tune) {
            const auto cfg = load_config(config_file);
            print({{"lambda", tune_lambda(cfg)}});
        } else if (*sweep_cmd) {
            const auto cfg = load_config(config_file);
            const auto table = sweep(cfg, sweep_axis_from_string(axis), parse_grid(grid_text));
            const auto j = table.to_json();
            if (!sweep_out.empty()) std::ofstream(sweep_out) << j.dump(2) << "\n";
            print(j);
            for (const auto& c : table.cells) {
                if (!c.record.ok()) return 3;
            }
        } else if (*report_cmd) {
            ExperimentConfig probe;
            const auto store = ArtifactStore::for_config(probe);
            const auto records = store.records();
            BRAINWASH_REQUIRE(!records.empty(), "no records under " + store.root().string());
            const auto files = report(records, report_out);
            json plots = json::array();
            for (const auto& p : files.plots) plots.push_back(p.string());
            print({{"csv", files.csv.string()}, {"markdown", files.markdown.string()}, {"plots", plots}});
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
