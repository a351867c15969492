// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Criteria can be selected by number on the command line. Desk-scale
// runs share an artifact store (BRAINWASH_ACCEPTANCE_ARTIFACTS, default
// ./acceptance-artifacts) so an interrupted suite resumes from its caches.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <numeric>
#include <set>

#include "brainwash/harness.hpp"
#include "support.hpp"

using namespace brainwash;
using nlohmann::json;

namespace {

// Tolerances and thresholds.
constexpr double kPenaltyGradTol = 1e-4;
constexpr double kImageGradTol = 1e-4;
constexpr double kBilevelGradTol = 1e-3;
constexpr double kBwtDropMin = 0.10;         // criterion 4
constexpr double kCautiousMargin = 0.05;     // criterion 5
constexpr double kSourceGapMax = 0.05;       // criterion 7
constexpr double kRateInversionMax = 0.01;   // criterion 8
constexpr double kEpsilon = 0.3;
constexpr double kC1Seconds = 60.0, kC2Seconds = 10.0, kC3Seconds = 120.0;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};
const std::vector<double> kEtas{0.05, 0.1, 0.5};
const std::vector<double> kRates{0.25, 0.5, 1.0};

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::string pts(double fraction) { return fmt("%.1f", 100.0 * fraction); }

// ---------------------------------------------------------------------------
// Desk-scale runs

std::string store_root() {
    const char* env = std::getenv("BRAINWASH_ACCEPTANCE_ARTIFACTS");
    return env && *env ? env : "acceptance-artifacts";
}

ExperimentConfig desk(std::uint64_t seed, ProxySource source) {
    ExperimentConfig c;
    c.dataset = "digits";
    c.num_tasks = 5;
    c.victim.method = ClMethod::ewc;
    c.inversion.samples = 64;
    c.attack.epsilon = kEpsilon;
    c.source = source;
    c.seeds = {seed, seed, seed};
    c.output_dir = store_root();
    return c;
}

struct RunFailed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

ResultRecord run(const ExperimentConfig& c) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = run_experiment(c, {true, true});
    std::fprintf(stderr, "  [%s seed %llu] %s forgetting %s, last %s (%.0f s)\n", c.attack_label().c_str(),
                 static_cast<unsigned long long>(c.seeds.data), r.ok() ? "ok" : "FAILED",
                 r.ok() ? pts(r.forgetting).c_str() : "-", r.ok() ? pts(r.last_task_accuracy).c_str() : "-",
                 seconds_since(t0));
    if (!r.ok()) throw RunFailed(c.attack_label() + " run failed at " + r.error->stage + ": " + r.error->message);
    return r;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

std::vector<double> forgetting_by_seed(const std::function<ExperimentConfig(std::uint64_t)>& make) {
    std::vector<double> out;
    for (auto s : kSeeds) out.push_back(run(make(s)).forgetting);
    return out;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    int packs = 0, violations = 0;
    auto check = [&](const TaskDataset& task, const NoisePack& p) {
        ++packs;
        bool ok = true;
        for (int i = 0; i < task.size(); ++i) {
            for (std::size_t k = 0; k < task.images.sample_size(); ++k) {
                const double d = p.deltas.sample(i)[k];
                ok = ok && std::abs(d) <= p.epsilon;
                ok = ok && (p.mask.selected[static_cast<std::size_t>(i)] || d == 0.0);
            }
        }
        const auto poisoned = apply_noise(task, p);
        for (double v : poisoned.images.data) ok = ok && v >= 0.0 && v <= 1.0;
        violations += !ok;
    };

    // Crafted and uniform noise over a spread of budgets, rates and modes on
    // a two-task problem with a synthetic proxy.
    const auto arch = bwtest::tiny_convnet();
    int case_id = 0;
    for (double eps : {0.01, 0.1, 0.3, 0.9}) {
        for (double rate : {0.0, 0.3, 1.0}) {
            for (AttackMode mode : {AttackMode::reckless, AttackMode::cautious}) {
                const std::uint64_t seed = static_cast<std::uint64_t>(++case_id);
                auto model = add_head(init_model(arch, seed), 2, seed);
                const auto task = bwtest::make_task(2, bwtest::random_images(24, arch.input, seed + 100), 2);
                SyntheticDataset proxy;
                proxy.task_id = 1;
                proxy.num_classes = 2;
                proxy.images = bwtest::random_images(12, arch.input, seed + 200);
                for (int i = 0; i < 12; ++i) proxy.labels.push_back(i % 2);
                const auto mask = select_injection_subset(task, rate, seed);
                AttackConfig cfg;
                cfg.epsilon = eps;
                cfg.mode = mode;
                cfg.eta = 0.5;
                cfg.outer_iterations = 10;
                cfg.outer_step = 0.5;  // large steps push δ into the box corners
                cfg.task_batch = 8;
                cfg.proxy_batch = 6;
                cfg.seed = seed;
                cfg.optimizer = case_id % 2 ? OuterOptimizer::signed_gradient : OuterOptimizer::adam;
                const std::vector<SyntheticDataset> proxies{proxy};
                check(task, craft_noise(model, task, proxies, mask, cfg));
                check(task, uniform_noise_baseline(task, eps, mask, seed));
            }
        }
    }
    // Every noise pack already written by the desk-scale runs.
    const ArtifactStore store(store_root());
    if (std::filesystem::exists(store.root() / "noise")) {
        const auto catalog = DatasetCatalog::from_environment();
        std::map<std::uint64_t, TaskSequence> seqs;
        for (const auto& e : std::filesystem::directory_iterator(store.root() / "noise")) {
            if (e.path().extension() != ".bwta") continue;
            const auto pack = load_noise(e.path());
            // Desk runs use seeds {s, s, s}; the data seed is recovered from the record.
            for (const auto& rec : store.records()) {
                if (!rec.artifacts.contains("noise") || rec.artifacts["noise"] != e.path().string()) continue;
                const auto cfg = ExperimentConfig::from_json(rec.config);
                auto it = seqs.find(cfg.seeds.data);
                if (it == seqs.end()) {
                    it = seqs.emplace(cfg.seeds.data, split_into_tasks(catalog, cfg.dataset, cfg.num_tasks, cfg.seeds.data)).first;
                }
                check(it->second.train_task(cfg.num_tasks), pack);
                break;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {violations == 0 && secs < kC1Seconds,
            std::to_string(packs - violations) + "/" + std::to_string(packs) + " noise packs valid, " + fmt("%.1f s", secs)};
}

Outcome criterion2() {
    const auto t0 = std::chrono::steady_clock::now();
    AccuracyMatrix hand(3);
    hand.set_row(1, {0.9});
    hand.set_row(2, {0.85, 0.8});
    hand.set_row(3, {0.6, 0.7, 0.95});
    const bool hand_ok = std::abs(bwt(hand) + 0.2) < 1e-12;

    Rng rng(2024);
    int matches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int T = 2 + static_cast<int>(rng.below(10));
        AccuracyMatrix m(T);
        for (int t = 1; t <= T; ++t)
            for (int i = 1; i <= t; ++i) m.set(t, i, rng.uniform());
        double loop = 0.0;
        for (int i = 1; i < T; ++i) loop += m.at(T, i) - m.at(i, i);
        loop /= T - 1;
        matches += bwt(m) == loop && forgetting(m) == -loop;
    }
    const double secs = seconds_since(t0);
    return {hand_ok && matches == 1000 && secs < kC2Seconds,
            "hand case " + fmt("%.6f", bwt(hand)) + ", " + std::to_string(matches) + "/1000 exact, " + fmt("%.2f s", secs)};
}

Outcome criterion3() {
    const auto t0 = std::chrono::steady_clock::now();
    // (a) regularizer penalty
    std::vector<ImportanceState> states(2);
    for (std::size_t s = 0; s < 2; ++s) {
        states[s].task_id = static_cast<int>(s + 1);
        states[s].omega = bwtest::random_vector(40, 10 + s, 0.0, 1.0);
        states[s].anchor = bwtest::random_vector(40, 20 + s);
    }
    const auto theta = bwtest::random_vector(40, 30);
    std::vector<double> g(40, 0.0);
    add_regularizer_gradient(theta, states, 2.5, g);
    const double err_a = bwtest::rel_err(
        g, bwtest::central_diff([&](const std::vector<double>& v) { return regularizer_penalty(v, states, 2.5); }, theta));

    // (b) image regularizers
    const auto x = bwtest::random_images(3, {2, 4, 4}, 31);
    auto as = [&](const std::vector<double>& v) {
        Tensor<double> t = x;
        t.data = v;
        return t;
    };
    double err_b = 0.0;
    err_b = std::max(err_b, bwtest::rel_err(tv_norm_gradient(x).data,
                                            bwtest::central_diff([&](const auto& v) { return tv_norm(as(v)); }, x.data)));
    err_b = std::max(err_b, bwtest::rel_err(l2_image_norm_gradient(x).data,
                                            bwtest::central_diff([&](const auto& v) { return l2_image_norm(as(v)); }, x.data)));
    auto bn = init_model(bwtest::tiny_convnet({2, 4, 4}), 32);
    Rng rng(33);
    for (auto& s : bn.bn_stats) {
        for (auto& v : s.mean) v = rng.uniform(-0.2, 0.2);
        for (auto& v : s.var) v = rng.uniform(0.05, 0.5);
    }
    err_b = std::max(err_b, bwtest::rel_err(feature_stat_gradient(x, bn).data,
                                            bwtest::central_diff([&](const auto& v) { return feature_stat_penalty(as(v), bn); },
                                                                 x.data)));

    // (c) k = 1 bi-level gradient on a 7-parameter model (3 backbone, 4 head)
    const auto arch = bwtest::tiny_mlp({1, 1, 2}, {1}, Activation::tanh, false);
    const auto model = add_head(init_model(arch, 34), 2, 35);
    const auto task = bwtest::make_task(2, bwtest::random_images(4, arch.input, 36, 0.3, 0.7), 2);
    const std::vector<ProxyBatch> proxies{{1, bwtest::random_images(4, arch.input, 37), {0, 1, 1, 0}, 4.0}};
    const std::vector<int> idx{0, 1, 2, 3};
    AttackConfig cfg;
    cfg.k = 1;
    cfg.inner_lr = 0.5;
    const auto delta = bwtest::random_images(4, arch.input, 38, -0.1, 0.1);
    const auto ng = noise_gradient(model, task, delta, idx, proxies, cfg, 39);
    const auto fd = bwtest::central_diff(
        [&](const std::vector<double>& v) {
            Tensor<double> d = delta;
            d.data = v;
            return noise_gradient(model, task, d, idx, proxies, cfg, 39).value;
        },
        delta.data);
    const double err_c = bwtest::rel_err(ng.d_delta.data, fd);
    const std::size_t nparams = model.backbone.size() + model.heads[0].params.size();

    const double secs = seconds_since(t0);
    return {err_a < kPenaltyGradTol && err_b < kImageGradTol && err_c < kBilevelGradTol && nparams <= 10 && secs < kC3Seconds,
            "penalty " + fmt("%.1e", err_a) + ", image regularizers " + fmt("%.1e", err_b) + ", bi-level " + fmt("%.1e", err_c) +
                " (" + std::to_string(nparams) + " params), " + fmt("%.1f s", secs)};
}

Outcome criterion4() {
    std::vector<double> drops;
    for (auto s : kSeeds) drops.push_back(run(desk(s, ProxySource::none)).bwt - run(desk(s, ProxySource::inverted_reg)).bwt);
    const double m = mean(drops);
    return {m >= kBwtDropMin, "mean BWT drop " + pts(m) + " points (need >= " + pts(kBwtDropMin) + ")"};
}

Outcome criterion5() {
    int satisfied = 0;
    std::string detail;
    for (auto s : kSeeds) {
        const auto clean = run(desk(s, ProxySource::none));
        const auto reck = run(desk(s, ProxySource::inverted_reg));
        // η: the most damaging setting that keeps last-task accuracy at or above
        // reckless's; failing that, the one with the best last-task accuracy.
        std::optional<ResultRecord> best;
        std::optional<ResultRecord> most_accurate;
        double best_eta = 0.0;
        for (double eta : kEtas) {
            auto c = desk(s, ProxySource::inverted_reg);
            c.attack.mode = AttackMode::cautious;
            c.attack.eta = eta;
            const auto r = run(c);
            if (r.last_task_accuracy >= reck.last_task_accuracy && (!best || r.forgetting > best->forgetting)) {
                best = r;
                best_eta = eta;
            }
            if (!most_accurate || r.last_task_accuracy > most_accurate->last_task_accuracy) most_accurate = r;
        }
        const auto chosen = best ? *best : *most_accurate;
        if (!best) best_eta = ExperimentConfig::from_json(chosen.config).attack.eta;
        const bool ok = chosen.last_task_accuracy >= reck.last_task_accuracy &&
                        chosen.forgetting >= clean.forgetting + kCautiousMargin;
        satisfied += ok;
        detail += "seed " + std::to_string(s) + " η=" + fmt("%g", best_eta) + ": last " + pts(chosen.last_task_accuracy) +
                  " vs " + pts(reck.last_task_accuracy) + ", forgetting " + pts(chosen.forgetting) + " vs clean " +
                  pts(clean.forgetting) + (ok ? " ok" : " no") + "; ";
    }
    return {2 * satisfied > static_cast<int>(kSeeds.size()), std::to_string(satisfied) + "/3 seeds: " + detail};
}

Outcome criterion6() {
    bool all = true;
    std::string detail;
    for (auto s : kSeeds) {
        const double b = run(desk(s, ProxySource::inverted_reg)).forgetting;
        const double u = run(desk(s, ProxySource::uniform)).forgetting;
        all = all && b > u;
        detail += "seed " + std::to_string(s) + ": " + pts(b) + " vs " + pts(u) + "; ";
    }
    return {all, "BrainWash vs uniform forgetting, " + detail};
}

Outcome criterion7() {
    const double clean = mean(forgetting_by_seed([](auto s) { return desk(s, ProxySource::none); }));
    const double noreg = mean(forgetting_by_seed([](auto s) { return desk(s, ProxySource::inverted_noreg); }));
    const double reg = mean(forgetting_by_seed([](auto s) { return desk(s, ProxySource::inverted_reg); }));
    const double real = mean(forgetting_by_seed([](auto s) { return desk(s, ProxySource::real_data); }));
    const bool order = clean < noreg && noreg <= reg;
    const bool close = std::abs(reg - real) <= kSourceGapMax;
    return {order && close, "mean forgetting clean " + pts(clean) + " < no-reg " + pts(noreg) + " <= reg " + pts(reg) +
                                (order ? " holds" : " violated") + "; |reg - real " + pts(real) + "| = " +
                                pts(std::abs(reg - real)) + (close ? " <= 5" : " > 5")};
}

Outcome criterion8() {
    std::vector<double> means;
    for (double rate : kRates) {
        means.push_back(mean(forgetting_by_seed([rate](auto s) {
            auto c = desk(s, ProxySource::inverted_reg);
            c.injection_rate = rate;
            return c;
        })));
    }
    int inversions = 0;
    bool small = true;
    for (std::size_t i = 1; i < means.size(); ++i) {
        if (means[i] < means[i - 1]) {
            ++inversions;
            small = small && means[i - 1] - means[i] <= kRateInversionMax;
        }
    }
    return {inversions == 0 || (inversions == 1 && small),
            "mean forgetting at 25/50/100%: " + pts(means[0]) + ", " + pts(means[1]) + ", " + pts(means[2])};
}

Outcome criterion9() {
    // Grid {λ̂/10, λ̂, 10λ̂, 100λ̂} around each seed's tuned value.
    const std::vector<double> factors{0.1, 1.0, 10.0, 100.0};
    bool all = true;
    std::string detail;
    for (double f : factors) {
        std::vector<double> fc, fa, ac, aa;
        for (auto s : kSeeds) {
            const double tuned = tune_lambda(desk(s, ProxySource::none), {true, true});
            auto clean = desk(s, ProxySource::none);
            clean.victim.lambda = tuned * f;
            auto attacked = desk(s, ProxySource::inverted_reg);
            attacked.victim.lambda = tuned * f;
            const auto rc = run(clean);
            const auto ra = run(attacked);
            fc.push_back(rc.forgetting);
            fa.push_back(ra.forgetting);
            ac.push_back(rc.average_past_accuracy);
            aa.push_back(ra.average_past_accuracy);
        }
        const bool ok = mean(fa) > mean(fc) && mean(aa) < mean(ac);
        all = all && ok;
        detail += fmt("%gλ̂", f) + ": forgetting " + pts(mean(fa)) + " vs " + pts(mean(fc)) + ", past acc " + pts(mean(aa)) +
                  " vs " + pts(mean(ac)) + (ok ? "; " : " (violated); ");
    }
    return {all, detail};
}

Outcome criterion10() {
    // Recompute one attacked run from scratch in a separate store.
    bwtest::TempDir fresh("acceptance-determinism");
    auto c = desk(1, ProxySource::inverted_reg);
    const auto cached = run(c);
    c.output_dir = fresh.path.string();
    const auto redo = run_experiment(c, {false, false});
    const bool ok = redo.ok() && redo.content_hash() == cached.content_hash();
    return {ok, "content hash " + cached.content_hash().substr(0, 16) + (ok ? " reproduced" : " differs: " + redo.content_hash().substr(0, 16))};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::function<Outcome()>> criteria{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                         criterion6, criterion7, criterion8, criterion9, criterion10};
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    // Criterion 1 also checks the desk-scale noise packs, so it runs last.
    std::vector<int> order{2, 3, 4, 5, 6, 7, 8, 9, 10, 1};
    std::map<int, Outcome> results;
    for (int n : order) {
        if (!selected.empty() && !selected.count(n)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[static_cast<std::size_t>(n - 1)]();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        results[n] = o;
        std::printf("criterion %2d: %s  %s  [%.0f s]\n", n, o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    int failed = 0;
    for (const auto& [n, o] : results) failed += !o.pass;
    std::printf("%zu criteria run, %d failed\n", results.size(), failed);
    return failed == 0 ? 0 : 1;
}
