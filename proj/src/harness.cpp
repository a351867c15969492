#include "brainwash/harness.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "brainwash/archive.hpp"
#include "brainwash/rng.hpp"

namespace brainwash {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ProxySource s) {
    switch (s) {
        case ProxySource::inverted_reg: return "inverted_reg";
        case ProxySource::inverted_noreg: return "inverted_noreg";
        case ProxySource::real_data: return "real_data";
        case ProxySource::uniform: return "uniform";
        case ProxySource::none: return "none";
    }
    return "none";
}

ProxySource proxy_source_from_string(const std::string& s) {
    for (auto v : {ProxySource::inverted_reg, ProxySource::inverted_noreg, ProxySource::real_data,
                   ProxySource::uniform, ProxySource::none}) {
        if (to_string(v) == s) return v;
    }
    throw ValidationError("unknown attack source '" + s + "'");
}

std::string to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::lambda: return "lambda";
        case SweepAxis::epsilon_rate: return "epsilon_rate";
        case SweepAxis::num_tasks: return "num_tasks";
        case SweepAxis::inversion_source: return "inversion_source";
        case SweepAxis::eta: return "eta";
    }
    return "lambda";
}

SweepAxis sweep_axis_from_string(const std::string& s) {
    for (auto v : {SweepAxis::lambda, SweepAxis::epsilon_rate, SweepAxis::num_tasks, SweepAxis::inversion_source,
                   SweepAxis::eta}) {
        if (to_string(v) == s) return v;
    }
    throw ValidationError("unknown sweep axis '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
    BRAINWASH_REQUIRE(!dataset.empty(), "config: dataset is required");
    BRAINWASH_REQUIRE(num_tasks >= 2, "config: need at least 2 tasks");
    compile_architecture(arch);
    if (victim.lambda) BRAINWASH_REQUIRE(*victim.lambda >= 0.0, "config: λ must be >= 0");
    else BRAINWASH_REQUIRE(!victim.lambda_grid.empty(), "config: λ is tuned but the grid is empty");
    for (double l : victim.lambda_grid) BRAINWASH_REQUIRE(l >= 0.0, "config: λ grid values must be >= 0");
    TrainConfig tc;
    tc.method = victim.method;
    tc.lambda = victim.lambda.value_or(0.0);
    tc.learning_rate = victim.learning_rate;
    tc.batch_size = victim.batch_size;
    tc.epochs = victim.epochs;
    tc.importance_samples = victim.importance_samples;
    tc.validate();
    BRAINWASH_REQUIRE(injection_rate >= 0.0 && injection_rate <= 1.0, "config: injection rate must be in [0, 1]");
    attack.validate();
    inversion.validate();
}

nlohmann::json ExperimentConfig::to_json() const {
    json v;
    v["method"] = brainwash::to_string(victim.method);
    v["lambda"] = victim.lambda ? json(*victim.lambda) : json("tuned");
    v["lambda_grid"] = victim.lambda_grid;
    v["learning_rate"] = victim.learning_rate;
    v["batch_size"] = victim.batch_size;
    v["epochs"] = victim.epochs;
    v["accumulation"] = brainwash::to_string(victim.accumulation);
    v["importance_samples"] = victim.importance_samples;

    json a = attack.to_json();
    a.erase("seed");
    a["source"] = brainwash::to_string(source);
    a["rate"] = injection_rate;
    json inv = inversion.to_json();
    inv.erase("seed");

    json j;
    j["version"] = kConfigVersion;
    j["dataset"] = dataset;
    j["num_tasks"] = num_tasks;
    j["arch"] = arch_to_json(arch);
    j["victim"] = v;
    j["attack"] = a;
    j["inversion"] = inv;
    j["seeds"] = {{"data", seeds.data}, {"model", seeds.model}, {"attack", seeds.attack}};
    if (!output_dir.empty()) j["output_dir"] = output_dir;
    return j;
}

namespace {

void require_known_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    BRAINWASH_REQUIRE(j.is_object(), "config: '" + where + "' must be an object");
    std::set<std::string> known(keys.begin(), keys.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        BRAINWASH_REQUIRE(known.count(it.key()) > 0, "config: unknown key '" + it.key() + "' in " + where);
    }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    try {
        require_known_keys(j, {"version", "dataset", "num_tasks", "arch", "victim", "attack", "inversion", "seeds",
                               "output_dir"},
                           "config");
        const int version = j.value("version", kConfigVersion);
        BRAINWASH_REQUIRE(version == kConfigVersion, "config: unsupported version " + std::to_string(version));
        ExperimentConfig c;
        c.dataset = j.value("dataset", c.dataset);
        c.num_tasks = j.value("num_tasks", c.num_tasks);
        if (j.contains("arch")) c.arch = arch_from_json(j.at("arch"));
        if (j.contains("victim")) {
            const auto& v = j.at("victim");
            require_known_keys(v, {"method", "lambda", "lambda_grid", "learning_rate", "batch_size", "epochs",
                                   "accumulation", "importance_samples"},
                               "victim");
            c.victim.method = method_from_string(v.value("method", std::string("ewc")));
            if (v.contains("lambda")) {
                const auto& l = v.at("lambda");
                if (l.is_string()) {
                    BRAINWASH_REQUIRE(l.get<std::string>() == "tuned", "config: λ must be a number or \"tuned\"");
                } else {
                    c.victim.lambda = l.get<double>();
                }
            }
            if (v.contains("lambda_grid")) c.victim.lambda_grid = v.at("lambda_grid").get<std::vector<double>>();
            c.victim.learning_rate = v.value("learning_rate", c.victim.learning_rate);
            c.victim.batch_size = v.value("batch_size", c.victim.batch_size);
            c.victim.epochs = v.value("epochs", c.victim.epochs);
            c.victim.accumulation = accumulation_from_string(v.value("accumulation", std::string("per_task_sum")));
            c.victim.importance_samples = v.value("importance_samples", c.victim.importance_samples);
        }
        if (j.contains("attack")) {
            const auto& a = j.at("attack");
            require_known_keys(a, {"source", "rate", "epsilon", "mode", "eta", "k", "outer_iterations", "outer_step",
                                   "inner_lr", "proxy_batch", "task_batch", "optimizer", "gradient", "bn_stats",
                                   "max_retries"},
                               "attack");
            c.source = proxy_source_from_string(a.value("source", std::string("inverted_reg")));
            c.injection_rate = a.value("rate", c.injection_rate);
            c.attack = AttackConfig::from_json(a);
        }
        if (j.contains("inversion")) {
            const auto& inv = j.at("inversion");
            require_known_keys(inv, {"samples", "alpha_tv", "alpha_l2", "alpha_f", "steps", "step_size",
                                     "label_sampling", "batch_size"},
                               "inversion");
            c.inversion = InversionConfig::from_json(inv);
        }
        if (j.contains("seeds")) {
            const auto& s = j.at("seeds");
            require_known_keys(s, {"data", "model", "attack"}, "seeds");
            c.seeds.data = s.value("data", c.seeds.data);
            c.seeds.model = s.value("model", c.seeds.model);
            c.seeds.attack = s.value("attack", c.seeds.attack);
        }
        c.output_dir = j.value("output_dir", std::string());
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
}

std::string ExperimentConfig::hash() const {
    auto j = to_json();
    j.erase("output_dir");
    return sha256_hex(j.dump());
}

std::string ExperimentConfig::attack_label() const {
    switch (source) {
        case ProxySource::none: return "clean";
        case ProxySource::uniform: return "uniform";
        default: break;
    }
    std::string label = brainwash::to_string(attack.mode);
    if (source != ProxySource::inverted_reg) label += "/" + brainwash::to_string(source);
    return label;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read config '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Records

namespace {

json metric(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double metric_from(const json& j, const char* key) {
    return j.contains(key) && !j.at(key).is_null() ? j.at(key).get<double>() : std::nan("");
}

}  // namespace

std::string ResultRecord::content_hash() const {
    json c;
    c["config_hash"] = config_hash;
    c["lambda"] = lambda;
    c["matrix"] = matrix.to_json();
    c["bwt"] = metric(bwt);
    c["forgetting"] = metric(forgetting);
    c["last_task_accuracy"] = metric(last_task_accuracy);
    c["average_past_accuracy"] = metric(average_past_accuracy);
    c["outer_trace_sha256"] = outer_trace_sha256;
    c["error"] = error ? json{{"stage", error->stage}, {"message", error->message}} : json(nullptr);
    return sha256_hex(c.dump());
}

nlohmann::json ResultRecord::to_json() const {
    json j;
    j["config_hash"] = config_hash;
    j["config"] = config;
    j["lambda"] = lambda;
    j["matrix"] = matrix.to_json();
    j["bwt"] = metric(bwt);
    j["forgetting"] = metric(forgetting);
    j["last_task_accuracy"] = metric(last_task_accuracy);
    j["average_past_accuracy"] = metric(average_past_accuracy);
    j["outer_trace_sha256"] = outer_trace_sha256;
    j["outer_trace_path"] = outer_trace_path;
    j["wall_clock_seconds"] = wall_clock_seconds;
    j["artifacts"] = artifacts;
    j["error"] = error ? json{{"stage", error->stage}, {"message", error->message}} : json(nullptr);
    j["content_hash"] = content_hash();
    return j;
}

ResultRecord ResultRecord::from_json(const nlohmann::json& j) {
    ResultRecord r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.config = j.at("config");
    r.lambda = j.at("lambda").get<double>();
    r.matrix = AccuracyMatrix::from_json(j.at("matrix"));
    r.bwt = metric_from(j, "bwt");
    r.forgetting = metric_from(j, "forgetting");
    r.last_task_accuracy = metric_from(j, "last_task_accuracy");
    r.average_past_accuracy = metric_from(j, "average_past_accuracy");
    r.outer_trace_sha256 = j.value("outer_trace_sha256", std::string());
    r.outer_trace_path = j.value("outer_trace_path", std::string());
    r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
    r.artifacts = j.value("artifacts", json::object());
    if (j.contains("error") && !j.at("error").is_null()) {
        r.error = StageError{j.at("error").at("stage").get<std::string>(), j.at("error").at("message").get<std::string>()};
    }
    return r;
}

// ---------------------------------------------------------------------------
// Artifact store

namespace {

void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp" + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw RuntimeFailure("cannot write '" + tmp + "'");
        out << text;
        if (!out) throw RuntimeFailure("write failed for '" + tmp + "'");
    }
    fs::rename(tmp, path);
}

template <class SaveFn>
void save_atomic(const fs::path& path, SaveFn&& save) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp" + std::to_string(::getpid());
    save(tmp);
    fs::rename(tmp, path);
}

std::string hash_json(const json& j) { return sha256_hex(j.dump()); }

}  // namespace

ArtifactStore::ArtifactStore(fs::path root) : root_(std::move(root)) {}

ArtifactStore ArtifactStore::for_config(const ExperimentConfig& cfg) {
    if (!cfg.output_dir.empty()) return ArtifactStore(cfg.output_dir);
    if (const char* env = std::getenv("BRAINWASH_ARTIFACTS"); env && *env) return ArtifactStore(env);
    return ArtifactStore("artifacts");
}

fs::path ArtifactStore::path(const std::string& kind, const std::string& key, const std::string& ext) const {
    return root_ / kind / (key + ext);
}

void ArtifactStore::append_index(const nlohmann::json& entry) const {
    fs::create_directories(root_);
    const auto file = root_ / "index.jsonl";
    const int fd = ::open(file.c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
    if (fd < 0) throw RuntimeFailure("cannot open index '" + file.string() + "'");
    if (::flock(fd, LOCK_EX) != 0) {
        ::close(fd);
        throw RuntimeFailure("cannot lock index '" + file.string() + "'");
    }
    const std::string line = entry.dump() + "\n";
    std::size_t written = 0;
    while (written < line.size()) {
        const auto n = ::write(fd, line.data() + written, line.size() - written);
        if (n <= 0) break;
        written += static_cast<std::size_t>(n);
    }
    ::flock(fd, LOCK_UN);
    ::close(fd);
    if (written != line.size()) throw RuntimeFailure("short write to index '" + file.string() + "'");
}

std::vector<nlohmann::json> ArtifactStore::read_index() const {
    std::vector<json> out;
    std::ifstream in(root_ / "index.jsonl");
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(json::parse(line));
    }
    return out;
}

std::vector<ResultRecord> ArtifactStore::records() const {
    std::vector<ResultRecord> out;
    for (const auto& e : read_index()) {
        if (e.value("type", std::string()) == "result") out.push_back(ResultRecord::from_json(e.at("record")));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pipeline stages

ModelSnapshot attacker_view(const ModelSnapshot& model) {
    ModelSnapshot m = model;
    m.lineage.clear();
    return m;
}

TrainConfig victim_train_config(const ExperimentConfig& cfg, double lambda) {
    TrainConfig tc;
    tc.method = cfg.victim.method;
    tc.lambda = lambda;
    tc.learning_rate = cfg.victim.learning_rate;
    tc.batch_size = cfg.victim.batch_size;
    tc.epochs = cfg.victim.epochs;
    tc.seed = cfg.seeds.model;
    tc.accumulation = cfg.victim.accumulation;
    tc.importance_samples = cfg.victim.importance_samples;
    return tc;
}

namespace {

json prefix_key_json(const ExperimentConfig& cfg, double lambda) {
    auto v = cfg.to_json().at("victim");
    v["lambda"] = lambda;
    v.erase("lambda_grid");
    return {{"dataset", cfg.dataset},   {"num_tasks", cfg.num_tasks},     {"arch", arch_to_json(cfg.arch)},
            {"victim", v},              {"data_seed", cfg.seeds.data},    {"model_seed", cfg.seeds.model}};
}

}  // namespace

VictimPrefix train_prefix(const ExperimentConfig& cfg, const TaskSequence& tasks, double lambda,
                          const ArtifactStore* store, bool reuse) {
    const int T = tasks.num_tasks();
    fs::path cache;
    if (store) {
        cache = store->path("prefix", hash_json(prefix_key_json(cfg, lambda)), ".bwta");
        if (reuse && fs::exists(cache)) {
            auto ck = load_checkpoint(cache);
            VictimPrefix p{std::move(ck.model), std::move(ck.states), AccuracyMatrix::from_json(ck.extra.at("matrix")),
                           lambda};
            if (p.model.num_heads() == T - 1) return p;
        }
    }
    const auto tc = victim_train_config(cfg, lambda);
    VictimPrefix p;
    p.lambda = lambda;
    p.model = init_model(cfg.arch, cfg.seeds.model);
    p.matrix = AccuracyMatrix(T);
    for (int t = 1; t < T; ++t) {
        auto out = train_task(p.model, tasks.train_task(t), p.states, tc);
        p.model = std::move(out.model);
        p.states.push_back(std::move(out.state));
        p.matrix.set_row(t, evaluate_matrix_row(p.model, tasks, t));
    }
    if (store) {
        save_atomic(cache, [&](const fs::path& tmp) {
            save_checkpoint(tmp, p.model, p.states, {{"matrix", p.matrix.to_json()}, {"lambda", lambda}});
        });
    }
    return p;
}

std::vector<SyntheticDataset> build_proxies(const ExperimentConfig& cfg, const TaskSequence& tasks,
                                            const ModelSnapshot& attacker_model) {
    std::vector<SyntheticDataset> out;
    const int T = tasks.num_tasks();
    if (cfg.source == ProxySource::none || cfg.source == ProxySource::uniform) return out;
    InversionConfig ic = cfg.inversion;
    ic.seed = derive_seed(cfg.seeds.attack, {0x1a7});
    if (cfg.source == ProxySource::inverted_noreg) ic.alpha_tv = ic.alpha_l2 = ic.alpha_f = 0.0;
    for (int t = 1; t < T; ++t) {
        if (cfg.source == ProxySource::real_data) {
            // Same budget as inversion: M real training samples per past task.
            const auto& task = tasks.train_task(t);
            auto perm = seeded_permutation(task.size(), derive_seed(cfg.seeds.attack, {0x4ea1, static_cast<std::uint64_t>(t)}));
            perm.resize(static_cast<std::size_t>(std::min(ic.samples, task.size())));
            SyntheticDataset d;
            d.task_id = t;
            d.images = gather(task.images, perm);
            for (int i : perm) d.labels.push_back(task.labels[static_cast<std::size_t>(i)]);
            d.num_classes = task.num_classes;
            d.config = ic;
            d.warnings.push_back("real training data");
            out.push_back(std::move(d));
        } else {
            out.push_back(invert_task(attacker_model, t, ic));
        }
    }
    return out;
}

namespace {

double mean_final_accuracy(const AccuracyMatrix& m) {
    const int T = m.size();
    double s = 0.0;
    for (int i = 1; i <= T; ++i) s += m.at(T, i);
    return s / T;
}

struct Clock {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

ResultRecord execute(const ExperimentConfig& cfg, const RunOptions& opts, const ArtifactStore& store, double lambda);

}  // namespace

double tune_lambda(const ExperimentConfig& cfg, const RunOptions& opts) {
    cfg.validate();
    const auto store = ArtifactStore::for_config(cfg);
    ExperimentConfig clean = cfg;
    clean.source = ProxySource::none;
    clean.victim.lambda.reset();
    const json key = {{"prefix", prefix_key_json(clean, 0.0)}, {"grid", clean.victim.lambda_grid}};
    const auto cache = store.path("tuning", hash_json(key), ".json");
    if (opts.reuse_artifacts && fs::exists(cache)) {
        std::ifstream in(cache);
        return json::parse(in).at("lambda").get<double>();
    }
    double best = clean.victim.lambda_grid.front();
    double best_score = -1.0;
    json scores = json::array();
    for (double l : clean.victim.lambda_grid) {
        ExperimentConfig c = clean;
        c.victim.lambda = l;
        const auto r = execute(c, opts, store, l);
        if (!r.ok()) throw RuntimeFailure("λ tuning failed at λ=" + std::to_string(l) + ": " + r.error->message);
        const double score = mean_final_accuracy(r.matrix);
        scores.push_back({{"lambda", l}, {"mean_final_accuracy", score}});
        if (score > best_score) {  // ties keep the smaller λ
            best_score = score;
            best = l;
        }
    }
    write_text_atomic(cache, json{{"lambda", best}, {"scores", scores}, {"key", key}}.dump(2));
    store.append_index({{"type", "tuning"}, {"key", hash_json(key)}, {"lambda", best}, {"scores", scores}});
    return best;
}

namespace {

ResultRecord execute(const ExperimentConfig& cfg, const RunOptions& opts, const ArtifactStore& store, double lambda) {
    Clock clock;
    ResultRecord rec;
    rec.config_hash = cfg.hash();
    rec.config = cfg.to_json();
    rec.lambda = lambda;
    rec.bwt = rec.forgetting = rec.last_task_accuracy = rec.average_past_accuracy = std::nan("");
    rec.outer_trace_sha256 = sha256_hex(json(rec.outer_trace).dump());
    const auto run_dir = store.root() / "runs" / rec.config_hash;
    std::string stage = "data";
    try {
        const auto catalog = DatasetCatalog::from_environment();
        const auto tasks = split_into_tasks(catalog, cfg.dataset, cfg.num_tasks, cfg.seeds.data);
        const int T = tasks.num_tasks();
        if (!(tasks.train_task(1).images.shape == cfg.arch.input)) {
            throw ValidationError("dataset '" + cfg.dataset + "' images do not match the architecture's input shape");
        }

        stage = "prefix";
        const auto prefix = train_prefix(cfg, tasks, lambda, &store, opts.reuse_artifacts);
        rec.artifacts["prefix"] = store.path("prefix", hash_json(prefix_key_json(cfg, lambda)), ".bwta").string();
        rec.matrix = prefix.matrix;

        const auto& clean_task = tasks.train_task(T);
        TaskDataset learn_task = clean_task;
        if (cfg.attacked()) {
            // Everything below sees the attacker's view only: no method tag, λ
            // or importance state.
            const auto view = attacker_view(prefix.model);
            const json prefix_key = prefix_key_json(cfg, lambda);
            const auto mask = select_injection_subset(clean_task, cfg.injection_rate,
                                                      derive_seed(cfg.seeds.attack, {0x3a5c}));
            NoisePack pack;
            std::vector<SyntheticDataset> proxies;
            json proxy_key = nullptr;
            if (cfg.source != ProxySource::uniform) {
                stage = "proxies";
                auto inv = cfg.to_json().at("inversion");
                proxy_key = {{"prefix", prefix_key}, {"source", to_string(cfg.source)}, {"inversion", inv},
                             {"attack_seed", cfg.seeds.attack}};
                const auto dir = store.root() / "proxies" / hash_json(proxy_key);
                bool cached = opts.reuse_artifacts;
                for (int t = 1; t < T && cached; ++t) cached = fs::exists(dir / ("task" + std::to_string(t) + ".bwta"));
                if (cached) {
                    for (int t = 1; t < T; ++t) proxies.push_back(load_synthetic(dir / ("task" + std::to_string(t) + ".bwta")));
                } else {
                    proxies = build_proxies(cfg, tasks, view);
                    for (const auto& p : proxies) {
                        save_atomic(dir / ("task" + std::to_string(p.task_id) + ".bwta"),
                                    [&](const fs::path& tmp) { save_synthetic(tmp, p); });
                    }
                }
                rec.artifacts["proxies"] = dir.string();
            }

            stage = "noise";
            auto attack_json = cfg.to_json().at("attack");
            const json noise_key = {{"prefix", prefix_key}, {"proxies", proxy_key}, {"attack", attack_json},
                                    {"attack_seed", cfg.seeds.attack}};
            const auto noise_path = store.path("noise", hash_json(noise_key), ".bwta");
            if (opts.reuse_artifacts && fs::exists(noise_path)) {
                pack = load_noise(noise_path);
            } else if (cfg.source == ProxySource::uniform) {
                pack = uniform_noise_baseline(clean_task, cfg.attack.epsilon, mask, derive_seed(cfg.seeds.attack, {0x0f}));
                save_atomic(noise_path, [&](const fs::path& tmp) { save_noise(tmp, pack); });
            } else {
                AttackConfig ac = cfg.attack;
                ac.seed = derive_seed(cfg.seeds.attack, {0xa77});
                pack = craft_noise(view, clean_task, proxies, mask, ac);
                save_atomic(noise_path, [&](const fs::path& tmp) { save_noise(tmp, pack); });
            }
            rec.artifacts["noise"] = noise_path.string();
            rec.outer_trace = pack.outer_trace;
            rec.outer_trace_sha256 = sha256_hex(json(rec.outer_trace).dump());
            learn_task = apply_noise(clean_task, pack);
        }

        stage = "learn";
        auto out = train_task(prefix.model, learn_task, prefix.states, victim_train_config(cfg, lambda));

        stage = "evaluate";
        rec.matrix.set_row(T, evaluate_matrix_row(out.model, tasks, T));
        rec.bwt = bwt(rec.matrix);
        rec.forgetting = forgetting(rec.matrix);
        rec.last_task_accuracy = last_task_accuracy(rec.matrix);
        rec.average_past_accuracy = average_past_accuracy(rec.matrix);

        stage = "persist";
        fs::create_directories(run_dir);
        const auto final_model = run_dir / "model.bwta";
        save_atomic(final_model, [&](const fs::path& tmp) { save_model(out.model, tmp); });
        rec.artifacts["final_model"] = final_model.string();
        rec.outer_trace_path = (run_dir / "outer_trace.json").string();
        write_text_atomic(rec.outer_trace_path, json(rec.outer_trace).dump());
    } catch (const std::exception& e) {
        rec.error = StageError{stage, e.what()};
    }
    rec.wall_clock_seconds = clock.seconds();
    return rec;
}

}  // namespace

ResultRecord run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
    cfg.validate();
    const auto store = ArtifactStore::for_config(cfg);
    const auto hash = cfg.hash();
    const auto record_path = store.root() / "runs" / hash / "record.json";
    if (opts.reuse_result && fs::exists(record_path)) {
        std::ifstream in(record_path);
        auto r = ResultRecord::from_json(json::parse(in));
        if (r.ok()) return r;
    }
    double lambda = 0.0;
    if (cfg.victim.lambda) {
        lambda = *cfg.victim.lambda;
    } else {
        try {
            lambda = tune_lambda(cfg, opts);
        } catch (const std::exception& e) {
            ResultRecord r;
            r.config_hash = hash;
            r.config = cfg.to_json();
            r.bwt = r.forgetting = r.last_task_accuracy = r.average_past_accuracy = std::nan("");
            r.error = StageError{"tune", e.what()};
            store.append_index({{"type", "result"}, {"record", r.to_json()}});
            return r;
        }
    }
    auto rec = execute(cfg, opts, store, lambda);
    try {
        write_text_atomic(record_path, rec.to_json().dump(2));
    } catch (const std::exception& e) {
        if (rec.ok()) rec.error = StageError{"persist", e.what()};
    }
    store.append_index({{"type", "result"}, {"record", rec.to_json()}});
    return rec;
}

// ---------------------------------------------------------------------------
// Sweeps

nlohmann::json SweepTable::to_json() const {
    json rows = json::array();
    for (const auto& c : cells) {
        json row = {{"axis", to_string(axis)}, {"value", c.axis_value}, {"config_hash", c.record.config_hash},
                    {"status", c.record.ok() ? "ok" : "failed"}};
        row["bwt"] = metric(c.record.bwt);
        row["forgetting"] = metric(c.record.forgetting);
        row["last_task_accuracy"] = metric(c.record.last_task_accuracy);
        row["average_past_accuracy"] = metric(c.record.average_past_accuracy);
        row["lambda"] = c.record.lambda;
        if (c.record.error) row["error"] = {{"stage", c.record.error->stage}, {"message", c.record.error->message}};
        rows.push_back(row);
    }
    return rows;
}

ExperimentConfig apply_axis(const ExperimentConfig& base, SweepAxis axis, const nlohmann::json& value) {
    ExperimentConfig c = base;
    try {
        switch (axis) {
            case SweepAxis::lambda:
                c.victim.lambda = value.get<double>();
                break;
            case SweepAxis::epsilon_rate:
                BRAINWASH_REQUIRE(value.is_array() && value.size() == 2, "sweep: epsilon_rate values are [ε, rate] pairs");
                c.attack.epsilon = value.at(0).get<double>();
                c.injection_rate = value.at(1).get<double>();
                break;
            case SweepAxis::num_tasks:
                c.num_tasks = value.get<int>();
                break;
            case SweepAxis::inversion_source:
                c.source = proxy_source_from_string(value.get<std::string>());
                break;
            case SweepAxis::eta:
                c.attack.mode = AttackMode::cautious;
                c.attack.eta = value.get<double>();
                break;
        }
    } catch (const json::exception& e) {
        throw ValidationError("sweep: bad grid value " + value.dump() + ": " + e.what());
    }
    c.validate();
    return c;
}

SweepTable sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<nlohmann::json>& grid,
                 const RunOptions& opts) {
    BRAINWASH_REQUIRE(!grid.empty(), "sweep: grid is empty");
    base.validate();
    SweepTable table;
    table.axis = axis;
    for (const auto& v : grid) {
        SweepCell cell;
        cell.axis_value = v;
        try {
            cell.record = run_experiment(apply_axis(base, axis, v), opts);
        } catch (const std::exception& e) {
            cell.record.config = base.to_json();
            cell.record.bwt = cell.record.forgetting = cell.record.last_task_accuracy =
                cell.record.average_past_accuracy = std::nan("");
            cell.record.error = StageError{"config", e.what()};
        }
        table.cells.push_back(std::move(cell));
    }
    return table;
}

// ---------------------------------------------------------------------------
// Reports

std::string format_cell(double bwt_value, double accuracy) {
    if (!std::isfinite(bwt_value) || !std::isfinite(accuracy)) return "n/a";
    char buf[64];
    double b = std::round(bwt_value * 1000.0) / 10.0;
    if (b == 0.0) b = 0.0;  // no "−0.0"
    std::snprintf(buf, sizeof buf, "%.1f (%.1f)", std::abs(b), accuracy * 100.0);
    return (b < 0.0 ? "−" : "") + std::string(buf);
}

namespace {

struct RecordView {
    std::string dataset, method, attack;
    int num_tasks = 0;
    double lambda = 0.0, epsilon = 0.0, eta = 0.0, rate = 0.0;
    std::uint64_t seed_data = 0, seed_model = 0, seed_attack = 0;
};

RecordView view_of(const ResultRecord& r) {
    RecordView v;
    const auto& c = r.config;
    if (c.is_object() && c.contains("dataset")) {
        auto cfg = ExperimentConfig::from_json(c);
        v.dataset = cfg.dataset;
        v.method = to_string(cfg.victim.method);
        v.attack = cfg.attack_label();
        v.num_tasks = cfg.num_tasks;
        v.epsilon = cfg.attacked() ? cfg.attack.epsilon : 0.0;
        v.eta = cfg.attacked() && cfg.attack.mode == AttackMode::cautious ? cfg.attack.eta : 0.0;
        v.rate = cfg.attacked() ? cfg.injection_rate : 0.0;
        v.seed_data = cfg.seeds.data;
        v.seed_model = cfg.seeds.model;
        v.seed_attack = cfg.seeds.attack;
    }
    v.lambda = r.lambda;
    return v;
}

std::string num(double v) {
    if (!std::isfinite(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string short_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;  // sorted by x
};

// Line chart with markers; x optionally on a log10 scale.
std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                       const std::vector<Series>& series, bool log_x) {
    const double W = 640, H = 400, L = 70, R = 160, Tm = 40, B = 60;
    double x0 = INFINITY, x1 = -INFINITY, y0 = 0.0, y1 = -INFINITY;
    auto tx = [&](double x) { return log_x ? std::log10(x) : x; };
    for (const auto& s : series) {
        for (auto [x, y] : s.points) {
            x0 = std::min(x0, tx(x));
            x1 = std::max(x1, tx(x));
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    if (!(x1 > x0)) { x0 -= 1; x1 += 1; }
    if (!(y1 > y0)) y1 = y0 + 1;
    y1 += 0.05 * (y1 - y0);
    auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - Tm - B); };
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title) << "</text>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double y = y0 + (y1 - y0) * i / 4.0;
        o << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << short_num(std::round(y * 10) / 10)
          << "</text>\n";
        o << "<line x1=\"" << L << "\" y1=\"" << py(y) << "\" x2=\"" << W - R << "\" y2=\"" << py(y)
          << "\" stroke=\"#ddd\"/>\n";
    }
    std::set<double> xs;
    for (const auto& s : series) for (auto [x, y] : s.points) xs.insert(x);
    for (double x : xs) {
        o << "<text x=\"" << px(x) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << short_num(x) << "</text>\n";
    }
    o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\">" << xml_escape(xlabel)
      << "</text>\n";
    o << "<text transform=\"translate(18," << (Tm + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << xml_escape(ylabel) << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto* color = kPalette[i % std::size(kPalette)];
        std::ostringstream pts;
        for (auto [x, y] : series[i].points) pts << px(x) << "," << py(y) << " ";
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << pts.str() << "\"/>\n";
        for (auto [x, y] : series[i].points) {
            o << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
        }
        const double ly = Tm + 18.0 * static_cast<double>(i);
        o << "<rect x=\"" << W - R + 14 << "\" y=\"" << ly << "\" width=\"12\" height=\"12\" fill=\"" << color << "\"/>\n";
        o << "<text x=\"" << W - R + 32 << "\" y=\"" << ly + 10 << "\">" << xml_escape(series[i].name) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

// Grouped bar chart: one group per label in `groups`, one bar per series.
std::string bar_chart(const std::string& title, const std::string& ylabel, const std::vector<std::string>& groups,
                      const std::vector<std::string>& bars, const std::map<std::pair<std::string, std::string>, double>& v) {
    const double W = 640, H = 400, L = 70, R = 160, Tm = 40, B = 60;
    double y0 = 0.0, y1 = 1.0;
    for (const auto& [k, y] : v) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
    }
    y1 += 0.05 * (y1 - y0);
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - Tm - B); };
    const double gw = (W - L - R) / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
    const double bw = 0.8 * gw / static_cast<double>(std::max<std::size_t>(bars.size(), 1));
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title) << "</text>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << py(0) << "\" x2=\"" << W - R << "\" y2=\"" << py(0) << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double y = y0 + (y1 - y0) * i / 4.0;
        o << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << short_num(std::round(y * 10) / 10)
          << "</text>\n";
    }
    o << "<text transform=\"translate(18," << (Tm + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << xml_escape(ylabel) << "</text>\n";
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double gx = L + gw * static_cast<double>(g) + 0.1 * gw;
        for (std::size_t b = 0; b < bars.size(); ++b) {
            auto it = v.find({groups[g], bars[b]});
            if (it == v.end()) continue;
            const double top = py(std::max(it->second, 0.0)), bottom = py(std::min(it->second, 0.0));
            o << "<rect x=\"" << gx + bw * static_cast<double>(b) << "\" y=\"" << top << "\" width=\"" << bw * 0.95
              << "\" height=\"" << bottom - top << "\" fill=\"" << kPalette[b % std::size(kPalette)] << "\"/>\n";
        }
        o << "<text x=\"" << L + gw * (static_cast<double>(g) + 0.5) << "\" y=\"" << H - B + 18
          << "\" text-anchor=\"middle\">" << xml_escape(groups[g]) << "</text>\n";
    }
    for (std::size_t b = 0; b < bars.size(); ++b) {
        const double ly = Tm + 18.0 * static_cast<double>(b);
        o << "<rect x=\"" << W - R + 14 << "\" y=\"" << ly << "\" width=\"12\" height=\"12\" fill=\""
          << kPalette[b % std::size(kPalette)] << "\"/>\n";
        o << "<text x=\"" << W - R + 32 << "\" y=\"" << ly + 10 << "\">" << xml_escape(bars[b]) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

struct Mean {
    double sum = 0.0;
    int n = 0;
    void add(double v) {
        if (std::isfinite(v)) {
            sum += v;
            ++n;
        }
    }
    double value() const { return n ? sum / n : std::nan(""); }
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

const std::vector<std::string> kCsvColumns = {
    "config_hash", "content_hash", "dataset",    "method",     "num_tasks",  "attack",
    "lambda",      "epsilon",      "eta",        "rate",       "seed_data",  "seed_model",
    "seed_attack", "bwt",          "forgetting", "last_task_accuracy", "average_past_accuracy", "status"};

}  // namespace

ReportFiles report(const std::vector<ResultRecord>& records, const fs::path& out_dir) {
    BRAINWASH_REQUIRE(!records.empty(), "report: no records");
    fs::create_directories(out_dir);
    ReportFiles files;
    std::vector<RecordView> views;
    for (const auto& r : records) views.push_back(view_of(r));

    // CSV, one row per record.
    {
        std::ostringstream o;
        for (std::size_t i = 0; i < kCsvColumns.size(); ++i) o << (i ? "," : "") << kCsvColumns[i];
        o << "\n";
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& r = records[i];
            const auto& v = views[i];
            o << r.config_hash << "," << r.content_hash() << "," << v.dataset << "," << v.method << "," << v.num_tasks
              << "," << v.attack << "," << num(v.lambda) << "," << num(v.epsilon) << "," << num(v.eta) << ","
              << num(v.rate) << "," << v.seed_data << "," << v.seed_model << "," << v.seed_attack << "," << num(r.bwt)
              << "," << num(r.forgetting) << "," << num(r.last_task_accuracy) << "," << num(r.average_past_accuracy)
              << "," << (r.ok() ? std::string("ok") : "failed:" + r.error->stage) << "\n";
        }
        files.csv = out_dir / "results.csv";
        write_text_atomic(files.csv, o.str());
    }

    // Markdown: rows dataset × method, columns attack (with ε), cells BWT (Acc) averaged over seeds.
    {
        std::vector<std::string> row_keys, col_keys;
        std::map<std::pair<std::string, std::string>, std::pair<Mean, Mean>> cells;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (!records[i].ok()) continue;
            const auto& v = views[i];
            const std::string row = v.dataset + " / " + v.method;
            std::string col = v.attack;
            if (v.attack != "clean") col += " ε=" + short_num(v.epsilon);
            if (v.rate != 0.0 && v.rate != 1.0) col += " rate=" + short_num(v.rate);
            if (std::find(row_keys.begin(), row_keys.end(), row) == row_keys.end()) row_keys.push_back(row);
            if (std::find(col_keys.begin(), col_keys.end(), col) == col_keys.end()) col_keys.push_back(col);
            auto& c = cells[{row, col}];
            c.first.add(records[i].bwt);
            c.second.add(records[i].last_task_accuracy);
        }
        std::ostringstream o;
        o << "# Results\n\nCells are BWT (accuracy of the last task), both in percent, averaged over seeds.\n\n";
        o << "| dataset / method |";
        for (const auto& c : col_keys) o << " " << c << " |";
        o << "\n|---|";
        for (std::size_t i = 0; i < col_keys.size(); ++i) o << "---|";
        o << "\n";
        for (const auto& r : row_keys) {
            o << "| " << r << " |";
            for (const auto& c : col_keys) {
                auto it = cells.find({r, c});
                o << " " << (it == cells.end() ? "" : format_cell(it->second.first.value(), it->second.second.value()))
                  << " |";
            }
            o << "\n";
        }
        const auto failed = std::count_if(records.begin(), records.end(), [](const auto& r) { return !r.ok(); });
        if (failed) o << "\n" << failed << " run(s) failed and are listed in results.csv.\n";
        files.markdown = out_dir / "results.md";
        write_text_atomic(files.markdown, o.str());
    }

    // Plots. Forgetting in percent, averaged over seeds.
    auto series_by = [&](auto key_of, auto x_of, auto filter) {
        std::map<std::string, std::map<double, Mean>> acc;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (!records[i].ok() || !filter(views[i])) continue;
            acc[key_of(views[i])][x_of(views[i])].add(100.0 * records[i].forgetting);
        }
        std::vector<Series> out;
        std::set<double> xs;
        for (auto& [name, pts] : acc) {
            Series s{name, {}};
            for (auto& [x, m] : pts) {
                s.points.push_back({x, m.value()});
                xs.insert(x);
            }
            out.push_back(std::move(s));
        }
        return std::make_pair(out, xs.size());
    };
    {
        auto [series, nx] = series_by([](const RecordView& v) { return v.attack; },
                                      [](const RecordView& v) { return v.lambda; },
                                      [](const RecordView& v) { return v.lambda > 0.0; });
        if (nx >= 2) {
            const auto p = out_dir / "forgetting_vs_lambda.svg";
            write_text_atomic(p, line_chart("Forgetting vs λ", "λ (log scale)", "forgetting (%)", series, true));
            files.plots.push_back(p);
        }
    }
    {
        auto [series, nx] = series_by([](const RecordView& v) { return v.attack + " ε=" + short_num(v.epsilon); },
                                      [](const RecordView& v) { return v.rate; },
                                      [](const RecordView& v) { return v.attack != "clean"; });
        if (nx >= 2) {
            const auto p = out_dir / "forgetting_vs_rate.svg";
            write_text_atomic(p, line_chart("Forgetting vs injection rate", "injection rate", "forgetting (%)", series, false));
            files.plots.push_back(p);
        }
    }
    {
        auto [series, nx] = series_by([](const RecordView& v) { return v.attack; },
                                      [](const RecordView& v) { return static_cast<double>(v.num_tasks); },
                                      [](const RecordView&) { return true; });
        if (nx >= 2) {
            const auto p = out_dir / "forgetting_vs_tasks.svg";
            write_text_atomic(p, line_chart("Forgetting vs number of tasks", "tasks", "forgetting (%)", series, false));
            files.plots.push_back(p);
        }
    }
    {
        std::vector<std::string> groups, bars;
        std::map<std::pair<std::string, std::string>, Mean> acc;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (!records[i].ok()) continue;
            const auto& v = views[i];
            if (std::find(groups.begin(), groups.end(), v.method) == groups.end()) groups.push_back(v.method);
            if (std::find(bars.begin(), bars.end(), v.attack) == bars.end()) bars.push_back(v.attack);
            acc[{v.method, v.attack}].add(100.0 * records[i].forgetting);
        }
        std::map<std::pair<std::string, std::string>, double> values;
        for (auto& [k, m] : acc) values[k] = m.value();
        const auto p = out_dir / "summary_bars.svg";
        write_text_atomic(p, bar_chart("Forgetting by method and attack", "forgetting (%)", groups, bars, values));
        files.plots.push_back(p);
    }
    return files;
}

std::vector<CsvRow> read_results_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw RuntimeFailure("cannot read '" + path.string() + "'");
    std::string line;
    std::getline(in, line);
    const auto header = split_csv_line(line);
    BRAINWASH_REQUIRE(header == kCsvColumns, "results CSV: unexpected header in '" + path.string() + "'");
    std::vector<CsvRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        BRAINWASH_REQUIRE(f.size() == kCsvColumns.size(), "results CSV: wrong field count");
        CsvRow r;
        r.config_hash = f[0];
        r.content_hash = f[1];
        r.dataset = f[2];
        r.method = f[3];
        r.num_tasks = std::stoi(f[4]);
        r.attack = f[5];
        r.lambda = std::stod(f[6]);
        r.epsilon = std::stod(f[7]);
        r.eta = std::stod(f[8]);
        r.rate = std::stod(f[9]);
        r.seed_data = std::stoull(f[10]);
        r.seed_model = std::stoull(f[11]);
        r.seed_attack = std::stoull(f[12]);
        r.bwt = std::stod(f[13]);
        r.forgetting = std::stod(f[14]);
        r.last_task_accuracy = std::stod(f[15]);
        r.average_past_accuracy = std::stod(f[16]);
        r.status = f[17];
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace brainwash
