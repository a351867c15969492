#pragma once

// End-to-end experiments: victim prefix → proxies → noise → poisoned task →
// metrics, with every intermediate artifact cached under a hash-keyed store.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "brainwash/attack.hpp"
#include "brainwash/cl_trainer.hpp"
#include "brainwash/inversion.hpp"
#include "brainwash/metrics.hpp"
#include "json.hpp"

namespace brainwash {

inline constexpr int kConfigVersion = 1;

enum class ProxySource { inverted_reg, inverted_noreg, real_data, uniform, none };

std::string to_string(ProxySource s);
ProxySource proxy_source_from_string(const std::string& s);

struct VictimSpec {
    ClMethod method = ClMethod::ewc;
    std::optional<double> lambda;  // empty = tuned over lambda_grid
    std::vector<double> lambda_grid{1.0, 10.0, 100.0, 1000.0, 10000.0};
    double learning_rate = 1e-2;
    int batch_size = 16;
    int epochs = 5;
    Accumulation accumulation = Accumulation::per_task_sum;
    int importance_samples = 0;
};

struct Seeds {
    std::uint64_t data = 0;
    std::uint64_t model = 0;
    std::uint64_t attack = 0;
};

// Declarative experiment description; see README for the JSON schema.
struct ExperimentConfig {
    std::string dataset = "digits";
    int num_tasks = 5;
    ArchConfig arch;
    VictimSpec victim;
    ProxySource source = ProxySource::inverted_reg;
    double injection_rate = 1.0;
    AttackConfig attack;        // seed is overridden by seeds.attack
    InversionConfig inversion;  // seed is overridden by seeds.attack
    Seeds seeds;
    std::string output_dir;     // artifact root; empty = $BRAINWASH_ARTIFACTS or ./artifacts

    void validate() const;
    bool attacked() const { return source != ProxySource::none; }
    // Canonical JSON; `output_dir` is excluded from the hash.
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    std::string hash() const;
    // "clean", "uniform", "reckless", "cautious" (plus the proxy source when
    // it is not the default).
    std::string attack_label() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);

struct StageError {
    std::string stage;
    std::string message;
};

struct ResultRecord {
    std::string config_hash;
    nlohmann::json config;
    double lambda = 0.0;  // λ actually used by the victim
    AccuracyMatrix matrix;
    double bwt = 0.0;
    double forgetting = 0.0;
    double last_task_accuracy = 0.0;
    double average_past_accuracy = 0.0;
    std::vector<double> outer_trace;  // in memory only; persisted next to the record
    std::string outer_trace_sha256;
    std::string outer_trace_path;
    double wall_clock_seconds = 0.0;
    nlohmann::json artifacts = nlohmann::json::object();
    std::optional<StageError> error;

    bool ok() const { return !error.has_value(); }
    // Hash of the inputs and outcomes only: excludes wall-clock and paths.
    std::string content_hash() const;
    nlohmann::json to_json() const;
    static ResultRecord from_json(const nlohmann::json& j);
};

// Append-only, hash-keyed artifact tree with a flat JSON-lines index:
//   <root>/index.jsonl, prefix/, proxies/, noise/, runs/<hash>/, tuning/
class ArtifactStore {
public:
    explicit ArtifactStore(std::filesystem::path root);
    // cfg.output_dir, else $BRAINWASH_ARTIFACTS, else ./artifacts.
    static ArtifactStore for_config(const ExperimentConfig& cfg);

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path path(const std::string& kind, const std::string& key, const std::string& ext) const;
    // Appends one line under an exclusive file lock.
    void append_index(const nlohmann::json& entry) const;
    std::vector<nlohmann::json> read_index() const;
    std::vector<ResultRecord> records() const;

private:
    std::filesystem::path root_;
};

struct RunOptions {
    bool reuse_artifacts = true;  // prefix / proxies / noise caches
    bool reuse_result = false;    // return a stored record for the same config hash
};

// Victim trained on tasks 1..T−1, with the accuracy rows it produced.
struct VictimPrefix {
    ModelSnapshot model;
    std::vector<ImportanceState> states;
    AccuracyMatrix matrix;  // rows 1..T−1 filled
    double lambda = 0.0;
};

// The model as the attacker sees it: lineage (method tag, λ) removed.
ModelSnapshot attacker_view(const ModelSnapshot& model);

TrainConfig victim_train_config(const ExperimentConfig& cfg, double lambda);
VictimPrefix train_prefix(const ExperimentConfig& cfg, const TaskSequence& tasks, double lambda,
                          const ArtifactStore* store = nullptr, bool reuse = true);

// Proxies for tasks 1..T−1 per cfg.source (empty for uniform / none).
std::vector<SyntheticDataset> build_proxies(const ExperimentConfig& cfg, const TaskSequence& tasks,
                                            const ModelSnapshot& attacker_model);

// λ maximizing the clean run's mean final accuracy over cfg.victim.lambda_grid.
double tune_lambda(const ExperimentConfig& cfg, const RunOptions& opts = {});

// Never throws on pipeline failures: the record carries the failing stage.
// Invalid configs throw ValidationError before anything runs.
ResultRecord run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

enum class SweepAxis { lambda, epsilon_rate, num_tasks, inversion_source, eta };

std::string to_string(SweepAxis a);
SweepAxis sweep_axis_from_string(const std::string& s);

struct SweepCell {
    nlohmann::json axis_value;
    ResultRecord record;
};

struct SweepTable {
    SweepAxis axis = SweepAxis::lambda;
    std::vector<SweepCell> cells;
    nlohmann::json to_json() const;
};

// Applies one grid value to a copy of the base config. Grid values: numbers
// for lambda / num_tasks / eta, [ε, rate] pairs for epsilon_rate, source
// names for inversion_source.
ExperimentConfig apply_axis(const ExperimentConfig& base, SweepAxis axis, const nlohmann::json& value);

SweepTable sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<nlohmann::json>& grid,
                 const RunOptions& opts = {});

// Files written by report().
struct ReportFiles {
    std::filesystem::path csv;
    std::filesystem::path markdown;
    std::vector<std::filesystem::path> plots;
};

// "−5.2 (68.3)": BWT and accuracy in percentage points, one decimal.
std::string format_cell(double bwt, double accuracy);

ReportFiles report(const std::vector<ResultRecord>& records, const std::filesystem::path& out_dir);

// CSV row as written by report(); numbers round-trip exactly.
struct CsvRow {
    std::string config_hash;
    std::string content_hash;
    std::string dataset;
    std::string method;
    int num_tasks = 0;
    std::string attack;
    double lambda = 0.0;
    double epsilon = 0.0;
    double eta = 0.0;
    double rate = 0.0;
    std::uint64_t seed_data = 0;
    std::uint64_t seed_model = 0;
    std::uint64_t seed_attack = 0;
    double bwt = 0.0;
    double forgetting = 0.0;
    double last_task_accuracy = 0.0;
    double average_past_accuracy = 0.0;
    std::string status;
};

std::vector<CsvRow> read_results_csv(const std::filesystem::path& path);

}  // namespace brainwash
