#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "brainwash/model.hpp"
#include "brainwash/task_data.hpp"

namespace brainwash {

enum class ClMethod { ewc, mas, rwalk };

std::string to_string(ClMethod m);
ClMethod method_from_string(const std::string& s);

// How per-task importance states combine into the penalty.
enum class Accumulation {
    per_task_sum,     // one quadratic term per past task
    running_average,  // single term: mean Ω, latest anchor
};

std::string to_string(Accumulation a);
Accumulation accumulation_from_string(const std::string& s);

struct ImportanceState {
    ClMethod method = ClMethod::ewc;
    std::vector<double> omega;   // Ω >= 0, same length as θ
    std::vector<double> anchor;  // θ* after the task
    std::vector<double> rwalk_score;
    int task_id = 0;

    void validate(std::size_t theta_size) const;
    friend bool operator==(const ImportanceState&, const ImportanceState&) = default;
};

struct TrainConfig {
    ClMethod method = ClMethod::ewc;
    double lambda = 0.0;
    double learning_rate = 1e-2;
    int batch_size = 16;
    int epochs = 5;
    std::uint64_t seed = 0;
    Accumulation accumulation = Accumulation::per_task_sum;
    double rwalk_damping = 0.1;
    double rwalk_fisher_decay = 0.9;
    // 0 = use every training sample when estimating importance.
    int importance_samples = 0;

    void validate() const;
};

// λ · Σ_states Σ_j Ω_j (θ_j − θ*_j)².
double regularizer_penalty(std::span<const double> theta, std::span<const ImportanceState> states, double lambda);
// Adds 2λ Σ Ω ⊙ (θ − θ*) into `grad`.
void add_regularizer_gradient(std::span<const double> theta, std::span<const ImportanceState> states, double lambda,
                              std::span<double> grad);

// The state list the penalty actually uses under `mode`.
std::vector<ImportanceState> accumulate_states(std::span<const ImportanceState> states, Accumulation mode);

// EWC: diagonal empirical Fisher. MAS: mean |∂‖logits‖²/∂θ|. RWALK: Fisher
// plus the clamped path-integral score collected during training.
ImportanceState compute_importance(ClMethod method, const ModelSnapshot& model, int head_id, const TaskDataset& task,
                                   std::uint64_t seed, int max_samples = 0,
                                   std::span<const double> rwalk_score = {});

// Mini-batch index lists for one epoch, shuffled with (seed, epoch). A
// trailing batch of size 1 is merged into the previous one (BN needs >= 2).
std::vector<std::vector<int>> epoch_batches(int n, int batch_size, std::uint64_t seed, int epoch);

// One plain SGD step on the mean cross-entropy of `head` over the batch in
// train mode. Updates backbone, head and the BN running statistics in place.
// Returns the loss. Both the victim's training and the attacker's inner
// fine-tuning go through this step.
struct SgdStep {
    double loss = 0.0;
    std::vector<double> grad_backbone;
};
SgdStep sgd_step(const Architecture& arch, std::vector<double>& backbone, std::vector<double>& head, int num_classes,
                 std::vector<BnLayerStats>& bn_stats, const Tensor<double>& batch, std::span<const int> labels,
                 double learning_rate, std::span<const ImportanceState> states = {}, double lambda = 0.0);

// Momentum update of running (mean, unbiased variance) from a train-mode pass.
void update_running_stats(const Architecture& arch, std::vector<BnLayerStats>& stats,
                          const std::vector<BnCache<double>>& batch, int batch_size);

struct TrainOutcome {
    ModelSnapshot model;
    ImportanceState state;
    std::vector<double> loss_trace;  // per-epoch mean of task loss + penalty
};

// Adds head t = task.task_id, trains θ and ψ_t with SGD on L + λ·R_CL and
// returns the importance state for this task.
TrainOutcome train_task(const ModelSnapshot& model, const TaskDataset& task, std::span<const ImportanceState> states,
                        const TrainConfig& cfg);

// Checkpoint container: model plus the importance states needed to continue.
void save_checkpoint(const std::filesystem::path& path, const ModelSnapshot& model,
                     std::span<const ImportanceState> states, const nlohmann::json& extra = nlohmann::json::object());
struct Checkpoint {
    ModelSnapshot model;
    std::vector<ImportanceState> states;
    nlohmann::json extra;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace brainwash
