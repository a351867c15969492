#pragma once

// Poisoning noise for the newest task: maximize the loss on proxies of the
// past tasks after the model is fine-tuned on the poisoned data, with the
// fine-tuning approximated by k unrolled SGD steps. None of these functions
// take the victim's CL method, λ or importance state.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "brainwash/inversion.hpp"
#include "brainwash/model.hpp"
#include "brainwash/task_data.hpp"
#include "brainwash/unroll.hpp"

namespace brainwash {

enum class AttackMode { reckless, cautious };
enum class OuterOptimizer { adam, signed_gradient, gradient };
// BN statistics the outer loss evaluates with: those stored in θ*, or the
// statistics of the poisoned batch under θ̃ (what the running averages drift
// to when the poisoned task is learned).
enum class BnStatsModel { frozen, poisoned };

std::string to_string(AttackMode m);
AttackMode attack_mode_from_string(const std::string& s);
std::string to_string(OuterOptimizer o);
OuterOptimizer outer_optimizer_from_string(const std::string& s);
std::string to_string(UnrollGradient g);
UnrollGradient unroll_gradient_from_string(const std::string& s);
std::string to_string(BnStatsModel b);
BnStatsModel bn_stats_model_from_string(const std::string& s);

struct AttackConfig {
    double epsilon = 0.3;
    AttackMode mode = AttackMode::reckless;
    double eta = 0.1;  // cautious only
    int k = 1;
    int outer_iterations = 300;
    double outer_step = 0.05;
    double inner_lr = 1e-2;
    int proxy_batch = 32;  // per past task
    int task_batch = 32;
    std::uint64_t seed = 0;
    OuterOptimizer optimizer = OuterOptimizer::adam;
    UnrollGradient gradient = UnrollGradient::exact;
    BnStatsModel bn_stats = BnStatsModel::poisoned;
    int max_retries = 3;

    void validate() const;
    nlohmann::json to_json() const;
    static AttackConfig from_json(const nlohmann::json& j);
};

struct NoisePack {
    int task_id = 0;
    Tensor<double> deltas;  // [N_T, C, H, W]
    double epsilon = 0.0;
    AttackMode mode = AttackMode::reckless;
    double eta = 0.0;
    InjectionMask mask;
    int k = 1;
    double inner_lr = 0.0;
    int outer_iterations = 0;
    std::uint64_t seed = 0;
    std::string source = "brainwash";  // or "uniform"
    std::vector<double> outer_trace;

    // max|δ| <= ε, δ = 0 off the mask, reckless => η = 0.
    void validate() const;
};

// Elementwise clamp to [−ε, ε].
Tensor<double> project_linf(const Tensor<double>& delta, double epsilon);
void project_linf_inplace(std::span<double> delta, double epsilon);

// clamp(x + δ, 0, 1) on masked samples; other samples copied bitwise.
TaskDataset apply_noise(const TaskDataset& task, const NoisePack& pack);

// δ ~ U[−ε, ε] i.i.d. on masked samples.
NoisePack uniform_noise_baseline(const TaskDataset& task, double epsilon, const InjectionMask& mask,
                                 std::uint64_t seed);

// Inner problem: mean cross-entropy of (backbone ‖ new head) on a fixed
// labelled batch, train-mode BN. Parameters are θ followed by ψ_T.
class FineTuneProblem {
public:
    FineTuneProblem(Architecture arch, std::vector<BnLayerStats> stats, int num_classes, std::vector<int> labels);

    template <class T>
    T gradients(std::span<const T> p, std::span<const T> x, std::vector<T>& dp, std::vector<T>* dx) const;

    const Architecture& architecture() const { return arch_; }
    int num_classes() const { return num_classes_; }
    std::size_t param_size() const { return arch_.backbone_size + arch_.head_size(num_classes_); }

private:
    Architecture arch_;
    std::vector<BnLayerStats> stats_;
    int num_classes_;
    std::vector<int> labels_;
};

// Result of fine-tuning θ*_{1:T−1} and a fresh ψ_T for k steps on a
// poisoned batch; keeps the trajectory so ∂(outer)/∂batch can be formed.
struct UnrolledStep {
    FineTuneProblem problem;
    Tensor<double> batch;
    double inner_lr = 0.0;
    UnrollTrajectory trajectory;

    std::span<const double> theta() const;
    std::span<const double> head() const;
    // ∂O/∂batch given ∂O/∂θ̃ and ∂O/∂ψ̃_T.
    Tensor<double> input_gradient(std::span<const double> d_theta, std::span<const double> d_head,
                                  UnrollGradient mode) const;
};

// ψ_T is drawn with the add_head scheme from iter_seed.
UnrolledStep unrolled_inner_step(const ModelSnapshot& model, const Tensor<double>& poisoned_batch,
                                 std::span<const int> labels, int num_classes, const AttackConfig& cfg,
                                 std::uint64_t iter_seed);

struct ProxyBatch {
    int task_id = 0;
    Tensor<double> images;
    std::vector<int> labels;
    double weight = 1.0;  // number of samples the batch mean stands for
};

struct OuterValue {
    double value = 0.0;
    std::vector<double> d_theta;
    std::vector<double> d_head;  // ∂O/∂ψ̃_T (zero in reckless mode)
    Tensor<double> d_reference;  // ∂O/∂(BN reference batch); empty when frozen
};

// Reckless: Σ_t w_t · mean_j CE(x̂_t^j, ŷ_t^j; θ̃, ψ*_t) over past tasks.
// Cautious subtracts η · clean_weight · mean CE of the clean current-task
// batch under (θ̃, ψ̃_T). With the weights set to the dataset sizes this
// estimates the summed objective.
// With bn_reference null every term uses the statistics stored in the model;
// otherwise every term is normalized with the statistics of bn_reference
// under θ̃.
OuterValue outer_loss(const ModelSnapshot& model, std::span<const double> theta, std::span<const double> head,
                      int num_classes, std::span<const ProxyBatch> proxies, const Tensor<double>* clean_images,
                      std::span<const int> clean_labels, AttackMode mode, double eta,
                      const Tensor<double>* bn_reference = nullptr, double clean_weight = 1.0);

// Whole-dataset form: summed CE over every proxy sample and the whole clean
// task; the poisoned task (or the clean one when absent) is the BN reference.
double outer_loss(const ModelSnapshot& model, std::span<const double> theta, std::span<const double> head,
                  std::span<const SyntheticDataset> proxies, const TaskDataset& clean_task, const AttackConfig& cfg,
                  const TaskDataset* poisoned_task = nullptr);

// Past-task proxies must cover tasks 1..T−1 of a model with T−1 heads.
NoisePack craft_noise(const ModelSnapshot& model, const TaskDataset& task, std::span<const SyntheticDataset> proxies,
                      const InjectionMask& mask, const AttackConfig& cfg);

// Gradient of the outer objective with respect to δ on one batch (used by
// craft_noise and exposed for verification).
struct NoiseGradient {
    double value = 0.0;
    Tensor<double> d_delta;
};
NoiseGradient noise_gradient(const ModelSnapshot& model, const TaskDataset& task, const Tensor<double>& delta_batch,
                             std::span<const int> batch_indices, std::span<const ProxyBatch> proxies,
                             const AttackConfig& cfg, std::uint64_t iter_seed);

void save_noise(const std::filesystem::path& path, const NoisePack& pack);
NoisePack load_noise(const std::filesystem::path& path);

}  // namespace brainwash
