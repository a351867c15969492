#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "brainwash/model.hpp"
#include "brainwash/task_data.hpp"

namespace brainwash {

enum class LabelSampling { uniform, balanced };

struct InversionConfig {
    int samples = 128;  // M per task
    double alpha_tv = 1e-4;
    double alpha_l2 = 1e-5;
    double alpha_f = 1e-2;
    int steps = 300;
    double step_size = 0.01;  // Adam learning rate on the pixels
    std::uint64_t seed = 0;
    LabelSampling label_sampling = LabelSampling::balanced;
    int batch_size = 0;  // optimization batch; 0 = all M samples at once

    void validate() const;
    int effective_batch() const { return batch_size > 0 ? std::min(batch_size, samples) : samples; }
    nlohmann::json to_json() const;
    static InversionConfig from_json(const nlohmann::json& j);
};

// Proxy dataset D̂_t reconstructed from a frozen model.
struct SyntheticDataset {
    int task_id = 0;
    Tensor<double> images;
    std::vector<int> labels;
    int num_classes = 0;
    InversionConfig config;
    double initial_objective = 0.0;
    double final_objective = 0.0;
    std::vector<double> objective_trace;  // objective before each step, then the final value
    std::vector<std::string> warnings;

    TaskDataset as_task() const;
};

// Anisotropic total variation summed over batch and channels.
double tv_norm(const Tensor<double>& images);
// Subgradient; zero where neighbouring pixels are equal.
Tensor<double> tv_norm_gradient(const Tensor<double>& images);

// Sum over the batch of per-image ℓ2 norms.
double l2_image_norm(const Tensor<double>& images);
Tensor<double> l2_image_norm_gradient(const Tensor<double>& images);

// Σ_l ‖μ_l(batch) − m_l‖² + ‖σ²_l(batch) − v_l‖² over the BN layers, with
// the network in eval mode. Rejects batches of one sample.
double feature_stat_penalty(const Tensor<double>& batch, const ModelSnapshot& model);
Tensor<double> feature_stat_gradient(const Tensor<double>& batch, const ModelSnapshot& model);

// Inputs-only optimization against head `head_id`:
//   Σ CE(x, ŷ) + Σ (α_TV·TV(x) + α_ℓ2·‖x‖) + α_f·R_feat(batch)
// with Adam steps and clamping to [0,1] after each step.
SyntheticDataset invert_task(const ModelSnapshot& model, int head_id, const InversionConfig& cfg);

void save_synthetic(const std::filesystem::path& path, const SyntheticDataset& data);
SyntheticDataset load_synthetic(const std::filesystem::path& path);

}  // namespace brainwash
