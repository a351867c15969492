#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "brainwash/network.hpp"
#include "json.hpp"

namespace brainwash {

struct HeadParams {
    int num_classes = 0;
    std::vector<double> params;  // [K, F] weights then [K] bias
    friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

struct LineageRecord {
    int task_id = 0;
    std::string method = "untrained";
    double lambda = 0.0;
    std::string note;
    friend bool operator==(const LineageRecord&, const LineageRecord&) = default;
};

// Backbone θ, heads ψ_1..ψ_T, BN running statistics and training lineage.
// Treated as an immutable value: every training step returns a new snapshot.
struct ModelSnapshot {
    ArchConfig arch;
    std::vector<double> backbone;
    std::vector<HeadParams> heads;
    std::vector<BnLayerStats> bn_stats;
    std::vector<LineageRecord> lineage;

    int num_heads() const { return static_cast<int>(heads.size()); }
    const HeadParams& head(int head_id) const;
    Architecture architecture() const { return compile_architecture(arch); }
    ParamRefs<double> refs(int head_id) const;

    // Throws ValidationError when a structural invariant is broken.
    void validate() const;
    friend bool operator==(const ModelSnapshot&, const ModelSnapshot&) = default;
};

// Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for conv and
// dense weights and biases, BN gamma = 1, beta = 0, running stats (0, 1).
ModelSnapshot init_model(const ArchConfig& arch, std::uint64_t seed);

// Appends a freshly initialized head (same scheme as init_model).
ModelSnapshot add_head(const ModelSnapshot& model, int num_classes, std::uint64_t seed);
std::vector<double> init_head_params(const Architecture& arch, int num_classes, std::uint64_t seed);

// Logits [B, K] of head `head_id` (1-based). Train mode uses batch
// statistics in BN but never mutates the snapshot.
Tensor<double> forward(const ModelSnapshot& model, int head_id, const Tensor<double>& batch, Mode mode);

int infer_num_classes(const ModelSnapshot& model, int head_id);

std::vector<int> predict(const ModelSnapshot& model, int head_id, const Tensor<double>& batch);

nlohmann::json arch_to_json(const ArchConfig& arch);
ArchConfig arch_from_json(const nlohmann::json& j);

class TensorArchive;
void write_model(TensorArchive& ar, const ModelSnapshot& model, const std::string& prefix = "model/");
ModelSnapshot read_model(const TensorArchive& ar, const std::string& prefix = "model/");

void save_model(const ModelSnapshot& model, const std::filesystem::path& path);
ModelSnapshot load_model(const std::filesystem::path& path);
// Save then load; the result must equal `model` bitwise.
ModelSnapshot checkpoint_roundtrip(const ModelSnapshot& model, const std::filesystem::path& path);

}  // namespace brainwash
