#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "brainwash/tensor.hpp"

namespace brainwash {

enum class Split { train, test };

// Source dataset before task splitting: 8-bit pixels, global labels.
struct RawSplit {
    std::vector<std::uint8_t> pixels;  // [count, C, H, W]
    std::vector<int> labels;
    int count() const { return static_cast<int>(labels.size()); }
};

struct RawDataset {
    std::string name;
    ImageShape shape;
    std::vector<std::string> class_names;
    RawSplit train;
    RawSplit test;

    int num_classes() const { return static_cast<int>(class_names.size()); }
};

// One supervised classification task: images in [0,1], labels in [0, K).
struct TaskDataset {
    int task_id = 0;
    Tensor<double> images;
    std::vector<int> labels;
    int num_classes = 0;
    Split split = Split::train;
    // Row index of each sample in the source split it came from.
    std::vector<int> source_index;

    int size() const { return static_cast<int>(labels.size()); }
    // Throws ValidationError on any broken invariant.
    void validate() const;
};

struct ClassAssignment {
    int task_id = 0;
    int local_label = 0;
    friend bool operator==(const ClassAssignment&, const ClassAssignment&) = default;
};

struct TaskSequence {
    std::string dataset_id;
    std::uint64_t seed = 0;
    std::vector<TaskDataset> train;  // train[t-1] is task t
    std::vector<TaskDataset> test;
    std::map<int, ClassAssignment> class_map;  // global class -> (task, local label)

    int num_tasks() const { return static_cast<int>(train.size()); }
    const TaskDataset& train_task(int task_id) const;
    const TaskDataset& test_task(int task_id) const;
};

struct InjectionMask {
    int task_id = 0;
    std::vector<bool> selected;
    double rate = 0.0;
    std::uint64_t seed = 0;

    int count() const;
};

// raw / 255 elementwise; rejects values outside [0, 255].
Tensor<double> normalize_images(std::span<const int> raw, int count, ImageShape shape);
Tensor<double> normalize_images(std::span<const std::uint8_t> raw, int count, ImageShape shape);

// Seeded global class permutation, chunked contiguously into `num_tasks`
// class-disjoint tasks with local labels in [0, K_t).
TaskSequence split_into_tasks(const RawDataset& dataset, int num_tasks, std::uint64_t seed);

// Picks round(rate * N) samples uniformly without replacement.
InjectionMask select_injection_subset(const TaskDataset& task, double rate, std::uint64_t seed);

// Ingestion format: <dir>/manifest.json plus raw split files. See README.
struct ManifestSplit {
    std::string images_file;
    std::string labels_file;
    int count = 0;
    std::string images_sha256;
    std::string labels_sha256;
};

inline constexpr int kManifestVersion = 1;

// Loads an ingested dataset directory. When the manifest carries a single
// "all" split, a 5:1 stratified train/test split is drawn with split_seed.
RawDataset load_ingested(const std::filesystem::path& dir, std::uint64_t split_seed);
void write_ingested(const RawDataset& dataset, const std::filesystem::path& dir);

RawDataset stratified_split(const RawDataset& all_in_train, std::uint64_t seed);

// Gaussian blobs rendered as tiny single-channel images; deterministic.
RawDataset make_blobs(int num_classes, int per_class, ImageShape shape, std::uint64_t generator_seed);

// Converts the CIFAR-100 binary distribution (train.bin / test.bin) into the
// ingestion format.
void import_cifar100_binary(const std::filesystem::path& src, const std::filesystem::path& dst);

class DatasetCatalog {
public:
    explicit DatasetCatalog(std::filesystem::path root) : root_(std::move(root)) {}

    // Root from $BRAINWASH_DATA_ROOT, else the repository's data/ directory.
    static DatasetCatalog from_environment();

    // Known ids: digits, cifar100, mini_imagenet, tiny_imagenet (ingested
    // directories) and blobs / blobs-<K> (generated).
    RawDataset load(const std::string& dataset_id, std::uint64_t split_seed) const;
    bool known(const std::string& dataset_id) const;
    const std::filesystem::path& root() const { return root_; }

private:
    std::filesystem::path root_;
};

TaskSequence split_into_tasks(const DatasetCatalog& catalog, const std::string& dataset_id, int num_tasks,
                              std::uint64_t seed);

}  // namespace brainwash
