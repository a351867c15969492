#include "brainwash/task_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>

#include "brainwash/archive.hpp"
#include "brainwash/rng.hpp"
#include "json.hpp"

#ifndef BRAINWASH_DEFAULT_DATA_ROOT
#define BRAINWASH_DEFAULT_DATA_ROOT "data"
#endif

namespace brainwash {

namespace fs = std::filesystem;

void TaskDataset::validate() const {
    BRAINWASH_REQUIRE(size() > 0, "task " + std::to_string(task_id) + " is empty");
    BRAINWASH_REQUIRE(images.n == size(), "task " + std::to_string(task_id) + ": image/label count mismatch");
    BRAINWASH_REQUIRE(num_classes >= 2, "task " + std::to_string(task_id) + ": needs at least 2 classes");
    for (double v : images.data) {
        BRAINWASH_REQUIRE(v >= 0.0 && v <= 1.0, "task " + std::to_string(task_id) + ": pixel outside [0,1]");
    }
    std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
    for (int y : labels) {
        BRAINWASH_REQUIRE(y >= 0 && y < num_classes, "task " + std::to_string(task_id) + ": label out of range");
        seen[static_cast<std::size_t>(y)] = true;
    }
    if (split == Split::train) {
        BRAINWASH_REQUIRE(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }),
                          "task " + std::to_string(task_id) + ": a class has no training example");
    }
}

const TaskDataset& TaskSequence::train_task(int task_id) const {
    BRAINWASH_REQUIRE(task_id >= 1 && task_id <= num_tasks(), "no task " + std::to_string(task_id));
    return train[static_cast<std::size_t>(task_id - 1)];
}

const TaskDataset& TaskSequence::test_task(int task_id) const {
    BRAINWASH_REQUIRE(task_id >= 1 && task_id <= static_cast<int>(test.size()), "no test split for task " +
                                                                                    std::to_string(task_id));
    return test[static_cast<std::size_t>(task_id - 1)];
}

int InjectionMask::count() const { return static_cast<int>(std::count(selected.begin(), selected.end(), true)); }

Tensor<double> normalize_images(std::span<const int> raw, int count, ImageShape shape) {
    BRAINWASH_REQUIRE(raw.size() == static_cast<std::size_t>(count) * shape.size(), "normalize: shape mismatch");
    Tensor<double> out(count, shape);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        BRAINWASH_REQUIRE(raw[i] >= 0 && raw[i] <= 255, "normalize: raw value outside [0,255]");
        out.data[i] = static_cast<double>(raw[i]) / 255.0;
    }
    return out;
}

Tensor<double> normalize_images(std::span<const std::uint8_t> raw, int count, ImageShape shape) {
    BRAINWASH_REQUIRE(raw.size() == static_cast<std::size_t>(count) * shape.size(), "normalize: shape mismatch");
    Tensor<double> out(count, shape);
    for (std::size_t i = 0; i < raw.size(); ++i) out.data[i] = static_cast<double>(raw[i]) / 255.0;
    return out;
}

namespace {

TaskDataset make_task(const RawDataset& ds, const RawSplit& split, Split tag, int task_id,
                      const std::vector<int>& classes) {
    std::map<int, int> local;
    for (std::size_t i = 0; i < classes.size(); ++i) local[classes[i]] = static_cast<int>(i);

    std::vector<int> rows;
    for (int i = 0; i < split.count(); ++i) {
        if (local.count(split.labels[static_cast<std::size_t>(i)])) rows.push_back(i);
    }
    TaskDataset task;
    task.task_id = task_id;
    task.split = tag;
    task.num_classes = static_cast<int>(classes.size());
    task.images = Tensor<double>(static_cast<int>(rows.size()), ds.shape);
    const std::size_t s = ds.shape.size();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::size_t src = static_cast<std::size_t>(rows[r]) * s;
        for (std::size_t k = 0; k < s; ++k) task.images.data[r * s + k] = split.pixels[src + k] / 255.0;
        task.labels.push_back(local.at(split.labels[static_cast<std::size_t>(rows[r])]));
    }
    task.source_index = std::move(rows);
    return task;
}

}  // namespace

TaskSequence split_into_tasks(const RawDataset& dataset, int num_tasks, std::uint64_t seed) {
    const int classes = dataset.num_classes();
    BRAINWASH_REQUIRE(num_tasks >= 1, "num_tasks must be >= 1");
    if (classes % num_tasks != 0) {
        throw ValidationError("cannot split " + std::to_string(classes) + " classes into " +
                              std::to_string(num_tasks) + " tasks: remainder " + std::to_string(classes % num_tasks));
    }
    const int per_task = classes / num_tasks;
    BRAINWASH_REQUIRE(per_task >= 2, "each task needs at least 2 classes");

    const std::vector<int> order = seeded_permutation(classes, seed);
    TaskSequence seq;
    seq.dataset_id = dataset.name;
    seq.seed = seed;
    for (int t = 0; t < num_tasks; ++t) {
        std::vector<int> chunk(order.begin() + t * per_task, order.begin() + (t + 1) * per_task);
        for (int j = 0; j < per_task; ++j) seq.class_map[chunk[static_cast<std::size_t>(j)]] = {t + 1, j};
        seq.train.push_back(make_task(dataset, dataset.train, Split::train, t + 1, chunk));
        seq.test.push_back(make_task(dataset, dataset.test, Split::test, t + 1, chunk));
        seq.train.back().validate();
    }
    return seq;
}

InjectionMask select_injection_subset(const TaskDataset& task, double rate, std::uint64_t seed) {
    BRAINWASH_REQUIRE(rate >= 0.0 && rate <= 1.0, "injection rate must lie in [0,1]");
    const int n = task.size();
    const int k = static_cast<int>(std::lround(rate * n));
    InjectionMask mask;
    mask.task_id = task.task_id;
    mask.rate = rate;
    mask.seed = seed;
    mask.selected.assign(static_cast<std::size_t>(n), false);

    // Partial Fisher-Yates: the first k slots of the shuffled prefix.
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (int i = 0; i < k; ++i) {
        const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(n - i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
        mask.selected[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = true;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Ingestion format

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> encode_labels(const std::vector<int>& labels) {
    std::vector<std::uint8_t> out;
    out.reserve(labels.size() * 4);
    for (int y : labels) {
        const auto u = static_cast<std::uint32_t>(y);
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>((u >> (8 * b)) & 0xFF));
    }
    return out;
}

std::vector<int> decode_labels(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() % 4 != 0) throw RuntimeFailure("label file size is not a multiple of 4");
    std::vector<int> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + static_cast<std::size_t>(b)]) << (8 * b);
        out[i] = static_cast<int>(u);
    }
    return out;
}

RawSplit read_split(const fs::path& dir, const nlohmann::json& entry, const RawDataset& ds) {
    const auto images_path = dir / entry.at("images").get<std::string>();
    const auto labels_path = dir / entry.at("labels").get<std::string>();
    const int count = entry.at("count").get<int>();
    auto pixels = read_bytes(images_path);
    auto label_bytes = read_bytes(labels_path);
    if (sha256_hex(pixels) != entry.at("images_sha256").get<std::string>()) {
        throw RuntimeFailure("checksum mismatch for '" + images_path.string() + "'");
    }
    if (sha256_hex(label_bytes) != entry.at("labels_sha256").get<std::string>()) {
        throw RuntimeFailure("checksum mismatch for '" + labels_path.string() + "'");
    }
    RawSplit split;
    split.pixels = std::move(pixels);
    split.labels = decode_labels(label_bytes);
    if (split.count() != count || split.pixels.size() != static_cast<std::size_t>(count) * ds.shape.size()) {
        throw RuntimeFailure("split size does not match manifest in '" + dir.string() + "'");
    }
    for (int y : split.labels) {
        if (y < 0 || y >= ds.num_classes()) throw RuntimeFailure("label out of range in '" + dir.string() + "'");
    }
    return split;
}

nlohmann::json write_split(const fs::path& dir, const std::string& tag, const RawSplit& split) {
    const auto labels = encode_labels(split.labels);
    write_bytes(dir / (tag + "_images.u8"), split.pixels);
    write_bytes(dir / (tag + "_labels.i32"), labels);
    return {{"images", tag + "_images.u8"},
            {"labels", tag + "_labels.i32"},
            {"count", split.count()},
            {"images_sha256", sha256_hex(split.pixels)},
            {"labels_sha256", sha256_hex(labels)}};
}

}  // namespace

RawDataset stratified_split(const RawDataset& all, std::uint64_t seed) {
    RawDataset out = all;
    out.train = {};
    out.test = {};
    const std::size_t s = all.shape.size();
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(all.num_classes()));
    for (int i = 0; i < all.train.count(); ++i) by_class[static_cast<std::size_t>(all.train.labels[static_cast<std::size_t>(i)])].push_back(i);

    std::vector<bool> is_test(static_cast<std::size_t>(all.train.count()), false);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto rows = by_class[c];
        Rng rng(derive_seed(seed, {0x5711, c}));
        rng.shuffle(rows);
        const auto n_test = static_cast<std::size_t>(std::lround(static_cast<double>(rows.size()) / 6.0));
        for (std::size_t j = 0; j < n_test; ++j) is_test[static_cast<std::size_t>(rows[j])] = true;
    }
    for (int i = 0; i < all.train.count(); ++i) {
        RawSplit& dst = is_test[static_cast<std::size_t>(i)] ? out.test : out.train;
        const auto* px = all.train.pixels.data() + static_cast<std::size_t>(i) * s;
        dst.pixels.insert(dst.pixels.end(), px, px + s);
        dst.labels.push_back(all.train.labels[static_cast<std::size_t>(i)]);
    }
    return out;
}

RawDataset load_ingested(const fs::path& dir, std::uint64_t split_seed) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw RuntimeFailure("dataset not available: missing '" + manifest_path.string() + "'");
    const auto manifest = nlohmann::json::parse(in);
    if (manifest.at("version").get<int>() != kManifestVersion) {
        throw RuntimeFailure("unsupported manifest version in '" + manifest_path.string() + "'");
    }
    if (manifest.at("dtype").get<std::string>() != "uint8") {
        throw RuntimeFailure("unsupported pixel dtype in '" + manifest_path.string() + "'");
    }
    RawDataset ds;
    ds.name = manifest.at("name").get<std::string>();
    const auto shape = manifest.at("image_shape").get<std::vector<int>>();
    if (shape.size() != 3) throw RuntimeFailure("image_shape must be [C,H,W]");
    ds.shape = {shape[0], shape[1], shape[2]};
    ds.class_names = manifest.at("classes").get<std::vector<std::string>>();

    const auto& splits = manifest.at("splits");
    if (splits.contains("train") && splits.contains("test")) {
        ds.train = read_split(dir, splits.at("train"), ds);
        ds.test = read_split(dir, splits.at("test"), ds);
        return ds;
    }
    if (splits.contains("all")) {
        ds.train = read_split(dir, splits.at("all"), ds);
        return stratified_split(ds, split_seed);
    }
    throw RuntimeFailure("manifest needs train+test or all splits: '" + manifest_path.string() + "'");
}

void write_ingested(const RawDataset& ds, const fs::path& dir) {
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["version"] = kManifestVersion;
    manifest["name"] = ds.name;
    manifest["image_shape"] = {ds.shape.channels, ds.shape.height, ds.shape.width};
    manifest["dtype"] = "uint8";
    manifest["classes"] = ds.class_names;
    manifest["splits"]["train"] = write_split(dir, "train", ds.train);
    manifest["splits"]["test"] = write_split(dir, "test", ds.test);
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2) << "\n";
}

RawDataset make_blobs(int num_classes, int per_class, ImageShape shape, std::uint64_t generator_seed) {
    BRAINWASH_REQUIRE(num_classes >= 2 && per_class >= 2, "blobs: need >= 2 classes and >= 2 samples per class");
    RawDataset all;
    all.name = "blobs-" + std::to_string(num_classes);
    all.shape = shape;
    for (int c = 0; c < num_classes; ++c) all.class_names.push_back("blob" + std::to_string(c));

    Rng rng(generator_seed);
    const std::size_t s = shape.size();
    std::vector<std::vector<double>> centers(static_cast<std::size_t>(num_classes), std::vector<double>(s));
    for (auto& center : centers) {
        for (auto& v : center) v = rng.uniform(0.2, 0.8);
    }
    for (int i = 0; i < per_class; ++i) {
        for (int c = 0; c < num_classes; ++c) {
            for (std::size_t k = 0; k < s; ++k) {
                const double v = centers[static_cast<std::size_t>(c)][k] + 0.12 * rng.normal();
                all.train.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
            }
            all.train.labels.push_back(c);
        }
    }
    return stratified_split(all, derive_seed(generator_seed, {0xb10b}));
}

void import_cifar100_binary(const fs::path& src, const fs::path& dst) {
    constexpr std::size_t kRecord = 2 + 3072;
    RawDataset ds;
    ds.name = "cifar100";
    ds.shape = {3, 32, 32};
    for (int c = 0; c < 100; ++c) ds.class_names.push_back("fine" + std::to_string(c));
    auto read = [&](const fs::path& file, RawSplit& split) {
        const auto bytes = read_bytes(file);
        if (bytes.size() % kRecord != 0) throw RuntimeFailure("unexpected CIFAR-100 file size: " + file.string());
        for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
            split.labels.push_back(bytes[off + 1]);
            split.pixels.insert(split.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 2),
                                bytes.begin() + static_cast<std::ptrdiff_t>(off + kRecord));
        }
    };
    read(src / "train.bin", ds.train);
    read(src / "test.bin", ds.test);
    write_ingested(ds, dst);
}

DatasetCatalog DatasetCatalog::from_environment() {
    if (const char* root = std::getenv("BRAINWASH_DATA_ROOT"); root && *root) return DatasetCatalog(root);
    return DatasetCatalog(BRAINWASH_DEFAULT_DATA_ROOT);
}

namespace {

int parse_blob_classes(const std::string& id) {
    if (id == "blobs") return 10;
    if (id.rfind("blobs-", 0) != 0) return -1;
    const std::string tail = id.substr(6);
    if (tail.empty() || !std::all_of(tail.begin(), tail.end(), ::isdigit)) return -1;
    return std::stoi(tail);
}

const std::vector<std::string> kIngested = {"digits", "cifar100", "mini_imagenet", "tiny_imagenet"};

}  // namespace

bool DatasetCatalog::known(const std::string& id) const {
    return parse_blob_classes(id) > 0 || std::find(kIngested.begin(), kIngested.end(), id) != kIngested.end();
}

RawDataset DatasetCatalog::load(const std::string& id, std::uint64_t split_seed) const {
    if (const int k = parse_blob_classes(id); k > 0) {
        return make_blobs(k, 60, {1, 4, 4}, derive_seed(0xb10b5, {static_cast<std::uint64_t>(k)}));
    }
    if (std::find(kIngested.begin(), kIngested.end(), id) == kIngested.end()) {
        throw ValidationError("unknown dataset id '" + id + "'");
    }
    return load_ingested(root_ / id, split_seed);
}

TaskSequence split_into_tasks(const DatasetCatalog& catalog, const std::string& dataset_id, int num_tasks,
                              std::uint64_t seed) {
    BRAINWASH_REQUIRE(catalog.known(dataset_id), "unknown dataset id '" + dataset_id + "'");
    return split_into_tasks(catalog.load(dataset_id, seed), num_tasks, seed);
}

}  // namespace brainwash
