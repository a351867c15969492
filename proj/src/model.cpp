#include "brainwash/model.hpp"

#include <algorithm>
#include <cmath>

#include "brainwash/archive.hpp"
#include "brainwash/rng.hpp"

namespace brainwash {

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "relu";
}

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw ValidationError("unknown activation '" + s + "'");
}

Architecture compile_architecture(const ArchConfig& config) {
    BRAINWASH_REQUIRE(config.input.size() > 0, "architecture: empty input shape");
    BRAINWASH_REQUIRE(std::all_of(config.widths.begin(), config.widths.end(), [](int w) { return w > 0; }),
                      "architecture: widths must be positive");
    Architecture arch;
    arch.config = config;
    ImageShape cur = config.input;
    std::size_t offset = 0;

    auto push = [&](LayerKind kind, ImageShape out, std::size_t params) {
        LayerSpec L{kind, cur, out, offset, params, -1};
        if (kind == LayerKind::batch_norm) {
            L.bn_index = static_cast<int>(arch.bn_channels.size());
            arch.bn_channels.push_back(cur.channels);
        }
        arch.layers.push_back(L);
        offset += params;
        cur = out;
    };
    auto push_activation = [&]() {
        if (config.activation == Activation::relu) push(LayerKind::relu, cur, 0);
        else if (config.activation == Activation::tanh) push(LayerKind::tanh, cur, 0);
    };

    if (config.arch_id == "convnet") {
        BRAINWASH_REQUIRE(!config.widths.empty(), "convnet needs at least one block");
        for (int w : config.widths) {
            const std::size_t weights = static_cast<std::size_t>(w) * cur.channels * 9;
            push(LayerKind::conv3x3, {w, cur.height, cur.width}, weights + (config.batch_norm ? 0 : w));
            if (config.batch_norm) push(LayerKind::batch_norm, cur, 2 * static_cast<std::size_t>(w));
            push_activation();
            if (cur.height >= 2 && cur.width >= 2) push(LayerKind::avg_pool2, {w, cur.height / 2, cur.width / 2}, 0);
        }
        push(LayerKind::global_avg_pool, {cur.channels, 1, 1}, 0);
    } else if (config.arch_id == "mlp") {
        for (int w : config.widths) {
            push(LayerKind::dense, {w, 1, 1}, static_cast<std::size_t>(w) * (cur.size() + 1));
            if (config.batch_norm) push(LayerKind::batch_norm, cur, 2 * static_cast<std::size_t>(w));
            push_activation();
        }
    } else {
        throw ValidationError("unknown arch_id '" + config.arch_id + "'");
    }
    arch.backbone_size = offset;
    arch.feature_dim = static_cast<int>(cur.size());
    return arch;
}

const HeadParams& ModelSnapshot::head(int head_id) const {
    BRAINWASH_REQUIRE(head_id >= 1 && head_id <= num_heads(), "model has no head " + std::to_string(head_id));
    return heads[static_cast<std::size_t>(head_id - 1)];
}

ParamRefs<double> ModelSnapshot::refs(int head_id) const {
    const auto& h = head(head_id);
    return {backbone, h.params, h.num_classes};
}

void ModelSnapshot::validate() const {
    const auto a = architecture();
    BRAINWASH_REQUIRE(backbone.size() == a.backbone_size, "model: backbone size does not match architecture");
    BRAINWASH_REQUIRE(heads.size() == lineage.size(), "model: head count differs from lineage length");
    BRAINWASH_REQUIRE(bn_stats.size() == a.bn_channels.size(), "model: BN layer count mismatch");
    for (std::size_t l = 0; l < bn_stats.size(); ++l) {
        const auto c = static_cast<std::size_t>(a.bn_channels[l]);
        BRAINWASH_REQUIRE(bn_stats[l].mean.size() == c && bn_stats[l].var.size() == c, "model: BN stats shape");
        for (double v : bn_stats[l].var) BRAINWASH_REQUIRE(v >= 0.0, "model: negative BN running variance");
    }
    auto finite = [](const std::vector<double>& v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    BRAINWASH_REQUIRE(finite(backbone), "model: non-finite backbone parameter");
    for (const auto& h : heads) {
        BRAINWASH_REQUIRE(h.num_classes >= 2, "model: head with fewer than 2 classes");
        BRAINWASH_REQUIRE(h.params.size() == a.head_size(h.num_classes), "model: head size mismatch");
        BRAINWASH_REQUIRE(finite(h.params), "model: non-finite head parameter");
    }
}

namespace {

void fill_uniform(std::span<double> out, double bound, Rng& rng) {
    for (auto& v : out) v = rng.uniform(-bound, bound);
}

}  // namespace

ModelSnapshot init_model(const ArchConfig& config, std::uint64_t seed) {
    const Architecture arch = compile_architecture(config);
    ModelSnapshot m;
    m.arch = config;
    m.backbone.assign(arch.backbone_size, 0.0);
    Rng rng(derive_seed(seed, {0xbac}));
    for (const auto& L : arch.layers) {
        std::span<double> p(m.backbone.data() + L.param_offset, L.param_count);
        switch (L.kind) {
            case LayerKind::conv3x3:
                fill_uniform(p, 1.0 / std::sqrt(static_cast<double>(L.in.channels * 9)), rng);
                break;
            case LayerKind::dense:
                fill_uniform(p, 1.0 / std::sqrt(static_cast<double>(L.in.size())), rng);
                break;
            case LayerKind::batch_norm: {
                const auto c = static_cast<std::size_t>(L.in.channels);
                std::fill(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(c), 1.0);
                std::fill(p.begin() + static_cast<std::ptrdiff_t>(c), p.end(), 0.0);
                break;
            }
            default: break;
        }
    }
    for (int c : arch.bn_channels) {
        m.bn_stats.push_back({std::vector<double>(static_cast<std::size_t>(c), 0.0),
                              std::vector<double>(static_cast<std::size_t>(c), 1.0)});
    }
    return m;
}

std::vector<double> init_head_params(const Architecture& arch, int num_classes, std::uint64_t seed) {
    std::vector<double> params(arch.head_size(num_classes));
    Rng rng(derive_seed(seed, {0x4ead}));
    fill_uniform(params, 1.0 / std::sqrt(static_cast<double>(arch.feature_dim)), rng);
    return params;
}

ModelSnapshot add_head(const ModelSnapshot& model, int num_classes, std::uint64_t seed) {
    BRAINWASH_REQUIRE(num_classes >= 2, "add_head: num_classes must be >= 2");
    ModelSnapshot out = model;
    out.heads.push_back({num_classes, init_head_params(model.architecture(), num_classes, seed)});
    out.lineage.push_back({out.num_heads(), "untrained", 0.0, ""});
    return out;
}

Tensor<double> forward(const ModelSnapshot& model, int head_id, const Tensor<double>& batch, Mode mode) {
    const auto arch = model.architecture();
    auto fp = forward_pass(arch, model.refs(head_id), model.bn_stats, batch, mode);
    return std::move(fp.logits);
}

int infer_num_classes(const ModelSnapshot& model, int head_id) { return model.head(head_id).num_classes; }

std::vector<int> predict(const ModelSnapshot& model, int head_id, const Tensor<double>& batch) {
    const auto logits = forward(model, head_id, batch, Mode::eval);
    const int K = logits.shape.channels;
    std::vector<int> out(static_cast<std::size_t>(logits.n));
    for (int b = 0; b < logits.n; ++b) {
        const double* z = logits.data.data() + static_cast<std::size_t>(b) * K;
        out[static_cast<std::size_t>(b)] = static_cast<int>(std::max_element(z, z + K) - z);
    }
    return out;
}

nlohmann::json arch_to_json(const ArchConfig& a) {
    return {{"arch_id", a.arch_id},
            {"widths", a.widths},
            {"batch_norm", a.batch_norm},
            {"activation", to_string(a.activation)},
            {"input", {a.input.channels, a.input.height, a.input.width}}};
}

ArchConfig arch_from_json(const nlohmann::json& j) {
    ArchConfig a;
    a.arch_id = j.value("arch_id", a.arch_id);
    if (j.contains("widths")) a.widths = j.at("widths").get<std::vector<int>>();
    a.batch_norm = j.value("batch_norm", a.batch_norm);
    a.activation = activation_from_string(j.value("activation", std::string("relu")));
    if (j.contains("input")) {
        const auto in = j.at("input").get<std::vector<int>>();
        BRAINWASH_REQUIRE(in.size() == 3, "arch.input must be [C,H,W]");
        a.input = {in[0], in[1], in[2]};
    }
    return a;
}

void write_model(TensorArchive& ar, const ModelSnapshot& model, const std::string& prefix) {
    auto& meta = ar.meta()["model"];
    meta["arch"] = arch_to_json(model.arch);
    meta["lineage"] = nlohmann::json::array();
    for (const auto& r : model.lineage) {
        meta["lineage"].push_back({{"task_id", r.task_id}, {"method", r.method}, {"lambda", r.lambda}, {"note", r.note}});
    }
    meta["head_classes"] = nlohmann::json::array();
    for (const auto& h : model.heads) meta["head_classes"].push_back(h.num_classes);
    meta["bn_layers"] = model.bn_stats.size();

    ar.put(prefix + "backbone", model.backbone);
    for (std::size_t t = 0; t < model.heads.size(); ++t) {
        ar.put(prefix + "head/" + std::to_string(t + 1), model.heads[t].params);
    }
    for (std::size_t l = 0; l < model.bn_stats.size(); ++l) {
        ar.put(prefix + "bn/" + std::to_string(l) + "/mean", model.bn_stats[l].mean);
        ar.put(prefix + "bn/" + std::to_string(l) + "/var", model.bn_stats[l].var);
    }
}

ModelSnapshot read_model(const TensorArchive& ar, const std::string& prefix) {
    const auto& meta = ar.meta().at("model");
    ModelSnapshot m;
    m.arch = arch_from_json(meta.at("arch"));
    for (const auto& r : meta.at("lineage")) {
        m.lineage.push_back({r.at("task_id").get<int>(), r.at("method").get<std::string>(), r.at("lambda").get<double>(),
                             r.at("note").get<std::string>()});
    }
    m.backbone = ar.doubles(prefix + "backbone");
    const auto classes = meta.at("head_classes").get<std::vector<int>>();
    for (std::size_t t = 0; t < classes.size(); ++t) {
        m.heads.push_back({classes[t], ar.doubles(prefix + "head/" + std::to_string(t + 1))});
    }
    const auto layers = meta.at("bn_layers").get<std::size_t>();
    for (std::size_t l = 0; l < layers; ++l) {
        m.bn_stats.push_back({ar.doubles(prefix + "bn/" + std::to_string(l) + "/mean"),
                              ar.doubles(prefix + "bn/" + std::to_string(l) + "/var")});
    }
    m.validate();
    return m;
}

void save_model(const ModelSnapshot& model, const std::filesystem::path& path) {
    TensorArchive ar;
    ar.meta()["kind"] = "checkpoint";
    write_model(ar, model);
    ar.save(path);
}

ModelSnapshot load_model(const std::filesystem::path& path) { return read_model(TensorArchive::load(path)); }

ModelSnapshot checkpoint_roundtrip(const ModelSnapshot& model, const std::filesystem::path& path) {
    save_model(model, path);
    return load_model(path);
}

}  // namespace brainwash
