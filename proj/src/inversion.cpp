#include "brainwash/inversion.hpp"

#include <algorithm>
#include <cmath>

#include "brainwash/archive.hpp"
#include "brainwash/rng.hpp"

namespace brainwash {

void InversionConfig::validate() const {
    BRAINWASH_REQUIRE(samples >= 1, "inversion: M must be >= 1");
    BRAINWASH_REQUIRE(alpha_tv >= 0.0 && alpha_l2 >= 0.0 && alpha_f >= 0.0, "inversion: coefficients must be >= 0");
    BRAINWASH_REQUIRE(steps >= 0, "inversion: steps must be >= 0");
    BRAINWASH_REQUIRE(step_size > 0.0, "inversion: step size must be > 0");
    BRAINWASH_REQUIRE(batch_size >= 0, "inversion: batch size must be >= 0");
}

nlohmann::json InversionConfig::to_json() const {
    return {{"samples", samples},   {"alpha_tv", alpha_tv},   {"alpha_l2", alpha_l2},
            {"alpha_f", alpha_f},   {"steps", steps},         {"step_size", step_size},
            {"seed", seed},         {"batch_size", batch_size},
            {"label_sampling", label_sampling == LabelSampling::balanced ? "balanced" : "uniform"}};
}

InversionConfig InversionConfig::from_json(const nlohmann::json& j) {
    InversionConfig c;
    c.samples = j.value("samples", c.samples);
    c.alpha_tv = j.value("alpha_tv", c.alpha_tv);
    c.alpha_l2 = j.value("alpha_l2", c.alpha_l2);
    c.alpha_f = j.value("alpha_f", c.alpha_f);
    c.steps = j.value("steps", c.steps);
    c.step_size = j.value("step_size", c.step_size);
    c.seed = j.value("seed", c.seed);
    c.batch_size = j.value("batch_size", c.batch_size);
    const auto ls = j.value("label_sampling", std::string("balanced"));
    if (ls == "balanced") c.label_sampling = LabelSampling::balanced;
    else if (ls == "uniform") c.label_sampling = LabelSampling::uniform;
    else throw ValidationError("unknown label_sampling '" + ls + "'");
    c.validate();
    return c;
}

TaskDataset SyntheticDataset::as_task() const {
    TaskDataset t;
    t.task_id = task_id;
    t.images = images;
    t.labels = labels;
    t.num_classes = num_classes;
    t.split = Split::train;
    return t;
}

double tv_norm(const Tensor<double>& x) {
    const int C = x.shape.channels, H = x.shape.height, W = x.shape.width;
    double total = 0.0;
    for (int b = 0; b < x.n; ++b) {
        for (int c = 0; c < C; ++c) {
            for (int y = 0; y < H; ++y) {
                for (int xx = 0; xx < W; ++xx) {
                    if (xx + 1 < W) total += std::abs(x.at(b, c, y, xx + 1) - x.at(b, c, y, xx));
                    if (y + 1 < H) total += std::abs(x.at(b, c, y + 1, xx) - x.at(b, c, y, xx));
                }
            }
        }
    }
    return total;
}

Tensor<double> tv_norm_gradient(const Tensor<double>& x) {
    const int C = x.shape.channels, H = x.shape.height, W = x.shape.width;
    Tensor<double> g(x.n, x.shape, 0.0);
    auto sign = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
    for (int b = 0; b < x.n; ++b) {
        for (int c = 0; c < C; ++c) {
            for (int y = 0; y < H; ++y) {
                for (int xx = 0; xx < W; ++xx) {
                    if (xx + 1 < W) {
                        const double s = sign(x.at(b, c, y, xx + 1) - x.at(b, c, y, xx));
                        g.at(b, c, y, xx + 1) += s;
                        g.at(b, c, y, xx) -= s;
                    }
                    if (y + 1 < H) {
                        const double s = sign(x.at(b, c, y + 1, xx) - x.at(b, c, y, xx));
                        g.at(b, c, y + 1, xx) += s;
                        g.at(b, c, y, xx) -= s;
                    }
                }
            }
        }
    }
    return g;
}

double l2_image_norm(const Tensor<double>& x) {
    double total = 0.0;
    for (int b = 0; b < x.n; ++b) {
        const double* s = x.sample(b);
        double sq = 0.0;
        for (std::size_t k = 0; k < x.sample_size(); ++k) sq += s[k] * s[k];
        total += std::sqrt(sq);
    }
    return total;
}

Tensor<double> l2_image_norm_gradient(const Tensor<double>& x) {
    Tensor<double> g(x.n, x.shape, 0.0);
    for (int b = 0; b < x.n; ++b) {
        const double* s = x.sample(b);
        double sq = 0.0;
        for (std::size_t k = 0; k < x.sample_size(); ++k) sq += s[k] * s[k];
        if (sq == 0.0) continue;
        const double inv = 1.0 / std::sqrt(sq);
        double* d = g.sample(b);
        for (std::size_t k = 0; k < x.sample_size(); ++k) d[k] = s[k] * inv;
    }
    return g;
}

namespace {

// Backbone-only parameter view: feature statistics do not depend on a head.
ParamRefs<double> backbone_refs(const ModelSnapshot& model) { return {model.backbone, {}, 0}; }

double stat_penalty_from_pass(const ForwardPass<double>& fp, const ModelSnapshot& model) {
    double total = 0.0;
    for (std::size_t l = 0; l < fp.bn.size(); ++l) {
        for (std::size_t c = 0; c < fp.bn[l].mean.size(); ++c) {
            const double dm = fp.bn[l].mean[c] - model.bn_stats[l].mean[c];
            const double dv = fp.bn[l].var[c] - model.bn_stats[l].var[c];
            total += dm * dm + dv * dv;
        }
    }
    return total;
}

}  // namespace

double feature_stat_penalty(const Tensor<double>& batch, const ModelSnapshot& model) {
    BRAINWASH_REQUIRE(batch.n >= 2, "feature statistics need a batch of at least 2 samples");
    const auto arch = model.architecture();
    const auto fp = forward_pass(arch, backbone_refs(model), model.bn_stats, batch, Mode::eval);
    return stat_penalty_from_pass(fp, model);
}

Tensor<double> feature_stat_gradient(const Tensor<double>& batch, const ModelSnapshot& model) {
    BRAINWASH_REQUIRE(batch.n >= 2, "feature statistics need a batch of at least 2 samples");
    const auto arch = model.architecture();
    const auto refs = backbone_refs(model);
    const auto fp = forward_pass(arch, refs, model.bn_stats, batch, Mode::eval);
    BackwardOptions opt;
    opt.backbone = false;
    opt.head = false;
    opt.input = true;
    opt.feature_stat_weight = 1.0;
    opt.stats = &model.bn_stats;
    Tensor<double> zero(batch.n, ImageShape{0, 1, 1});
    return backward_pass(arch, refs, fp, zero, opt).input;
}

SyntheticDataset invert_task(const ModelSnapshot& model, int head_id, const InversionConfig& cfg) {
    cfg.validate();
    const int K = infer_num_classes(model, head_id);
    const auto arch = model.architecture();
    const auto refs = model.refs(head_id);
    const bool has_bn = !arch.bn_channels.empty();
    const int M = cfg.samples;

    SyntheticDataset out;
    out.task_id = head_id;
    out.num_classes = K;
    out.config = cfg;
    const double alpha_f = has_bn ? cfg.alpha_f : 0.0;
    if (cfg.alpha_f > 0.0 && !has_bn) {
        out.warnings.push_back("feature-statistics term skipped: architecture has no batch normalization");
    }
    if (alpha_f > 0.0) {
        BRAINWASH_REQUIRE(cfg.effective_batch() >= 2, "inversion: feature statistics need batches of >= 2 samples");
    }

    Rng rng(derive_seed(cfg.seed, {0x1e7, static_cast<std::uint64_t>(head_id)}));
    out.images = Tensor<double>(M, model.arch.input);
    for (auto& v : out.images.data) v = rng.uniform();
    out.labels.resize(static_cast<std::size_t>(M));
    for (int i = 0; i < M; ++i) {
        out.labels[static_cast<std::size_t>(i)] =
            cfg.label_sampling == LabelSampling::balanced ? i % K : static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
    }

    const int batch = cfg.effective_batch();
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < M; start += batch) {
        std::vector<int> idx;
        for (int i = start; i < std::min(M, start + batch); ++i) idx.push_back(i);
        batches.push_back(std::move(idx));
    }

    // Objective and pixel gradient for one batch at the current images.
    auto evaluate = [&](const std::vector<int>& idx, Tensor<double>* grad) {
        const auto x = gather(out.images, idx);
        std::vector<int> y;
        for (int i : idx) y.push_back(out.labels[static_cast<std::size_t>(i)]);
        BackwardOptions opt;
        opt.backbone = false;
        opt.head = false;
        opt.input = grad != nullptr;
        opt.feature_stat_weight = alpha_f;
        opt.stats = &model.bn_stats;
        auto fp = forward_pass(arch, refs, model.bn_stats, x, Mode::eval);
        Tensor<double> dlogits;
        const double ce = cross_entropy(fp.logits, y, grad ? &dlogits : nullptr) * x.n;
        double value = ce;
        if (cfg.alpha_tv > 0.0) value += cfg.alpha_tv * tv_norm(x);
        if (cfg.alpha_l2 > 0.0) value += cfg.alpha_l2 * l2_image_norm(x);
        if (alpha_f > 0.0) value += alpha_f * stat_penalty_from_pass(fp, model);
        if (grad) {
            // Mean-CE gradients are rescaled to the summed objective.
            for (auto& d : dlogits.data) d *= x.n;
            *grad = backward_pass(arch, refs, fp, dlogits, opt).input;
            if (cfg.alpha_tv > 0.0) {
                const auto g = tv_norm_gradient(x);
                for (std::size_t k = 0; k < g.size(); ++k) grad->data[k] += cfg.alpha_tv * g.data[k];
            }
            if (cfg.alpha_l2 > 0.0) {
                const auto g = l2_image_norm_gradient(x);
                for (std::size_t k = 0; k < g.size(); ++k) grad->data[k] += cfg.alpha_l2 * g.data[k];
            }
        }
        return value;
    };

    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    std::vector<double> m1(out.images.size(), 0.0), m2(out.images.size(), 0.0);
    const std::size_t s = out.images.sample_size();
    for (int step = 0; step < cfg.steps; ++step) {
        double objective = 0.0;
        const double c1 = 1.0 - std::pow(kBeta1, step + 1);
        const double c2 = 1.0 - std::pow(kBeta2, step + 1);
        for (const auto& idx : batches) {
            Tensor<double> g;
            objective += evaluate(idx, &g);
            for (std::size_t r = 0; r < idx.size(); ++r) {
                const std::size_t base = static_cast<std::size_t>(idx[r]) * s;
                for (std::size_t k = 0; k < s; ++k) {
                    const double gk = g.data[r * s + k];
                    double& a = m1[base + k];
                    double& b = m2[base + k];
                    a = kBeta1 * a + (1.0 - kBeta1) * gk;
                    b = kBeta2 * b + (1.0 - kBeta2) * gk * gk;
                    double& px = out.images.data[base + k];
                    px = std::clamp(px - cfg.step_size * (a / c1) / (std::sqrt(b / c2) + kEps), 0.0, 1.0);
                }
            }
        }
        out.objective_trace.push_back(objective);
    }
    double final_objective = 0.0;
    for (const auto& idx : batches) final_objective += evaluate(idx, nullptr);
    out.objective_trace.push_back(final_objective);
    out.initial_objective = out.objective_trace.front();
    out.final_objective = final_objective;
    return out;
}

void save_synthetic(const std::filesystem::path& path, const SyntheticDataset& d) {
    TensorArchive ar;
    ar.meta()["kind"] = "synthetic_dataset";
    ar.meta()["task_id"] = d.task_id;
    ar.meta()["num_classes"] = d.num_classes;
    ar.meta()["config"] = d.config.to_json();
    ar.meta()["initial_objective"] = d.initial_objective;
    ar.meta()["final_objective"] = d.final_objective;
    ar.meta()["warnings"] = d.warnings;
    ar.meta()["image_shape"] = {d.images.shape.channels, d.images.shape.height, d.images.shape.width};
    ar.put("images", d.images.data, {d.images.n, d.images.shape.channels, d.images.shape.height, d.images.shape.width});
    std::vector<std::int64_t> labels(d.labels.begin(), d.labels.end());
    ar.put_ints("labels", labels);
    ar.put("objective_trace", d.objective_trace);
    ar.save(path);
}

SyntheticDataset load_synthetic(const std::filesystem::path& path) {
    const auto ar = TensorArchive::load(path);
    if (ar.meta().value("kind", std::string()) != "synthetic_dataset") {
        throw RuntimeFailure("'" + path.string() + "' is not a synthetic dataset");
    }
    SyntheticDataset d;
    d.task_id = ar.meta().at("task_id").get<int>();
    d.num_classes = ar.meta().at("num_classes").get<int>();
    d.config = InversionConfig::from_json(ar.meta().at("config"));
    d.initial_objective = ar.meta().at("initial_objective").get<double>();
    d.final_objective = ar.meta().at("final_objective").get<double>();
    d.warnings = ar.meta().at("warnings").get<std::vector<std::string>>();
    const auto shape = ar.shape("images");
    d.images = Tensor<double>(static_cast<int>(shape[0]),
                              ImageShape{static_cast<int>(shape[1]), static_cast<int>(shape[2]), static_cast<int>(shape[3])});
    d.images.data = ar.doubles("images");
    for (auto v : ar.ints("labels")) d.labels.push_back(static_cast<int>(v));
    d.objective_trace = ar.doubles("objective_trace");
    return d;
}

}  // namespace brainwash
