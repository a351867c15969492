#include "brainwash/cl_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "brainwash/archive.hpp"
#include "brainwash/rng.hpp"

namespace brainwash {

std::string to_string(ClMethod m) {
    switch (m) {
        case ClMethod::ewc: return "ewc";
        case ClMethod::mas: return "mas";
        case ClMethod::rwalk: return "rwalk";
    }
    return "ewc";
}

ClMethod method_from_string(const std::string& s) {
    if (s == "ewc") return ClMethod::ewc;
    if (s == "mas") return ClMethod::mas;
    if (s == "rwalk") return ClMethod::rwalk;
    throw ValidationError("unknown CL method '" + s + "'");
}

std::string to_string(Accumulation a) {
    return a == Accumulation::per_task_sum ? "per_task_sum" : "running_average";
}

Accumulation accumulation_from_string(const std::string& s) {
    if (s == "per_task_sum") return Accumulation::per_task_sum;
    if (s == "running_average") return Accumulation::running_average;
    throw ValidationError("unknown accumulation mode '" + s + "'");
}

void ImportanceState::validate(std::size_t theta_size) const {
    BRAINWASH_REQUIRE(omega.size() == theta_size && anchor.size() == theta_size,
                      "importance state shape does not match θ");
    for (double w : omega) BRAINWASH_REQUIRE(w >= 0.0 && std::isfinite(w), "importance must be finite and >= 0");
}

void TrainConfig::validate() const {
    BRAINWASH_REQUIRE(lambda >= 0.0, "λ must be >= 0");
    BRAINWASH_REQUIRE(learning_rate > 0.0, "learning rate must be > 0");
    BRAINWASH_REQUIRE(batch_size >= 2, "batch size must be >= 2");
    BRAINWASH_REQUIRE(epochs >= 0, "epochs must be >= 0");
    BRAINWASH_REQUIRE(rwalk_damping > 0.0, "RWALK damping must be > 0");
}

double regularizer_penalty(std::span<const double> theta, std::span<const ImportanceState> states, double lambda) {
    double total = 0.0;
    for (const auto& s : states) {
        BRAINWASH_REQUIRE(s.omega.size() == theta.size() && s.anchor.size() == theta.size(),
                          "penalty: importance state shape does not match θ");
        double sum = 0.0;
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const double d = theta[j] - s.anchor[j];
            sum += s.omega[j] * d * d;
        }
        total += sum;
    }
    return lambda * total;
}

void add_regularizer_gradient(std::span<const double> theta, std::span<const ImportanceState> states, double lambda,
                              std::span<double> grad) {
    BRAINWASH_REQUIRE(grad.size() == theta.size(), "penalty gradient: shape mismatch");
    for (const auto& s : states) {
        BRAINWASH_REQUIRE(s.omega.size() == theta.size() && s.anchor.size() == theta.size(),
                          "penalty gradient: importance state shape does not match θ");
        for (std::size_t j = 0; j < theta.size(); ++j) grad[j] += 2.0 * lambda * s.omega[j] * (theta[j] - s.anchor[j]);
    }
}

std::vector<ImportanceState> accumulate_states(std::span<const ImportanceState> states, Accumulation mode) {
    if (mode == Accumulation::per_task_sum || states.size() <= 1) return {states.begin(), states.end()};
    ImportanceState merged = states.back();
    std::fill(merged.omega.begin(), merged.omega.end(), 0.0);
    for (const auto& s : states) {
        for (std::size_t j = 0; j < merged.omega.size(); ++j) merged.omega[j] += s.omega[j];
    }
    for (auto& w : merged.omega) w /= static_cast<double>(states.size());
    return {merged};
}

// ---------------------------------------------------------------------------

namespace {

std::vector<int> importance_rows(int n, int max_samples, std::uint64_t seed) {
    std::vector<int> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), 0);
    if (max_samples > 0 && max_samples < n) {
        Rng rng(derive_seed(seed, {0x1a1}));
        rng.shuffle(rows);
        rows.resize(static_cast<std::size_t>(max_samples));
        std::sort(rows.begin(), rows.end());
    }
    return rows;
}

}  // namespace

ImportanceState compute_importance(ClMethod method, const ModelSnapshot& model, int head_id, const TaskDataset& task,
                                   std::uint64_t seed, int max_samples, std::span<const double> rwalk_score) {
    const auto arch = model.architecture();
    const auto refs = model.refs(head_id);
    ImportanceState state;
    state.method = method;
    state.task_id = task.task_id;
    state.anchor = model.backbone;
    state.omega.assign(arch.backbone_size, 0.0);

    const auto rows = importance_rows(task.size(), max_samples, seed);
    BackwardOptions opt;
    opt.head = false;
    for (int r : rows) {
        const std::vector<int> one{r};
        const auto x = gather(task.images, one);
        auto fp = forward_pass(arch, refs, model.bn_stats, x, Mode::eval);
        Tensor<double> dlogits;
        if (method == ClMethod::mas) {
            // ∂‖z‖²/∂z = 2z
            dlogits = fp.logits;
            for (auto& v : dlogits.data) v *= 2.0;
        } else {
            const std::vector<int> y{task.labels[static_cast<std::size_t>(r)]};
            cross_entropy(fp.logits, std::span<const int>(y), &dlogits);
        }
        const auto g = backward_pass(arch, refs, fp, dlogits, opt);
        for (std::size_t j = 0; j < g.backbone.size(); ++j) {
            state.omega[j] += method == ClMethod::mas ? std::abs(g.backbone[j]) : g.backbone[j] * g.backbone[j];
        }
    }
    for (auto& w : state.omega) w /= static_cast<double>(rows.size());

    if (method == ClMethod::rwalk) {
        state.rwalk_score.assign(arch.backbone_size, 0.0);
        if (!rwalk_score.empty()) {
            BRAINWASH_REQUIRE(rwalk_score.size() == arch.backbone_size, "RWALK score shape does not match θ");
            state.rwalk_score.assign(rwalk_score.begin(), rwalk_score.end());
        }
        for (std::size_t j = 0; j < state.omega.size(); ++j) state.omega[j] += std::max(0.0, state.rwalk_score[j]);
    }
    return state;
}

std::vector<std::vector<int>> epoch_batches(int n, int batch_size, std::uint64_t seed, int epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, {0x0bde, static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < n; start += batch_size) {
        const int end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    if (batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back()[0]);
        batches.pop_back();
    }
    return batches;
}

void update_running_stats(const Architecture& arch, std::vector<BnLayerStats>& stats,
                          const std::vector<BnCache<double>>& batch, int batch_size) {
    for (const auto& L : arch.layers) {
        if (L.kind != LayerKind::batch_norm) continue;
        const auto l = static_cast<std::size_t>(L.bn_index);
        // Statistics pool every spatial position of the map.
        const int count = batch_size * L.in.height * L.in.width;
        const double unbias = count > 1 ? static_cast<double>(count) / (count - 1) : 1.0;
        for (std::size_t c = 0; c < stats[l].mean.size(); ++c) {
            stats[l].mean[c] = (1.0 - kBnMomentum) * stats[l].mean[c] + kBnMomentum * batch[l].mean[c];
            stats[l].var[c] = (1.0 - kBnMomentum) * stats[l].var[c] + kBnMomentum * batch[l].var[c] * unbias;
        }
    }
}

SgdStep sgd_step(const Architecture& arch, std::vector<double>& backbone, std::vector<double>& head, int num_classes,
                 std::vector<BnLayerStats>& bn_stats, const Tensor<double>& batch, std::span<const int> labels,
                 double learning_rate, std::span<const ImportanceState> states, double lambda) {
    ParamRefs<double> refs{backbone, head, num_classes};
    auto lg = classification_gradients(arch, refs, bn_stats, batch, labels, Mode::train, BackwardOptions{});
    if (!std::isfinite(lg.loss)) {
        std::ostringstream msg;
        msg << "non-finite training loss (" << lg.loss << ") at learning rate " << learning_rate;
        throw RuntimeFailure(msg.str());
    }
    update_running_stats(arch, bn_stats, lg.pass.bn, batch.n);

    if (lambda == 0.0 || states.empty()) {
        for (std::size_t j = 0; j < backbone.size(); ++j) backbone[j] -= learning_rate * lg.grads.backbone[j];
    } else {
        // Explicit step on the task loss, implicit (proximal) step on the
        // quadratic penalty; stable for any λ·Ω.
        for (std::size_t j = 0; j < backbone.size(); ++j) {
            double stiffness = 0.0;
            double pull = 0.0;
            for (const auto& s : states) {
                stiffness += s.omega[j];
                pull += s.omega[j] * s.anchor[j];
            }
            const double k = 2.0 * learning_rate * lambda;
            backbone[j] = (backbone[j] - learning_rate * lg.grads.backbone[j] + k * pull) / (1.0 + k * stiffness);
        }
    }
    for (std::size_t j = 0; j < head.size(); ++j) head[j] -= learning_rate * lg.grads.head[j];
    return {lg.loss, std::move(lg.grads.backbone)};
}

TrainOutcome train_task(const ModelSnapshot& model, const TaskDataset& task, std::span<const ImportanceState> states,
                        const TrainConfig& cfg) {
    cfg.validate();
    task.validate();
    const int t = task.task_id;
    BRAINWASH_REQUIRE(model.num_heads() == t - 1, "train_task: model must have heads 1.." + std::to_string(t - 1) +
                                                       " before task " + std::to_string(t));
    BRAINWASH_REQUIRE(task.images.shape == model.arch.input, "train_task: task image shape does not match the model");
    for (const auto& s : states) {
        BRAINWASH_REQUIRE(s.method == cfg.method, "train_task: importance state method " + to_string(s.method) +
                                                      " does not match " + to_string(cfg.method));
        s.validate(model.backbone.size());
    }
    const auto active = accumulate_states(states, cfg.accumulation);

    TrainOutcome out;
    out.model = add_head(model, task.num_classes, derive_seed(cfg.seed, {0x4ead, static_cast<std::uint64_t>(t)}));
    auto& m = out.model;
    auto& head = m.heads.back();
    const auto arch = m.architecture();

    std::vector<double> score, running_fisher;
    if (cfg.method == ClMethod::rwalk) {
        score.assign(arch.backbone_size, 0.0);
        running_fisher.assign(arch.backbone_size, 0.0);
    }

    const std::uint64_t order_seed = derive_seed(cfg.seed, {0x0bde, static_cast<std::uint64_t>(t)});
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double sum = 0.0;
        int steps = 0;
        for (const auto& idx : epoch_batches(task.size(), cfg.batch_size, order_seed, epoch)) {
            const auto x = gather(task.images, idx);
            std::vector<int> y;
            for (int i : idx) y.push_back(task.labels[static_cast<std::size_t>(i)]);
            const std::vector<double> before = cfg.method == ClMethod::rwalk ? m.backbone : std::vector<double>{};
            const auto step = sgd_step(arch, m.backbone, head.params, head.num_classes, m.bn_stats, x, y,
                                       cfg.learning_rate, active, cfg.lambda);
            sum += step.loss + (cfg.lambda > 0.0 ? regularizer_penalty(m.backbone, active, cfg.lambda) : 0.0);
            ++steps;
            if (cfg.method == ClMethod::rwalk) {
                for (std::size_t j = 0; j < score.size(); ++j) {
                    const double g = step.grad_backbone[j];
                    running_fisher[j] = cfg.rwalk_fisher_decay * running_fisher[j] + (1.0 - cfg.rwalk_fisher_decay) * g * g;
                    const double delta = m.backbone[j] - before[j];
                    score[j] += -g * delta / (0.5 * running_fisher[j] * delta * delta + cfg.rwalk_damping);
                }
            }
        }
        out.loss_trace.push_back(steps > 0 ? sum / steps : 0.0);
    }

    auto& rec = m.lineage.back();
    rec.method = to_string(cfg.method);
    rec.lambda = cfg.lambda;
    rec.note = "bn_running_stats=updated;accumulation=" + to_string(cfg.accumulation);
    out.state = compute_importance(cfg.method, m, t, task, cfg.seed, cfg.importance_samples, score);
    return out;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const ModelSnapshot& model,
                     std::span<const ImportanceState> states, const nlohmann::json& extra) {
    TensorArchive ar;
    ar.meta()["kind"] = "checkpoint";
    ar.meta()["extra"] = extra;
    write_model(ar, model);
    auto& meta = ar.meta()["importance"];
    meta = nlohmann::json::array();
    for (std::size_t s = 0; s < states.size(); ++s) {
        const auto& st = states[s];
        const std::string p = "importance/" + std::to_string(s) + "/";
        meta.push_back({{"method", to_string(st.method)}, {"task_id", st.task_id}});
        ar.put(p + "omega", st.omega);
        ar.put(p + "anchor", st.anchor);
        ar.put(p + "rwalk_score", st.rwalk_score);
    }
    ar.save(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto ar = TensorArchive::load(path);
    if (ar.meta().value("kind", std::string()) != "checkpoint") {
        throw RuntimeFailure("'" + path.string() + "' is not a checkpoint");
    }
    Checkpoint ck;
    ck.model = read_model(ar);
    ck.extra = ar.meta().value("extra", nlohmann::json::object());
    if (ar.meta().contains("importance")) {
        const auto& meta = ar.meta().at("importance");
        for (std::size_t s = 0; s < meta.size(); ++s) {
            const std::string p = "importance/" + std::to_string(s) + "/";
            ImportanceState st;
            st.method = method_from_string(meta[s].at("method").get<std::string>());
            st.task_id = meta[s].at("task_id").get<int>();
            st.omega = ar.doubles(p + "omega");
            st.anchor = ar.doubles(p + "anchor");
            st.rwalk_score = ar.doubles(p + "rwalk_score");
            ck.states.push_back(std::move(st));
        }
    }
    return ck;
}

}  // namespace brainwash
