#include "brainwash/metrics.hpp"

namespace brainwash {

AccuracyMatrix::AccuracyMatrix(int num_tasks) {
    BRAINWASH_REQUIRE(num_tasks >= 1, "accuracy matrix needs at least one task");
    for (int t = 1; t <= num_tasks; ++t) rows_.emplace_back(static_cast<std::size_t>(t));
}

void AccuracyMatrix::set(int t, int i, double accuracy) {
    BRAINWASH_REQUIRE(t >= 1 && t <= size() && i >= 1 && i <= t, "accuracy matrix: index outside lower triangle");
    BRAINWASH_REQUIRE(accuracy >= 0.0 && accuracy <= 1.0, "accuracy matrix: entry outside [0,1]");
    rows_[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(i - 1)] = accuracy;
}

void AccuracyMatrix::set_row(int t, const std::vector<double>& row) {
    BRAINWASH_REQUIRE(static_cast<int>(row.size()) == t, "accuracy matrix: row length must equal t");
    for (int i = 1; i <= t; ++i) set(t, i, row[static_cast<std::size_t>(i - 1)]);
}

std::optional<double> AccuracyMatrix::get(int t, int i) const {
    if (t < 1 || t > size() || i < 1 || i > t) return std::nullopt;
    return rows_[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(i - 1)];
}

double AccuracyMatrix::at(int t, int i) const {
    const auto v = get(t, i);
    BRAINWASH_REQUIRE(v.has_value(), "accuracy matrix: missing entry A[" + std::to_string(t) + "][" +
                                         std::to_string(i) + "]");
    return *v;
}

nlohmann::json AccuracyMatrix::to_json() const {
    auto out = nlohmann::json::array();
    for (int t = 1; t <= size(); ++t) {
        auto row = nlohmann::json::array();
        for (int i = 1; i <= size(); ++i) {
            const auto v = get(t, i);
            row.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
        }
        out.push_back(row);
    }
    return out;
}

AccuracyMatrix AccuracyMatrix::from_json(const nlohmann::json& j) {
    AccuracyMatrix m(static_cast<int>(j.size()));
    for (int t = 1; t <= m.size(); ++t) {
        const auto& row = j.at(static_cast<std::size_t>(t - 1));
        for (int i = 1; i <= static_cast<int>(row.size()); ++i) {
            const auto& v = row.at(static_cast<std::size_t>(i - 1));
            if (v.is_null()) continue;
            m.set(t, i, v.get<double>());
        }
    }
    return m;
}

double task_accuracy(const ModelSnapshot& model, int head_id, const TaskDataset& data) {
    BRAINWASH_REQUIRE(data.size() > 0, "accuracy: empty dataset");
    // Chunked so memory stays bounded on large test splits.
    constexpr int kChunk = 256;
    int correct = 0;
    for (int start = 0; start < data.size(); start += kChunk) {
        const int end = std::min(data.size(), start + kChunk);
        std::vector<int> idx;
        for (int i = start; i < end; ++i) idx.push_back(i);
        const auto pred = predict(model, head_id, gather(data.images, idx));
        for (int i = start; i < end; ++i) correct += pred[static_cast<std::size_t>(i - start)] == data.labels[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(correct) / data.size();
}

std::vector<double> evaluate_matrix_row(const ModelSnapshot& model, const TaskSequence& tasks, int t) {
    BRAINWASH_REQUIRE(t >= 1 && model.num_heads() >= t, "evaluate: model lacks head " + std::to_string(t));
    std::vector<double> row;
    for (int i = 1; i <= t; ++i) row.push_back(task_accuracy(model, i, tasks.test_task(i)));
    return row;
}

double bwt(const AccuracyMatrix& m) {
    const int T = m.size();
    BRAINWASH_REQUIRE(T >= 2, "bwt needs at least two tasks");
    double sum = 0.0;
    for (int i = 1; i < T; ++i) sum += m.at(T, i) - m.at(i, i);
    return sum / (T - 1);
}

double forgetting(const AccuracyMatrix& m) { return -bwt(m); }

double last_task_accuracy(const AccuracyMatrix& m) { return m.at(m.size(), m.size()); }

double average_past_accuracy(const AccuracyMatrix& m) {
    const int T = m.size();
    BRAINWASH_REQUIRE(T >= 2, "average past accuracy needs at least two tasks");
    double sum = 0.0;
    for (int i = 1; i < T; ++i) sum += m.at(T, i);
    return sum / (T - 1);
}

}  // namespace brainwash
