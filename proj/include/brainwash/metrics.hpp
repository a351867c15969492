#pragma once

#include <optional>
#include <vector>

#include "brainwash/model.hpp"
#include "brainwash/task_data.hpp"
#include "json.hpp"

namespace brainwash {

// Lower-triangular accuracy matrix: A[t][i] is the accuracy on task i after
// learning task t (1-based, i <= t). Entries are fractions in [0,1];
// undefined entries are absent rather than zero.
class AccuracyMatrix {
public:
    AccuracyMatrix() = default;
    explicit AccuracyMatrix(int num_tasks);

    int size() const { return static_cast<int>(rows_.size()); }
    void set(int t, int i, double accuracy);
    void set_row(int t, const std::vector<double>& row);
    std::optional<double> get(int t, int i) const;
    double at(int t, int i) const;  // throws if absent
    bool has(int t, int i) const { return get(t, i).has_value(); }

    nlohmann::json to_json() const;  // explicit nulls for undefined entries
    static AccuracyMatrix from_json(const nlohmann::json& j);

    friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

private:
    std::vector<std::vector<std::optional<double>>> rows_;
};

// Accuracy of a head on one dataset, eval mode.
double task_accuracy(const ModelSnapshot& model, int head_id, const TaskDataset& data);

// A[t][1..t] on the test splits.
std::vector<double> evaluate_matrix_row(const ModelSnapshot& model, const TaskSequence& tasks, int t);

// Mean over i < T of A[T][i] - A[i][i].
double bwt(const AccuracyMatrix& m);
double forgetting(const AccuracyMatrix& m);
double last_task_accuracy(const AccuracyMatrix& m);
// Mean of A[T][i] over i < T.
double average_past_accuracy(const AccuracyMatrix& m);

}  // namespace brainwash
