#pragma once

#include "metactl/errors.hpp"
#include "metactl/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace metactl {

/// Time-aligned input/output record of one plant. Row t pairs the input u_t
/// that was applied over the interval ending at t with the output y_t it
/// produced; row 0 holds the initial output with the input held before start.
struct Trajectory {
    std::vector<Eigen::VectorXd> inputs;
    std::vector<Eigen::VectorXd> outputs;
    /// Either empty or one reference sample per row.
    std::vector<Eigen::VectorXd> references;
    double dt = 0.0;
    std::string plant_tag;

    std::size_t size() const { return outputs.size(); }
    bool empty() const { return outputs.empty(); }
    bool has_reference() const { return !references.empty(); }
    std::size_t input_dim() const { return inputs.empty() ? 0 : static_cast<std::size_t>(inputs.front().size()); }
    std::size_t output_dim() const { return outputs.empty() ? 0 : static_cast<std::size_t>(outputs.front().size()); }

    void push(Eigen::VectorXd u, Eigen::VectorXd y) {
        inputs.push_back(std::move(u));
        outputs.push_back(std::move(y));
    }

    /// Throws ContractError on ragged or misaligned rows.
    void validate() const;
};

using TrajectoryPtr = std::shared_ptr<const Trajectory>;

/// All trajectories collected from one system (one source task D^k).
struct TaskData {
    std::string id;
    double dt = 0.0;
    std::vector<TrajectoryPtr> trajectories;

    std::size_t total_rows() const;
};

/// D_source; a target dataset is a SourceDataset with a single task.
struct SourceDataset {
    std::vector<TaskData> tasks;

    std::size_t num_tasks() const { return tasks.size(); }
    /// Index of the task with this id, or -1.
    std::ptrdiff_t find(const std::string& id) const;
};

/// Index-range view of H past and T future rows of one trajectory:
/// past rows [start, start+H), future rows [start+H, start+H+T).
struct Window {
    std::size_t trajectory = 0;
    std::size_t start = 0;
    std::size_t history = 0;
    std::size_t horizon = 0;

    bool operator==(const Window&) const = default;
};

struct WindowList {
    std::vector<Window> windows;
    bool too_short = false;  ///< the trajectory could not hold a single window
};

/// Every stride-1 window of length H+T; max(0, L-H-T+1) of them.
WindowList make_windows(const Trajectory& traj, std::size_t history, std::size_t horizon,
                        std::size_t trajectory_index = 0);

/// Windows over every trajectory of a task (indices refer to task.trajectories).
std::vector<Window> make_windows(const TaskData& task, std::size_t history, std::size_t horizon);

/// Random disjoint split; the training side receives ceil(ratio * n) items,
/// capped so that both sides are non-empty.
template <class T>
std::pair<std::vector<T>, std::vector<T>> partition(const std::vector<T>& items, double ratio, Rng& rng) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw ContractError("partition: ratio must lie in (0, 1)");
    }
    const std::size_t n = items.size();
    if (n < 2) {
        throw ContractError("partition: need at least two samples to fill both splits");
    }
    auto n_train = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-12));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Fisher-Yates with an explicit draw so the split does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i);
        std::swap(order[i], order[pick(rng)]);
    }
    std::pair<std::vector<T>, std::vector<T>> out;
    out.first.reserve(n_train);
    out.second.reserve(n - n_train);
    for (std::size_t i = 0; i < n; ++i) {
        (i < n_train ? out.first : out.second).push_back(items[order[i]]);
    }
    return out;
}

/// One (y, u, y') tuple. With history stacking, `y` is [y_t; y_{t-1}; ...]
/// (newest first) and `y_next` the same stack one step later.
struct Transition {
    Eigen::VectorXd y;
    Eigen::VectorXd u_prev;  ///< u_t, the input in force before the decision
    Eigen::VectorXd u;       ///< u_{t+1}, the decision
    Eigen::VectorXd y_next;
    Eigen::VectorXd ref;       ///< reference at t (zeros without a reference)
    Eigen::VectorXd ref_next;  ///< reference at t+1

    bool operator==(const Transition& o) const {
        return y == o.y && u_prev == o.u_prev && u == o.u && y_next == o.y_next && ref == o.ref &&
               ref_next == o.ref_next;
    }
};

/// Consecutive transitions, L - stack_len of them. Requires L >= stack_len + 1.
std::vector<Transition> to_transitions(const Trajectory& traj, std::size_t stack_len);

inline constexpr int kDatasetFormatVersion = 1;

/// Directory layout: manifest.json plus task_<k>/traj_<i>.csv, rows
/// `t,u...,y...[,r...]` with 17 significant digits.
void save_dataset(const SourceDataset& ds, const std::filesystem::path& dir);
SourceDataset load_dataset(const std::filesystem::path& dir);

/// New dataset with `traj` appended to task `task_id` (created if absent).
/// Existing trajectories are shared, not copied. Throws DatasetError on a dt
/// mismatch with the task.
SourceDataset append_trajectory(const SourceDataset& ds, const std::string& task_id, Trajectory traj);

/// Append-only dataset shared between writers; readers take snapshots.
class SharedDataset {
public:
    explicit SharedDataset(SourceDataset initial = {});

    std::shared_ptr<const SourceDataset> snapshot() const;
    void append(const std::string& task_id, Trajectory traj);

private:
    mutable std::mutex mutex_;
    std::shared_ptr<const SourceDataset> current_;
};

// ---- small I/O helpers shared by the other file formats -------------------

/// Shortest text that parses back to the same double (17 significant digits).
std::string format_real(double x);

/// Write to a temporary sibling then rename over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

}  // namespace metactl
