#include "metactl/dataio.hpp"

#include <json.hpp>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace metactl {

namespace fs = std::filesystem;
using nlohmann::json;

void Trajectory::validate() const {
    if (inputs.size() != outputs.size()) {
        throw ContractError("trajectory has " + std::to_string(inputs.size()) + " inputs but " +
                            std::to_string(outputs.size()) + " outputs");
    }
    if (!references.empty() && references.size() != outputs.size()) {
        throw ContractError("trajectory reference column does not match its length");
    }
    for (std::size_t t = 1; t < outputs.size(); ++t) {
        if (inputs[t].size() != inputs[0].size() || outputs[t].size() != outputs[0].size() ||
            (!references.empty() && references[t].size() != references[0].size())) {
            throw ContractError("trajectory row " + std::to_string(t) + " has inconsistent dimensions");
        }
    }
}

std::size_t TaskData::total_rows() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) {
        n += t->size();
    }
    return n;
}

std::ptrdiff_t SourceDataset::find(const std::string& id) const {
    for (std::size_t k = 0; k < tasks.size(); ++k) {
        if (tasks[k].id == id) {
            return static_cast<std::ptrdiff_t>(k);
        }
    }
    return -1;
}

WindowList make_windows(const Trajectory& traj, std::size_t history, std::size_t horizon,
                        std::size_t trajectory_index) {
    if (history == 0 || horizon == 0) {
        throw ContractError("make_windows: history and horizon must be at least 1");
    }
    WindowList out;
    const std::size_t span = history + horizon;
    if (traj.size() < span) {
        out.too_short = true;
        return out;
    }
    const std::size_t count = traj.size() - span + 1;
    out.windows.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        out.windows.push_back({trajectory_index, s, history, horizon});
    }
    return out;
}

std::vector<Window> make_windows(const TaskData& task, std::size_t history, std::size_t horizon) {
    std::vector<Window> all;
    for (std::size_t i = 0; i < task.trajectories.size(); ++i) {
        WindowList w = make_windows(*task.trajectories[i], history, horizon, i);
        all.insert(all.end(), w.windows.begin(), w.windows.end());
    }
    return all;
}

std::vector<Transition> to_transitions(const Trajectory& traj, std::size_t stack_len) {
    if (stack_len == 0) {
        throw ContractError("to_transitions: stack length must be at least 1");
    }
    if (traj.size() < stack_len + 1) {
        throw ContractError("to_transitions: trajectory shorter than stack length + 1");
    }
    const auto m = static_cast<Eigen::Index>(traj.output_dim());
    const auto s = static_cast<Eigen::Index>(stack_len);
    auto stack_at = [&](std::size_t t) {
        Eigen::VectorXd y(m * s);
        for (Eigen::Index k = 0; k < s; ++k) {
            y.segment(k * m, m) = traj.outputs[t - static_cast<std::size_t>(k)];
        }
        return y;
    };
    auto ref_at = [&](std::size_t t) -> Eigen::VectorXd {
        return traj.has_reference() ? traj.references[t] : Eigen::VectorXd::Zero(m);
    };
    std::vector<Transition> out;
    out.reserve(traj.size() - stack_len);
    for (std::size_t t = stack_len - 1; t + 1 < traj.size(); ++t) {
        out.push_back({stack_at(t), traj.inputs[t], traj.inputs[t + 1], stack_at(t + 1), ref_at(t), ref_at(t + 1)});
    }
    return out;
}

// ---- persistence ----------------------------------------------------------

std::string format_real(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

void write_file_atomic(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DatasetError(DatasetError::Kind::Io, "cannot write " + tmp.string());
        }
        out << content;
        if (!out) {
            throw DatasetError(DatasetError::Kind::Io, "write failed for " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DatasetError(DatasetError::Kind::Io, "cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

std::string trajectory_csv(const Trajectory& traj) {
    std::string out = "t";
    for (std::size_t i = 0; i < traj.input_dim(); ++i) out += ",u" + std::to_string(i);
    for (std::size_t i = 0; i < traj.output_dim(); ++i) out += ",y" + std::to_string(i);
    if (traj.has_reference()) {
        for (std::size_t i = 0; i < traj.output_dim(); ++i) out += ",r" + std::to_string(i);
    }
    out += '\n';
    for (std::size_t t = 0; t < traj.size(); ++t) {
        out += std::to_string(t);
        for (Eigen::Index i = 0; i < traj.inputs[t].size(); ++i) out += ',' + format_real(traj.inputs[t](i));
        for (Eigen::Index i = 0; i < traj.outputs[t].size(); ++i) out += ',' + format_real(traj.outputs[t](i));
        if (traj.has_reference()) {
            for (Eigen::Index i = 0; i < traj.references[t].size(); ++i) {
                out += ',' + format_real(traj.references[t](i));
            }
        }
        out += '\n';
    }
    return out;
}

[[noreturn]] void malformed(const fs::path& file, const std::string& why) {
    throw DatasetError(DatasetError::Kind::Malformed, file.string() + ": " + why);
}

double parse_real(const std::string& field, const fs::path& file, std::size_t line) {
    if (field.empty()) {
        malformed(file, "empty field on line " + std::to_string(line));
    }
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(field.c_str(), &end);
    if (end != field.c_str() + field.size() || errno == ERANGE) {
        malformed(file, "bad number '" + field + "' on line " + std::to_string(line));
    }
    return v;
}

Trajectory parse_trajectory_csv(const fs::path& file, std::size_t rows, std::size_t p, std::size_t m, bool has_ref,
                                double dt, const std::string& tag) {
    const std::string text = read_file(file);
    if (text.empty() || text.back() != '\n') {
        malformed(file, "file does not end with a complete line");
    }
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);  // header
    const std::size_t expected_fields = 1 + p + m + (has_ref ? m : 0);
    Trajectory traj;
    traj.dt = dt;
    traj.plant_tag = tag;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        std::vector<std::string> fields;
        std::string field;
        std::istringstream ls(line);
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() != expected_fields) {
            malformed(file, "line " + std::to_string(lineno) + " has " + std::to_string(fields.size()) +
                                " fields, expected " + std::to_string(expected_fields));
        }
        Eigen::VectorXd u(static_cast<Eigen::Index>(p));
        Eigen::VectorXd y(static_cast<Eigen::Index>(m));
        std::size_t c = 1;
        for (std::size_t i = 0; i < p; ++i) u(static_cast<Eigen::Index>(i)) = parse_real(fields[c++], file, lineno);
        for (std::size_t i = 0; i < m; ++i) y(static_cast<Eigen::Index>(i)) = parse_real(fields[c++], file, lineno);
        traj.push(std::move(u), std::move(y));
        if (has_ref) {
            Eigen::VectorXd r(static_cast<Eigen::Index>(m));
            for (std::size_t i = 0; i < m; ++i) r(static_cast<Eigen::Index>(i)) = parse_real(fields[c++], file, lineno);
            traj.references.push_back(std::move(r));
        }
    }
    if (traj.size() != rows) {
        malformed(file, "expected " + std::to_string(rows) + " rows, found " + std::to_string(traj.size()));
    }
    return traj;
}

}  // namespace

void save_dataset(const SourceDataset& ds, const fs::path& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "metactl.dataset";
    manifest["version"] = kDatasetFormatVersion;
    json tasks = json::array();
    std::size_t input_dim = 0;
    std::size_t output_dim = 0;
    for (std::size_t k = 0; k < ds.tasks.size(); ++k) {
        const TaskData& task = ds.tasks[k];
        const std::string task_dir = "task_" + std::to_string(k);
        json jt;
        jt["id"] = task.id;
        jt["dt"] = task.dt;
        jt["dir"] = task_dir;
        jt["rows"] = task.total_rows();
        json trajs = json::array();
        for (std::size_t i = 0; i < task.trajectories.size(); ++i) {
            const Trajectory& traj = *task.trajectories[i];
            traj.validate();
            if (!traj.empty()) {
                input_dim = traj.input_dim();
                output_dim = traj.output_dim();
            }
            const std::string file = "traj_" + std::to_string(i) + ".csv";
            write_file_atomic(dir / task_dir / file, trajectory_csv(traj));
            trajs.push_back({{"file", file},
                             {"rows", traj.size()},
                             {"input_dim", traj.input_dim()},
                             {"output_dim", traj.output_dim()},
                             {"has_reference", traj.has_reference()},
                             {"plant_tag", traj.plant_tag}});
        }
        jt["trajectories"] = std::move(trajs);
        tasks.push_back(std::move(jt));
    }
    manifest["input_dim"] = input_dim;
    manifest["output_dim"] = output_dim;
    manifest["tasks"] = std::move(tasks);
    // manifest last: a directory without one is not a dataset
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

SourceDataset load_dataset(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    json manifest;
    try {
        manifest = json::parse(read_file(manifest_path));
    } catch (const json::exception& e) {
        malformed(manifest_path, e.what());
    }
    try {
        if (manifest.at("format").get<std::string>() != "metactl.dataset") {
            malformed(manifest_path, "not a metactl dataset manifest");
        }
        const int version = manifest.at("version").get<int>();
        if (version != kDatasetFormatVersion) {
            throw DatasetError(DatasetError::Kind::VersionMismatch,
                               manifest_path.string() + ": format version " + std::to_string(version) +
                                   ", expected " + std::to_string(kDatasetFormatVersion));
        }
        SourceDataset ds;
        for (const json& jt : manifest.at("tasks")) {
            TaskData task;
            task.id = jt.at("id").get<std::string>();
            task.dt = jt.at("dt").get<double>();
            const fs::path task_dir = dir / jt.at("dir").get<std::string>();
            for (const json& jr : jt.at("trajectories")) {
                Trajectory traj = parse_trajectory_csv(
                    task_dir / jr.at("file").get<std::string>(), jr.at("rows").get<std::size_t>(),
                    jr.at("input_dim").get<std::size_t>(), jr.at("output_dim").get<std::size_t>(),
                    jr.at("has_reference").get<bool>(), task.dt, jr.at("plant_tag").get<std::string>());
                task.trajectories.push_back(std::make_shared<const Trajectory>(std::move(traj)));
            }
            ds.tasks.push_back(std::move(task));
        }
        return ds;
    } catch (const json::exception& e) {
        malformed(manifest_path, e.what());
    }
}

SourceDataset append_trajectory(const SourceDataset& ds, const std::string& task_id, Trajectory traj) {
    traj.validate();
    SourceDataset out = ds;
    std::ptrdiff_t k = out.find(task_id);
    if (k < 0) {
        TaskData task;
        task.id = task_id;
        task.dt = traj.dt;
        out.tasks.push_back(std::move(task));
        k = static_cast<std::ptrdiff_t>(out.tasks.size() - 1);
    }
    TaskData& task = out.tasks[static_cast<std::size_t>(k)];
    if (!task.trajectories.empty() || task.dt != 0.0) {
        if (task.dt != traj.dt) {
            throw DatasetError(DatasetError::Kind::DtMismatch, "task " + task_id + " has dt " + format_real(task.dt) +
                                                                   ", trajectory has " + format_real(traj.dt));
        }
    } else {
        task.dt = traj.dt;
    }
    task.trajectories.push_back(std::make_shared<const Trajectory>(std::move(traj)));
    return out;
}

SharedDataset::SharedDataset(SourceDataset initial)
    : current_(std::make_shared<const SourceDataset>(std::move(initial))) {}

std::shared_ptr<const SourceDataset> SharedDataset::snapshot() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return current_;
}

void SharedDataset::append(const std::string& task_id, Trajectory traj) {
    std::lock_guard<std::mutex> lock(mutex_);
    current_ = std::make_shared<const SourceDataset>(append_trajectory(*current_, task_id, std::move(traj)));
}

}  // namespace metactl
