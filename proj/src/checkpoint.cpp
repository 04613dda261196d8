#include "metactl/checkpoint.hpp"

#include "metactl/dataio.hpp"
#include "metactl/errors.hpp"

#include <cstdlib>
#include <sstream>

namespace metactl {

namespace fs = std::filesystem;
using nlohmann::json;

json shape_map_json(const std::vector<ShapeEntry>& entries) {
    json out = json::array();
    for (const auto& e : entries) {
        out.push_back({{"name", e.name}, {"offset", e.offset}, {"rows", e.rows}, {"cols", e.cols}});
    }
    return out;
}

void save_checkpoint(const fs::path& dir, const json& header, const ParamVector& params) {
    json h = header;
    h["num_params"] = params.size();
    std::string csv = "index,value\n";
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        csv += std::to_string(i) + ',' + format_real(params(i)) + '\n';
    }
    write_file_atomic(dir / "weights.csv", csv);
    write_file_atomic(dir / "model.json", h.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
    Checkpoint ck;
    try {
        ck.header = json::parse(read_file(dir / "model.json"));
    } catch (const json::exception& e) {
        throw DatasetError(DatasetError::Kind::Malformed, (dir / "model.json").string() + ": " + e.what());
    }
    const auto n = ck.header.value("num_params", static_cast<std::int64_t>(-1));
    if (n < 0) {
        throw DatasetError(DatasetError::Kind::Malformed, "checkpoint header lacks num_params");
    }
    ck.params.resize(n);
    std::istringstream in(read_file(dir / "weights.csv"));
    std::string line;
    std::getline(in, line);
    Eigen::Index count = 0;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos || count >= n) {
            throw DatasetError(DatasetError::Kind::Malformed, "bad weights row " + std::to_string(count));
        }
        const std::string field = line.substr(comma + 1);
        char* end = nullptr;
        ck.params(count++) = std::strtod(field.c_str(), &end);
        if (field.empty() || end != field.c_str() + field.size()) {
            throw DatasetError(DatasetError::Kind::Malformed, "bad weight value '" + field + "'");
        }
    }
    if (count != n) {
        throw DatasetError(DatasetError::Kind::Malformed, "weights file holds " + std::to_string(count) +
                                                              " values, header says " + std::to_string(n));
    }
    return ck;
}

}  // namespace metactl
