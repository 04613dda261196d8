#pragma once

#include "metactl/diffnum.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace metactl {

/// Named block of a flat parameter vector (column-major rows x cols).
struct ShapeEntry {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
};

nlohmann::json shape_map_json(const std::vector<ShapeEntry>& entries);

/// A model on disk: `model.json` (caller header plus parameter count) and
/// `weights.csv` (one value per row, 17 significant digits).
struct Checkpoint {
    nlohmann::json header;
    ParamVector params;
};

void save_checkpoint(const std::filesystem::path& dir, const nlohmann::json& header, const ParamVector& params);
/// Throws DatasetError (Io / Malformed) on unreadable or inconsistent files.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace metactl
