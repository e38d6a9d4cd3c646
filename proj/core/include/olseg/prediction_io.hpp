#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "olseg/evaluation.hpp"
#include "olseg/rle.hpp"

namespace olseg {

// One JSON object per line:
//   {"image_id": 3, "class_id": 1, "box": [x1, y1, x2, y2], "score": 0.91,
//    "segmentation": {"size": [h, w], "counts": [...]}}
// "segmentation" is present only in mask dumps.

nlohmann::json rle_to_json(const RleMask& mask);
RleMask rle_from_json(const nlohmann::json& j);

nlohmann::json prediction_to_json(const EvalPrediction& p);
EvalPrediction prediction_from_json(const nlohmann::json& j);

void write_predictions(const std::filesystem::path& path, std::span<const EvalPrediction> predictions);
std::vector<EvalPrediction> read_predictions(const std::filesystem::path& path);

}  // namespace olseg
