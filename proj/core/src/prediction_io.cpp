#include "olseg/prediction_io.hpp"

#include <fstream>

#include "olseg/error.hpp"

namespace olseg {

nlohmann::json rle_to_json(const RleMask& mask) {
  return {{"size", {mask.height(), mask.width()}}, {"counts", mask.counts()}};
}

RleMask rle_from_json(const nlohmann::json& j) {
  const auto size = j.at("size").get<std::vector<std::uint32_t>>();
  if (size.size() != 2) throw InputError("segmentation.size must be [h, w]");
  return RleMask(size[0], size[1], j.at("counts").get<std::vector<std::uint32_t>>());
}

nlohmann::json prediction_to_json(const EvalPrediction& p) {
  nlohmann::json j{{"image_id", p.image_id},
                   {"class_id", p.class_id},
                   {"box", {p.box.x1, p.box.y1, p.box.x2, p.box.y2}},
                   {"score", p.score}};
  if (p.mask) j["segmentation"] = rle_to_json(*p.mask);
  return j;
}

EvalPrediction prediction_from_json(const nlohmann::json& j) {
  EvalPrediction p;
  p.image_id = j.at("image_id").get<std::uint32_t>();
  p.class_id = j.at("class_id").get<std::uint32_t>();
  const auto b = j.at("box").get<std::vector<double>>();
  if (b.size() != 4) throw InputError("box must have 4 coordinates");
  p.box = {b[0], b[1], b[2], b[3]};
  p.score = j.at("score").get<double>();
  if (j.contains("segmentation")) p.mask = rle_from_json(j.at("segmentation"));
  return p;
}

void write_predictions(const std::filesystem::path& path, std::span<const EvalPrediction> predictions) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& p : predictions) out << prediction_to_json(p).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<EvalPrediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<EvalPrediction> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(prediction_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace olseg
