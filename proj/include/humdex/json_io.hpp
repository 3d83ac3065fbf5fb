#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "humdex/body_retarget.hpp"
#include "json.hpp"

namespace humdex::io {

nlohmann::json matrix3_to_json(const Eigen::Matrix3d& m);  // 9 row-major values
Eigen::Matrix3d matrix3_from_json(const nlohmann::json& arr);

nlohmann::json vector_to_json(const Eigen::VectorXd& v);
Eigen::VectorXd vector_from_json(const nlohmann::json& arr);
Eigen::VectorXd vector_from_json(const nlohmann::json& arr, Eigen::Index expected,
                                 const std::string& what);

// HumanFrame line schema:
// {"t_us":int,"rot":{link:[9]},"pos":{link:[3]},"tips_l":[15],"tips_r":[15],"nodes":int}
nlohmann::json human_frame_to_json(const retarget::HumanFrame& frame);
retarget::HumanFrame human_frame_from_json(const nlohmann::json& doc);

// CommandVector line schema:
// {"v_root":[2],"z_ref":x,"theta_root":[2],"yaw_rate":x,
//  "q_body":[29],"q_hand_l":[20],"q_hand_r":[20]}
nlohmann::json command_to_json(const retarget::CommandVector& cmd);
retarget::CommandVector command_from_json(const nlohmann::json& doc);

// JSON-lines files. Reading reports the 1-based line number on parse errors.
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& lines);
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace humdex::io
