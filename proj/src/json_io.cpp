#include "humdex/json_io.hpp"

#include <fstream>
#include <sstream>

#include "humdex/error.hpp"

namespace humdex::io {

using nlohmann::json;

json matrix3_to_json(const Eigen::Matrix3d& m) {
    json arr = json::array();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) arr.push_back(m(i, j));
    return arr;
}

Eigen::Matrix3d matrix3_from_json(const json& arr) {
    if (!arr.is_array() || arr.size() != 9) {
        throw Error(ErrorKind::Parse, "rotation must be 9 row-major values");
    }
    Eigen::Matrix3d m;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m(i, j) = arr[static_cast<size_t>(3 * i + j)].get<double>();
    return m;
}

json vector_to_json(const Eigen::VectorXd& v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

Eigen::VectorXd vector_from_json(const json& arr) {
    if (!arr.is_array()) throw Error(ErrorKind::Parse, "expected a numeric array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = arr[static_cast<size_t>(i)].get<double>();
    return v;
}

Eigen::VectorXd vector_from_json(const json& arr, Eigen::Index expected, const std::string& what) {
    Eigen::VectorXd v = vector_from_json(arr);
    if (v.size() != expected) {
        throw Error(ErrorKind::Parse, what + " must have " + std::to_string(expected) +
                                          " values, got " + std::to_string(v.size()));
    }
    return v;
}

json human_frame_to_json(const retarget::HumanFrame& frame) {
    json rot = json::object();
    for (const auto& [name, r] : frame.link_rotations) rot[name] = matrix3_to_json(r);
    json pos = json::object();
    for (const auto& [name, p] : frame.link_positions) pos[name] = json{p.x(), p.y(), p.z()};
    json doc{{"t_us", frame.timestamp_us}, {"rot", rot}, {"pos", pos}, {"nodes", frame.node_count}};
    if (frame.fingertips_left) doc["tips_l"] = vector_to_json(*frame.fingertips_left);
    if (frame.fingertips_right) doc["tips_r"] = vector_to_json(*frame.fingertips_right);
    return doc;
}

retarget::HumanFrame human_frame_from_json(const json& doc) {
    retarget::HumanFrame frame;
    frame.timestamp_us = doc.at("t_us").get<std::int64_t>();
    if (frame.timestamp_us < 0) throw Error(ErrorKind::Parse, "negative timestamp");
    for (const auto& [name, arr] : doc.at("rot").items()) {
        const Eigen::Matrix3d r = matrix3_from_json(arr);
        if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6) {
            throw Error(ErrorKind::Validation, "rotation for link '" + name + "' not orthonormal");
        }
        frame.link_rotations[name] = r;
    }
    for (const auto& [name, arr] : doc.at("pos").items()) {
        const Eigen::VectorXd p = vector_from_json(arr, 3, "position of '" + name + "'");
        frame.link_positions[name] = Eigen::Vector3d(p[0], p[1], p[2]);
    }
    if (doc.contains("tips_l")) {
        frame.fingertips_left = vector_from_json(doc["tips_l"], 15, "tips_l");
    }
    if (doc.contains("tips_r")) {
        frame.fingertips_right = vector_from_json(doc["tips_r"], 15, "tips_r");
    }
    frame.node_count = doc.value("nodes", 15);
    return frame;
}

json command_to_json(const retarget::CommandVector& cmd) {
    return json{{"v_root", json{cmd.v_root.x(), cmd.v_root.y()}},
                {"z_ref", cmd.z_ref},
                {"theta_root", json{cmd.theta_root.x(), cmd.theta_root.y()}},
                {"yaw_rate", cmd.yaw_rate},
                {"q_body", vector_to_json(cmd.q_body)},
                {"q_hand_l", vector_to_json(cmd.q_hand_left)},
                {"q_hand_r", vector_to_json(cmd.q_hand_right)}};
}

retarget::CommandVector command_from_json(const json& doc) {
    retarget::CommandVector cmd;
    const Eigen::VectorXd v = vector_from_json(doc.at("v_root"), 2, "v_root");
    cmd.v_root = {v[0], v[1]};
    cmd.z_ref = doc.at("z_ref").get<double>();
    const Eigen::VectorXd th = vector_from_json(doc.at("theta_root"), 2, "theta_root");
    cmd.theta_root = {th[0], th[1]};
    cmd.yaw_rate = doc.at("yaw_rate").get<double>();
    cmd.q_body = vector_from_json(doc.at("q_body"));
    cmd.q_hand_left = vector_from_json(doc.at("q_hand_l"), 20, "q_hand_l");
    cmd.q_hand_right = vector_from_json(doc.at("q_hand_r"), 20, "q_hand_r");
    return cmd;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& lines) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    for (const auto& line : lines) out << line.dump() << '\n';
    if (!out) throw Error(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::vector<json> lines;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            lines.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw Error(ErrorKind::Parse, path.string() + ":" + std::to_string(line_no) + ": " +
                                              e.what());
        }
    }
    return lines;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw Error(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

}  // namespace humdex::io
