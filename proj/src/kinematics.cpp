#include "humdex/kinematics.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "humdex/error.hpp"
#include "json.hpp"

namespace humdex::kin {

namespace {

using nlohmann::json;

Eigen::Matrix3d parse_rotation(const json& arr, const std::string& link_name) {
    if (!arr.is_array() || arr.size() != 9) {
        throw Error(ErrorKind::Schema,
                    "link '" + link_name + "': offset.rotation must be 9 row-major numbers");
    }
    Eigen::Matrix3d r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r(i, j) = arr[static_cast<size_t>(3 * i + j)].get<double>();
    if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-8 ||
        std::abs(r.determinant() - 1.0) > 1e-8) {
        throw Error(ErrorKind::Schema, "link '" + link_name + "': offset.rotation not orthonormal");
    }
    return r;
}

Eigen::Vector3d parse_vec3(const json& arr, const std::string& context) {
    if (!arr.is_array() || arr.size() != 3) {
        throw Error(ErrorKind::Schema, context + " must be 3 numbers");
    }
    return {arr[0].get<double>(), arr[1].get<double>(), arr[2].get<double>()};
}

// Axis-angle rotation for a unit axis.
Eigen::Matrix3d axis_rotation(const Eigen::Vector3d& axis, double angle) {
    return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

}  // namespace

int KinematicModel::link_index(const std::string& link_name) const {
    for (size_t i = 0; i < links.size(); ++i)
        if (links[i].name == link_name) return static_cast<int>(i);
    return -1;
}

const std::vector<int>& KinematicModel::set(const std::string& set_name) const {
    auto it = named_sets.find(set_name);
    if (it == named_sets.end())
        throw Error(ErrorKind::Schema, "model '" + name + "' has no set '" + set_name + "'");
    return it->second;
}

Eigen::VectorXd KinematicModel::limit_lower() const {
    Eigen::VectorXd lo(dof_count);
    for (const auto& link : links)
        if (link.joint) lo[link.joint->dof_index] = link.joint->lower;
    return lo;
}

Eigen::VectorXd KinematicModel::limit_upper() const {
    Eigen::VectorXd hi(dof_count);
    for (const auto& link : links)
        if (link.joint) hi[link.joint->dof_index] = link.joint->upper;
    return hi;
}

Eigen::VectorXd KinematicModel::limit_midpoints() const {
    return 0.5 * (limit_lower() + limit_upper());
}

Eigen::VectorXd KinematicModel::clamp_to_limits(const Eigen::VectorXd& q) const {
    return q.cwiseMax(limit_lower()).cwiseMin(limit_upper());
}

std::vector<int> KinematicModel::chain_dofs(int link_index) const {
    std::vector<int> dofs;
    for (int i = link_index; i >= 0; i = links[static_cast<size_t>(i)].parent) {
        const auto& joint = links[static_cast<size_t>(i)].joint;
        if (joint) dofs.push_back(joint->dof_index);
    }
    std::reverse(dofs.begin(), dofs.end());
    return dofs;
}

int KinematicModel::dof_link(int dof_index) const {
    for (size_t i = 0; i < links.size(); ++i)
        if (links[i].joint && links[i].joint->dof_index == dof_index) return static_cast<int>(i);
    return -1;
}

KinematicModel load_model_json(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("model document: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("links") || !doc["links"].is_array()) {
        throw Error(ErrorKind::Schema, "model document must be an object with a 'links' array");
    }

    KinematicModel model;
    model.name = doc.value("name", "unnamed");

    std::map<std::string, int> index_of;
    int root_count = 0;
    int next_dof = 0;
    for (const auto& jl : doc["links"]) {
        if (!jl.is_object() || !jl.contains("name")) {
            throw Error(ErrorKind::Schema, "every link needs a 'name'");
        }
        Link link;
        link.name = jl["name"].get<std::string>();
        if (index_of.count(link.name) > 0) {
            throw Error(ErrorKind::Schema, "link '" + link.name + "': duplicate name");
        }

        const json& parent = jl.contains("parent") ? jl["parent"] : json(nullptr);
        if (parent.is_null()) {
            link.parent = -1;
            ++root_count;
        } else {
            const std::string pname = parent.get<std::string>();
            auto it = index_of.find(pname);
            if (it == index_of.end()) {
                // Either a genuinely unknown link or a forward/self reference,
                // which would break the topological order (cycles included).
                bool defined_later = false;
                for (const auto& other : doc["links"]) {
                    if (other.is_object() && other.value("name", "") == pname) defined_later = true;
                }
                if (defined_later) {
                    throw Error(ErrorKind::Schema, "link '" + link.name + "': parent '" + pname +
                                                       "' does not precede it (cycle or ordering violation)");
                }
                throw Error(ErrorKind::Schema,
                            "link '" + link.name + "': unknown parent '" + pname + "'");
            }
            link.parent = it->second;
        }

        if (jl.contains("offset")) {
            const json& off = jl["offset"];
            if (off.contains("rotation")) link.offset_rotation = parse_rotation(off["rotation"], link.name);
            if (off.contains("translation"))
                link.offset_translation = parse_vec3(off["translation"], "link '" + link.name + "': offset.translation");
        }

        const json& jj = jl.contains("joint") ? jl["joint"] : json(nullptr);
        if (link.parent < 0) {
            if (!jj.is_null()) {
                throw Error(ErrorKind::Schema, "link '" + link.name + "': the root link carries no joint");
            }
        } else {
            if (jj.is_null()) {
                throw Error(ErrorKind::Schema,
                            "link '" + link.name + "': every non-root link needs a revolute joint");
            }
            Joint joint;
            joint.axis = parse_vec3(jj["axis"], "link '" + link.name + "': joint.axis");
            if (std::abs(joint.axis.norm() - 1.0) > 1e-9) {
                throw Error(ErrorKind::Schema, "link '" + link.name + "': joint axis is not unit length");
            }
            joint.lower = jj["lower"].get<double>();
            joint.upper = jj["upper"].get<double>();
            if (!(joint.lower < joint.upper)) {
                throw Error(ErrorKind::Schema, "link '" + link.name + "': joint limits inverted");
            }
            joint.dof_index = next_dof++;
            link.joint = joint;
        }

        index_of[link.name] = static_cast<int>(model.links.size());
        model.links.push_back(std::move(link));
    }

    if (root_count != 1) {
        throw Error(ErrorKind::Schema,
                    "model must have exactly one root link, found " + std::to_string(root_count));
    }
    model.dof_count = next_dof;

    if (doc.contains("sets")) {
        for (const auto& [set_name, members] : doc["sets"].items()) {
            std::vector<int> indices;
            for (const auto& member : members) {
                const std::string mname = member.get<std::string>();
                auto it = index_of.find(mname);
                if (it == index_of.end()) {
                    throw Error(ErrorKind::Schema,
                                "set '" + set_name + "': unknown link '" + mname + "'");
                }
                indices.push_back(it->second);
            }
            model.named_sets[set_name] = std::move(indices);
        }
    }
    return model;
}

KinematicModel load_model_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open model file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return load_model_json(buf.str());
}

LinkPoseSet forward_kinematics(const KinematicModel& model, const Eigen::VectorXd& q) {
    if (q.size() != model.dof_count) {
        throw Error(ErrorKind::Dimension, "joint vector has length " + std::to_string(q.size()) +
                                              ", model expects " + std::to_string(model.dof_count));
    }
    LinkPoseSet poses(model.links.size());
    for (size_t i = 0; i < model.links.size(); ++i) {
        const Link& link = model.links[i];
        if (link.parent < 0) {
            poses[i].rotation = link.offset_rotation;
            poses[i].position = link.offset_translation;
            continue;
        }
        const LinkPose& parent = poses[static_cast<size_t>(link.parent)];
        const Eigen::Matrix3d joint_rot =
            parent.rotation * axis_rotation(link.joint->axis, q[link.joint->dof_index]);
        poses[i].rotation = joint_rot * link.offset_rotation;
        poses[i].position = parent.position + joint_rot * link.offset_translation;
    }
    return poses;
}

Eigen::MatrixXd jacobian(const KinematicModel& model, const LinkPoseSet& poses,
                         int link_index, JacobianKind kind) {
    if (link_index < 0 || link_index >= static_cast<int>(model.links.size())) {
        throw Error(ErrorKind::Dimension, "link index out of range");
    }
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(3, model.dof_count);
    const Eigen::Vector3d p_link = poses[static_cast<size_t>(link_index)].position;
    for (int i = link_index; i >= 0; i = model.links[static_cast<size_t>(i)].parent) {
        const Link& link = model.links[static_cast<size_t>(i)];
        if (!link.joint) continue;
        const LinkPose& parent = poses[static_cast<size_t>(link.parent)];
        const Eigen::Vector3d axis_world = parent.rotation * link.joint->axis;
        if (kind == JacobianKind::Position) {
            J.col(link.joint->dof_index) = axis_world.cross(p_link - parent.position);
        } else {
            J.col(link.joint->dof_index) = axis_world;
        }
    }
    return J;
}

Eigen::MatrixXd jacobian(const KinematicModel& model, const Eigen::VectorXd& q,
                         int link_index, JacobianKind kind) {
    return jacobian(model, forward_kinematics(model, q), link_index, kind);
}

std::vector<Eigen::Vector3d> pelvis_relative(const LinkPoseSet& poses, int pelvis_index) {
    if (pelvis_index < 0 || pelvis_index >= static_cast<int>(poses.size())) {
        throw Error(ErrorKind::Dimension, "pelvis index out of range");
    }
    const LinkPose& pelvis = poses[static_cast<size_t>(pelvis_index)];
    const Eigen::Matrix3d rt = pelvis.rotation.transpose();
    std::vector<Eigen::Vector3d> rel(poses.size());
    for (size_t i = 0; i < poses.size(); ++i) {
        rel[i] = rt * (poses[i].position - pelvis.position);
    }
    return rel;
}

}  // namespace humdex::kin
