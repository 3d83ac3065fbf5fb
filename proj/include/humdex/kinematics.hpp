#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace humdex::kin {

// One revolute joint, axis expressed in the parent link frame.
struct Joint {
    Eigen::Vector3d axis{0.0, 0.0, 1.0};
    double lower = 0.0;
    double upper = 0.0;
    int dof_index = -1;
};

struct Link {
    std::string name;
    int parent = -1;  // -1 for the root
    Eigen::Matrix3d offset_rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d offset_translation = Eigen::Vector3d::Zero();
    std::optional<Joint> joint;  // absent only on the root
};

// Immutable after load; safe to share across threads.
struct KinematicModel {
    std::string name;
    std::vector<Link> links;  // topological order, parent index < child index
    int dof_count = 0;
    std::map<std::string, std::vector<int>> named_sets;

    int link_index(const std::string& link_name) const;  // -1 if absent
    const std::vector<int>& set(const std::string& set_name) const;  // throws if absent
    Eigen::VectorXd limit_lower() const;
    Eigen::VectorXd limit_upper() const;
    Eigen::VectorXd limit_midpoints() const;
    Eigen::VectorXd clamp_to_limits(const Eigen::VectorXd& q) const;
    // dof index of the joint carried by each link on the root->link path,
    // ordered root-side first
    std::vector<int> chain_dofs(int link_index) const;
    // link index carrying a given dof
    int dof_link(int dof_index) const;
};

struct LinkPose {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d position = Eigen::Vector3d::Zero();
};

using LinkPoseSet = std::vector<LinkPose>;

// Parse and validate a model document. Throws Error{Schema} naming the
// offending link on any violation.
KinematicModel load_model_json(const std::string& json_text);
KinematicModel load_model_file(const std::string& path);

// World pose of every link. A link's frame is placed by rotating about its
// joint axis at the parent origin and then applying the fixed offset:
//   T_link = T_parent * Rot(axis, q_dof) * T_offset
LinkPoseSet forward_kinematics(const KinematicModel& model, const Eigen::VectorXd& q);

enum class JacobianKind { Position, Orientation };

// 3 x dof_count Jacobian of one link's world position or angular velocity.
Eigen::MatrixXd jacobian(const KinematicModel& model, const Eigen::VectorXd& q,
                         int link_index, JacobianKind kind);

// Same, reusing poses already computed for q (must match the model).
Eigen::MatrixXd jacobian(const KinematicModel& model, const LinkPoseSet& poses,
                         int link_index, JacobianKind kind);

// Positions of every link expressed in the pelvis frame:
// R_pelvis^T * (p_link - p_pelvis).
std::vector<Eigen::Vector3d> pelvis_relative(const LinkPoseSet& poses, int pelvis_index);

}  // namespace humdex::kin
