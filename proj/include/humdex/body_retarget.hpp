#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "humdex/kinematics.hpp"
#include "humdex/lm.hpp"

namespace humdex::retarget {

// One tracked instant of the human skeleton: world link poses plus optional
// per-hand fingertip positions in the respective wrist frame (thumb, index,
// middle, ring, little).
struct HumanFrame {
    std::int64_t timestamp_us = 0;
    std::map<std::string, Eigen::Matrix3d> link_rotations;
    std::map<std::string, Eigen::Vector3d> link_positions;
    std::optional<Eigen::Matrix<double, 15, 1>> fingertips_left;
    std::optional<Eigen::Matrix<double, 15, 1>> fingertips_right;
    int node_count = 15;

    const Eigen::Matrix3d& rotation(const std::string& link) const;  // Mapping error if absent
    const Eigen::Vector3d& position(const std::string& link) const;
};

// Pairing of one human link with one robot link, weighted.
struct LinkPair {
    std::string human;
    int robot = -1;
    double weight = 1.0;
};

struct SolverSettings {
    int max_iterations = 50;
    double cost_tolerance = 1e-10;
    double step_tolerance = 1e-8;
    double initial_damping = 1e-3;
    double damping_up = 10.0;
    double damping_down = 0.1;

    solve::LmOptions lm_options() const;
};

struct RetargetConfig {
    std::vector<LinkPair> orientation_links;  // L_R, world-rotation terms
    std::vector<LinkPair> position_links;     // L_P, pelvis-relative position terms
    std::string pelvis_human = "pelvis";
    int pelvis_robot = 0;
    SolverSettings solver;
    // Human links whose mean position anchors base-command extraction; kept
    // relative so global position drift cancels.
    std::vector<std::string> base_anchor_links;

    void validate(const kin::KinematicModel& model) const;  // structural checks
};

// All robot links in L_R, the model's "position_targets" set (or
// "end_effectors" as fallback) in L_P, unit weights. Human link names are
// taken to match robot link names, which holds for synthetic motion rendered
// from the same model.
RetargetConfig default_config(const kin::KinematicModel& model);

RetargetConfig config_from_json(const std::string& json_text, const kin::KinematicModel& model);
std::string config_to_json(const RetargetConfig& config, const kin::KinematicModel& model);

struct RetargetSolution {
    Eigen::VectorXd q_star;
    double final_cost = 0.0;
    int iterations = 0;
    int accepted_steps = 0;
    bool converged = false;
    std::vector<double> accepted_costs;
    // w * ||R_h - R_r||_F^2 per orientation pair, w * ||p_h - p_r||^2 per
    // position pair, at q_star.
    std::vector<double> orientation_residuals;
    std::vector<double> position_residuals;
};

// Weighted pelvis-centric tracking cost and its stacked residual:
//   cost = sum_LR w ||R_h - R_r(q)||_F^2 + sum_LP w ||p_h_rel - p_r_rel(q)||^2
// residual = [sqrt(w) vec(R_h - R_r) ...; sqrt(w) (p_h_rel - p_r_rel) ...],
// so cost == ||residual||^2.
struct CostResult {
    double cost = 0.0;
    Eigen::VectorXd residual;
};
CostResult retarget_cost(const RetargetConfig& config, const HumanFrame& frame,
                         const kin::KinematicModel& model, const Eigen::VectorXd& q);

RetargetSolution solve_frame(const RetargetConfig& config, const HumanFrame& frame,
                             const kin::KinematicModel& model, const Eigen::VectorXd& q_init);

// Sequential warm-started solve: frame 0 starts from the limit midpoints,
// frame k from q*_{k-1}.
std::vector<RetargetSolution> retarget_stream(const RetargetConfig& config,
                                              const std::vector<HumanFrame>& frames,
                                              const kin::KinematicModel& model);

// Base commands passed through into the command vector.
struct BaseInputs {
    Eigen::Vector2d v_root = Eigen::Vector2d::Zero();  // planar m/s, pelvis yaw frame
    double z_ref = 0.0;                                // pelvis height above anchor, m
    Eigen::Vector2d theta_root = Eigen::Vector2d::Zero();  // roll, pitch, rad
    double yaw_rate = 0.0;                             // rad/s
};

// p_cmd = [v_root, z_ref, theta_root, yaw_rate, q_ref] with
// q_ref = [q_body(29), q_hand_left(20), q_hand_right(20)].
struct CommandVector {
    Eigen::Vector2d v_root = Eigen::Vector2d::Zero();
    double z_ref = 0.0;
    Eigen::Vector2d theta_root = Eigen::Vector2d::Zero();
    double yaw_rate = 0.0;
    Eigen::VectorXd q_body;
    Eigen::VectorXd q_hand_left;
    Eigen::VectorXd q_hand_right;

    static constexpr int kBodyDims = 35;  // 2 + 1 + 2 + 1 + 29
    Eigen::VectorXd flatten() const;      // 75 values in the order above
    bool all_finite() const;
};

CommandVector assemble_command(const RetargetSolution& solution,
                               const Eigen::VectorXd& q_hand_left,
                               const Eigen::VectorXd& q_hand_right,
                               const BaseInputs& base);

// Finite-difference base-command extraction over a smoothing window.
// Everything is computed from pelvis orientation and pelvis-minus-anchor
// positions, so a global offset applied to all link positions cancels
// exactly.
class BaseCommandTracker {
  public:
    explicit BaseCommandTracker(double window_s = 0.1) : window_s_(window_s) {}

    BaseInputs update(const HumanFrame& frame, const RetargetConfig& config);
    void reset() { history_.clear(); }

  private:
    struct Sample {
        double t = 0.0;
        Eigen::Vector3d rel_pelvis = Eigen::Vector3d::Zero();
        double yaw = 0.0;
    };
    double window_s_;
    std::deque<Sample> history_;
};

}  // namespace humdex::retarget
