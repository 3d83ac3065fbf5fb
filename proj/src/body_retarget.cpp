#include "humdex/body_retarget.hpp"

#include <cmath>

#include "humdex/error.hpp"
#include "json.hpp"

namespace humdex::retarget {

namespace {

using nlohmann::json;

// Skew-symmetric cross-product matrix.
Eigen::Matrix3d hat(const Eigen::Vector3d& v) {
    Eigen::Matrix3d m;
    m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return m;
}

// Stacked tracking residual as a box-constrained least-squares problem.
class TrackingProblem : public solve::LeastSquaresProblem {
  public:
    TrackingProblem(const RetargetConfig& config, const HumanFrame& frame,
                    const kin::KinematicModel& model)
        : config_(config), frame_(frame), model_(model),
          lower_(model.limit_lower()), upper_(model.limit_upper()) {
        // Human-side targets are fixed per frame; precompute them.
        for (const auto& pair : config.orientation_links) {
            rotation_targets_.push_back(std::sqrt(pair.weight) * frame.rotation(pair.human));
        }
        const Eigen::Matrix3d pelvis_rt = frame.rotation(config.pelvis_human).transpose();
        const Eigen::Vector3d pelvis_p = frame.position(config.pelvis_human);
        for (const auto& pair : config.position_links) {
            position_targets_.push_back(std::sqrt(pair.weight) *
                                        (pelvis_rt * (frame.position(pair.human) - pelvis_p)));
        }
        dim_ = 9 * static_cast<int>(config.orientation_links.size()) +
               3 * static_cast<int>(config.position_links.size());
    }

    int residual_dim() const override { return dim_; }
    int param_dim() const override { return model_.dof_count; }

    Eigen::VectorXd residual(const Eigen::VectorXd& q) const override {
        const kin::LinkPoseSet poses = kin::forward_kinematics(model_, q);
        Eigen::VectorXd r(dim_);
        int row = 0;
        for (size_t i = 0; i < config_.orientation_links.size(); ++i) {
            const auto& pair = config_.orientation_links[i];
            const double sw = std::sqrt(pair.weight);
            const Eigen::Matrix3d diff =
                rotation_targets_[i] - sw * poses[static_cast<size_t>(pair.robot)].rotation;
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) r[row++] = diff(a, b);
        }
        if (!config_.position_links.empty()) {
            const auto rel = kin::pelvis_relative(poses, config_.pelvis_robot);
            for (size_t i = 0; i < config_.position_links.size(); ++i) {
                const auto& pair = config_.position_links[i];
                const double sw = std::sqrt(pair.weight);
                r.segment<3>(row) = position_targets_[i] - sw * rel[static_cast<size_t>(pair.robot)];
                row += 3;
            }
        }
        return r;
    }

    Eigen::MatrixXd jacobian(const Eigen::VectorXd& q) const override {
        const kin::LinkPoseSet poses = kin::forward_kinematics(model_, q);
        Eigen::MatrixXd J = Eigen::MatrixXd::Zero(dim_, model_.dof_count);
        int row = 0;
        for (const auto& pair : config_.orientation_links) {
            const double sw = std::sqrt(pair.weight);
            const Eigen::Matrix3d& rot = poses[static_cast<size_t>(pair.robot)].rotation;
            // d vec(R)/dq_k = vec([a_k]x R) for each ancestor joint k.
            for (int li = pair.robot; li >= 0; li = model_.links[static_cast<size_t>(li)].parent) {
                const auto& link = model_.links[static_cast<size_t>(li)];
                if (!link.joint) continue;
                const auto& parent = poses[static_cast<size_t>(link.parent)];
                const Eigen::Vector3d axis = parent.rotation * link.joint->axis;
                const Eigen::Matrix3d drot = hat(axis) * rot;
                for (int a = 0; a < 3; ++a)
                    for (int b = 0; b < 3; ++b)
                        J(row + 3 * a + b, link.joint->dof_index) = -sw * drot(a, b);
            }
            row += 9;
        }
        if (!config_.position_links.empty()) {
            const auto& pelvis = poses[static_cast<size_t>(config_.pelvis_robot)];
            const Eigen::Matrix3d pelvis_rt = pelvis.rotation.transpose();
            const Eigen::MatrixXd j_pelvis_pos =
                kin::jacobian(model_, poses, config_.pelvis_robot, kin::JacobianKind::Position);
            const Eigen::MatrixXd j_pelvis_ori =
                kin::jacobian(model_, poses, config_.pelvis_robot, kin::JacobianKind::Orientation);
            for (const auto& pair : config_.position_links) {
                const double sw = std::sqrt(pair.weight);
                const Eigen::MatrixXd j_link =
                    kin::jacobian(model_, poses, pair.robot, kin::JacobianKind::Position);
                const Eigen::Vector3d span =
                    poses[static_cast<size_t>(pair.robot)].position - pelvis.position;
                for (int k = 0; k < model_.dof_count; ++k) {
                    const Eigen::Vector3d omega = j_pelvis_ori.col(k);
                    const Eigen::Vector3d col =
                        pelvis_rt * (j_link.col(k) - j_pelvis_pos.col(k) - omega.cross(span));
                    J.block<3, 1>(row, k) = -sw * col;
                }
                row += 3;
            }
        }
        return J;
    }

    Eigen::VectorXd clamp(const Eigen::VectorXd& q) const override {
        return q.cwiseMax(lower_).cwiseMin(upper_);
    }

  private:
    const RetargetConfig& config_;
    const HumanFrame& frame_;
    const kin::KinematicModel& model_;
    Eigen::VectorXd lower_, upper_;
    std::vector<Eigen::Matrix3d> rotation_targets_;
    std::vector<Eigen::Vector3d> position_targets_;
    int dim_ = 0;
};

double wrap_angle(double a) {
    while (a > M_PI) a -= 2.0 * M_PI;
    while (a < -M_PI) a += 2.0 * M_PI;
    return a;
}

}  // namespace

const Eigen::Matrix3d& HumanFrame::rotation(const std::string& link) const {
    auto it = link_rotations.find(link);
    if (it == link_rotations.end()) {
        throw Error(ErrorKind::Mapping, "human frame has no rotation for link '" + link + "'");
    }
    return it->second;
}

const Eigen::Vector3d& HumanFrame::position(const std::string& link) const {
    auto it = link_positions.find(link);
    if (it == link_positions.end()) {
        throw Error(ErrorKind::Mapping, "human frame has no position for link '" + link + "'");
    }
    return it->second;
}

solve::LmOptions SolverSettings::lm_options() const {
    solve::LmOptions opt;
    opt.max_iterations = max_iterations;
    opt.cost_tolerance = cost_tolerance;
    opt.step_tolerance = step_tolerance;
    opt.initial_damping = initial_damping;
    opt.damping_up = damping_up;
    opt.damping_down = damping_down;
    return opt;
}

void RetargetConfig::validate(const kin::KinematicModel& model) const {
    const int n = static_cast<int>(model.links.size());
    auto check_pair = [&](const LinkPair& pair, const char* which) {
        if (pair.robot < 0 || pair.robot >= n) {
            throw Error(ErrorKind::Schema, std::string(which) + " pair '" + pair.human +
                                               "': robot link index out of range");
        }
        if (pair.weight < 0.0) {
            throw Error(ErrorKind::Schema,
                        std::string(which) + " pair '" + pair.human + "': negative weight");
        }
    };
    for (const auto& pair : orientation_links) check_pair(pair, "orientation");
    for (const auto& pair : position_links) {
        check_pair(pair, "position");
        if (pair.robot == pelvis_robot && pair.weight > 0.0) {
            throw Error(ErrorKind::Schema,
                        "pelvis cannot carry a nonzero position weight (its relative position is zero)");
        }
    }
    if (pelvis_robot < 0 || pelvis_robot >= n) {
        throw Error(ErrorKind::Schema, "pelvis robot link index out of range");
    }
}

RetargetConfig default_config(const kin::KinematicModel& model) {
    RetargetConfig config;
    const auto& pelvis_set = model.named_sets.count("pelvis")
                                 ? model.set("pelvis")
                                 : std::vector<int>{0};
    config.pelvis_robot = pelvis_set.front();
    config.pelvis_human = model.links[static_cast<size_t>(config.pelvis_robot)].name;
    for (size_t i = 0; i < model.links.size(); ++i) {
        config.orientation_links.push_back({model.links[i].name, static_cast<int>(i), 1.0});
    }
    const char* target_set = model.named_sets.count("position_targets") ? "position_targets"
                             : model.named_sets.count("end_effectors")  ? "end_effectors"
                                                                        : nullptr;
    if (target_set != nullptr) {
        for (int idx : model.set(target_set)) {
            config.position_links.push_back({model.links[static_cast<size_t>(idx)].name, idx, 1.0});
        }
    }
    if (model.named_sets.count("base_anchors")) {
        for (int idx : model.set("base_anchors")) {
            config.base_anchor_links.push_back(model.links[static_cast<size_t>(idx)].name);
        }
    }
    return config;
}

RetargetConfig config_from_json(const std::string& json_text, const kin::KinematicModel& model) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("retarget config: ") + e.what());
    }
    RetargetConfig config;
    auto parse_pairs = [&](const char* key, std::vector<LinkPair>& out) {
        if (!doc.contains(key)) return;
        for (const auto& jp : doc[key]) {
            LinkPair pair;
            pair.human = jp.at("human").get<std::string>();
            if (jp.contains("robot")) {
                pair.robot = jp["robot"].is_string() ? model.link_index(jp["robot"].get<std::string>())
                                                     : jp["robot"].get<int>();
            } else {
                pair.robot = model.link_index(pair.human);
            }
            if (pair.robot < 0) {
                throw Error(ErrorKind::Schema,
                            "config pair '" + pair.human + "': robot link not found");
            }
            pair.weight = jp.value("weight", 1.0);
            out.push_back(pair);
        }
    };
    parse_pairs("orientation_links", config.orientation_links);
    parse_pairs("position_links", config.position_links);
    if (doc.contains("pelvis")) {
        config.pelvis_human = doc["pelvis"].value("human", "pelvis");
        if (doc["pelvis"].contains("robot")) {
            const auto& jr = doc["pelvis"]["robot"];
            config.pelvis_robot = jr.is_string() ? model.link_index(jr.get<std::string>())
                                                 : jr.get<int>();
        }
    }
    if (doc.contains("base_anchor_links")) {
        for (const auto& name : doc["base_anchor_links"])
            config.base_anchor_links.push_back(name.get<std::string>());
    }
    if (doc.contains("solver")) {
        const auto& js = doc["solver"];
        config.solver.max_iterations = js.value("max_iterations", config.solver.max_iterations);
        config.solver.cost_tolerance = js.value("cost_tolerance", config.solver.cost_tolerance);
        config.solver.step_tolerance = js.value("step_tolerance", config.solver.step_tolerance);
        config.solver.initial_damping = js.value("initial_damping", config.solver.initial_damping);
        config.solver.damping_up = js.value("damping_up", config.solver.damping_up);
        config.solver.damping_down = js.value("damping_down", config.solver.damping_down);
    }
    config.validate(model);
    return config;
}

std::string config_to_json(const RetargetConfig& config, const kin::KinematicModel& model) {
    json doc;
    auto pairs_json = [&](const std::vector<LinkPair>& pairs) {
        json arr = json::array();
        for (const auto& pair : pairs) {
            arr.push_back({{"human", pair.human},
                           {"robot", model.links[static_cast<size_t>(pair.robot)].name},
                           {"weight", pair.weight}});
        }
        return arr;
    };
    doc["orientation_links"] = pairs_json(config.orientation_links);
    doc["position_links"] = pairs_json(config.position_links);
    doc["pelvis"] = {{"human", config.pelvis_human},
                     {"robot", model.links[static_cast<size_t>(config.pelvis_robot)].name}};
    doc["base_anchor_links"] = config.base_anchor_links;
    doc["solver"] = {{"max_iterations", config.solver.max_iterations},
                     {"cost_tolerance", config.solver.cost_tolerance},
                     {"step_tolerance", config.solver.step_tolerance},
                     {"initial_damping", config.solver.initial_damping},
                     {"damping_up", config.solver.damping_up},
                     {"damping_down", config.solver.damping_down}};
    return doc.dump(1);
}

CostResult retarget_cost(const RetargetConfig& config, const HumanFrame& frame,
                         const kin::KinematicModel& model, const Eigen::VectorXd& q) {
    config.validate(model);
    TrackingProblem problem(config, frame, model);
    CostResult out;
    out.residual = problem.residual(q);
    out.cost = out.residual.squaredNorm();
    return out;
}

RetargetSolution solve_frame(const RetargetConfig& config, const HumanFrame& frame,
                             const kin::KinematicModel& model, const Eigen::VectorXd& q_init) {
    config.validate(model);
    if (q_init.size() != model.dof_count) {
        throw Error(ErrorKind::Dimension, "q_init length does not match the model");
    }
    TrackingProblem problem(config, frame, model);
    const solve::LmResult lm = solve::lm_minimize(problem, q_init, config.solver.lm_options());

    RetargetSolution solution;
    solution.q_star = lm.q;
    solution.final_cost = lm.final_cost;
    solution.iterations = lm.iterations;
    solution.accepted_steps = lm.accepted_steps;
    solution.converged = lm.converged;
    solution.accepted_costs = lm.accepted_costs;

    // Per-term breakdown at the solution.
    const kin::LinkPoseSet poses = kin::forward_kinematics(model, lm.q);
    const Eigen::Matrix3d pelvis_rt = frame.rotation(config.pelvis_human).transpose();
    const Eigen::Vector3d pelvis_p = frame.position(config.pelvis_human);
    for (const auto& pair : config.orientation_links) {
        const Eigen::Matrix3d diff =
            frame.rotation(pair.human) - poses[static_cast<size_t>(pair.robot)].rotation;
        solution.orientation_residuals.push_back(pair.weight * diff.squaredNorm());
    }
    if (!config.position_links.empty()) {
        const auto rel = kin::pelvis_relative(poses, config.pelvis_robot);
        for (const auto& pair : config.position_links) {
            const Eigen::Vector3d diff = pelvis_rt * (frame.position(pair.human) - pelvis_p) -
                                         rel[static_cast<size_t>(pair.robot)];
            solution.position_residuals.push_back(pair.weight * diff.squaredNorm());
        }
    }
    return solution;
}

std::vector<RetargetSolution> retarget_stream(const RetargetConfig& config,
                                              const std::vector<HumanFrame>& frames,
                                              const kin::KinematicModel& model) {
    if (frames.empty()) {
        throw Error(ErrorKind::Validation, "retarget_stream needs at least one frame");
    }
    std::vector<RetargetSolution> out;
    out.reserve(frames.size());
    Eigen::VectorXd q = model.limit_midpoints();
    for (size_t k = 0; k < frames.size(); ++k) {
        try {
            out.push_back(solve_frame(config, frames[k], model, q));
        } catch (const Error& e) {
            throw Error(e.kind(), "frame " + std::to_string(k) + ": " + e.what());
        }
        q = out.back().q_star;
    }
    return out;
}

Eigen::VectorXd CommandVector::flatten() const {
    Eigen::VectorXd v(6 + q_body.size() + q_hand_left.size() + q_hand_right.size());
    v << v_root, z_ref, theta_root, yaw_rate, q_body, q_hand_left, q_hand_right;
    return v;
}

bool CommandVector::all_finite() const {
    return flatten().allFinite();
}

CommandVector assemble_command(const RetargetSolution& solution,
                               const Eigen::VectorXd& q_hand_left,
                               const Eigen::VectorXd& q_hand_right,
                               const BaseInputs& base) {
    if (solution.q_star.size() != CommandVector::kBodyDims - 6) {
        throw Error(ErrorKind::Dimension,
                    "body solution must have 29 joints, got " + std::to_string(solution.q_star.size()));
    }
    if (q_hand_left.size() != 20 || q_hand_right.size() != 20) {
        throw Error(ErrorKind::Dimension, "hand joint vectors must have length 20");
    }
    CommandVector cmd;
    cmd.v_root = base.v_root;
    cmd.z_ref = base.z_ref;
    cmd.theta_root = base.theta_root;
    cmd.yaw_rate = base.yaw_rate;
    cmd.q_body = solution.q_star;
    cmd.q_hand_left = q_hand_left;
    cmd.q_hand_right = q_hand_right;
    if (!cmd.all_finite()) {
        throw Error(ErrorKind::Numeric, "command vector contains non-finite entries");
    }
    return cmd;
}

BaseInputs BaseCommandTracker::update(const HumanFrame& frame, const RetargetConfig& config) {
    Sample sample;
    sample.t = static_cast<double>(frame.timestamp_us) * 1e-6;

    // Mean of pelvis-minus-anchor differences: each difference cancels a
    // global offset exactly, so the mean does too.
    const Eigen::Vector3d pelvis = frame.position(config.pelvis_human);
    if (config.base_anchor_links.empty()) {
        sample.rel_pelvis = pelvis;
    } else {
        Eigen::Vector3d rel = Eigen::Vector3d::Zero();
        for (const auto& name : config.base_anchor_links) rel += pelvis - frame.position(name);
        sample.rel_pelvis = rel / static_cast<double>(config.base_anchor_links.size());
    }

    const Eigen::Matrix3d& rot = frame.rotation(config.pelvis_human);
    const double yaw = std::atan2(rot(1, 0), rot(0, 0));
    const double pitch = std::asin(std::clamp(-rot(2, 0), -1.0, 1.0));
    const double roll = std::atan2(rot(2, 1), rot(2, 2));
    sample.yaw = yaw;

    history_.push_back(sample);
    while (history_.size() > 1 && sample.t - history_.front().t > window_s_ + 1e-12) {
        history_.pop_front();
    }

    BaseInputs base;
    base.z_ref = sample.rel_pelvis.z();
    base.theta_root = {roll, pitch};
    const Sample& oldest = history_.front();
    const double dt = sample.t - oldest.t;
    if (dt > 1e-9) {
        const Eigen::Vector3d vel = (sample.rel_pelvis - oldest.rel_pelvis) / dt;
        // Express planar velocity in the pelvis yaw frame.
        const double c = std::cos(yaw), s = std::sin(yaw);
        base.v_root = {c * vel.x() + s * vel.y(), -s * vel.x() + c * vel.y()};
        base.yaw_rate = wrap_angle(sample.yaw - oldest.yaw) / dt;
    }
    return base;
}

}  // namespace humdex::retarget
