#include "humdex/hand_retarget.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "humdex/error.hpp"
#include "humdex/json_io.hpp"
#include "humdex/lm.hpp"
#include "humdex/log.hpp"

namespace humdex::hand {

namespace {

using nlohmann::json;

// One finger as a standalone 4-joint chain rooted at the wrist frame.
struct FingerChain {
    struct Segment {
        Eigen::Vector3d axis;
        Eigen::Matrix3d off_r;
        Eigen::Vector3d off_t;
        double lower = 0.0, upper = 0.0;
    };
    std::array<Segment, 4> segments;

    Eigen::Vector4d clamp(const Eigen::Vector4d& q) const {
        Eigen::Vector4d out;
        for (int i = 0; i < 4; ++i) out[i] = std::clamp(q[i], segments[i].lower, segments[i].upper);
        return out;
    }

    Eigen::Vector4d midpoints() const {
        Eigen::Vector4d out;
        for (int i = 0; i < 4; ++i) out[i] = 0.5 * (segments[i].lower + segments[i].upper);
        return out;
    }

    // Tip position in the wrist frame, optionally with the per-joint parent
    // rotations and origins needed for the Jacobian.
    Eigen::Vector3d tip(const Eigen::Vector4d& q, std::array<Eigen::Matrix3d, 4>* parent_rots = nullptr,
                        std::array<Eigen::Vector3d, 4>* parent_pos = nullptr) const {
        Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
        Eigen::Vector3d p = Eigen::Vector3d::Zero();
        for (int i = 0; i < 4; ++i) {
            if (parent_rots != nullptr) (*parent_rots)[static_cast<size_t>(i)] = r;
            if (parent_pos != nullptr) (*parent_pos)[static_cast<size_t>(i)] = p;
            const Eigen::Matrix3d joint_rot =
                r * Eigen::AngleAxisd(q[i], segments[i].axis).toRotationMatrix();
            p += joint_rot * segments[i].off_t;
            r = joint_rot * segments[i].off_r;
        }
        return p;
    }
};

FingerChain make_chain(const kin::KinematicModel& model, int tip_link) {
    FingerChain chain;
    std::vector<int> path;
    for (int i = tip_link; model.links[static_cast<size_t>(i)].parent >= 0;
         i = model.links[static_cast<size_t>(i)].parent) {
        path.push_back(i);
    }
    if (path.size() != 4) {
        throw Error(ErrorKind::Schema, "finger chain to '" +
                                           model.links[static_cast<size_t>(tip_link)].name +
                                           "' must have exactly 4 joints");
    }
    std::reverse(path.begin(), path.end());
    for (int i = 0; i < 4; ++i) {
        const kin::Link& link = model.links[static_cast<size_t>(path[static_cast<size_t>(i)])];
        chain.segments[static_cast<size_t>(i)] = {link.joint->axis, link.offset_rotation,
                                                  link.offset_translation, link.joint->lower,
                                                  link.joint->upper};
    }
    return chain;
}

// Position-only IK problem for one finger.
class FingerProblem : public solve::LeastSquaresProblem {
  public:
    FingerProblem(const FingerChain& chain, const Eigen::Vector3d& target)
        : chain_(chain), target_(target) {}

    int residual_dim() const override { return 3; }
    int param_dim() const override { return 4; }

    Eigen::VectorXd residual(const Eigen::VectorXd& q) const override {
        return target_ - chain_.tip(Eigen::Vector4d(q));
    }

    Eigen::MatrixXd jacobian(const Eigen::VectorXd& q) const override {
        std::array<Eigen::Matrix3d, 4> parent_rots;
        std::array<Eigen::Vector3d, 4> parent_pos;
        const Eigen::Vector3d tip = chain_.tip(Eigen::Vector4d(q), &parent_rots, &parent_pos);
        Eigen::MatrixXd J(3, 4);
        for (int i = 0; i < 4; ++i) {
            const Eigen::Vector3d axis =
                parent_rots[static_cast<size_t>(i)] * chain_.segments[static_cast<size_t>(i)].axis;
            J.col(i) = -axis.cross(tip - parent_pos[static_cast<size_t>(i)]);
        }
        return J;
    }

    Eigen::VectorXd clamp(const Eigen::VectorXd& q) const override {
        return chain_.clamp(Eigen::Vector4d(q));
    }

  private:
    const FingerChain& chain_;
    Eigen::Vector3d target_;
};

solve::LmOptions finger_lm_options() {
    solve::LmOptions opt;
    opt.max_iterations = 120;
    opt.cost_tolerance = 1e-20;
    opt.step_tolerance = 1e-13;
    opt.initial_damping = 1e-3;
    return opt;
}

// Coarse reseed grid used when the midpoint start stalls in a poor local
// minimum. The dense 25-point verification grid lives in the tests.
Eigen::Vector4d coarse_grid_best(const FingerChain& chain, const Eigen::Vector3d& target) {
    constexpr int kPoints = 5;
    Eigen::Vector4d best = chain.midpoints();
    double best_cost = (target - chain.tip(best)).squaredNorm();
    Eigen::Vector4d q;
    for (int a = 0; a < kPoints; ++a) {
        q[0] = chain.segments[0].lower +
               (chain.segments[0].upper - chain.segments[0].lower) * a / (kPoints - 1);
        for (int b = 0; b < kPoints; ++b) {
            q[1] = chain.segments[1].lower +
                   (chain.segments[1].upper - chain.segments[1].lower) * b / (kPoints - 1);
            for (int c = 0; c < kPoints; ++c) {
                q[2] = chain.segments[2].lower +
                       (chain.segments[2].upper - chain.segments[2].lower) * c / (kPoints - 1);
                for (int d = 0; d < kPoints; ++d) {
                    q[3] = chain.segments[3].lower +
                           (chain.segments[3].upper - chain.segments[3].lower) * d / (kPoints - 1);
                    const double cost = (target - chain.tip(q)).squaredNorm();
                    if (cost < best_cost) {
                        best_cost = cost;
                        best = q;
                    }
                }
            }
        }
    }
    return best;
}

std::vector<int> shuffled_indices(int n, std::uint64_t seed) {
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

void assign_split(PairDataset& dataset, std::uint64_t seed) {
    const int n = static_cast<int>(dataset.samples.size());
    dataset.train_indices.clear();
    dataset.val_indices.clear();
    if (n == 0) return;
    if (n == 1) {
        dataset.train_indices = {0};
        return;
    }
    const int n_val = std::clamp(static_cast<int>(std::llround(0.1 * n)), 1, n - 1);
    const auto idx = shuffled_indices(n, seed);
    dataset.val_indices.assign(idx.begin(), idx.begin() + n_val);
    dataset.train_indices.assign(idx.begin() + n_val, idx.end());
    std::sort(dataset.train_indices.begin(), dataset.train_indices.end());
    std::sort(dataset.val_indices.begin(), dataset.val_indices.end());
}

constexpr double kTanhClamp = 0.999999;

}  // namespace

FingerLayout finger_layout(const kin::KinematicModel& hand_model) {
    const auto& tips = hand_model.set("fingertips");
    if (tips.size() != 5) {
        throw Error(ErrorKind::Schema, "hand model must name exactly 5 fingertips");
    }
    if (hand_model.dof_count != 20) {
        throw Error(ErrorKind::Schema, "hand model must have 20 joints");
    }
    FingerLayout layout;
    for (int f = 0; f < 5; ++f) {
        layout.tip_links[static_cast<size_t>(f)] = tips[static_cast<size_t>(f)];
        const auto dofs = hand_model.chain_dofs(tips[static_cast<size_t>(f)]);
        if (dofs.size() != 4) {
            throw Error(ErrorKind::Schema, "each finger chain must carry exactly 4 joints");
        }
        for (int k = 0; k < 4; ++k)
            layout.finger_dofs[static_cast<size_t>(f)][static_cast<size_t>(k)] =
                dofs[static_cast<size_t>(k)];
    }
    return layout;
}

FingertipFrame fingertips_at(const kin::KinematicModel& hand_model, const Eigen::VectorXd& q) {
    const FingerLayout layout = finger_layout(hand_model);
    if (q.size() != 20) throw Error(ErrorKind::Dimension, "hand joint vector must have length 20");
    Eigen::VectorXd q_model(hand_model.dof_count);
    for (int f = 0; f < 5; ++f)
        for (int k = 0; k < 4; ++k)
            q_model[layout.finger_dofs[static_cast<size_t>(f)][static_cast<size_t>(k)]] =
                q[4 * f + k];
    const kin::LinkPoseSet poses = kin::forward_kinematics(hand_model, q_model);
    const kin::LinkPose& root = poses[0];
    const Eigen::Matrix3d rt = root.rotation.transpose();
    FingertipFrame tips;
    for (int f = 0; f < 5; ++f) {
        tips.segment<3>(3 * f) =
            rt * (poses[static_cast<size_t>(layout.tip_links[static_cast<size_t>(f)])].position -
                  root.position);
    }
    return tips;
}

OracleResult oracle_retarget_detailed(const kin::KinematicModel& hand_model,
                                      const FingertipFrame& tips, double scale) {
    if (scale <= 0.0) throw Error(ErrorKind::Validation, "scale must be positive");
    if (!tips.allFinite()) throw Error(ErrorKind::Numeric, "fingertip input contains non-finite values");
    const FingerLayout layout = finger_layout(hand_model);

    OracleResult result;
    const solve::LmOptions options = finger_lm_options();
    for (int f = 0; f < 5; ++f) {
        const FingerChain chain =
            make_chain(hand_model, layout.tip_links[static_cast<size_t>(f)]);
        const Eigen::Vector3d target = scale * tips.segment<3>(3 * f);
        const FingerProblem problem(chain, target);

        solve::LmResult lm = solve::lm_minimize(problem, chain.midpoints(), options);
        if (lm.final_cost > 1e-18) {
            // Stalled; reseed from a coarse grid scan and keep the better one.
            const solve::LmResult retry =
                solve::lm_minimize(problem, coarse_grid_best(chain, target), options);
            if (retry.final_cost < lm.final_cost) lm = retry;
        }
        result.q.segment<4>(4 * f) = lm.q;
        result.finger_residual_norm[static_cast<size_t>(f)] = std::sqrt(lm.final_cost);
    }
    return result;
}

HandJointTarget oracle_retarget(const kin::KinematicModel& hand_model, const FingertipFrame& tips,
                                double scale) {
    return oracle_retarget_detailed(hand_model, tips, scale).q;
}

double calibrate_scale(const FingertipFrame& open_human_tips,
                       const kin::KinematicModel& hand_model) {
    for (int a = 0; a < 5; ++a) {
        for (int b = a + 1; b < 5; ++b) {
            if ((open_human_tips.segment<3>(3 * a) - open_human_tips.segment<3>(3 * b)).norm() <=
                0.01) {
                throw Error(ErrorKind::Calibration,
                            "degenerate open pose: fingertips closer than 1 cm");
            }
        }
    }
    const Eigen::VectorXd q_open =
        Eigen::VectorXd::Zero(20).cwiseMax(hand_limits_lower(hand_model))
            .cwiseMin(hand_limits_upper(hand_model));
    const FingertipFrame robot_tips = fingertips_at(hand_model, q_open);
    double robot_mean = 0.0, human_mean = 0.0;
    for (int f = 0; f < 5; ++f) {
        robot_mean += robot_tips.segment<3>(3 * f).norm();
        human_mean += open_human_tips.segment<3>(3 * f).norm();
    }
    if (human_mean < 1e-6) {
        throw Error(ErrorKind::Calibration, "degenerate open pose: fingertips at the wrist");
    }
    return robot_mean / human_mean;
}

std::vector<std::pair<std::string, Eigen::VectorXd>> canonical_hand_poses(
    const kin::KinematicModel& hand_model) {
    const Eigen::VectorXd lower = hand_limits_lower(hand_model);
    const Eigen::VectorXd upper = hand_limits_upper(hand_model);

    // Flexion fraction per finger: joints 1..3 of the finger at t*upper,
    // abduction at the given value, clamped into the limits.
    auto pose = [&](const std::array<double, 5>& flex, const std::array<double, 5>& abd) {
        Eigen::VectorXd q = Eigen::VectorXd::Zero(20);
        for (int f = 0; f < 5; ++f) {
            q[4 * f] = abd[static_cast<size_t>(f)];
            for (int k = 1; k < 4; ++k)
                q[4 * f + k] = flex[static_cast<size_t>(f)] * upper[4 * f + k];
        }
        return q.cwiseMax(lower).cwiseMin(upper);
    };

    std::vector<std::pair<std::string, Eigen::VectorXd>> poses;
    poses.emplace_back("open", pose({0, 0, 0, 0, 0}, {0, 0, 0, 0, 0}));
    poses.emplace_back("fist", pose({0.8, 0.85, 0.85, 0.85, 0.85}, {0.2, 0, 0, 0, 0}));
    poses.emplace_back("thumb_touch_index", pose({0.55, 0.6, 0.1, 0.1, 0.1}, {0.25, -0.1, 0, 0, 0}));
    poses.emplace_back("thumb_touch_middle", pose({0.55, 0.1, 0.6, 0.1, 0.1}, {0.1, 0, 0, 0, 0}));
    poses.emplace_back("thumb_touch_ring", pose({0.55, 0.1, 0.1, 0.6, 0.1}, {-0.1, 0, 0, 0.1, 0}));
    poses.emplace_back("thumb_touch_little", pose({0.6, 0.1, 0.1, 0.1, 0.65}, {-0.25, 0, 0, 0, 0.15}));
    poses.emplace_back("rock_sign", pose({0.5, 0.05, 0.85, 0.85, 0.05}, {0.15, -0.15, 0, 0, 0.2}));
    poses.emplace_back("index_extended", pose({0.6, 0.02, 0.8, 0.8, 0.8}, {0, 0, 0, 0, 0}));
    return poses;
}

std::vector<FingertipFrame> synth_tip_frames(const kin::KinematicModel& hand_model, int count,
                                             std::uint64_t seed) {
    if (count <= 0) return {};
    const Eigen::VectorXd lower = hand_limits_lower(hand_model);
    const Eigen::VectorXd upper = hand_limits_upper(hand_model);

    std::vector<FingertipFrame> frames;
    frames.reserve(static_cast<size_t>(count));
    for (const auto& [name, q] : canonical_hand_poses(hand_model)) {
        if (static_cast<int>(frames.size()) >= count) break;
        frames.push_back(fingertips_at(hand_model, q));
    }

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    constexpr int kSegmentFrames = 20;
    Eigen::VectorXd current = Eigen::VectorXd::Zero(20);
    Eigen::VectorXd next(20);
    int step = kSegmentFrames;  // force an immediate waypoint draw
    while (static_cast<int>(frames.size()) < count) {
        if (step >= kSegmentFrames) {
            for (int j = 0; j < 20; ++j) next[j] = lower[j] + (upper[j] - lower[j]) * unit(rng);
            step = 0;
        }
        ++step;
        const double s = 0.5 - 0.5 * std::cos(M_PI * static_cast<double>(step) / kSegmentFrames);
        const Eigen::VectorXd q = (1.0 - s) * current + s * next;
        frames.push_back(fingertips_at(hand_model, q));
        if (step == kSegmentFrames) current = next;
    }
    return frames;
}

PairDataset generate_pair_dataset(const kin::KinematicModel& hand_model,
                                  const std::vector<FingertipFrame>& tip_source, double scale,
                                  std::uint64_t seed) {
    if (tip_source.empty()) {
        throw Error(ErrorKind::Validation, "tip source must not be empty");
    }
    PairDataset dataset;
    dataset.seed = seed;
    dataset.provenance = "oracle-fingertip-ik-v1";
    dataset.samples.reserve(tip_source.size());
    for (size_t i = 0; i < tip_source.size(); ++i) {
        try {
            dataset.samples.push_back({tip_source[i], oracle_retarget(hand_model, tip_source[i], scale)});
        } catch (const Error& e) {
            throw Error(e.kind(), "frame " + std::to_string(i) + ": " + e.what());
        }
    }
    assign_split(dataset, seed);
    return dataset;
}

void save_pair_dataset(const PairDataset& dataset, const std::filesystem::path& path) {
    std::vector<json> lines;
    lines.reserve(dataset.samples.size());
    for (const auto& sample : dataset.samples) {
        lines.push_back(json{{"p", io::vector_to_json(sample.tips)},
                             {"q", io::vector_to_json(sample.joints)}});
    }
    io::write_jsonl(path, lines);
}

PairDataset load_pair_dataset(const std::filesystem::path& path, std::uint64_t split_seed) {
    PairDataset dataset;
    dataset.seed = split_seed;
    dataset.provenance = "file:" + path.string();
    int line_no = 0;
    for (const auto& doc : io::read_jsonl(path)) {
        ++line_no;
        try {
            PairSample sample;
            sample.tips = io::vector_from_json(doc.at("p"), 15, "p");
            sample.joints = io::vector_from_json(doc.at("q"), 20, "q");
            dataset.samples.push_back(sample);
        } catch (const json::exception& e) {
            throw Error(ErrorKind::Parse,
                        path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    assign_split(dataset, split_seed);
    return dataset;
}

Eigen::VectorXd hand_limits_lower(const kin::KinematicModel& hand_model) {
    const FingerLayout layout = finger_layout(hand_model);
    const Eigen::VectorXd lo = hand_model.limit_lower();
    Eigen::VectorXd out(20);
    for (int f = 0; f < 5; ++f)
        for (int k = 0; k < 4; ++k)
            out[4 * f + k] = lo[layout.finger_dofs[static_cast<size_t>(f)][static_cast<size_t>(k)]];
    return out;
}

Eigen::VectorXd hand_limits_upper(const kin::KinematicModel& hand_model) {
    const FingerLayout layout = finger_layout(hand_model);
    const Eigen::VectorXd hi = hand_model.limit_upper();
    Eigen::VectorXd out(20);
    for (int f = 0; f < 5; ++f)
        for (int k = 0; k < 4; ++k)
            out[4 * f + k] = hi[layout.finger_dofs[static_cast<size_t>(f)][static_cast<size_t>(k)]];
    return out;
}

HandRegressor HandRegressor::initialized(const kin::KinematicModel& hand_model, std::uint64_t seed,
                                         int hidden) {
    HandRegressor reg;
    reg.init_seed = seed;
    for (int f = 0; f < 5; ++f) {
        reg.finger_nets[static_cast<size_t>(f)] =
            nn::DenseNet::mlp({3, hidden, hidden, 4}, /*batchnorm=*/true,
                              seed + static_cast<std::uint64_t>(f));
    }
    const Eigen::VectorXd lower = hand_limits_lower(hand_model);
    const Eigen::VectorXd upper = hand_limits_upper(hand_model);
    reg.out_mid = 0.5 * (lower + upper);
    reg.out_half = 0.5 * (upper - lower);
    return reg;
}

json HandRegressor::to_json() const {
    json fingers = json::array();
    for (const auto& net : finger_nets) fingers.push_back(net.to_json());
    return json{{"format", "humdex-hand-regressor-v1"},
                {"finger_nets", fingers},
                {"in_mean", io::vector_to_json(in_mean)},
                {"in_std", io::vector_to_json(in_std)},
                {"out_mid", io::vector_to_json(out_mid)},
                {"out_half", io::vector_to_json(out_half)},
                {"init_seed", init_seed}};
}

HandRegressor HandRegressor::from_json(const json& doc) {
    HandRegressor reg;
    const auto& fingers = doc.at("finger_nets");
    if (!fingers.is_array() || fingers.size() != 5) {
        throw Error(ErrorKind::Schema, "checkpoint must contain 5 finger networks");
    }
    for (int f = 0; f < 5; ++f)
        reg.finger_nets[static_cast<size_t>(f)] = nn::DenseNet::from_json(fingers[static_cast<size_t>(f)]);
    reg.in_mean = io::vector_from_json(doc.at("in_mean"), 15, "in_mean");
    reg.in_std = io::vector_from_json(doc.at("in_std"), 15, "in_std");
    reg.out_mid = io::vector_from_json(doc.at("out_mid"), 20, "out_mid");
    reg.out_half = io::vector_from_json(doc.at("out_half"), 20, "out_half");
    if ((reg.out_half.array() <= 0.0).any()) {
        throw Error(ErrorKind::Schema, "output scaling half-ranges must be positive");
    }
    reg.init_seed = doc.value("init_seed", 0ULL);
    return reg;
}

void HandRegressor::save(const std::filesystem::path& path) const {
    io::write_text_file(path, to_json().dump(1) + "\n");
}

HandRegressor HandRegressor::load(const std::filesystem::path& path) {
    try {
        return from_json(json::parse(io::read_text_file(path)));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Parse, path.string() + ": " + e.what());
    }
}

namespace {

// Pre-tanh targets: inverse output scaling then atanh with clamp.
Eigen::MatrixXd pretanh_targets(const PairDataset& dataset, const std::vector<int>& indices,
                                const HandRegressor& reg) {
    Eigen::MatrixXd Y(static_cast<Eigen::Index>(indices.size()), 20);
    for (size_t r = 0; r < indices.size(); ++r) {
        const auto& q = dataset.samples[static_cast<size_t>(indices[r])].joints;
        for (int j = 0; j < 20; ++j) {
            const double n = std::clamp((q[j] - reg.out_mid[j]) / reg.out_half[j], -kTanhClamp,
                                        kTanhClamp);
            Y(static_cast<Eigen::Index>(r), j) = std::atanh(n);
        }
    }
    return Y;
}

Eigen::MatrixXd normalized_inputs(const PairDataset& dataset, const std::vector<int>& indices,
                                  const HandRegressor& reg) {
    Eigen::MatrixXd X(static_cast<Eigen::Index>(indices.size()), 15);
    for (size_t r = 0; r < indices.size(); ++r) {
        const auto& p = dataset.samples[static_cast<size_t>(indices[r])].tips;
        for (int j = 0; j < 15; ++j)
            X(static_cast<Eigen::Index>(r), j) = (p[j] - reg.in_mean[j]) / reg.in_std[j];
    }
    return X;
}

// Full-pass infer-mode loss in pre-tanh space.
double full_pass_loss(HandRegressor& reg, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
    double sse = 0.0;
    for (int f = 0; f < 5; ++f) {
        const Eigen::MatrixXd pred =
            nn::forward(reg.finger_nets[static_cast<size_t>(f)], X.middleCols(3 * f, 3),
                        nn::Mode::Infer);
        sse += (pred - Y.middleCols(4 * f, 4)).squaredNorm();
    }
    return sse / (static_cast<double>(X.rows()) * 20.0);
}

}  // namespace

double normalized_loss(const HandRegressor& regressor, const PairDataset& dataset,
                       const std::vector<int>& indices) {
    if (indices.empty()) throw Error(ErrorKind::Validation, "empty split");
    HandRegressor reg = regressor;  // infer-mode forward never mutates, copy is cheap safety
    const Eigen::MatrixXd X = normalized_inputs(dataset, indices, reg);
    const Eigen::MatrixXd Y = pretanh_targets(dataset, indices, reg);
    return full_pass_loss(reg, X, Y);
}

std::pair<HandRegressor, TrainReport> train_hand_retargeter(const PairDataset& dataset,
                                                            const kin::KinematicModel& hand_model,
                                                            const TrainHyperparams& hparams) {
    const auto start = std::chrono::steady_clock::now();
    if (dataset.train_indices.empty() || (hparams.max_epochs > 0 && dataset.val_indices.empty())) {
        throw Error(ErrorKind::Validation, "training needs non-empty train and validation splits");
    }

    HandRegressor reg = HandRegressor::initialized(hand_model, hparams.seed, hparams.hidden);

    // Input normalization from the train split (population std, guarded).
    Eigen::Matrix<double, 15, 1> mean = Eigen::Matrix<double, 15, 1>::Zero();
    for (int idx : dataset.train_indices) mean += dataset.samples[static_cast<size_t>(idx)].tips;
    mean /= static_cast<double>(dataset.train_indices.size());
    Eigen::Matrix<double, 15, 1> var = Eigen::Matrix<double, 15, 1>::Zero();
    for (int idx : dataset.train_indices) {
        const Eigen::Matrix<double, 15, 1> d =
            dataset.samples[static_cast<size_t>(idx)].tips - mean;
        var += d.cwiseProduct(d);
    }
    var /= static_cast<double>(dataset.train_indices.size());
    reg.in_mean = mean;
    reg.in_std = var.cwiseSqrt().cwiseMax(1e-8);

    const Eigen::MatrixXd X_train = normalized_inputs(dataset, dataset.train_indices, reg);
    const Eigen::MatrixXd Y_train = pretanh_targets(dataset, dataset.train_indices, reg);
    Eigen::MatrixXd X_val, Y_val;
    if (!dataset.val_indices.empty()) {
        X_val = normalized_inputs(dataset, dataset.val_indices, reg);
        Y_val = pretanh_targets(dataset, dataset.val_indices, reg);
    }

    TrainReport report;
    report.seed = hparams.seed;

    std::array<nn::AdamW, 5> optimizers;
    for (auto& opt : optimizers) {
        opt.lr = hparams.lr;
        opt.beta1 = hparams.beta1;
        opt.beta2 = hparams.beta2;
        opt.weight_decay = hparams.weight_decay;
    }

    // Baseline: the initialized network is a valid "best" candidate, so a
    // training run can never return something worse than the start.
    HandRegressor best = reg;
    double best_val = dataset.val_indices.empty()
                          ? std::numeric_limits<double>::infinity()
                          : full_pass_loss(reg, X_val, Y_val);
    report.best_epoch = -1;
    report.stop_reason = "max-epochs";

    std::mt19937_64 rng(hparams.seed);
    const Eigen::Index n_train = X_train.rows();
    std::vector<Eigen::Index> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);

    int stale_epochs = 0;
    for (int epoch = 0; epoch < hparams.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (Eigen::Index begin = 0; begin < n_train; begin += hparams.batch_size) {
            const Eigen::Index size = std::min<Eigen::Index>(hparams.batch_size, n_train - begin);
            Eigen::MatrixXd xb(size, 15), yb(size, 20);
            for (Eigen::Index r = 0; r < size; ++r) {
                xb.row(r) = X_train.row(order[static_cast<size_t>(begin + r)]);
                yb.row(r) = Y_train.row(order[static_cast<size_t>(begin + r)]);
            }
            const double denom = static_cast<double>(size) * 20.0;
            for (int f = 0; f < 5; ++f) {
                nn::DenseNet& net = reg.finger_nets[static_cast<size_t>(f)];
                nn::ForwardCache cache;
                const Eigen::MatrixXd pred =
                    nn::forward(net, xb.middleCols(3 * f, 3), nn::Mode::Train, &cache);
                const Eigen::MatrixXd grad = (2.0 / denom) * (pred - yb.middleCols(4 * f, 4));
                const nn::Gradients grads = nn::backward(net, cache, grad);
                optimizers[static_cast<size_t>(f)].step(net, grads);
            }
        }

        const double train_loss = full_pass_loss(reg, X_train, Y_train);
        const double val_loss = full_pass_loss(reg, X_val, Y_val);
        if (!std::isfinite(train_loss) || !std::isfinite(val_loss)) {
            throw Error(ErrorKind::Numeric,
                        "non-finite loss at epoch " + std::to_string(epoch));
        }
        report.train_losses.push_back(train_loss);
        report.val_losses.push_back(val_loss);

        if (val_loss < best_val - hparams.early_stop_min_delta) {
            best_val = val_loss;
            best = reg;
            report.best_epoch = epoch;
            stale_epochs = 0;
        } else {
            ++stale_epochs;
            if (stale_epochs >= hparams.early_stop_patience) {
                report.stop_reason = "early-stop";
                break;
            }
        }
    }

    report.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {std::move(best), std::move(report)};
}

HandJointTarget infer_hand(const HandRegressor& regressor, const FingertipFrame& tips) {
    if (!tips.allFinite()) {
        throw Error(ErrorKind::Numeric, "fingertip input contains non-finite values");
    }
    HandJointTarget q;
    Eigen::MatrixXd x(1, 3);
    for (int f = 0; f < 5; ++f) {
        for (int j = 0; j < 3; ++j) {
            const int col = 3 * f + j;
            x(0, j) = (tips[col] - regressor.in_mean[col]) / regressor.in_std[col];
        }
        // Infer-mode forward is const in effect; the copy keeps the API const.
        nn::DenseNet net = regressor.finger_nets[static_cast<size_t>(f)];
        const Eigen::MatrixXd z = nn::forward(net, x, nn::Mode::Infer);
        for (int k = 0; k < 4; ++k) {
            const int out = 4 * f + k;
            const double y = std::clamp(std::tanh(z(0, k)), -(1.0 - 1e-12), 1.0 - 1e-12);
            q[out] = regressor.out_mid[out] + regressor.out_half[out] * y;
        }
    }
    return q;
}

EvalMetrics eval_retargeter(const HandRegressor& regressor, const PairDataset& dataset,
                            Split split) {
    std::vector<int> indices;
    switch (split) {
        case Split::Train: indices = dataset.train_indices; break;
        case Split::Validation: indices = dataset.val_indices; break;
        case Split::All:
            indices.resize(dataset.samples.size());
            std::iota(indices.begin(), indices.end(), 0);
            break;
    }
    if (indices.empty()) throw Error(ErrorKind::Validation, "empty split");

    EvalMetrics metrics;
    metrics.mse_normalized = normalized_loss(regressor, dataset, indices);

    Eigen::Matrix<double, 20, 1> sq_sum = Eigen::Matrix<double, 20, 1>::Zero();
    const auto t0 = std::chrono::steady_clock::now();
    for (int idx : indices) {
        const auto& sample = dataset.samples[static_cast<size_t>(idx)];
        const HandJointTarget pred = infer_hand(regressor, sample.tips);
        const Eigen::Matrix<double, 20, 1> err = pred - sample.joints;
        sq_sum += err.cwiseProduct(err);
        metrics.max_abs_error = std::max(metrics.max_abs_error, err.cwiseAbs().maxCoeff());
    }
    const auto t1 = std::chrono::steady_clock::now();
    metrics.per_joint_rms =
        (sq_sum / static_cast<double>(indices.size())).cwiseSqrt();
    metrics.latency_us_per_call = std::chrono::duration<double, std::micro>(t1 - t0).count() /
                                  static_cast<double>(indices.size());
    return metrics;
}

}  // namespace humdex::hand
