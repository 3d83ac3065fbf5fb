#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "humdex/kinematics.hpp"
#include "humdex/neuralnet.hpp"

namespace humdex::hand {

// Five fingertip positions (thumb, index, middle, ring, little) in the wrist
// frame, concatenated.
using FingertipFrame = Eigen::Matrix<double, 15, 1>;
// 20 joint angles, thumb -> little, 4 joints per finger proximal -> distal.
using HandJointTarget = Eigen::Matrix<double, 20, 1>;

// Per-finger chain structure extracted from a 5x4 hand model.
struct FingerLayout {
    std::array<int, 5> tip_links;                // fingertip link per finger
    std::array<std::array<int, 4>, 5> finger_dofs;  // dof indices per finger
};
FingerLayout finger_layout(const kin::KinematicModel& hand_model);

// Fingertip positions in the wrist (root) frame at q.
FingertipFrame fingertips_at(const kin::KinematicModel& hand_model, const Eigen::VectorXd& q);

// Joint limits reordered into the canonical 20-vector layout.
Eigen::VectorXd hand_limits_lower(const kin::KinematicModel& hand_model);
Eigen::VectorXd hand_limits_upper(const kin::KinematicModel& hand_model);

struct OracleResult {
    HandJointTarget q;
    std::array<double, 5> finger_residual_norm{};  // ||scale*p_h - p_r(q)|| per finger
};

// Per-finger damped least-squares fingertip IK: minimizes
// ||scale*p_f_human - p_f_robot(q_f)||^2 over the finger's 4 joints, limits
// enforced. Unreachable targets saturate at the limits and report their
// residual instead of failing. Deterministic: LM from the limit midpoints,
// with a coarse grid reseed when the first attempt stalls.
OracleResult oracle_retarget_detailed(const kin::KinematicModel& hand_model,
                                      const FingertipFrame& tips, double scale);
HandJointTarget oracle_retarget(const kin::KinematicModel& hand_model,
                                const FingertipFrame& tips, double scale);

// Hand-size normalization: mean robot fingertip distance from the wrist at
// the fully open pose divided by the human's at their open pose.
double calibrate_scale(const FingertipFrame& open_human_tips,
                       const kin::KinematicModel& hand_model);

// Named canonical poses (open, fist, per-finger thumb touches, rock sign,
// one-finger extension) as joint recipes on the hand model.
std::vector<std::pair<std::string, Eigen::VectorXd>> canonical_hand_poses(
    const kin::KinematicModel& hand_model);

// Canonical poses first, then smooth random waypoint sweeps within limits,
// rendered to fingertips. Deterministic given seed.
std::vector<FingertipFrame> synth_tip_frames(const kin::KinematicModel& hand_model, int count,
                                             std::uint64_t seed);

struct PairSample {
    FingertipFrame tips;
    HandJointTarget joints;
};

struct PairDataset {
    std::vector<PairSample> samples;
    std::vector<int> train_indices;
    std::vector<int> val_indices;
    std::string provenance;
    std::uint64_t seed = 0;
};

// Oracle-labels every frame; deterministic 90/10 shuffled split.
PairDataset generate_pair_dataset(const kin::KinematicModel& hand_model,
                                  const std::vector<FingertipFrame>& tip_source, double scale,
                                  std::uint64_t seed);

void save_pair_dataset(const PairDataset& dataset, const std::filesystem::path& path);
PairDataset load_pair_dataset(const std::filesystem::path& path, std::uint64_t split_seed);

// Finger-wise regressor: per finger
// [Input(3) -> FC(128) -> LeakyReLU -> BN -> FC(128) -> LeakyReLU -> BN -> FC(4)],
// trained in pre-tanh space; inference applies tanh and maps it into the
// joint limits through per-joint midpoint/half-range.
struct HandRegressor {
    std::array<nn::DenseNet, 5> finger_nets;
    Eigen::Matrix<double, 15, 1> in_mean = Eigen::Matrix<double, 15, 1>::Zero();
    Eigen::Matrix<double, 15, 1> in_std = Eigen::Matrix<double, 15, 1>::Ones();
    HandJointTarget out_mid = HandJointTarget::Zero();
    HandJointTarget out_half = HandJointTarget::Ones();
    std::uint64_t init_seed = 0;

    static HandRegressor initialized(const kin::KinematicModel& hand_model, std::uint64_t seed,
                                     int hidden = 128);

    nlohmann::json to_json() const;
    static HandRegressor from_json(const nlohmann::json& doc);
    void save(const std::filesystem::path& path) const;
    static HandRegressor load(const std::filesystem::path& path);
};

struct TrainHyperparams {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    int batch_size = 2048;
    int max_epochs = 300;
    double early_stop_min_delta = 1e-6;
    int early_stop_patience = 20;
    int hidden = 128;
    std::uint64_t seed = 0;
};

struct TrainReport {
    std::vector<double> train_losses;  // full-pass infer-mode loss per epoch
    std::vector<double> val_losses;
    int best_epoch = -1;
    std::string stop_reason;  // "early-stop" | "max-epochs"
    double wall_time_s = 0.0;
    std::uint64_t seed = 0;
};

std::pair<HandRegressor, TrainReport> train_hand_retargeter(const PairDataset& dataset,
                                                            const kin::KinematicModel& hand_model,
                                                            const TrainHyperparams& hparams);

HandJointTarget infer_hand(const HandRegressor& regressor, const FingertipFrame& tips);

struct EvalMetrics {
    double mse_normalized = 0.0;            // pre-tanh space
    Eigen::Matrix<double, 20, 1> per_joint_rms = Eigen::Matrix<double, 20, 1>::Zero();
    double max_abs_error = 0.0;             // radians
    double latency_us_per_call = 0.0;
};

enum class Split { Train, Validation, All };

EvalMetrics eval_retargeter(const HandRegressor& regressor, const PairDataset& dataset,
                            Split split);

// Pre-tanh training loss of the regressor over a sample list (used by tests
// and by the trainer itself).
double normalized_loss(const HandRegressor& regressor, const PairDataset& dataset,
                       const std::vector<int>& indices);

}  // namespace humdex::hand
