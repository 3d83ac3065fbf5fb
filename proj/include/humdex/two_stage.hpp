#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "humdex/neuralnet.hpp"
#include "humdex/teleop_pipeline.hpp"

namespace humdex::twostage {

struct TrainingSample {
    Eigen::VectorXd observation;
    Eigen::VectorXd proprio;
    Eigen::VectorXd action;
    enum class Source { Human, Robot } source = Source::Human;
};

// Proprioception approximation for action-only streams: s_0 = a_0,
// s_t = a_{t-1} for t >= 1.
std::vector<Eigen::VectorXd> proprio_from_actions(const std::vector<Eigen::VectorXd>& actions);

// Converts recorded human episodes (commands only, no state stream) into
// training samples with the substituted proprioception. Empty episodes are
// skipped and counted.
std::vector<TrainingSample> human_to_training(const std::vector<pipeline::EpisodeRecord>& episodes,
                                              int* skipped_episodes = nullptr);

// Projects a command vector onto the recorded state layout
// (23 body joints named by the model's "state_joints" set + 40 hand joints).
Eigen::VectorXd command_to_state_layout(const retarget::CommandVector& cmd,
                                        const std::vector<int>& state_dof_indices);

struct LagReport {
    int best_k = 0;
    std::vector<double> mean_error;  // per k in [0, max_k]
    int episodes_used = 0;
};

// Mean ||proj(a_t) - s_{t+k}|| over all episodes per lag k; k* is the argmin.
// Episodes shorter than max_k + 1 frames are excluded.
LagReport validate_lag(const std::vector<pipeline::EpisodeRecord>& robot_episodes,
                       const std::vector<int>& state_dof_indices, int max_k = 5);

// Synthetic 2-D reach task. The action is an absolute waypoint tracked by a
// rate-limited servo, so the next state equals the previous action whenever
// the waypoint is within reach; "human" demonstrations record affinely
// warped actions to model the embodiment gap.
struct ExperimentConfig {
    // task geometry
    double success_radius = 0.1;
    double max_step = 0.2;
    int max_episode_steps = 30;
    Eigen::Vector2d robot_target_center{0.5, 0.5};
    double robot_target_halfwidth = 0.1;
    double human_target_range = 1.0;  // targets uniform in [-r, r]^2
    Eigen::Vector2d start_jitter{0.1, 0.1};
    // object feature shifts the grasp point by feature * object_offset_gain
    Eigen::Vector2d object_offset_gain{0.3, -0.15};
    std::vector<double> human_object_features{-0.8, 0.4, 0.9};
    std::vector<Eigen::Vector2d> human_backgrounds{{-0.6, 0.8}, {0.7, -0.4}, {0.2, 0.9}};
    double robot_object_feature = 0.0;
    Eigen::Vector2d robot_background{0.2, -0.3};
    // embodiment warp applied to recorded human actions: a -> M a + c
    Eigen::Matrix2d warp_linear = (Eigen::Matrix2d() << 0.9063, -0.5736, 0.5736, 0.9063).finished()
                                  * 1.25;  // 35 deg rotation, 1.25 scale
    Eigen::Vector2d warp_offset{0.1, -0.05};
    // dataset sizes
    int robot_episodes = 50;
    int human_episodes_per_variation = 100;  // position x1, object x3, background x3
    // policy and schedules
    std::vector<int> hidden_dims{64, 64};
    int stage1_epochs = 200;
    int stage2_epochs = 200;
    double lr = 1e-3;
    int batch_size = 256;
    double weight_decay = 1e-4;
    int eval_episodes = 30;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& doc);
};

enum class Method { TwoStage, RobotOnly, Mix };
enum class Setting { Seen, OodPosition, OodObject, OodBackground };

const char* to_string(Method method);
const char* to_string(Setting setting);

struct MethodOutcome {
    std::map<std::string, double> success;  // per setting name
    bool diverged = false;
};

struct ExperimentReport {
    std::vector<std::map<std::string, MethodOutcome>> per_seed;  // method name -> outcome
    std::map<std::string, MethodOutcome> mean;                   // averaged over seeds
    nlohmann::json config_echo;

    nlohmann::json to_json() const;
    std::string to_markdown() const;
};

ExperimentReport run_two_stage(const ExperimentConfig& config);

}  // namespace humdex::twostage
