#include "humdex/two_stage.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "humdex/error.hpp"
#include "humdex/json_io.hpp"
#include "humdex/log.hpp"

namespace humdex::twostage {

using nlohmann::json;

std::vector<Eigen::VectorXd> proprio_from_actions(const std::vector<Eigen::VectorXd>& actions) {
    std::vector<Eigen::VectorXd> proprio;
    proprio.reserve(actions.size());
    for (size_t t = 0; t < actions.size(); ++t) {
        proprio.push_back(t == 0 ? actions[0] : actions[t - 1]);
    }
    return proprio;
}

std::vector<TrainingSample> human_to_training(const std::vector<pipeline::EpisodeRecord>& episodes,
                                              int* skipped_episodes) {
    int skipped = 0;
    std::vector<TrainingSample> samples;
    for (const auto& episode : episodes) {
        if (episode.frames.empty()) {
            ++skipped;
            continue;
        }
        std::vector<Eigen::VectorXd> actions;
        actions.reserve(episode.frames.size());
        for (const auto& frame : episode.frames) actions.push_back(frame.command.flatten());
        const auto proprio = proprio_from_actions(actions);
        for (size_t t = 0; t < actions.size(); ++t) {
            TrainingSample sample;
            sample.proprio = proprio[t];
            sample.action = actions[t];
            sample.source = TrainingSample::Source::Human;
            samples.push_back(std::move(sample));
        }
    }
    if (skipped_episodes != nullptr) *skipped_episodes = skipped;
    if (skipped > 0) log::warn(std::to_string(skipped) + " empty episode(s) skipped");
    return samples;
}

Eigen::VectorXd command_to_state_layout(const retarget::CommandVector& cmd,
                                        const std::vector<int>& state_dof_indices) {
    Eigen::VectorXd state(static_cast<Eigen::Index>(state_dof_indices.size()) +
                          cmd.q_hand_left.size() + cmd.q_hand_right.size());
    Eigen::Index row = 0;
    for (int dof : state_dof_indices) {
        if (dof < 0 || dof >= cmd.q_body.size()) {
            throw Error(ErrorKind::Dimension, "state dof index out of range");
        }
        state[row++] = cmd.q_body[dof];
    }
    state.segment(row, cmd.q_hand_left.size()) = cmd.q_hand_left;
    row += cmd.q_hand_left.size();
    state.segment(row, cmd.q_hand_right.size()) = cmd.q_hand_right;
    return state;
}

LagReport validate_lag(const std::vector<pipeline::EpisodeRecord>& robot_episodes,
                       const std::vector<int>& state_dof_indices, int max_k) {
    LagReport report;
    report.mean_error.assign(static_cast<size_t>(max_k + 1), 0.0);
    std::vector<std::int64_t> counts(static_cast<size_t>(max_k + 1), 0);

    for (const auto& episode : robot_episodes) {
        if (static_cast<int>(episode.frames.size()) < max_k + 1) continue;
        bool has_states = true;
        for (const auto& frame : episode.frames) has_states &= frame.state.has_value();
        if (!has_states) {
            throw Error(ErrorKind::Validation,
                        "episode '" + episode.episode_id + "' lacks a state stream");
        }
        ++report.episodes_used;
        const int n = static_cast<int>(episode.frames.size());
        for (int k = 0; k <= max_k; ++k) {
            for (int t = 0; t + k < n; ++t) {
                const Eigen::VectorXd projected =
                    command_to_state_layout(episode.frames[static_cast<size_t>(t)].command,
                                            state_dof_indices);
                const Eigen::VectorXd& s = *episode.frames[static_cast<size_t>(t + k)].state;
                if (s.size() != projected.size()) {
                    throw Error(ErrorKind::Dimension, "state dimension does not match the layout");
                }
                report.mean_error[static_cast<size_t>(k)] += (projected - s).norm();
                ++counts[static_cast<size_t>(k)];
            }
        }
    }
    if (report.episodes_used == 0) {
        throw Error(ErrorKind::Validation, "no episode long enough for lag validation");
    }
    for (int k = 0; k <= max_k; ++k) {
        report.mean_error[static_cast<size_t>(k)] /= static_cast<double>(counts[static_cast<size_t>(k)]);
    }
    report.best_k = static_cast<int>(
        std::min_element(report.mean_error.begin(), report.mean_error.end()) -
        report.mean_error.begin());
    return report;
}

// ---------------------------------------------------------------------------
// Synthetic embodiment-gap experiment
// ---------------------------------------------------------------------------

namespace {

// Observation layout: [target(2), object_feature(1), background(2)].
constexpr int kObsDims = 5;
constexpr int kActDims = 2;

struct ReachEpisodeSpec {
    Eigen::Vector2d target;
    double object_feature = 0.0;
    Eigen::Vector2d background;
    Eigen::Vector2d start;
};

struct Sample {
    Eigen::Matrix<double, kObsDims, 1> obs;
    Eigen::Vector2d proprio;
    Eigen::Vector2d action;
};

Eigen::Vector2d clip_step(const Eigen::Vector2d& desired, double max_step) {
    const double norm = desired.norm();
    return norm <= max_step ? desired : (max_step / norm) * desired;
}

Eigen::Vector2d goal_point(const ExperimentConfig& config, const ReachEpisodeSpec& spec) {
    return spec.target + spec.object_feature * config.object_offset_gain;
}

Eigen::Matrix<double, kObsDims, 1> make_obs(const ReachEpisodeSpec& spec) {
    Eigen::Matrix<double, kObsDims, 1> obs;
    obs << spec.target.x(), spec.target.y(), spec.object_feature, spec.background.x(),
        spec.background.y();
    return obs;
}

// Expert waypoint policy: the next action is the current position advanced
// toward the goal by at most max_step, so the servo reaches it exactly and
// s_{t+1} == a_t.
std::vector<Sample> demonstrate(const ExperimentConfig& config, const ReachEpisodeSpec& spec,
                                bool warp_actions) {
    std::vector<Sample> samples;
    const Eigen::Vector2d goal = goal_point(config, spec);
    Eigen::Vector2d x = spec.start;
    Eigen::Vector2d prev_recorded_action;
    for (int t = 0; t < config.max_episode_steps; ++t) {
        const Eigen::Vector2d a = x + clip_step(goal - x, config.max_step);
        const Eigen::Vector2d recorded =
            warp_actions ? Eigen::Vector2d(config.warp_linear * a + config.warp_offset) : a;
        Sample sample;
        sample.obs = make_obs(spec);
        // Robot data carries the true proprioception; human data substitutes
        // the previous recorded action.
        sample.proprio = warp_actions ? (t == 0 ? recorded : prev_recorded_action)
                                      : x;
        sample.action = recorded;
        samples.push_back(sample);
        prev_recorded_action = recorded;
        x = x + clip_step(a - x, config.max_step);  // servo tracks the waypoint
        if ((x - goal).norm() <= 0.5 * config.success_radius) break;
    }
    return samples;
}

struct Policy {
    nn::DenseNet net;
    bool diverged = false;
};

Eigen::Vector2d policy_action(Policy& policy, const Eigen::Matrix<double, kObsDims, 1>& obs,
                              const Eigen::Vector2d& proprio) {
    Eigen::MatrixXd input(1, kObsDims + kActDims);
    input << obs.transpose(), proprio.transpose();
    const Eigen::MatrixXd out = nn::forward(policy.net, input, nn::Mode::Infer);
    return {out(0, 0), out(0, 1)};
}

bool rollout(const ExperimentConfig& config, Policy& policy, const ReachEpisodeSpec& spec) {
    const Eigen::Vector2d goal = goal_point(config, spec);
    Eigen::Vector2d x = spec.start;
    for (int t = 0; t < config.max_episode_steps; ++t) {
        const Eigen::Vector2d a = policy_action(policy, make_obs(spec), x);
        if (!a.allFinite()) return false;
        x = x + clip_step(a - x, config.max_step);
        if ((x - goal).norm() <= config.success_radius) return true;
    }
    return false;
}

void train_policy(Policy& policy, const std::vector<Sample>& samples, int epochs,
                  const ExperimentConfig& config, std::uint64_t seed) {
    if (samples.empty() || epochs <= 0) return;
    const Eigen::Index n = static_cast<Eigen::Index>(samples.size());
    Eigen::MatrixXd X(n, kObsDims + kActDims), Y(n, kActDims);
    for (Eigen::Index i = 0; i < n; ++i) {
        X.row(i) << samples[static_cast<size_t>(i)].obs.transpose(),
            samples[static_cast<size_t>(i)].proprio.transpose();
        Y.row(i) = samples[static_cast<size_t>(i)].action.transpose();
    }

    nn::AdamW optimizer;
    optimizer.lr = config.lr;
    optimizer.weight_decay = config.weight_decay;

    std::mt19937_64 rng(seed);
    std::vector<Eigen::Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (Eigen::Index begin = 0; begin < n; begin += config.batch_size) {
            const Eigen::Index size = std::min<Eigen::Index>(config.batch_size, n - begin);
            if (size < 2) continue;  // batchnorm-free nets still skip singleton batches
            Eigen::MatrixXd xb(size, X.cols()), yb(size, Y.cols());
            for (Eigen::Index r = 0; r < size; ++r) {
                xb.row(r) = X.row(order[static_cast<size_t>(begin + r)]);
                yb.row(r) = Y.row(order[static_cast<size_t>(begin + r)]);
            }
            nn::ForwardCache cache;
            const Eigen::MatrixXd pred = nn::forward(policy.net, xb, nn::Mode::Train, &cache);
            auto [loss, grad] = nn::mse_loss(pred, yb);
            if (!std::isfinite(loss)) {
                policy.diverged = true;
                return;
            }
            const nn::Gradients grads = nn::backward(policy.net, cache, grad);
            optimizer.step(policy.net, grads);
        }
    }
}

struct SeedData {
    std::vector<Sample> human;
    std::vector<Sample> robot;
    std::map<Setting, std::vector<ReachEpisodeSpec>> eval_sets;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

ReachEpisodeSpec robot_spec(const ExperimentConfig& config, std::mt19937_64& rng) {
    ReachEpisodeSpec spec;
    const double hw = config.robot_target_halfwidth;
    spec.target = config.robot_target_center +
                  Eigen::Vector2d(uniform(rng, -hw, hw), uniform(rng, -hw, hw));
    spec.object_feature = config.robot_object_feature;
    spec.background = config.robot_background;
    spec.start = {uniform(rng, -config.start_jitter.x(), config.start_jitter.x()),
                  uniform(rng, -config.start_jitter.y(), config.start_jitter.y())};
    return spec;
}

ReachEpisodeSpec human_spec(const ExperimentConfig& config, std::mt19937_64& rng) {
    ReachEpisodeSpec spec;
    const double r = config.human_target_range;
    spec.target = {uniform(rng, -r, r), uniform(rng, -r, r)};
    spec.object_feature = config.robot_object_feature;
    spec.background = config.robot_background;
    spec.start = {uniform(rng, -config.start_jitter.x(), config.start_jitter.x()),
                  uniform(rng, -config.start_jitter.y(), config.start_jitter.y())};
    return spec;
}

SeedData build_seed_data(const ExperimentConfig& config, std::uint64_t seed) {
    SeedData data;
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + 1);

    auto record = [&](const ReachEpisodeSpec& spec, bool human) {
        const auto samples = demonstrate(config, spec, human);
        auto& sink = human ? data.human : data.robot;
        sink.insert(sink.end(), samples.begin(), samples.end());
    };

    for (int e = 0; e < config.robot_episodes; ++e) record(robot_spec(config, rng), false);

    // Position variation: wide targets, base object and background.
    for (int e = 0; e < config.human_episodes_per_variation; ++e) {
        record(human_spec(config, rng), true);
    }
    // Object variation: one group per object feature.
    for (double feature : config.human_object_features) {
        for (int e = 0; e < config.human_episodes_per_variation; ++e) {
            ReachEpisodeSpec spec = human_spec(config, rng);
            spec.object_feature = feature;
            record(spec, true);
        }
    }
    // Background variation: one group per background vector.
    for (const auto& background : config.human_backgrounds) {
        for (int e = 0; e < config.human_episodes_per_variation; ++e) {
            ReachEpisodeSpec spec = human_spec(config, rng);
            spec.background = background;
            record(spec, true);
        }
    }

    // Shared evaluation instances per setting, fixed across methods.
    std::mt19937_64 eval_rng(seed * 0x9E3779B97F4A7C15ull + 2);
    auto& seen = data.eval_sets[Setting::Seen];
    auto& ood_pos = data.eval_sets[Setting::OodPosition];
    auto& ood_obj = data.eval_sets[Setting::OodObject];
    auto& ood_bg = data.eval_sets[Setting::OodBackground];
    for (int e = 0; e < config.eval_episodes; ++e) {
        seen.push_back(robot_spec(config, eval_rng));

        ReachEpisodeSpec pos = robot_spec(config, eval_rng);
        pos.target = {uniform(eval_rng, -0.9, -0.1), uniform(eval_rng, -0.9, -0.1)};
        ood_pos.push_back(pos);

        ReachEpisodeSpec obj = robot_spec(config, eval_rng);
        obj.object_feature = config.human_object_features[static_cast<size_t>(e) %
                                                          config.human_object_features.size()];
        ood_obj.push_back(obj);

        ReachEpisodeSpec bg = robot_spec(config, eval_rng);
        bg.background =
            config.human_backgrounds[static_cast<size_t>(e) % config.human_backgrounds.size()];
        ood_bg.push_back(bg);
    }
    return data;
}

MethodOutcome evaluate(const ExperimentConfig& config, Policy& policy, const SeedData& data) {
    MethodOutcome outcome;
    outcome.diverged = policy.diverged;
    for (const auto& [setting, specs] : data.eval_sets) {
        int successes = 0;
        for (const auto& spec : specs) {
            if (!policy.diverged && rollout(config, policy, spec)) ++successes;
        }
        outcome.success[to_string(setting)] =
            static_cast<double>(successes) / static_cast<double>(specs.size());
    }
    return outcome;
}

std::vector<Sample> concat(const std::vector<Sample>& a, const std::vector<Sample>& b) {
    std::vector<Sample> out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

}  // namespace

const char* to_string(Method method) {
    switch (method) {
        case Method::TwoStage: return "TwoStage";
        case Method::RobotOnly: return "RobotOnly";
        case Method::Mix: return "Mix";
    }
    return "unknown";
}

const char* to_string(Setting setting) {
    switch (setting) {
        case Setting::Seen: return "Seen";
        case Setting::OodPosition: return "OodPosition";
        case Setting::OodObject: return "OodObject";
        case Setting::OodBackground: return "OodBackground";
    }
    return "unknown";
}

json ExperimentConfig::to_json() const {
    json seeds_json = json::array();
    for (auto s : seeds) seeds_json.push_back(s);
    json hidden = json::array();
    for (int h : hidden_dims) hidden.push_back(h);
    json features = json::array();
    for (double f : human_object_features) features.push_back(f);
    json backgrounds = json::array();
    for (const auto& b : human_backgrounds) backgrounds.push_back(json{b.x(), b.y()});
    return json{{"success_radius", success_radius},
                {"max_step", max_step},
                {"max_episode_steps", max_episode_steps},
                {"robot_target_center", json{robot_target_center.x(), robot_target_center.y()}},
                {"robot_target_halfwidth", robot_target_halfwidth},
                {"human_target_range", human_target_range},
                {"start_jitter", json{start_jitter.x(), start_jitter.y()}},
                {"object_offset_gain", json{object_offset_gain.x(), object_offset_gain.y()}},
                {"human_object_features", features},
                {"human_backgrounds", backgrounds},
                {"robot_object_feature", robot_object_feature},
                {"robot_background", json{robot_background.x(), robot_background.y()}},
                {"warp_linear", json{warp_linear(0, 0), warp_linear(0, 1), warp_linear(1, 0),
                                     warp_linear(1, 1)}},
                {"warp_offset", json{warp_offset.x(), warp_offset.y()}},
                {"robot_episodes", robot_episodes},
                {"human_episodes_per_variation", human_episodes_per_variation},
                {"hidden_dims", hidden},
                {"stage1_epochs", stage1_epochs},
                {"stage2_epochs", stage2_epochs},
                {"lr", lr},
                {"batch_size", batch_size},
                {"weight_decay", weight_decay},
                {"eval_episodes", eval_episodes},
                {"seeds", seeds_json}};
}

ExperimentConfig ExperimentConfig::from_json(const json& doc) {
    ExperimentConfig config;
    auto vec2 = [](const json& arr, Eigen::Vector2d fallback) {
        if (!arr.is_array() || arr.size() != 2) return fallback;
        return Eigen::Vector2d(arr[0].get<double>(), arr[1].get<double>());
    };
    config.success_radius = doc.value("success_radius", config.success_radius);
    config.max_step = doc.value("max_step", config.max_step);
    config.max_episode_steps = doc.value("max_episode_steps", config.max_episode_steps);
    if (doc.contains("robot_target_center"))
        config.robot_target_center = vec2(doc["robot_target_center"], config.robot_target_center);
    config.robot_target_halfwidth =
        doc.value("robot_target_halfwidth", config.robot_target_halfwidth);
    config.human_target_range = doc.value("human_target_range", config.human_target_range);
    if (doc.contains("start_jitter")) config.start_jitter = vec2(doc["start_jitter"], config.start_jitter);
    if (doc.contains("object_offset_gain"))
        config.object_offset_gain = vec2(doc["object_offset_gain"], config.object_offset_gain);
    if (doc.contains("human_object_features")) {
        config.human_object_features.clear();
        for (const auto& f : doc["human_object_features"])
            config.human_object_features.push_back(f.get<double>());
    }
    if (doc.contains("human_backgrounds")) {
        config.human_backgrounds.clear();
        for (const auto& b : doc["human_backgrounds"])
            config.human_backgrounds.push_back(vec2(b, Eigen::Vector2d::Zero()));
    }
    config.robot_object_feature = doc.value("robot_object_feature", config.robot_object_feature);
    if (doc.contains("robot_background"))
        config.robot_background = vec2(doc["robot_background"], config.robot_background);
    if (doc.contains("warp_linear")) {
        const auto& w = doc["warp_linear"];
        if (w.is_array() && w.size() == 4) {
            config.warp_linear << w[0].get<double>(), w[1].get<double>(), w[2].get<double>(),
                w[3].get<double>();
        }
    }
    if (doc.contains("warp_offset")) config.warp_offset = vec2(doc["warp_offset"], config.warp_offset);
    config.robot_episodes = doc.value("robot_episodes", config.robot_episodes);
    config.human_episodes_per_variation =
        doc.value("human_episodes_per_variation", config.human_episodes_per_variation);
    if (doc.contains("hidden_dims")) {
        config.hidden_dims.clear();
        for (const auto& h : doc["hidden_dims"]) config.hidden_dims.push_back(h.get<int>());
    }
    config.stage1_epochs = doc.value("stage1_epochs", config.stage1_epochs);
    config.stage2_epochs = doc.value("stage2_epochs", config.stage2_epochs);
    config.lr = doc.value("lr", config.lr);
    config.batch_size = doc.value("batch_size", config.batch_size);
    config.weight_decay = doc.value("weight_decay", config.weight_decay);
    config.eval_episodes = doc.value("eval_episodes", config.eval_episodes);
    if (doc.contains("seeds")) {
        config.seeds.clear();
        for (const auto& s : doc["seeds"]) config.seeds.push_back(s.get<std::uint64_t>());
    }
    return config;
}

ExperimentReport run_two_stage(const ExperimentConfig& config) {
    if (std::abs(config.warp_linear.determinant()) <= 1e-6) {
        throw Error(ErrorKind::Validation, "embodiment warp must be invertible");
    }
    if (config.robot_episodes < 1 || config.human_episodes_per_variation < 1) {
        throw Error(ErrorKind::Validation, "dataset sizes must be at least 1");
    }

    ExperimentReport report;
    report.config_echo = config.to_json();

    std::vector<int> net_dims;
    net_dims.push_back(kObsDims + kActDims);
    for (int h : config.hidden_dims) net_dims.push_back(h);
    net_dims.push_back(kActDims);

    for (std::uint64_t seed : config.seeds) {
        const SeedData data = build_seed_data(config, seed);
        const std::vector<Sample> mixed = concat(data.human, data.robot);
        std::map<std::string, MethodOutcome> outcomes;

        // TwoStage: human pretraining then robot finetuning of the same net.
        {
            Policy policy{nn::DenseNet::mlp(net_dims, /*batchnorm=*/false, seed), false};
            train_policy(policy, data.human, config.stage1_epochs, config, seed + 11);
            if (!policy.diverged) {
                train_policy(policy, data.robot, config.stage2_epochs, config, seed + 12);
            }
            outcomes[to_string(Method::TwoStage)] = evaluate(config, policy, data);
        }
        // RobotOnly: the full budget on robot data.
        {
            Policy policy{nn::DenseNet::mlp(net_dims, false, seed), false};
            train_policy(policy, data.robot, config.stage1_epochs + config.stage2_epochs, config,
                         seed + 13);
            outcomes[to_string(Method::RobotOnly)] = evaluate(config, policy, data);
        }
        // Mix: the full budget on the naive union.
        {
            Policy policy{nn::DenseNet::mlp(net_dims, false, seed), false};
            train_policy(policy, mixed, config.stage1_epochs + config.stage2_epochs, config,
                         seed + 14);
            outcomes[to_string(Method::Mix)] = evaluate(config, policy, data);
        }
        report.per_seed.push_back(std::move(outcomes));
    }

    // Seed means.
    for (const auto& method : {Method::TwoStage, Method::RobotOnly, Method::Mix}) {
        MethodOutcome mean;
        for (const auto& setting :
             {Setting::Seen, Setting::OodPosition, Setting::OodObject, Setting::OodBackground}) {
            double total = 0.0;
            for (const auto& per_seed : report.per_seed)
                total += per_seed.at(to_string(method)).success.at(to_string(setting));
            mean.success[to_string(setting)] = total / static_cast<double>(report.per_seed.size());
        }
        for (const auto& per_seed : report.per_seed)
            mean.diverged = mean.diverged || per_seed.at(to_string(method)).diverged;
        report.mean[to_string(method)] = std::move(mean);
    }
    return report;
}

json ExperimentReport::to_json() const {
    json per_seed_json = json::array();
    for (const auto& seed_outcomes : per_seed) {
        json methods = json::object();
        for (const auto& [method, outcome] : seed_outcomes) {
            methods[method] = json{{"success", outcome.success}, {"diverged", outcome.diverged}};
        }
        per_seed_json.push_back(std::move(methods));
    }
    json mean_json = json::object();
    for (const auto& [method, outcome] : mean) {
        mean_json[method] = json{{"success", outcome.success}, {"diverged", outcome.diverged}};
    }
    return json{{"per_seed", per_seed_json}, {"mean", mean_json}, {"config", config_echo}};
}

std::string ExperimentReport::to_markdown() const {
    std::ostringstream out;
    out << "| Method | Seen | OodPosition | OodObject | OodBackground |\n";
    out << "|---|---|---|---|---|\n";
    for (const auto& [method, outcome] : mean) {
        out << "| " << method;
        for (const char* setting : {"Seen", "OodPosition", "OodObject", "OodBackground"}) {
            char cell[32];
            std::snprintf(cell, sizeof(cell), " | %.3f", outcome.success.at(setting));
            out << cell;
        }
        out << " |\n";
    }
    return out.str();
}

}  // namespace humdex::twostage
