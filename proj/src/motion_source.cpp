#include "humdex/motion_source.hpp"

#include <cmath>
#include <random>

#include "humdex/error.hpp"
#include "humdex/hand_retarget.hpp"
#include "humdex/json_io.hpp"

namespace humdex::motion {

namespace {

constexpr int kGridBits = 32;  // positions live on multiples of 2^-32 m

// Cosine blend between two joint vectors.
Eigen::VectorXd blend(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double t) {
    const double s = 0.5 - 0.5 * std::cos(M_PI * t);
    return (1.0 - s) * a + s * b;
}

}  // namespace

double snap_to_grid(double x) {
    return std::ldexp(std::round(std::ldexp(x, kGridBits)), -kGridBits);
}

Eigen::Vector3d snap_to_grid(const Eigen::Vector3d& v) {
    return {snap_to_grid(v.x()), snap_to_grid(v.y()), snap_to_grid(v.z())};
}

std::vector<retarget::HumanFrame> synth_motion(const MotionSpec& spec,
                                               const kin::KinematicModel& body_model,
                                               const kin::KinematicModel& hand_model) {
    if (spec.duration_s <= 0.0 || spec.rate_hz <= 0.0) {
        throw Error(ErrorKind::Validation, "motion spec needs positive duration and rate");
    }
    const auto frame_count = static_cast<std::int64_t>(std::llround(spec.duration_s * spec.rate_hz));

    std::mt19937_64 rng(spec.seed);
    std::vector<JointWave> program = spec.body_program;
    if (program.empty()) {
        const Eigen::VectorXd lower = body_model.limit_lower();
        const Eigen::VectorXd upper = body_model.limit_upper();
        std::uniform_real_distribution<double> amp(0.3, 1.0);
        std::uniform_real_distribution<double> freq(0.1, 0.4);
        std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
        for (int j = 0; j < body_model.dof_count; ++j) {
            JointWave wave;
            wave.amplitude = spec.amplitude_scale * 0.5 * (upper[j] - lower[j]) * amp(rng);
            wave.frequency_hz = freq(rng);
            wave.phase = phase(rng);
            program.push_back(wave);
        }
    }
    if (static_cast<int>(program.size()) != body_model.dof_count) {
        throw Error(ErrorKind::Dimension, "body program size does not match the donor model");
    }

    const Eigen::VectorXd mid = body_model.limit_midpoints();
    const Eigen::VectorXd lower = body_model.limit_lower();
    const Eigen::VectorXd upper = body_model.limit_upper();

    std::vector<std::pair<std::string, Eigen::VectorXd>> poses;
    if (spec.hands) poses = hand::canonical_hand_poses(hand_model);

    std::vector<retarget::HumanFrame> frames;
    frames.reserve(static_cast<size_t>(frame_count));
    for (std::int64_t k = 0; k < frame_count; ++k) {
        const double t = static_cast<double>(k) / spec.rate_hz;
        retarget::HumanFrame frame;
        frame.timestamp_us = std::llround(static_cast<double>(k) * 1e6 / spec.rate_hz);
        frame.node_count = spec.node_count;

        Eigen::VectorXd q(body_model.dof_count);
        for (int j = 0; j < body_model.dof_count; ++j) {
            const JointWave& wave = program[static_cast<size_t>(j)];
            q[j] = std::clamp(mid[j] + wave.amplitude *
                                           std::sin(2.0 * M_PI * wave.frequency_hz * t + wave.phase),
                              lower[j], upper[j]);
        }
        const kin::LinkPoseSet body_poses = kin::forward_kinematics(body_model, q);
        for (size_t i = 0; i < body_model.links.size(); ++i) {
            frame.link_rotations[body_model.links[i].name] = body_poses[i].rotation;
            frame.link_positions[body_model.links[i].name] = snap_to_grid(body_poses[i].position);
        }

        if (spec.hands && poses.size() >= 2) {
            const double cycle = std::max(spec.hand_cycle_s, 1e-3);
            auto hand_q = [&](double offset) {
                const double u = t / cycle + offset;
                const auto seg = static_cast<std::int64_t>(std::floor(u));
                const double frac = u - static_cast<double>(seg);
                const size_t n = poses.size();
                const size_t a = static_cast<size_t>(((seg % static_cast<std::int64_t>(n)) +
                                                      static_cast<std::int64_t>(n)) %
                                                     static_cast<std::int64_t>(n));
                const size_t b = (a + 1) % n;
                return blend(poses[a].second, poses[b].second, frac);
            };
            frame.fingertips_left = hand::fingertips_at(hand_model, hand_q(0.0));
            frame.fingertips_right = hand::fingertips_at(hand_model, hand_q(0.5));
        }
        frames.push_back(std::move(frame));
    }
    return frames;
}

std::vector<retarget::HumanFrame> inject_drift(std::vector<retarget::HumanFrame> frames,
                                               double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw Error(ErrorKind::Validation, "drift sigma must be non-negative");
    if (sigma == 0.0 || frames.empty()) return frames;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    Eigen::Vector3d offset = Eigen::Vector3d::Zero();
    for (size_t k = 0; k < frames.size(); ++k) {
        // Per-step std sigma*sqrt(dt); the first frame reuses the next gap.
        double dt = 0.01;
        if (k + 1 < frames.size() && k == 0) {
            dt = static_cast<double>(frames[1].timestamp_us - frames[0].timestamp_us) * 1e-6;
        } else if (k > 0) {
            dt = static_cast<double>(frames[k].timestamp_us - frames[k - 1].timestamp_us) * 1e-6;
        }
        const double step_std = sigma * std::sqrt(std::max(dt, 0.0));
        offset += step_std * Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));
        offset = snap_to_grid(offset);
        for (auto& [name, p] : frames[k].link_positions) p += offset;
    }
    return frames;
}

void save_motion(const std::vector<retarget::HumanFrame>& frames,
                 const std::filesystem::path& path) {
    std::vector<nlohmann::json> lines;
    lines.reserve(frames.size());
    for (const auto& frame : frames) lines.push_back(io::human_frame_to_json(frame));
    io::write_jsonl(path, lines);
}

std::vector<retarget::HumanFrame> load_motion(const std::filesystem::path& path) {
    std::vector<retarget::HumanFrame> frames;
    int line_no = 0;
    for (const auto& doc : io::read_jsonl(path)) {
        ++line_no;
        try {
            frames.push_back(io::human_frame_from_json(doc));
        } catch (const Error& e) {
            throw Error(e.kind(),
                        path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::Parse,
                        path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return frames;
}

}  // namespace humdex::motion
