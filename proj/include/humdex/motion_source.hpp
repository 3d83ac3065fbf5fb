#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "humdex/body_retarget.hpp"
#include "humdex/kinematics.hpp"

namespace humdex::motion {

// Per-joint sinusoid of the synthetic body program.
struct JointWave {
    double amplitude = 0.0;     // radians, about the limit midpoint
    double frequency_hz = 0.0;
    double phase = 0.0;
};

struct MotionSpec {
    double duration_s = 1.0;
    double rate_hz = 100.0;
    std::uint64_t seed = 0;
    // Explicit per-joint waves; empty means a seeded random program with
    // amplitudes up to amplitude_scale of each joint's half-range.
    std::vector<JointWave> body_program;
    double amplitude_scale = 0.35;
    bool hands = true;
    double hand_cycle_s = 2.0;  // seconds per canonical-pose transition
    int node_count = 15;
};

// Positions are snapped to an absolute binary grid so that a global offset
// (itself snapped) adds without rounding: drift then cancels exactly in any
// pelvis- or anchor-relative difference.
double snap_to_grid(double x);
Eigen::Vector3d snap_to_grid(const Eigen::Vector3d& v);

// Deterministic synthetic capture: body joints follow the wave program on the
// donor body model, fingertips sweep the canonical hand poses on the donor
// hand model. round(duration*rate) frames at uniform 1/rate spacing.
std::vector<retarget::HumanFrame> synth_motion(const MotionSpec& spec,
                                               const kin::KinematicModel& body_model,
                                               const kin::KinematicModel& hand_model);

// Adds one random-walk offset (std sigma*sqrt(dt) per axis per step) to every
// link position of each frame; orientations and fingertips untouched.
std::vector<retarget::HumanFrame> inject_drift(std::vector<retarget::HumanFrame> frames,
                                               double sigma, std::uint64_t seed);

void save_motion(const std::vector<retarget::HumanFrame>& frames,
                 const std::filesystem::path& path);
std::vector<retarget::HumanFrame> load_motion(const std::filesystem::path& path);

}  // namespace humdex::motion
