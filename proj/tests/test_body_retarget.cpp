#include <random>

#include "doctest.h"
#include "humdex/body_retarget.hpp"
#include "humdex/error.hpp"
#include "test_helpers.hpp"

using namespace humdex;
using test_helpers::body_model;
using test_helpers::random_q;

namespace {

retarget::HumanFrame frame_from_fk(const kin::KinematicModel& model, const Eigen::VectorXd& q,
                                   std::int64_t t_us = 0) {
    const auto poses = kin::forward_kinematics(model, q);
    retarget::HumanFrame frame;
    frame.timestamp_us = t_us;
    for (size_t i = 0; i < model.links.size(); ++i) {
        frame.link_rotations[model.links[i].name] = poses[i].rotation;
        frame.link_positions[model.links[i].name] = poses[i].position;
    }
    return frame;
}

// Brute-force term-by-term oracle with explicit loops.
double cost_oracle(const retarget::RetargetConfig& config, const retarget::HumanFrame& frame,
                   const kin::KinematicModel& model, const Eigen::VectorXd& q) {
    const auto poses = kin::forward_kinematics(model, q);
    double cost = 0.0;
    for (const auto& pair : config.orientation_links) {
        const Eigen::Matrix3d& rh = frame.link_rotations.at(pair.human);
        const Eigen::Matrix3d& rr = poses[static_cast<size_t>(pair.robot)].rotation;
        double term = 0.0;
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) term += (rh(a, b) - rr(a, b)) * (rh(a, b) - rr(a, b));
        cost += pair.weight * term;
    }
    const Eigen::Matrix3d rp_h = frame.link_rotations.at(config.pelvis_human);
    const Eigen::Vector3d pp_h = frame.link_positions.at(config.pelvis_human);
    const auto& pelvis_r = poses[static_cast<size_t>(config.pelvis_robot)];
    for (const auto& pair : config.position_links) {
        const Eigen::Vector3d ph =
            rp_h.transpose() * (frame.link_positions.at(pair.human) - pp_h);
        const Eigen::Vector3d pr =
            pelvis_r.rotation.transpose() *
            (poses[static_cast<size_t>(pair.robot)].position - pelvis_r.position);
        cost += pair.weight * (ph - pr).squaredNorm();
    }
    return cost;
}

}  // namespace

TEST_SUITE("body_retarget") {

TEST_CASE("cost: all weights zero means zero cost") {
    const auto& model = body_model();
    auto config = retarget::default_config(model);
    for (auto& pair : config.orientation_links) pair.weight = 0.0;
    for (auto& pair : config.position_links) pair.weight = 0.0;
    std::mt19937_64 rng(1);
    const auto frame = frame_from_fk(model, random_q(model, rng));
    const auto result = retarget_cost(config, frame, model, random_q(model, rng));
    CHECK(result.cost == 0.0);
}

TEST_CASE("cost: self-consistency on an FK-generated frame") {
    const auto& model = body_model();
    const auto config = retarget::default_config(model);
    std::mt19937_64 rng(2);
    const Eigen::VectorXd q = random_q(model, rng);
    const auto frame = frame_from_fk(model, q);
    const auto result = retarget_cost(config, frame, model, q);
    CHECK(result.cost <= 1e-18);
}

TEST_CASE("cost: matches the explicit-loop oracle and equals ||r||^2") {
    const auto& model = body_model();
    auto config = retarget::default_config(model);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> wdist(0.0, 3.0);
    for (auto& pair : config.orientation_links) pair.weight = wdist(rng);
    for (auto& pair : config.position_links) pair.weight = wdist(rng);

    for (int trial = 0; trial < 10; ++trial) {
        const auto frame = frame_from_fk(model, random_q(model, rng));
        const Eigen::VectorXd q = random_q(model, rng);
        const auto result = retarget_cost(config, frame, model, q);
        const double oracle = cost_oracle(config, frame, model, q);
        CHECK(result.cost == doctest::Approx(oracle).epsilon(1e-12));
        CHECK(std::abs(result.residual.squaredNorm() - result.cost) <= 1e-12);
    }
}

TEST_CASE("cost: missing human link raises a mapping error naming it") {
    const auto& model = body_model();
    const auto config = retarget::default_config(model);
    retarget::HumanFrame frame;  // empty
    frame.link_rotations["pelvis"] = Eigen::Matrix3d::Identity();
    frame.link_positions["pelvis"] = Eigen::Vector3d::Zero();
    try {
        retarget_cost(config, frame, model, Eigen::VectorXd::Zero(model.dof_count));
        FAIL("expected a mapping error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Mapping);
        CHECK(std::string(e.what()).find("left_hip_pitch") != std::string::npos);
    }
}

TEST_CASE("solve: already-at-target start needs zero accepted steps") {
    const auto& model = body_model();
    const auto config = retarget::default_config(model);
    std::mt19937_64 rng(4);
    const Eigen::VectorXd q = random_q(model, rng);
    const auto frame = frame_from_fk(model, q);
    const auto solution = retarget::solve_frame(config, frame, model, q);
    CHECK(solution.accepted_steps == 0);
    CHECK(solution.converged);
    CHECK(solution.q_star == q);  // bitwise: never moved
}

TEST_CASE("solve: zero weights converge immediately with q_init returned") {
    const auto& model = body_model();
    auto config = retarget::default_config(model);
    for (auto& pair : config.orientation_links) pair.weight = 0.0;
    for (auto& pair : config.position_links) pair.weight = 0.0;
    std::mt19937_64 rng(5);
    const auto frame = frame_from_fk(model, random_q(model, rng));
    const Eigen::VectorXd q0 = random_q(model, rng);
    const auto solution = retarget::solve_frame(config, frame, model, q0);
    CHECK(solution.converged);
    CHECK(solution.iterations == 0);
    CHECK(solution.q_star == q0);
}

TEST_CASE("solve: reaches FK-generated targets from the limit midpoints") {
    const auto& model = body_model();
    const auto config = retarget::default_config(model);
    std::mt19937_64 rng(6);
    int reached = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const auto frame = frame_from_fk(model, random_q(model, rng));
        const auto solution = retarget::solve_frame(config, frame, model, model.limit_midpoints());
        // Monotone descent of accepted costs.
        for (size_t i = 1; i < solution.accepted_costs.size(); ++i) {
            CHECK(solution.accepted_costs[i] < solution.accepted_costs[i - 1]);
        }
        // Limits always hold.
        const Eigen::VectorXd lo = model.limit_lower(), hi = model.limit_upper();
        for (int j = 0; j < model.dof_count; ++j) {
            CHECK(solution.q_star[j] >= lo[j]);
            CHECK(solution.q_star[j] <= hi[j]);
        }
        if (solution.final_cost <= 1e-6) ++reached;
    }
    CHECK(reached >= 9);
}

TEST_CASE("solve: weight scaling keeps the argmin fixed") {
    const auto& model = body_model();
    const auto base_config = retarget::default_config(model);
    std::mt19937_64 rng(7);
    const auto frame = frame_from_fk(model, random_q(model, rng));
    const Eigen::VectorXd q0 = model.limit_midpoints();
    const auto base = retarget::solve_frame(base_config, frame, model, q0);

    const Eigen::VectorXd q_probe = random_q(model, rng);
    const double base_cost = retarget_cost(base_config, frame, model, q_probe).cost;

    for (double c : {0.1, 10.0}) {
        auto config = base_config;
        for (auto& pair : config.orientation_links) pair.weight *= c;
        for (auto& pair : config.position_links) pair.weight *= c;
        const double scaled_cost = retarget_cost(config, frame, model, q_probe).cost;
        CHECK(scaled_cost == doctest::Approx(c * base_cost).epsilon(1e-12));
        const auto solution = retarget::solve_frame(config, frame, model, q0);
        CHECK((solution.q_star - base.q_star).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("stream: repeated identical frames give identical solutions after frame 0") {
    const auto& model = body_model();
    const auto config = retarget::default_config(model);
    std::mt19937_64 rng(8);
    const auto frame = frame_from_fk(model, random_q(model, rng));
    const std::vector<retarget::HumanFrame> frames(5, frame);
    const auto solutions = retarget::retarget_stream(config, frames, model);
    REQUIRE(solutions.size() == 5);
    for (size_t k = 2; k < solutions.size(); ++k) {
        CHECK(solutions[k].q_star == solutions[1].q_star);
    }
}

TEST_CASE("stream: exact global-translation invariance") {
    const auto& model = body_model();
    const auto config = retarget::default_config(model);
    std::mt19937_64 rng(9);
    auto snap = [](double x) { return std::ldexp(std::round(std::ldexp(x, 32)), -32); };

    std::vector<retarget::HumanFrame> frames, shifted;
    for (int k = 0; k < 5; ++k) {
        auto frame = frame_from_fk(model, random_q(model, rng), 10000 * k);
        for (auto& [name, p] : frame.link_positions) {
            p = {snap(p.x()), snap(p.y()), snap(p.z())};
        }
        auto moved = frame;
        const Eigen::Vector3d d(snap(0.0371 * k), snap(-0.71), snap(0.0081 * k * k));
        for (auto& [name, p] : moved.link_positions) p += d;
        frames.push_back(std::move(frame));
        shifted.push_back(std::move(moved));
    }
    const auto base = retarget::retarget_stream(config, frames, model);
    const auto moved = retarget::retarget_stream(config, shifted, model);
    for (size_t k = 0; k < base.size(); ++k) {
        CHECK(base[k].q_star == moved[k].q_star);  // bitwise
        CHECK(base[k].final_cost == moved[k].final_cost);
        CHECK(base[k].iterations == moved[k].iterations);
    }
}

TEST_CASE("stream: warm starts accept fewer steps than cold solving") {
    const auto& model = body_model();
    const auto config = retarget::default_config(model);
    // Smooth trajectory: interpolate between two random configurations.
    std::mt19937_64 rng(10);
    const Eigen::VectorXd qa = random_q(model, rng);
    const Eigen::VectorXd qb = random_q(model, rng);
    std::vector<retarget::HumanFrame> frames;
    const int n = 40;
    for (int k = 0; k < n; ++k) {
        const double t = static_cast<double>(k) / (n - 1);
        frames.push_back(frame_from_fk(model, (1.0 - t) * qa + t * qb, 10000 * k));
    }
    const auto warm = retarget::retarget_stream(config, frames, model);
    double warm_accepted = 0.0, cold_accepted = 0.0;
    for (const auto& s : warm) warm_accepted += s.accepted_steps;
    for (const auto& frame : frames) {
        cold_accepted +=
            retarget::solve_frame(config, frame, model, model.limit_midpoints()).accepted_steps;
    }
    CHECK(warm_accepted / n < cold_accepted / n);
}

TEST_CASE("assemble: shapes and zero case") {
    retarget::RetargetSolution solution;
    solution.q_star = Eigen::VectorXd::Zero(29);
    const auto cmd = retarget::assemble_command(solution, Eigen::VectorXd::Zero(20),
                                                Eigen::VectorXd::Zero(20), retarget::BaseInputs{});
    const Eigen::VectorXd flat = cmd.flatten();
    CHECK(flat.size() == 75);
    CHECK(flat.cwiseAbs().maxCoeff() == 0.0);
    CHECK(retarget::CommandVector::kBodyDims == 35);

    CHECK_THROWS_AS(retarget::assemble_command(solution, Eigen::VectorXd::Zero(19),
                                               Eigen::VectorXd::Zero(20), retarget::BaseInputs{}),
                    Error);
    retarget::RetargetSolution bad;
    bad.q_star = Eigen::VectorXd::Zero(7);
    CHECK_THROWS_AS(retarget::assemble_command(bad, Eigen::VectorXd::Zero(20),
                                               Eigen::VectorXd::Zero(20), retarget::BaseInputs{}),
                    Error);
}

}  // TEST_SUITE
