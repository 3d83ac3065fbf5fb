#pragma once

#include <Eigen/Dense>
#include <functional>

namespace humdex::solve {

// Nonlinear least-squares problem over a box-constrained parameter vector.
// cost(q) = ||r(q)||^2.
struct LeastSquaresProblem {
    virtual ~LeastSquaresProblem() = default;
    virtual int residual_dim() const = 0;
    virtual int param_dim() const = 0;
    virtual Eigen::VectorXd residual(const Eigen::VectorXd& q) const = 0;
    virtual Eigen::MatrixXd jacobian(const Eigen::VectorXd& q) const = 0;
    virtual Eigen::VectorXd clamp(const Eigen::VectorXd& q) const { return q; }
};

struct LmOptions {
    int max_iterations = 50;
    double cost_tolerance = 1e-10;
    double step_tolerance = 1e-8;
    double initial_damping = 1e-3;
    double damping_up = 10.0;
    double damping_down = 0.1;
};

struct LmResult {
    Eigen::VectorXd q;
    double final_cost = 0.0;
    int iterations = 0;       // damping trials, accepted or rejected
    int accepted_steps = 0;
    bool converged = false;   // stopped on a tolerance, not on max_iterations
    std::vector<double> accepted_costs;  // cost after each accepted step
};

// Levenberg-Marquardt with multiplicative damping and reject-on-increase:
// each iteration solves (J^T J + lambda diag(J^T J) + eps I) d = -J^T r with
// eps = 1e-12, clamps q+d to the box, and accepts only on strict cost
// decrease (lambda *= damping_down) else rejects (lambda *= damping_up).
// Stops when cost <= cost_tolerance, the candidate step norm falls below
// step_tolerance, or max_iterations is exhausted.
LmResult lm_minimize(const LeastSquaresProblem& problem, const Eigen::VectorXd& q0,
                     const LmOptions& options);

}  // namespace humdex::solve
