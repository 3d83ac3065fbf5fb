#include "humdex/lm.hpp"

#include <cmath>

#include "humdex/error.hpp"

namespace humdex::solve {

LmResult lm_minimize(const LeastSquaresProblem& problem, const Eigen::VectorXd& q0,
                     const LmOptions& options) {
    constexpr double kTikhonov = 1e-12;

    LmResult result;
    result.q = problem.clamp(q0);

    Eigen::VectorXd r = problem.residual(result.q);
    double cost = r.squaredNorm();
    if (!std::isfinite(cost)) {
        throw Error(ErrorKind::Numeric, "non-finite cost at the initial configuration");
    }
    result.final_cost = cost;
    if (cost <= options.cost_tolerance || problem.param_dim() == 0 || r.size() == 0) {
        result.converged = true;
        return result;
    }

    double lambda = options.initial_damping;
    Eigen::MatrixXd J = problem.jacobian(result.q);
    Eigen::MatrixXd jtj = J.transpose() * J;
    Eigen::VectorXd jtr = J.transpose() * r;

    while (result.iterations < options.max_iterations) {
        ++result.iterations;
        Eigen::MatrixXd lhs = jtj;
        lhs.diagonal() += lambda * jtj.diagonal();
        lhs.diagonal().array() += kTikhonov;
        const Eigen::VectorXd delta = lhs.ldlt().solve(-jtr);

        const Eigen::VectorXd candidate = problem.clamp(result.q + delta);
        const Eigen::VectorXd step = candidate - result.q;
        const double step_norm = step.norm();

        const Eigen::VectorXd r_new = problem.residual(candidate);
        const double cost_new = r_new.squaredNorm();

        const bool accept = std::isfinite(cost_new) && cost_new < cost;
        if (accept) {
            result.q = candidate;
            cost = cost_new;
            result.final_cost = cost;
            ++result.accepted_steps;
            result.accepted_costs.push_back(cost);
            lambda *= options.damping_down;
            if (cost <= options.cost_tolerance) {
                result.converged = true;
                return result;
            }
            r = r_new;
            J = problem.jacobian(result.q);
            jtj = J.transpose() * J;
            jtr = J.transpose() * r;
        } else {
            lambda *= options.damping_up;
        }
        if (step_norm <= options.step_tolerance) {
            result.converged = true;
            return result;
        }
    }
    return result;
}

}  // namespace humdex::solve
