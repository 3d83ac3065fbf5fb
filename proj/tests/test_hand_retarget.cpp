#include <random>

#include "doctest.h"
#include "humdex/error.hpp"
#include "humdex/hand_retarget.hpp"
#include "test_helpers.hpp"

using namespace humdex;
using test_helpers::hand_model;

namespace {

// Independent dense grid-search oracle over one finger's 4 joints, written
// against the generic FK (not the solver's internal chain path).
struct GridOracle {
    const kin::KinematicModel& model;
    hand::FingerLayout layout;

    explicit GridOracle(const kin::KinematicModel& m) : model(m), layout(hand::finger_layout(m)) {}

    // Best residual norm for one finger at `points` samples per joint.
    double best_residual(int finger, const Eigen::Vector3d& target, int points) const {
        // Collect the finger's chain links root->tip.
        std::vector<const kin::Link*> chain;
        for (int li = layout.tip_links[static_cast<size_t>(finger)];
             model.links[static_cast<size_t>(li)].parent >= 0;
             li = model.links[static_cast<size_t>(li)].parent) {
            chain.push_back(&model.links[static_cast<size_t>(li)]);
        }
        std::reverse(chain.begin(), chain.end());
        REQUIRE(chain.size() == 4);

        double best = std::numeric_limits<double>::infinity();
        std::array<double, 4> lo{}, step{};
        for (int j = 0; j < 4; ++j) {
            lo[static_cast<size_t>(j)] = chain[static_cast<size_t>(j)]->joint->lower;
            step[static_cast<size_t>(j)] = (chain[static_cast<size_t>(j)]->joint->upper -
                                            chain[static_cast<size_t>(j)]->joint->lower) /
                                           (points - 1);
        }
        // Incremental nested sweep: partial transforms per level.
        struct Pose {
            Eigen::Matrix3d r;
            Eigen::Vector3d p;
        };
        auto advance = [&](const Pose& base, int level, double angle) {
            const kin::Link& link = *chain[static_cast<size_t>(level)];
            const Eigen::Matrix3d joint_rot =
                base.r * Eigen::AngleAxisd(angle, link.joint->axis).toRotationMatrix();
            return Pose{joint_rot * link.offset_rotation,
                        base.p + joint_rot * link.offset_translation};
        };
        const Pose root{Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero()};
        for (int a = 0; a < points; ++a) {
            const Pose p0 = advance(root, 0, lo[0] + step[0] * a);
            for (int b = 0; b < points; ++b) {
                const Pose p1 = advance(p0, 1, lo[1] + step[1] * b);
                for (int c = 0; c < points; ++c) {
                    const Pose p2 = advance(p1, 2, lo[2] + step[2] * c);
                    for (int d = 0; d < points; ++d) {
                        const Pose p3 = advance(p2, 3, lo[3] + step[3] * d);
                        best = std::min(best, (target - p3.p).norm());
                    }
                }
            }
        }
        return best;
    }

    // Residual change across half a grid cell is bounded by the arc swept by
    // the full finger length.
    double resolution_bound(int finger, int points) const {
        std::vector<const kin::Link*> chain;
        double reach = 0.0, max_step = 0.0;
        for (int li = layout.tip_links[static_cast<size_t>(finger)];
             model.links[static_cast<size_t>(li)].parent >= 0;
             li = model.links[static_cast<size_t>(li)].parent) {
            const kin::Link& link = model.links[static_cast<size_t>(li)];
            reach += link.offset_translation.norm();
            max_step = std::max(max_step, (link.joint->upper - link.joint->lower) / (points - 1));
        }
        return 4.0 * reach * 0.5 * max_step;
    }
};

hand::FingertipFrame random_reachable_tips(const kin::KinematicModel& model,
                                           std::mt19937_64& rng) {
    const Eigen::VectorXd lo = hand::hand_limits_lower(model);
    const Eigen::VectorXd hi = hand::hand_limits_upper(model);
    Eigen::VectorXd q(20);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int j = 0; j < 20; ++j) q[j] = lo[j] + (hi[j] - lo[j]) * unit(rng);
    return hand::fingertips_at(model, q);
}

}  // namespace

TEST_SUITE("hand_retarget") {

TEST_CASE("oracle: FK-generated tips are reproduced to 1e-8 over 100 samples") {
    const auto& model = hand_model();
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        const hand::FingertipFrame tips = random_reachable_tips(model, rng);
        const auto result = hand::oracle_retarget_detailed(model, tips, 1.0);
        for (double r : result.finger_residual_norm) CHECK(r <= 1e-8);
        // The returned joints must also land inside the limits.
        const Eigen::VectorXd lo = hand::hand_limits_lower(model);
        const Eigen::VectorXd hi = hand::hand_limits_upper(model);
        for (int j = 0; j < 20; ++j) {
            CHECK(result.q[j] >= lo[j]);
            CHECK(result.q[j] <= hi[j]);
        }
    }
}

TEST_CASE("oracle: degenerate fist-like input stays finite and within limits") {
    const auto& model = hand_model();
    const auto q = hand::oracle_retarget(model, hand::FingertipFrame::Zero(), 1.0);
    CHECK(q.allFinite());
    const Eigen::VectorXd lo = hand::hand_limits_lower(model);
    const Eigen::VectorXd hi = hand::hand_limits_upper(model);
    for (int j = 0; j < 20; ++j) {
        CHECK(q[j] >= lo[j]);
        CHECK(q[j] <= hi[j]);
    }
}

TEST_CASE("oracle: residual matches the 25-point grid oracle within grid resolution") {
    const auto& model = hand_model();
    const GridOracle oracle(model);
    std::mt19937_64 rng(37);
    for (int trial = 0; trial < 3; ++trial) {
        const hand::FingertipFrame tips = random_reachable_tips(model, rng);
        const auto result = hand::oracle_retarget_detailed(model, tips, 1.0);
        for (int f = 0; f < 5; ++f) {
            const double grid = oracle.best_residual(f, tips.segment<3>(3 * f), 25);
            const double bound = oracle.resolution_bound(f, 25);
            CHECK(std::abs(result.finger_residual_norm[static_cast<size_t>(f)] - grid) <= bound);
            // The continuous solver should never lose to the coarse grid.
            CHECK(result.finger_residual_norm[static_cast<size_t>(f)] <= grid + 1e-9);
        }
    }
}

TEST_CASE("calibrate: identity and ratio arithmetic") {
    const auto& model = hand_model();
    const Eigen::VectorXd lo = hand::hand_limits_lower(model);
    const Eigen::VectorXd hi = hand::hand_limits_upper(model);
    const Eigen::VectorXd q_open = Eigen::VectorXd::Zero(20).cwiseMax(lo).cwiseMin(hi);
    const hand::FingertipFrame open_tips = hand::fingertips_at(model, q_open);

    CHECK(hand::calibrate_scale(open_tips, model) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(hand::calibrate_scale(2.0 * open_tips, model) == doctest::Approx(0.5).epsilon(1e-12));

    CHECK_THROWS_AS(hand::calibrate_scale(hand::FingertipFrame::Zero(), model), Error);
}

TEST_CASE("calibrate: scaled retarget beats scale 1 for a larger hand") {
    const auto& model = hand_model();
    const Eigen::VectorXd q_open = Eigen::VectorXd::Zero(20)
                                       .cwiseMax(hand::hand_limits_lower(model))
                                       .cwiseMin(hand::hand_limits_upper(model));
    const hand::FingertipFrame glove_tips = 1.35 * hand::fingertips_at(model, q_open);
    const double scale = hand::calibrate_scale(glove_tips, model);
    CHECK(scale > 0.0);
    CHECK(std::isfinite(scale));
    const auto calibrated = hand::oracle_retarget_detailed(model, glove_tips, scale);
    const auto uncalibrated = hand::oracle_retarget_detailed(model, glove_tips, 1.0);
    double cal_total = 0.0, uncal_total = 0.0;
    for (int f = 0; f < 5; ++f) {
        cal_total += calibrated.finger_residual_norm[static_cast<size_t>(f)];
        uncal_total += uncalibrated.finger_residual_norm[static_cast<size_t>(f)];
    }
    CHECK(cal_total <= uncal_total);
}

TEST_CASE("dataset: split arithmetic and canonical-pose labeling") {
    const auto& model = hand_model();
    const auto tips10 = hand::synth_tip_frames(model, 10, 5);
    const auto dataset = hand::generate_pair_dataset(model, tips10, 1.0, 5);
    CHECK(dataset.samples.size() == 10);
    CHECK(dataset.train_indices.size() == 9);
    CHECK(dataset.val_indices.size() == 1);

    // Canonical poses: rendered and labeled within limits.
    const Eigen::VectorXd lo = hand::hand_limits_lower(model);
    const Eigen::VectorXd hi = hand::hand_limits_upper(model);
    std::vector<hand::FingertipFrame> canon;
    for (const auto& [name, q] : hand::canonical_hand_poses(model)) {
        canon.push_back(hand::fingertips_at(model, q));
    }
    const auto labeled = hand::generate_pair_dataset(model, canon, 1.0, 1);
    for (const auto& sample : labeled.samples) {
        for (int j = 0; j < 20; ++j) {
            CHECK(sample.joints[j] >= lo[j]);
            CHECK(sample.joints[j] <= hi[j]);
        }
    }

    // Determinism of generation.
    const auto again = hand::generate_pair_dataset(model, tips10, 1.0, 5);
    for (size_t i = 0; i < dataset.samples.size(); ++i) {
        CHECK(dataset.samples[i].joints == again.samples[i].joints);
    }
    CHECK(dataset.train_indices == again.train_indices);
}

TEST_CASE("dataset: jsonl round-trip is lossless") {
    const auto& model = hand_model();
    const auto tips = hand::synth_tip_frames(model, 25, 7);
    const auto dataset = hand::generate_pair_dataset(model, tips, 1.0, 7);
    const auto path = std::filesystem::temp_directory_path() / "humdex_pairs_test.jsonl";
    hand::save_pair_dataset(dataset, path);
    const auto loaded = hand::load_pair_dataset(path, 7);
    REQUIRE(loaded.samples.size() == dataset.samples.size());
    for (size_t i = 0; i < dataset.samples.size(); ++i) {
        CHECK(dataset.samples[i].tips == loaded.samples[i].tips);
        CHECK(dataset.samples[i].joints == loaded.samples[i].joints);
    }
    CHECK(loaded.train_indices == dataset.train_indices);
    std::filesystem::remove(path);
}

TEST_CASE("train: memorizes a single repeated pair") {
    const auto& model = hand_model();
    // A mildly flexed target keeps the pre-tanh values small.
    const Eigen::VectorXd lo = hand::hand_limits_lower(model);
    const Eigen::VectorXd hi = hand::hand_limits_upper(model);
    const Eigen::VectorXd q_target =
        0.5 * (lo + hi) + 0.25 * 0.5 * (hi - lo).cwiseProduct(Eigen::VectorXd::Ones(20));
    const hand::FingertipFrame tips = hand::fingertips_at(model, q_target);

    hand::PairDataset dataset;
    dataset.samples.assign(4096, {tips, q_target});
    dataset.seed = 0;
    for (int i = 0; i < 4096; ++i) {
        (i % 10 == 0 ? dataset.val_indices : dataset.train_indices).push_back(i);
    }

    hand::TrainHyperparams hparams;
    hparams.lr = 1e-3;
    hparams.max_epochs = 400;
    hparams.early_stop_min_delta = 0.0;
    hparams.early_stop_patience = 60;
    hparams.seed = 3;
    auto [reg, report] = hand::train_hand_retargeter(dataset, model, hparams);
    REQUIRE(!report.train_losses.empty());
    const double final_train = hand::normalized_loss(reg, dataset, dataset.train_indices);
    CHECK(final_train <= 1e-6);

    const auto q_pred = hand::infer_hand(reg, tips);
    CHECK((q_pred - q_target).cwiseAbs().maxCoeff() <= 1e-3);

    // Eval on the memorized dataset.
    const auto metrics = hand::eval_retargeter(reg, dataset, hand::Split::All);
    CHECK(metrics.per_joint_rms.maxCoeff() <= 1e-3);
}

TEST_CASE("train: zero epochs returns the initialized network") {
    const auto& model = hand_model();
    const auto tips = hand::synth_tip_frames(model, 40, 11);
    const auto dataset = hand::generate_pair_dataset(model, tips, 1.0, 11);
    hand::TrainHyperparams hparams;
    hparams.max_epochs = 0;
    hparams.seed = 9;
    auto [reg, report] = hand::train_hand_retargeter(dataset, model, hparams);
    CHECK(report.train_losses.empty());
    CHECK(report.best_epoch == -1);
    CHECK(report.stop_reason == "max-epochs");
    // Identical to a fresh initialization apart from the data-derived stats.
    const auto fresh = hand::HandRegressor::initialized(model, 9);
    CHECK(reg.finger_nets[0].to_json() == fresh.finger_nets[0].to_json());
}

TEST_CASE("train: reported best-epoch loss matches an independent recomputation") {
    const auto& model = hand_model();
    const auto tips = hand::synth_tip_frames(model, 300, 13);
    const auto dataset = hand::generate_pair_dataset(model, tips, 1.0, 13);
    hand::TrainHyperparams hparams;
    hparams.lr = 1e-3;
    hparams.max_epochs = 12;
    hparams.batch_size = 64;
    hparams.seed = 5;
    auto [reg, report] = hand::train_hand_retargeter(dataset, model, hparams);
    REQUIRE(report.best_epoch >= 0);

    // Per-sample loop recomputation in pre-tanh space.
    double sse = 0.0;
    for (int idx : dataset.train_indices) {
        const auto& sample = dataset.samples[static_cast<size_t>(idx)];
        Eigen::MatrixXd x(1, 3);
        for (int f = 0; f < 5; ++f) {
            for (int j = 0; j < 3; ++j) {
                x(0, j) = (sample.tips[3 * f + j] - reg.in_mean[3 * f + j]) / reg.in_std[3 * f + j];
            }
            nn::DenseNet net = reg.finger_nets[static_cast<size_t>(f)];
            const Eigen::MatrixXd z = nn::forward(net, x, nn::Mode::Infer);
            for (int k = 0; k < 4; ++k) {
                const int out = 4 * f + k;
                const double target = std::atanh(
                    std::clamp((sample.joints[out] - reg.out_mid[out]) / reg.out_half[out],
                               -0.999999, 0.999999));
                sse += (z(0, k) - target) * (z(0, k) - target);
            }
        }
    }
    const double recomputed = sse / (static_cast<double>(dataset.train_indices.size()) * 20.0);
    CHECK(std::abs(recomputed - report.train_losses[static_cast<size_t>(report.best_epoch)]) <=
          1e-10);
}

TEST_CASE("train: never returns a regressor worse than the initialization") {
    const auto& model = hand_model();
    const auto tips = hand::synth_tip_frames(model, 200, 17);
    const auto dataset = hand::generate_pair_dataset(model, tips, 1.0, 17);
    hand::TrainHyperparams hparams;
    hparams.lr = 1e-3;
    hparams.max_epochs = 20;
    hparams.batch_size = 64;
    hparams.seed = 21;
    auto [trained, report] = hand::train_hand_retargeter(dataset, model, hparams);

    hand::TrainHyperparams zero = hparams;
    zero.max_epochs = 0;
    auto [initial, _] = hand::train_hand_retargeter(dataset, model, zero);

    const double trained_val = hand::normalized_loss(trained, dataset, dataset.val_indices);
    const double initial_val = hand::normalized_loss(initial, dataset, dataset.val_indices);
    CHECK(trained_val <= initial_val);

    // Trained also beats untrained on per-joint RMS over the dataset.
    const auto trained_metrics = hand::eval_retargeter(trained, dataset, hand::Split::Validation);
    const auto initial_metrics = hand::eval_retargeter(initial, dataset, hand::Split::Validation);
    CHECK(trained_metrics.per_joint_rms.mean() < initial_metrics.per_joint_rms.mean());
}

TEST_CASE("infer: zeroed parameters output the exact joint midpoints") {
    const auto& model = hand_model();
    auto reg = hand::HandRegressor::initialized(model, 1);
    for (auto& net : reg.finger_nets) {
        for (auto& layer : net.layers) {
            if (auto* lin = std::get_if<nn::Linear>(&layer)) {
                lin->weight.setZero();
                lin->bias.setZero();
            } else if (auto* bn = std::get_if<nn::BatchNorm>(&layer)) {
                bn->gamma.setZero();
                bn->beta.setZero();
            }
        }
    }
    std::mt19937_64 rng(2);
    const hand::FingertipFrame tips = random_reachable_tips(model, rng);
    const auto q = hand::infer_hand(reg, tips);
    for (int j = 0; j < 20; ++j) CHECK(q[j] == reg.out_mid[j]);
}

TEST_CASE("infer: deterministic and strictly inside the limits") {
    const auto& model = hand_model();
    const auto tips_src = hand::synth_tip_frames(model, 60, 19);
    const auto dataset = hand::generate_pair_dataset(model, tips_src, 1.0, 19);
    hand::TrainHyperparams hparams;
    hparams.lr = 1e-3;
    hparams.max_epochs = 5;
    hparams.batch_size = 32;
    auto [reg, report] = hand::train_hand_retargeter(dataset, model, hparams);

    const Eigen::VectorXd lo = hand::hand_limits_lower(model);
    const Eigen::VectorXd hi = hand::hand_limits_upper(model);
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> wild(-5.0, 5.0);
    for (int trial = 0; trial < 2000; ++trial) {
        hand::FingertipFrame tips;
        for (int i = 0; i < 15; ++i) tips[i] = wild(rng);
        const auto a = hand::infer_hand(reg, tips);
        const auto b = hand::infer_hand(reg, tips);
        CHECK(a == b);  // bitwise
        for (int j = 0; j < 20; ++j) {
            CHECK(a[j] > lo[j]);
            CHECK(a[j] < hi[j]);
        }
    }
    hand::FingertipFrame bad = hand::FingertipFrame::Zero();
    bad[3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(hand::infer_hand(reg, bad), Error);
}

TEST_CASE("eval: metrics equal a brute-force per-sample oracle") {
    const auto& model = hand_model();
    const auto tips = hand::synth_tip_frames(model, 50, 29);
    const auto dataset = hand::generate_pair_dataset(model, tips, 1.0, 29);
    const auto reg = hand::HandRegressor::initialized(model, 7);
    const auto metrics = hand::eval_retargeter(reg, dataset, hand::Split::All);

    Eigen::Matrix<double, 20, 1> sq = Eigen::Matrix<double, 20, 1>::Zero();
    double max_abs = 0.0;
    for (const auto& sample : dataset.samples) {
        const auto pred = hand::infer_hand(reg, sample.tips);
        for (int j = 0; j < 20; ++j) {
            const double e = pred[j] - sample.joints[j];
            sq[j] += e * e;
            max_abs = std::max(max_abs, std::abs(e));
        }
    }
    for (int j = 0; j < 20; ++j) {
        const double rms = std::sqrt(sq[j] / static_cast<double>(dataset.samples.size()));
        CHECK(metrics.per_joint_rms[j] == doctest::Approx(rms).epsilon(1e-12));
    }
    CHECK(metrics.max_abs_error == doctest::Approx(max_abs).epsilon(1e-12));
    CHECK_THROWS_AS(hand::eval_retargeter(reg, hand::PairDataset{}, hand::Split::All), Error);
}

TEST_CASE("checkpoint: byte-stable round-trip") {
    const auto& model = hand_model();
    const auto tips = hand::synth_tip_frames(model, 80, 41);
    const auto dataset = hand::generate_pair_dataset(model, tips, 1.0, 41);
    hand::TrainHyperparams hparams;
    hparams.max_epochs = 3;
    hparams.batch_size = 32;
    auto [reg, report] = hand::train_hand_retargeter(dataset, model, hparams);

    const auto path = std::filesystem::temp_directory_path() / "humdex_ckpt_test.json";
    reg.save(path);
    const auto loaded = hand::HandRegressor::load(path);
    // Identical serialized form and bitwise-identical inference.
    CHECK(reg.to_json().dump() == loaded.to_json().dump());
    const auto q1 = hand::infer_hand(reg, dataset.samples[0].tips);
    const auto q2 = hand::infer_hand(loaded, dataset.samples[0].tips);
    CHECK(q1 == q2);
    std::filesystem::remove(path);
}

}  // TEST_SUITE
