// humdex: desk-scale whole-body + dexterous-hand retargeting toolkit CLI.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "humdex/body_retarget.hpp"
#include "humdex/error.hpp"
#include "humdex/hand_retarget.hpp"
#include "humdex/json_io.hpp"
#include "humdex/kinematics.hpp"
#include "humdex/log.hpp"
#include "humdex/motion_source.hpp"
#include "humdex/teleop_pipeline.hpp"
#include "humdex/two_stage.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace humdex;

namespace {

constexpr const char* kVersion = HUMDEX_VERSION;

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

std::string resolve_model_path(const std::string& name_or_path) {
    if (fs::exists(name_or_path)) return name_or_path;
    std::vector<std::string> roots;
    if (const char* env = std::getenv("HUMDEX_MODEL_DIR")) roots.push_back(env);
    roots.push_back(HUMDEX_MODEL_DIR);
    for (const auto& root : roots) {
        const fs::path candidate = fs::path(root) / (name_or_path + ".model.json");
        if (fs::exists(candidate)) return candidate.string();
        const fs::path as_file = fs::path(root) / name_or_path;
        if (fs::exists(as_file)) return as_file.string();
    }
    throw Error(ErrorKind::Io, "model '" + name_or_path + "' not found (looked in " +
                                   std::string(HUMDEX_MODEL_DIR) + ")");
}

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    try {
        return json::parse(io::read_text_file(path));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Parse, path + ": " + e.what());
    }
}

struct ManifestWriter {
    std::string command;
    std::vector<std::string> argv;
    json resolved = json::object();
    std::vector<std::string> inputs, outputs;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    void write(const std::string& out_path) {
        if (out_path.empty()) return;
        json doc{{"command", command},
                 {"argv", argv},
                 {"resolved_config", resolved},
                 {"inputs", inputs},
                 {"outputs", outputs},
                 {"tool_version", kVersion},
                 {"wall_time_s",
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
        io::write_text_file(out_path + ".manifest.json", doc.dump(1) + "\n");
    }
};

retarget::RetargetConfig resolve_retarget_config(const std::string& config_arg,
                                                 const kin::KinematicModel& model) {
    if (config_arg.empty() || config_arg == "default") return retarget::default_config(model);
    return retarget::config_from_json(io::read_text_file(config_arg), model);
}

std::unique_ptr<pipeline::HandBackend> make_hand_backend(const std::string& kind,
                                                         const std::string& checkpoint,
                                                         const kin::KinematicModel& hand_model) {
    if (!checkpoint.empty()) {
        return std::make_unique<pipeline::LearnedHand>(hand::HandRegressor::load(checkpoint));
    }
    if (kind == "midpoint") return std::make_unique<pipeline::MidpointHand>(hand_model);
    if (kind == "oracle") return std::make_unique<pipeline::OracleHand>(hand_model, 1.0);
    throw Error(ErrorKind::Validation, "unknown hand backend '" + kind + "'");
}

json train_report_json(const hand::TrainReport& report) {
    return json{{"train_losses", report.train_losses},
                {"val_losses", report.val_losses},
                {"best_epoch", report.best_epoch},
                {"stop_reason", report.stop_reason},
                {"epochs_run", report.train_losses.size()},
                {"seed", report.seed},
                {"wall_time_s", report.wall_time_s}};
}

// ---------------------------------------------------------------------------
// subcommand wiring
// ---------------------------------------------------------------------------

struct CommonFlags {
    std::uint64_t seed = 0;
    std::string config;
    std::string out;
    bool seed_given = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--seed", flags.seed, "Seed for every random choice")
        ->each([&](const std::string&) { flags.seed_given = true; });
    cmd->add_option("--config", flags.config, "JSON config file layered under the flags");
    cmd->add_option("--out", flags.out, "Primary output path");
}

int run_cli(int argc, char** argv) {
    CLI::App app{"Pelvis-centric whole-body retargeting, learned hand retargeting, and the "
                 "synthetic teleoperation data pipeline"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    std::vector<std::string> raw_args(argv + 1, argv + argc);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "Generate synthetic human motion (JSON-lines)");
    CommonFlags synth_flags;
    add_common(synth, synth_flags);
    double synth_duration = 1.0, synth_rate = 100.0, drift_sigma = 0.0;
    std::uint64_t drift_seed = 0;
    std::string synth_body = "g1body", synth_hand = "wuji20";
    bool no_hands = false;
    synth->add_option("--duration", synth_duration, "Seconds of motion");
    synth->add_option("--rate", synth_rate, "Frames per second");
    synth->add_option("--drift-sigma", drift_sigma, "Random-walk drift, m/sqrt(s)");
    synth->add_option("--drift-seed", drift_seed, "Separate seed for the drift walk");
    synth->add_option("--body-model", synth_body, "Donor body model (name or path)");
    synth->add_option("--hand-model", synth_hand, "Donor hand model (name or path)");
    synth->add_flag("--no-hands", no_hands, "Skip fingertip channels");

    // ---- retarget ----
    auto* retarget_cmd =
        app.add_subcommand("retarget", "Solve a human motion stream into command vectors");
    CommonFlags retarget_flags;
    add_common(retarget_cmd, retarget_flags);
    std::string retarget_model = "g1body", retarget_hand_model = "wuji20";
    std::string retarget_in, retarget_config_arg = "default";
    std::string retarget_hands = "oracle", retarget_checkpoint;
    retarget_cmd->add_option("--model", retarget_model, "Body model (name or path)");
    retarget_cmd->add_option("--hand-model", retarget_hand_model, "Hand model (name or path)");
    retarget_cmd->add_option("--in", retarget_in, "Input motion JSONL")->required();
    retarget_cmd->add_option("--retarget-config", retarget_config_arg,
                             "Retarget config: 'default' or a JSON path");
    retarget_cmd->add_option("--hands", retarget_hands, "Hand backend: oracle|midpoint");
    retarget_cmd->add_option("--hand-checkpoint", retarget_checkpoint,
                             "Learned hand regressor checkpoint");

    // ---- hand ----
    auto* hand_cmd = app.add_subcommand("hand", "Dexterous hand retargeting tools");
    hand_cmd->require_subcommand(1);

    auto* gen = hand_cmd->add_subcommand("gen-dataset", "Oracle-label synthetic fingertip frames");
    CommonFlags gen_flags;
    add_common(gen, gen_flags);
    int gen_count = 20000;
    double gen_scale = 1.0;
    std::string gen_model = "wuji20";
    gen->add_option("--count", gen_count, "Number of paired frames");
    gen->add_option("--scale", gen_scale, "Human-to-robot hand scale");
    gen->add_option("--model", gen_model, "Hand model (name or path)");

    auto* train = hand_cmd->add_subcommand("train", "Train the fingertip-to-joint regressor");
    CommonFlags train_flags;
    add_common(train, train_flags);
    std::string train_data, train_model = "wuji20", train_report_path;
    hand::TrainHyperparams hp;
    train->add_option("--data", train_data, "Paired dataset JSONL")->required();
    train->add_option("--model", train_model, "Hand model (name or path)");
    train->add_option("--report", train_report_path, "Training report JSON path");
    train->add_option("--epochs", hp.max_epochs, "Max epochs");
    train->add_option("--batch", hp.batch_size, "Batch size");
    train->add_option("--lr", hp.lr, "AdamW learning rate");
    train->add_option("--weight-decay", hp.weight_decay, "AdamW weight decay");
    train->add_option("--patience", hp.early_stop_patience, "Early-stop patience, epochs");
    train->add_option("--hidden", hp.hidden, "Hidden width per finger net");

    auto* eval = hand_cmd->add_subcommand("eval", "Evaluate a trained regressor");
    CommonFlags eval_flags;
    add_common(eval, eval_flags);
    std::string eval_checkpoint, eval_data, eval_split = "val";
    eval->add_option("--checkpoint", eval_checkpoint, "Regressor checkpoint")->required();
    eval->add_option("--data", eval_data, "Paired dataset JSONL")->required();
    eval->add_option("--split", eval_split, "train|val|all");

    auto* infer = hand_cmd->add_subcommand("infer", "Map fingertip frames to joint targets");
    CommonFlags infer_flags;
    add_common(infer, infer_flags);
    std::string infer_checkpoint, infer_in;
    infer->add_option("--checkpoint", infer_checkpoint, "Regressor checkpoint")->required();
    infer->add_option("--in", infer_in, "Fingertip JSONL ({\"p\":[15]} per line)")->required();

    // ---- pipeline ----
    auto* pipeline_cmd = app.add_subcommand("pipeline", "Streaming control loop and recorder");
    pipeline_cmd->require_subcommand(1);
    auto* run = pipeline_cmd->add_subcommand("run", "Run the 100 Hz loop and the 30 Hz recorder");
    CommonFlags run_flags;
    add_common(run, run_flags);
    std::string run_motion, run_model = "g1body", run_hand_model = "wuji20";
    std::string run_clock = "sim", run_hands = "midpoint", run_checkpoint;
    std::string run_config_arg = "default";
    std::vector<std::string> run_pedals;
    double run_control_rate = 100.0, run_record_rate = 30.0, run_duration = -1.0;
    run->add_option("--motion", run_motion, "Input motion JSONL")->required();
    run->add_option("--model", run_model, "Body model (name or path)");
    run->add_option("--hand-model", run_hand_model, "Hand model (name or path)");
    run->add_option("--retarget-config", run_config_arg, "'default' or a JSON path");
    run->add_option("--clock", run_clock, "sim|wall");
    run->add_option("--hands", run_hands, "Hand backend: oracle|midpoint");
    run->add_option("--hand-checkpoint", run_checkpoint, "Learned hand checkpoint");
    run->add_option("--pedal", run_pedals, "Episode window start:stop in seconds, repeatable");
    run->add_option("--control-rate", run_control_rate, "Control loop Hz");
    run->add_option("--record-rate", run_record_rate, "Recorder Hz");
    run->add_option("--duration", run_duration, "Seconds (default: motion length)");

    // ---- episode ----
    auto* episode_cmd = app.add_subcommand("episode", "Episode directory tools");
    episode_cmd->require_subcommand(1);
    auto* inspect = episode_cmd->add_subcommand("inspect", "Summarize a recorded episode");
    CommonFlags inspect_flags;
    add_common(inspect, inspect_flags);
    std::string inspect_dir;
    inspect->add_option("--dir", inspect_dir, "Episode directory")->required();

    // ---- twostage ----
    auto* twostage_cmd = app.add_subcommand("twostage", "Two-stage training experiment");
    twostage_cmd->require_subcommand(1);
    auto* ts_run = twostage_cmd->add_subcommand("run", "Run TwoStage vs RobotOnly vs Mix");
    CommonFlags ts_flags;
    add_common(ts_run, ts_flags);
    std::string ts_markdown;
    ts_run->add_option("--markdown", ts_markdown, "Also render the report as a markdown table");

    // ---- validate-lag ----
    auto* lag_cmd = app.add_subcommand("validate-lag", "Action-to-state lag analysis");
    CommonFlags lag_flags;
    add_common(lag_cmd, lag_flags);
    std::vector<std::string> lag_dirs;
    int lag_max_k = 5, lag_synthetic = 0;
    std::string lag_model = "g1body";
    lag_cmd->add_option("--episodes", lag_dirs, "Episode directories with state streams");
    lag_cmd->add_option("--max-k", lag_max_k, "Largest lag to scan");
    lag_cmd->add_option("--synthetic", lag_synthetic,
                        "Generate this many synthetic lag-1 robot episodes instead");
    lag_cmd->add_option("--model", lag_model, "Body model for the state layout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        // ------------------------------------------------------------------
        if (synth->parsed()) {
            ManifestWriter manifest{"synth", raw_args};
            const json cfg = load_config_file(synth_flags.config);
            motion::MotionSpec spec;
            spec.duration_s = synth->count("--duration") ? synth_duration
                                                         : cfg.value("duration", synth_duration);
            spec.rate_hz = synth->count("--rate") ? synth_rate : cfg.value("rate", synth_rate);
            spec.seed = synth_flags.seed_given ? synth_flags.seed
                                               : cfg.value("seed", synth_flags.seed);
            spec.hands = !no_hands;
            const double sigma = synth->count("--drift-sigma")
                                     ? drift_sigma
                                     : cfg.value("drift_sigma", drift_sigma);
            const auto body = kin::load_model_file(resolve_model_path(synth_body));
            const auto hand_m = kin::load_model_file(resolve_model_path(synth_hand));
            auto frames = motion::synth_motion(spec, body, hand_m);
            if (sigma > 0.0) frames = motion::inject_drift(frames, sigma, drift_seed);
            if (synth_flags.out.empty()) {
                throw Error(ErrorKind::Validation, "synth needs --out");
            }
            motion::save_motion(frames, synth_flags.out);
            manifest.resolved = {{"duration", spec.duration_s}, {"rate", spec.rate_hz},
                                 {"seed", spec.seed},           {"drift_sigma", sigma},
                                 {"drift_seed", drift_seed},    {"hands", spec.hands},
                                 {"body_model", synth_body},    {"hand_model", synth_hand}};
            manifest.outputs = {synth_flags.out};
            manifest.write(synth_flags.out);
            std::cout << "wrote " << frames.size() << " frames to " << synth_flags.out << "\n";
        }
        // ------------------------------------------------------------------
        if (retarget_cmd->parsed()) {
            ManifestWriter manifest{"retarget", raw_args};
            const auto body = kin::load_model_file(resolve_model_path(retarget_model));
            const auto hand_m = kin::load_model_file(resolve_model_path(retarget_hand_model));
            const auto config = resolve_retarget_config(
                retarget_config_arg == "default" && !retarget_flags.config.empty()
                    ? retarget_flags.config
                    : (retarget_config_arg == "default" ? "" : retarget_config_arg),
                body);
            const auto frames = motion::load_motion(retarget_in);
            if (frames.empty()) throw Error(ErrorKind::Validation, "input motion is empty");
            const auto hands =
                make_hand_backend(retarget_hands, retarget_checkpoint, hand_m);
            const auto solutions = retarget::retarget_stream(config, frames, body);

            retarget::BaseCommandTracker base_tracker;
            std::vector<json> lines;
            lines.reserve(solutions.size());
            const Eigen::VectorXd neutral = hands->neutral();
            for (size_t k = 0; k < solutions.size(); ++k) {
                const auto& frame = frames[k];
                const Eigen::VectorXd left =
                    frame.fingertips_left ? hands->retarget(*frame.fingertips_left) : neutral;
                const Eigen::VectorXd right =
                    frame.fingertips_right ? hands->retarget(*frame.fingertips_right) : neutral;
                const auto base = base_tracker.update(frame, config);
                lines.push_back(
                    io::command_to_json(retarget::assemble_command(solutions[k], left, right, base)));
            }
            if (retarget_flags.out.empty()) throw Error(ErrorKind::Validation, "retarget needs --out");
            io::write_jsonl(retarget_flags.out, lines);
            manifest.resolved = {{"model", retarget_model},
                                 {"config", retarget_config_arg},
                                 {"hands", retarget_checkpoint.empty() ? retarget_hands : "learned"}};
            manifest.inputs = {retarget_in};
            manifest.outputs = {retarget_flags.out};
            manifest.write(retarget_flags.out);
            std::cout << "wrote " << lines.size() << " commands to " << retarget_flags.out << "\n";
        }
        // ------------------------------------------------------------------
        if (gen->parsed()) {
            ManifestWriter manifest{"hand gen-dataset", raw_args};
            const json cfg = load_config_file(gen_flags.config);
            const int count = gen->count("--count") ? gen_count : cfg.value("count", gen_count);
            const auto model = kin::load_model_file(resolve_model_path(gen_model));
            const auto tips = hand::synth_tip_frames(model, count, gen_flags.seed);
            const auto dataset = hand::generate_pair_dataset(model, tips, gen_scale, gen_flags.seed);
            if (gen_flags.out.empty()) throw Error(ErrorKind::Validation, "gen-dataset needs --out");
            hand::save_pair_dataset(dataset, gen_flags.out);
            manifest.resolved = {{"count", count}, {"scale", gen_scale}, {"seed", gen_flags.seed}};
            manifest.outputs = {gen_flags.out};
            manifest.write(gen_flags.out);
            std::cout << "wrote " << dataset.samples.size() << " pairs to " << gen_flags.out << "\n";
        }
        // ------------------------------------------------------------------
        if (train->parsed()) {
            ManifestWriter manifest{"hand train", raw_args};
            const json cfg = load_config_file(train_flags.config);
            if (!train->count("--epochs")) hp.max_epochs = cfg.value("epochs", hp.max_epochs);
            if (!train->count("--batch")) hp.batch_size = cfg.value("batch", hp.batch_size);
            if (!train->count("--lr")) hp.lr = cfg.value("lr", hp.lr);
            hp.seed = train_flags.seed;
            const auto model = kin::load_model_file(resolve_model_path(train_model));
            const auto dataset = hand::load_pair_dataset(train_data, train_flags.seed);
            auto [regressor, report] = hand::train_hand_retargeter(dataset, model, hp);
            if (train_flags.out.empty()) throw Error(ErrorKind::Validation, "train needs --out");
            regressor.save(train_flags.out);
            const json report_doc = train_report_json(report);
            if (!train_report_path.empty()) {
                io::write_text_file(train_report_path, report_doc.dump(1) + "\n");
            }
            manifest.resolved = {{"epochs", hp.max_epochs}, {"batch", hp.batch_size},
                                 {"lr", hp.lr},             {"weight_decay", hp.weight_decay},
                                 {"hidden", hp.hidden},     {"seed", hp.seed}};
            manifest.inputs = {train_data};
            manifest.outputs = {train_flags.out};
            manifest.write(train_flags.out);
            std::cout << "trained " << report.train_losses.size() << " epochs ("
                      << report.stop_reason << "), best epoch " << report.best_epoch << "\n";
        }
        // ------------------------------------------------------------------
        if (eval->parsed()) {
            ManifestWriter manifest{"hand eval", raw_args};
            const auto regressor = hand::HandRegressor::load(eval_checkpoint);
            const auto dataset = hand::load_pair_dataset(eval_data, eval_flags.seed);
            const hand::Split split = eval_split == "train" ? hand::Split::Train
                                      : eval_split == "all" ? hand::Split::All
                                                            : hand::Split::Validation;
            const auto metrics = hand::eval_retargeter(regressor, dataset, split);
            json doc{{"mse_normalized", metrics.mse_normalized},
                     {"per_joint_rms", io::vector_to_json(metrics.per_joint_rms)},
                     {"rms_max", metrics.per_joint_rms.maxCoeff()},
                     {"rms_mean", metrics.per_joint_rms.mean()},
                     {"max_abs_error", metrics.max_abs_error},
                     {"latency_us_per_call", metrics.latency_us_per_call},
                     {"split", eval_split}};
            if (!eval_flags.out.empty()) {
                io::write_text_file(eval_flags.out, doc.dump(1) + "\n");
                manifest.inputs = {eval_checkpoint, eval_data};
                manifest.outputs = {eval_flags.out};
                manifest.write(eval_flags.out);
            }
            std::cout << doc.dump(1) << "\n";
        }
        // ------------------------------------------------------------------
        if (infer->parsed()) {
            ManifestWriter manifest{"hand infer", raw_args};
            const auto regressor = hand::HandRegressor::load(infer_checkpoint);
            std::vector<json> lines;
            for (const auto& doc : io::read_jsonl(infer_in)) {
                const hand::FingertipFrame tips = io::vector_from_json(doc.at("p"), 15, "p");
                lines.push_back(json{{"q", io::vector_to_json(hand::infer_hand(regressor, tips))}});
            }
            if (infer_flags.out.empty()) throw Error(ErrorKind::Validation, "infer needs --out");
            io::write_jsonl(infer_flags.out, lines);
            manifest.inputs = {infer_checkpoint, infer_in};
            manifest.outputs = {infer_flags.out};
            manifest.write(infer_flags.out);
            std::cout << "wrote " << lines.size() << " joint targets to " << infer_flags.out << "\n";
        }
        // ------------------------------------------------------------------
        if (run->parsed()) {
            ManifestWriter manifest{"pipeline run", raw_args};
            const auto body = kin::load_model_file(resolve_model_path(run_model));
            const auto hand_m = kin::load_model_file(resolve_model_path(run_hand_model));
            const auto config = resolve_retarget_config(
                run_config_arg == "default" ? "" : run_config_arg, body);
            const auto frames = motion::load_motion(run_motion);
            if (frames.empty()) throw Error(ErrorKind::Validation, "input motion is empty");
            const auto hands = make_hand_backend(run_hands, run_checkpoint, hand_m);

            pipeline::PipelineConfig pc;
            pc.control_rate_hz = run_control_rate;
            pc.record_rate_hz = run_record_rate;
            if (run_duration > 0.0) {
                pc.duration_us = static_cast<std::uint64_t>(std::llround(run_duration * 1e6));
            } else {
                const auto dt = frames.size() > 1
                                    ? frames[1].timestamp_us - frames[0].timestamp_us
                                    : 10000;
                pc.duration_us = static_cast<std::uint64_t>(frames.back().timestamp_us + dt);
            }
            for (const auto& window : run_pedals) {
                const auto colon = window.find(':');
                if (colon == std::string::npos) {
                    throw Error(ErrorKind::Validation, "pedal windows look like start:stop seconds");
                }
                pc.pedal_windows.emplace_back(
                    static_cast<std::uint64_t>(std::llround(std::stod(window.substr(0, colon)) * 1e6)),
                    static_cast<std::uint64_t>(std::llround(std::stod(window.substr(colon + 1)) * 1e6)));
            }

            const auto result =
                run_clock == "wall"
                    ? pipeline::run_pipeline_wallclock(frames, config, body, *hands, pc)
                    : pipeline::run_pipeline_simulated(frames, config, body, *hands, pc);

            if (run_flags.out.empty()) throw Error(ErrorKind::Validation, "pipeline run needs --out");
            fs::create_directories(run_flags.out);
            for (const auto& episode : result.episodes) {
                pipeline::write_episode(episode, fs::path(run_flags.out) / episode.episode_id);
            }
            json stats{{"commands_published", result.commands.size()},
                       {"ticks", result.control.ticks},
                       {"mean_solver_iterations", result.control.mean_solver_iterations},
                       {"mean_accepted_steps", result.control.mean_accepted_steps},
                       {"overruns", result.control.overruns},
                       {"episodes", result.episodes.size()},
                       {"clock", run_clock}};
            io::write_text_file(fs::path(run_flags.out) / "stats.json", stats.dump(1) + "\n");
            manifest.resolved = {{"control_rate", pc.control_rate_hz},
                                 {"record_rate", pc.record_rate_hz},
                                 {"duration_us", pc.duration_us},
                                 {"clock", run_clock}};
            manifest.inputs = {run_motion};
            manifest.outputs = {run_flags.out};
            manifest.write(run_flags.out);
            std::cout << stats.dump(1) << "\n";
        }
        // ------------------------------------------------------------------
        if (inspect->parsed()) {
            ManifestWriter manifest{"episode inspect", raw_args};
            const auto episode = pipeline::read_episode(inspect_dir);
            json summary{{"episode_id", episode.episode_id},
                         {"frames", episode.frames.size()},
                         {"metadata", episode.metadata},
                         {"has_state", !episode.frames.empty() &&
                                           episode.frames.front().state.has_value()}};
            if (!episode.frames.empty()) {
                summary["first_t_us"] = episode.frames.front().timestamp_us;
                summary["last_t_us"] = episode.frames.back().timestamp_us;
                summary["command_dims"] = episode.frames.front().command.flatten().size();
            }
            if (!inspect_flags.out.empty()) {
                io::write_text_file(inspect_flags.out, summary.dump(1) + "\n");
                manifest.inputs = {inspect_dir};
                manifest.outputs = {inspect_flags.out};
                manifest.write(inspect_flags.out);
            }
            std::cout << summary.dump(1) << "\n";
        }
        // ------------------------------------------------------------------
        if (ts_run->parsed()) {
            ManifestWriter manifest{"twostage run", raw_args};
            twostage::ExperimentConfig config;
            if (!ts_flags.config.empty()) {
                config = twostage::ExperimentConfig::from_json(load_config_file(ts_flags.config));
            }
            if (ts_flags.seed_given) config.seeds = {ts_flags.seed};
            const auto report = twostage::run_two_stage(config);
            if (ts_flags.out.empty()) throw Error(ErrorKind::Validation, "twostage run needs --out");
            io::write_text_file(ts_flags.out, report.to_json().dump(1) + "\n");
            if (!ts_markdown.empty()) io::write_text_file(ts_markdown, report.to_markdown());
            manifest.resolved = config.to_json();
            manifest.outputs = {ts_flags.out};
            manifest.write(ts_flags.out);
            std::cout << report.to_markdown() << "\n";
        }
        // ------------------------------------------------------------------
        if (lag_cmd->parsed()) {
            ManifestWriter manifest{"validate-lag", raw_args};
            const auto body = kin::load_model_file(resolve_model_path(lag_model));
            std::vector<int> state_dofs;
            for (int link : body.set("state_joints")) {
                state_dofs.push_back(body.links[static_cast<size_t>(link)].joint->dof_index);
            }
            std::vector<pipeline::EpisodeRecord> episodes;
            if (lag_synthetic > 0) {
                // Constructed s_{t+1} = a_t episodes, the paper-style sanity check.
                std::mt19937_64 rng(lag_flags.seed);
                std::uniform_real_distribution<double> dist(-1.0, 1.0);
                for (int e = 0; e < lag_synthetic; ++e) {
                    pipeline::EpisodeRecord episode;
                    episode.episode_id = "synthetic";
                    Eigen::VectorXd prev;
                    for (int t = 0; t < 30; ++t) {
                        pipeline::EpisodeFrame frame;
                        frame.timestamp_us = static_cast<std::uint64_t>(33333 * (t + 1));
                        frame.command.q_body =
                            Eigen::VectorXd::NullaryExpr(29, [&] { return dist(rng); });
                        frame.command.q_hand_left =
                            Eigen::VectorXd::NullaryExpr(20, [&] { return dist(rng); });
                        frame.command.q_hand_right =
                            Eigen::VectorXd::NullaryExpr(20, [&] { return dist(rng); });
                        frame.state = t == 0 ? twostage::command_to_state_layout(frame.command,
                                                                                 state_dofs)
                                             : prev;
                        prev = twostage::command_to_state_layout(frame.command, state_dofs);
                        episode.frames.push_back(std::move(frame));
                    }
                    episodes.push_back(std::move(episode));
                }
            }
            for (const auto& dir : lag_dirs) episodes.push_back(pipeline::read_episode(dir));
            const auto report = twostage::validate_lag(episodes, state_dofs, lag_max_k);
            json doc{{"best_k", report.best_k},
                     {"mean_error", report.mean_error},
                     {"episodes_used", report.episodes_used}};
            if (!lag_flags.out.empty()) {
                io::write_text_file(lag_flags.out, doc.dump(1) + "\n");
                manifest.outputs = {lag_flags.out};
                manifest.write(lag_flags.out);
            }
            std::cout << doc.dump(1) << "\n";
        }
        return 0;
    } catch (const Error& e) {
        log::error(e.what());
        std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
        return e.kind() == ErrorKind::Numeric ? 3 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace

int main(int argc, char** argv) {
    return run_cli(argc, argv);
}
