#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "humdex/body_retarget.hpp"
#include "humdex/hand_retarget.hpp"
#include "humdex/wire_format.hpp"
#include "json.hpp"

namespace humdex::pipeline {

struct TriggerEvent {
    enum class Kind { Start, Stop };
    Kind kind = Kind::Start;
    std::uint64_t timestamp_us = 0;
};

nlohmann::json trigger_to_json(const TriggerEvent& event);
TriggerEvent trigger_from_json(const nlohmann::json& doc);

// Monotonic clock abstraction; the simulated clock makes every schedule exact.
class Clock {
  public:
    virtual ~Clock() = default;
    virtual std::uint64_t now_us() = 0;
    virtual void sleep_until_us(std::uint64_t t) = 0;
};

class SimulatedClock : public Clock {
  public:
    std::uint64_t now_us() override { return now_; }
    void sleep_until_us(std::uint64_t t) override {
        if (t > now_) now_ = t;
    }

  private:
    std::uint64_t now_ = 0;
};

class WallClock : public Clock {
  public:
    WallClock();
    std::uint64_t now_us() override;
    void sleep_until_us(std::uint64_t t) override;

  private:
    std::chrono::steady_clock::time_point epoch_;
};

// Latest-value key-value bus plus an ordered event queue per subscriber;
// one writer per topic, many readers, values immutable once published.
class Bus {
  public:
    void publish(WireMessage message);
    // Conflated read: the most recent message on a topic, with its sequence.
    std::optional<std::pair<WireMessage, std::uint64_t>> latest(const std::string& topic) const;
    // All messages on a topic published so far (test/inspection aid).
    std::vector<WireMessage> history(const std::string& topic) const;
    std::size_t count(const std::string& topic) const;

  private:
    mutable std::mutex mutex_;
    std::map<std::string, std::vector<WireMessage>> by_topic_;
    std::uint64_t sequence_ = 0;
    std::map<std::string, std::uint64_t> latest_seq_;
};

// Provider of the most recent human frame at a given instant; returns nullopt
// once the stream is over.
class FrameSource {
  public:
    virtual ~FrameSource() = default;
    virtual std::optional<retarget::HumanFrame> latest(std::uint64_t now_us) = 0;
};

// Replays a recorded/synthesized motion by timestamp.
class MotionPlayback : public FrameSource {
  public:
    explicit MotionPlayback(std::vector<retarget::HumanFrame> frames);
    std::optional<retarget::HumanFrame> latest(std::uint64_t now_us) override;

  private:
    std::vector<retarget::HumanFrame> frames_;
};

// Hand joint backend for the control loop.
class HandBackend {
  public:
    virtual ~HandBackend() = default;
    virtual Eigen::VectorXd retarget(const hand::FingertipFrame& tips) = 0;
    virtual Eigen::VectorXd neutral() const = 0;  // used when a frame has no tips
};

class MidpointHand : public HandBackend {
  public:
    explicit MidpointHand(const kin::KinematicModel& hand_model);
    Eigen::VectorXd retarget(const hand::FingertipFrame&) override { return mid_; }
    Eigen::VectorXd neutral() const override { return mid_; }

  private:
    Eigen::VectorXd mid_;
};

class OracleHand : public HandBackend {
  public:
    OracleHand(const kin::KinematicModel& hand_model, double scale);
    Eigen::VectorXd retarget(const hand::FingertipFrame& tips) override;
    Eigen::VectorXd neutral() const override { return mid_; }

  private:
    const kin::KinematicModel& model_;
    double scale_;
    Eigen::VectorXd mid_;
};

class LearnedHand : public HandBackend {
  public:
    explicit LearnedHand(hand::HandRegressor regressor);
    Eigen::VectorXd retarget(const hand::FingertipFrame& tips) override;
    Eigen::VectorXd neutral() const override;

  private:
    hand::HandRegressor regressor_;
};

struct LoopStats {
    std::uint64_t ticks = 0;
    double mean_solver_iterations = 0.0;
    double mean_accepted_steps = 0.0;
    std::uint64_t overruns = 0;  // wall clock only; 0 under the simulated clock
};

// Fixed-rate retarget->command loop: at tick k (k*1e6/rate us) pull the
// latest frame, solve the body warm-started, retarget both hands, assemble
// and publish one "cmd" message stamped with the tick time.
struct ControlLoop {
    ControlLoop(const retarget::RetargetConfig& config, const kin::KinematicModel& body_model,
                HandBackend& hands, Bus& bus, double rate_hz = 100.0);

    // One tick at the given time; returns false when the source is exhausted.
    bool tick(FrameSource& source, std::uint64_t now_us);
    LoopStats stats() const { return stats_; }

  private:
    const retarget::RetargetConfig& config_;
    const kin::KinematicModel& body_model_;
    HandBackend& hands_;
    Bus& bus_;
    double rate_hz_;
    Eigen::VectorXd warm_q_;
    retarget::BaseCommandTracker base_tracker_;
    LoopStats stats_;
    std::uint64_t solver_iters_total_ = 0;
    std::uint64_t accepted_total_ = 0;
};

struct EpisodeFrame {
    std::uint64_t timestamp_us = 0;
    retarget::CommandVector command;
    std::optional<Eigen::VectorXd> state;  // 63 = 23 body + 40 hand joints
    std::optional<std::string> image_ref;
};

struct EpisodeRecord {
    std::string episode_id;
    std::vector<EpisodeFrame> frames;
    nlohmann::json metadata = nlohmann::json::object();
};

// 30 Hz conflating recorder with pedal-triggered segmentation. Samples the
// latest "cmd" value at each tick; a sample is kept only when recording is
// active, its timestamp lies inside the open window, and it is newer than
// the previous kept frame (stale values are not duplicated).
class Recorder {
  public:
    explicit Recorder(double rate_hz = 30.0);

    void ingest_trigger(const TriggerEvent& event);  // Protocol error on misuse
    // Called at each tick after ingesting all triggers earlier than now.
    void sample(const Bus& bus, std::uint64_t now_us);
    // Close an open window at end of stream (emits the partial episode).
    void finish(std::uint64_t end_us);

    const std::vector<EpisodeRecord>& episodes() const { return episodes_; }
    std::vector<EpisodeRecord> take_episodes() { return std::move(episodes_); }
    double rate_hz() const { return rate_hz_; }

  private:
    double rate_hz_;
    bool recording_ = false;
    std::uint64_t window_start_ = 0;
    std::vector<EpisodeFrame> current_;
    std::vector<EpisodeRecord> episodes_;
    int episode_counter_ = 0;

    void close_window(std::uint64_t stop_us);
};

// Offline recorder pass over an already-captured message stream.
std::vector<EpisodeRecord> run_recorder(const std::vector<WireMessage>& stream, double rate_hz,
                                        std::uint64_t duration_us);

struct PipelineConfig {
    double control_rate_hz = 100.0;
    double record_rate_hz = 30.0;
    // start/stop pairs in microseconds
    std::vector<std::pair<std::uint64_t, std::uint64_t>> pedal_windows;
    std::uint64_t duration_us = 0;
};

struct PipelineResult {
    LoopStats control;
    std::vector<EpisodeRecord> episodes;
    std::vector<WireMessage> commands;  // everything published on "cmd"
};

// Deterministic single-threaded composition under the simulated clock:
// control ticks at k*1e6/rate for k*period < duration, recorder ticks at
// round(k*1e6/rate) <= duration, pedal events at their scheduled times.
// Events at equal times apply control first, then pedal, then recorder.
PipelineResult run_pipeline_simulated(const std::vector<retarget::HumanFrame>& frames,
                                      const retarget::RetargetConfig& config,
                                      const kin::KinematicModel& body_model, HandBackend& hands,
                                      const PipelineConfig& pipeline_config);

// Same components under the wall clock, producer and recorder on separate
// threads. Schedules are best-effort; overruns are counted, not fatal.
PipelineResult run_pipeline_wallclock(const std::vector<retarget::HumanFrame>& frames,
                                      const retarget::RetargetConfig& config,
                                      const kin::KinematicModel& body_model, HandBackend& hands,
                                      const PipelineConfig& pipeline_config);

// Episode persistence: dir/meta.json + dir/frames.jsonl (+ images/ref'd paths).
void write_episode(const EpisodeRecord& episode, const std::filesystem::path& dir);
EpisodeRecord read_episode(const std::filesystem::path& dir);

// Localhost TCP fan-out of encoded frames (back-to-back wire frames).
class TcpPublisher {
  public:
    explicit TcpPublisher(std::uint16_t port);  // 0 picks an ephemeral port
    ~TcpPublisher();
    std::uint16_t port() const { return port_; }
    void publish(const WireMessage& message);
    void close();

  private:
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::vector<int> clients_;
    std::mutex mutex_;
    std::thread accept_thread_;
    std::atomic<bool> running_{false};
};

class TcpSubscriber {
  public:
    TcpSubscriber(const std::string& host, std::uint16_t port);
    ~TcpSubscriber();
    // Blocks until one frame arrives or the peer closes (nullopt).
    std::optional<WireMessage> receive();

  private:
    int fd_ = -1;
    FrameParser parser_;
};

}  // namespace humdex::pipeline
