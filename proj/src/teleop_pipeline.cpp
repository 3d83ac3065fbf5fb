#include "humdex/teleop_pipeline.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <cstring>

#include "humdex/error.hpp"
#include "humdex/json_io.hpp"
#include "humdex/log.hpp"

namespace humdex::pipeline {

using nlohmann::json;

nlohmann::json trigger_to_json(const TriggerEvent& event) {
    return json{{"kind", event.kind == TriggerEvent::Kind::Start ? "start" : "stop"},
                {"t_us", event.timestamp_us}};
}

TriggerEvent trigger_from_json(const nlohmann::json& doc) {
    TriggerEvent event;
    const std::string kind = doc.at("kind").get<std::string>();
    if (kind == "start") {
        event.kind = TriggerEvent::Kind::Start;
    } else if (kind == "stop") {
        event.kind = TriggerEvent::Kind::Stop;
    } else {
        throw Error(ErrorKind::Parse, "trigger kind must be start or stop");
    }
    event.timestamp_us = doc.at("t_us").get<std::uint64_t>();
    return event;
}

WallClock::WallClock() : epoch_(std::chrono::steady_clock::now()) {}

std::uint64_t WallClock::now_us() {
    return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::microseconds>(
                                          std::chrono::steady_clock::now() - epoch_)
                                          .count());
}

void WallClock::sleep_until_us(std::uint64_t t) {
    const auto target = epoch_ + std::chrono::microseconds(t);
    std::this_thread::sleep_until(target);
}

void Bus::publish(WireMessage message) {
    std::lock_guard<std::mutex> lock(mutex_);
    latest_seq_[message.topic] = ++sequence_;
    by_topic_[message.topic].push_back(std::move(message));
}

std::optional<std::pair<WireMessage, std::uint64_t>> Bus::latest(const std::string& topic) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = by_topic_.find(topic);
    if (it == by_topic_.end() || it->second.empty()) return std::nullopt;
    return std::make_pair(it->second.back(), latest_seq_.at(topic));
}

std::vector<WireMessage> Bus::history(const std::string& topic) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = by_topic_.find(topic);
    if (it == by_topic_.end()) return {};
    return it->second;
}

std::size_t Bus::count(const std::string& topic) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = by_topic_.find(topic);
    return it == by_topic_.end() ? 0 : it->second.size();
}

MotionPlayback::MotionPlayback(std::vector<retarget::HumanFrame> frames)
    : frames_(std::move(frames)) {
    if (frames_.empty()) throw Error(ErrorKind::Validation, "playback needs at least one frame");
}

std::optional<retarget::HumanFrame> MotionPlayback::latest(std::uint64_t now_us) {
    const auto now = static_cast<std::int64_t>(now_us);
    if (now > frames_.back().timestamp_us) return std::nullopt;  // exhausted
    if (now <= frames_.front().timestamp_us) return frames_.front();
    auto it = std::upper_bound(frames_.begin(), frames_.end(), now,
                               [](std::int64_t t, const retarget::HumanFrame& f) {
                                   return t < f.timestamp_us;
                               });
    return *(it - 1);
}

MidpointHand::MidpointHand(const kin::KinematicModel& hand_model) {
    mid_ = 0.5 * (hand::hand_limits_lower(hand_model) + hand::hand_limits_upper(hand_model));
}

OracleHand::OracleHand(const kin::KinematicModel& hand_model, double scale)
    : model_(hand_model), scale_(scale) {
    mid_ = 0.5 * (hand::hand_limits_lower(hand_model) + hand::hand_limits_upper(hand_model));
}

Eigen::VectorXd OracleHand::retarget(const hand::FingertipFrame& tips) {
    return hand::oracle_retarget(model_, tips, scale_);
}

LearnedHand::LearnedHand(hand::HandRegressor regressor) : regressor_(std::move(regressor)) {}

Eigen::VectorXd LearnedHand::retarget(const hand::FingertipFrame& tips) {
    return hand::infer_hand(regressor_, tips);
}

Eigen::VectorXd LearnedHand::neutral() const {
    return regressor_.out_mid;
}

ControlLoop::ControlLoop(const retarget::RetargetConfig& config,
                         const kin::KinematicModel& body_model, HandBackend& hands, Bus& bus,
                         double rate_hz)
    : config_(config), body_model_(body_model), hands_(hands), bus_(bus), rate_hz_(rate_hz),
      warm_q_(body_model.limit_midpoints()) {}

bool ControlLoop::tick(FrameSource& source, std::uint64_t now_us) {
    const auto frame = source.latest(now_us);
    if (!frame) return false;

    const retarget::RetargetSolution solution =
        retarget::solve_frame(config_, *frame, body_model_, warm_q_);
    warm_q_ = solution.q_star;

    const Eigen::VectorXd left =
        frame->fingertips_left ? hands_.retarget(*frame->fingertips_left) : hands_.neutral();
    const Eigen::VectorXd right =
        frame->fingertips_right ? hands_.retarget(*frame->fingertips_right) : hands_.neutral();

    const retarget::BaseInputs base = base_tracker_.update(*frame, config_);
    const retarget::CommandVector cmd = retarget::assemble_command(solution, left, right, base);

    WireMessage message;
    message.topic = "cmd";
    message.timestamp_us = now_us;
    const std::string payload = io::command_to_json(cmd).dump();
    message.payload.assign(payload.begin(), payload.end());
    bus_.publish(std::move(message));

    ++stats_.ticks;
    solver_iters_total_ += static_cast<std::uint64_t>(solution.iterations);
    accepted_total_ += static_cast<std::uint64_t>(solution.accepted_steps);
    stats_.mean_solver_iterations =
        static_cast<double>(solver_iters_total_) / static_cast<double>(stats_.ticks);
    stats_.mean_accepted_steps =
        static_cast<double>(accepted_total_) / static_cast<double>(stats_.ticks);
    return true;
}

Recorder::Recorder(double rate_hz) : rate_hz_(rate_hz) {
    if (rate_hz <= 0.0) throw Error(ErrorKind::Validation, "recorder rate must be positive");
}

void Recorder::ingest_trigger(const TriggerEvent& event) {
    if (event.kind == TriggerEvent::Kind::Start) {
        if (recording_) {
            throw Error(ErrorKind::Protocol, "overlapping start trigger at t=" +
                                                 std::to_string(event.timestamp_us));
        }
        recording_ = true;
        window_start_ = event.timestamp_us;
        current_.clear();
    } else {
        if (!recording_) {
            throw Error(ErrorKind::Protocol,
                        "stop trigger without a start at t=" + std::to_string(event.timestamp_us));
        }
        close_window(event.timestamp_us);
    }
}

void Recorder::sample(const Bus& bus, std::uint64_t now_us) {
    if (!recording_) return;
    const auto latest = bus.latest("cmd");
    if (!latest) return;
    const WireMessage& msg = latest->first;
    if (msg.timestamp_us < window_start_ || msg.timestamp_us > now_us) return;
    if (!current_.empty() && msg.timestamp_us <= current_.back().timestamp_us) return;  // stale

    EpisodeFrame frame;
    frame.timestamp_us = msg.timestamp_us;
    try {
        frame.command = io::command_from_json(
            json::parse(std::string(msg.payload.begin(), msg.payload.end())));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("cmd payload: ") + e.what());
    }
    current_.push_back(std::move(frame));
}

void Recorder::finish(std::uint64_t end_us) {
    if (recording_) close_window(end_us);
}

void Recorder::close_window(std::uint64_t stop_us) {
    EpisodeRecord episode;
    char id[32];
    std::snprintf(id, sizeof(id), "episode_%04d", episode_counter_++);
    episode.episode_id = id;
    episode.frames = std::move(current_);
    current_.clear();
    episode.metadata = json{{"start_us", window_start_},
                            {"stop_us", stop_us},
                            {"record_rate_hz", rate_hz_},
                            {"source", "teleop_pipeline"}};
    episodes_.push_back(std::move(episode));
    recording_ = false;
}

std::vector<EpisodeRecord> run_recorder(const std::vector<WireMessage>& stream, double rate_hz,
                                        std::uint64_t duration_us) {
    Recorder recorder(rate_hz);
    Bus bus;
    size_t idx = 0;

    auto dispatch = [&](const WireMessage& msg) {
        if (msg.topic == "pedal") {
            recorder.ingest_trigger(
                trigger_from_json(json::parse(std::string(msg.payload.begin(), msg.payload.end()))));
        } else if (msg.topic == "cmd") {
            bus.publish(msg);
        }
    };

    for (std::uint64_t k = 1;; ++k) {
        const auto tick =
            static_cast<std::uint64_t>(std::llround(static_cast<double>(k) * 1e6 / rate_hz));
        if (tick > duration_us) break;
        while (idx < stream.size() && stream[idx].timestamp_us < tick) dispatch(stream[idx++]);
        // Equal-time commands were published before this tick in a live run.
        while (idx < stream.size() && stream[idx].timestamp_us == tick &&
               stream[idx].topic == "cmd") {
            dispatch(stream[idx++]);
        }
        recorder.sample(bus, tick);
    }
    while (idx < stream.size() && stream[idx].timestamp_us <= duration_us) dispatch(stream[idx++]);
    recorder.finish(duration_us);
    return recorder.take_episodes();
}

namespace {

struct ScheduledEvent {
    std::uint64_t t = 0;
    int priority = 0;  // 0 control, 1 pedal, 2 recorder
    std::uint64_t index = 0;
    bool operator<(const ScheduledEvent& other) const {
        return std::tie(t, priority, index) < std::tie(other.t, other.priority, other.index);
    }
};

std::vector<TriggerEvent> pedal_events(const PipelineConfig& config) {
    std::vector<TriggerEvent> events;
    for (const auto& [start, stop] : config.pedal_windows) {
        if (stop < start) throw Error(ErrorKind::Validation, "pedal window ends before it starts");
        events.push_back({TriggerEvent::Kind::Start, start});
        events.push_back({TriggerEvent::Kind::Stop, stop});
    }
    std::sort(events.begin(), events.end(),
              [](const TriggerEvent& a, const TriggerEvent& b) {
                  return a.timestamp_us < b.timestamp_us;
              });
    return events;
}

}  // namespace

PipelineResult run_pipeline_simulated(const std::vector<retarget::HumanFrame>& frames,
                                      const retarget::RetargetConfig& config,
                                      const kin::KinematicModel& body_model, HandBackend& hands,
                                      const PipelineConfig& pipeline_config) {
    Bus bus;
    MotionPlayback playback(frames);
    ControlLoop loop(config, body_model, hands, bus, pipeline_config.control_rate_hz);
    Recorder recorder(pipeline_config.record_rate_hz);
    const std::vector<TriggerEvent> pedals = pedal_events(pipeline_config);

    std::vector<ScheduledEvent> schedule;
    const double control_period = 1e6 / pipeline_config.control_rate_hz;
    for (std::uint64_t k = 0;; ++k) {
        const auto t = static_cast<std::uint64_t>(std::llround(static_cast<double>(k) * control_period));
        if (t >= pipeline_config.duration_us) break;
        schedule.push_back({t, 0, k});
    }
    for (std::uint64_t i = 0; i < pedals.size(); ++i) {
        schedule.push_back({pedals[i].timestamp_us, 1, i});
    }
    for (std::uint64_t k = 1;; ++k) {
        const auto t = static_cast<std::uint64_t>(
            std::llround(static_cast<double>(k) * 1e6 / pipeline_config.record_rate_hz));
        if (t > pipeline_config.duration_us) break;
        schedule.push_back({t, 2, k});
    }
    std::sort(schedule.begin(), schedule.end());

    SimulatedClock clock;
    bool control_alive = true;
    size_t pedal_idx = 0;  // pedals ingested into the recorder (strictly before a tick)
    for (const auto& event : schedule) {
        clock.sleep_until_us(event.t);
        if (event.priority == 0) {
            if (control_alive) control_alive = loop.tick(playback, event.t);
        } else if (event.priority == 1) {
            WireMessage msg;
            msg.topic = "pedal";
            msg.timestamp_us = event.t;
            const std::string payload = trigger_to_json(pedals[event.index]).dump();
            msg.payload.assign(payload.begin(), payload.end());
            bus.publish(std::move(msg));
        } else {
            while (pedal_idx < pedals.size() && pedals[pedal_idx].timestamp_us < event.t) {
                recorder.ingest_trigger(pedals[pedal_idx++]);
            }
            recorder.sample(bus, event.t);
        }
    }
    while (pedal_idx < pedals.size() &&
           pedals[pedal_idx].timestamp_us <= pipeline_config.duration_us) {
        recorder.ingest_trigger(pedals[pedal_idx++]);
    }
    recorder.finish(pipeline_config.duration_us);

    PipelineResult result;
    result.control = loop.stats();
    result.episodes = recorder.take_episodes();
    result.commands = bus.history("cmd");
    return result;
}

PipelineResult run_pipeline_wallclock(const std::vector<retarget::HumanFrame>& frames,
                                      const retarget::RetargetConfig& config,
                                      const kin::KinematicModel& body_model, HandBackend& hands,
                                      const PipelineConfig& pipeline_config) {
    Bus bus;
    MotionPlayback playback(frames);
    ControlLoop loop(config, body_model, hands, bus, pipeline_config.control_rate_hz);
    Recorder recorder(pipeline_config.record_rate_hz);
    const std::vector<TriggerEvent> pedals = pedal_events(pipeline_config);
    WallClock clock;
    std::uint64_t overruns = 0;

    std::thread producer([&] {
        const double period = 1e6 / pipeline_config.control_rate_hz;
        for (std::uint64_t k = 0;; ++k) {
            const auto t = static_cast<std::uint64_t>(std::llround(static_cast<double>(k) * period));
            if (t >= pipeline_config.duration_us) break;
            clock.sleep_until_us(t);
            if (!loop.tick(playback, t)) break;
            if (clock.now_us() > t + static_cast<std::uint64_t>(period)) ++overruns;
        }
    });

    std::thread consumer([&] {
        size_t pedal_idx = 0;
        for (std::uint64_t k = 1;; ++k) {
            const auto t = static_cast<std::uint64_t>(
                std::llround(static_cast<double>(k) * 1e6 / pipeline_config.record_rate_hz));
            if (t > pipeline_config.duration_us) break;
            clock.sleep_until_us(t);
            while (pedal_idx < pedals.size() && pedals[pedal_idx].timestamp_us < t) {
                recorder.ingest_trigger(pedals[pedal_idx++]);
            }
            recorder.sample(bus, t);
        }
        while (pedal_idx < pedals.size() &&
               pedals[pedal_idx].timestamp_us <= pipeline_config.duration_us) {
            recorder.ingest_trigger(pedals[pedal_idx++]);
        }
        recorder.finish(pipeline_config.duration_us);
    });

    producer.join();
    consumer.join();

    PipelineResult result;
    result.control = loop.stats();
    result.control.overruns = overruns;
    result.episodes = recorder.take_episodes();
    result.commands = bus.history("cmd");
    return result;
}

void write_episode(const EpisodeRecord& episode, const std::filesystem::path& dir) {
    // Validate the record invariants before touching the disk.
    for (size_t i = 1; i < episode.frames.size(); ++i) {
        if (episode.frames[i].timestamp_us <= episode.frames[i - 1].timestamp_us) {
            throw Error(ErrorKind::Validation, "episode timestamps must strictly increase");
        }
    }
    const bool has_state = !episode.frames.empty() && episode.frames.front().state.has_value();
    for (const auto& frame : episode.frames) {
        if (frame.state.has_value() != has_state) {
            throw Error(ErrorKind::Validation, "state must be present on all frames or none");
        }
    }

    std::filesystem::create_directories(dir);
    json meta{{"episode_id", episode.episode_id},
              {"metadata", episode.metadata},
              {"frame_count", episode.frames.size()},
              {"has_state", has_state}};
    io::write_text_file(dir / "meta.json", meta.dump(1) + "\n");

    std::vector<json> lines;
    lines.reserve(episode.frames.size());
    for (const auto& frame : episode.frames) {
        json jf{{"t_us", frame.timestamp_us}, {"cmd", io::command_to_json(frame.command)}};
        if (frame.state) jf["state"] = io::vector_to_json(*frame.state);
        if (frame.image_ref) jf["image_ref"] = *frame.image_ref;
        lines.push_back(std::move(jf));
    }
    io::write_jsonl(dir / "frames.jsonl", lines);
}

EpisodeRecord read_episode(const std::filesystem::path& dir) {
    const auto meta_path = dir / "meta.json";
    const auto frames_path = dir / "frames.jsonl";
    if (!std::filesystem::exists(meta_path)) {
        throw Error(ErrorKind::Io, "missing " + meta_path.string());
    }
    if (!std::filesystem::exists(frames_path)) {
        throw Error(ErrorKind::Io, "missing " + frames_path.string());
    }
    json meta;
    try {
        meta = json::parse(io::read_text_file(meta_path));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Parse, meta_path.string() + ": " + e.what());
    }

    EpisodeRecord episode;
    episode.episode_id = meta.at("episode_id").get<std::string>();
    episode.metadata = meta.value("metadata", json::object());

    int line_no = 0;
    for (const auto& doc : io::read_jsonl(frames_path)) {
        ++line_no;
        try {
            EpisodeFrame frame;
            frame.timestamp_us = doc.at("t_us").get<std::uint64_t>();
            frame.command = io::command_from_json(doc.at("cmd"));
            if (doc.contains("state")) frame.state = io::vector_from_json(doc["state"]);
            if (doc.contains("image_ref")) frame.image_ref = doc["image_ref"].get<std::string>();
            episode.frames.push_back(std::move(frame));
        } catch (const json::exception& e) {
            throw Error(ErrorKind::Parse,
                        frames_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            throw Error(e.kind(),
                        frames_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    const auto expected = meta.at("frame_count").get<size_t>();
    if (episode.frames.size() != expected) {
        throw Error(ErrorKind::Io, "partial frames file: expected " + std::to_string(expected) +
                                       " frames, found " + std::to_string(episode.frames.size()));
    }
    for (size_t i = 1; i < episode.frames.size(); ++i) {
        if (episode.frames[i].timestamp_us <= episode.frames[i - 1].timestamp_us) {
            throw Error(ErrorKind::Validation, "episode timestamps must strictly increase");
        }
    }
    return episode;
}

TcpPublisher::TcpPublisher(std::uint16_t port) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw Error(ErrorKind::Io, "socket() failed");
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(listen_fd_);
        throw Error(ErrorKind::Io, "bind() failed");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    if (::listen(listen_fd_, 8) != 0) {
        ::close(listen_fd_);
        throw Error(ErrorKind::Io, "listen() failed");
    }
    running_ = true;
    accept_thread_ = std::thread([this] {
        while (running_) {
            const int client = ::accept(listen_fd_, nullptr, nullptr);
            if (client < 0) break;
            std::lock_guard<std::mutex> lock(mutex_);
            clients_.push_back(client);
        }
    });
}

TcpPublisher::~TcpPublisher() {
    close();
}

void TcpPublisher::close() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    std::lock_guard<std::mutex> lock(mutex_);
    for (int fd : clients_) ::close(fd);
    clients_.clear();
}

void TcpPublisher::publish(const WireMessage& message) {
    const std::vector<std::uint8_t> bytes = encode_message(message);
    std::lock_guard<std::mutex> lock(mutex_);
    for (auto it = clients_.begin(); it != clients_.end();) {
        const ssize_t sent = ::send(*it, bytes.data(), bytes.size(), MSG_NOSIGNAL);
        if (sent != static_cast<ssize_t>(bytes.size())) {
            ::close(*it);
            it = clients_.erase(it);
        } else {
            ++it;
        }
    }
}

TcpSubscriber::TcpSubscriber(const std::string& host, std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw Error(ErrorKind::Io, "socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd_);
        throw Error(ErrorKind::Io, "bad host address '" + host + "'");
    }
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(fd_);
        throw Error(ErrorKind::Io, "connect() failed");
    }
}

TcpSubscriber::~TcpSubscriber() {
    if (fd_ >= 0) ::close(fd_);
}

std::optional<WireMessage> TcpSubscriber::receive() {
    std::array<std::uint8_t, 4096> chunk;
    while (true) {
        if (auto result = parser_.next()) {
            if (result->status != DecodeStatus::Ok) {
                throw Error(ErrorKind::Parse,
                            std::string("wire decode: ") + to_string(result->status));
            }
            return std::move(result->message);
        }
        const ssize_t n = ::recv(fd_, chunk.data(), chunk.size(), 0);
        if (n <= 0) return std::nullopt;
        parser_.feed({chunk.data(), static_cast<size_t>(n)});
    }
}

}  // namespace humdex::pipeline
