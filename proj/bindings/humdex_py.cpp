#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "humdex/body_retarget.hpp"
#include "humdex/hand_retarget.hpp"
#include "humdex/json_io.hpp"
#include "humdex/kinematics.hpp"
#include "humdex/motion_source.hpp"
#include "humdex/wire_format.hpp"

namespace py = pybind11;
using namespace humdex;

namespace {

py::tuple fk_arrays(const kin::KinematicModel& model, const Eigen::VectorXd& q) {
    const auto poses = kin::forward_kinematics(model, q);
    py::list rotations, positions;
    for (const auto& pose : poses) {
        rotations.append(pose.rotation);
        positions.append(pose.position);
    }
    return py::make_tuple(rotations, positions);
}

}  // namespace

PYBIND11_MODULE(_humdex, m) {
    m.doc() = "Whole-body + dexterous hand retargeting core";
    m.attr("__version__") = HUMDEX_VERSION;

    py::register_exception<Error>(m, "HumdexError");

    py::class_<kin::KinematicModel>(m, "KinematicModel")
        .def_readonly("name", &kin::KinematicModel::name)
        .def_readonly("dof_count", &kin::KinematicModel::dof_count)
        .def_property_readonly("link_names",
                               [](const kin::KinematicModel& model) {
                                   std::vector<std::string> names;
                                   for (const auto& link : model.links) names.push_back(link.name);
                                   return names;
                               })
        .def("limit_lower", &kin::KinematicModel::limit_lower)
        .def("limit_upper", &kin::KinematicModel::limit_upper)
        .def("limit_midpoints", &kin::KinematicModel::limit_midpoints)
        .def("set", &kin::KinematicModel::set, py::arg("name"));

    m.def("load_model", &kin::load_model_file, py::arg("path"));
    m.def("forward_kinematics", &fk_arrays, py::arg("model"), py::arg("q"),
          "Returns (rotations, positions) per link");
    m.def(
        "jacobian",
        [](const kin::KinematicModel& model, const Eigen::VectorXd& q, int link,
           const std::string& kind) {
            return kin::jacobian(model, q, link,
                                 kind == "orientation" ? kin::JacobianKind::Orientation
                                                       : kin::JacobianKind::Position);
        },
        py::arg("model"), py::arg("q"), py::arg("link_index"), py::arg("kind") = "position");
    m.def(
        "pelvis_relative",
        [](const kin::KinematicModel& model, const Eigen::VectorXd& q, int pelvis_index) {
            return kin::pelvis_relative(kin::forward_kinematics(model, q), pelvis_index);
        },
        py::arg("model"), py::arg("q"), py::arg("pelvis_index"));

    // Dexterous hand operations.
    m.def("fingertips_at", &hand::fingertips_at, py::arg("hand_model"), py::arg("q"));
    m.def("oracle_retarget", &hand::oracle_retarget, py::arg("hand_model"), py::arg("tips"),
          py::arg("scale") = 1.0);
    m.def("calibrate_scale", &hand::calibrate_scale, py::arg("open_human_tips"),
          py::arg("hand_model"));

    py::class_<hand::HandRegressor>(m, "HandRegressor")
        .def_static("load", &hand::HandRegressor::load, py::arg("path"))
        .def("save", &hand::HandRegressor::save, py::arg("path"))
        .def("infer",
             [](const hand::HandRegressor& regressor, const hand::FingertipFrame& tips) {
                 return hand::infer_hand(regressor, tips);
             },
             py::arg("tips"));

    // Wire format.
    py::class_<pipeline::WireMessage>(m, "WireMessage")
        .def(py::init([](const std::string& topic, std::uint64_t timestamp_us, py::bytes payload) {
                 pipeline::WireMessage msg;
                 msg.topic = topic;
                 msg.timestamp_us = timestamp_us;
                 const std::string data = payload;
                 msg.payload.assign(data.begin(), data.end());
                 return msg;
             }),
             py::arg("topic"), py::arg("timestamp_us"), py::arg("payload"))
        .def_readonly("topic", &pipeline::WireMessage::topic)
        .def_readonly("timestamp_us", &pipeline::WireMessage::timestamp_us)
        .def_property_readonly("payload", [](const pipeline::WireMessage& msg) {
            return py::bytes(reinterpret_cast<const char*>(msg.payload.data()),
                             msg.payload.size());
        });

    m.def("encode_message", [](const pipeline::WireMessage& msg) {
        const auto bytes = pipeline::encode_message(msg);
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    });
    m.def("decode_message", [](py::bytes data) {
        const std::string s = data;
        return pipeline::decode_message(
            {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    });
    m.def("crc32_ieee", [](py::bytes data) {
        const std::string s = data;
        return pipeline::crc32_ieee({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    });

    // Synthetic motion, enough to drive the solver from python.
    m.def(
        "synth_motion_file",
        [](const std::string& out_path, double duration_s, double rate_hz, std::uint64_t seed,
           const kin::KinematicModel& body, const kin::KinematicModel& hand_model) {
            motion::MotionSpec spec;
            spec.duration_s = duration_s;
            spec.rate_hz = rate_hz;
            spec.seed = seed;
            const auto frames = motion::synth_motion(spec, body, hand_model);
            motion::save_motion(frames, out_path);
            return frames.size();
        },
        py::arg("out_path"), py::arg("duration_s"), py::arg("rate_hz"), py::arg("seed"),
        py::arg("body_model"), py::arg("hand_model"));

    m.def(
        "solve_motion_file",
        [](const std::string& motion_path, const kin::KinematicModel& body) {
            const auto frames = motion::load_motion(motion_path);
            const auto config = retarget::default_config(body);
            const auto solutions = retarget::retarget_stream(config, frames, body);
            std::vector<Eigen::VectorXd> out;
            for (const auto& s : solutions) out.push_back(s.q_star);
            return out;
        },
        py::arg("motion_path"), py::arg("body_model"),
        "Solve every frame of a motion file with the default config; returns q* per frame");
}
