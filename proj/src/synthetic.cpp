#include "dmlram/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dmlram/rng.hpp"

namespace dml {

namespace {

// Sampling ranges for start and target poses. The elbow range keeps inverse
// kinematics unique, so the blob position determines the target angles.
constexpr double kShoulderLo = -2.0, kShoulderHi = 2.0;
constexpr double kElbowLo = 0.4, kElbowHi = 2.4;
constexpr double kOmegaMax = 1.0;

double seg_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

void SyntheticConfig::validate() const {
    if (n_traj == 0) throw ConfigError("synthetic: n_traj must be >= 1");
    if (image_size < 16) throw ConfigError("synthetic: image_size must be >= 16");
    if (window_size < 1) throw ConfigError("synthetic: window_size must be >= 1");
    if (steps_per_traj < window_size + 1)
        throw ConfigError("synthetic: steps_per_traj must be >= window_size + 1 (" + std::to_string(window_size + 1) +
                          ")");
    if (joint_count < kArmJoints) throw ConfigError("synthetic: joint_count must be >= 2");
    if (!(arm.dt > 0)) throw ConfigError("synthetic: dt must be > 0");
}

std::array<double, 2> arm_efforts(const ArmParams& arm, const std::array<double, 2>& theta) {
    const double c1 = std::cos(theta[0]);
    const double c12 = std::cos(theta[0] + theta[1]);
    return {arm.load1 * c1 + arm.load2 * c12, arm.load2 * c12};
}

std::array<double, 2> end_effector(const ArmParams& arm, const std::array<double, 2>& theta) {
    return {arm.link1 * std::cos(theta[0]) + arm.link2 * std::cos(theta[0] + theta[1]),
            arm.link1 * std::sin(theta[0]) + arm.link2 * std::sin(theta[0] + theta[1])};
}

Tensor render_arm(const ArmParams& arm, const std::array<double, 2>& theta, const std::array<double, 2>& target,
                  std::size_t image_size) {
    const double reach = (arm.link1 + arm.link2) * 1.1;
    const double px_size = 2.0 * reach / static_cast<double>(image_size);
    const double elbow_x = arm.link1 * std::cos(theta[0]);
    const double elbow_y = arm.link1 * std::sin(theta[0]);
    const auto tip = end_effector(arm, theta);
    const auto goal = end_effector(arm, target);

    const double link_half_width = 0.9 * px_size;
    const double blob_sigma = 1.3 * px_size;

    Tensor img({1, image_size, image_size});
    for (std::size_t r = 0; r < image_size; ++r) {
        const double y = reach - (static_cast<double>(r) + 0.5) * px_size;
        for (std::size_t c = 0; c < image_size; ++c) {
            const double x = -reach + (static_cast<double>(c) + 0.5) * px_size;
            const double d = std::min(seg_distance(x, y, 0, 0, elbow_x, elbow_y),
                                      seg_distance(x, y, elbow_x, elbow_y, tip[0], tip[1]));
            const double link = 0.5 * std::clamp(1.5 - d / (2.0 * link_half_width), 0.0, 1.0);
            const double gx = x - goal[0], gy = y - goal[1];
            double blob = std::exp(-(gx * gx + gy * gy) / (2.0 * blob_sigma * blob_sigma));
            // Cut the Gaussian tail so that no pixel is stored as a subnormal float.
            if (blob < 1e-6) blob = 0.0;
            img.at(0, r, c) = static_cast<float>(std::clamp(std::max(link, blob), 0.0, 1.0));
        }
    }
    return img;
}

Trajectory simulate_episode(const SyntheticConfig& config, const ArmEpisode& episode, std::string id) {
    config.validate();
    const ArmParams& arm = config.arm;
    const std::size_t J = config.joint_count;

    Trajectory traj;
    traj.id = std::move(id);
    traj.environment_id = "synthetic-planar-arm";
    traj.steps.reserve(config.steps_per_traj);

    // The state is carried in float precision so that every stored transition
    // satisfies the update rule up to one rounding of the result.
    std::array<float, 2> theta{static_cast<float>(episode.theta[0]), static_cast<float>(episode.theta[1])};
    std::array<float, 2> omega{static_cast<float>(episode.omega[0]), static_cast<float>(episode.omega[1])};
    const std::array<double, 2> target{static_cast<float>(episode.target[0]), static_cast<float>(episode.target[1])};

    for (std::size_t t = 0; t < config.steps_per_traj; ++t) {
        Step step;
        const std::array<double, 2> th{theta[0], theta[1]};
        step.image.pixels = render_arm(arm, th, target, config.image_size);

        RobotState& s = step.state;
        s.joint_positions.assign(J, 0.0f);
        s.joint_velocities.assign(J, 0.0f);
        s.joint_efforts.assign(J, 0.0f);
        const auto eff = arm_efforts(arm, th);
        for (std::size_t j = 0; j < kArmJoints; ++j) {
            s.joint_positions[j] = theta[j];
            s.joint_velocities[j] = omega[j];
            s.joint_efforts[j] = static_cast<float>(eff[j]);
        }
        s.gripper = config.steps_per_traj > 1
                        ? static_cast<float>(static_cast<double>(t) / static_cast<double>(config.steps_per_traj - 1))
                        : 0.0f;

        std::array<float, 2> action{};
        for (std::size_t j = 0; j < kArmJoints; ++j)
            action[j] = static_cast<float>(arm.kp * (target[j] - static_cast<double>(theta[j])) -
                                           arm.kd * static_cast<double>(omega[j]));
        step.action.values.assign(action.begin(), action.end());
        traj.steps.push_back(std::move(step));

        for (std::size_t j = 0; j < kArmJoints; ++j) {
            const double th_next = static_cast<double>(theta[j]) + static_cast<double>(omega[j]) * arm.dt;
            const double om_next = static_cast<double>(omega[j]) + static_cast<double>(action[j]) * arm.dt;
            theta[j] = static_cast<float>(th_next);
            omega[j] = static_cast<float>(om_next);
        }
    }
    return traj;
}

Dataset generate_synthetic(const SyntheticConfig& config) {
    config.validate();
    Dataset ds;
    ds.meta.joint_count = config.joint_count;
    ds.meta.action_dim = kArmActionDim;
    ds.meta.image = {config.image_size, config.image_size, 1};
    ds.trajectories.reserve(config.n_traj);
    Rng rng(config.seed);
    for (std::size_t i = 0; i < config.n_traj; ++i) {
        ArmEpisode ep;
        ep.theta = {rng.uniform(kShoulderLo, kShoulderHi), rng.uniform(kElbowLo, kElbowHi)};
        ep.omega = {rng.uniform(-kOmegaMax, kOmegaMax), rng.uniform(-kOmegaMax, kOmegaMax)};
        ep.target = {rng.uniform(kShoulderLo, kShoulderHi), rng.uniform(kElbowLo, kElbowHi)};
        char id[32];
        std::snprintf(id, sizeof id, "arm_%05zu", i);
        ds.trajectories.push_back(simulate_episode(config, ep, id));
    }
    return ds;
}

}  // namespace dml
