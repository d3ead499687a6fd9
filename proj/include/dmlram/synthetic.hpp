#pragma once

#include <array>
#include <cstdint>

#include "dmlram/dataset.hpp"

namespace dml {

// Planar two-link arm used as a stand-in for recorded manipulation data.
//
// Per episode a target configuration is drawn; its end-effector position is
// rendered as a bright blob in every frame together with the arm links. The
// recorded action is joint-space PD control toward the target:
//     a = kp * (target - theta) - kd * omega
// so the correct action needs the target (only visible in the image) and
// the joint velocity (only in the state). Integration per step:
//     theta' = theta + omega * dt
//     omega' = omega + a * dt
// Joint efforts in the state are the gravity-holding torques of the current
// pose, a trigonometric function of theta that carries no target information.
struct ArmParams {
    double link1 = 1.0;
    double link2 = 0.8;
    double dt = 0.05;
    double kp = 3.0;
    double kd = 2.5;
    // gravity-load coefficients for the effort channels
    double load1 = 1.5;
    double load2 = 0.5;
};

struct ArmEpisode {
    std::array<double, 2> theta{0.0, 1.0};
    std::array<double, 2> omega{0.0, 0.0};
    std::array<double, 2> target{0.0, 1.0};
};

struct SyntheticConfig {
    std::size_t n_traj = 200;
    std::size_t steps_per_traj = 50;
    std::size_t image_size = 32;
    std::uint64_t seed = 7;
    std::size_t joint_count = 6;
    std::size_t window_size = kDefaultWindow;
    ArmParams arm;

    void validate() const;
};

inline constexpr std::size_t kArmJoints = 2;
inline constexpr std::size_t kArmActionDim = 2;

std::array<double, 2> arm_efforts(const ArmParams& arm, const std::array<double, 2>& theta);
std::array<double, 2> end_effector(const ArmParams& arm, const std::array<double, 2>& theta);

// Renders one [1, size, size] frame of the arm at `theta` with the target blob.
Tensor render_arm(const ArmParams& arm, const std::array<double, 2>& theta, const std::array<double, 2>& target,
                  std::size_t image_size);

Trajectory simulate_episode(const SyntheticConfig& config, const ArmEpisode& episode, std::string id);

Dataset generate_synthetic(const SyntheticConfig& config);

}  // namespace dml
