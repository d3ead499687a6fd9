#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dmlram/tensor.hpp"

namespace dml {

struct ImageGeometry {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 1;

    Shape shape() const { return {channels, height, width}; }
    std::size_t pixel_count() const { return channels * height * width; }
    friend bool operator==(const ImageGeometry&, const ImageGeometry&) = default;
};

// Pixels are stored [c, h, w] and lie in [0, 1].
struct ImageFrame {
    Tensor pixels;

    ImageGeometry geometry() const { return {pixels.extent(1), pixels.extent(2), pixels.extent(0)}; }
};

struct RobotState {
    std::vector<float> joint_positions;
    std::vector<float> joint_velocities;
    std::vector<float> joint_efforts;
    float gripper = 0.0f;

    std::size_t joint_count() const { return joint_positions.size(); }

    // Flat layout [positions | velocities | efforts | gripper], length 3J+1.
    std::vector<float> to_vector() const;
    static RobotState from_vector(std::span<const float> flat, std::size_t joint_count);
};

inline std::size_t state_dimension(std::size_t joint_count) { return 3 * joint_count + 1; }

struct ActionVector {
    std::vector<float> values;
};

struct Step {
    ImageFrame image;
    RobotState state;
    ActionVector action;
};

struct Trajectory {
    std::string id;
    std::string environment_id;
    std::vector<Step> steps;

    std::size_t size() const { return steps.size(); }
};

struct DatasetMeta {
    std::size_t joint_count = 6;
    std::size_t action_dim = 2;
    ImageGeometry image;

    friend bool operator==(const DatasetMeta&, const DatasetMeta&) = default;
};

struct Dataset {
    DatasetMeta meta;
    std::vector<Trajectory> trajectories;
};

// Throws InvariantError naming the trajectory and step on the first violation
// (geometry, joint count, action length, pixel range, finiteness).
void validate_trajectory(const Trajectory& traj, const DatasetMeta& meta);

// ---- on-disk layout ---------------------------------------------------------

inline constexpr int kManifestVersion = 1;

// Writes manifest.json plus three DMLT tensor files per trajectory under dir.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& manifest_path);

// Content hash over metadata and every tensor payload.
std::string dataset_fingerprint(const Dataset& dataset);

Tensor images_tensor(const Trajectory& traj);
Tensor states_tensor(const Trajectory& traj);
Tensor actions_tensor(const Trajectory& traj);

// ---- windowing --------------------------------------------------------------

inline constexpr std::size_t kDefaultWindow = 3;

// One training example: `window` consecutive frames ending at step
// first + window - 1, with next-step targets. Borrows from its trajectory.
class Sample {
public:
    Sample(const Trajectory& traj, std::size_t first, std::size_t window)
        : traj_(&traj), first_(first), window_(window) {}

    const Trajectory& trajectory() const { return *traj_; }
    std::size_t first_step() const { return first_; }
    std::size_t window_size() const { return window_; }
    std::size_t last_step() const { return first_ + window_ - 1; }
    std::size_t target_step() const { return first_ + window_; }

    const ImageFrame& past_image(std::size_t k) const { return traj_->steps[first_ + k].image; }
    const RobotState& current_state() const { return traj_->steps[last_step()].state; }
    const ImageFrame& target_next_image() const { return traj_->steps[target_step()].image; }
    const RobotState& target_next_state() const { return traj_->steps[target_step()].state; }
    const ActionVector& target_action() const { return traj_->steps[last_step()].action; }

    // Window frames stacked along channels: [window * c, h, w].
    Tensor stacked_window() const;

    // "<trajectory id>:<last step>" identifies the sample in feature files.
    std::string key() const;

private:
    const Trajectory* traj_;
    std::size_t first_;
    std::size_t window_;
};

std::vector<Sample> window_samples(const Trajectory& traj, std::size_t window_size = kDefaultWindow);
std::vector<Sample> window_samples(std::span<const Trajectory* const> trajs, std::size_t window_size = kDefaultWindow);

// ---- normalisation ----------------------------------------------------------

// Standardises states (population mean/std) and maps actions to [-1, 1] by
// the training min/max. Zero-variance state dimensions get sigma = 1 and
// constant action dimensions a half-range of 1.
class Normalizer {
public:
    Normalizer() = default;
    Normalizer(std::vector<double> state_mean, std::vector<double> state_std, std::vector<double> action_min,
               std::vector<double> action_max);

    static Normalizer fit(std::span<const Trajectory* const> train);

    std::size_t state_dim() const { return state_mean_.size(); }
    std::size_t action_dim() const { return action_min_.size(); }

    std::vector<float> apply_state(std::span<const float> raw) const;
    std::vector<float> invert_state(std::span<const float> normalized) const;
    std::vector<float> apply_action(std::span<const float> raw) const;
    std::vector<float> invert_action(std::span<const float> normalized) const;

    const std::vector<double>& state_mean() const { return state_mean_; }
    const std::vector<double>& state_std() const { return state_std_; }
    const std::vector<double>& action_min() const { return action_min_; }
    const std::vector<double>& action_max() const { return action_max_; }

    std::string to_json() const;
    static Normalizer from_json(const std::string& text);

    friend bool operator==(const Normalizer&, const Normalizer&) = default;

private:
    std::vector<double> state_mean_, state_std_;
    std::vector<double> action_min_, action_max_;
};

// ---- splitting ----------------------------------------------------------------

struct SplitRatios {
    double train = 0.7;
    double val = 0.15;
    double test = 0.15;
};

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

// Partition sizes by largest remainder: floor(n * r_k), then the leftover
// units go to the largest fractional parts, ties to the later partition.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios);

// Whole-trajectory split over a seeded shuffle of [0, n).
SplitIndices split_dataset(std::size_t n, const SplitRatios& ratios, std::uint64_t seed);

enum class SplitName { train, val, test };
SplitName split_from_string(const std::string& name);
std::string to_string(SplitName split);

struct SplitView {
    std::vector<const Trajectory*> train, val, test;

    const std::vector<const Trajectory*>& get(SplitName s) const;
};

SplitView make_split_view(const Dataset& dataset, const SplitIndices& split);

}  // namespace dml
