#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dmlram/nn.hpp"

namespace dml {

// Mini-batch loop shared by the visual model and the fusion head.
struct TrainLoopConfig {
    std::size_t max_epochs = 30;
    std::size_t patience = 10;
    std::size_t batch_size = 32;
    OptimizerConfig optimizer{OptimizerKind::sgd_momentum, 0.01, 0.9, 0.0};
    std::uint64_t seed = 7;

    void validate() const;
};

struct TrainLoopResult {
    std::vector<double> train_loss;  // mean per-sample loss over each epoch
    std::vector<double> val_loss;    // evaluated after each epoch
    std::size_t best_epoch = 0;
    bool stopped_early = false;
};

// Per-sample gradients for every network in `nets`; one vector of parameter
// gradients per network. Returns the sample's loss.
using SampleGradFn = std::function<double(std::size_t sample, std::vector<std::vector<Tensor>>& grads)>;
using SampleLossFn = std::function<double(std::size_t sample)>;

// Runs mini-batch training with early stopping on the validation loss and
// restores the parameters of the best epoch. With no validation samples the
// training loss drives selection. Each batch is split into a fixed number of
// chunks whose gradients are summed in chunk order, so the result does not
// depend on the worker count.
TrainLoopResult run_train_loop(const TrainLoopConfig& config, const std::vector<Network*>& nets,
                               std::size_t n_train, std::size_t n_val, const SampleGradFn& sample_grad,
                               const SampleLossFn& val_loss, const std::string& what);

// Mean of loss(i) over [0, n), summed in a fixed chunk order.
double mean_loss(std::size_t n, const SampleLossFn& loss);

}  // namespace dml
