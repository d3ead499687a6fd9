#include "dmlram/training.hpp"

#include <cmath>
#include <numeric>

#include "dmlram/error.hpp"
#include "dmlram/parallel.hpp"
#include "dmlram/rng.hpp"

namespace dml {

namespace {

constexpr std::size_t kChunks = 8;

std::vector<std::vector<Tensor>> zero_grads(const std::vector<Network*>& nets) {
    std::vector<std::vector<Tensor>> g;
    g.reserve(nets.size());
    for (const Network* n : nets) g.push_back(zeros_like(n->parameters()));
    return g;
}

}  // namespace

void TrainLoopConfig::validate() const {
    if (max_epochs == 0) throw ConfigError("training: max_epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("training: batch_size must be >= 1");
    optimizer.validate();
}

double mean_loss(std::size_t n, const SampleLossFn& loss) {
    if (n == 0) return 0.0;
    std::vector<double> partial(kChunks, 0.0);
    parallel_for(kChunks, [&](std::size_t c) {
        const std::size_t lo = n * c / kChunks, hi = n * (c + 1) / kChunks;
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) s += loss(i);
        partial[c] = s;
    });
    return std::accumulate(partial.begin(), partial.end(), 0.0) / static_cast<double>(n);
}

TrainLoopResult run_train_loop(const TrainLoopConfig& config, const std::vector<Network*>& nets,
                               std::size_t n_train, std::size_t n_val, const SampleGradFn& sample_grad,
                               const SampleLossFn& val_loss, const std::string& what) {
    config.validate();
    if (n_train == 0) throw InvariantError(what + ": no training samples");

    std::vector<Optimizer> opts(nets.size(), Optimizer(config.optimizer));
    std::vector<std::vector<Tensor>> best;
    for (const Network* n : nets) best.emplace_back(n->parameters().begin(), n->parameters().end());
    double best_loss = INFINITY;

    TrainLoopResult result;
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    std::size_t since_best = 0;

    for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
        Rng rng(Rng::derive(config.seed, 0x5eed0000ULL + epoch));
        rng.shuffle(order);
        double epoch_sum = 0.0;

        for (std::size_t start = 0; start < n_train; start += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, n_train - start);
            std::vector<std::vector<std::vector<Tensor>>> chunk_grads(kChunks);
            std::vector<double> chunk_loss(kChunks, 0.0);
            parallel_for(kChunks, [&](std::size_t c) {
                const std::size_t lo = count * c / kChunks, hi = count * (c + 1) / kChunks;
                if (lo == hi) return;
                auto acc = zero_grads(nets);
                double loss = 0.0;
                for (std::size_t i = lo; i < hi; ++i) loss += sample_grad(order[start + i], acc);
                chunk_grads[c] = std::move(acc);
                chunk_loss[c] = loss;
            });
            auto total = zero_grads(nets);
            double batch_loss = 0.0;
            for (std::size_t c = 0; c < kChunks; ++c) {
                batch_loss += chunk_loss[c];
                if (chunk_grads[c].empty()) continue;
                for (std::size_t k = 0; k < nets.size(); ++k) accumulate(total[k], chunk_grads[c][k]);
            }
            if (!std::isfinite(batch_loss))
                throw NumericError(what + ": training diverged (non-finite loss) at epoch " + std::to_string(epoch));
            epoch_sum += batch_loss;
            for (std::size_t k = 0; k < nets.size(); ++k) {
                scale(total[k], 1.0f / static_cast<float>(count));
                try {
                    opts[k].step(*nets[k], total[k]);
                } catch (const NumericError&) {
                    throw NumericError(what + ": non-finite gradient at epoch " + std::to_string(epoch));
                }
            }
        }
        result.train_loss.push_back(epoch_sum / static_cast<double>(n_train));
        const double v = n_val > 0 ? mean_loss(n_val, val_loss) : result.train_loss.back();
        if (!std::isfinite(v))
            throw NumericError(what + ": training diverged (non-finite validation loss) at epoch " +
                               std::to_string(epoch));
        result.val_loss.push_back(v);

        if (v < best_loss) {
            best_loss = v;
            result.best_epoch = epoch;
            since_best = 0;
            for (std::size_t k = 0; k < nets.size(); ++k) {
                auto p = nets[k]->parameters();
                best[k].assign(p.begin(), p.end());
            }
        } else if (++since_best >= config.patience && config.patience > 0) {
            result.stopped_early = true;
            break;
        }
    }
    for (std::size_t k = 0; k < nets.size(); ++k) {
        auto dst = nets[k]->mutable_parameters();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = best[k][i];
    }
    return result;
}

}  // namespace dml
