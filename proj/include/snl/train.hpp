#pragma once

#include "snl/config.hpp"
#include "snl/io.hpp"
#include "snl/model.hpp"
#include "snl/synth.hpp"

#include <functional>

namespace snl {

struct SgdConfig {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
};

/// v ← μv + g + wd·θ; θ ← θ − lr·v. Weight decay is folded into the
/// momentum buffer (coupled L2), applied to every trainable tensor.
template <typename T>
void sgd_update(DenseArray<T>& theta, DenseArray<T>& velocity, const DenseArray<T>& grad, const SgdConfig& opt);

struct TrainState {
    BackboneParams<float> params;
    BackboneParams<float> velocity; ///< same shapes as params
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    OptimConfig schedule;
};

TrainState make_train_state(BackboneParams<float> params, std::uint64_t seed, OptimConfig schedule);

/// One SGD step over every trainable tensor. All gradients are checked for
/// finiteness first; a non-finite one aborts with the tensor's name and
/// leaves the state untouched.
void sgd_step(TrainState& state, const BackboneParams<float>& grads, const SgdConfig& opt);

struct CrossEntropy {
    double mean = 0;
    std::vector<double> per_sample;
    ArrayF grad; ///< d mean / d logits
};

/// Softmax cross-entropy with log-sum-exp; losses accumulated in f64.
CrossEntropy cross_entropy(const ArrayF& logits, std::span<const std::uint32_t> labels);

/// Fraction of rows whose label is among the k largest logits. A tie with
/// the label's logit counts against the label only when the competing class
/// has a lower index.
template <typename T>
double evaluate_topk(const DenseArray<T>& logits, std::span<const std::uint32_t> labels, std::size_t k);

class TrainingAborted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    BackboneParams<float> params;
    std::filesystem::path metrics_path;
    std::filesystem::path checkpoint_path;
};

struct TrainHooks {
    std::function<void(const EpochMetrics&)> on_epoch;
    /// Called with each first-batch loss of an epoch (before the update).
    std::function<void(std::size_t epoch, double loss)> on_first_batch;
};

/// Full run: data generation, training, per-epoch evaluation on the test
/// split, metrics.csv and checkpoint.snl1 in cfg.output_dir (rewritten
/// atomically after every epoch; the initial parameters are saved before the
/// first). Deterministic for a fixed config.
TrainResult train(const ExperimentConfig& cfg, const TrainHooks& hooks = {});

/// Top-1 / top-5 of params on a dataset, inference-mode batch norm.
std::pair<double, double> evaluate(const BackboneParams<float>& params, const BackboneConfig& cfg, const Dataset& data,
                                   std::size_t batch = 250);

// Checkpoint layout for trained models: every trainable tensor and BN buffer
// by name, plus "meta.config" describing the architecture.
Checkpoint model_checkpoint(const BackboneParams<float>& params, const BackboneConfig& cfg);

struct RestoredModel {
    BackboneConfig config;
    BackboneParams<float> params;
};
RestoredModel restore_model(const Checkpoint& ck);


} // namespace snl
