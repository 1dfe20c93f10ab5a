#pragma once

#include "snl/batch_norm.hpp"
#include "snl/blocks.hpp"
#include "snl/conv.hpp"

#include <array>
#include <functional>
#include <optional>
#include <string>

namespace snl {

/// Three stride-2 3×3 conv stages (conv → BN → ReLU), an optional nonlocal
/// block after one of them, global average pooling and a linear head.
struct BackboneConfig {
    std::size_t image = 24;     ///< square input side
    std::size_t in_channels = 1;
    std::array<std::size_t, 3> widths{16, 32, 64};
    std::size_t classes = 10;
    std::optional<BlockConfig> block; ///< c1, h and w are filled in by resolve()
    std::size_t stage = 1;            ///< block goes after this stage (1..3)

    /// Spatial side of the feature map leaving `stage` (1-based).
    std::size_t stage_extent(std::size_t stage) const;
    /// Fills block c1/h/w from the insertion point and validates everything.
    BackboneConfig resolved() const;
};

template <typename T>
struct ConvStage {
    DenseArray<T> w; ///< (9·C_in)×C_out
    BatchNorm<T> bn;
};

template <typename T>
struct BackboneParams {
    std::array<ConvStage<T>, 3> stages;
    std::optional<BlockParams<T>> block;
    DenseArray<T> head_w; ///< C_last×classes
    DenseArray<T> head_b; ///< classes

    template <typename U>
    BackboneParams<U> cast() const;
};

template <typename T>
BackboneParams<T> init_backbone(const BackboneConfig& cfg, Rng& rng);

/// Same structure, every tensor zero. Used for gradients and momentum.
template <typename T>
BackboneParams<T> zeros_like(const BackboneParams<T>& p);

/// Trainable tensors in a fixed order with stable names.
template <typename T>
void for_each_param(BackboneParams<T>& p, const std::function<void(const std::string&, DenseArray<T>&)>& fn);
template <typename T>
void for_each_param(const BackboneParams<T>& p,
                    const std::function<void(const std::string&, const DenseArray<T>&)>& fn);

/// Batch-norm running statistics (saved, not trained).
template <typename T>
void for_each_buffer(BackboneParams<T>& p, const std::function<void(const std::string&, DenseArray<T>&)>& fn);

template <typename T>
struct BackboneCache {
    std::array<ConvCache<T>, 3> conv;
    std::array<BatchNormCache<T>, 3> bn;
    std::array<DenseArray<T>, 3> activation; ///< post-ReLU output of each stage
    std::optional<BlockCache<T>> block;
    Shape pooled_from;
    DenseArray<T> pooled;
};

template <typename T>
struct BackboneOutput {
    DenseArray<T> logits; ///< B×classes
    BackboneCache<T> cache;
    std::vector<BasicAffinity<T>> attention; ///< filled when requested and a block is present
};

/// x is B×H×W×C_in. Train mode uses batch statistics everywhere; Inference
/// uses the running estimates.
template <typename T>
BackboneOutput<T> backbone_forward(const DenseArray<T>& x, const BackboneParams<T>& p, const BackboneConfig& cfg,
                                   BnMode mode, bool keep_attention = false);

template <typename T>
BackboneParams<T> backbone_backward(const DenseArray<T>& grad_logits, const BackboneParams<T>& p,
                                    const BackboneConfig& cfg, const BackboneCache<T>& cache);

/// Folds the batch statistics of a Train-mode forward into every BN layer.
template <typename T>
void update_backbone_stats(BackboneParams<T>& p, const BackboneCache<T>& cache);

} // namespace snl
