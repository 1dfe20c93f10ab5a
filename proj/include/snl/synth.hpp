#pragma once

#include "snl/tensor.hpp"

#include <cstdint>
#include <vector>

namespace snl {

/// Two-motif task. Each image holds two small ±1 patterns from a bank of
/// `classes` motifs, placed in bands on opposite sides of the image over
/// Gaussian noise. When the motifs match the label is that motif; when they
/// differ it is (a + b) mod classes. Either motif alone is consistent with
/// several labels, so the two have to be related across the image.
struct SynthTask {
    std::size_t image = 24;
    std::size_t classes = 10;   ///< also the size of the motif bank
    std::size_t motif_size = 5;
    double noise = 0.3;         ///< background standard deviation
    double match_rate = 0.5;    ///< fraction of samples whose two motifs match
    std::uint64_t bank_seed = 0x5eedULL; ///< fixes the motif bank, independent of the sample seed

    void validate() const;
    /// Width of each placement band: a third of the image. Units whose
    /// receptive field is narrower than image − band can never see both.
    std::size_t band() const { return image / 3; }
    /// The label rule; symmetric in its arguments.
    std::size_t label_of(std::size_t a, std::size_t b) const { return a == b ? a : (a + b) % classes; }
};

struct SynthSample {
    std::size_t a = 0; ///< motif in the first band
    std::size_t b = 0; ///< motif in the opposite band
    std::size_t label = 0;
    std::size_t orientation = 0; ///< 0 top/bottom, 1 bottom/top, 2 left/right, 3 right/left
    std::size_t offset_a[2]{};   ///< row, col of the first motif
    std::size_t offset_b[2]{};
};

struct Dataset {
    std::size_t image = 0;
    std::vector<float> pixels; ///< n·image·image, row-major per sample
    std::vector<std::uint32_t> labels;
    std::vector<SynthSample> layout;

    std::size_t size() const { return labels.size(); }
    /// B×H×W×1 batch of the given sample indices.
    ArrayF batch(const std::vector<std::size_t>& indices) const;
};

/// The motif bank: `classes` patterns of motif_size², entries ±1, pairwise
/// separated (and separated from each other's negation) in Hamming distance.
std::vector<std::vector<float>> motif_bank(const SynthTask& task);

/// Renders one image for a given layout (noise drawn from rng).
std::vector<float> render(const SynthTask& task, const SynthSample& s, const std::vector<std::vector<float>>& bank,
                          class Rng& rng);

/// n samples with class counts balanced within one, in shuffled order.
Dataset generate_synth(const SynthTask& task, std::size_t n, std::uint64_t seed);

} // namespace snl
