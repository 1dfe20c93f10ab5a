#include "snl/synth.hpp"

#include "snl/blocks.hpp"
#include "snl/random.hpp"

#include <numeric>

namespace snl {

void SynthTask::validate() const {
    if (classes < 2) throw ConfigError("task: need at least two classes");
    if (!(match_rate >= 0.0 && match_rate <= 1.0)) throw ConfigError("task: match_rate must be in [0, 1]");
    if (motif_size < 1) throw ConfigError("task: motif_size must be positive");
    if (image < 3 * motif_size)
        throw ConfigError("task: image " + std::to_string(image) + " is too small for two bands of motif size " +
                          std::to_string(motif_size));
    if (!(noise >= 0.0)) throw ConfigError("task: noise must be non-negative");
}

ArrayF Dataset::batch(const std::vector<std::size_t>& indices) const {
    const std::size_t px = image * image;
    ArrayF out({indices.size(), image, image, 1});
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy(pixels.begin() + indices[i] * px, pixels.begin() + (indices[i] + 1) * px, out.data() + i * px);
    return out;
}

std::vector<std::vector<float>> motif_bank(const SynthTask& task) {
    const std::size_t len = task.motif_size * task.motif_size;
    // Random ±1 patterns; accept one only if it differs from every accepted
    // pattern and its negation in at least a quarter of the entries.
    const std::size_t min_distance = std::max<std::size_t>(1, len / 4);
    Rng rng(task.bank_seed);
    std::vector<std::vector<float>> bank;
    for (std::size_t attempts = 0; bank.size() < task.classes; ++attempts) {
        if (attempts > 100000) throw ConfigError("task: cannot find separated motifs of this size");
        std::vector<float> m(len);
        for (auto& v : m) v = rng.below(2) ? 1.0f : -1.0f;
        bool ok = true;
        for (const auto& other : bank) {
            std::size_t diff = 0;
            for (std::size_t i = 0; i < len; ++i) diff += m[i] != other[i];
            if (diff < min_distance || len - diff < min_distance) ok = false;
        }
        if (ok) bank.push_back(std::move(m));
    }
    return bank;
}

std::vector<float> render(const SynthTask& task, const SynthSample& s, const std::vector<std::vector<float>>& bank,
                          Rng& rng) {
    const std::size_t side = task.image, k = task.motif_size;
    std::vector<float> img(side * side);
    for (auto& v : img) v = static_cast<float>(rng.normal(0.0, task.noise));
    auto stamp = [&](const std::vector<float>& m, const std::size_t* at) {
        for (std::size_t y = 0; y < k; ++y)
            for (std::size_t x = 0; x < k; ++x) img[(at[0] + y) * side + at[1] + x] = m[y * k + x];
    };
    stamp(bank.at(s.a), s.offset_a);
    stamp(bank.at(s.b), s.offset_b);
    return img;
}

Dataset generate_synth(const SynthTask& task, std::size_t n, std::uint64_t seed) {
    task.validate();
    if (n == 0) throw ConfigError("generate_synth: need at least one sample");
    const auto bank = motif_bank(task);
    Rng rng(seed);
    const std::size_t side = task.image, k = task.motif_size, band = task.band();

    std::vector<SynthSample> layout(n);
    for (std::size_t i = 0; i < n; ++i) {
        SynthSample& s = layout[i];
        s.label = i % task.classes;
        // Mismatched pairs with a + b ≡ label: a ranges over the residues
        // with 2a ≢ label. Matching is forced when there are none.
        std::vector<std::size_t> mismatched;
        for (std::size_t a = 0; a < task.classes; ++a)
            if ((2 * a) % task.classes != s.label) mismatched.push_back(a);
        if (mismatched.empty() || rng.uniform() < task.match_rate) {
            s.a = s.b = s.label;
        } else {
            s.a = mismatched[rng.below(mismatched.size())];
            s.b = (s.label + task.classes - s.a) % task.classes;
        }
        s.orientation = rng.below(4);
        const std::size_t near = rng.below(band - k + 1);
        const std::size_t far = side - band + rng.below(band - k + 1);
        const std::size_t along_a = rng.below(side - k + 1);
        const std::size_t along_b = rng.below(side - k + 1);
        const bool flip = s.orientation % 2 == 1;
        const std::size_t first = flip ? far : near, second = flip ? near : far;
        if (s.orientation < 2) {
            s.offset_a[0] = first, s.offset_a[1] = along_a;
            s.offset_b[0] = second, s.offset_b[1] = along_b;
        } else {
            s.offset_a[0] = along_a, s.offset_a[1] = first;
            s.offset_b[0] = along_b, s.offset_b[1] = second;
        }
    }
    rng.shuffle(layout.begin(), layout.end());

    Dataset d;
    d.image = side;
    d.pixels.reserve(n * side * side);
    for (const auto& s : layout) {
        const auto img = render(task, s, bank, rng);
        d.pixels.insert(d.pixels.end(), img.begin(), img.end());
        d.labels.push_back(static_cast<std::uint32_t>(s.label));
    }
    d.layout = std::move(layout);
    return d;
}

} // namespace snl
