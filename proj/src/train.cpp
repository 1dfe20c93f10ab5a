#include "snl/train.hpp"

#include <cmath>
#include <numeric>

namespace snl {

template <typename T>
void sgd_update(DenseArray<T>& theta, DenseArray<T>& velocity, const DenseArray<T>& grad, const SgdConfig& opt) {
    require_same_shape(theta, grad, "sgd_update");
    require_same_shape(theta, velocity, "sgd_update");
    const T mu = static_cast<T>(opt.momentum), wd = static_cast<T>(opt.weight_decay), lr = static_cast<T>(opt.lr);
    for (std::size_t i = 0; i < theta.size(); ++i) {
        velocity[i] = mu * velocity[i] + grad[i] + wd * theta[i];
        theta[i] -= lr * velocity[i];
    }
}

TrainState make_train_state(BackboneParams<float> params, std::uint64_t seed, OptimConfig schedule) {
    TrainState s;
    s.velocity = zeros_like(params);
    s.params = std::move(params);
    s.seed = seed;
    s.schedule = std::move(schedule);
    return s;
}

void sgd_step(TrainState& state, const BackboneParams<float>& grads, const SgdConfig& opt) {
    for_each_param<float>(grads, [](const std::string& name, const ArrayF& g) {
        if (!all_finite(g)) throw NumericError("non-finite gradient in " + name);
    });
    std::vector<ArrayF*> velocity;
    for_each_param<float>(state.velocity, [&](const std::string&, ArrayF& v) { velocity.push_back(&v); });
    std::vector<const ArrayF*> g;
    for_each_param<float>(grads, [&](const std::string&, const ArrayF& t) { g.push_back(&t); });
    std::size_t i = 0;
    for_each_param<float>(state.params, [&](const std::string& name, ArrayF& theta) {
        if (i >= g.size()) throw DimensionError("sgd_step: gradient set is missing " + name);
        sgd_update(theta, *velocity[i], *g[i], opt);
        ++i;
    });
    ++state.step;
}

CrossEntropy cross_entropy(const ArrayF& logits, std::span<const std::uint32_t> labels) {
    require_rank2(logits, "cross_entropy");
    const std::size_t b = logits.rows(), k = logits.cols();
    if (labels.size() != b) throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) + " rows");
    CrossEntropy out;
    out.per_sample.resize(b);
    out.grad = ArrayF({b, k});
    double total = 0;
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] >= k) throw DimensionError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
        double peak = logits(i, 0);
        for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, static_cast<double>(logits(i, j)));
        double sum = 0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(logits(i, j)) - peak);
        const double lse = peak + std::log(sum);
        out.per_sample[i] = lse - logits(i, labels[i]);
        total += out.per_sample[i];
        for (std::size_t j = 0; j < k; ++j) {
            const double p = std::exp(static_cast<double>(logits(i, j)) - lse);
            out.grad(i, j) = static_cast<float>((p - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(b));
        }
    }
    out.mean = total / static_cast<double>(b);
    return out;
}

template <typename T>
double evaluate_topk(const DenseArray<T>& logits, std::span<const std::uint32_t> labels, std::size_t k) {
    require_rank2(logits, "evaluate_topk");
    const std::size_t classes = logits.cols();
    if (k < 1 || k > classes)
        throw DimensionError("evaluate_topk: k = " + std::to_string(k) + " must be in [1, " + std::to_string(classes) + "]");
    if (labels.size() != logits.rows()) throw DimensionError("evaluate_topk: label count does not match rows");
    if (labels.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const std::size_t y = labels[i];
        if (y >= classes) throw DimensionError("evaluate_topk: label out of range");
        const T target = logits(i, y);
        std::size_t ahead = 0;
        for (std::size_t j = 0; j < classes; ++j)
            if (logits(i, j) > target || (logits(i, j) == target && j < y)) ++ahead;
        hits += ahead < k;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::pair<double, double> evaluate(const BackboneParams<float>& params, const BackboneConfig& cfg, const Dataset& data,
                                   std::size_t batch) {
    std::size_t top1 = 0, top5 = 0;
    const std::size_t k5 = std::min<std::size_t>(5, cfg.classes);
    for (std::size_t start = 0; start < data.size(); start += batch) {
        const std::size_t end = std::min(data.size(), start + batch);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto out = backbone_forward(data.batch(idx), params, cfg, BnMode::Inference);
        const std::span<const std::uint32_t> labels(data.labels.data() + start, end - start);
        // Counts, not fractions, so batch boundaries cannot change the result.
        top1 += static_cast<std::size_t>(std::lround(evaluate_topk(out.logits, labels, 1) * static_cast<double>(idx.size())));
        top5 += static_cast<std::size_t>(std::lround(evaluate_topk(out.logits, labels, k5) * static_cast<double>(idx.size())));
    }
    const double n = static_cast<double>(data.size());
    return {static_cast<double>(top1) / n, static_cast<double>(top5) / n};
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kMetaVersion = 1;

Array encode_meta(const BackboneConfig& cfg) {
    std::vector<double> m(17, 0.0);
    m[0] = kMetaVersion;
    m[1] = cfg.block ? 1 : 0;
    if (cfg.block) {
        const BlockConfig& b = *cfg.block;
        m[2] = static_cast<double>(b.variant);
        m[3] = static_cast<double>(b.c1);
        m[4] = static_cast<double>(b.cs);
        m[5] = static_cast<double>(b.kernel);
        m[6] = static_cast<double>(b.order);
        m[14] = b.batch_norm ? 1 : 0;
        m[15] = b.kernel_scale;
        m[16] = b.allow_indefinite ? 1 : 0;
    }
    m[7] = static_cast<double>(cfg.stage);
    m[8] = static_cast<double>(cfg.image);
    m[9] = static_cast<double>(cfg.in_channels);
    m[10] = static_cast<double>(cfg.classes);
    for (std::size_t s = 0; s < 3; ++s) m[11 + s] = static_cast<double>(cfg.widths[s]);
    const std::size_t len = m.size();
    return Array({len}, std::move(m));
}

BackboneConfig decode_meta(const Array& m) {
    if (m.size() != 17 || m[0] != kMetaVersion) throw FormatError("checkpoint: unrecognised meta.config");
    auto count = [&](std::size_t i) { return static_cast<std::size_t>(m[i]); };
    BackboneConfig cfg;
    cfg.stage = count(7);
    cfg.image = count(8);
    cfg.in_channels = count(9);
    cfg.classes = count(10);
    for (std::size_t s = 0; s < 3; ++s) cfg.widths[s] = count(11 + s);
    if (m[1] != 0) {
        if (m[2] < 0 || m[2] > static_cast<double>(Variant::SNL) || m[5] < 0 || m[5] > static_cast<double>(Kernel::EmbeddedGaussian))
            throw FormatError("checkpoint: meta.config has an unknown variant or kernel code");
        BlockConfig b = BlockConfig::make(static_cast<Variant>(count(2)), count(3), count(4));
        b.kernel = static_cast<Kernel>(count(5));
        b.order = count(6);
        b.batch_norm = m[14] != 0;
        b.kernel_scale = m[15];
        b.allow_indefinite = m[16] != 0;
        cfg.block = b;
    }
    return cfg.resolved();
}

} // namespace

Checkpoint model_checkpoint(const BackboneParams<float>& params, const BackboneConfig& cfg) {
    Checkpoint ck;
    ck.add("meta.config", encode_meta(cfg.resolved()));
    for_each_param<float>(params, [&](const std::string& name, const ArrayF& t) { ck.add(name, t); });
    auto copy = params;
    for_each_buffer<float>(copy, [&](const std::string& name, ArrayF& t) { ck.add(name, t); });
    return ck;
}

RestoredModel restore_model(const Checkpoint& ck) {
    RestoredModel out;
    out.config = decode_meta(ck.get("meta.config"));
    Rng rng(0);
    out.params = init_backbone<float>(out.config, rng);
    auto load = [&](const std::string& name, ArrayF& t) {
        ArrayF stored = ck.get_f32(name);
        if (stored.shape() != t.shape())
            throw FormatError("checkpoint entry " + name + " has shape " + shape_string(stored.shape()) + ", expected " +
                              shape_string(t.shape()));
        t = std::move(stored);
    };
    for_each_param<float>(out.params, load);
    for_each_buffer<float>(out.params, load);
    return out;
}

// ---------------------------------------------------------------------------

TrainResult train(const ExperimentConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    const BackboneConfig bb = cfg.backbone();
    DirectoryLock lock(cfg.output_dir);

    Rng init_rng(derive_seed(cfg.seed, 1));
    TrainState state = make_train_state(init_backbone<float>(bb, init_rng), cfg.seed, cfg.optim);
    const Dataset train_set = generate_synth(cfg.task, cfg.train_size, derive_seed(cfg.seed, 2));
    const Dataset test_set = generate_synth(cfg.task, cfg.test_size, derive_seed(cfg.seed, 3));
    Rng order_rng(derive_seed(cfg.seed, 4));

    TrainResult result;
    result.metrics_path = cfg.output_dir / "metrics.csv";
    result.checkpoint_path = cfg.output_dir / "checkpoint.snl1";
    atomic_write(cfg.output_dir / "config.json", config_to_json(cfg));
    atomic_write(result.metrics_path, format_metrics_csv(result.history));
    save_checkpoint(result.checkpoint_path, model_checkpoint(state.params, bb));

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t n = train_set.size();

    for (std::size_t epoch = 1; epoch <= cfg.optim.epochs; ++epoch) {
        const double lr = cfg.optim.lr_at(epoch);
        double loss_sum = 0;
        if (cfg.optim.freeze) {
            // Fixed sample order and inference-mode statistics: the loss is a
            // pure function of the (unchanging) parameters.
            std::vector<double> per_sample(n);
            for (std::size_t start = 0; start < n; start += cfg.optim.batch_size) {
                const std::size_t end = std::min(n, start + cfg.optim.batch_size);
                std::vector<std::size_t> idx(end - start);
                std::iota(idx.begin(), idx.end(), start);
                const auto out = backbone_forward(train_set.batch(idx), state.params, bb, BnMode::Inference);
                const auto ce = cross_entropy(out.logits, {train_set.labels.data() + start, end - start});
                std::copy(ce.per_sample.begin(), ce.per_sample.end(), per_sample.begin() + static_cast<long>(start));
            }
            for (double l : per_sample) loss_sum += l;
            if (hooks.on_first_batch) hooks.on_first_batch(epoch, per_sample.front());
        } else {
            order_rng.shuffle(order.begin(), order.end());
            const SgdConfig opt{lr, cfg.optim.momentum, cfg.optim.weight_decay};
            for (std::size_t start = 0; start < n; start += cfg.optim.batch_size) {
                const std::size_t end = std::min(n, start + cfg.optim.batch_size);
                std::vector<std::size_t> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
                std::vector<std::uint32_t> labels;
                for (auto i : idx) labels.push_back(train_set.labels[i]);
                auto out = backbone_forward(train_set.batch(idx), state.params, bb, BnMode::Train);
                const auto ce = cross_entropy(out.logits, labels);
                if (!std::isfinite(ce.mean))
                    throw TrainingAborted("non-finite loss at epoch " + std::to_string(epoch) + ", sample offset " +
                                          std::to_string(start) + "; last good checkpoint kept at " +
                                          result.checkpoint_path.string());
                if (start == 0 && hooks.on_first_batch) hooks.on_first_batch(epoch, ce.mean);
                loss_sum += ce.mean * static_cast<double>(idx.size());
                const auto grads = backbone_backward(ce.grad, state.params, bb, out.cache);
                try {
                    sgd_step(state, grads, opt);
                } catch (const NumericError& e) {
                    throw TrainingAborted(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                          "; last good checkpoint kept at " + result.checkpoint_path.string());
                }
                update_backbone_stats(state.params, out.cache);
            }
        }
        const auto [top1, top5] = evaluate(state.params, bb, test_set);
        const EpochMetrics m{epoch, lr, loss_sum / static_cast<double>(n), top1, top5};
        result.history.push_back(m);
        atomic_write(result.metrics_path, format_metrics_csv(result.history));
        save_checkpoint(result.checkpoint_path, model_checkpoint(state.params, bb));
        if (hooks.on_epoch) hooks.on_epoch(m);
    }
    result.params = std::move(state.params);
    return result;
}

template void sgd_update(ArrayF&, ArrayF&, const ArrayF&, const SgdConfig&);
template void sgd_update(Array&, Array&, const Array&, const SgdConfig&);
template double evaluate_topk(const ArrayF&, std::span<const std::uint32_t>, std::size_t);
template double evaluate_topk(const Array&, std::span<const std::uint32_t>, std::size_t);

} // namespace snl
