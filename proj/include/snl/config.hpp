#pragma once

#include "snl/blocks.hpp"
#include "snl/model.hpp"
#include "snl/synth.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace snl {

struct OptimConfig {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    std::vector<std::size_t> decay_epochs{15, 25}; ///< lr is multiplied by decay_factor once these many epochs are done
    double decay_factor = 0.1;
    bool freeze = false; ///< evaluate only; parameters never change

    /// Learning rate used during epoch `epoch` (1-based).
    double lr_at(std::size_t epoch) const;
};

/// One training run, as read from a JSON document:
///
///   {
///     "variant": "SNL",          // "none" for the plain backbone, or NL NS A2 CGNL CC SNL
///     "c1": 16,                  // optional; must equal the width of the insertion stage
///     "cs": 8,                   // optional; default c1 / 2
///     "kernel": "embedded-gaussian",  // "dot" | "gaussian" | "embedded-gaussian"
///     "order": 2,                // filter terms (SNL only)
///     "stage": 1,                // block after stage 1, 2 or 3
///     "seed": 1,
///     "output_dir": "run",
///     "task":  { "image_size": 24, "classes": 10, "train_size": 8000, "test_size": 2000,
///                "motif_size": 5, "noise": 0.3, "match_rate": 0.5 },
///     "optim": { "lr": 0.05, "momentum": 0.9, "weight_decay": 1e-4, "epochs": 30,
///                "batch_size": 32, "decay_epochs": [15, 25], "decay_factor": 0.1, "freeze": false }
///   }
///
/// Every key is optional; unknown keys are rejected.
struct ExperimentConfig {
    std::optional<Variant> variant = Variant::SNL;
    std::size_t c1 = 0;
    std::size_t cs = 0;
    std::optional<Kernel> kernel; ///< default: the variant's own kernel
    std::size_t order = 2;
    std::size_t stage = 1;
    SynthTask task;
    std::size_t train_size = 8000;
    std::size_t test_size = 2000;
    OptimConfig optim;
    std::uint64_t seed = 1;
    std::filesystem::path output_dir = "run";

    void validate() const;
    BackboneConfig backbone() const;
};

/// Parse failure pinned to a key (dotted path) and 1-based source line.
class ConfigParseError : public ConfigError {
public:
    ConfigParseError(const std::string& what, std::string key, std::size_t line)
        : ConfigError(what), key_(std::move(key)), line_(line) {}
    const std::string& key() const noexcept { return key_; }
    std::size_t line() const noexcept { return line_; }

private:
    std::string key_;
    std::size_t line_;
};

ExperimentConfig parse_config(const std::string& text);

class FileNotFound : public std::runtime_error {
public:
    explicit FileNotFound(const std::filesystem::path& p)
        : std::runtime_error("no such file: " + p.string()), path_(p) {}
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
};

/// Throws FileNotFound when the path does not exist.
ExperimentConfig load_config(const std::filesystem::path& path);

std::string config_to_json(const ExperimentConfig& cfg);

} // namespace snl
