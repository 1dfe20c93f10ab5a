#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace snl::verify {

// Randomised self-checks, grouped into suites. Every trial draws its instance
// from Rng(derive_seed(seed ^ check hash, trial)), so a failing trial can be
// replayed from (check, seed, trial) alone.

enum class Suite { Oracle, Reductions, Gradients, Invariants };

std::string_view suite_name(Suite s);
std::optional<Suite> parse_suite(std::string_view name);
const std::vector<Suite>& all_suites();

struct Options {
    std::uint64_t seed = 1;
    std::size_t trials = 0; ///< 0: each check's own count
    bool stop_at_first_failure = false;
};

struct Failure {
    std::string check;
    std::uint64_t seed = 0;
    std::size_t trial = 0;
    double error = 0;
    std::string detail; ///< instance description, JSON object
};

struct CheckResult {
    std::string name;
    std::string description;
    std::size_t trials = 0;
    std::size_t failures = 0;
    double worst = 0;     ///< largest error metric seen
    double tolerance = 0;
    double seconds = 0;
    std::optional<Failure> first_failure;
    bool passed() const { return failures == 0 && trials > 0; }
};

struct SuiteResult {
    Suite suite;
    std::vector<CheckResult> checks;
    double seconds = 0;
    bool passed() const;
    const CheckResult* find(std::string_view check) const;
};

/// Names of the checks a suite runs, in order.
std::vector<std::string> check_names(Suite s);

SuiteResult run_suite(Suite s, const Options& opts = {});

/// One trial of one check, as recorded in a Failure.
struct ReplayResult {
    double error = 0;
    double tolerance = 0;
    bool passed = false;
    std::string detail;
};
ReplayResult replay(std::string_view check, std::uint64_t seed, std::size_t trial);

/// Fixed-width pass/fail table.
std::string format_report(const std::vector<SuiteResult>& results);

/// Writes `<dir>/failure-<check>.json` for every failing check and returns
/// the paths written.
std::vector<std::filesystem::path> write_failures(const SuiteResult& result, const std::filesystem::path& dir);

/// Reads a failure file back into (check, seed, trial).
Failure read_failure(const std::filesystem::path& path);

} // namespace snl::verify
