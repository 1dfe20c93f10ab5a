#pragma once

#include "snl/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace snl {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// see either the old or the new content, never a torn file.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// Exclusive claim on an output directory via a `.lock` file holding the
/// owner's pid. A lock left by a process that no longer exists is taken over.
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    std::filesystem::path file_;
};

class LockError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// SNL1 tensor container
//
//   "SNL1"  u32 version  u32 count
//   per entry: u16 name length, name bytes, u8 dtype (0 f64, 1 f32),
//              u8 rank, rank × u32 dims, payload
//
// All integers and payloads little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorEntry {
    std::string name;
    std::variant<Array, ArrayF> value;
};

struct Checkpoint {
    std::vector<TensorEntry> entries;

    void add(std::string name, Array value);
    void add(std::string name, ArrayF value);
    const TensorEntry* find(std::string_view name) const;
    /// Entry converted to f64 (f32 entries widen exactly).
    Array get(std::string_view name) const;
    ArrayF get_f32(std::string_view name) const;
};

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Metrics CSV: header `epoch,lr,train_loss,top1,top5`, one row per epoch.

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double top1 = 0;
    double top5 = 0;
};

inline constexpr std::string_view kMetricsHeader = "epoch,lr,train_loss,top1,top5";

std::string format_metrics_csv(const std::vector<EpochMetrics>& rows);
std::vector<EpochMetrics> parse_metrics_csv(const std::string& text);

// ---------------------------------------------------------------------------
// Heatmaps

/// Min-max scales `values` (h·w, row-major) to 0..255. A constant input maps
/// to flat gray (128).
std::vector<std::uint8_t> heatmap_pixels(std::span<const double> values);

/// Binary greymap: "P5\n<w> <h>\n255\n" followed by h·w bytes.
std::string encode_pgm(std::span<const std::uint8_t> pixels, std::size_t h, std::size_t w);

struct Pgm {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> pixels;
};
Pgm decode_pgm(std::string_view bytes);

/// CSV with h rows of w raw values each, full round-trip precision.
std::string format_grid_csv(std::span<const double> values, std::size_t h, std::size_t w);

} // namespace snl
