#include "snl/io.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace snl {

namespace fs = std::filesystem;

void atomic_write(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw std::runtime_error("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

DirectoryLock::DirectoryLock(const fs::path& dir) : file_(dir / ".lock") {
    fs::create_directories(dir);
    for (int attempt = 0; attempt < 2; ++attempt) {
        const int fd = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd >= 0) {
            const std::string pid = std::to_string(::getpid()) + "\n";
            [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
            ::close(fd);
            return;
        }
        if (errno != EEXIST) throw LockError("cannot create " + file_.string() + ": " + std::strerror(errno));
        long owner = 0;
        {
            std::ifstream in(file_);
            in >> owner;
        }
        const bool alive = owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM);
        if (alive) throw LockError("output directory " + dir.string() + " is in use by process " + std::to_string(owner));
        fs::remove(file_);
    }
    throw LockError("cannot lock output directory " + dir.string());
}

DirectoryLock::~DirectoryLock() {
    std::error_code ec;
    fs::remove(file_, ec);
}

// ---------------------------------------------------------------------------

void Checkpoint::add(std::string name, Array value) { entries.push_back({std::move(name), std::move(value)}); }

void Checkpoint::add(std::string name, ArrayF value) { entries.push_back({std::move(name), std::move(value)}); }

const TensorEntry* Checkpoint::find(std::string_view name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

Array Checkpoint::get(std::string_view name) const {
    const TensorEntry* e = find(name);
    if (!e) throw FormatError("checkpoint has no entry \"" + std::string(name) + "\"");
    if (const auto* d = std::get_if<Array>(&e->value)) return *d;
    return std::get<ArrayF>(e->value).cast<double>();
}

ArrayF Checkpoint::get_f32(std::string_view name) const {
    const TensorEntry* e = find(name);
    if (!e) throw FormatError("checkpoint has no entry \"" + std::string(name) + "\"");
    if (const auto* f = std::get_if<ArrayF>(&e->value)) return *f;
    return std::get<Array>(e->value).cast<float>();
}

namespace {

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Cursor {
public:
    explicit Cursor(std::string_view bytes) : bytes_(bytes) {}

    template <typename U>
    U take() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    std::string_view take_bytes(std::size_t n) {
        need(n);
        auto out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (remaining() < n)
            throw FormatError("checkpoint truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                              " more)");
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

template <typename T, typename Bits>
void put_payload(std::string& out, const DenseArray<T>& a) {
    for (T v : a.values()) {
        Bits bits;
        std::memcpy(&bits, &v, sizeof v);
        put_le(out, bits);
    }
}

template <typename T, typename Bits>
DenseArray<T> take_payload(Cursor& c, Shape shape) {
    DenseArray<T> a(std::move(shape));
    for (auto& v : a.values()) {
        const Bits bits = c.take<Bits>();
        std::memcpy(&v, &bits, sizeof v);
    }
    return a;
}

} // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
    std::string out = "SNL1";
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.entries.size()));
    for (const auto& e : ck.entries) {
        if (e.name.size() > 0xffff) throw FormatError("entry name too long: " + e.name.substr(0, 32) + "...");
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
        out += e.name;
        const bool is_f64 = std::holds_alternative<Array>(e.value);
        const Shape& shape = is_f64 ? std::get<Array>(e.value).shape() : std::get<ArrayF>(e.value).shape();
        out.push_back(static_cast<char>(is_f64 ? 0 : 1));
        out.push_back(static_cast<char>(shape.size()));
        for (auto d : shape) {
            if (d > 0xffffffffULL) throw FormatError("dimension too large in " + e.name);
            put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        }
        if (is_f64)
            put_payload<double, std::uint64_t>(out, std::get<Array>(e.value));
        else
            put_payload<float, std::uint32_t>(out, std::get<ArrayF>(e.value));
    }
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
    Cursor c(bytes);
    if (c.take_bytes(4) != "SNL1") throw FormatError("not an SNL1 file (bad magic)");
    const auto version = c.take<std::uint32_t>();
    if (version != kCheckpointVersion) throw FormatError("unsupported SNL1 version " + std::to_string(version));
    const auto count = c.take<std::uint32_t>();
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = c.take<std::uint16_t>();
        std::string name(c.take_bytes(len));
        const auto dtype = c.take<std::uint8_t>();
        const auto rank = c.take<std::uint8_t>();
        if (dtype > 1) throw FormatError("entry " + name + ": unknown dtype code " + std::to_string(dtype));
        if (rank < 1 || rank > 4) throw FormatError("entry " + name + ": unsupported rank " + std::to_string(rank));
        Shape shape;
        std::uint64_t elements = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            shape.push_back(c.take<std::uint32_t>());
            elements *= shape.back();
            if (elements > c.remaining()) throw FormatError("entry " + name + ": payload larger than the file");
        }
        if (elements * (dtype == 0 ? 8 : 4) > c.remaining()) throw FormatError("entry " + name + ": payload truncated");
        if (dtype == 0)
            ck.add(std::move(name), take_payload<double, std::uint64_t>(c, std::move(shape)));
        else
            ck.add(std::move(name), take_payload<float, std::uint32_t>(c, std::move(shape)));
    }
    if (c.remaining() != 0) throw FormatError(std::to_string(c.remaining()) + " trailing bytes after the last entry");
    return ck;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ck) { atomic_write(path, serialize_checkpoint(ck)); }

Checkpoint load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw std::runtime_error("no such file: " + path.string());
    return parse_checkpoint(read_file(path));
}

// ---------------------------------------------------------------------------

std::string format_metrics_csv(const std::vector<EpochMetrics>& rows) {
    std::string out(kMetricsHeader);
    out += '\n';
    char line[160];
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%zu,%.6g,%.6f,%.4f,%.4f\n", r.epoch, r.lr, r.train_loss, r.top1, r.top5);
        out += line;
    }
    return out;
}

std::vector<EpochMetrics> parse_metrics_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError("metrics CSV: unexpected header");
    std::vector<EpochMetrics> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        EpochMetrics m;
        if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf", &m.epoch, &m.lr, &m.train_loss, &m.top1, &m.top5) != 5)
            throw FormatError("metrics CSV: bad row \"" + line + "\"");
        rows.push_back(m);
    }
    return rows;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> heatmap_pixels(std::span<const double> values) {
    std::vector<std::uint8_t> px(values.size(), 128);
    if (values.empty()) return px;
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) return px;
    for (std::size_t i = 0; i < values.size(); ++i)
        px[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - lo) / (hi - lo)));
    return px;
}

std::string encode_pgm(std::span<const std::uint8_t> pixels, std::size_t h, std::size_t w) {
    if (pixels.size() != h * w)
        throw DimensionError("encode_pgm: " + std::to_string(pixels.size()) + " pixels for " + std::to_string(h) + "x" +
                             std::to_string(w));
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
    return out;
}

Pgm decode_pgm(std::string_view bytes) {
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return std::string(bytes.substr(start, pos - start));
    };
    if (token() != "P5") throw FormatError("not a binary PGM");
    Pgm p;
    p.w = std::stoul(token());
    p.h = std::stoul(token());
    if (token() != "255") throw FormatError("PGM: only maxval 255 is supported");
    ++pos; // single whitespace before the raster
    if (bytes.size() - pos != p.h * p.w) throw FormatError("PGM: raster size does not match the header");
    p.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.end());
    return p;
}

std::string format_grid_csv(std::span<const double> values, std::size_t h, std::size_t w) {
    if (values.size() != h * w) throw DimensionError("format_grid_csv: size does not match grid");
    std::string out;
    char buf[40];
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            std::snprintf(buf, sizeof buf, "%.17g", values[y * w + x]);
            if (x) out += ',';
            out += buf;
        }
        out += '\n';
    }
    return out;
}

} // namespace snl
