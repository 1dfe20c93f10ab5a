#include "snl/config.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace snl {

using nlohmann::json;

double OptimConfig::lr_at(std::size_t epoch) const {
    double rate = lr;
    for (auto e : decay_epochs)
        if (epoch > e) rate *= decay_factor;
    return rate;
}

void ExperimentConfig::validate() const {
    task.validate();
    if (train_size < 1 || test_size < 1) throw ConfigError("config: train_size and test_size must be positive");
    if (optim.batch_size < 1) throw ConfigError("config: batch_size must be positive");
    (void)backbone();
}

BackboneConfig ExperimentConfig::backbone() const {
    BackboneConfig bb;
    bb.image = task.image;
    bb.classes = task.classes;
    bb.stage = stage;
    if (variant) {
        if (stage < 1 || stage > 3) throw ConfigError("config: stage must be 1, 2 or 3");
        const std::size_t width = bb.widths[stage - 1];
        BlockConfig bc = BlockConfig::make(*variant, c1, cs != 0 ? cs : std::max<std::size_t>(1, width / 2));
        if (kernel) bc.kernel = *kernel;
        bc.order = order;
        bb.block = bc;
    }
    return bb.resolved();
}

namespace {

std::size_t line_at(const std::string& text, std::size_t offset) {
    offset = std::min(offset, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(offset), '\n'));
}

/// Line of a dotted key path, found by walking the quoted key names in order.
std::size_t line_of_key(const std::string& text, const std::string& dotted) {
    std::size_t pos = 0;
    std::stringstream parts(dotted);
    std::string part;
    bool found = false;
    while (std::getline(parts, part, '.')) {
        const std::size_t at = text.find('"' + part + '"', pos);
        if (at == std::string::npos) break;
        pos = at;
        found = true;
    }
    return found ? line_at(text, pos) : 1;
}

class Section {
public:
    Section(const json& obj, std::string prefix, const std::string& text)
        : obj_(obj), prefix_(std::move(prefix)), text_(text) {}

    [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
        const std::string path = prefix_ + key;
        const std::size_t line = line_of_key(text_, path);
        throw ConfigParseError("config line " + std::to_string(line) + ", key \"" + path + "\": " + msg, path, line);
    }

    void only(std::initializer_list<const char*> allowed) const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            bool known = false;
            for (const char* a : allowed) known = known || it.key() == a;
            if (!known) fail(it.key(), "unknown key");
        }
    }

    bool has(const char* key) const { return obj_.contains(key); }
    const json& at(const char* key) const { return obj_.at(key); }

    std::uint64_t count(const char* key, std::uint64_t lo, std::uint64_t hi, std::uint64_t fallback) const {
        if (!has(key)) return fallback;
        return as_count(at(key), key, lo, hi);
    }

    std::uint64_t as_count(const json& v, const std::string& key, std::uint64_t lo, std::uint64_t hi) const {
        std::uint64_t out = 0;
        if (v.is_number_unsigned()) {
            out = v.get<std::uint64_t>();
        } else if (v.is_number_integer()) {
            fail(key, "must be non-negative, got " + v.dump());
        } else if (v.is_number_float()) {
            const double d = v.get<double>();
            if (!(d >= 0) || std::floor(d) != d || d > 9.0e15) fail(key, "must be a whole number, got " + v.dump());
            out = static_cast<std::uint64_t>(d);
        } else {
            fail(key, "must be an integer, got " + std::string(v.type_name()));
        }
        if (out < lo || out > hi)
            fail(key, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "], got " + std::to_string(out));
        return out;
    }

    double number(const char* key, double lo, double hi, double fallback, bool open_lo = false, bool open_hi = false) const {
        if (!has(key)) return fallback;
        const json& v = at(key);
        if (!v.is_number()) fail(key, "must be a number, got " + std::string(v.type_name()));
        const double d = v.get<double>();
        const bool below = open_lo ? !(d > lo) : !(d >= lo);
        const bool above = open_hi ? !(d < hi) : !(d <= hi);
        if (below || above) {
            std::ostringstream range;
            range << (open_lo ? "(" : "[") << lo << ", " << hi << (open_hi ? ")" : "]");
            fail(key, "must be in " + range.str() + ", got " + v.dump());
        }
        return d;
    }

    std::string string(const char* key, const std::string& fallback) const {
        if (!has(key)) return fallback;
        const json& v = at(key);
        if (!v.is_string()) fail(key, "must be a string, got " + std::string(v.type_name()));
        return v.get<std::string>();
    }

    bool boolean(const char* key, bool fallback) const {
        if (!has(key)) return fallback;
        const json& v = at(key);
        if (!v.is_boolean()) fail(key, "must be true or false, got " + v.dump());
        return v.get<bool>();
    }

    Section child(const char* key) const {
        const json& v = at(key);
        if (!v.is_object()) fail(key, "must be an object, got " + std::string(v.type_name()));
        return Section(v, prefix_ + key + ".", text_);
    }

private:
    const json& obj_;
    std::string prefix_;
    const std::string& text_;
};

} // namespace

ExperimentConfig parse_config(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t line = line_at(text, e.byte > 0 ? e.byte - 1 : 0);
        throw ConfigParseError("config line " + std::to_string(line) + ": malformed JSON (" + e.what() + ")", "", line);
    }
    if (!doc.is_object()) throw ConfigParseError("config line 1: top level must be an object", "", 1);

    ExperimentConfig cfg;
    const Section top(doc, "", text);
    top.only({"variant", "c1", "cs", "kernel", "order", "stage", "seed", "output_dir", "task", "optim"});

    if (top.has("variant")) {
        const std::string name = top.string("variant", "");
        if (name == "none") {
            cfg.variant.reset();
        } else if (auto v = parse_variant(name)) {
            cfg.variant = *v;
        } else {
            top.fail("variant", "unknown variant \"" + name + "\" (none, NL, NS, A2, CGNL, CC, SNL)");
        }
    }
    cfg.c1 = top.count("c1", 0, 4096, 0);
    cfg.cs = top.count("cs", 0, 4096, 0);
    if (top.has("kernel")) {
        const std::string name = top.string("kernel", "");
        auto k = parse_kernel(name);
        if (!k) top.fail("kernel", "unknown kernel \"" + name + "\" (dot, gaussian, embedded-gaussian)");
        cfg.kernel = *k;
    }
    cfg.order = top.count("order", 1, 16, 2);
    cfg.stage = top.count("stage", 1, 3, 1);
    cfg.seed = top.count("seed", 0, std::numeric_limits<std::uint64_t>::max(), 1);
    if (top.has("output_dir")) {
        const std::string dir = top.string("output_dir", "");
        if (dir.empty()) top.fail("output_dir", "must not be empty");
        cfg.output_dir = dir;
    }

    if (top.has("task")) {
        const Section t = top.child("task");
        t.only({"image_size", "classes", "train_size", "test_size", "motif_size", "noise", "match_rate"});
        cfg.task.image = t.count("image_size", 3, 256, cfg.task.image);
        cfg.task.classes = t.count("classes", 2, 1000, cfg.task.classes);
        cfg.train_size = t.count("train_size", 1, 10'000'000, cfg.train_size);
        cfg.test_size = t.count("test_size", 1, 10'000'000, cfg.test_size);
        cfg.task.motif_size = t.count("motif_size", 1, 64, cfg.task.motif_size);
        cfg.task.noise = t.number("noise", 0.0, 100.0, cfg.task.noise);
        cfg.task.match_rate = t.number("match_rate", 0.0, 1.0, cfg.task.match_rate);
        if (cfg.task.image < 3 * cfg.task.motif_size)
            t.fail("image_size", "must be at least 3 × motif_size = " + std::to_string(3 * cfg.task.motif_size));
    }

    if (top.has("optim")) {
        const Section o = top.child("optim");
        o.only({"lr", "momentum", "weight_decay", "epochs", "batch_size", "decay_epochs", "decay_factor", "freeze"});
        cfg.optim.lr = o.number("lr", 0.0, 10.0, cfg.optim.lr);
        cfg.optim.momentum = o.number("momentum", 0.0, 1.0, cfg.optim.momentum, false, true);
        cfg.optim.weight_decay = o.number("weight_decay", 0.0, 1.0, cfg.optim.weight_decay);
        cfg.optim.epochs = o.count("epochs", 0, 100'000, cfg.optim.epochs);
        cfg.optim.batch_size = o.count("batch_size", 1, 100'000, cfg.optim.batch_size);
        cfg.optim.decay_factor = o.number("decay_factor", 0.0, 1.0, cfg.optim.decay_factor, true);
        cfg.optim.freeze = o.boolean("freeze", cfg.optim.freeze);
        if (o.has("decay_epochs")) {
            const json& v = o.at("decay_epochs");
            if (!v.is_array()) o.fail("decay_epochs", "must be an array of epoch numbers");
            cfg.optim.decay_epochs.clear();
            for (const auto& e : v) {
                const auto epoch = o.as_count(e, "decay_epochs", 1, 100'000);
                if (!cfg.optim.decay_epochs.empty() && epoch <= cfg.optim.decay_epochs.back())
                    o.fail("decay_epochs", "must be strictly increasing");
                cfg.optim.decay_epochs.push_back(epoch);
            }
        }
    }

    try {
        cfg.validate();
    } catch (const ConfigParseError&) {
        throw;
    } catch (const ConfigError& e) {
        // Cross-field problems (c1 vs stage width, kernel vs variant) are
        // reported against the key that selects the block.
        const char* key = top.has("c1") ? "c1" : top.has("kernel") ? "kernel" : top.has("cs") ? "cs" : "variant";
        top.fail(key, e.what());
    }
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileNotFound(path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json doc;
    doc["variant"] = cfg.variant ? std::string(variant_name(*cfg.variant)) : "none";
    doc["c1"] = cfg.c1;
    doc["cs"] = cfg.cs;
    if (cfg.kernel) doc["kernel"] = std::string(kernel_name(*cfg.kernel));
    doc["order"] = cfg.order;
    doc["stage"] = cfg.stage;
    doc["seed"] = cfg.seed;
    doc["output_dir"] = cfg.output_dir.string();
    doc["task"] = {{"image_size", cfg.task.image}, {"classes", cfg.task.classes},
                   {"train_size", cfg.train_size}, {"test_size", cfg.test_size},
                   {"motif_size", cfg.task.motif_size}, {"noise", cfg.task.noise},
                   {"match_rate", cfg.task.match_rate}};
    doc["optim"] = {{"lr", cfg.optim.lr},
                    {"momentum", cfg.optim.momentum},
                    {"weight_decay", cfg.optim.weight_decay},
                    {"epochs", cfg.optim.epochs},
                    {"batch_size", cfg.optim.batch_size},
                    {"decay_epochs", cfg.optim.decay_epochs},
                    {"decay_factor", cfg.optim.decay_factor},
                    {"freeze", cfg.optim.freeze}};
    return doc.dump(2) + "\n";
}

} // namespace snl
