#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "mscg/common.hpp"

namespace mscg {

// Training configuration. Defaults are desk scale; the reported full-scale
// settings (lr 1.5e-4/sqrt(3), 10k adaptive iterations, n = 32^2, d = 128)
// remain expressible through the same keys.
struct TrainConfig {
    std::uint64_t seed = 42;
    std::int64_t epochs = 10;
    std::int64_t batch_size = 4;
    double base_lr = 1e-3;
    std::int64_t adam_iters = 10000; // adaptive-moments phase length, then momentum SGD
    double momentum = 0.9;
    double weight_decay = 2e-5;
    double bias_lr_multiplier = 2.0;
    std::int64_t node_grid = 256; // n, a perfect square
    std::int64_t feat_dim = 128;  // d
    std::int64_t hidden_dim = 64;
    std::int64_t classes = 7;
    std::string loss = "acw";  // acw | dice | ce
    std::string dtype = "f32"; // f32 | f64
    std::int64_t patch = 0;    // 0 = full image
    double flip_prob = 0.5;
    bool multiview = true; // false = single-view ablation build
    std::int64_t eval_every = 0; // epochs between evaluations; 0 = final only

    std::int64_t grid_side() const {
        const auto s = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(node_grid))));
        return s;
    }

    void validate() const {
        if (base_lr <= 0) throw contract_violation("base_lr must be > 0");
        if (epochs < 1) throw contract_violation("epochs must be >= 1");
        if (batch_size < 1) throw contract_violation("batch_size must be >= 1");
        const auto s = grid_side();
        if (s * s != node_grid) throw contract_violation("node_grid must be a perfect square");
        if (loss != "acw" && loss != "dice" && loss != "ce") throw contract_violation("loss must be acw|dice|ce");
        if (dtype != "f32" && dtype != "f64") throw contract_violation("dtype must be f32|f64");
    }
};

namespace detail {

inline std::string trim(std::string s) {
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r'; };
    while (!s.empty() && is_space(s.back())) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && is_space(s[i])) ++i;
    return s.substr(i);
}

} // namespace detail

inline std::map<std::string, std::string> parse_key_values(std::istream& in) {
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw data_error("config line is not key=value: '" + line + "'");
        kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
    }
    return kv;
}

inline void apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value) {
    auto as_i64 = [&] { return static_cast<std::int64_t>(std::stoll(value)); };
    auto as_f64 = [&] { return std::stod(value); };
    auto as_bool = [&] {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        throw data_error("config value for " + key + " must be boolean, got '" + value + "'");
    };
    if (key == "seed") c.seed = static_cast<std::uint64_t>(std::stoull(value));
    else if (key == "epochs") c.epochs = as_i64();
    else if (key == "batch_size") c.batch_size = as_i64();
    else if (key == "base_lr") c.base_lr = as_f64();
    else if (key == "adam_iters") c.adam_iters = as_i64();
    else if (key == "momentum") c.momentum = as_f64();
    else if (key == "weight_decay") c.weight_decay = as_f64();
    else if (key == "bias_lr_multiplier") c.bias_lr_multiplier = as_f64();
    else if (key == "node_grid") c.node_grid = as_i64();
    else if (key == "feat_dim") c.feat_dim = as_i64();
    else if (key == "hidden_dim") c.hidden_dim = as_i64();
    else if (key == "classes") c.classes = as_i64();
    else if (key == "loss") c.loss = value;
    else if (key == "dtype") c.dtype = value;
    else if (key == "patch") c.patch = as_i64();
    else if (key == "flip_prob") c.flip_prob = as_f64();
    else if (key == "multiview") c.multiview = as_bool();
    else if (key == "eval_every") c.eval_every = as_i64();
    else throw data_error("unknown config key: " + key);
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open config: " + path);
    TrainConfig c;
    for (const auto& [k, v] : parse_key_values(in)) apply_config_entry(c, k, v);
    c.validate();
    return c;
}

inline std::string canonical_config_text(const TrainConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "adam_iters=" << c.adam_iters << "\nbase_lr=" << c.base_lr << "\nbatch_size=" << c.batch_size
       << "\nbias_lr_multiplier=" << c.bias_lr_multiplier << "\nclasses=" << c.classes << "\ndtype=" << c.dtype
       << "\nepochs=" << c.epochs << "\neval_every=" << c.eval_every << "\nfeat_dim=" << c.feat_dim
       << "\nflip_prob=" << c.flip_prob << "\nhidden_dim=" << c.hidden_dim << "\nloss=" << c.loss
       << "\nmomentum=" << c.momentum << "\nmultiview=" << (c.multiview ? 1 : 0) << "\nnode_grid=" << c.node_grid
       << "\npatch=" << c.patch << "\nseed=" << c.seed << "\nweight_decay=" << c.weight_decay << "\n";
    return os.str();
}

inline std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t config_hash(const TrainConfig& c) { return fnv1a64(canonical_config_text(c)); }

} // namespace mscg
