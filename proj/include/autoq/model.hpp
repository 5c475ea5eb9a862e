#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "autoq/errors.hpp"

namespace autoq::model {

inline constexpr int kMaxQbn = 8;          // goal_max == action_max
inline constexpr int kStateDim = 11;

enum class LayerKind { Conv, DepthwiseConv, FullyConnected };

inline std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::DepthwiseConv: return "depthwise-conv";
        case LayerKind::FullyConnected: return "fully-connected";
    }
    return "?";
}

inline LayerKind layer_kind_from_string(std::string_view s) {
    if (s == "conv") return LayerKind::Conv;
    if (s == "depthwise-conv") return LayerKind::DepthwiseConv;
    if (s == "fully-connected") return LayerKind::FullyConnected;
    throw ParseError("unknown layer kind '" + std::string(s) + "'");
}

/// Static description of one layer. Fully-connected layers are encoded with
/// kernel 1x1 and stride 0; depthwise layers must have c_out == c_in.
struct LayerSpec {
    int index = 0;
    LayerKind kind = LayerKind::Conv;
    int c_in = 1;
    int c_out = 1;
    int kernel_w = 1;
    int kernel_h = 1;
    int stride = 1;
    int feat_w = 1;
    int feat_h = 1;
    long long macs_per_kernel = 1;   // MACs one kernel performs per inference

    bool operator==(const LayerSpec&) const = default;
};

struct KernelStats {
    double variance = 0.0;
    std::optional<double> sensitivity;   // explicit accuracy-loss share; derived when absent

    bool operator==(const KernelStats&) const = default;
};

/// Static CNN description plus per-kernel statistics driving the accuracy
/// proxy and the cost models. Optional frozen weights (weights[layer][kernel])
/// feed the fixed-point inference oracle.
struct NetworkSpec {
    std::string name;
    double acc_fp = 1.0;                                   // full-precision reference accuracy
    std::vector<LayerSpec> layers;
    std::vector<std::vector<KernelStats>> kernel_stats;    // [layer][kernel]
    std::vector<double> act_sensitivity;                   // [layer]
    std::vector<std::vector<std::vector<double>>> weights; // optional, [layer][kernel][w]

    bool operator==(const NetworkSpec&) const = default;

    int n_layer() const { return static_cast<int>(layers.size()); }

    int total_kernels() const {
        int n = 0;
        for (const auto& l : layers) n += l.c_out;
        return n;
    }

    bool has_weights() const { return !weights.empty(); }

    void validate() const;
};

inline void validate_layer(const LayerSpec& l) {
    auto fail = [&](const std::string& what) {
        throw ValidationError("layer " + std::to_string(l.index) + ": " + what);
    };
    if (l.c_in < 1) fail("c_in must be positive");
    if (l.c_out < 1) fail("c_out must be positive");
    if (l.kernel_w < 1 || l.kernel_h < 1) fail("kernel dimensions must be positive");
    if (l.feat_w < 1 || l.feat_h < 1) fail("feature dimensions must be positive");
    if (l.macs_per_kernel < 1) fail("macs_per_kernel must be positive");
    if (l.kind == LayerKind::FullyConnected) {
        if (l.kernel_w != 1 || l.kernel_h != 1) fail("fully-connected requires kernel 1x1");
        if (l.stride != 0) fail("fully-connected requires stride 0");
    } else {
        if (l.stride < 1) fail("stride must be positive");
        if (l.kind == LayerKind::DepthwiseConv && l.c_out != l.c_in)
            fail("depthwise-conv requires c_out == c_in");
    }
}

inline void NetworkSpec::validate() const {
    if (layers.empty()) throw ValidationError("network '" + name + "': needs at least one layer");
    if (!(acc_fp >= 0.0 && acc_fp <= 1.0))
        throw ValidationError("network '" + name + "': acc_fp must be in [0,1]");
    if (kernel_stats.size() != layers.size())
        throw ValidationError("network '" + name + "': kernel_stats layer count mismatch");
    if (act_sensitivity.size() != layers.size())
        throw ValidationError("network '" + name + "': act_sensitivity layer count mismatch");
    for (size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].index != static_cast<int>(i))
            throw ValidationError("layer " + std::to_string(i) + ": index out of order");
        validate_layer(layers[i]);
        if (kernel_stats[i].size() != static_cast<size_t>(layers[i].c_out))
            throw ValidationError("layer " + std::to_string(i) + ": expected " +
                                  std::to_string(layers[i].c_out) + " kernel stats, got " +
                                  std::to_string(kernel_stats[i].size()));
        for (size_t k = 0; k < kernel_stats[i].size(); ++k) {
            const auto& ks = kernel_stats[i][k];
            if (!(ks.variance >= 0.0) || !std::isfinite(ks.variance))
                throw ValidationError("layer " + std::to_string(i) + " kernel " + std::to_string(k) +
                                      ": variance must be finite and >= 0");
            if (ks.sensitivity && (!(*ks.sensitivity >= 0.0) || !std::isfinite(*ks.sensitivity)))
                throw ValidationError("layer " + std::to_string(i) + " kernel " + std::to_string(k) +
                                      ": sensitivity must be finite and >= 0");
        }
        if (!(act_sensitivity[i] >= 0.0) || !std::isfinite(act_sensitivity[i]))
            throw ValidationError("layer " + std::to_string(i) + ": act_sensitivity must be finite and >= 0");
    }
    if (!weights.empty()) {
        if (weights.size() != layers.size())
            throw ValidationError("network '" + name + "': weights layer count mismatch");
        for (size_t i = 0; i < weights.size(); ++i) {
            if (weights[i].size() != static_cast<size_t>(layers[i].c_out))
                throw ValidationError("layer " + std::to_string(i) + ": weights kernel count mismatch");
            for (size_t k = 0; k < weights[i].size(); ++k)
                if (weights[i][k].empty())
                    throw ValidationError("layer " + std::to_string(i) + " kernel " + std::to_string(k) +
                                          ": empty weight list");
        }
    }
}

/// Per-kernel weight QBNs plus per-layer activation QBNs. Weight QBN 0 means
/// the kernel is pruned; activation QBNs start at 1.
struct QbnPolicy {
    std::vector<int> act_qbn;                    // [layer], in [1,8]
    std::vector<std::vector<int>> weight_qbn;    // [layer][kernel], in [0,8]

    bool operator==(const QbnPolicy&) const = default;

    void validate(const NetworkSpec& net) const {
        if (act_qbn.size() != net.layers.size() || weight_qbn.size() != net.layers.size())
            throw ValidationError("policy: layer count does not match network '" + net.name + "'");
        for (size_t i = 0; i < act_qbn.size(); ++i) {
            if (act_qbn[i] < 1 || act_qbn[i] > kMaxQbn)
                throw ValidationError("policy: act_qbn[" + std::to_string(i) + "]=" +
                                      std::to_string(act_qbn[i]) + " outside [1,8]");
            if (weight_qbn[i].size() != static_cast<size_t>(net.layers[i].c_out))
                throw ValidationError("policy: layer " + std::to_string(i) + " kernel count mismatch");
            for (size_t k = 0; k < weight_qbn[i].size(); ++k)
                if (weight_qbn[i][k] < 0 || weight_qbn[i][k] > kMaxQbn)
                    throw ValidationError("policy: weight_qbn[" + std::to_string(i) + "][" +
                                          std::to_string(k) + "]=" + std::to_string(weight_qbn[i][k]) +
                                          " outside [0,8]");
        }
    }
};

inline QbnPolicy make_constant_policy(const NetworkSpec& net, int weight_qbn, int act_qbn) {
    QbnPolicy p;
    p.act_qbn.assign(net.layers.size(), act_qbn);
    p.weight_qbn.reserve(net.layers.size());
    for (const auto& l : net.layers) p.weight_qbn.emplace_back(l.c_out, weight_qbn);
    return p;
}

enum class Phase { Weight, Activation };

/// The 11-component observation, every entry normalized to [0,1].
struct StateVector {
    std::array<double, kStateDim> v{};

    double operator[](int i) const { return v[static_cast<size_t>(i)]; }
    bool operator==(const StateVector&) const = default;

    // component indices
    static constexpr int kLayer = 0;
    static constexpr int kKernel = 1;
    static constexpr int kCin = 2;
    static constexpr int kCout = 3;
    static constexpr int kKernelSize = 4;
    static constexpr int kStride = 5;
    static constexpr int kFeature = 6;
    static constexpr int kDepthwise = 7;
    static constexpr int kWeightAct = 8;   // 0 = weight step, 1 = activation step
    static constexpr int kPrevGoal = 9;
    static constexpr int kPrevAction = 10;
};

// Normalization denominators are network-wide maxima of each raw field:
//   layer index  / (n_layer - 1)            (0 when the network has one layer)
//   kernel index / c_out of its own layer
//   c_in, c_out  / their maxima over layers
//   kernel size  = max(kernel_w, kernel_h), / its maximum over layers
//   stride       / max stride over layers   (0 when every layer is stride 0)
//   feature size = max(feat_w, feat_h), / its maximum over layers
// Flags map to {0,1}; prev_goal / prev_action are already raw values in [0,1].
inline StateVector encode_state(const NetworkSpec& net, int layer, int kernel, Phase phase,
                                double prev_goal, double prev_action) {
    if (layer < 0 || layer >= net.n_layer())
        throw ValidationError("encode_state: layer index " + std::to_string(layer) + " out of range");
    const LayerSpec& l = net.layers[static_cast<size_t>(layer)];
    if (kernel < 0 || kernel >= l.c_out)
        throw ValidationError("encode_state: kernel index " + std::to_string(kernel) + " out of range");
    if (!(prev_goal >= 0.0 && prev_goal <= 1.0) || !(prev_action >= 0.0 && prev_action <= 1.0))
        throw ValidationError("encode_state: prev_goal/prev_action must be in [0,1]");

    int max_cin = 1, max_cout = 1, max_ks = 1, max_stride = 0, max_feat = 1;
    for (const auto& s : net.layers) {
        max_cin = std::max(max_cin, s.c_in);
        max_cout = std::max(max_cout, s.c_out);
        max_ks = std::max(max_ks, std::max(s.kernel_w, s.kernel_h));
        max_stride = std::max(max_stride, s.stride);
        max_feat = std::max(max_feat, std::max(s.feat_w, s.feat_h));
    }

    StateVector s;
    const int denom_layer = std::max(1, net.n_layer() - 1);
    s.v[StateVector::kLayer] = static_cast<double>(layer) / denom_layer;
    s.v[StateVector::kKernel] = static_cast<double>(kernel) / l.c_out;
    s.v[StateVector::kCin] = static_cast<double>(l.c_in) / max_cin;
    s.v[StateVector::kCout] = static_cast<double>(l.c_out) / max_cout;
    s.v[StateVector::kKernelSize] = static_cast<double>(std::max(l.kernel_w, l.kernel_h)) / max_ks;
    s.v[StateVector::kStride] = max_stride > 0 ? static_cast<double>(l.stride) / max_stride : 0.0;
    s.v[StateVector::kFeature] = static_cast<double>(std::max(l.feat_w, l.feat_h)) / max_feat;
    s.v[StateVector::kDepthwise] = l.kind == LayerKind::DepthwiseConv ? 1.0 : 0.0;
    s.v[StateVector::kWeightAct] = phase == Phase::Activation ? 1.0 : 0.0;
    s.v[StateVector::kPrevGoal] = prev_goal;
    s.v[StateVector::kPrevAction] = prev_action;
    return s;
}

/// Kernel-count-weighted average weight QBN.
inline double avg_weight_qbn(const NetworkSpec& net, const QbnPolicy& policy) {
    policy.validate(net);
    long long sum = 0, count = 0;
    for (const auto& layer : policy.weight_qbn) {
        for (int q : layer) sum += q;
        count += static_cast<long long>(layer.size());
    }
    return static_cast<double>(sum) / static_cast<double>(count);
}

/// Arithmetic mean of the per-layer activation QBNs.
inline double avg_act_qbn(const NetworkSpec& net, const QbnPolicy& policy) {
    policy.validate(net);
    long long sum = std::accumulate(policy.act_qbn.begin(), policy.act_qbn.end(), 0LL);
    return static_cast<double>(sum) / static_cast<double>(policy.act_qbn.size());
}

// --- policy nibble codec -----------------------------------------------------
//
// Entries are laid out layer-major, activation QBN first, then that layer's
// kernel QBNs. Each entry is one nibble; the first entry of a byte occupies
// the low nibble. The payload is zero-padded to a byte boundary.

inline int policy_entry_count(const NetworkSpec& net) {
    return net.n_layer() + net.total_kernels();
}

namespace detail {
inline std::vector<int> policy_entries(const QbnPolicy& policy) {
    std::vector<int> entries;
    for (size_t i = 0; i < policy.act_qbn.size(); ++i) {
        entries.push_back(policy.act_qbn[i]);
        entries.insert(entries.end(), policy.weight_qbn[i].begin(), policy.weight_qbn[i].end());
    }
    return entries;
}
} // namespace detail

inline std::vector<std::uint8_t> pack_policy(const QbnPolicy& policy) {
    const auto entries = detail::policy_entries(policy);
    std::vector<std::uint8_t> bytes((entries.size() + 1) / 2, 0);
    for (size_t i = 0; i < entries.size(); ++i) {
        if (entries[i] < 0 || entries[i] > kMaxQbn)
            throw ValidationError("pack_policy: entry " + std::to_string(i) + " outside [0,8]");
        const auto nib = static_cast<std::uint8_t>(entries[i]);
        bytes[i / 2] |= static_cast<std::uint8_t>(i % 2 == 0 ? nib : nib << 4);
    }
    return bytes;
}

inline QbnPolicy unpack_policy(const std::vector<std::uint8_t>& bytes, const NetworkSpec& net) {
    const int n_entries = policy_entry_count(net);
    const size_t expected_len = (static_cast<size_t>(n_entries) + 1) / 2;
    if (bytes.size() != expected_len)
        throw ValidationError("unpack_policy: payload is " + std::to_string(bytes.size()) +
                              " bytes, network '" + net.name + "' needs " + std::to_string(expected_len));
    auto nibble = [&](int i) -> int {
        const std::uint8_t b = bytes[static_cast<size_t>(i) / 2];
        return i % 2 == 0 ? (b & 0x0F) : (b >> 4);
    };
    if (n_entries % 2 == 1 && (bytes.back() >> 4) != 0)
        throw ValidationError("unpack_policy: nonzero padding nibble");
    QbnPolicy policy;
    int pos = 0;
    for (const auto& l : net.layers) {
        policy.act_qbn.push_back(nibble(pos++));
        auto& ws = policy.weight_qbn.emplace_back();
        for (int k = 0; k < l.c_out; ++k) ws.push_back(nibble(pos++));
    }
    for (int i = 0; i < n_entries; ++i)
        if (nibble(i) > kMaxQbn)
            throw ValidationError("unpack_policy: entry " + std::to_string(i) + " has nibble value " +
                                  std::to_string(nibble(i)) + " > 8");
    policy.validate(net);
    return policy;
}

// --- policy file format ------------------------------------------------------
//
// 8-byte magic "AUTOQPOL", u16 version (little-endian), u32 entry count
// (little-endian), then the packed nibbles. A JSON mirror carries the network
// name for human inspection.

inline constexpr std::array<std::uint8_t, 8> kPolicyMagic = {'A', 'U', 'T', 'O', 'Q', 'P', 'O', 'L'};
inline constexpr std::uint16_t kPolicyVersion = 1;

inline std::vector<std::uint8_t> encode_policy_file(const QbnPolicy& policy, const NetworkSpec& net) {
    policy.validate(net);
    const auto payload = pack_policy(policy);
    const auto count = static_cast<std::uint32_t>(policy_entry_count(net));
    std::vector<std::uint8_t> out(kPolicyMagic.begin(), kPolicyMagic.end());
    out.push_back(static_cast<std::uint8_t>(kPolicyVersion & 0xFF));
    out.push_back(static_cast<std::uint8_t>(kPolicyVersion >> 8));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((count >> (8 * i)) & 0xFF));
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

inline QbnPolicy decode_policy_file(const std::vector<std::uint8_t>& bytes, const NetworkSpec& net) {
    if (bytes.size() < 14) throw ParseError("policy file: truncated header");
    if (!std::equal(kPolicyMagic.begin(), kPolicyMagic.end(), bytes.begin()))
        throw ParseError("policy file: bad magic");
    const std::uint16_t version = static_cast<std::uint16_t>(bytes[8] | (bytes[9] << 8));
    if (version != kPolicyVersion)
        throw ParseError("policy file: unsupported version " + std::to_string(version));
    std::uint32_t count = 0;
    for (int i = 0; i < 4; ++i) count |= static_cast<std::uint32_t>(bytes[10 + i]) << (8 * i);
    if (count != static_cast<std::uint32_t>(policy_entry_count(net)))
        throw ValidationError("policy file: entry count " + std::to_string(count) +
                              " does not match network '" + net.name + "' (" +
                              std::to_string(policy_entry_count(net)) + ")");
    std::vector<std::uint8_t> payload(bytes.begin() + 14, bytes.end());
    return unpack_policy(payload, net);
}

// --- JSON codecs -------------------------------------------------------------

namespace detail {

inline nlohmann::json size_pair_json(int w, int h) { return nlohmann::json::array({w, h}); }

inline std::pair<int, int> parse_size_pair(const nlohmann::json& j, const std::string& field, int layer) {
    const std::string where = "layer " + std::to_string(layer) + " field '" + field + "'";
    if (j.is_number_integer()) {
        const int v = j.get<int>();
        return {v, v};
    }
    if (j.is_array() && j.size() == 2 && j[0].is_number_integer() && j[1].is_number_integer())
        return {j[0].get<int>(), j[1].get<int>()};
    throw ParseError(where + ": expected integer or [w,h]");
}

template <typename T>
T require(const nlohmann::json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) throw ParseError(where + ": missing key '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(where + ": key '" + key + "': " + e.what());
    }
}

} // namespace detail

inline NetworkSpec parse_network_spec(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("network spec: ") + e.what());
    }
    NetworkSpec net;
    net.name = detail::require<std::string>(j, "name", "network spec");
    net.acc_fp = detail::require<double>(j, "acc_fp", "network spec");
    if (!j.contains("layers") || !j.at("layers").is_array())
        throw ParseError("network spec: missing 'layers' array");

    int index = 0;
    for (const auto& jl : j.at("layers")) {
        const std::string where = "layer " + std::to_string(index);
        LayerSpec l;
        l.index = index;
        l.kind = layer_kind_from_string(detail::require<std::string>(jl, "kind", where));
        l.c_in = detail::require<int>(jl, "c_in", where);
        l.c_out = detail::require<int>(jl, "c_out", where);
        const bool fc = l.kind == LayerKind::FullyConnected;
        if (jl.contains("kernel")) {
            std::tie(l.kernel_w, l.kernel_h) = detail::parse_size_pair(jl.at("kernel"), "kernel", index);
        } else if (fc) {
            l.kernel_w = l.kernel_h = 1;
        } else {
            throw ParseError(where + ": missing key 'kernel'");
        }
        if (jl.contains("stride")) l.stride = detail::require<int>(jl, "stride", where);
        else if (fc) l.stride = 0;
        else throw ParseError(where + ": missing key 'stride'");
        if (jl.contains("feature")) {
            std::tie(l.feat_w, l.feat_h) = detail::parse_size_pair(jl.at("feature"), "feature", index);
        } else if (fc) {
            l.feat_w = l.feat_h = 1;
        } else {
            throw ParseError(where + ": missing key 'feature'");
        }
        l.macs_per_kernel = detail::require<long long>(jl, "macs_per_kernel", where);
        net.layers.push_back(l);

        net.act_sensitivity.push_back(detail::require<double>(jl, "act_sensitivity", where));

        if (!jl.contains("kernels") || !jl.at("kernels").is_array())
            throw ParseError(where + ": missing 'kernels' array");
        auto& stats = net.kernel_stats.emplace_back();
        for (const auto& jk : jl.at("kernels")) {
            KernelStats ks;
            ks.variance = detail::require<double>(jk, "variance", where + " kernels");
            if (jk.contains("sensitivity")) ks.sensitivity = jk.at("sensitivity").get<double>();
            stats.push_back(ks);
        }
        ++index;
    }

    if (j.contains("weights")) {
        try {
            net.weights = j.at("weights").get<std::vector<std::vector<std::vector<double>>>>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("network spec: key 'weights': ") + e.what());
        }
    }

    net.validate();
    return net;
}

inline std::string serialize_network_spec(const NetworkSpec& net) {
    nlohmann::json j;
    j["name"] = net.name;
    j["acc_fp"] = net.acc_fp;
    j["layers"] = nlohmann::json::array();
    for (size_t i = 0; i < net.layers.size(); ++i) {
        const LayerSpec& l = net.layers[i];
        nlohmann::json jl;
        jl["kind"] = to_string(l.kind);
        jl["c_in"] = l.c_in;
        jl["c_out"] = l.c_out;
        jl["kernel"] = detail::size_pair_json(l.kernel_w, l.kernel_h);
        jl["stride"] = l.stride;
        jl["feature"] = detail::size_pair_json(l.feat_w, l.feat_h);
        jl["macs_per_kernel"] = l.macs_per_kernel;
        jl["act_sensitivity"] = net.act_sensitivity[i];
        jl["kernels"] = nlohmann::json::array();
        for (const auto& ks : net.kernel_stats[i]) {
            nlohmann::json jk;
            jk["variance"] = ks.variance;
            if (ks.sensitivity) jk["sensitivity"] = *ks.sensitivity;
            jl["kernels"].push_back(jk);
        }
        j["layers"].push_back(jl);
    }
    if (!net.weights.empty()) j["weights"] = net.weights;
    return j.dump(2) + "\n";
}

inline nlohmann::json policy_to_json(const QbnPolicy& policy, const std::string& network_name) {
    nlohmann::json j;
    j["network"] = network_name;
    j["act_qbn"] = policy.act_qbn;
    j["weight_qbn"] = policy.weight_qbn;
    return j;
}

inline QbnPolicy policy_from_json(const nlohmann::json& j, const NetworkSpec& net) {
    QbnPolicy p;
    try {
        p.act_qbn = j.at("act_qbn").get<std::vector<int>>();
        p.weight_qbn = j.at("weight_qbn").get<std::vector<std::vector<int>>>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("policy json: ") + e.what());
    }
    if (j.contains("network") && j.at("network").get<std::string>() != net.name)
        throw ValidationError("policy json: network name '" + j.at("network").get<std::string>() +
                              "' does not match '" + net.name + "'");
    p.validate(net);
    return p;
}

} // namespace autoq::model
