#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "autoq/errors.hpp"
#include "autoq/model.hpp"

namespace autoq::cost {

struct Budgets {
    std::optional<double> latency_s;
    std::optional<double> energy_j;
    std::optional<double> area_units;

    bool any() const { return latency_s || energy_j || area_units; }
};

/// Parameters of the two analytic accelerator models: a temporal bit-serial
/// design (lanes of one-bit-digit MAC units) and a spatial systolic array of
/// fusion units processing fusion_digit_bits-wide digits.
struct HardwareConfig {
    long long lanes = 64;
    double clock_hz = 1e8;
    double energy_per_bitop = 1e-12;
    double base_area = 10.0;
    double area_per_lane_bit = 1.0;
    int fusion_digit_bits = 2;
    int fusion_array_rows = 16;
    int fusion_array_cols = 16;
    Budgets budgets;

    void validate() const {
        if (lanes < 1) throw ValidationError("hardware: lanes must be positive");
        if (!(clock_hz > 0) || !(energy_per_bitop > 0) || !(base_area > 0) || !(area_per_lane_bit > 0))
            throw ValidationError("hardware: clock_hz, energy_per_bitop, base_area and "
                                  "area_per_lane_bit must be positive");
        if (fusion_digit_bits != 1 && fusion_digit_bits != 2 && fusion_digit_bits != 4)
            throw ValidationError("hardware: fusion_digit_bits must be 1, 2 or 4");
        if (fusion_array_rows < 1 || fusion_array_cols < 1)
            throw ValidationError("hardware: fusion array dimensions must be positive");
        for (const auto& b : {budgets.latency_s, budgets.energy_j, budgets.area_units})
            if (b && !(*b > 0)) throw ValidationError("hardware: budgets must be positive");
    }
};

inline HardwareConfig parse_hardware_config(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("hardware config: ") + e.what());
    }
    HardwareConfig hw;
    try {
        hw.lanes = j.at("lanes").get<long long>();
        hw.clock_hz = j.at("clock_hz").get<double>();
        hw.energy_per_bitop = j.at("energy_per_bitop").get<double>();
        hw.base_area = j.at("base_area").get<double>();
        hw.area_per_lane_bit = j.at("area_per_lane_bit").get<double>();
        if (j.contains("fusion_digit_bits")) hw.fusion_digit_bits = j.at("fusion_digit_bits").get<int>();
        if (j.contains("fusion_array_rows")) hw.fusion_array_rows = j.at("fusion_array_rows").get<int>();
        if (j.contains("fusion_array_cols")) hw.fusion_array_cols = j.at("fusion_array_cols").get<int>();
        if (j.contains("budgets")) {
            const auto& jb = j.at("budgets");
            if (jb.contains("latency_s")) hw.budgets.latency_s = jb.at("latency_s").get<double>();
            if (jb.contains("energy_j")) hw.budgets.energy_j = jb.at("energy_j").get<double>();
            if (jb.contains("area_units")) hw.budgets.area_units = jb.at("area_units").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("hardware config: ") + e.what());
    }
    hw.validate();
    return hw;
}

struct CostReport {
    double accuracy = 0.0;
    double latency_s = 0.0;
    double energy_j = 0.0;
    double area_units = 0.0;

    bool operator==(const CostReport&) const = default;

    bool within(const Budgets& b) const {
        if (b.latency_s && latency_s > *b.latency_s) return false;
        if (b.energy_j && energy_j > *b.energy_j) return false;
        if (b.area_units && area_units > *b.area_units) return false;
        return true;
    }
};

namespace detail {

inline void check_non_empty(const model::NetworkSpec& net) {
    if (net.layers.empty() || net.total_kernels() == 0)
        throw ValidationError("empty network");
}

inline void check_shapes(const model::NetworkSpec& net, const model::QbnPolicy& policy) {
    policy.validate(net);
}

/// Total bit-serial work: one bit-op per MAC per weight-bit per activation-bit.
inline unsigned long long total_bitops(const model::NetworkSpec& net,
                                       const model::QbnPolicy& policy) {
    unsigned long long total = 0;
    for (size_t i = 0; i < net.layers.size(); ++i) {
        const auto macs = static_cast<unsigned long long>(net.layers[i].macs_per_kernel);
        const auto a = static_cast<unsigned long long>(policy.act_qbn[i]);
        for (int w : policy.weight_qbn[i]) total += macs * static_cast<unsigned long long>(w) * a;
    }
    return total;
}

} // namespace detail

inline unsigned long long temporal_cycles(const model::NetworkSpec& net,
                                          const model::QbnPolicy& policy,
                                          const HardwareConfig& hw) {
    detail::check_non_empty(net);
    detail::check_shapes(net, policy);
    const unsigned long long work = detail::total_bitops(net, policy);
    const auto lanes = static_cast<unsigned long long>(hw.lanes);
    return (work + lanes - 1) / lanes;
}

/// cycles / clock. A fully pruned policy is floored at one cycle so reports
/// stay positive.
inline double temporal_latency(const model::NetworkSpec& net, const model::QbnPolicy& policy,
                               const HardwareConfig& hw) {
    const unsigned long long cycles = temporal_cycles(net, policy, hw);
    return static_cast<double>(std::max<unsigned long long>(cycles, 1)) / hw.clock_hz;
}

/// cycles * lanes_active_fraction * energy_per_bitop, which reduces to one
/// energy_per_bitop per bit-op per lane. A fully pruned policy is floored at
/// one bit-op.
inline double temporal_energy(const model::NetworkSpec& net, const model::QbnPolicy& policy,
                              const HardwareConfig& hw) {
    const unsigned long long cycles = temporal_cycles(net, policy, hw);
    const unsigned long long work = detail::total_bitops(net, policy);
    if (work == 0) return hw.energy_per_bitop;
    const double active_fraction =
        std::min(1.0, static_cast<double>(work) /
                          (static_cast<double>(cycles) * static_cast<double>(hw.lanes)));
    return static_cast<double>(cycles) * active_fraction * hw.energy_per_bitop;
}

/// Datapath sized by the widest weight kernel in use.
inline double area_estimate(const model::NetworkSpec& net, const model::QbnPolicy& policy,
                            const HardwareConfig& hw) {
    detail::check_non_empty(net);
    detail::check_shapes(net, policy);
    int max_w = 0;
    for (const auto& layer : policy.weight_qbn)
        for (int w : layer) max_w = std::max(max_w, w);
    return hw.base_area + hw.area_per_lane_bit * static_cast<double>(hw.lanes) * max_w;
}

// --- spatial (systolic fusion-unit) model -------------------------------------

/// Sub-kernel QBN assignment: each kernel's weights are partitioned into
/// blocks, one QBN per block. The systolic allocation depends only on the
/// largest QBN within a kernel, so block sizes are immaterial to the model
/// and only the per-block QBNs are recorded.
struct SubkernelPolicy {
    std::vector<int> act_qbn;                              // [layer]
    std::vector<std::vector<std::vector<int>>> parts;      // [layer][kernel][block]

    void validate(const model::NetworkSpec& net) const {
        if (act_qbn.size() != net.layers.size() || parts.size() != net.layers.size())
            throw ValidationError("subkernel policy: layer count mismatch");
        for (size_t i = 0; i < parts.size(); ++i) {
            if (act_qbn[i] < 1 || act_qbn[i] > model::kMaxQbn)
                throw ValidationError("subkernel policy: act_qbn outside [1,8]");
            if (parts[i].size() != static_cast<size_t>(net.layers[i].c_out))
                throw ValidationError("subkernel policy: kernel count mismatch in layer " +
                                      std::to_string(i));
            for (const auto& blocks : parts[i]) {
                if (blocks.empty())
                    throw ValidationError("subkernel policy: invalid partition (kernel with no blocks)");
                for (int q : blocks)
                    if (q < 0 || q > model::kMaxQbn)
                        throw ValidationError("subkernel policy: block QBN outside [0,8]");
            }
        }
    }
};

inline SubkernelPolicy whole_kernel_partition(const model::QbnPolicy& policy) {
    SubkernelPolicy sp;
    sp.act_qbn = policy.act_qbn;
    for (const auto& layer : policy.weight_qbn) {
        auto& lp = sp.parts.emplace_back();
        for (int w : layer) lp.push_back({w});
    }
    return sp;
}

namespace detail {

inline unsigned long long spatial_slots(const model::NetworkSpec& net, const SubkernelPolicy& sp,
                                        int digit) {
    unsigned long long slots = 0;
    for (size_t i = 0; i < net.layers.size(); ++i) {
        const auto macs = static_cast<unsigned long long>(net.layers[i].macs_per_kernel);
        const unsigned long long act_digits =
            (static_cast<unsigned long long>(sp.act_qbn[i]) + digit - 1) / digit;
        for (const auto& blocks : sp.parts[i]) {
            const int max_q = *std::max_element(blocks.begin(), blocks.end());
            const unsigned long long w_digits =
                (static_cast<unsigned long long>(max_q) + digit - 1) / digit;
            slots += macs * w_digits * act_digits;
        }
    }
    return slots;
}

} // namespace detail

/// Fusion-unit time-slots per MAC are ceil(max block QBN / digit) *
/// ceil(act QBN / digit); the array retires rows*cols slots per cycle.
inline double spatial_latency(const model::NetworkSpec& net, const SubkernelPolicy& sp,
                              const HardwareConfig& hw) {
    detail::check_non_empty(net);
    sp.validate(net);
    const unsigned long long slots = detail::spatial_slots(net, sp, hw.fusion_digit_bits);
    const double array = static_cast<double>(hw.fusion_array_rows) * hw.fusion_array_cols;
    return std::max<double>(static_cast<double>(slots), 1.0) / array / hw.clock_hz;
}

inline double spatial_latency(const model::NetworkSpec& net, const model::QbnPolicy& policy,
                              const HardwareConfig& hw) {
    detail::check_shapes(net, policy);
    return spatial_latency(net, whole_kernel_partition(policy), hw);
}

/// Stand-in energy model: one fusion-unit op per slot, each op handling a
/// digit x digit product.
inline double spatial_energy(const model::NetworkSpec& net, const SubkernelPolicy& sp,
                             const HardwareConfig& hw) {
    detail::check_non_empty(net);
    sp.validate(net);
    const unsigned long long slots = detail::spatial_slots(net, sp, hw.fusion_digit_bits);
    const double digit2 = static_cast<double>(hw.fusion_digit_bits) * hw.fusion_digit_bits;
    return std::max<double>(static_cast<double>(slots), 1.0) * hw.energy_per_bitop * digit2;
}

inline double spatial_energy(const model::NetworkSpec& net, const model::QbnPolicy& policy,
                             const HardwareConfig& hw) {
    detail::check_shapes(net, policy);
    return spatial_energy(net, whole_kernel_partition(policy), hw);
}

// --- partial policies and the remaining-cost bound -----------------------------

/// Episode-order prefix of a policy: per layer, the activation QBN then that
/// layer's kernel QBNs, each possibly still undecided.
struct PartialPolicy {
    std::vector<std::optional<int>> act_qbn;
    std::vector<std::vector<std::optional<int>>> weight_qbn;

    static PartialPolicy undecided(const model::NetworkSpec& net) {
        PartialPolicy p;
        p.act_qbn.assign(net.layers.size(), std::nullopt);
        for (const auto& l : net.layers)
            p.weight_qbn.emplace_back(static_cast<size_t>(l.c_out), std::nullopt);
        return p;
    }

    void check_shape(const model::NetworkSpec& net) const {
        if (act_qbn.size() != net.layers.size() || weight_qbn.size() != net.layers.size())
            throw ValidationError("partial policy: layer count mismatch");
        for (size_t i = 0; i < weight_qbn.size(); ++i)
            if (weight_qbn[i].size() != static_cast<size_t>(net.layers[i].c_out))
                throw ValidationError("partial policy: kernel count mismatch in layer " +
                                      std::to_string(i));
    }

    /// Fill undecided entries: weights with w_fill, activations with a_fill.
    model::QbnPolicy complete_with(int w_fill, int a_fill) const {
        model::QbnPolicy q;
        for (size_t i = 0; i < act_qbn.size(); ++i) {
            q.act_qbn.push_back(act_qbn[i].value_or(a_fill));
            auto& ws = q.weight_qbn.emplace_back();
            for (const auto& w : weight_qbn[i]) ws.push_back(w.value_or(w_fill));
        }
        return q;
    }

    model::QbnPolicy complete_minimal() const { return complete_with(0, 1); }
};

/// Cost of the prefix completed with the minimum legal QBNs (weights 0,
/// activations 1): a true lower bound on the cost of any completion. The
/// accuracy field is 0, itself a trivial lower bound, and is not used by
/// budget checks.
inline CostReport min_remaining_cost(const model::NetworkSpec& net, const PartialPolicy& prefix,
                                     const HardwareConfig& hw) {
    prefix.check_shape(net);
    const model::QbnPolicy completed = prefix.complete_minimal();
    CostReport r;
    r.accuracy = 0.0;
    r.latency_s = temporal_latency(net, completed, hw);
    r.energy_j = temporal_energy(net, completed, hw);
    r.area_units = area_estimate(net, completed, hw);
    return r;
}

} // namespace autoq::cost
