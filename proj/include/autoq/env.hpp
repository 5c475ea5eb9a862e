#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "autoq/accuracy.hpp"
#include "autoq/cost.hpp"
#include "autoq/errors.hpp"
#include "autoq/model.hpp"

namespace autoq::env {

enum class RewardMode { ResourceConstrained, AccuracyGuaranteed };

/// Exponents of Eq-style extrinsic reward. Resource-constrained search fixes
/// (1,0,0,0) and relies on budgets; accuracy-guaranteed search weighs
/// accuracy quadratically against sub-unit cost exponents.
struct RewardWeights {
    double psi_acc = 1.0;
    double psi_l = 0.0;
    double psi_e = 0.0;
    double psi_a = 0.0;
    RewardMode mode = RewardMode::ResourceConstrained;

    static RewardWeights resource_constrained() { return {1.0, 0.0, 0.0, 0.0, RewardMode::ResourceConstrained}; }

    static RewardWeights accuracy_guaranteed(double l = 0.5, double e = 0.5, double a = 0.5) {
        return {2.0, l, e, a, RewardMode::AccuracyGuaranteed};
    }

    void validate() const {
        if (!(psi_acc >= 0) || !(psi_l >= 0) || !(psi_e >= 0) || !(psi_a >= 0))
            throw ValidationError("reward weights: exponents must be non-negative");
        if (mode == RewardMode::ResourceConstrained) {
            if (psi_acc != 1.0 || psi_l != 0.0 || psi_e != 0.0 || psi_a != 0.0)
                throw ValidationError("reward weights: resource-constrained mode requires (1,0,0,0)");
        } else {
            if (psi_acc != 2.0 || psi_l >= 1.0 || psi_e >= 1.0 || psi_a >= 1.0)
                throw ValidationError("reward weights: accuracy-guaranteed mode requires psi_acc=2 "
                                      "and cost exponents < 1");
        }
    }
};

inline constexpr double kRewardFloor = 1e-6;

/// Discrete activation QBN from a raw goal in [0,1]: roundup(1 + g*7).
inline int map_goal_activation(double g_raw) {
    const int q = static_cast<int>(std::ceil(1.0 + g_raw * (model::kMaxQbn - 1)));
    return std::clamp(q, 1, model::kMaxQbn);
}

/// Continuous target average weight QBN in [1,8].
inline double map_goal_weight(double g_raw) {
    return 1.0 + g_raw * (model::kMaxQbn - 1);
}

/// Discrete kernel QBN from a raw action in [0,1]: roundup(ra*8); 0 prunes.
inline int map_action(double ra) {
    const int q = static_cast<int>(std::ceil(ra * model::kMaxQbn));
    return std::clamp(q, 0, model::kMaxQbn);
}

/// ln(acc^psi_acc / (lat^psi_l * en^psi_e * area^psi_a)) on a report whose
/// lat/en/area are already normalized by their all-8-bit reference values.
/// Accuracy is floored at 1e-6; the cost terms are floored the same way so
/// fully pruned policies keep a finite reward.
inline double extrinsic_reward(const cost::CostReport& normalized, const RewardWeights& w) {
    for (double v : {normalized.accuracy, normalized.latency_s, normalized.energy_j,
                     normalized.area_units})
        if (!std::isfinite(v)) throw ValidationError("extrinsic_reward: non-finite report field");
    if (!(normalized.latency_s > 0) || !(normalized.energy_j > 0) || !(normalized.area_units > 0))
        throw ValidationError("extrinsic_reward: latency/energy/area must be positive");
    const double acc = std::max(normalized.accuracy, kRewardFloor);
    const double lat = std::max(normalized.latency_s, kRewardFloor);
    const double en = std::max(normalized.energy_j, kRewardFloor);
    const double area = std::max(normalized.area_units, kRewardFloor);
    return w.psi_acc * std::log(acc) - w.psi_l * std::log(lat) - w.psi_e * std::log(en) -
           w.psi_a * std::log(area);
}

/// Shaped low-level reward (goal completion vs extrinsic sum). The distance
/// term compares the goal's implied QBN total against the actions taken and
/// is divided by c_out so layers of different widths weigh alike.
inline double intrinsic_reward_layer(double goal_qbn, std::span<const int> actions,
                                     std::span<const double> erds, double zeta) {
    if (actions.empty()) throw ValidationError("intrinsic_reward_layer: no actions");
    if (actions.size() != erds.size())
        throw ValidationError("intrinsic_reward_layer: actions/eRds size mismatch");
    if (!(zeta >= 0.0 && zeta <= 1.0))
        throw ValidationError("intrinsic_reward_layer: zeta outside [0,1]");
    const double c_out = static_cast<double>(actions.size());
    double action_sum = 0.0;
    for (int a : actions) action_sum += a;
    double erd_sum = 0.0;
    for (double e : erds) erd_sum += e;
    const double completion = -std::abs(goal_qbn * c_out - action_sum) / c_out;
    return (1.0 - zeta) * completion + zeta * erd_sum;
}

struct EpisodeCursor {
    int layer = 0;
    model::Phase phase = model::Phase::Activation;
    int kernel = 0;
    cost::PartialPolicy partial;
    double current_goal_raw = 0.0;   // most recent goal, raw
    double prev_action_raw = 0.0;    // previous kernel's action within this layer, raw
    bool done = false;
};

struct StepResult {
    model::StateVector state;   // observation after the step (zeros when done)
    double reward = 0.0;
    bool done = false;
    double executed_raw = 0.0;  // raw input after resource clipping
    int mapped_qbn = 0;
};

struct EnvOptions {
    bool reward_at_end = false;   // emit eRd only on the final step
};

/// Walks (layer, phase, kernel) positions in episode order: each layer takes
/// one activation-goal step followed by one action step per kernel. Weight
/// goals are registered via set_layer_goal and condition the low-level
/// controller without consuming a step, so an episode is exactly
/// n_layer + total_kernels steps long.
class QuantEnv {
public:
    QuantEnv(model::NetworkSpec net, cost::HardwareConfig hw, RewardWeights weights,
             EnvOptions options = {})
        : net_(std::move(net)), hw_(std::move(hw)), weights_(weights), options_(options) {
        net_.validate();
        hw_.validate();
        weights_.validate();
        if (weights_.mode == RewardMode::ResourceConstrained && !hw_.budgets.any())
            throw ValidationError("resource-constrained mode requires budgets");
        params_ = accuracy::derive_sensitivities(net_);
        const auto all8 = model::make_constant_policy(net_, model::kMaxQbn, model::kMaxQbn);
        reference_.accuracy = accuracy::proxy_accuracy(params_, all8);
        reference_.latency_s = cost::temporal_latency(net_, all8, hw_);
        reference_.energy_j = cost::temporal_energy(net_, all8, hw_);
        reference_.area_units = cost::area_estimate(net_, all8, hw_);
    }

    /// Starts an episode. Throws InfeasibleBudgetError when even the
    /// all-minimum policy cannot meet the budgets.
    model::StateVector reset(std::uint64_t seed) {
        seed_ = seed;
        cursor_ = EpisodeCursor{};
        cursor_.partial = cost::PartialPolicy::undecided(net_);
        final_report_.reset();
        if (clipping_enabled()) {
            const auto bound = cost::min_remaining_cost(net_, cursor_.partial, hw_);
            if (!bound.within(hw_.budgets))
                throw InfeasibleBudgetError("budgets infeasible: all-minimum policy needs latency " +
                                            std::to_string(bound.latency_s) + " s, energy " +
                                            std::to_string(bound.energy_j) + " J, area " +
                                            std::to_string(bound.area_units));
        }
        return observe();
    }

    /// Registers the layer's weight goal (raw). Not an environment step.
    void set_layer_goal(double g_raw) {
        check_raw(g_raw);
        cursor_.current_goal_raw = g_raw;
    }

    /// Largest raw action whose discrete QBN keeps min_remaining_cost within
    /// every budget; 1.0 when unconstrained. QBN 0 is always permitted, which
    /// corresponds to a bound of 0.0.
    double clip_action_bound() const {
        if (cursor_.done) throw ValidationError("clip_action_bound: episode is done");
        if (!clipping_enabled() || cursor_.phase != model::Phase::Weight) return 1.0;
        for (int q = model::kMaxQbn; q > 0; --q) {
            cost::PartialPolicy trial = cursor_.partial;
            trial.weight_qbn[static_cast<size_t>(cursor_.layer)][static_cast<size_t>(cursor_.kernel)] = q;
            if (cost::min_remaining_cost(net_, trial, hw_).within(hw_.budgets))
                return static_cast<double>(q) / model::kMaxQbn;
        }
        return 0.0;
    }

    StepResult step(double raw) {
        if (cursor_.done) throw ValidationError("step: episode is done");
        check_raw(raw);
        StepResult result;
        if (cursor_.phase == model::Phase::Activation) {
            result.executed_raw = raw;
            result.mapped_qbn = map_goal_activation(raw);
            cursor_.partial.act_qbn[static_cast<size_t>(cursor_.layer)] = result.mapped_qbn;
            cursor_.current_goal_raw = raw;
            cursor_.phase = model::Phase::Weight;
            cursor_.kernel = 0;
            cursor_.prev_action_raw = 0.0;
        } else {
            double executed = raw;
            if (clipping_enabled()) executed = std::min(executed, clip_action_bound());
            result.executed_raw = executed;
            result.mapped_qbn = map_action(executed);
            cursor_.partial.weight_qbn[static_cast<size_t>(cursor_.layer)]
                                      [static_cast<size_t>(cursor_.kernel)] = result.mapped_qbn;
            cursor_.prev_action_raw = executed;
            ++cursor_.kernel;
            if (cursor_.kernel == net_.layers[static_cast<size_t>(cursor_.layer)].c_out) {
                ++cursor_.layer;
                cursor_.phase = model::Phase::Activation;
                cursor_.kernel = 0;
                cursor_.prev_action_raw = 0.0;
                if (cursor_.layer == net_.n_layer()) cursor_.done = true;
            }
        }
        result.done = cursor_.done;
        result.reward = step_reward();
        result.state = cursor_.done ? model::StateVector{} : observe();
        return result;
    }

    bool done() const { return cursor_.done; }
    const EpisodeCursor& cursor() const { return cursor_; }
    const model::NetworkSpec& net() const { return net_; }
    const cost::HardwareConfig& hw() const { return hw_; }
    const RewardWeights& reward_weights() const { return weights_; }
    const accuracy::AccuracyModelParams& accuracy_params() const { return params_; }
    const cost::CostReport& reference_report() const { return reference_; }
    std::uint64_t seed() const { return seed_; }

    int episode_length() const { return net_.n_layer() + net_.total_kernels(); }

    /// Raw-unit report of the finished episode's policy.
    const cost::CostReport& final_report() const {
        if (!final_report_) throw ValidationError("final_report: episode not finished");
        return *final_report_;
    }

    model::QbnPolicy final_policy() const {
        if (!cursor_.done) throw ValidationError("final_policy: episode not finished");
        return cursor_.partial.complete_with(0, 1);   // fully decided; fills nothing
    }

    /// Raw-unit cost report plus proxy accuracy for an arbitrary policy.
    cost::CostReport evaluate(const model::QbnPolicy& policy) const {
        cost::CostReport r;
        r.accuracy = accuracy::proxy_accuracy(params_, policy);
        r.latency_s = cost::temporal_latency(net_, policy, hw_);
        r.energy_j = cost::temporal_energy(net_, policy, hw_);
        r.area_units = cost::area_estimate(net_, policy, hw_);
        return r;
    }

    cost::CostReport normalize(const cost::CostReport& raw) const {
        cost::CostReport n = raw;
        n.latency_s = raw.latency_s / reference_.latency_s;
        n.energy_j = raw.energy_j / reference_.energy_j;
        n.area_units = raw.area_units / reference_.area_units;
        return n;
    }

    double policy_reward(const model::QbnPolicy& policy) const {
        return extrinsic_reward(normalize(evaluate(policy)), weights_);
    }

private:
    bool clipping_enabled() const {
        return weights_.mode == RewardMode::ResourceConstrained && hw_.budgets.any();
    }

    static void check_raw(double raw) {
        if (!(raw >= 0.0 && raw <= 1.0))
            throw ValidationError("raw goal/action outside [0,1]");
    }

    model::StateVector observe() const {
        return model::encode_state(net_, cursor_.layer, cursor_.kernel, cursor_.phase,
                                   cursor_.current_goal_raw, cursor_.prev_action_raw);
    }

    /// Per-step eRd: the partial policy completed with QBN 8 for undecided
    /// entries, so the final step scores the true policy.
    double step_reward() {
        if (options_.reward_at_end && !cursor_.done) return 0.0;
        const model::QbnPolicy completed =
            cursor_.partial.complete_with(model::kMaxQbn, model::kMaxQbn);
        const cost::CostReport raw = evaluate(completed);
        if (cursor_.done) final_report_ = raw;
        return extrinsic_reward(normalize(raw), weights_);
    }

    model::NetworkSpec net_;
    cost::HardwareConfig hw_;
    RewardWeights weights_;
    EnvOptions options_;
    accuracy::AccuracyModelParams params_;
    cost::CostReport reference_;
    EpisodeCursor cursor_;
    std::optional<cost::CostReport> final_report_;
    std::uint64_t seed_ = 0;
};

} // namespace autoq::env
