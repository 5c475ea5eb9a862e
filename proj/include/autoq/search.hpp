#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "autoq/agent.hpp"
#include "autoq/env.hpp"
#include "autoq/errors.hpp"
#include "autoq/model.hpp"

namespace autoq::search {

struct SearchOptions {
    int episodes = 400;   // explore + exploit; the hyper splits the phases
    std::uint64_t seed = 0;
    agent::AgentHyper hyper;
    bool reward_at_end = false;

    void validate() const {
        if (episodes < 0) throw ValidationError("search: episodes must be >= 0");
        hyper.validate();
    }
};

struct TraceRow {
    int episode = 0;
    double reward = 0.0;
    double accuracy = 0.0;
    double latency_s = 0.0;
    double energy_j = 0.0;
    double area = 0.0;
    double avg_wqbn = 0.0;
    double avg_aqbn = 0.0;

    bool operator==(const TraceRow&) const = default;
};

struct SearchResult {
    model::QbnPolicy best_policy;
    cost::CostReport best_report;   // raw units
    double best_reward = 0.0;
    int best_episode = -1;
    std::vector<TraceRow> trace;
};

/// One seeded hierarchical search: rolls out episodes, trains the HLC on
/// (relabeled) layer goals and the LLC on shaped intrinsic rewards, and keeps
/// the best final-policy reward seen. A noise-free greedy episode is appended
/// after training as a last candidate (it is the only candidate when
/// episodes == 0).
class SearchRun {
public:
    SearchRun(model::NetworkSpec net, cost::HardwareConfig hw, env::RewardWeights weights,
              SearchOptions options)
        : options_(options),
          env_(std::move(net), std::move(hw), weights, env::EnvOptions{options.reward_at_end}),
          rng_(options.seed),
          hlc_(model::kStateDim, options.hyper.gamma_erd, options.hyper, rng_),
          llc_(model::kStateDim + 1, options.hyper.gamma_ird, options.hyper, rng_),
          low_buffer_(static_cast<size_t>(options.hyper.buffer_capacity)),
          high_buffer_(static_cast<size_t>(options.hyper.buffer_capacity)) {
        options_.validate();
    }

    int episode() const { return episode_; }
    int total_episodes() const { return options_.episodes; }
    const env::QuantEnv& environment() const { return env_; }

    void run_episode() {
        const double sigma = agent::noise_schedule(episode_, options_.hyper);
        const double zeta = agent::zeta_schedule(episode_, options_.episodes, options_.hyper);
        const int new_low = rollout(sigma, zeta, true);
        train(new_low);
        ++episode_;
    }

    SearchResult finish() {
        rollout(0.0, agent::zeta_schedule(options_.episodes, options_.episodes, options_.hyper),
                false);
        SearchResult result;
        result.best_policy = best_policy_;
        result.best_report = best_report_;
        result.best_reward = best_reward_;
        result.best_episode = best_episode_;
        result.trace = trace_;
        return result;
    }

    void serialize(binio::Writer& w) const;
    void deserialize(binio::Reader& r);

private:
    /// Plays one full episode; returns the number of new low transitions.
    int rollout(double sigma, double zeta, bool record) {
        model::StateVector state = env_.reset(static_cast<std::uint64_t>(episode_));
        std::optional<agent::LayerRollout> pending;   // waits for the next layer's kernel-0 state
        const int n_layer = env_.net().n_layer();
        int new_low = 0;
        for (int layer = 0; layer < n_layer; ++layer) {
            const model::StateVector act_state = state;
            const double act_goal = agent::select_goal(hlc_, act_state, sigma, rng_);
            const env::StepResult act_step = env_.step(act_goal);
            const model::StateVector kernel0_state = act_step.state;

            if (record && pending) {
                pending->next_start_state = kernel0_state;
                high_buffer_.push(agent::make_high_transition(*pending));
                pending.reset();
            }

            const double weight_goal = agent::select_goal(hlc_, kernel0_state, sigma, rng_);
            env_.set_layer_goal(weight_goal);

            const int c_out = env_.net().layers[static_cast<size_t>(layer)].c_out;
            std::vector<model::StateVector> states{kernel0_state};
            std::vector<double> executed;
            std::vector<int> mapped;
            std::vector<double> erds;
            model::StateVector after_layer;
            for (int k = 0; k < c_out; ++k) {
                const double raw = agent::select_action(llc_, states.back(), weight_goal, sigma, rng_);
                const env::StepResult sr = env_.step(raw);
                executed.push_back(sr.executed_raw);
                mapped.push_back(sr.mapped_qbn);
                erds.push_back(sr.reward);
                after_layer = sr.state;
                if (k + 1 < c_out) states.push_back(sr.state);
            }

            if (record) {
                const double ird = env::intrinsic_reward_layer(env::map_goal_weight(weight_goal),
                                                               mapped, erds, zeta);
                for (int k = 0; k < c_out; ++k) {
                    agent::LowTransition t;
                    t.state = states[static_cast<size_t>(k)];
                    t.goal = weight_goal;
                    t.action = executed[static_cast<size_t>(k)];
                    t.reward = ird;
                    t.next_state = k + 1 < c_out ? states[static_cast<size_t>(k + 1)] : after_layer;
                    t.done = k + 1 == c_out;
                    low_buffer_.push(t);
                    ++new_low;
                }

                double erd_sum = 0.0;
                for (double e : erds) erd_sum += e;
                agent::HighTransition act_ht;
                act_ht.start_state = act_state;
                act_ht.goal = act_goal;
                act_ht.reward_sum = erd_sum;
                act_ht.next_start_state = after_layer;   // next layer's activation state
                act_ht.done = layer + 1 == n_layer;
                high_buffer_.push(act_ht);

                agent::LayerRollout rollout;
                rollout.start_state = kernel0_state;
                rollout.goal_raw = weight_goal;
                rollout.states = std::move(states);
                rollout.actions = executed;
                rollout.erds = erds;
                rollout.done = layer + 1 == n_layer;
                if (rollout.done) {
                    high_buffer_.push(agent::make_high_transition(rollout));
                } else {
                    pending = std::move(rollout);
                }
            }
            state = after_layer;
        }

        const model::QbnPolicy policy = env_.final_policy();
        const cost::CostReport report = env_.final_report();
        const double reward = env_.policy_reward(policy);
        TraceRow row{episode_, reward, report.accuracy, report.latency_s, report.energy_j,
                     report.area_units, model::avg_weight_qbn(env_.net(), policy),
                     model::avg_act_qbn(env_.net(), policy)};
        trace_.push_back(row);
        if (best_episode_ < 0 || reward > best_reward_) {
            best_reward_ = reward;
            best_policy_ = policy;
            best_report_ = report;
            best_episode_ = episode_;
        }
        return new_low;
    }

    void train(int new_low) {
        if (low_buffer_.size() >= static_cast<size_t>(options_.hyper.batch))
            for (int i = 0; i < new_low; ++i) agent::llc_td3_update(llc_, low_buffer_, rng_);
        if (high_buffer_.size() >= static_cast<size_t>(options_.hyper.batch)) {
            const int n_high = 2 * env_.net().n_layer();
            for (int i = 0; i < n_high; ++i)
                agent::hlc_td3_update(hlc_, high_buffer_, llc_, rng_);
        }
    }

    SearchOptions options_;
    env::QuantEnv env_;
    agent::Rng rng_;
    agent::Td3Controller hlc_;
    agent::Td3Controller llc_;
    agent::ReplayBuffer<agent::LowTransition> low_buffer_;
    agent::ReplayBuffer<agent::HighTransition> high_buffer_;
    int episode_ = 0;
    double best_reward_ = 0.0;
    int best_episode_ = -1;
    model::QbnPolicy best_policy_;
    cost::CostReport best_report_;
    std::vector<TraceRow> trace_;
};

inline SearchResult run_search(const model::NetworkSpec& net, const cost::HardwareConfig& hw,
                               const env::RewardWeights& weights, const SearchOptions& options) {
    SearchRun run(net, hw, weights, options);
    while (run.episode() < options.episodes) run.run_episode();
    return run.finish();
}

// --- exhaustive baselines -------------------------------------------------------

struct BruteResult {
    model::QbnPolicy policy;
    double reward = 0.0;
    cost::CostReport report;
    unsigned long long evaluations = 0;
};

inline constexpr double kMaxEnumerations = 1e7;

namespace detail {

inline std::pair<std::vector<int>, std::vector<int>> split_qbn_set(const std::vector<int>& qbn_set) {
    std::vector<int> weights, acts;
    for (int q : qbn_set) {
        if (q < 0 || q > model::kMaxQbn)
            throw ValidationError("qbn set: value " + std::to_string(q) + " outside [0,8]");
        weights.push_back(q);
        if (q >= 1) acts.push_back(q);
    }
    std::sort(weights.begin(), weights.end());
    weights.erase(std::unique(weights.begin(), weights.end()), weights.end());
    std::sort(acts.begin(), acts.end());
    acts.erase(std::unique(acts.begin(), acts.end()), acts.end());
    if (weights.empty() || acts.empty())
        throw ValidationError("qbn set: needs at least one value, with one >= 1 for activations");
    return {weights, acts};
}

/// Odometer enumeration in canonical episode order (act, then kernels, layer
/// by layer), ascending per digit, so the first maximum found is the
/// lexicographically smallest optimal policy.
template <typename Eval>
BruteResult enumerate_policies(const model::NetworkSpec& net, const std::vector<int>& weight_set,
                               const std::vector<int>& act_set, double space,
                               Eval&& evaluate_candidate) {
    if (space > kMaxEnumerations)
        throw SpaceTooLargeError("search space has " + std::to_string(space) +
                                 " points, cap is " + std::to_string(kMaxEnumerations));
    const int n_digit_act = net.n_layer();
    std::vector<int> act_idx(static_cast<size_t>(n_digit_act), 0);
    std::vector<std::vector<int>> w_idx;
    for (const auto& l : net.layers) w_idx.emplace_back(static_cast<size_t>(l.c_out), 0);

    BruteResult best;
    bool found = false;
    model::QbnPolicy policy;
    policy.act_qbn.assign(static_cast<size_t>(net.n_layer()), act_set[0]);
    for (const auto& l : net.layers)
        policy.weight_qbn.emplace_back(static_cast<size_t>(l.c_out), weight_set[0]);

    while (true) {
        for (size_t i = 0; i < policy.act_qbn.size(); ++i)
            policy.act_qbn[i] = act_set[static_cast<size_t>(act_idx[i])];
        for (size_t i = 0; i < policy.weight_qbn.size(); ++i)
            for (size_t k = 0; k < policy.weight_qbn[i].size(); ++k)
                policy.weight_qbn[i][k] = weight_set[static_cast<size_t>(w_idx[i][k])];

        ++best.evaluations;
        const auto value = evaluate_candidate(policy);
        if (value && (!found || *value > best.reward)) {
            found = true;
            best.reward = *value;
            best.policy = policy;
        }

        // advance the odometer, least-significant digit last in episode order
        bool carried = false;
        for (size_t i = policy.weight_qbn.size(); i-- > 0 && !carried;) {
            for (size_t k = policy.weight_qbn[i].size(); k-- > 0 && !carried;) {
                if (++w_idx[i][k] < static_cast<int>(weight_set.size())) carried = true;
                else w_idx[i][k] = 0;
            }
            if (!carried) {
                if (++act_idx[i] < static_cast<int>(act_set.size())) carried = true;
                else act_idx[i] = 0;
            }
        }
        if (!carried) break;
    }
    if (!found) throw InfeasibleBudgetError("no enumerated policy satisfies the budgets");
    return best;
}

} // namespace detail

/// Exhaustive maximization of the final-policy extrinsic reward over the
/// kernel-wise space. Acts draw from qbn_set restricted to [1,8]. In
/// resource-constrained mode, policies violating any budget are filtered out.
inline BruteResult brute_force_search(const model::NetworkSpec& net, const cost::HardwareConfig& hw,
                                      const env::RewardWeights& weights,
                                      const std::vector<int>& qbn_set) {
    const auto [weight_set, act_set] = detail::split_qbn_set(qbn_set);
    const double space = std::pow(static_cast<double>(weight_set.size()),
                                  static_cast<double>(net.total_kernels())) *
                         std::pow(static_cast<double>(act_set.size()),
                                  static_cast<double>(net.n_layer()));
    env::QuantEnv env(net, hw, weights);
    const bool filter = weights.mode == env::RewardMode::ResourceConstrained;
    auto result = detail::enumerate_policies(
        net, weight_set, act_set, space,
        [&](const model::QbnPolicy& p) -> std::optional<double> {
            if (filter && !env.evaluate(p).within(hw.budgets)) return std::nullopt;
            return env.policy_reward(p);
        });
    result.report = env.evaluate(result.policy);
    return result;
}

/// Exhaustive over one weight QBN per layer plus one activation QBN per
/// layer: the layer-wise subspace of the kernel-wise space.
inline BruteResult layerwise_baseline_search(const model::NetworkSpec& net,
                                             const cost::HardwareConfig& hw,
                                             const env::RewardWeights& weights,
                                             const std::vector<int>& qbn_set) {
    const auto [weight_set, act_set] = detail::split_qbn_set(qbn_set);
    const double space = std::pow(static_cast<double>(weight_set.size()) *
                                      static_cast<double>(act_set.size()),
                                  static_cast<double>(net.n_layer()));
    if (space > kMaxEnumerations)
        throw SpaceTooLargeError("layer-wise space has " + std::to_string(space) +
                                 " points, cap is " + std::to_string(kMaxEnumerations));
    env::QuantEnv env(net, hw, weights);
    const bool filter = weights.mode == env::RewardMode::ResourceConstrained;

    BruteResult best;
    bool found = false;
    const int n = net.n_layer();
    std::vector<int> act_idx(static_cast<size_t>(n), 0), w_idx(static_cast<size_t>(n), 0);
    while (true) {
        model::QbnPolicy policy;
        for (int i = 0; i < n; ++i) {
            policy.act_qbn.push_back(act_set[static_cast<size_t>(act_idx[static_cast<size_t>(i)])]);
            policy.weight_qbn.emplace_back(
                static_cast<size_t>(net.layers[static_cast<size_t>(i)].c_out),
                weight_set[static_cast<size_t>(w_idx[static_cast<size_t>(i)])]);
        }
        ++best.evaluations;
        if (!filter || env.evaluate(policy).within(hw.budgets)) {
            const double r = env.policy_reward(policy);
            if (!found || r > best.reward) {
                found = true;
                best.reward = r;
                best.policy = policy;
            }
        }
        bool carried = false;
        for (int i = n; i-- > 0 && !carried;) {
            if (++w_idx[static_cast<size_t>(i)] < static_cast<int>(weight_set.size())) carried = true;
            else {
                w_idx[static_cast<size_t>(i)] = 0;
                if (++act_idx[static_cast<size_t>(i)] < static_cast<int>(act_set.size())) carried = true;
                else act_idx[static_cast<size_t>(i)] = 0;
            }
        }
        if (!carried) break;
    }
    if (!found) throw InfeasibleBudgetError("no layer-wise policy satisfies the budgets");
    best.report = env.evaluate(best.policy);
    return best;
}

/// Raw-unit cost report plus proxy accuracy for a policy.
inline cost::CostReport evaluate_policy(const model::NetworkSpec& net,
                                        const cost::HardwareConfig& hw,
                                        const model::QbnPolicy& policy) {
    policy.validate(net);
    const auto params = accuracy::derive_sensitivities(net);
    cost::CostReport r;
    r.accuracy = accuracy::proxy_accuracy(params, policy);
    r.latency_s = cost::temporal_latency(net, policy, hw);
    r.energy_j = cost::temporal_energy(net, policy, hw);
    r.area_units = cost::area_estimate(net, policy, hw);
    return r;
}

// --- trace and file output -------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

} // namespace detail

inline constexpr const char* kTraceHeader =
    "episode,reward,accuracy,latency_s,energy_j,area,avg_wqbn,avg_aqbn";

inline std::string trace_to_csv(const std::vector<TraceRow>& trace) {
    std::string out = kTraceHeader;
    out += '\n';
    for (const auto& r : trace) {
        out += std::to_string(r.episode);
        for (double v : {r.reward, r.accuracy, r.latency_s, r.energy_j, r.area, r.avg_wqbn,
                         r.avg_aqbn}) {
            out += ',';
            out += detail::fmt_double(v);
        }
        out += '\n';
    }
    return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << content;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path) {
    const std::string s = read_text_file(path);
    return std::vector<std::uint8_t>(s.begin(), s.end());
}

inline void export_trace(const SearchResult& result, const std::filesystem::path& path) {
    write_file(path, trace_to_csv(result.trace));
}

/// Per-layer average QBNs of the best policy, for external plotting.
inline std::string per_layer_csv(const model::NetworkSpec& net, const model::QbnPolicy& policy) {
    std::string out = "layer,avg_wqbn,act_qbn\n";
    for (size_t i = 0; i < policy.weight_qbn.size(); ++i) {
        double sum = 0.0;
        for (int w : policy.weight_qbn[i]) sum += w;
        out += std::to_string(i) + ',' +
               detail::fmt_double(sum / static_cast<double>(policy.weight_qbn[i].size())) + ',' +
               std::to_string(policy.act_qbn[i]) + '\n';
    }
    return out;
}

inline void write_search_outputs(const SearchResult& result, const model::NetworkSpec& net,
                                 const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    export_trace(result, dir / "trace.csv");
    write_file(dir / "best_policy.bin", model::encode_policy_file(result.best_policy, net));
    write_file(dir / "best_policy.json",
               model::policy_to_json(result.best_policy, net.name).dump(2) + "\n");
    write_file(dir / "best_policy_layers.csv", per_layer_csv(net, result.best_policy));
}

// --- checkpointing ----------------------------------------------------------------

namespace detail {

inline void write_state(binio::Writer& w, const model::StateVector& s) {
    for (double v : s.v) w.f64(v);
}

inline model::StateVector read_state(binio::Reader& r) {
    model::StateVector s;
    for (double& v : s.v) v = r.f64();
    return s;
}

} // namespace detail

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void SearchRun::serialize(binio::Writer& w) const {
    w.str("AUTOQCKP");
    w.u16(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(episode_));
    w.str(rng_.save_state());
    hlc_.serialize(w);
    llc_.serialize(w);

    w.u64(low_buffer_.size());
    for (size_t i = 0; i < low_buffer_.size(); ++i) {
        const auto& t = low_buffer_[i];
        detail::write_state(w, t.state);
        w.f64(t.goal);
        w.f64(t.action);
        w.f64(t.reward);
        detail::write_state(w, t.next_state);
        w.u8(t.done);
    }
    w.u64(high_buffer_.size());
    for (size_t i = 0; i < high_buffer_.size(); ++i) {
        const auto& t = high_buffer_[i];
        detail::write_state(w, t.start_state);
        w.f64(t.goal);
        w.f64(t.reward_sum);
        detail::write_state(w, t.next_start_state);
        w.u8(t.done);
        w.u64(t.states.size());
        for (const auto& s : t.states) detail::write_state(w, s);
        for (double a : t.actions) w.f64(a);
    }

    w.f64(best_reward_);
    w.i64(best_episode_);
    w.u64(best_policy_.act_qbn.size());
    for (size_t i = 0; i < best_policy_.act_qbn.size(); ++i) {
        w.u8(static_cast<std::uint8_t>(best_policy_.act_qbn[i]));
        w.u64(best_policy_.weight_qbn[i].size());
        for (int q : best_policy_.weight_qbn[i]) w.u8(static_cast<std::uint8_t>(q));
    }
    for (double v : {best_report_.accuracy, best_report_.latency_s, best_report_.energy_j,
                     best_report_.area_units})
        w.f64(v);

    w.u64(trace_.size());
    for (const auto& row : trace_) {
        w.u32(static_cast<std::uint32_t>(row.episode));
        for (double v : {row.reward, row.accuracy, row.latency_s, row.energy_j, row.area,
                         row.avg_wqbn, row.avg_aqbn})
            w.f64(v);
    }
}

inline void SearchRun::deserialize(binio::Reader& r) {
    if (r.str() != "AUTOQCKP") throw ParseError("checkpoint: bad magic");
    if (r.u16() != kCheckpointVersion) throw ParseError("checkpoint: unsupported version");
    episode_ = static_cast<int>(r.u32());
    rng_.load_state(r.str());
    hlc_.deserialize(r);
    llc_.deserialize(r);

    low_buffer_ = agent::ReplayBuffer<agent::LowTransition>(
        static_cast<size_t>(options_.hyper.buffer_capacity));
    const auto n_low = r.u64();
    for (std::uint64_t i = 0; i < n_low; ++i) {
        agent::LowTransition t;
        t.state = detail::read_state(r);
        t.goal = r.f64();
        t.action = r.f64();
        t.reward = r.f64();
        t.next_state = detail::read_state(r);
        t.done = r.u8() != 0;
        low_buffer_.push(std::move(t));
    }
    high_buffer_ = agent::ReplayBuffer<agent::HighTransition>(
        static_cast<size_t>(options_.hyper.buffer_capacity));
    const auto n_high = r.u64();
    for (std::uint64_t i = 0; i < n_high; ++i) {
        agent::HighTransition t;
        t.start_state = detail::read_state(r);
        t.goal = r.f64();
        t.reward_sum = r.f64();
        t.next_start_state = detail::read_state(r);
        t.done = r.u8() != 0;
        const auto n_seq = r.u64();
        for (std::uint64_t j = 0; j < n_seq; ++j) t.states.push_back(detail::read_state(r));
        for (std::uint64_t j = 0; j < n_seq; ++j) t.actions.push_back(r.f64());
        high_buffer_.push(std::move(t));
    }

    best_reward_ = r.f64();
    best_episode_ = static_cast<int>(r.i64());
    best_policy_ = model::QbnPolicy{};
    const auto n_layers = r.u64();
    for (std::uint64_t i = 0; i < n_layers; ++i) {
        best_policy_.act_qbn.push_back(r.u8());
        auto& ws = best_policy_.weight_qbn.emplace_back();
        const auto n_k = r.u64();
        for (std::uint64_t k = 0; k < n_k; ++k) ws.push_back(r.u8());
    }
    best_report_.accuracy = r.f64();
    best_report_.latency_s = r.f64();
    best_report_.energy_j = r.f64();
    best_report_.area_units = r.f64();

    trace_.clear();
    const auto n_trace = r.u64();
    for (std::uint64_t i = 0; i < n_trace; ++i) {
        TraceRow row;
        row.episode = static_cast<int>(r.u32());
        row.reward = r.f64();
        row.accuracy = r.f64();
        row.latency_s = r.f64();
        row.energy_j = r.f64();
        row.area = r.f64();
        row.avg_wqbn = r.f64();
        row.avg_aqbn = r.f64();
        trace_.push_back(row);
    }
}

} // namespace autoq::search
