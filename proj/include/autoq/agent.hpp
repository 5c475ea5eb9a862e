#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "autoq/binio.hpp"
#include "autoq/env.hpp"
#include "autoq/errors.hpp"
#include "autoq/mlp.hpp"
#include "autoq/model.hpp"
#include "autoq/rng.hpp"

namespace autoq::agent {

struct AgentHyper {
    double actor_lr = 1e-4;
    double critic_lr = 1e-3;
    int batch = 64;
    int buffer_capacity = 2000;
    int explore_episodes = 100;
    int exploit_episodes = 300;
    double sigma0 = 0.5;
    double noise_decay = 0.99;        // exponential rate after the explore phase
    double tau = 0.005;               // polyak factor
    int policy_delay = 2;
    double gamma_ird = 0.99;
    double gamma_erd = 0.99;
    double zeta_start = 0.1;
    double zeta_end = 0.8;
    double target_noise = 0.1;        // target policy smoothing
    double target_noise_clip = 0.25;
    double relabel_std = 0.1;
    int relabel_samples = 8;          // plus original goal and induced estimate = 10 candidates
    int hidden = 300;

    void validate() const {
        if (!(actor_lr > 0) || !(critic_lr > 0)) throw ValidationError("hyper: learning rates must be positive");
        if (batch < 1 || buffer_capacity < batch) throw ValidationError("hyper: capacity must hold a batch");
        if (explore_episodes < 0 || exploit_episodes < 0) throw ValidationError("hyper: negative episode counts");
        if (!(sigma0 >= 0) || !(noise_decay > 0) || noise_decay > 1)
            throw ValidationError("hyper: noise schedule out of range");
        if (!(tau >= 0) || tau > 1) throw ValidationError("hyper: tau outside [0,1]");
        if (policy_delay < 1) throw ValidationError("hyper: policy_delay must be >= 1");
        if (!(gamma_ird >= 0) || gamma_ird >= 1 || !(gamma_erd >= 0) || gamma_erd >= 1)
            throw ValidationError("hyper: discounts must lie in [0,1)");
        if (!(zeta_start >= 0) || zeta_end > 1 || zeta_start > zeta_end)
            throw ValidationError("hyper: zeta schedule out of range");
        if (hidden < 1) throw ValidationError("hyper: hidden width must be positive");
    }
};

/// zeta rises linearly from zeta_start at episode 0 to zeta_end at the final
/// episode.
inline double zeta_schedule(int episode, int total_episodes, const AgentHyper& h = {}) {
    if (total_episodes <= 1) return h.zeta_end;
    const double frac = std::clamp(static_cast<double>(episode) /
                                       static_cast<double>(total_episodes - 1), 0.0, 1.0);
    return h.zeta_start + (h.zeta_end - h.zeta_start) * frac;
}

/// Constant sigma0 during the explore phase, then exponential decay.
inline double noise_schedule(int episode, const AgentHyper& h = {}) {
    if (episode < h.explore_episodes) return h.sigma0;
    return h.sigma0 * std::pow(h.noise_decay, static_cast<double>(episode - h.explore_episodes));
}

struct LowTransition {
    model::StateVector state;
    double goal = 0.0;        // raw
    double action = 0.0;      // raw, as executed
    double reward = 0.0;      // shaped intrinsic reward
    model::StateVector next_state;
    bool done = false;
};

/// One high-level decision. Weight-goal transitions retain the kernel states
/// and executed actions for off-policy goal relabeling; activation-goal
/// transitions keep the sequences empty and are never relabeled.
struct HighTransition {
    model::StateVector start_state;
    double goal = 0.0;        // raw
    double reward_sum = 0.0;  // summed extrinsic reward of the layer's kernel steps
    model::StateVector next_start_state;
    bool done = false;
    std::vector<model::StateVector> states;
    std::vector<double> actions;
};

template <typename T>
class ReplayBuffer {
public:
    explicit ReplayBuffer(size_t capacity) : capacity_(capacity) {
        if (capacity_ == 0) throw ValidationError("replay buffer: zero capacity");
    }

    void push(T item) {
        if (data_.size() < capacity_) {
            data_.push_back(std::move(item));
        } else {
            data_[next_] = std::move(item);   // FIFO overwrite
            next_ = (next_ + 1) % capacity_;
        }
    }

    size_t size() const { return data_.size(); }
    size_t capacity() const { return capacity_; }
    const T& operator[](size_t i) const { return data_[i]; }
    T& operator[](size_t i) { return data_[i]; }

    /// Uniform sample with replacement.
    std::vector<size_t> sample_indices(size_t n, Rng& rng) const {
        if (data_.empty()) throw ValidationError("replay buffer: empty");
        std::vector<size_t> idx(n);
        for (auto& i : idx) i = static_cast<size_t>(rng.integer(data_.size()));
        return idx;
    }

private:
    std::vector<T> data_;
    size_t next_ = 0;
    size_t capacity_;
};

namespace detail {

inline Eigen::RowVectorXd to_row(std::span<const double> v) {
    Eigen::RowVectorXd r(static_cast<long>(v.size()));
    for (size_t i = 0; i < v.size(); ++i) r(static_cast<long>(i)) = v[i];
    return r;
}

} // namespace detail

/// One TD3 actor-critic pair over a fixed-size context with a scalar action
/// in [0,1]: twin critics trained against the min of the smoothed targets,
/// delayed actor updates, polyak-averaged target networks.
class Td3Controller {
public:
    Td3Controller(int context_dim, double gamma, const AgentHyper& hyper, Rng& init_rng)
        : context_dim_(context_dim), gamma_(gamma), hyper_(hyper) {
        hyper_.validate();
        if (context_dim < 1) throw ValidationError("td3: context_dim must be positive");
        const std::vector<int> actor_w{context_dim, hyper_.hidden, hyper_.hidden, 1};
        const std::vector<int> critic_w{context_dim + 1, hyper_.hidden, hyper_.hidden, 1};
        actor_ = MlpParams::make(actor_w, MlpParams::Head::Sigmoid, init_rng);
        critic1_ = MlpParams::make(critic_w, MlpParams::Head::Identity, init_rng);
        critic2_ = MlpParams::make(critic_w, MlpParams::Head::Identity, init_rng);
        actor_target_ = actor_;
        critic1_target_ = critic1_;
        critic2_target_ = critic2_;
        actor_opt_ = AdamState::like(actor_);
        critic1_opt_ = AdamState::like(critic1_);
        critic2_opt_ = AdamState::like(critic2_);
    }

    int context_dim() const { return context_dim_; }
    double gamma() const { return gamma_; }
    const AgentHyper& hyper() const { return hyper_; }
    long long update_count() const { return update_count_; }

    double act_mean(std::span<const double> context) const {
        check_context(context);
        return mlp_forward(actor_, detail::to_row(context))(0, 0);
    }

    /// Actor mean plus clamped Gaussian exploration noise.
    double act_noisy(std::span<const double> context, double sigma, Rng& rng) const {
        const double mean = act_mean(context);
        return std::clamp(mean + (sigma > 0.0 ? rng.normal(0.0, sigma) : 0.0), 0.0, 1.0);
    }

    double q1(std::span<const double> context, double action) const {
        check_context(context);
        Eigen::RowVectorXd in(context_dim_ + 1);
        in.head(context_dim_) = detail::to_row(context);
        in(context_dim_) = action;
        return mlp_forward(critic1_, in)(0, 0);
    }

    struct Batch {
        Eigen::MatrixXd context;        // [B x context_dim]
        Eigen::VectorXd action;         // [B]
        Eigen::VectorXd reward;         // [B]
        Eigen::MatrixXd next_context;   // [B x context_dim]
        Eigen::VectorXd done;           // [B] in {0,1}
    };

    /// r + gamma * (1 - done) * min(Q1', Q2') at the smoothed target action.
    Eigen::VectorXd td_targets(const Batch& batch, Rng& rng) const {
        const long B = batch.context.rows();
        Eigen::MatrixXd next_action = mlp_forward(actor_target_, batch.next_context);
        for (long i = 0; i < B; ++i) {
            const double noise = std::clamp(rng.normal(0.0, hyper_.target_noise),
                                            -hyper_.target_noise_clip, hyper_.target_noise_clip);
            next_action(i, 0) = std::clamp(next_action(i, 0) + noise, 0.0, 1.0);
        }
        Eigen::MatrixXd next_in(B, context_dim_ + 1);
        next_in.leftCols(context_dim_) = batch.next_context;
        next_in.col(context_dim_) = next_action.col(0);
        const Eigen::VectorXd q1t = mlp_forward(critic1_target_, next_in).col(0);
        const Eigen::VectorXd q2t = mlp_forward(critic2_target_, next_in).col(0);
        return batch.reward.array() +
               gamma_ * (1.0 - batch.done.array()) * q1t.cwiseMin(q2t).array();
    }

    /// One TD3 gradient step: both critics toward the TD targets, the actor
    /// (every policy_delay updates) up critic 1, then polyak target updates.
    void update(const Batch& batch, Rng& rng) {
        const long B = batch.context.rows();
        if (B == 0) throw ValidationError("td3: empty batch");
        if (batch.context.cols() != context_dim_ || batch.next_context.cols() != context_dim_)
            throw ValidationError("td3: batch context width mismatch");
        const Eigen::VectorXd y = td_targets(batch, rng);

        Eigen::MatrixXd in(B, context_dim_ + 1);
        in.leftCols(context_dim_) = batch.context;
        in.col(context_dim_) = batch.action;
        for (auto [critic, opt] : {std::pair{&critic1_, &critic1_opt_},
                                   std::pair{&critic2_, &critic2_opt_}}) {
            ForwardCache cache;
            const Eigen::VectorXd q = mlp_forward(*critic, in, &cache).col(0);
            Eigen::MatrixXd upstream = (2.0 / static_cast<double>(B)) * (q - y);
            auto grads = mlp_gradients(*critic, cache, upstream);
            adam_step(*critic, grads, hyper_.critic_lr, *opt);
        }

        ++update_count_;
        if (update_count_ % hyper_.policy_delay == 0) {
            ForwardCache actor_cache;
            const Eigen::MatrixXd a = mlp_forward(actor_, batch.context, &actor_cache);
            Eigen::MatrixXd critic_in(B, context_dim_ + 1);
            critic_in.leftCols(context_dim_) = batch.context;
            critic_in.col(context_dim_) = a.col(0);
            ForwardCache critic_cache;
            mlp_forward(critic1_, critic_in, &critic_cache);
            Eigen::MatrixXd up = Eigen::MatrixXd::Constant(B, 1, -1.0 / static_cast<double>(B));
            const auto critic_grads = mlp_gradients(critic1_, critic_cache, up);
            const Eigen::MatrixXd da = critic_grads.dX.col(context_dim_);
            auto actor_grads = mlp_gradients(actor_, actor_cache, da);
            adam_step(actor_, actor_grads, hyper_.actor_lr, actor_opt_);

            polyak_update(actor_target_, actor_, hyper_.tau);
            polyak_update(critic1_target_, critic1_, hyper_.tau);
            polyak_update(critic2_target_, critic2_, hyper_.tau);
        }
    }

    // exposed for tests (polyak checks, checkpointing, gradient oracles)
    MlpParams& actor() { return actor_; }
    const MlpParams& actor() const { return actor_; }
    MlpParams& critic1() { return critic1_; }
    const MlpParams& critic1() const { return critic1_; }
    MlpParams& critic2() { return critic2_; }
    const MlpParams& critic2() const { return critic2_; }
    MlpParams& actor_target() { return actor_target_; }
    const MlpParams& actor_target() const { return actor_target_; }
    const MlpParams& critic1_target() const { return critic1_target_; }
    const MlpParams& critic2_target() const { return critic2_target_; }
    void polyak_all(double tau) {
        polyak_update(actor_target_, actor_, tau);
        polyak_update(critic1_target_, critic1_, tau);
        polyak_update(critic2_target_, critic2_, tau);
    }

    void serialize(binio::Writer& w) const {
        w.u32(static_cast<std::uint32_t>(context_dim_));
        w.f64(gamma_);
        w.i64(update_count_);
        for (const MlpParams* p : {&actor_, &critic1_, &critic2_, &actor_target_,
                                   &critic1_target_, &critic2_target_})
            write_mlp(w, *p);
        for (const AdamState* s : {&actor_opt_, &critic1_opt_, &critic2_opt_}) write_adam(w, *s);
    }

    void deserialize(binio::Reader& r) {
        const int ctx = static_cast<int>(r.u32());
        if (ctx != context_dim_) throw ParseError("checkpoint: controller context mismatch");
        gamma_ = r.f64();
        update_count_ = r.i64();
        for (MlpParams* p : {&actor_, &critic1_, &critic2_, &actor_target_, &critic1_target_,
                             &critic2_target_})
            read_mlp(r, *p);
        for (AdamState* s : {&actor_opt_, &critic1_opt_, &critic2_opt_}) read_adam(r, *s);
    }

private:
    void check_context(std::span<const double> context) const {
        if (static_cast<int>(context.size()) != context_dim_)
            throw ValidationError("td3: context has " + std::to_string(context.size()) +
                                  " entries, expected " + std::to_string(context_dim_));
    }

    static void write_mlp(binio::Writer& w, const MlpParams& p) {
        w.u8(p.head == MlpParams::Head::Sigmoid ? 1 : 0);
        w.u32(static_cast<std::uint32_t>(p.W.size()));
        for (size_t l = 0; l < p.W.size(); ++l) {
            w.u32(static_cast<std::uint32_t>(p.W[l].rows()));
            w.u32(static_cast<std::uint32_t>(p.W[l].cols()));
            w.f64_range(p.W[l].data(), p.W[l].data() + p.W[l].size());
            w.f64_range(p.b[l].data(), p.b[l].data() + p.b[l].size());
        }
    }

    static void read_mlp(binio::Reader& r, MlpParams& p) {
        p.head = r.u8() ? MlpParams::Head::Sigmoid : MlpParams::Head::Identity;
        const auto layers = r.u32();
        p.W.assign(layers, {});
        p.b.assign(layers, {});
        for (size_t l = 0; l < layers; ++l) {
            const auto rows = r.u32(), cols = r.u32();
            p.W[l].resize(rows, cols);
            for (long i = 0; i < p.W[l].size(); ++i) p.W[l].data()[i] = r.f64();
            p.b[l].resize(rows);
            for (long i = 0; i < p.b[l].size(); ++i) p.b[l].data()[i] = r.f64();
        }
    }

    static void write_adam(binio::Writer& w, const AdamState& s) {
        w.i64(s.t);
        w.u32(static_cast<std::uint32_t>(s.mW.size()));
        for (size_t l = 0; l < s.mW.size(); ++l) {
            w.u32(static_cast<std::uint32_t>(s.mW[l].rows()));
            w.u32(static_cast<std::uint32_t>(s.mW[l].cols()));
            w.f64_range(s.mW[l].data(), s.mW[l].data() + s.mW[l].size());
            w.f64_range(s.vW[l].data(), s.vW[l].data() + s.vW[l].size());
            w.f64_range(s.mb[l].data(), s.mb[l].data() + s.mb[l].size());
            w.f64_range(s.vb[l].data(), s.vb[l].data() + s.vb[l].size());
        }
    }

    static void read_adam(binio::Reader& r, AdamState& s) {
        s.t = r.i64();
        const auto layers = r.u32();
        s.mW.assign(layers, {});
        s.vW.assign(layers, {});
        s.mb.assign(layers, {});
        s.vb.assign(layers, {});
        for (size_t l = 0; l < layers; ++l) {
            const auto rows = r.u32(), cols = r.u32();
            s.mW[l].resize(rows, cols);
            s.vW[l].resize(rows, cols);
            s.mb[l].resize(rows);
            s.vb[l].resize(rows);
            for (long i = 0; i < s.mW[l].size(); ++i) s.mW[l].data()[i] = r.f64();
            for (long i = 0; i < s.vW[l].size(); ++i) s.vW[l].data()[i] = r.f64();
            for (long i = 0; i < s.mb[l].size(); ++i) s.mb[l].data()[i] = r.f64();
            for (long i = 0; i < s.vb[l].size(); ++i) s.vb[l].data()[i] = r.f64();
        }
    }

    int context_dim_;
    double gamma_;
    AgentHyper hyper_;
    long long update_count_ = 0;
    MlpParams actor_, critic1_, critic2_;
    MlpParams actor_target_, critic1_target_, critic2_target_;
    AdamState actor_opt_, critic1_opt_, critic2_opt_;
};

// --- contexts and selection -----------------------------------------------------

inline std::vector<double> hlc_context(const model::StateVector& s) {
    return std::vector<double>(s.v.begin(), s.v.end());
}

inline std::vector<double> llc_context(const model::StateVector& s, double goal) {
    std::vector<double> ctx(s.v.begin(), s.v.end());
    ctx.push_back(goal);
    return ctx;
}

inline double select_goal(const Td3Controller& hlc, const model::StateVector& state, double sigma,
                          Rng& rng) {
    return hlc.act_noisy(hlc_context(state), sigma, rng);
}

inline double select_action(const Td3Controller& llc, const model::StateVector& state, double goal,
                            double sigma, Rng& rng) {
    return llc.act_noisy(llc_context(state, goal), sigma, rng);
}

// --- hierarchical transitions ----------------------------------------------------

struct LayerRollout {
    model::StateVector start_state;              // state at (layer, kernel 0)
    double goal_raw = 0.0;                       // weight goal, raw
    std::vector<model::StateVector> states;      // per kernel
    std::vector<double> actions;                 // executed raw actions
    std::vector<double> erds;                    // per-kernel extrinsic rewards
    model::StateVector next_start_state;         // state at (layer+1, kernel 0)
    bool done = false;                           // last layer of the episode
};

inline HighTransition make_high_transition(const LayerRollout& rollout) {
    if (rollout.states.empty() || rollout.states.size() != rollout.actions.size() ||
        rollout.states.size() != rollout.erds.size())
        throw ValidationError("make_high_transition: inconsistent rollout sequences");
    HighTransition ht;
    ht.start_state = rollout.start_state;
    ht.goal = rollout.goal_raw;
    ht.reward_sum = 0.0;
    for (double e : rollout.erds) ht.reward_sum += e;
    ht.next_start_state = rollout.next_start_state;
    ht.done = rollout.done;
    ht.states = rollout.states;
    ht.actions = rollout.actions;
    return ht;
}

/// Off-policy goal correction: pick, among the original goal, the goal the
/// executed actions would have completed exactly, and 8 Gaussian samples
/// around the original, the candidate whose conditioned LLC best reproduces
/// the stored actions. Ties go to the smaller goal. Activation-goal
/// transitions (no stored sequences) keep their goal.
inline double relabel_goal(const HighTransition& ht, const Td3Controller& llc,
                           const AgentHyper& hyper, Rng& rng) {
    if (ht.states.empty()) return ht.goal;
    std::vector<double> candidates;
    candidates.push_back(ht.goal);
    double qbn_sum = 0.0;
    for (double a : ht.actions) qbn_sum += env::map_action(a);
    const double avg_qbn = qbn_sum / static_cast<double>(ht.actions.size());
    candidates.push_back(std::clamp((avg_qbn - 1.0) / (model::kMaxQbn - 1), 0.0, 1.0));
    for (int i = 0; i < hyper.relabel_samples; ++i)
        candidates.push_back(std::clamp(rng.normal(ht.goal, hyper.relabel_std), 0.0, 1.0));

    std::sort(candidates.begin(), candidates.end());   // ties resolve to the smaller goal
    double best_goal = candidates.front();
    double best_score = -std::numeric_limits<double>::infinity();
    for (double g : candidates) {
        double score = 0.0;
        for (size_t j = 0; j < ht.states.size(); ++j) {
            const double mu = llc.act_mean(llc_context(ht.states[j], g));
            const double d = ht.actions[j] - mu;
            score -= d * d;
        }
        if (score > best_score) {
            best_score = score;
            best_goal = g;
        }
    }
    return best_goal;
}

// --- batched updates --------------------------------------------------------------

inline Td3Controller::Batch low_batch(const ReplayBuffer<LowTransition>& buffer,
                                      const std::vector<size_t>& idx) {
    const long B = static_cast<long>(idx.size());
    Td3Controller::Batch b;
    const int dim = model::kStateDim + 1;
    b.context.resize(B, dim);
    b.next_context.resize(B, dim);
    b.action.resize(B);
    b.reward.resize(B);
    b.done.resize(B);
    for (long i = 0; i < B; ++i) {
        const LowTransition& t = buffer[idx[static_cast<size_t>(i)]];
        for (int c = 0; c < model::kStateDim; ++c) {
            b.context(i, c) = t.state.v[static_cast<size_t>(c)];
            b.next_context(i, c) = t.next_state.v[static_cast<size_t>(c)];
        }
        b.context(i, model::kStateDim) = t.goal;
        b.next_context(i, model::kStateDim) = t.goal;
        b.action(i) = t.action;
        b.reward(i) = t.reward;
        b.done(i) = t.done ? 1.0 : 0.0;
    }
    return b;
}

inline void llc_td3_update(Td3Controller& llc, const ReplayBuffer<LowTransition>& buffer,
                           Rng& rng) {
    const auto idx = buffer.sample_indices(static_cast<size_t>(llc.hyper().batch), rng);
    llc.update(low_batch(buffer, idx), rng);
}

/// Goals are relabeled against the current LLC before every sampled batch.
inline Td3Controller::Batch high_batch(const ReplayBuffer<HighTransition>& buffer,
                                       const std::vector<size_t>& idx, const Td3Controller& llc,
                                       const AgentHyper& hyper, Rng& rng) {
    const long B = static_cast<long>(idx.size());
    Td3Controller::Batch b;
    b.context.resize(B, model::kStateDim);
    b.next_context.resize(B, model::kStateDim);
    b.action.resize(B);
    b.reward.resize(B);
    b.done.resize(B);
    for (long i = 0; i < B; ++i) {
        const HighTransition& t = buffer[idx[static_cast<size_t>(i)]];
        for (int c = 0; c < model::kStateDim; ++c) {
            b.context(i, c) = t.start_state.v[static_cast<size_t>(c)];
            b.next_context(i, c) = t.next_start_state.v[static_cast<size_t>(c)];
        }
        b.action(i) = relabel_goal(t, llc, hyper, rng);
        b.reward(i) = t.reward_sum;
        b.done(i) = t.done ? 1.0 : 0.0;
    }
    return b;
}

inline void hlc_td3_update(Td3Controller& hlc, const ReplayBuffer<HighTransition>& buffer,
                           const Td3Controller& llc, Rng& rng) {
    const auto idx = buffer.sample_indices(static_cast<size_t>(hlc.hyper().batch), rng);
    hlc.update(high_batch(buffer, idx, llc, hlc.hyper(), rng), rng);
}

} // namespace autoq::agent
