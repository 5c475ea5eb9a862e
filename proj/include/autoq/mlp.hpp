#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "autoq/errors.hpp"
#include "autoq/rng.hpp"

namespace autoq::agent {

/// Dense rectifier network: affine layers with ReLU between them and either a
/// sigmoid or an identity head. Batches are row-major (one sample per row).
struct MlpParams {
    enum class Head { Sigmoid, Identity };

    std::vector<Eigen::MatrixXd> W;   // [layer] out x in
    std::vector<Eigen::VectorXd> b;   // [layer] out
    Head head = Head::Identity;

    int input_dim() const { return static_cast<int>(W.front().cols()); }
    int output_dim() const { return static_cast<int>(W.back().rows()); }
    size_t n_layers() const { return W.size(); }

    static MlpParams make(const std::vector<int>& widths, Head head, Rng& rng) {
        if (widths.size() < 2) throw ValidationError("mlp: need at least input and output widths");
        MlpParams p;
        p.head = head;
        for (size_t l = 0; l + 1 < widths.size(); ++l) {
            const int in = widths[l], out = widths[l + 1];
            if (in < 1 || out < 1) throw ValidationError("mlp: widths must be positive");
            const double bound = 1.0 / std::sqrt(static_cast<double>(in));
            Eigen::MatrixXd w(out, in);
            for (int r = 0; r < out; ++r)
                for (int c = 0; c < in; ++c) w(r, c) = rng.uniform(-bound, bound);
            Eigen::VectorXd bias(out);
            for (int r = 0; r < out; ++r) bias(r) = rng.uniform(-bound, bound);
            p.W.push_back(std::move(w));
            p.b.push_back(std::move(bias));
        }
        return p;
    }
};

struct ForwardCache {
    std::vector<Eigen::MatrixXd> act;   // act[0] = input, act[l+1] = layer l output
};

inline Eigen::MatrixXd mlp_forward(const MlpParams& p, const Eigen::MatrixXd& x,
                                   ForwardCache* cache = nullptr) {
    if (x.cols() != p.input_dim())
        throw ValidationError("mlp_forward: input has " + std::to_string(x.cols()) +
                              " columns, expected " + std::to_string(p.input_dim()));
    if (cache) {
        cache->act.clear();
        cache->act.push_back(x);
    }
    Eigen::MatrixXd a = x;
    for (size_t l = 0; l < p.W.size(); ++l) {
        Eigen::MatrixXd z = a * p.W[l].transpose();
        z.rowwise() += p.b[l].transpose();
        if (l + 1 < p.W.size()) {
            a = z.cwiseMax(0.0);
        } else if (p.head == MlpParams::Head::Sigmoid) {
            a = (1.0 + (-z.array()).exp()).inverse().matrix();
        } else {
            a = std::move(z);
        }
        if (cache) cache->act.push_back(a);
    }
    return a;
}

struct MlpGrads {
    std::vector<Eigen::MatrixXd> dW;
    std::vector<Eigen::VectorXd> db;
    Eigen::MatrixXd dX;
};

/// Exact gradients of the forward map contracted with `upstream`
/// (same shape as the output). Also returns the input gradient so callers can
/// chain through composed networks.
inline MlpGrads mlp_gradients(const MlpParams& p, const ForwardCache& cache,
                              const Eigen::MatrixXd& upstream) {
    if (cache.act.size() != p.W.size() + 1)
        throw ValidationError("mlp_gradients: cache does not match network depth");
    if (upstream.rows() != cache.act.back().rows() || upstream.cols() != cache.act.back().cols())
        throw ValidationError("mlp_gradients: upstream gradient shape mismatch");
    MlpGrads g;
    g.dW.resize(p.W.size());
    g.db.resize(p.W.size());
    Eigen::MatrixXd delta;   // gradient w.r.t. layer pre-activation
    const size_t last = p.W.size() - 1;
    if (p.head == MlpParams::Head::Sigmoid) {
        const auto& y = cache.act[last + 1].array();
        delta = (upstream.array() * y * (1.0 - y)).matrix();
    } else {
        delta = upstream;
    }
    for (size_t l = last + 1; l-- > 0;) {
        g.dW[l] = delta.transpose() * cache.act[l];
        g.db[l] = delta.colwise().sum().transpose();
        Eigen::MatrixXd da = delta * p.W[l];
        if (l > 0) {
            // ReLU mask from the cached post-activation
            delta = (da.array() * (cache.act[l].array() > 0.0).cast<double>()).matrix();
        } else {
            g.dX = std::move(da);
        }
    }
    return g;
}

struct AdamState {
    std::vector<Eigen::MatrixXd> mW, vW;
    std::vector<Eigen::VectorXd> mb, vb;
    long long t = 0;

    static AdamState like(const MlpParams& p) {
        AdamState s;
        for (size_t l = 0; l < p.W.size(); ++l) {
            s.mW.push_back(Eigen::MatrixXd::Zero(p.W[l].rows(), p.W[l].cols()));
            s.vW.push_back(Eigen::MatrixXd::Zero(p.W[l].rows(), p.W[l].cols()));
            s.mb.push_back(Eigen::VectorXd::Zero(p.b[l].size()));
            s.vb.push_back(Eigen::VectorXd::Zero(p.b[l].size()));
        }
        return s;
    }
};

inline void adam_step(MlpParams& p, const MlpGrads& g, double lr, AdamState& state,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (g.dW.size() != p.W.size()) throw ValidationError("adam_step: gradient shape mismatch");
    ++state.t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (size_t l = 0; l < p.W.size(); ++l) {
        state.mW[l] = beta1 * state.mW[l] + (1.0 - beta1) * g.dW[l];
        state.vW[l] = beta2 * state.vW[l].array().matrix() +
                      (1.0 - beta2) * g.dW[l].array().square().matrix();
        p.W[l].array() -= lr * (state.mW[l].array() / c1) /
                          ((state.vW[l].array() / c2).sqrt() + eps);
        state.mb[l] = beta1 * state.mb[l] + (1.0 - beta1) * g.db[l];
        state.vb[l] = beta2 * state.vb[l].array().matrix() +
                      (1.0 - beta2) * g.db[l].array().square().matrix();
        p.b[l].array() -= lr * (state.mb[l].array() / c1) /
                          ((state.vb[l].array() / c2).sqrt() + eps);
    }
}

/// target <- tau * online + (1 - tau) * target
inline void polyak_update(MlpParams& target, const MlpParams& online, double tau) {
    for (size_t l = 0; l < target.W.size(); ++l) {
        target.W[l] = tau * online.W[l] + (1.0 - tau) * target.W[l];
        target.b[l] = tau * online.b[l] + (1.0 - tau) * target.b[l];
    }
}

} // namespace autoq::agent
