#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "autoq/errors.hpp"
#include "autoq/model.hpp"
#include "autoq/quantize.hpp"

namespace autoq::accuracy {

/// Sensitivities measure how much accuracy one component costs when fully
/// pruned; the proxy subtracts s * 2^(-2*qbn) per component. Their total is
/// capped at 2 so the proxy stays in a meaningful range.
struct AccuracyModelParams {
    double acc_fp = 1.0;
    std::vector<std::vector<double>> kernel_sensitivity;   // [layer][kernel]
    std::vector<double> act_sensitivity;                   // [layer]

    void validate() const {
        if (!(acc_fp >= 0.0 && acc_fp <= 1.0))
            throw ValidationError("accuracy params: acc_fp outside [0,1]");
        double total = 0.0;
        for (const auto& layer : kernel_sensitivity)
            for (double s : layer) {
                if (!(s >= 0.0) || !std::isfinite(s))
                    throw ValidationError("accuracy params: kernel sensitivity must be finite and >= 0");
                total += s;
            }
        for (double s : act_sensitivity) {
            if (!(s >= 0.0) || !std::isfinite(s))
                throw ValidationError("accuracy params: act sensitivity must be finite and >= 0");
            total += s;
        }
        if (total > 2.0 + 1e-12)
            throw ValidationError("accuracy params: sensitivities sum to " + std::to_string(total) +
                                  ", cap is 2");
    }
};

/// Kernel sensitivities are variance*macs shares scaled to a total budget of
/// kappa; activation sensitivities are act_sensitivity shares scaled to
/// kappa_a. Explicit per-kernel sensitivities in the spec file (all kernels or
/// none) bypass the derivation.
inline AccuracyModelParams derive_sensitivities(const model::NetworkSpec& net, double kappa = 0.5,
                                                double kappa_a = 0.2) {
    net.validate();
    AccuracyModelParams params;
    params.acc_fp = net.acc_fp;

    size_t explicit_count = 0, kernel_count = 0;
    for (const auto& layer : net.kernel_stats)
        for (const auto& ks : layer) {
            ++kernel_count;
            if (ks.sensitivity) ++explicit_count;
        }
    if (explicit_count > 0 && explicit_count < kernel_count)
        throw ValidationError("derive_sensitivities: explicit kernel sensitivities must cover all "
                              "kernels or none");

    if (explicit_count == kernel_count) {
        for (const auto& layer : net.kernel_stats) {
            auto& out = params.kernel_sensitivity.emplace_back();
            for (const auto& ks : layer) out.push_back(*ks.sensitivity);
        }
    } else {
        double total = 0.0;
        for (size_t i = 0; i < net.kernel_stats.size(); ++i)
            for (const auto& ks : net.kernel_stats[i])
                total += ks.variance * static_cast<double>(net.layers[i].macs_per_kernel);
        if (total <= 0.0)
            throw ValidationError("derive_sensitivities: all variances are zero; provide explicit "
                                  "sensitivities");
        for (size_t i = 0; i < net.kernel_stats.size(); ++i) {
            auto& out = params.kernel_sensitivity.emplace_back();
            for (const auto& ks : net.kernel_stats[i])
                out.push_back(kappa * ks.variance *
                              static_cast<double>(net.layers[i].macs_per_kernel) / total);
        }
    }

    const double act_total =
        std::accumulate(net.act_sensitivity.begin(), net.act_sensitivity.end(), 0.0);
    for (double a : net.act_sensitivity)
        params.act_sensitivity.push_back(act_total > 0.0 ? kappa_a * a / act_total : 0.0);

    params.validate();
    return params;
}

/// acc_fp minus quantization-noise penalties, clamped to [0,1]. A pruned
/// kernel (qbn 0) pays its full sensitivity.
inline double proxy_accuracy(const AccuracyModelParams& params, const model::QbnPolicy& policy) {
    if (policy.act_qbn.size() != params.act_sensitivity.size() ||
        policy.weight_qbn.size() != params.kernel_sensitivity.size())
        throw ValidationError("proxy_accuracy: layer count mismatch");
    double penalty = 0.0;
    for (size_t i = 0; i < policy.weight_qbn.size(); ++i) {
        if (policy.weight_qbn[i].size() != params.kernel_sensitivity[i].size())
            throw ValidationError("proxy_accuracy: kernel count mismatch in layer " + std::to_string(i));
        for (size_t k = 0; k < policy.weight_qbn[i].size(); ++k)
            penalty += params.kernel_sensitivity[i][k] *
                       std::exp2(-2.0 * policy.weight_qbn[i][k]);
        penalty += params.act_sensitivity[i] * std::exp2(-2.0 * policy.act_qbn[i]);
    }
    return std::clamp(params.acc_fp - penalty, 0.0, 1.0);
}

// --- frozen-weight fixed-point inference oracle --------------------------------

struct Sample {
    std::vector<double> features;
    int label = 0;
};

using Dataset = std::vector<Sample>;

inline Dataset parse_dataset(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("dataset: ") + e.what());
    }
    if (!j.is_array()) throw ParseError("dataset: expected a JSON array");
    Dataset ds;
    for (const auto& js : j) {
        Sample s;
        try {
            s.features = js.at("features").get<std::vector<double>>();
            s.label = js.at("label").get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("dataset sample ") + std::to_string(ds.size()) + ": " + e.what());
        }
        if (s.features.empty()) throw ParseError("dataset sample " + std::to_string(ds.size()) + ": empty features");
        ds.push_back(std::move(s));
    }
    return ds;
}

namespace detail {

struct Tensor {
    int channels = 0, h = 0, w = 0;
    std::vector<double> data;   // channel-major

    double& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * h + y) * w + x]; }
    double at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * h + y) * w + x]; }
};

inline size_t expected_kernel_weights(const model::LayerSpec& l) {
    switch (l.kind) {
        case model::LayerKind::Conv: return static_cast<size_t>(l.c_in) * l.kernel_w * l.kernel_h;
        case model::LayerKind::DepthwiseConv: return static_cast<size_t>(l.kernel_w) * l.kernel_h;
        case model::LayerKind::FullyConnected: return static_cast<size_t>(l.c_in);
    }
    return 0;
}

inline void quantize_acts(Tensor& t, int bits, double calib_max) {
    const double levels = std::exp2(bits) - 1.0;
    const double step = std::max(calib_max, 1e-12) / levels;
    for (double& v : t.data) {
        const double q = std::round(std::clamp(v, 0.0, calib_max) / step);
        v = std::min(q, levels) * step;
    }
}

/// One layer forward on already-quantized inputs with per-kernel weight
/// vectors; hidden layers apply ReLU, the last layer is left linear.
inline Tensor layer_forward(const model::LayerSpec& l,
                            const std::vector<std::vector<double>>& kernels, const Tensor& in,
                            bool relu) {
    Tensor out;
    if (l.kind == model::LayerKind::FullyConnected) {
        if (static_cast<size_t>(l.c_in) != in.data.size())
            throw ValidationError("inference: layer " + std::to_string(l.index) + " expects " +
                                  std::to_string(l.c_in) + " inputs, got " +
                                  std::to_string(in.data.size()));
        out.channels = l.c_out;
        out.h = out.w = 1;
        out.data.resize(static_cast<size_t>(l.c_out));
        for (int k = 0; k < l.c_out; ++k) {
            double acc = 0.0;
            for (size_t j = 0; j < in.data.size(); ++j) acc += kernels[k][j] * in.data[j];
            out.data[static_cast<size_t>(k)] = relu ? std::max(acc, 0.0) : acc;
        }
        return out;
    }
    if (in.channels != l.c_in || in.h != l.feat_h || in.w != l.feat_w)
        throw ValidationError("inference: layer " + std::to_string(l.index) +
                              " input tensor shape mismatch");
    const int oh = (l.feat_h - l.kernel_h) / l.stride + 1;
    const int ow = (l.feat_w - l.kernel_w) / l.stride + 1;
    if (oh < 1 || ow < 1)
        throw ValidationError("inference: layer " + std::to_string(l.index) + " output is empty");
    out.channels = l.c_out;
    out.h = oh;
    out.w = ow;
    out.data.assign(static_cast<size_t>(l.c_out) * oh * ow, 0.0);
    const bool depthwise = l.kind == model::LayerKind::DepthwiseConv;
    for (int k = 0; k < l.c_out; ++k) {
        const auto& ker = kernels[k];
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                double acc = 0.0;
                if (depthwise) {
                    for (int dy = 0; dy < l.kernel_h; ++dy)
                        for (int dx = 0; dx < l.kernel_w; ++dx)
                            acc += ker[static_cast<size_t>(dy) * l.kernel_w + dx] *
                                   in.at(k, y * l.stride + dy, x * l.stride + dx);
                } else {
                    size_t wi = 0;
                    for (int c = 0; c < l.c_in; ++c)
                        for (int dy = 0; dy < l.kernel_h; ++dy)
                            for (int dx = 0; dx < l.kernel_w; ++dx)
                                acc += ker[wi++] * in.at(c, y * l.stride + dy, x * l.stride + dx);
                }
                out.at(k, y, x) = relu ? std::max(acc, 0.0) : acc;
            }
    }
    return out;
}

inline Tensor input_tensor(const model::LayerSpec& first, const Sample& s) {
    Tensor t;
    if (first.kind == model::LayerKind::FullyConnected) {
        t.channels = static_cast<int>(s.features.size());
        t.h = t.w = 1;
    } else {
        t.channels = first.c_in;
        t.h = first.feat_h;
        t.w = first.feat_w;
        if (s.features.size() != static_cast<size_t>(first.c_in) * first.feat_h * first.feat_w)
            throw ValidationError("inference: sample has " + std::to_string(s.features.size()) +
                                  " features, first layer expects " +
                                  std::to_string(static_cast<size_t>(first.c_in) * first.feat_h * first.feat_w));
    }
    t.data = s.features;
    return t;
}

inline int argmax_label(const Tensor& t) {
    int best = 0;
    for (size_t i = 1; i < t.data.size(); ++i)
        if (t.data[i] > t.data[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
}

} // namespace detail

inline constexpr int kCalibrationSamples = 32;

/// Quantizes every kernel with the learned-basis quantizer at its policy QBN
/// (pruned kernels become all-zero), clamps-and-rounds each layer's input
/// activations to act_qbn-bit unsigned fixed point calibrated on the first 32
/// samples, and reports top-1 accuracy of the resulting forward pass.
/// Hidden layers use ReLU; the output layer is linear; argmax ties resolve to
/// the smallest label.
inline double frozen_inference_accuracy(const model::NetworkSpec& net,
                                        const model::QbnPolicy& policy, const Dataset& dataset,
                                        int quant_iters = 30) {
    net.validate();
    policy.validate(net);
    if (!net.has_weights()) throw ValidationError("frozen_inference_accuracy: network has no weights");
    if (dataset.empty()) throw ValidationError("frozen_inference_accuracy: empty dataset");
    for (size_t i = 0; i < net.layers.size(); ++i)
        for (size_t k = 0; k < net.weights[i].size(); ++k)
            if (net.weights[i][k].size() != detail::expected_kernel_weights(net.layers[i]))
                throw ValidationError("frozen_inference_accuracy: layer " + std::to_string(i) +
                                      " kernel " + std::to_string(k) + " has " +
                                      std::to_string(net.weights[i][k].size()) + " weights, expected " +
                                      std::to_string(detail::expected_kernel_weights(net.layers[i])));

    const int n_layer = net.n_layer();
    // full-precision calibration pass: max input activation per layer
    std::vector<double> calib_max(static_cast<size_t>(n_layer), 0.0);
    const size_t n_calib = std::min<size_t>(dataset.size(), kCalibrationSamples);
    for (size_t si = 0; si < n_calib; ++si) {
        detail::Tensor t = detail::input_tensor(net.layers[0], dataset[si]);
        for (int li = 0; li < n_layer; ++li) {
            for (double v : t.data)
                calib_max[static_cast<size_t>(li)] = std::max(calib_max[static_cast<size_t>(li)], v);
            t = detail::layer_forward(net.layers[static_cast<size_t>(li)],
                                      net.weights[static_cast<size_t>(li)], t, li + 1 < n_layer);
        }
    }

    // per-kernel quantized weights at the policy's QBNs
    std::vector<std::vector<std::vector<double>>> qweights(static_cast<size_t>(n_layer));
    for (int li = 0; li < n_layer; ++li) {
        const auto& layer_w = net.weights[static_cast<size_t>(li)];
        auto& out = qweights[static_cast<size_t>(li)];
        for (size_t k = 0; k < layer_w.size(); ++k) {
            const int bits = policy.weight_qbn[static_cast<size_t>(li)][k];
            if (bits == 0) {
                out.emplace_back(layer_w[k].size(), 0.0);
            } else {
                auto q = quantize::quantize_learned_basis(layer_w[k], bits, quant_iters);
                out.push_back(quantize::dequantize(q));
            }
        }
    }

    size_t correct = 0;
    for (const auto& sample : dataset) {
        detail::Tensor t = detail::input_tensor(net.layers[0], sample);
        for (int li = 0; li < n_layer; ++li) {
            detail::quantize_acts(t, policy.act_qbn[static_cast<size_t>(li)],
                                  calib_max[static_cast<size_t>(li)]);
            t = detail::layer_forward(net.layers[static_cast<size_t>(li)],
                                      qweights[static_cast<size_t>(li)], t, li + 1 < n_layer);
        }
        if (detail::argmax_label(t) == sample.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

/// Full-precision labels from the same forward pass (used by tests to compare
/// against the quantized path).
inline std::vector<int> full_precision_labels(const model::NetworkSpec& net, const Dataset& dataset) {
    net.validate();
    if (!net.has_weights()) throw ValidationError("full_precision_labels: network has no weights");
    std::vector<int> labels;
    for (const auto& sample : dataset) {
        detail::Tensor t = detail::input_tensor(net.layers[0], sample);
        for (int li = 0; li < net.n_layer(); ++li)
            t = detail::layer_forward(net.layers[static_cast<size_t>(li)],
                                      net.weights[static_cast<size_t>(li)], t, li + 1 < net.n_layer());
        labels.push_back(detail::argmax_label(t));
    }
    return labels;
}

} // namespace autoq::accuracy
