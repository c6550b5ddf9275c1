#pragma once

// Minimal feed-forward network: dense and 2-D convolution layers, relu/tanh
// activations, flatten, and a softmax-cross-entropy head. The engine exists
// to produce per-sample weight gradients; batches are row-major matrices
// (one sample per row) and every pass is single-threaded and deterministic.
//
// Dense layers follow the input-major convention: W is (in x out) and a
// sample row x maps to y = x W + b. Conv kernels are (out, in, k, k); their
// per-sample gradients are accumulated over unfolded input patches, i.e. on
// the flattened (out x in*k*k) weight matrix.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lsg/matrix.hpp"
#include "lsg/rng.hpp"

namespace lsg {

enum class LayerKind { dense, conv2d, relu, tanh_act, flatten, softmax_ce };

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    std::size_t in = 0, out = 0;            // dense: units; conv: channels
    std::size_t kernel = 0, stride = 1, padding = 0;

    static LayerSpec dense_spec(std::size_t in, std::size_t out) {
        LayerSpec s;
        s.kind = LayerKind::dense;
        s.in = in;
        s.out = out;
        return s;
    }
    static LayerSpec conv_spec(std::size_t in, std::size_t out, std::size_t kernel,
                               std::size_t stride = 1, std::size_t padding = 0) {
        LayerSpec s;
        s.kind = LayerKind::conv2d;
        s.in = in;
        s.out = out;
        s.kernel = kernel;
        s.stride = stride;
        s.padding = padding;
        return s;
    }
    static LayerSpec activation(LayerKind kind) {
        LayerSpec s;
        s.kind = kind;
        return s;
    }
};

struct Shape3 {
    std::size_t c = 1, h = 1, w = 1;
    std::size_t flat() const { return c * h * w; }
    bool operator==(const Shape3&) const = default;
};

namespace detail {

inline std::size_t conv_out_extent(std::size_t extent, std::size_t kernel, std::size_t stride,
                                   std::size_t padding) {
    const std::size_t padded = extent + 2 * padding;
    if (padded < kernel) throw std::invalid_argument("conv2d: kernel larger than padded input");
    return (padded - kernel) / stride + 1;
}

}  // namespace detail

class Network {
public:
    struct Layer {
        LayerSpec spec;
        Matrix w;            // dense: in x out
        Tensor4 kernel;      // conv
        std::vector<double> bias;
        Shape3 in_shape, out_shape;
        bool trainable() const {
            return spec.kind == LayerKind::dense || spec.kind == LayerKind::conv2d;
        }
    };

    Network() = default;

    // Validates shape conformance and initializes weights from rng: dense
    // entries are uniform +-1/sqrt(fan_in), conv entries Gaussian with
    // stddev sqrt(2/fan_in), biases zero.
    Network(const std::vector<LayerSpec>& specs, Shape3 input_shape, RngState& rng)
        : input_shape_(input_shape) {
        if (specs.empty() || specs.back().kind != LayerKind::softmax_ce)
            throw std::invalid_argument("network: last layer must be the softmax-ce head");
        Shape3 cur = input_shape;
        for (std::size_t idx = 0; idx < specs.size(); ++idx) {
            const LayerSpec& spec = specs[idx];
            if (spec.kind == LayerKind::softmax_ce) {
                if (idx + 1 != specs.size())
                    throw std::invalid_argument("network: loss head must be last and unique");
                classes_ = cur.flat();
                continue;
            }
            Layer layer;
            layer.spec = spec;
            layer.in_shape = cur;
            switch (spec.kind) {
                case LayerKind::dense: {
                    if (spec.in != cur.flat())
                        throw std::invalid_argument("network: dense input dim mismatch");
                    layer.w = Matrix(spec.in, spec.out);
                    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.in));
                    for (double& v : layer.w.data)
                        v = (2.0 * rng.next_unit() - 1.0) * bound;
                    layer.bias.assign(spec.out, 0.0);
                    cur = Shape3{1, 1, spec.out};
                    break;
                }
                case LayerKind::conv2d: {
                    if (spec.in != cur.c)
                        throw std::invalid_argument("network: conv input channels mismatch");
                    const std::size_t oh =
                        detail::conv_out_extent(cur.h, spec.kernel, spec.stride, spec.padding);
                    const std::size_t ow =
                        detail::conv_out_extent(cur.w, spec.kernel, spec.stride, spec.padding);
                    layer.kernel = Tensor4(spec.out, spec.in, spec.kernel, spec.kernel);
                    const double std =
                        std::sqrt(2.0 / static_cast<double>(spec.in * spec.kernel * spec.kernel));
                    for (double& v : layer.kernel.data) v = rng.next_gaussian(std);
                    layer.bias.assign(spec.out, 0.0);
                    cur = Shape3{spec.out, oh, ow};
                    break;
                }
                case LayerKind::relu:
                case LayerKind::tanh_act:
                    break;
                case LayerKind::flatten:
                    cur = Shape3{1, 1, cur.flat()};
                    break;
                default:
                    throw std::invalid_argument("network: unsupported layer kind");
            }
            layer.out_shape = cur;
            layers_.push_back(std::move(layer));
            if (layers_.back().trainable()) trainable_.push_back(layers_.size() - 1);
        }
        if (classes_ < 2) throw std::invalid_argument("network: need at least 2 classes");
    }

    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& layers() { return layers_; }
    const std::vector<std::size_t>& trainable_layers() const { return trainable_; }
    std::size_t classes() const { return classes_; }
    Shape3 input_shape() const { return input_shape_; }

    std::size_t parameter_count() const {
        std::size_t count = 0;
        for (const Layer& l : layers_) {
            if (l.spec.kind == LayerKind::dense) count += l.w.size() + l.bias.size();
            if (l.spec.kind == LayerKind::conv2d) count += l.kernel.size() + l.bias.size();
        }
        return count;
    }

private:
    std::vector<Layer> layers_;
    std::vector<std::size_t> trainable_;  // indices into layers_
    Shape3 input_shape_{};
    std::size_t classes_ = 0;
};

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

struct ForwardCache {
    // acts[i] is the input to layer i (batch x flat dim); acts.back() = logits.
    std::vector<Matrix> acts;
    const Matrix& logits() const { return acts.back(); }
};

namespace detail {

// Unfolds one sample (c,h,w row) into the patch matrix (in*k*k x positions).
inline Matrix im2col(const double* x, Shape3 in, std::size_t kernel, std::size_t stride,
                     std::size_t padding, std::size_t oh, std::size_t ow) {
    Matrix patches(in.c * kernel * kernel, oh * ow);
    for (std::size_t ic = 0; ic < in.c; ++ic)
        for (std::size_t ky = 0; ky < kernel; ++ky)
            for (std::size_t kx = 0; kx < kernel; ++kx) {
                const std::size_t q = (ic * kernel + ky) * kernel + kx;
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const auto iy = static_cast<long long>(oy * stride + ky) -
                                        static_cast<long long>(padding);
                        const auto ix = static_cast<long long>(ox * stride + kx) -
                                        static_cast<long long>(padding);
                        double v = 0.0;
                        if (iy >= 0 && ix >= 0 && iy < static_cast<long long>(in.h) &&
                            ix < static_cast<long long>(in.w))
                            v = x[(ic * in.h + static_cast<std::size_t>(iy)) * in.w +
                                  static_cast<std::size_t>(ix)];
                        patches(q, oy * ow + ox) = v;
                    }
            }
    return patches;
}

// Scatters patch-space gradients back to the input image (transpose of im2col).
inline void col2im_accumulate(const Matrix& dpatches, double* dx, Shape3 in, std::size_t kernel,
                              std::size_t stride, std::size_t padding, std::size_t oh,
                              std::size_t ow) {
    for (std::size_t ic = 0; ic < in.c; ++ic)
        for (std::size_t ky = 0; ky < kernel; ++ky)
            for (std::size_t kx = 0; kx < kernel; ++kx) {
                const std::size_t q = (ic * kernel + ky) * kernel + kx;
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const auto iy = static_cast<long long>(oy * stride + ky) -
                                        static_cast<long long>(padding);
                        const auto ix = static_cast<long long>(ox * stride + kx) -
                                        static_cast<long long>(padding);
                        if (iy >= 0 && ix >= 0 && iy < static_cast<long long>(in.h) &&
                            ix < static_cast<long long>(in.w))
                            dx[(ic * in.h + static_cast<std::size_t>(iy)) * in.w +
                               static_cast<std::size_t>(ix)] += dpatches(q, oy * ow + ox);
                    }
            }
}

}  // namespace detail

// Returns the logits (batch x classes); fills cache when given.
inline Matrix forward(const Network& net, const Matrix& batch, ForwardCache* cache = nullptr) {
    check_shapes(batch.cols == net.input_shape().flat(), "forward input dim");
    if (cache) {
        cache->acts.clear();
        cache->acts.reserve(net.layers().size() + 1);
    }
    Matrix cur = batch;
    for (const Network::Layer& layer : net.layers()) {
        if (cache) cache->acts.push_back(cur);
        Matrix next;
        switch (layer.spec.kind) {
            case LayerKind::dense: {
                next = matmul(cur, layer.w);
                for (std::size_t s = 0; s < next.rows; ++s) {
                    double* row = next.row_ptr(s);
                    for (std::size_t j = 0; j < next.cols; ++j) row[j] += layer.bias[j];
                }
                break;
            }
            case LayerKind::conv2d: {
                const Shape3 in = layer.in_shape;
                const Shape3 out = layer.out_shape;
                const Matrix wflat = flatten_conv_weight(layer.kernel);
                next = Matrix(cur.rows, out.flat());
                for (std::size_t s = 0; s < cur.rows; ++s) {
                    const Matrix patches =
                        detail::im2col(cur.row_ptr(s), in, layer.spec.kernel, layer.spec.stride,
                                       layer.spec.padding, out.h, out.w);
                    const Matrix res = matmul(wflat, patches);  // out.c x positions
                    double* row = next.row_ptr(s);
                    for (std::size_t oc = 0; oc < out.c; ++oc)
                        for (std::size_t pos = 0; pos < out.h * out.w; ++pos)
                            row[oc * out.h * out.w + pos] = res(oc, pos) + layer.bias[oc];
                }
                break;
            }
            case LayerKind::relu: {
                next = cur;
                for (double& v : next.data) v = v > 0.0 ? v : 0.0;
                break;
            }
            case LayerKind::tanh_act: {
                next = cur;
                for (double& v : next.data) v = std::tanh(v);
                break;
            }
            case LayerKind::flatten:
                next = cur;
                break;
            default:
                throw std::logic_error("forward: unexpected layer kind");
        }
        cur = std::move(next);
    }
    if (cache) cache->acts.push_back(cur);
    return cache ? cache->logits() : cur;
}

// ---------------------------------------------------------------------------
// loss and per-sample backpropagation
// ---------------------------------------------------------------------------

namespace detail {

// delta <- softmax(logits_row) - onehot(label); returns per-sample loss.
inline double softmax_ce_delta(const double* logits, std::size_t n, int label, double* delta) {
    double maxv = logits[0];
    for (std::size_t j = 1; j < n; ++j) maxv = std::max(maxv, logits[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(logits[j] - maxv);
    const double lse = maxv + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) delta[j] = std::exp(logits[j] - lse);
    delta[static_cast<std::size_t>(label)] -= 1.0;
    return lse - logits[static_cast<std::size_t>(label)];
}

}  // namespace detail

// Gradients of one sample's loss, in the compact form backpropagation
// produces them: for dense layers the (input, output-delta) pair whose outer
// product is dW; for conv layers the flattened dW accumulated over patches.
// Entries are parallel to Network::trainable_layers().
struct SampleGrad {
    std::vector<const double*> dense_x;          // dense: input row (borrowed from cache)
    std::vector<std::vector<double>> delta;      // dense: output delta; conv: bias grad
    std::vector<Matrix> conv_dw;                 // conv: out x in*k*k
    double loss = 0.0;
};

// Backpropagates one sample. `cache` must come from forward() on the same
// batch. Buffers in `out` are re-used across calls.
inline void backprop_sample(const Network& net, const ForwardCache& cache, std::size_t sample,
                            int label, SampleGrad& out) {
    const auto& layers = net.layers();
    const auto& trainables = net.trainable_layers();
    out.dense_x.assign(trainables.size(), nullptr);
    out.delta.resize(trainables.size());
    out.conv_dw.resize(trainables.size());

    const Matrix& logits = cache.logits();
    std::vector<double> delta(net.classes());
    out.loss = detail::softmax_ce_delta(logits.row_ptr(sample), net.classes(), label, delta.data());

    std::size_t t = trainables.size();
    for (std::size_t li = layers.size(); li-- > 0;) {
        const Network::Layer& layer = layers[li];
        const double* x = cache.acts[li].row_ptr(sample);
        switch (layer.spec.kind) {
            case LayerKind::dense: {
                --t;
                out.dense_x[t] = x;
                out.delta[t].assign(delta.begin(), delta.end());
                if (li > 0) {
                    std::vector<double> prev(layer.spec.in, 0.0);
                    for (std::size_t i = 0; i < layer.spec.in; ++i) {
                        const double* wrow = layer.w.row_ptr(i);
                        double s = 0.0;
                        for (std::size_t j = 0; j < layer.spec.out; ++j) s += wrow[j] * delta[j];
                        prev[i] = s;
                    }
                    delta = std::move(prev);
                }
                break;
            }
            case LayerKind::conv2d: {
                --t;
                const Shape3 in = layer.in_shape;
                const Shape3 out_shape = layer.out_shape;
                const std::size_t positions = out_shape.h * out_shape.w;
                Matrix delta_mat(out_shape.c, positions);
                for (std::size_t oc = 0; oc < out_shape.c; ++oc)
                    for (std::size_t pos = 0; pos < positions; ++pos)
                        delta_mat(oc, pos) = delta[oc * positions + pos];
                const Matrix patches =
                    detail::im2col(x, in, layer.spec.kernel, layer.spec.stride,
                                   layer.spec.padding, out_shape.h, out_shape.w);
                out.conv_dw[t] = matmul(delta_mat, transpose(patches));
                out.delta[t].assign(out_shape.c, 0.0);
                for (std::size_t oc = 0; oc < out_shape.c; ++oc)
                    for (std::size_t pos = 0; pos < positions; ++pos)
                        out.delta[t][oc] += delta_mat(oc, pos);
                if (li > 0) {
                    const Matrix wflat = flatten_conv_weight(layer.kernel);
                    const Matrix dpatches = matmul(transpose(wflat), delta_mat);
                    std::vector<double> prev(in.flat(), 0.0);
                    detail::col2im_accumulate(dpatches, prev.data(), in, layer.spec.kernel,
                                              layer.spec.stride, layer.spec.padding, out_shape.h,
                                              out_shape.w);
                    delta = std::move(prev);
                }
                break;
            }
            case LayerKind::relu:
                for (std::size_t i = 0; i < delta.size(); ++i)
                    if (x[i] <= 0.0) delta[i] = 0.0;
                break;
            case LayerKind::tanh_act: {
                const double* y = cache.acts[li + 1].row_ptr(sample);
                for (std::size_t i = 0; i < delta.size(); ++i) delta[i] *= 1.0 - y[i] * y[i];
                break;
            }
            case LayerKind::flatten:
                break;
            default:
                throw std::logic_error("backprop: unexpected layer kind");
        }
    }
}

// Fully materialized per-sample gradients (weight-shaped tensors).
struct LayerPerSampleGrads {
    bool is_conv = false;
    std::vector<Matrix> weights;    // dense: in x out, per sample
    std::vector<Tensor4> kernels;   // conv: per sample
    std::vector<std::vector<double>> biases;
};

struct PerSampleGrads {
    std::size_t batch = 0;
    std::vector<LayerPerSampleGrads> layers;  // parallel to trainable_layers()
};

inline PerSampleGrads per_sample_gradients(const Network& net, const Matrix& batch,
                                           const std::vector<int>& labels) {
    check_shapes(batch.rows == labels.size(), "per_sample_gradients labels");
    ForwardCache cache;
    forward(net, batch, &cache);

    const auto& trainables = net.trainable_layers();
    PerSampleGrads grads;
    grads.batch = batch.rows;
    grads.layers.resize(trainables.size());
    for (std::size_t t = 0; t < trainables.size(); ++t) {
        grads.layers[t].is_conv =
            net.layers()[trainables[t]].spec.kind == LayerKind::conv2d;
    }

    SampleGrad sg;
    for (std::size_t s = 0; s < batch.rows; ++s) {
        backprop_sample(net, cache, s, labels[s], sg);
        for (std::size_t t = 0; t < trainables.size(); ++t) {
            const Network::Layer& layer = net.layers()[trainables[t]];
            LayerPerSampleGrads& lg = grads.layers[t];
            if (lg.is_conv) {
                lg.kernels.push_back(unflatten_conv_weight(sg.conv_dw[t], layer.spec.in,
                                                           layer.spec.kernel, layer.spec.kernel));
            } else {
                Matrix dw(layer.spec.in, layer.spec.out);
                const double* x = sg.dense_x[t];
                for (std::size_t i = 0; i < layer.spec.in; ++i) {
                    double* row = dw.row_ptr(i);
                    for (std::size_t j = 0; j < layer.spec.out; ++j)
                        row[j] = x[i] * sg.delta[t][j];
                }
                lg.weights.push_back(std::move(dw));
            }
            lg.biases.push_back(sg.delta[t]);
        }
    }
    return grads;
}

// Batch-summed gradients via matrix-level backprop (an independent
// accumulation route from per-sample outer products). Conv gradients are
// returned flattened (out x in*k*k).
struct BatchGrads {
    std::vector<Matrix> weights;
    std::vector<std::vector<double>> biases;
    double mean_loss = 0.0;
};

inline BatchGrads batch_gradients(const Network& net, const Matrix& batch,
                                  const std::vector<int>& labels) {
    check_shapes(batch.rows == labels.size(), "batch_gradients labels");
    ForwardCache cache;
    forward(net, batch, &cache);
    const auto& layers = net.layers();
    const auto& trainables = net.trainable_layers();

    BatchGrads out;
    out.weights.resize(trainables.size());
    out.biases.resize(trainables.size());

    const Matrix& logits = cache.logits();
    Matrix delta(batch.rows, net.classes());
    for (std::size_t s = 0; s < batch.rows; ++s)
        out.mean_loss += detail::softmax_ce_delta(logits.row_ptr(s), net.classes(), labels[s],
                                                  delta.row_ptr(s));
    out.mean_loss /= batch.rows == 0 ? 1.0 : static_cast<double>(batch.rows);

    std::size_t t = trainables.size();
    for (std::size_t li = layers.size(); li-- > 0;) {
        const Network::Layer& layer = layers[li];
        const Matrix& x = cache.acts[li];
        switch (layer.spec.kind) {
            case LayerKind::dense: {
                --t;
                out.weights[t] = matmul(transpose(x), delta);
                out.biases[t].assign(layer.spec.out, 0.0);
                for (std::size_t s = 0; s < delta.rows; ++s)
                    for (std::size_t j = 0; j < layer.spec.out; ++j)
                        out.biases[t][j] += delta(s, j);
                if (li > 0) delta = matmul(delta, transpose(layer.w));
                break;
            }
            case LayerKind::conv2d: {
                --t;
                const Shape3 in = layer.in_shape;
                const Shape3 osh = layer.out_shape;
                const std::size_t positions = osh.h * osh.w;
                out.weights[t] = Matrix(osh.c, in.c * layer.spec.kernel * layer.spec.kernel);
                out.biases[t].assign(osh.c, 0.0);
                const Matrix wflat = flatten_conv_weight(layer.kernel);
                Matrix next_delta(batch.rows, in.flat());
                for (std::size_t s = 0; s < batch.rows; ++s) {
                    Matrix delta_mat(osh.c, positions);
                    for (std::size_t oc = 0; oc < osh.c; ++oc)
                        for (std::size_t pos = 0; pos < positions; ++pos)
                            delta_mat(oc, pos) = delta(s, oc * positions + pos);
                    const Matrix patches =
                        detail::im2col(x.row_ptr(s), in, layer.spec.kernel, layer.spec.stride,
                                       layer.spec.padding, osh.h, osh.w);
                    add_scaled_in_place(out.weights[t], matmul(delta_mat, transpose(patches)),
                                        1.0);
                    for (std::size_t oc = 0; oc < osh.c; ++oc)
                        for (std::size_t pos = 0; pos < positions; ++pos)
                            out.biases[t][oc] += delta_mat(oc, pos);
                    if (li > 0) {
                        const Matrix dpatches = matmul(transpose(wflat), delta_mat);
                        detail::col2im_accumulate(dpatches, next_delta.row_ptr(s), in,
                                                  layer.spec.kernel, layer.spec.stride,
                                                  layer.spec.padding, osh.h, osh.w);
                    }
                }
                delta = std::move(next_delta);
                break;
            }
            case LayerKind::relu: {
                for (std::size_t i = 0; i < delta.data.size(); ++i)
                    if (x.data[i] <= 0.0) delta.data[i] = 0.0;
                break;
            }
            case LayerKind::tanh_act: {
                const Matrix& y = cache.acts[li + 1];
                for (std::size_t i = 0; i < delta.data.size(); ++i)
                    delta.data[i] *= 1.0 - y.data[i] * y.data[i];
                break;
            }
            case LayerKind::flatten:
                break;
            default:
                throw std::logic_error("batch_gradients: unexpected layer kind");
        }
    }
    return out;
}

struct EvalResult {
    double mean_loss = 0.0;
    double accuracy = 0.0;
};

inline EvalResult evaluate(const Network& net, const Matrix& batch,
                           const std::vector<int>& labels) {
    check_shapes(batch.rows == labels.size(), "evaluate labels");
    const Matrix logits = forward(net, batch);
    EvalResult res;
    std::vector<double> delta(net.classes());
    std::size_t correct = 0;
    for (std::size_t s = 0; s < batch.rows; ++s) {
        res.mean_loss +=
            detail::softmax_ce_delta(logits.row_ptr(s), net.classes(), labels[s], delta.data());
        const double* row = logits.row_ptr(s);
        std::size_t best = 0;
        for (std::size_t j = 1; j < net.classes(); ++j)
            if (row[j] > row[best]) best = j;
        if (static_cast<int>(best) == labels[s]) ++correct;
    }
    if (batch.rows > 0) {
        res.mean_loss /= static_cast<double>(batch.rows);
        res.accuracy = static_cast<double>(correct) / static_cast<double>(batch.rows);
    }
    return res;
}

// ---------------------------------------------------------------------------
// architecture strings and checkpoints
// ---------------------------------------------------------------------------

// Comma-separated layer tokens; the classifier dense layer and loss head are
// appended automatically:
//   dense:N          fully connected with N outputs
//   conv:OxKsSpP     conv2d, O output channels, KxK kernel, stride S, pad P
//   relu | tanh | flatten
inline std::vector<LayerSpec> parse_arch(const std::string& arch, Shape3 input,
                                         std::size_t classes) {
    std::vector<LayerSpec> specs;
    Shape3 cur = input;
    std::stringstream ss(arch);
    std::string token;
    auto parse_num = [](const std::string& s, const char* what) -> std::size_t {
        try {
            std::size_t pos = 0;
            const unsigned long long v = std::stoull(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return static_cast<std::size_t>(v);
        } catch (...) {
            throw std::invalid_argument(std::string("arch: bad number in ") + what);
        }
    };
    while (std::getline(ss, token, ',')) {
        token.erase(std::remove_if(token.begin(), token.end(), ::isspace), token.end());
        if (token.empty()) continue;
        if (token == "relu") {
            specs.push_back(LayerSpec::activation(LayerKind::relu));
        } else if (token == "tanh") {
            specs.push_back(LayerSpec::activation(LayerKind::tanh_act));
        } else if (token == "flatten") {
            specs.push_back(LayerSpec::activation(LayerKind::flatten));
            cur = Shape3{1, 1, cur.flat()};
        } else if (token.rfind("dense:", 0) == 0) {
            const std::size_t out = parse_num(token.substr(6), "dense");
            specs.push_back(LayerSpec::dense_spec(cur.flat(), out));
            cur = Shape3{1, 1, out};
        } else if (token.rfind("conv:", 0) == 0) {
            // OxKsSpP, e.g. conv:8x3s2p1
            const std::string body = token.substr(5);
            const auto xpos = body.find('x');
            const auto spos = body.find('s');
            const auto ppos = body.find('p');
            if (xpos == std::string::npos)
                throw std::invalid_argument("arch: conv needs OxK form");
            const std::size_t out = parse_num(body.substr(0, xpos), "conv channels");
            const std::size_t kend = std::min(spos, ppos);
            const std::size_t k = parse_num(body.substr(xpos + 1, kend - xpos - 1), "conv kernel");
            std::size_t stride = 1, padding = 0;
            if (spos != std::string::npos)
                stride = parse_num(
                    body.substr(spos + 1,
                                (ppos != std::string::npos && ppos > spos ? ppos - spos - 1
                                                                          : std::string::npos)),
                    "conv stride");
            if (ppos != std::string::npos)
                padding = parse_num(body.substr(ppos + 1), "conv padding");
            specs.push_back(LayerSpec::conv_spec(cur.c, out, k, stride, padding));
            const std::size_t oh = detail::conv_out_extent(cur.h, k, stride, padding);
            const std::size_t ow = detail::conv_out_extent(cur.w, k, stride, padding);
            cur = Shape3{out, oh, ow};
        } else {
            throw std::invalid_argument("arch: unknown token '" + token + "'");
        }
    }
    specs.push_back(LayerSpec::dense_spec(cur.flat(), classes));
    specs.push_back(LayerSpec::activation(LayerKind::softmax_ce));
    return specs;
}

struct Normalization {
    std::vector<double> mean;    // per channel
    std::vector<double> stddev;  // per channel
    bool empty() const { return mean.empty(); }
};

namespace detail {

inline const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::relu: return "relu";
        case LayerKind::tanh_act: return "tanh";
        case LayerKind::flatten: return "flatten";
        case LayerKind::softmax_ce: return "softmax_ce";
    }
    return "?";
}

inline LayerKind kind_from_name(const std::string& s) {
    if (s == "dense") return LayerKind::dense;
    if (s == "conv2d") return LayerKind::conv2d;
    if (s == "relu") return LayerKind::relu;
    if (s == "tanh") return LayerKind::tanh_act;
    if (s == "flatten") return LayerKind::flatten;
    if (s == "softmax_ce") return LayerKind::softmax_ce;
    throw std::invalid_argument("checkpoint: unknown layer kind " + s);
}

}  // namespace detail

// Checkpoint container: JSON with shapes and weight arrays (doubles
// round-trip exactly). Version field guards the schema.
inline void save_checkpoint(const Network& net, const std::string& path,
                            const Normalization& norm = {}) {
    nlohmann::json j;
    j["format"] = "lsg-checkpoint";
    j["version"] = 1;
    j["input_shape"] = {net.input_shape().c, net.input_shape().h, net.input_shape().w};
    j["classes"] = net.classes();
    nlohmann::json layers = nlohmann::json::array();
    nlohmann::json params = nlohmann::json::array();
    for (const Network::Layer& l : net.layers()) {
        nlohmann::json spec;
        spec["kind"] = detail::kind_name(l.spec.kind);
        if (l.spec.kind == LayerKind::dense) {
            spec["in"] = l.spec.in;
            spec["out"] = l.spec.out;
            params.push_back({{"w", l.w.data}, {"b", l.bias}});
        } else if (l.spec.kind == LayerKind::conv2d) {
            spec["in"] = l.spec.in;
            spec["out"] = l.spec.out;
            spec["kernel"] = l.spec.kernel;
            spec["stride"] = l.spec.stride;
            spec["padding"] = l.spec.padding;
            params.push_back({{"w", l.kernel.data}, {"b", l.bias}});
        }
        layers.push_back(spec);
    }
    layers.push_back({{"kind", "softmax_ce"}});
    j["layers"] = layers;
    j["params"] = params;
    if (!norm.empty()) j["normalization"] = {{"mean", norm.mean}, {"std", norm.stddev}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out << j.dump();
}

inline Network load_checkpoint(const std::string& path, Normalization* norm = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "lsg-checkpoint" || j.value("version", 0) != 1)
        throw std::runtime_error("checkpoint: unsupported format/version in " + path);
    Shape3 input{j["input_shape"][0].get<std::size_t>(), j["input_shape"][1].get<std::size_t>(),
                 j["input_shape"][2].get<std::size_t>()};
    std::vector<LayerSpec> specs;
    for (const auto& spec : j["layers"]) {
        const LayerKind kind = detail::kind_from_name(spec["kind"]);
        switch (kind) {
            case LayerKind::dense:
                specs.push_back(LayerSpec::dense_spec(spec["in"], spec["out"]));
                break;
            case LayerKind::conv2d:
                specs.push_back(LayerSpec::conv_spec(spec["in"], spec["out"], spec["kernel"],
                                                     spec["stride"], spec["padding"]));
                break;
            default:
                specs.push_back(LayerSpec::activation(kind));
        }
    }
    RngState scratch(0);  // weights overwritten below
    Network net(specs, input, scratch);
    const auto& params = j["params"];
    const auto& trainables = net.trainable_layers();
    if (params.size() != trainables.size())
        throw std::runtime_error("checkpoint: parameter count mismatch");
    for (std::size_t t = 0; t < trainables.size(); ++t) {
        Network::Layer& l = net.layers()[trainables[t]];
        const auto w = params[t]["w"].get<std::vector<double>>();
        const auto b = params[t]["b"].get<std::vector<double>>();
        if (l.spec.kind == LayerKind::dense) {
            if (w.size() != l.w.size() || b.size() != l.bias.size())
                throw std::runtime_error("checkpoint: dense shape mismatch");
            l.w.data = w;
        } else {
            if (w.size() != l.kernel.size() || b.size() != l.bias.size())
                throw std::runtime_error("checkpoint: conv shape mismatch");
            l.kernel.data = w;
        }
        l.bias = b;
        for (double v : l.spec.kind == LayerKind::dense ? l.w.data : l.kernel.data)
            if (!std::isfinite(v)) throw std::runtime_error("checkpoint: non-finite weights");
    }
    if (norm) {
        *norm = {};
        if (j.contains("normalization")) {
            norm->mean = j["normalization"]["mean"].get<std::vector<double>>();
            norm->stddev = j["normalization"]["std"].get<std::vector<double>>();
        }
    }
    return net;
}

}  // namespace lsg
