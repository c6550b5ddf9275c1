#pragma once

// Training orchestration. One step, for every method, is a single privacy
// release:
//
//   importance scores from the current weights -> masks -> (lsg/rgp) fresh
//   low-rank factors -> Poisson minibatch -> per-sample gradients (factor
//   space for lsg/rgp, weight space otherwise) -> masks applied -> joint
//   per-sample clipping -> sum -> masked Gaussian noise -> reconstruction to
//   weight space -> optimizer update -> accountant step.
//
// Method map: rgp == lsg with p forced to 0, dpsgd == sparse-dpsgd with p
// forced to 0 (shared code paths, so the equalities hold bit-for-bit), and
// sgd is the non-private degenerate case (C = inf, sigma = 0).
//
// The update applied to the weights is (noised sum) / batch_size, with the
// configured batch size B = q*N as the fixed, data-independent denominator.
//
// RNG streams derived from the run seed: 1 weight init, 2 batch sampling,
// 3 decomposition sketches, 4 noise, 5 random-mask ablation. Reductions run
// in fixed sample order; reruns with one seed are bit-identical.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsg/accountant.hpp"
#include "lsg/data.hpp"
#include "lsg/matrix.hpp"
#include "lsg/model.hpp"
#include "lsg/privacy.hpp"
#include "lsg/reparam.hpp"
#include "lsg/rng.hpp"
#include "lsg/sparsity.hpp"

namespace lsg {

enum class Method { lsg, rgp, sparse_dpsgd, dpsgd, sgd };
enum class OptimizerKind { sgd, momentum, adam };
enum class SamplingScheme { poisson, fixed };
enum class SparsifyRule { importance, random };
enum class ImportanceSource { weights, factors };

struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

inline const char* method_name(Method m) {
    switch (m) {
        case Method::lsg: return "lsg";
        case Method::rgp: return "rgp";
        case Method::sparse_dpsgd: return "sparse-dpsgd";
        case Method::dpsgd: return "dpsgd";
        case Method::sgd: return "sgd";
    }
    return "?";
}

inline Method method_from_name(const std::string& s) {
    if (s == "lsg") return Method::lsg;
    if (s == "rgp") return Method::rgp;
    if (s == "sparse-dpsgd") return Method::sparse_dpsgd;
    if (s == "dpsgd") return Method::dpsgd;
    if (s == "sgd") return Method::sgd;
    throw ConfigError("unknown method '" + s + "'");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd;
    double lr = 0.1;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct TrainConfig {
    Method method = Method::lsg;
    std::size_t rank = 8;        // lsg/rgp
    double sparsity = 0.0;       // p, lsg/sparse-dpsgd
    double clip_norm = 1.0;      // C
    double noise_multiplier = 0.0;  // sigma; ignored when target_eps > 0
    double target_eps = 0.0;        // > 0: calibrate sigma for this budget
    double delta = 1e-5;
    std::size_t batch_size = 100;   // B; q = B/N
    std::size_t epochs = 1;
    OptimizerConfig opt;
    std::size_t lr_decay_epoch = 0;  // 0 disables the single decay step
    double lr_decay_factor = 1.0;
    std::uint64_t seed = 1;
    std::size_t sparsify_after = 0;  // epochs trained with p forced to 0
    bool clip_per_matrix = false;
    SamplingScheme sampling = SamplingScheme::poisson;
    SparsifyRule sparsify_rule = SparsifyRule::importance;
    ImportanceSource importance_source = ImportanceSource::weights;
    bool factorize_classifier = false;
    bool warm_start = false;

    bool factorized() const { return method == Method::lsg || method == Method::rgp; }
    bool sparsified() const {
        return method == Method::lsg || method == Method::sparse_dpsgd;
    }
    bool is_private() const { return method != Method::sgd; }

    double effective_sparsity(std::size_t epoch) const {
        if (!sparsified() || epoch < sparsify_after) return 0.0;
        return sparsity;
    }
    double effective_clip_norm() const {
        return is_private() ? clip_norm : std::numeric_limits<double>::infinity();
    }

    void validate() const {
        if (factorized() && rank < 1) throw ConfigError("rank must be >= 1 for lsg/rgp");
        if (sparsified() && !(sparsity >= 0.0 && sparsity < 1.0))
            throw ConfigError("sparsity p must be in [0,1) for lsg/sparse-dpsgd");
        if (is_private()) {
            if (!(clip_norm > 0.0) || std::isinf(clip_norm))
                throw ConfigError("clip norm C must be positive and finite");
            if (noise_multiplier < 0.0) throw ConfigError("noise multiplier must be >= 0");
            if (target_eps < 0.0) throw ConfigError("target eps must be >= 0");
            if ((noise_multiplier > 0.0 || target_eps > 0.0) &&
                !(delta > 0.0 && delta < 1.0))
                throw ConfigError("delta must be in (0,1)");
        }
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (!(opt.lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (importance_source == ImportanceSource::factors && !factorized())
            throw ConfigError("factor-based importance needs a factorized method (lsg/rgp)");
        if (lr_decay_epoch > 0 && !(lr_decay_factor > 0.0))
            throw ConfigError("lr decay factor must be positive");
    }
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double test_accuracy = 0.0;
    double test_loss = 0.0;
    double eps_spent = 0.0;  // +inf for non-private
    std::size_t noised_coords = 0;
    std::vector<std::size_t> kept_params;  // per trainable layer
};

struct StepDebug {
    std::vector<double> preclip_norms;
    std::vector<double> postclip_norms;
    GradVec sanitized;  // after noise, before the 1/B scaling
    std::vector<SlotMask> masks;
    std::size_t batch_size = 0;
    std::size_t noised_coords = 0;
};

struct TrainResult {
    Network net;
    std::vector<EpochMetrics> history;
    double final_eps = 0.0;
    std::size_t steps_taken = 0;
    bool certified = true;
    double sigma_used = 0.0;
};

namespace detail {

struct LayerPlan {
    std::size_t trainable_idx = 0;  // index into net.trainable_layers()
    bool factorize = false;
    bool maskable = false;
    bool is_conv = false;
    std::size_t rows = 0, cols = 0;  // gradient matrix shape (conv: flattened)
    std::size_t r_eff = 0;
    std::size_t kernel_area = 1;
    std::size_t bias_dim = 0;
    // channel counts for masks: dense m=rows (inputs), n=cols (outputs);
    // conv m=in channels, n=out channels
    std::size_t mask_m = 0, mask_n = 0;
};

}  // namespace detail

class Trainer {
public:
    Trainer(Network net, TrainConfig cfg, std::size_t dataset_size)
        : net_(std::move(net)),
          cfg_(cfg),
          dataset_size_(dataset_size),
          sampling_rng_(derive_seed(cfg.seed, 2)),
          decompose_rng_(derive_seed(cfg.seed, 3)),
          noise_rng_(derive_seed(cfg.seed, 4)),
          mask_rng_(derive_seed(cfg.seed, 5)) {
        cfg_.validate();
        if (dataset_size_ == 0) throw ConfigError("empty dataset");
        if (cfg_.batch_size > dataset_size_)
            throw ConfigError("batch size exceeds dataset size");
        build_plans();
        init_optimizer_state();
    }

    const Network& net() const { return net_; }
    Network& net() { return net_; }
    double sampling_rate() const {
        return static_cast<double>(cfg_.batch_size) / static_cast<double>(dataset_size_);
    }
    std::size_t clip_slot_count() const { return clip_slots_; }

    struct StepResult {
        double mean_loss = std::numeric_limits<double>::quiet_NaN();
        std::size_t batch_size = 0;
        std::size_t noised_coords = 0;
        std::vector<std::size_t> kept_params;
    };

    // One full pipeline pass over one Poisson (or fixed-size) minibatch.
    StepResult train_step(const Dataset& data, std::size_t epoch, double lr, double sigma,
                          StepDebug* debug = nullptr) {
        StepResult result;

        const double p = cfg_.effective_sparsity(epoch);

        // factors first only when the ablation scores factor entries themselves
        std::vector<LowRankFactors> factors(plans_.size());
        if (cfg_.factorized() && cfg_.importance_source == ImportanceSource::factors)
            decompose_layers(factors);

        std::vector<SparsityMask> layer_masks(plans_.size());
        for (std::size_t pi = 0; pi < plans_.size(); ++pi) {
            const detail::LayerPlan& plan = plans_[pi];
            if (!plan.maskable) continue;
            if (cfg_.sparsify_rule == SparsifyRule::random) {
                layer_masks[pi] = build_random_mask(plan.mask_m, plan.mask_n, p, mask_rng_);
            } else {
                layer_masks[pi] = build_mask(layer_importance(pi, factors), p);
            }
        }

        if (cfg_.factorized() && cfg_.importance_source == ImportanceSource::weights)
            decompose_layers(factors);

        const std::vector<SlotMask> slot_masks = build_slot_masks(layer_masks);
        result.kept_params = kept_parameter_counts(layer_masks);

        const auto batch_idx =
            cfg_.sampling == SamplingScheme::poisson
                ? poisson_sample(dataset_size_, sampling_rate(), sampling_rng_)
                : fixed_sample(dataset_size_, cfg_.batch_size, sampling_rng_);
        result.batch_size = batch_idx.size();

        GradVec sum = make_zero_gradvec();
        result.noised_coords = noised_coordinate_count(sum, slot_masks);

        if (debug) {
            debug->masks = slot_masks;
            debug->batch_size = batch_idx.size();
            debug->noised_coords = result.noised_coords;
            debug->preclip_norms.clear();
            debug->postclip_norms.clear();
        }

        // An empty Poisson batch is still a release: no update, but the
        // accountant must advance (handled by the caller via one step()).
        if (!batch_idx.empty()) {
            const Matrix batch = gather_rows(data.features, batch_idx);
            const std::vector<int> labels = gather_labels(data.labels, batch_idx);
            ForwardCache cache;
            forward(net_, batch, &cache);

            const ClipConfig clip{cfg_.effective_clip_norm(), cfg_.clip_per_matrix};
            GradVec per_sample = make_zero_gradvec();
            SampleGrad sg;
            double loss_sum = 0.0;
            for (std::size_t s = 0; s < batch_idx.size(); ++s) {
                backprop_sample(net_, cache, s, labels[s], sg);
                loss_sum += sg.loss;
                fill_sample_gradvec(sg, factors, slot_masks, per_sample);
                const double norm = clip_in_place(per_sample, clip);
                sum.add_scaled(per_sample, 1.0);
                if (debug) {
                    debug->preclip_norms.push_back(norm);
                    debug->postclip_norms.push_back(norm * clip_scale(norm, clip.clip_norm));
                }
            }
            result.mean_loss = loss_sum / static_cast<double>(batch_idx.size());

            sanitize(sum, slot_masks, cfg_.effective_clip_norm(), sigma, noise_rng_);
            if (debug) debug->sanitized = sum;

            sum.scale(1.0 / static_cast<double>(cfg_.batch_size));
            if (!sum.all_finite())
                throw DivergenceError("non-finite gradient at epoch " + std::to_string(epoch));
            apply_update(sum, factors, lr);
        } else if (debug) {
            debug->sanitized = sum;
        }
        return result;
    }

private:
    void build_plans() {
        const auto& trainables = net_.trainable_layers();
        if (trainables.empty()) throw ConfigError("network has no trainable layers");
        const std::size_t classifier = trainables.size() - 1;
        plans_.resize(trainables.size());
        for (std::size_t t = 0; t < trainables.size(); ++t) {
            const Network::Layer& layer = net_.layers()[trainables[t]];
            detail::LayerPlan& plan = plans_[t];
            plan.trainable_idx = t;
            plan.is_conv = layer.spec.kind == LayerKind::conv2d;
            plan.bias_dim = layer.bias.size();
            if (plan.is_conv) {
                plan.kernel_area = layer.spec.kernel * layer.spec.kernel;
                plan.rows = layer.spec.out;
                plan.cols = layer.spec.in * plan.kernel_area;
                plan.mask_m = layer.spec.in;
                plan.mask_n = layer.spec.out;
            } else {
                plan.rows = layer.spec.in;
                plan.cols = layer.spec.out;
                plan.mask_m = layer.spec.in;
                plan.mask_n = layer.spec.out;
            }
            const bool candidate = (t != classifier) || cfg_.factorize_classifier;
            plan.maskable = candidate && (cfg_.sparsified() || cfg_.factorized());
            if (cfg_.factorized() && candidate) {
                plan.factorize = true;
                plan.r_eff = std::min(cfg_.rank, std::min(plan.rows, plan.cols));
                if (factor_param_count(plan.rows, plan.cols, plan.r_eff) >=
                    plan.rows * plan.cols)
                    throw ConfigError(
                        "rank " + std::to_string(plan.r_eff) + " does not reduce a " +
                        std::to_string(plan.rows) + "x" + std::to_string(plan.cols) +
                        " layer; lower the rank or exclude the layer");
            }
        }
        // slot order: per trainable layer, (dL,dR) when factorized else dW
        slot_of_layer_.resize(plans_.size());
        std::size_t slot = 0;
        for (std::size_t t = 0; t < plans_.size(); ++t) {
            slot_of_layer_[t] = slot;
            slot += plans_[t].factorize ? 2 : 1;
        }
        mat_slots_ = slot;
        clip_slots_ = mat_slots_ + plans_.size();  // bias vectors clip as their own slots
        warm_sketch_.assign(plans_.size(), Matrix{});
    }

    void init_optimizer_state() {
        m1_w_.clear();
        m2_w_.clear();
        m1_b_.clear();
        m2_b_.clear();
        for (const detail::LayerPlan& plan : plans_) {
            m1_w_.emplace_back(plan.rows, plan.cols);
            m2_w_.emplace_back(plan.rows, plan.cols);
            m1_b_.emplace_back(plan.bias_dim, 0.0);
            m2_b_.emplace_back(plan.bias_dim, 0.0);
        }
        adam_t_ = 0;
    }

    Matrix& layer_weight(std::size_t t) {
        Network::Layer& layer = net_.layers()[net_.trainable_layers()[t]];
        return layer.w;
    }

    // Flattened weight view for the gradient pipeline (conv layers share
    // storage layout with their flattened matrix).
    Matrix weight_matrix(std::size_t t) const {
        const Network::Layer& layer = net_.layers()[net_.trainable_layers()[t]];
        if (layer.spec.kind == LayerKind::conv2d) return flatten_conv_weight(layer.kernel);
        return layer.w;
    }

    ImportanceVectors layer_importance(std::size_t t,
                                       const std::vector<LowRankFactors>& factors) const {
        const Network::Layer& layer = net_.layers()[net_.trainable_layers()[t]];
        if (cfg_.importance_source == ImportanceSource::factors) {
            const LowRankFactors& f = factors[t];
            ImportanceVectors iv;
            iv.input.assign(plans_[t].mask_m, 0.0);
            iv.output.assign(plans_[t].mask_n, 0.0);
            if (plans_[t].is_conv) {
                // L: out x r, R: r x in*k^2
                for (std::size_t o = 0; o < f.left.rows; ++o)
                    for (std::size_t k = 0; k < f.left.cols; ++k)
                        iv.output[o] += std::abs(f.left(o, k));
                for (std::size_t k = 0; k < f.right.rows; ++k)
                    for (std::size_t j = 0; j < f.right.cols; ++j)
                        iv.input[j / plans_[t].kernel_area] += std::abs(f.right(k, j));
            } else {
                for (std::size_t i = 0; i < f.left.rows; ++i)
                    for (std::size_t k = 0; k < f.left.cols; ++k)
                        iv.input[i] += std::abs(f.left(i, k));
                for (std::size_t k = 0; k < f.right.rows; ++k)
                    for (std::size_t j = 0; j < f.right.cols; ++j)
                        iv.output[j] += std::abs(f.right(k, j));
            }
            return iv;
        }
        if (plans_[t].is_conv) return importance_conv(layer.kernel);
        return importance(layer.w);
    }

    void decompose_layers(std::vector<LowRankFactors>& factors) {
        for (std::size_t t = 0; t < plans_.size(); ++t) {
            if (!plans_[t].factorize) continue;
            const Matrix w = weight_matrix(t);
            if (cfg_.warm_start && warm_sketch_[t].rows > 0)
                factors[t] = decompose_warm(w, plans_[t].r_eff, warm_sketch_[t]);
            else
                factors[t] = decompose(w, plans_[t].r_eff, decompose_rng_);
            if (cfg_.warm_start) warm_sketch_[t] = factors[t].right;
        }
    }

    std::vector<SlotMask> build_slot_masks(const std::vector<SparsityMask>& layer_masks) const {
        std::vector<SlotMask> masks(mat_slots_);
        for (std::size_t t = 0; t < plans_.size(); ++t) {
            const detail::LayerPlan& plan = plans_[t];
            const std::size_t s = slot_of_layer_[t];
            if (!plan.maskable || layer_masks[t].input_kept.empty()) continue;  // fully kept
            const SparsityMask& lm = layer_masks[t];
            if (plan.factorize) {
                if (plan.is_conv) {
                    masks[s] = SlotMask{lm.output_kept, {}};
                    masks[s + 1] = SlotMask{{}, expand_groups(lm.input_kept, plan.kernel_area)};
                } else {
                    masks[s] = SlotMask{lm.input_kept, {}};
                    masks[s + 1] = SlotMask{{}, lm.output_kept};
                }
            } else {
                if (plan.is_conv)
                    masks[s] =
                        SlotMask{lm.output_kept, expand_groups(lm.input_kept, plan.kernel_area)};
                else
                    masks[s] = SlotMask{lm.input_kept, lm.output_kept};
            }
        }
        return masks;
    }

    // Trainable (unfrozen) parameters per layer, biases included.
    std::vector<std::size_t> kept_parameter_counts(
        const std::vector<SparsityMask>& layer_masks) const {
        std::vector<std::size_t> counts(plans_.size());
        for (std::size_t t = 0; t < plans_.size(); ++t) {
            const detail::LayerPlan& plan = plans_[t];
            std::size_t kept_m = plan.mask_m, kept_n = plan.mask_n;
            if (plan.maskable && !layer_masks[t].input_kept.empty()) {
                kept_m = layer_masks[t].kept_inputs.size();
                kept_n = layer_masks[t].kept_outputs.size();
            }
            if (plan.factorize)
                counts[t] = plan.is_conv ? (kept_n + kept_m * plan.kernel_area) * plan.r_eff
                                         : (kept_m + kept_n) * plan.r_eff;
            else
                counts[t] = kept_m * kept_n * (plan.is_conv ? plan.kernel_area : 1);
            counts[t] += plan.bias_dim;
        }
        return counts;
    }

    GradVec make_zero_gradvec() const {
        GradVec g;
        g.mats.resize(mat_slots_);
        for (std::size_t t = 0; t < plans_.size(); ++t) {
            const detail::LayerPlan& plan = plans_[t];
            const std::size_t s = slot_of_layer_[t];
            if (plan.factorize) {
                g.mats[s] = Matrix(plan.rows, plan.r_eff);
                g.mats[s + 1] = Matrix(plan.r_eff, plan.cols);
            } else {
                g.mats[s] = Matrix(plan.rows, plan.cols);
            }
        }
        g.biases.resize(plans_.size());
        for (std::size_t t = 0; t < plans_.size(); ++t)
            g.biases[t].assign(plans_[t].bias_dim, 0.0);
        return g;
    }

    // Builds one sample's GradVec (factor space where factorized) and applies
    // the masks, reusing `out`'s storage.
    void fill_sample_gradvec(const SampleGrad& sg, const std::vector<LowRankFactors>& factors,
                             const std::vector<SlotMask>& slot_masks, GradVec& out) const {
        for (std::size_t t = 0; t < plans_.size(); ++t) {
            const detail::LayerPlan& plan = plans_[t];
            const std::size_t s = slot_of_layer_[t];
            if (plan.factorize) {
                const LowRankFactors& f = factors[t];
                Matrix& dl = out.mats[s];
                Matrix& dr = out.mats[s + 1];
                if (plan.is_conv) {
                    dl = matmul(sg.conv_dw[t], transpose(f.right));
                    dr = matmul(transpose(f.left), sg.conv_dw[t]);
                } else {
                    // dW = x delta^T (rank one), so dL = x (R delta)^T and
                    // dR = (L^T x) delta^T without materializing dW
                    const double* x = sg.dense_x[t];
                    const std::vector<double>& delta = sg.delta[t];
                    const std::size_t m = plan.rows, n = plan.cols, r = plan.r_eff;
                    std::vector<double> rd(r, 0.0), lx(r, 0.0);
                    for (std::size_t k = 0; k < r; ++k) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += f.right(k, j) * delta[j];
                        rd[k] = acc;
                    }
                    for (std::size_t k = 0; k < r; ++k) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < m; ++i) acc += f.left(i, k) * x[i];
                        lx[k] = acc;
                    }
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t k = 0; k < r; ++k) dl(i, k) = x[i] * rd[k];
                    for (std::size_t k = 0; k < r; ++k)
                        for (std::size_t j = 0; j < n; ++j) dr(k, j) = lx[k] * delta[j];
                }
                apply_slot_mask(dl, slot_masks[s]);
                apply_slot_mask(dr, slot_masks[s + 1]);
            } else {
                Matrix& dw = out.mats[s];
                if (plan.is_conv) {
                    dw = sg.conv_dw[t];
                } else {
                    const double* x = sg.dense_x[t];
                    const std::vector<double>& delta = sg.delta[t];
                    for (std::size_t i = 0; i < plan.rows; ++i) {
                        double* row = dw.row_ptr(i);
                        for (std::size_t j = 0; j < plan.cols; ++j) row[j] = x[i] * delta[j];
                    }
                }
                apply_slot_mask(dw, slot_masks[s]);
            }
            out.biases[t] = sg.delta[t];
        }
    }

    // W-space update: reconstruct factorized slots, then one optimizer step.
    void apply_update(const GradVec& noised, const std::vector<LowRankFactors>& factors,
                      double lr) {
        ++adam_t_;
        for (std::size_t t = 0; t < plans_.size(); ++t) {
            const detail::LayerPlan& plan = plans_[t];
            const std::size_t s = slot_of_layer_[t];
            Matrix dw = plan.factorize
                            ? reconstruct_gradient(noised.mats[s], noised.mats[s + 1], factors[t])
                            : noised.mats[s];
            Network::Layer& layer = net_.layers()[net_.trainable_layers()[t]];
            double* w = plan.is_conv ? layer.kernel.data.data() : layer.w.data.data();
            update_array(w, dw.data.data(), dw.data.size(), m1_w_[t].data.data(),
                         m2_w_[t].data.data(), lr);
            update_array(layer.bias.data(), noised.biases[t].data(), layer.bias.size(),
                         m1_b_[t].data(), m2_b_[t].data(), lr);
        }
    }

    void update_array(double* w, const double* g, std::size_t n, double* m1, double* m2,
                      double lr) {
        switch (cfg_.opt.kind) {
            case OptimizerKind::sgd:
                for (std::size_t i = 0; i < n; ++i) w[i] -= lr * g[i];
                break;
            case OptimizerKind::momentum:
                for (std::size_t i = 0; i < n; ++i) {
                    m1[i] = cfg_.opt.momentum * m1[i] + g[i];
                    w[i] -= lr * m1[i];
                }
                break;
            case OptimizerKind::adam: {
                const double b1 = cfg_.opt.beta1, b2 = cfg_.opt.beta2;
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_t_));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_t_));
                for (std::size_t i = 0; i < n; ++i) {
                    m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
                    m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
                    w[i] -= lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + cfg_.opt.adam_eps);
                }
                break;
            }
        }
    }

    Network net_;
    TrainConfig cfg_;
    std::size_t dataset_size_ = 0;
    std::vector<detail::LayerPlan> plans_;
    std::vector<std::size_t> slot_of_layer_;
    std::size_t mat_slots_ = 0;
    std::size_t clip_slots_ = 0;
    std::vector<Matrix> warm_sketch_;

    std::vector<Matrix> m1_w_, m2_w_;
    std::vector<std::vector<double>> m1_b_, m2_b_;
    std::size_t adam_t_ = 0;

    RngState sampling_rng_;
    RngState decompose_rng_;
    RngState noise_rng_;
    RngState mask_rng_;
};

// Builds the network (stream 1 of the seed), calibrates sigma when a target
// eps is set, and runs epochs of steps. Stops early if the ledger would
// exceed the target budget.
inline TrainResult train(const std::vector<LayerSpec>& specs, const TrainConfig& cfg,
                         const Dataset& train_ds, const Dataset& test_ds) {
    cfg.validate();
    train_ds.validate();
    test_ds.validate();

    RngState init_rng(derive_seed(cfg.seed, 1));
    Network net(specs, train_ds.shape, init_rng);
    Trainer trainer(std::move(net), cfg, train_ds.size());

    const double q = trainer.sampling_rate();
    const std::size_t steps_per_epoch = std::max<std::size_t>(
        1, (train_ds.size() + cfg.batch_size / 2) / cfg.batch_size);
    const std::size_t planned_steps = steps_per_epoch * cfg.epochs;

    double sigma = 0.0;
    if (cfg.is_private()) {
        sigma = cfg.target_eps > 0.0 && planned_steps > 0
                    ? calibrate_sigma(cfg.target_eps, cfg.delta, q, planned_steps)
                    : cfg.noise_multiplier;
    }
    const ClipConfig clip{cfg.effective_clip_norm(), cfg.clip_per_matrix};
    const double accounted_sigma =
        effective_multiplier(sigma, clip, trainer.clip_slot_count());
    PrivacyLedger ledger(q, accounted_sigma);
    if (cfg.sampling == SamplingScheme::fixed)
        ledger.mark_uncertified(
            "fixed-size batches are outside the Poisson subsampling analysis");

    TrainResult result;
    result.sigma_used = sigma;
    const double inf = std::numeric_limits<double>::infinity();

    bool budget_exhausted = false;
    for (std::size_t epoch = 0; epoch < cfg.epochs && !budget_exhausted; ++epoch) {
        double lr = cfg.opt.lr;
        if (cfg.lr_decay_epoch > 0 && epoch >= cfg.lr_decay_epoch) lr *= cfg.lr_decay_factor;

        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        EpochMetrics em;
        em.epoch = epoch;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            if (cfg.is_private() && cfg.target_eps > 0.0 &&
                ledger.epsilon(cfg.delta) >= cfg.target_eps) {
                budget_exhausted = true;
                break;
            }
            const Trainer::StepResult sr = trainer.train_step(train_ds, epoch, lr, sigma);
            ledger.step();
            ++result.steps_taken;
            if (sr.batch_size > 0) {
                loss_sum += sr.mean_loss;
                ++loss_count;
            }
            em.noised_coords = sr.noised_coords;
            em.kept_params = sr.kept_params;
        }
        em.train_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count)
                                       : std::numeric_limits<double>::quiet_NaN();
        const EvalResult ev = evaluate(trainer.net(), test_ds.features, test_ds.labels);
        em.test_accuracy = ev.accuracy;
        em.test_loss = ev.mean_loss;
        if (!std::isfinite(ev.mean_loss))
            throw DivergenceError("held-out loss diverged at epoch " + std::to_string(epoch));
        em.eps_spent = cfg.is_private() ? ledger.epsilon(cfg.delta) : inf;
        result.history.push_back(std::move(em));
    }

    result.net = trainer.net();
    result.final_eps = cfg.is_private()
                           ? (result.steps_taken > 0 ? ledger.epsilon(cfg.delta) : 0.0)
                           : inf;
    result.certified = ledger.certified();
    return result;
}

}  // namespace lsg
