#pragma once

// Renyi-DP accounting for compositions of Poisson-subsampled Gaussian
// mechanisms (sensitivity 1 after normalizing by the clipping norm, noise
// std = multiplier).
//
// Per-step Renyi divergence at order alpha follows the sampled-Gaussian
// analysis of Mironov, Talwar & Zhang (2019): for integer alpha the exact
// binomial expansion
//   (1/(alpha-1)) * log sum_j C(alpha,j) (1-q)^(alpha-j) q^j e^{(j^2-j)/(2 sigma^2)}
// and for fractional alpha the two-sided erfc series from the same analysis.
// Steps compose additively in RDP; (eps, delta) is extracted with the
// standard improved conversion
//   eps(alpha) = rdp - (log delta + log alpha)/(alpha - 1) + log((alpha-1)/alpha)
// minimized over a fixed, documented order grid. The reported eps is an
// upper bound on the true privacy loss.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsg {

namespace detail {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add_exp(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double hi = std::max(a, b);
    const double lo = std::min(a, b);
    return hi + std::log1p(std::exp(lo - hi));
}

// log(e^a - e^b) for a >= b.
inline double log_sub_exp(double a, double b) {
    if (b == kNegInf) return a;
    if (a < b) throw std::logic_error("log_sub_exp: negative difference");
    if (a == b) return kNegInf;
    return a + std::log1p(-std::exp(b - a));
}

// log(erfc(x)), stable for large positive x.
inline double log_erfc(double x) {
    if (x <= 8.0) return std::log(std::erfc(x));
    // asymptotic expansion: erfc(x) ~ e^{-x^2}/(x sqrt(pi)) (1 - 1/(2x^2) + 3/(4x^4))
    const double x2 = x * x;
    return -x2 - std::log(x * std::sqrt(M_PI)) + std::log1p(-0.5 / x2 + 0.75 / (x2 * x2));
}

// Exact integer-order value of log E_{z~N(0,s^2)}[((1-q) + q e^{(2z-1)/(2s^2)})^alpha].
inline double log_a_integer(double q, double sigma, long long alpha) {
    const double log_q = std::log(q);
    const double log_1mq = std::log1p(-q);
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    double acc = kNegInf;
    double log_binom = 0.0;  // log C(alpha, 0)
    for (long long j = 0; j <= alpha; ++j) {
        double term = log_binom + static_cast<double>(j * j - j) * inv2s2;
        if (j > 0) term += static_cast<double>(j) * log_q;
        if (alpha - j > 0) term += static_cast<double>(alpha - j) * log_1mq;
        acc = log_add_exp(acc, term);
        log_binom += std::log(static_cast<double>(alpha - j) / static_cast<double>(j + 1));
    }
    return acc;
}

// Fractional-order value via the converging two-sided series.
inline double log_a_fractional(double q, double sigma, double alpha) {
    const double log_q = std::log(q);
    const double log_1mq = std::log1p(-q);
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    const double z0 = sigma * sigma * std::log(1.0 / q - 1.0) + 0.5;
    const double sqrt2s = std::sqrt(2.0) * sigma;

    double log_a0_pos = kNegInf, log_a0_neg = kNegInf;
    double log_a1_pos = kNegInf, log_a1_neg = kNegInf;
    double log_coef_abs = 0.0;  // |C(alpha, 0)| = 1
    double coef_sign = 1.0;
    for (int i = 0; i < 10000; ++i) {
        const double di = static_cast<double>(i);
        const double j = alpha - di;
        const double log_t0 = log_coef_abs + di * log_q + j * log_1mq;
        const double log_t1 = log_coef_abs + j * log_q + di * log_1mq;
        const double log_e0 = std::log(0.5) + log_erfc((di - z0) / sqrt2s);
        const double log_e1 = std::log(0.5) + log_erfc((z0 - j) / sqrt2s);
        const double log_s0 = log_t0 + (di * di - di) * inv2s2 + log_e0;
        const double log_s1 = log_t1 + (j * j - j) * inv2s2 + log_e1;
        if (coef_sign > 0.0) {
            log_a0_pos = log_add_exp(log_a0_pos, log_s0);
            log_a1_pos = log_add_exp(log_a1_pos, log_s1);
        } else {
            log_a0_neg = log_add_exp(log_a0_neg, log_s0);
            log_a1_neg = log_add_exp(log_a1_neg, log_s1);
        }
        if (di > alpha && std::max(log_s0, log_s1) < -40.0) break;
        // C(alpha, i+1) = C(alpha, i) * (alpha - i) / (i + 1)
        const double factor = (alpha - di) / (di + 1.0);
        log_coef_abs += std::log(std::abs(factor));
        if (factor < 0.0) coef_sign = -coef_sign;
    }
    const double log_a0 = log_sub_exp(log_a0_pos, log_a0_neg);
    const double log_a1 = log_sub_exp(log_a1_pos, log_a1_neg);
    return log_add_exp(log_a0, log_a1);
}

}  // namespace detail

// One-step RDP of the Poisson-subsampled Gaussian at order alpha > 1.
inline double subsampled_gaussian_rdp(double q, double sigma, double alpha) {
    if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("rdp: q must be in [0,1]");
    if (sigma < 0.0) throw std::invalid_argument("rdp: sigma must be >= 0");
    if (!(alpha > 1.0)) throw std::invalid_argument("rdp: alpha must exceed 1");
    if (q == 0.0) return 0.0;
    if (sigma == 0.0) return std::numeric_limits<double>::infinity();
    if (q == 1.0) return alpha / (2.0 * sigma * sigma);  // plain Gaussian mechanism
    const double rounded = std::nearbyint(alpha);
    double log_a;
    if (std::abs(alpha - rounded) < 1e-12 && rounded >= 2.0)
        log_a = detail::log_a_integer(q, sigma, static_cast<long long>(rounded));
    else
        log_a = detail::log_a_fractional(q, sigma, alpha);
    return std::max(0.0, log_a / (alpha - 1.0));
}

// eps at a single order for accumulated rdp; can be negative in the
// vanishing-loss regime (callers clamp after minimizing).
inline double rdp_to_epsilon(double rdp, double alpha, double delta) {
    if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("epsilon: delta not in (0,1)");
    if (std::isinf(rdp)) return rdp;
    return rdp - (std::log(delta) + std::log(alpha)) / (alpha - 1.0) +
           std::log1p(-1.0 / alpha);
}

// Orders 1.25..1.75, all integers 2..64, then a geometric tail so the
// vanishing-noise regime (huge sigma) still converts to eps ~ 0.
inline std::vector<double> default_alpha_grid() {
    std::vector<double> grid = {1.25, 1.5, 1.75};
    for (int a = 2; a <= 64; ++a) grid.push_back(static_cast<double>(a));
    for (double a : {80.0, 96.0, 128.0, 192.0, 256.0, 384.0, 512.0, 768.0, 1024.0, 2048.0,
                     4096.0, 8192.0, 16384.0, 32768.0, 65536.0, 131072.0})
        grid.push_back(a);
    return grid;
}

// Tracks cumulative RDP of identical Poisson-subsampled Gaussian steps.
class PrivacyLedger {
public:
    PrivacyLedger() = default;
    PrivacyLedger(double q, double noise_multiplier,
                  std::vector<double> alpha_grid = default_alpha_grid())
        : q_(q), sigma_(noise_multiplier), grid_(std::move(alpha_grid)) {
        if (!(q_ >= 0.0 && q_ <= 1.0))
            throw std::invalid_argument("ledger: q must be in [0,1]");
        if (sigma_ < 0.0) throw std::invalid_argument("ledger: sigma must be >= 0");
        if (grid_.empty()) throw std::invalid_argument("ledger: empty alpha grid");
        per_step_.reserve(grid_.size());
        for (double a : grid_) per_step_.push_back(subsampled_gaussian_rdp(q_, sigma_, a));
        total_.assign(grid_.size(), 0.0);
    }

    void step(std::size_t count = 1) {
        for (std::size_t c = 0; c < count; ++c)
            for (std::size_t i = 0; i < grid_.size(); ++i) total_[i] += per_step_[i];
        steps_ += count;
    }

    double epsilon(double delta) const {
        if (!(delta > 0.0 && delta < 1.0))
            throw std::invalid_argument("epsilon: delta not in (0,1)");
        if (steps_ == 0 || q_ == 0.0) return 0.0;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < grid_.size(); ++i)
            best = std::min(best, rdp_to_epsilon(total_[i], grid_[i], delta));
        return std::max(0.0, best);
    }

    double best_alpha(double delta) const {
        if (!(delta > 0.0 && delta < 1.0))
            throw std::invalid_argument("epsilon: delta not in (0,1)");
        double best = std::numeric_limits<double>::infinity();
        double best_alpha = grid_.front();
        for (std::size_t i = 0; i < grid_.size(); ++i) {
            const double e = rdp_to_epsilon(total_[i], grid_[i], delta);
            if (e < best) {
                best = e;
                best_alpha = grid_[i];
            }
        }
        return best_alpha;
    }

    std::size_t steps() const { return steps_; }
    double q() const { return q_; }
    double noise_multiplier() const { return sigma_; }
    const std::vector<double>& alpha_grid() const { return grid_; }

    // The RDP analysis assumes Poisson sampling; a trainer using another
    // sampling scheme must flag the ledger so results are not over-claimed.
    void mark_uncertified(std::string reason) { uncertified_reason_ = std::move(reason); }
    bool certified() const { return uncertified_reason_.empty(); }
    const std::string& uncertified_reason() const { return uncertified_reason_; }

private:
    double q_ = 0.0;
    double sigma_ = 0.0;
    std::vector<double> grid_;
    std::vector<double> per_step_;
    std::vector<double> total_;
    std::size_t steps_ = 0;
    std::string uncertified_reason_;
};

// eps after `steps` identical releases; convenience for calibration/CLI.
inline double epsilon_after(double q, double sigma, std::size_t steps, double delta,
                            const std::vector<double>& grid = default_alpha_grid()) {
    PrivacyLedger ledger(q, sigma, grid);
    ledger.step(steps);
    return ledger.epsilon(delta);
}

// Smallest noise multiplier (within the search bounds) whose eps lands in
// [target*(1-1e-3), target], found by exponential bracketing + bisection.
// Throws if the target cannot be reached inside [1e-4, 1e6].
inline double calibrate_sigma(double target_eps, double delta, double q, std::size_t steps,
                              const std::vector<double>& grid = default_alpha_grid()) {
    if (!(target_eps > 0.0)) throw std::invalid_argument("calibrate: target eps must be > 0");
    if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("calibrate: q must be in (0,1]");
    if (steps == 0) throw std::invalid_argument("calibrate: steps must be >= 1");
    constexpr double kSigmaMin = 1e-4;
    constexpr double kSigmaMax = 1e6;
    constexpr double kBand = 1e-3;

    const auto eps_at = [&](double sigma) { return epsilon_after(q, sigma, steps, delta, grid); };

    double hi = 1.0;
    while (eps_at(hi) > target_eps) {
        hi *= 2.0;
        if (hi > kSigmaMax)
            throw std::runtime_error(
                "calibrate: target eps too small for the sigma search bound (1e6)");
    }
    double lo = hi * 0.5;
    while (eps_at(lo) <= target_eps) {
        lo *= 0.5;
        if (lo < kSigmaMin)
            throw std::runtime_error(
                "calibrate: target eps too large for the sigma search bound (1e-4)");
    }
    // invariant: eps(lo) > target >= eps(hi)
    for (int iter = 0; iter < 200; ++iter) {
        if (eps_at(hi) >= target_eps * (1.0 - kBand)) break;
        const double mid = 0.5 * (lo + hi);
        if (eps_at(mid) > target_eps)
            lo = mid;
        else
            hi = mid;
    }
    return hi;
}

}  // namespace lsg
