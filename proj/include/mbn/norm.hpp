#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

#include "mbn/stats.hpp"
#include "mbn/tensor.hpp"

namespace mbn {

enum class NormMode { BN, MBN, BRN, MovNorm };

inline std::string to_string(NormMode mode) {
    switch (mode) {
        case NormMode::BN: return "bn";
        case NormMode::MBN: return "mbn";
        case NormMode::BRN: return "brn";
        case NormMode::MovNorm: return "movnorm";
    }
    throw std::logic_error("to_string: bad NormMode");
}

inline NormMode parse_norm_mode(const std::string& s) {
    if (s == "bn") return NormMode::BN;
    if (s == "mbn") return NormMode::MBN;
    if (s == "brn") return NormMode::BRN;
    if (s == "movnorm") return NormMode::MovNorm;
    throw std::invalid_argument("unknown norm mode '" + s + "' (bn|mbn|brn|movnorm)");
}

struct BrnBounds {
    double r_max = 1.0;
    double d_max = 0.0;
};

namespace detail {

// Feature layout of a normalizable tensor: rank-2 (N,F) treats columns as
// features; rank-4 (N,C,H,W) treats channels as features, every spatial
// position counting as a sample.
struct FeatureLayout {
    std::size_t features = 0;
    std::size_t inner = 1;  // elements per feature per sample (H*W for rank-4)
    std::size_t feature_of(std::size_t flat) const { return (flat / inner) % features; }
};

inline FeatureLayout feature_layout(const Shape& shape) {
    if (shape.size() == 2) return {shape[1], 1};
    if (shape.size() == 4) return {shape[1], shape[2] * shape[3]};
    throw std::invalid_argument("norm layer: rank must be 2 or 4, got shape " +
                                shape_str(shape));
}

}  // namespace detail

// Pure batch-renormalized transform with r, d supplied from outside: batch
// stats of x, then y = gamma*(r*xhat + d) + beta. Exists so a finite
// difference oracle can probe the layer while holding r and d fixed, which
// is exactly the stop-gradient convention the backward pass uses.
inline Tensor brn_apply(const Tensor& x, const Tensor& r, const Tensor& d, const Tensor& gamma,
                        const Tensor& beta, double eps) {
    const auto layout = detail::feature_layout(x.shape());
    if (r.size() != layout.features || d.size() != layout.features)
        throw std::invalid_argument("brn_apply: r/d feature size mismatch");
    const BatchStats bs = batch_stats(x);
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t f = layout.feature_of(i);
        const double xhat = (x[i] - bs.mean[f]) / std::sqrt(bs.var[f] + eps);
        y[i] = gamma[f] * (r[f] * xhat + d[f]) + beta[f];
    }
    return y;
}

// One normalization layer covering four statistics regimes:
//   BN      — current batch stats, moving average kept for eval
//   MBN     — weighted memory of past batch stats with shift correction
//   BRN     — batch stats renormalized toward moving stats via clipped r, d
//   MovNorm — weighted memory without the shift correction (baseline)
//
// Three entry points mirror the three network passes: forward_train caches
// everything the backward pass needs, forward_stats normalizes with the same
// estimator but retains no cache and hands the fresh batch stats back for
// recording, forward_eval is pure.
class NormLayer {
  public:
    NormLayer(NormMode mode, std::size_t features, std::size_t memory_capacity = 20,
              double eps = 1e-5, double theta = 0.1, double lambda = 0.1, double eta = 0.9)
        : mode_(mode),
          features_(features),
          eps_(eps),
          gamma_(Tensor::full({features}, 1.0)),
          beta_(Tensor({features})),
          grad_gamma_(Tensor({features})),
          grad_beta_(Tensor({features})),
          moving_(theta),
          memory_(uses_memory() ? memory_capacity : 0, lambda, eta) {
        if (features == 0) throw std::invalid_argument("NormLayer: zero features");
        if (eps <= 0.0) throw std::invalid_argument("NormLayer: eps must be positive");
    }

    NormMode mode() const { return mode_; }
    std::size_t features() const { return features_; }
    bool uses_memory() const { return mode_ == NormMode::MBN || mode_ == NormMode::MovNorm; }

    Tensor& gamma() { return gamma_; }
    Tensor& beta() { return beta_; }
    const Tensor& gamma() const { return gamma_; }
    const Tensor& beta() const { return beta_; }
    Tensor& grad_gamma() { return grad_gamma_; }
    Tensor& grad_beta() { return grad_beta_; }
    StatsMemory& memory() { return memory_; }
    const StatsMemory& memory() const { return memory_; }
    MovingStats& moving() { return moving_; }
    const MovingStats& moving() const { return moving_; }
    double eps() const { return eps_; }

    void set_lambda(double lambda) { memory_.set_lambda(lambda); }
    void set_brn_bounds(BrnBounds b) {
        if (b.r_max < 1.0 || b.d_max < 0.0)
            throw std::invalid_argument("NormLayer: r_max must be >= 1 and d_max >= 0");
        bounds_ = b;
    }
    BrnBounds brn_bounds() const { return bounds_; }

    // Gradient pass. Normalizes with the mode's estimator, caches what the
    // backward pass needs, and advances BN/BRN moving averages. Memory modes
    // do NOT push here; the trainer decides which pass's stats get recorded.
    Tensor forward_train(const Tensor& x) {
        const auto layout = checked_layout(x);
        const BatchStats bs = batch_stats(x);
        cache_.present = true;
        cache_.x = x;
        cache_.batch = bs;

        switch (mode_) {
            case NormMode::BN: {
                Tensor y = normalize_affine(x, layout, bs.mean, bs.var, &cache_.xhat);
                fill_cache_stats(bs.mean, bs.var, static_cast<double>(bs.count));
                update_moving(moving_, bs);
                return y;
            }
            case NormMode::MBN: {
                AggregateStats agg = memorized_stats(memory_, bs);
                Tensor y = normalize_affine(x, layout, agg.mean, agg.var, &cache_.xhat);
                fill_cache_stats(agg.mean, agg.var, agg.total_weight);
                set_eval_stats(agg.mean, agg.var);
                return y;
            }
            case NormMode::MovNorm: {
                AggregateStats agg = weighted_moving_stats(memory_, bs);
                Tensor y = normalize_affine(x, layout, agg.mean, agg.var, &cache_.xhat);
                fill_cache_stats(agg.mean, agg.var, agg.total_weight);
                set_eval_stats(agg.mean, agg.var);
                return y;
            }
            case NormMode::BRN: {
                compute_brn_rd(bs, cache_.r, cache_.d);
                Tensor y(x.shape());
                cache_.xhat = Tensor(x.shape());
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const std::size_t f = layout.feature_of(i);
                    const double xhat = (x[i] - bs.mean[f]) / std::sqrt(bs.var[f] + eps_);
                    cache_.xhat[i] = xhat;
                    y[i] = gamma_[f] * (cache_.r[f] * xhat + cache_.d[f]) + beta_[f];
                }
                fill_cache_stats(bs.mean, bs.var, static_cast<double>(bs.count));
                update_moving(moving_, bs);
                return y;
            }
        }
        throw std::logic_error("forward_train: bad mode");
    }

    // Statistics pass: same estimator as forward_train but leaves no cache,
    // never advances moving averages, and returns the fresh batch stats so
    // the trainer can record them. Memory modes also refresh the snapshot
    // eval-mode normalizes with, keeping train and eval consistent.
    std::pair<Tensor, BatchStats> forward_stats(const Tensor& x) {
        const auto layout = checked_layout(x);
        const BatchStats bs = batch_stats(x);
        cache_.present = false;
        Tensor y;
        switch (mode_) {
            case NormMode::BN: {
                y = normalize_affine(x, layout, bs.mean, bs.var, nullptr);
                break;
            }
            case NormMode::MBN: {
                AggregateStats agg = memorized_stats(memory_, bs);
                y = normalize_affine(x, layout, agg.mean, agg.var, nullptr);
                set_eval_stats(agg.mean, agg.var);
                break;
            }
            case NormMode::MovNorm: {
                AggregateStats agg = weighted_moving_stats(memory_, bs);
                y = normalize_affine(x, layout, agg.mean, agg.var, nullptr);
                set_eval_stats(agg.mean, agg.var);
                break;
            }
            case NormMode::BRN: {
                Tensor r, d;
                compute_brn_rd(bs, r, d);
                y = brn_apply_with(x, layout, bs, r, d);
                break;
            }
        }
        return {std::move(y), bs};
    }

    // Pure inference pass. BN/BRN normalize with moving averages, memory
    // modes with the aggregate statistics their most recent training forward
    // used (so a frozen network scores a batch exactly as training saw it).
    Tensor forward_eval(const Tensor& x) const {
        const auto layout = checked_layout(x);
        const Tensor* mean = nullptr;
        const Tensor* var = nullptr;
        if (uses_memory()) {
            if (!eval_ready_)
                throw std::runtime_error("forward_eval: no recorded statistics yet (" +
                                         to_string(mode_) + " layer has not seen a batch)");
            mean = &eval_mean_;
            var = &eval_var_;
        } else {
            if (!moving_.initialized)
                throw std::runtime_error("forward_eval: moving statistics uninitialized (" +
                                         to_string(mode_) + " layer has not seen a batch)");
            mean = &moving_.mean;
            var = &moving_.var;
        }
        Tensor y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const std::size_t f = layout.feature_of(i);
            const double xhat = (x[i] - (*mean)[f]) / std::sqrt((*var)[f] + eps_);
            y[i] = gamma_[f] * xhat + beta_[f];
        }
        return y;
    }

    // Record one batch's statistics into the layer's store. For memory modes
    // this appends to the FIFO. BN/BRN already fold stats into their moving
    // averages during forward_train, so for them recording only seeds an
    // uninitialized moving state (the pre-training statistics pass).
    void record_stats(const BatchStats& bs) {
        if (uses_memory())
            memory_.push(bs);
        else if (!moving_.initialized)
            update_moving(moving_, bs);
    }

    // Backward through the cached forward. Statistics are differentiated
    // only through the current batch's contribution: memory entries, moving
    // averages, and the renormalization constants r, d are all constants.
    //
    // With d_j = g_j * gamma (per feature, j running over the batch slice),
    // inv = (var+eps)^(-1/2), S the total stat weight, and mu the mean the
    // forward normalized with:
    //   dvar  = -1/2 inv^3 sum_j d_j (x_j - mu)
    //   dmean = -inv sum_j d_j
    //   grad_x_j = d_j inv + dvar * dvar/dx_j + dmean / S
    // where dvar/dx_j is (2/S)(x_j - mu_hat) for the memorized estimator
    // (the shift-correction terms telescope) and (2/S)(x_j - mu_B) for the
    // uncorrected ones (BN with S = n, MovNorm, BRN scaled by r).
    Tensor backward(const Tensor& grad_y) {
        if (!cache_.present) throw std::runtime_error("backward: no cached forward");
        if (grad_y.shape() != cache_.x.shape())
            throw std::invalid_argument("backward: grad shape mismatch");
        const auto layout = detail::feature_layout(cache_.x.shape());
        const Tensor& x = cache_.x;
        const double S = cache_.total_weight;
        const bool brn = mode_ == NormMode::BRN;

        grad_gamma_ = Tensor({features_});
        grad_beta_ = Tensor({features_});
        Tensor inv({features_});
        for (std::size_t f = 0; f < features_; ++f)
            inv[f] = 1.0 / std::sqrt(cache_.var[f] + eps_);

        // Accumulate per-feature reductions over the batch slice.
        Tensor dvar({features_}), dmean({features_});
        for (std::size_t i = 0; i < x.size(); ++i) {
            const std::size_t f = layout.feature_of(i);
            const double g = grad_y[i];
            const double scale = brn ? cache_.r[f] : 1.0;
            const double dj = g * gamma_[f] * scale;
            const double effective_xhat =
                brn ? cache_.r[f] * cache_.xhat[i] + cache_.d[f] : cache_.xhat[i];
            grad_beta_[f] += g;
            grad_gamma_[f] += g * effective_xhat;
            dvar[f] += dj * (x[i] - cache_.mean[f]);
            dmean[f] += dj;
        }
        for (std::size_t f = 0; f < features_; ++f) {
            dvar[f] *= -0.5 * inv[f] * inv[f] * inv[f];
            dmean[f] *= -inv[f];
        }

        // The variance path pivots on mu_hat for MBN (its shift-corrected
        // variance differentiates to (2/S)(x_j - mu_hat)); every other mode
        // pivots on the raw batch mean.
        const Tensor& var_pivot = (mode_ == NormMode::MBN) ? cache_.mean : cache_.batch.mean;
        Tensor grad_x(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const std::size_t f = layout.feature_of(i);
            const double g = grad_y[i];
            const double scale = brn ? cache_.r[f] : 1.0;
            const double dj = g * gamma_[f] * scale;
            grad_x[i] = dj * inv[f] + dvar[f] * (2.0 / S) * (x[i] - var_pivot[f]) + dmean[f] / S;
        }
        return grad_x;
    }

    bool has_cache() const { return cache_.present; }
    // The renormalization constants the cached forward used (BRN only);
    // finite-difference probes hold these fixed, mirroring stop-gradient.
    std::pair<const Tensor*, const Tensor*> cached_rd() const {
        if (!cache_.present || mode_ != NormMode::BRN)
            throw std::runtime_error("cached_rd: no cached renormalization forward");
        return {&cache_.r, &cache_.d};
    }
    const BatchStats& cached_batch_stats() const {
        if (!cache_.present) throw std::runtime_error("cached_batch_stats: no cached forward");
        return cache_.batch;
    }
    // Aggregate statistics eval-mode would normalize with right now.
    std::pair<const Tensor*, const Tensor*> eval_stats() const {
        if (uses_memory()) {
            if (!eval_ready_) throw std::runtime_error("eval_stats: none recorded");
            return {&eval_mean_, &eval_var_};
        }
        if (!moving_.initialized) throw std::runtime_error("eval_stats: none recorded");
        return {&moving_.mean, &moving_.var};
    }
    bool eval_ready() const { return uses_memory() ? eval_ready_ : moving_.initialized; }
    void clear_cache() { cache_ = Cache{}; }
    // Reinstate a serialized eval snapshot (checkpoint restore).
    void restore_eval_stats(const Tensor& mean, const Tensor& var) {
        if (mean.size() != features_ || var.size() != features_)
            throw std::invalid_argument("restore_eval_stats: feature size mismatch");
        set_eval_stats(mean, var);
    }

  private:
    struct Cache {
        bool present = false;
        Tensor x;
        Tensor xhat;  // pre-affine normalized values (pre-r/d for BRN)
        Tensor mean;  // stats the forward normalized with
        Tensor var;
        double total_weight = 0.0;
        Tensor r, d;  // BRN only
        BatchStats batch;
    };

    detail::FeatureLayout checked_layout(const Tensor& x) const {
        const auto layout = detail::feature_layout(x.shape());
        if (layout.features != features_)
            throw std::invalid_argument("norm layer: input has " +
                                        std::to_string(layout.features) + " features, layer has " +
                                        std::to_string(features_));
        return layout;
    }

    Tensor normalize_affine(const Tensor& x, const detail::FeatureLayout& layout,
                            const Tensor& mean, const Tensor& var, Tensor* xhat_out) {
        Tensor y(x.shape());
        if (xhat_out) *xhat_out = Tensor(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const std::size_t f = layout.feature_of(i);
            const double xhat = (x[i] - mean[f]) / std::sqrt(var[f] + eps_);
            if (xhat_out) (*xhat_out)[i] = xhat;
            y[i] = gamma_[f] * xhat + beta_[f];
        }
        return y;
    }

    Tensor brn_apply_with(const Tensor& x, const detail::FeatureLayout& layout,
                          const BatchStats& bs, const Tensor& r, const Tensor& d) const {
        Tensor y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const std::size_t f = layout.feature_of(i);
            const double xhat = (x[i] - bs.mean[f]) / std::sqrt(bs.var[f] + eps_);
            y[i] = gamma_[f] * (r[f] * xhat + d[f]) + beta_[f];
        }
        return y;
    }

    // r = clip(sigma_B/sigma_mov), d = clip((mu_B - mu_mov)/sigma_mov), both
    // from the PRE-update moving stats and eps-stabilized. An uninitialized
    // moving state degenerates to the identity (r=1, d=0), matching plain
    // batch normalization on the very first batch.
    void compute_brn_rd(const BatchStats& bs, Tensor& r, Tensor& d) const {
        r = Tensor::full({features_}, 1.0);
        d = Tensor({features_});
        if (!moving_.initialized) return;
        const double r_lo = 1.0 / bounds_.r_max;
        for (std::size_t f = 0; f < features_; ++f) {
            const double sigma_b = std::sqrt(bs.var[f] + eps_);
            const double sigma_mov = std::sqrt(moving_.var[f] + eps_);
            r[f] = std::clamp(sigma_b / sigma_mov, r_lo, bounds_.r_max);
            d[f] = std::clamp((bs.mean[f] - moving_.mean[f]) / sigma_mov, -bounds_.d_max,
                              bounds_.d_max);
        }
    }

    void fill_cache_stats(const Tensor& mean, const Tensor& var, double total_weight) {
        cache_.mean = mean;
        cache_.var = var;
        cache_.total_weight = total_weight;
    }

    void set_eval_stats(const Tensor& mean, const Tensor& var) {
        eval_mean_ = mean;
        eval_var_ = var;
        eval_ready_ = true;
    }

    NormMode mode_;
    std::size_t features_;
    double eps_;
    Tensor gamma_, beta_;
    Tensor grad_gamma_, grad_beta_;
    MovingStats moving_;
    StatsMemory memory_;
    BrnBounds bounds_;
    Tensor eval_mean_, eval_var_;
    bool eval_ready_ = false;
    Cache cache_;
};

}  // namespace mbn
