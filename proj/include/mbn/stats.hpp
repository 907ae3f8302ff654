#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mbn/tensor.hpp"

namespace mbn {

// Per-feature first and second moments of one mini-batch, with the sample
// count that produced them (for rank-4 inputs the count includes the spatial
// positions, since every position contributes to the feature's moments).
struct BatchStats {
    Tensor mean;
    Tensor var;  // population variance (no Bessel correction)
    std::size_t count = 0;

    BatchStats() = default;
    BatchStats(Tensor m, Tensor v, std::size_t n)
        : mean(std::move(m)), var(std::move(v)), count(n) {
        if (mean.shape() != var.shape())
            throw std::invalid_argument("BatchStats: mean/var shape mismatch");
        if (count == 0) throw std::invalid_argument("BatchStats: empty batch");
        for (std::size_t i = 0; i < var.size(); ++i)
            if (var[i] < 0.0)
                throw std::invalid_argument("BatchStats: negative variance");
    }
};

// Reduce a batch to per-feature stats. Rank-2 input (N,F) reduces axis 0;
// rank-4 input (N,C,H,W) reduces axes {0,2,3} so channels are the features.
inline BatchStats batch_stats(const Tensor& x) {
    if (x.rank() == 2) {
        auto [mean, var] = reduce_moments(x, {0});
        return BatchStats(std::move(mean), std::move(var), x.shape()[0]);
    }
    if (x.rank() == 4) {
        auto [mean, var] = reduce_moments(x, {0, 2, 3});
        return BatchStats(std::move(mean), std::move(var),
                          x.shape()[0] * x.shape()[2] * x.shape()[3]);
    }
    throw std::invalid_argument("batch_stats: rank must be 2 or 4, got " +
                                std::to_string(x.rank()));
}

// Exponential moving average of feature stats. The first update seeds the
// state exactly instead of blending with the zero initializer.
struct MovingStats {
    Tensor mean;
    Tensor var;
    double theta = 0.1;
    bool initialized = false;

    explicit MovingStats(double theta_in = 0.1) : theta(theta_in) {
        if (theta <= 0.0 || theta > 1.0)
            throw std::invalid_argument("MovingStats: theta must be in (0,1]");
    }
};

inline void update_moving(MovingStats& mov, const BatchStats& batch) {
    if (!mov.initialized) {
        mov.mean = batch.mean;
        mov.var = batch.var;
        mov.initialized = true;
        return;
    }
    if (mov.mean.shape() != batch.mean.shape())
        throw std::invalid_argument("update_moving: feature shape changed");
    for (std::size_t i = 0; i < mov.mean.size(); ++i) {
        mov.mean[i] = mov.theta * batch.mean[i] + (1.0 - mov.theta) * mov.mean[i];
        mov.var[i] = mov.theta * batch.var[i] + (1.0 - mov.theta) * mov.var[i];
    }
}

// Bounded FIFO of past batch statistics (oldest first) plus the decay
// parameters that weight them. Capacity 0 is legal and keeps the memory
// permanently empty.
class StatsMemory {
  public:
    explicit StatsMemory(std::size_t capacity, double lambda = 0.1, double eta = 0.9)
        : capacity_(capacity), lambda_(lambda), eta_(eta) {
        if (lambda_ < 0.0 || lambda_ > 1.0)
            throw std::invalid_argument("StatsMemory: lambda must be in [0,1]");
        if (eta_ <= 0.0 || eta_ > 1.0)
            throw std::invalid_argument("StatsMemory: eta must be in (0,1]");
    }

    void push(BatchStats s) {
        if (capacity_ == 0) return;
        if (!entries_.empty() && entries_.front().mean.shape() != s.mean.shape())
            throw std::invalid_argument("StatsMemory: feature shape changed");
        entries_.push_back(std::move(s));
        if (entries_.size() > capacity_) entries_.pop_front();
    }

    void clear() { entries_.clear(); }
    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return entries_.empty(); }
    const BatchStats& entry(std::size_t i) const { return entries_.at(i); }

    double lambda() const { return lambda_; }
    double eta() const { return eta_; }
    void set_lambda(double lambda) {
        if (lambda < 0.0 || lambda > 1.0)
            throw std::invalid_argument("StatsMemory: lambda must be in [0,1]");
        lambda_ = lambda;
    }

  private:
    std::size_t capacity_;
    double lambda_;
    double eta_;
    std::deque<BatchStats> entries_;
};

// Geometric decay weights for the m stored batches followed by the current
// one: [lambda*eta^(m-1), ..., lambda*eta, lambda, 1], oldest first.
// lambda = 0 silences the memory entirely.
inline std::vector<double> weights_for_memory(const StatsMemory& memory) {
    const std::size_t m = memory.size();
    std::vector<double> w(m + 1);
    w[m] = 1.0;
    double decay = memory.lambda();
    for (std::size_t i = m; i-- > 0;) {
        w[i] = decay;
        decay *= memory.eta();
    }
    return w;
}

// Result of aggregating weighted batch statistics.
struct AggregateStats {
    Tensor mean;
    Tensor var;
    double total_weight = 0.0;  // S = sum_i alpha_i * n_i, current batch included
};

namespace detail {

inline std::pair<Tensor, double> weighted_mean_of(
    const std::vector<std::pair<const BatchStats*, double>>& history) {
    const std::size_t dim = history.front().first->mean.size();
    Tensor mean(history.front().first->mean.shape());
    double total = 0.0;
    for (const auto& [stats, alpha] : history) {
        if (stats->mean.size() != dim)
            throw std::invalid_argument("weighted stats: feature shape mismatch");
        if (alpha < 0.0) throw std::invalid_argument("weighted stats: negative weight");
        const double wi = alpha * static_cast<double>(stats->count);
        total += wi;
        for (std::size_t f = 0; f < dim; ++f) mean[f] += wi * stats->mean[f];
    }
    if (total <= 0.0) throw std::invalid_argument("weighted stats: degenerate weights");
    for (std::size_t f = 0; f < dim; ++f) mean[f] /= total;
    return {std::move(mean), total};
}

inline std::vector<std::pair<const BatchStats*, double>> history_of(const StatsMemory& memory,
                                                                    const BatchStats& current) {
    const auto w = weights_for_memory(memory);
    std::vector<std::pair<const BatchStats*, double>> history;
    history.reserve(memory.size() + 1);
    for (std::size_t i = 0; i < memory.size(); ++i) history.emplace_back(&memory.entry(i), w[i]);
    history.emplace_back(&current, 1.0);
    return history;
}

}  // namespace detail

// Memorized estimator: weighted mean of batch means, and weighted mean of
// (between-batch shift squared + within-batch variance). The shift term
// (mu_i - mu_hat)^2 makes the variance exact for the weighted union of the
// underlying samples. Empty memory or lambda = 0 returns the current batch
// stats bit-for-bit.
inline AggregateStats memorized_stats(const StatsMemory& memory, const BatchStats& current) {
    if (memory.empty() || memory.lambda() == 0.0)
        return {current.mean, current.var, static_cast<double>(current.count)};
    const auto history = detail::history_of(memory, current);
    auto [mean, total] = detail::weighted_mean_of(history);
    const std::size_t dim = mean.size();
    Tensor var(mean.shape());
    for (const auto& [stats, alpha] : history) {
        const double wi = alpha * static_cast<double>(stats->count);
        for (std::size_t f = 0; f < dim; ++f) {
            const double shift = stats->mean[f] - mean[f];
            var[f] += wi * (shift * shift + stats->var[f]);
        }
    }
    for (std::size_t f = 0; f < dim; ++f) var[f] /= total;
    return {std::move(mean), std::move(var), total};
}

// Plain weighted average of means and variances, no shift correction: the
// variance underestimates the pooled value whenever batch means disagree.
// This is the baseline the corrected estimator is compared against.
inline AggregateStats weighted_moving_stats(
    const std::vector<std::pair<const BatchStats*, double>>& history) {
    if (history.empty()) throw std::invalid_argument("weighted_moving_stats: empty history");
    auto [mean, total] = detail::weighted_mean_of(history);
    const std::size_t dim = mean.size();
    Tensor var(mean.shape());
    for (const auto& [stats, alpha] : history) {
        const double wi = alpha * static_cast<double>(stats->count);
        for (std::size_t f = 0; f < dim; ++f) var[f] += wi * stats->var[f];
    }
    for (std::size_t f = 0; f < dim; ++f) var[f] /= total;
    return {std::move(mean), std::move(var), total};
}

inline AggregateStats weighted_moving_stats(const StatsMemory& memory,
                                            const BatchStats& current) {
    if (memory.empty() || memory.lambda() == 0.0)
        return {current.mean, current.var, static_cast<double>(current.count)};
    return weighted_moving_stats(detail::history_of(memory, current));
}

}  // namespace mbn
