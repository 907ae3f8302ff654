#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mbn/data.hpp"
#include "mbn/net.hpp"
#include "mbn/norm.hpp"
#include "mbn/rng.hpp"
#include "mbn/stats.hpp"
#include "mbn/tensor.hpp"

namespace mbn {

// Thrown when training hits a non-finite loss; the CLI maps it to exit 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ForwardScheme { Single, Double };

inline std::string to_string(ForwardScheme s) {
    return s == ForwardScheme::Single ? "single" : "double";
}

inline ForwardScheme parse_forward_scheme(const std::string& s) {
    if (s == "single") return ForwardScheme::Single;
    if (s == "double") return ForwardScheme::Double;
    throw std::invalid_argument("unknown forward scheme '" + s + "' (single|double)");
}

struct TrainConfig {
    double lr0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t batch_size = 128;
    std::size_t total_epochs = 30;
    std::vector<double> lr_drops = {0.4, 0.6};  // divide lr by 10 at these fractions
    std::vector<std::pair<double, double>> lambda_schedule = {{0.0, 0.1}, {0.4, 0.5}, {0.6, 0.9}};
    double eta = 0.9;
    std::size_t memory_k = 20;
    double theta = 0.1;
    double eps = 1e-5;
    NormMode mode = NormMode::MBN;
    ForwardScheme scheme = ForwardScheme::Double;
    std::uint64_t seed = 1;
    std::vector<std::size_t> hidden = {64, 64, 64};
    bool drop_last = false;
    bool measure_staleness = true;

    void validate() const {
        if (lr0 <= 0.0) throw std::invalid_argument("config: lr0 must be positive");
        if (momentum < 0.0 || momentum >= 1.0)
            throw std::invalid_argument("config: momentum must be in [0,1)");
        if (weight_decay < 0.0) throw std::invalid_argument("config: negative weight decay");
        if (batch_size == 0) throw std::invalid_argument("config: batch_size must be >= 1");
        for (std::size_t i = 0; i < lr_drops.size(); ++i) {
            if (lr_drops[i] < 0.0 || lr_drops[i] >= 1.0)
                throw std::invalid_argument("config: lr drop fractions must lie in [0,1)");
            if (i > 0 && lr_drops[i] <= lr_drops[i - 1])
                throw std::invalid_argument("config: lr drop fractions must increase");
        }
        if (lambda_schedule.empty())
            throw std::invalid_argument("config: lambda schedule must not be empty");
        for (std::size_t i = 0; i < lambda_schedule.size(); ++i) {
            const auto& [frac, lam] = lambda_schedule[i];
            if (frac < 0.0 || frac >= 1.0)
                throw std::invalid_argument("config: lambda schedule fractions must lie in [0,1)");
            if (lam < 0.0 || lam > 1.0)
                throw std::invalid_argument("config: lambda values must lie in [0,1]");
            if (i > 0 && frac <= lambda_schedule[i - 1].first)
                throw std::invalid_argument("config: lambda schedule fractions must increase");
        }
        if (eta <= 0.0 || eta > 1.0) throw std::invalid_argument("config: eta must be in (0,1]");
        if (theta <= 0.0 || theta > 1.0)
            throw std::invalid_argument("config: theta must be in (0,1]");
        if (eps <= 0.0) throw std::invalid_argument("config: eps must be positive");
        if (hidden.empty()) throw std::invalid_argument("config: need at least one hidden layer");
    }
};

// Momentum buffers aligned with a Network::params() traversal.
struct OptState {
    std::vector<Tensor> velocity;

    void init(const std::vector<ParamView>& params) {
        velocity.clear();
        velocity.reserve(params.size());
        for (const auto& p : params) velocity.emplace_back(p.value->shape());
    }
};

// v := momentum*v + (grad + wd*param); param := param - lr*v.
// Parameters flagged decay=false (norm-layer gamma/beta) skip weight decay.
inline void sgd_step(std::vector<ParamView>& params, OptState& opt, double lr, double momentum,
                     double weight_decay) {
    if (opt.velocity.size() != params.size())
        throw std::invalid_argument("sgd_step: optimizer state has " +
                                    std::to_string(opt.velocity.size()) + " buffers for " +
                                    std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& v = opt.velocity[i];
        Tensor& p = *params[i].value;
        const Tensor& g = *params[i].grad;
        if (v.shape() != p.shape() || g.shape() != p.shape())
            throw std::invalid_argument("sgd_step: shape mismatch at parameter " +
                                        params[i].name);
        const double wd = params[i].decay ? weight_decay : 0.0;
        for (std::size_t e = 0; e < p.size(); ++e) {
            v[e] = momentum * v[e] + (g[e] + wd * p[e]);
            p[e] -= lr * v[e];
        }
    }
}

struct ScheduleState {
    double lr = 0.1;
    double lambda = 0.1;
    BrnBounds bounds{1.0, 0.0};
};

// Piecewise-constant lr (divided by 10 at each drop fraction) and lambda
// (last schedule entry at or before progress); BRN bounds ramp linearly from
// (1,0) to (3,5) between 20% and 40% of training.
inline ScheduleState schedule_at(double progress, const TrainConfig& cfg) {
    if (progress < 0.0 || progress > 1.0)
        throw std::invalid_argument("schedule_at: progress outside [0,1]");
    ScheduleState s;
    s.lr = cfg.lr0;
    for (double frac : cfg.lr_drops)
        if (progress >= frac) s.lr /= 10.0;
    s.lambda = cfg.lambda_schedule.front().second;
    for (const auto& [frac, lam] : cfg.lambda_schedule)
        if (progress >= frac) s.lambda = lam;
    if (progress <= 0.2) {
        s.bounds = {1.0, 0.0};
    } else if (progress >= 0.4) {
        s.bounds = {3.0, 5.0};
    } else {
        const double t = (progress - 0.2) / 0.2;
        s.bounds = {1.0 + 2.0 * t, 5.0 * t};
    }
    return s;
}

struct IterationMetrics {
    double loss = 0.0;
    double error = 0.0;
    double staleness = 0.0;
};

namespace detail {

// Max relative elementwise distance between two stats snapshots.
inline double stats_distance(const BatchStats& a, const BatchStats& b) {
    auto tensor_dist = [](const Tensor& u, const Tensor& v) {
        double worst = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            const double scale = std::max({std::abs(u[i]), std::abs(v[i]), 1e-12});
            worst = std::max(worst, std::abs(u[i] - v[i]) / scale);
        }
        return worst;
    };
    return std::max(tensor_dist(a.mean, b.mean), tensor_dist(a.var, b.var));
}

// Distance between the statistics recorded this iteration and statistics
// recomputed under the network's current parameters. Runs the measurement
// on a copy so the probe leaves no trace in the network.
inline double measure_staleness(const Network& net, const Tensor& x,
                                const std::vector<BatchStats>& recorded) {
    Network probe = net;
    std::vector<BatchStats> fresh;
    probe.forward(x, PassMode::StatsOnly, &fresh);
    if (fresh.size() != recorded.size())
        throw std::logic_error("measure_staleness: stats count mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < fresh.size(); ++i)
        worst = std::max(worst, stats_distance(recorded[i], fresh[i]));
    return worst;
}

}  // namespace detail

// One update with the two-pass scheme: gradient forward (statistics include
// the pre-update current batch), backward + SGD step, then a statistics-only
// forward under the updated parameters whose fresh batch stats are recorded.
// Recorded and recomputed statistics therefore coincide: staleness is zero
// by construction.
inline IterationMetrics train_iteration_double(Network& net, const Tensor& x,
                                               const std::vector<std::size_t>& y, OptState& opt,
                                               double lr, const TrainConfig& cfg) {
    IterationMetrics m;
    Tensor logits = net.forward(x, PassMode::TrainGrad);
    auto [loss, grad_logits] = softmax_xent(logits, y);
    m.loss = loss;
    m.error = classification_error(logits, y);
    net.backward(grad_logits);
    auto params = net.params();
    sgd_step(params, opt, lr, cfg.momentum, cfg.weight_decay);

    std::vector<BatchStats> fresh;
    net.forward(x, PassMode::StatsOnly, &fresh);
    // measure before the push: recording itself shifts the aggregates that
    // feed deeper layers, so afterwards nothing could reproduce the record
    m.staleness = cfg.measure_staleness ? detail::measure_staleness(net, x, fresh) : 0.0;
    net.record_stats(fresh);
    return m;
}

// One update with the classic single-pass scheme: the statistics recorded
// are the ones computed BEFORE the parameter update, so they are stale the
// moment the step lands.
inline IterationMetrics train_iteration_single(Network& net, const Tensor& x,
                                               const std::vector<std::size_t>& y, OptState& opt,
                                               double lr, const TrainConfig& cfg) {
    IterationMetrics m;
    std::vector<BatchStats> pre_update;
    Tensor logits = net.forward(x, PassMode::TrainGrad, &pre_update);
    auto [loss, grad_logits] = softmax_xent(logits, y);
    m.loss = loss;
    m.error = classification_error(logits, y);
    net.backward(grad_logits);
    auto params = net.params();
    sgd_step(params, opt, lr, cfg.momentum, cfg.weight_decay);

    m.staleness = cfg.measure_staleness ? detail::measure_staleness(net, x, pre_update) : 0.0;
    net.record_stats(pre_update);
    return m;
}

inline IterationMetrics train_iteration(Network& net, const Tensor& x,
                                        const std::vector<std::size_t>& y, OptState& opt,
                                        double lr, const TrainConfig& cfg) {
    return cfg.scheme == ForwardScheme::Double
               ? train_iteration_double(net, x, y, opt, lr, cfg)
               : train_iteration_single(net, x, y, opt, lr, cfg);
}

// One row of the run log; mirrors the metrics CSV schema.
struct EpochRow {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0.0;
    double error = 0.0;
    double lr = 0.0;
    double lambda = 0.0;
    double staleness = 0.0;
    std::string method;
    std::uint64_t seed = 0;
    std::size_t batch_size = 0;
};

struct RunRecord {
    std::vector<EpochRow> rows;
    double final_test_error = 0.0;
    double final_test_loss = 0.0;
};

namespace detail {

inline std::pair<double, double> evaluate(Network& net, const Dataset& ds,
                                          std::size_t batch_size) {
    double loss_sum = 0.0;
    std::size_t wrong = 0;
    const std::size_t n = ds.n();
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        auto [x, y] = gather(ds, idx);
        Tensor logits = net.forward(x, PassMode::Eval);
        auto [loss, grad] = softmax_xent(logits, y);
        (void)grad;
        loss_sum += loss * static_cast<double>(idx.size());
        wrong += static_cast<std::size_t>(
            std::lround(classification_error(logits, y) * static_cast<double>(idx.size())));
    }
    return {loss_sum / static_cast<double>(n), static_cast<double>(wrong) / static_cast<double>(n)};
}

}  // namespace detail

// Full training loop. Deterministic for a fixed config: data order comes
// from the seeded shuffle stream, initialization from the init stream.
// Epoch 0 rows are eval-mode baselines taken after a statistics seeding
// pass; each subsequent epoch logs the running training average (train
// split) and an eval-mode pass (test split). Schedules are applied at epoch
// boundaries with progress = (epoch-1)/total_epochs.
inline RunRecord fit(const TrainConfig& cfg, const Dataset& train, const Dataset& test) {
    cfg.validate();
    train.validate();
    test.validate();
    if (train.num_classes != test.num_classes)
        throw std::invalid_argument("fit: train/test class count mismatch");
    const std::size_t input_dim = train.features.size() / train.n();

    Rng init_rng = Rng::stream(cfg.seed, "init", 0);
    NormOptions nopt{cfg.memory_k, cfg.eps, cfg.theta, cfg.lambda_schedule.front().second,
                     cfg.eta};
    Network net;
    if (train.features.rank() == 4) {
        Network flat;
        flat.add(Flatten{});
        net = std::move(flat);
        // Images are flattened up front; the MLP sees one row per sample.
    }
    {
        Network mlp = make_mlp(input_dim, cfg.hidden, train.num_classes, cfg.mode, nopt,
                               init_rng);
        for (std::size_t i = 0; i < mlp.size(); ++i) net.add(std::move(mlp.layer(i)));
    }

    OptState opt;
    auto params = net.params();
    opt.init(params);

    const std::string method = to_string(cfg.mode) + "-" + to_string(cfg.scheme);
    auto make_row = [&](std::size_t epoch, const std::string& split, double loss, double error,
                        const ScheduleState& sched, double staleness) {
        EpochRow row;
        row.epoch = epoch;
        row.split = split;
        row.loss = loss;
        row.error = error;
        row.lr = sched.lr;
        row.lambda = sched.lambda;
        row.staleness = staleness;
        row.method = method;
        row.seed = cfg.seed;
        row.batch_size = cfg.batch_size;
        return row;
    };

    RunRecord rec;
    ScheduleState sched = schedule_at(0.0, cfg);
    net.set_lambda(sched.lambda);
    net.set_brn_bounds(sched.bounds);

    // Statistics seeding: one stats-only pass over the first samples so
    // eval-mode normalization is defined before any update has happened.
    {
        const std::size_t n0 = std::min(cfg.batch_size, train.n());
        std::vector<std::size_t> idx(n0);
        for (std::size_t i = 0; i < n0; ++i) idx[i] = i;
        auto [x, y] = gather(train, idx);
        (void)y;
        std::vector<BatchStats> fresh;
        net.forward(x, PassMode::StatsOnly, &fresh);
        net.record_stats(fresh);
    }

    auto [loss0_tr, err0_tr] = detail::evaluate(net, train, cfg.batch_size);
    rec.rows.push_back(make_row(0, "train", loss0_tr, err0_tr, sched, 0.0));
    auto [loss0_te, err0_te] = detail::evaluate(net, test, cfg.batch_size);
    rec.rows.push_back(make_row(0, "test", loss0_te, err0_te, sched, 0.0));
    rec.final_test_loss = loss0_te;
    rec.final_test_error = err0_te;

    Rng shuffle_rng = Rng::stream(cfg.seed, "shuffle", 0);
    for (std::size_t epoch = 1; epoch <= cfg.total_epochs; ++epoch) {
        const double progress =
            static_cast<double>(epoch - 1) / static_cast<double>(cfg.total_epochs);
        sched = schedule_at(progress, cfg);
        net.set_lambda(sched.lambda);
        net.set_brn_bounds(sched.bounds);

        double loss_sum = 0.0, err_sum = 0.0, staleness_sum = 0.0;
        std::size_t sample_count = 0, iter_count = 0;
        for (const auto& idx : batches(train.n(), cfg.batch_size, shuffle_rng, cfg.drop_last)) {
            auto [x, y] = gather(train, idx);
            IterationMetrics m = train_iteration(net, x, y, opt, sched.lr, cfg);
            if (!std::isfinite(m.loss))
                throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", iteration " + std::to_string(iter_count + 1));
            loss_sum += m.loss * static_cast<double>(idx.size());
            err_sum += m.error * static_cast<double>(idx.size());
            staleness_sum += m.staleness;
            sample_count += idx.size();
            ++iter_count;
        }
        const double mean_staleness =
            iter_count ? staleness_sum / static_cast<double>(iter_count) : 0.0;
        rec.rows.push_back(make_row(epoch, "train",
                                    loss_sum / static_cast<double>(sample_count),
                                    err_sum / static_cast<double>(sample_count), sched,
                                    mean_staleness));
        auto [loss_te, err_te] = detail::evaluate(net, test, cfg.batch_size);
        rec.rows.push_back(make_row(epoch, "test", loss_te, err_te, sched, mean_staleness));
        rec.final_test_loss = loss_te;
        rec.final_test_error = err_te;
    }
    return rec;
}

}  // namespace mbn
