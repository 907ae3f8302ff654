// End-to-end acceptance checks for the normalization stack. Each test covers
// one released guarantee and prints a single verdict line; tolerances and
// experiment settings are pinned here on purpose.

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mbn/cli.hpp"

namespace fs = std::filesystem;
using namespace mbn;
using namespace mbn::cli;

namespace {

// Prints the per-guarantee verdict line when the test body finishes.
struct Verdict {
    std::string label;
    explicit Verdict(std::string l) : label(std::move(l)) {}
    ~Verdict() {
        std::printf("[acceptance] %s: %s\n", label.c_str(),
                    ::testing::Test::HasFailure() ? "FAIL" : "PASS");
        std::fflush(stdout);
    }
};

struct TempDir {
    fs::path path;

    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("mbn_acceptance_" + std::to_string(::getpid()) +
                                            "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string str(const std::string& child) const { return (path / child).string(); }
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    EXPECT_TRUE(in) << "cannot read " << path;
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double max_diff(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.size(), b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

void randomize_affine(NormLayer& layer, Rng& rng) {
    for (std::size_t f = 0; f < layer.gamma().size(); ++f) {
        layer.gamma()[f] = 0.5 + rng.uniform();
        layer.beta()[f] = rng.normal();
    }
}

void copy_affine(const NormLayer& src, NormLayer& dst) {
    dst.gamma() = src.gamma();
    dst.beta() = src.beta();
}

// Forward + backward agreement between two layers on the same batch:
// outputs, input gradients, and both parameter gradients.
double layer_pair_diff(NormLayer& a, NormLayer& b, const Tensor& x, const Tensor& upstream) {
    const Tensor ya = a.forward_train(x);
    const Tensor yb = b.forward_train(x);
    const Tensor gxa = a.backward(upstream);
    const Tensor gxb = b.backward(upstream);
    double worst = std::max(max_diff(ya, yb), max_diff(gxa, gxb));
    worst = std::max(worst, max_diff(a.grad_gamma(), b.grad_gamma()));
    worst = std::max(worst, max_diff(a.grad_beta(), b.grad_beta()));
    return worst;
}

}  // namespace

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

TEST(Acceptance, GradientsMatchFiniteDifferences) {
    Verdict v("layer gradients within 1e-5 and network gradients within 1e-4 of finite differences");
    GradcheckOptions opt;  // 20 instances per mode, rel_tol 1e-5, mlp_rel_tol 1e-4
    opt.batch = 8;
    opt.features = 5;
    opt.memory = 4;
    std::ostringstream log, err;
    EXPECT_EQ(run_gradcheck(opt, log, err), kExitOk) << log.str() << err.str();
    EXPECT_EQ(log.str().find("FAIL"), std::string::npos) << log.str();
}

// ---------------------------------------------------------------------------
// collapse to plain batch normalization
// ---------------------------------------------------------------------------

TEST(Acceptance, MemorizedCollapsesToPlainBn) {
    Verdict v("zero-weight and empty-memory MBN match BN forward and backward within 1e-12");
    Rng rng = Rng::stream(2026, "accept-collapse", 0);
    double worst = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t n = 2 + rng.below(7);
        const std::size_t f = 1 + rng.below(5);
        const Tensor x = random_tensor({n, f}, rng, 2.0);
        const Tensor upstream = random_tensor({n, f}, rng);

        NormLayer bn(NormMode::BN, f);
        randomize_affine(bn, rng);
        const Tensor y_bn = bn.forward_train(x);
        const Tensor gx_bn = bn.backward(upstream);

        NormLayer zero_weight(NormMode::MBN, f, 4, 1e-5, 0.1, 0.0, 0.9);
        copy_affine(bn, zero_weight);
        for (int e = 0; e < 3; ++e)
            zero_weight.memory().push(
                BatchStats(random_tensor({f}, rng), random_tensor({f}, rng, 0.0) + 1.0,
                           2 + rng.below(4)));

        NormLayer empty_memory(NormMode::MBN, f, 4, 1e-5, 0.1, 0.7, 0.9);
        copy_affine(bn, empty_memory);

        for (NormLayer* variant : {&zero_weight, &empty_memory}) {
            const Tensor y = variant->forward_train(x);
            const Tensor gx = variant->backward(upstream);
            worst = std::max(worst, max_diff(y, y_bn));
            worst = std::max(worst, max_diff(gx, gx_bn));
            worst = std::max(worst, max_diff(variant->grad_gamma(), bn.grad_gamma()));
            worst = std::max(worst, max_diff(variant->grad_beta(), bn.grad_beta()));
        }
    }
    EXPECT_LE(worst, 1e-12);
}

// ---------------------------------------------------------------------------
// aggregation identities
// ---------------------------------------------------------------------------

TEST(Acceptance, MomentAggregationMatchesSamplePooling) {
    Verdict v("moment-form aggregate equals sample-level weighted pooling within 1e-10");
    Rng rng = Rng::stream(2026, "accept-pooling", 0);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = rng.below(5);
        const std::size_t f = 1 + rng.below(4);
        const double lambda = rng.uniform();
        const double eta = rng.uniform(0.3, 1.0);
        StatsMemory memory(std::max<std::size_t>(m, 1), lambda, eta);
        std::vector<Tensor> raw;
        for (std::size_t e = 0; e < m; ++e) {
            raw.push_back(random_tensor({2 + rng.below(5), f}, rng, 1.5));
            memory.push(batch_stats(raw.back()));
        }
        raw.push_back(random_tensor({2 + rng.below(5), f}, rng, 1.5));
        const AggregateStats agg = memorized_stats(memory, batch_stats(raw.back()));
        const auto [mean, var] = oracle::pooled_stats(raw, weights_for_memory(memory));
        worst = std::max(worst, max_diff(agg.mean, mean));
        worst = std::max(worst, max_diff(agg.var, var));
    }
    EXPECT_LE(worst, 1e-10);

    // worked example: one remembered batch [-1,1] at weight 1/2, current [3,5]
    StatsMemory memory(1, 0.5, 0.9);
    Tensor past({2, 1});
    past[0] = -1.0;
    past[1] = 1.0;
    memory.push(batch_stats(past));
    Tensor cur({2, 1});
    cur[0] = 3.0;
    cur[1] = 5.0;
    const AggregateStats agg = memorized_stats(memory, batch_stats(cur));
    EXPECT_NEAR(agg.mean[0], 8.0 / 3.0, 1e-10);
    EXPECT_NEAR(agg.var[0], 123.0 / 27.0, 1e-10);
}

TEST(Acceptance, EqualWeightAggregationIsPopulationStatistics) {
    Verdict v("equal-weight aggregate equals concatenated population statistics within 1e-10");
    // frozen case: batches [0,2] and [4,6] pool to mean 3, variance 5
    {
        StatsMemory memory(1, 1.0, 1.0);
        Tensor a({2, 1}), b({2, 1});
        a[0] = 0.0;
        a[1] = 2.0;
        b[0] = 4.0;
        b[1] = 6.0;
        memory.push(batch_stats(a));
        const AggregateStats agg = memorized_stats(memory, batch_stats(b));
        EXPECT_NEAR(agg.mean[0], 3.0, 1e-10);
        EXPECT_NEAR(agg.var[0], 5.0, 1e-10);
    }
    Rng rng = Rng::stream(2026, "accept-equalweight", 0);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 1 + rng.below(4);
        const std::size_t n = 2 * (1 + rng.below(3));
        const std::size_t f = 1 + rng.below(4);
        StatsMemory memory(m, 1.0, 1.0);
        Tensor all({(m + 1) * n, f});
        std::size_t cursor = 0;
        Tensor cur;
        for (std::size_t e = 0; e <= m; ++e) {
            const Tensor b = random_tensor({n, f}, rng, 1.5);
            for (std::size_t i = 0; i < b.size(); ++i) all[cursor++] = b[i];
            if (e < m)
                memory.push(batch_stats(b));
            else
                cur = b;
        }
        const AggregateStats agg = memorized_stats(memory, batch_stats(cur));
        const BatchStats pooled = batch_stats(all);
        worst = std::max(worst, max_diff(agg.mean, pooled.mean));
        worst = std::max(worst, max_diff(agg.var, pooled.var));
    }
    EXPECT_LE(worst, 1e-10);
}

// ---------------------------------------------------------------------------
// renormalization identity regime
// ---------------------------------------------------------------------------

TEST(Acceptance, ClampedRenormAtIdentityBoundsIsBn) {
    Verdict v("renorm clamped to r_max=1, d_max=0 matches BN forward and backward within 1e-12");
    Rng rng = Rng::stream(2026, "accept-renorm", 0);
    double worst = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t n = 2 + rng.below(7);
        const std::size_t f = 1 + rng.below(5);

        NormLayer brn(NormMode::BRN, f);
        brn.set_brn_bounds({1.0, 0.0});
        randomize_affine(brn, rng);
        // initialize the moving averages so the clamps, not the cold start,
        // are what force the identity correction
        brn.forward_train(random_tensor({4 + rng.below(4), f}, rng, 2.0));

        NormLayer bn(NormMode::BN, f);
        copy_affine(brn, bn);

        const Tensor x = random_tensor({n, f}, rng, 2.0);
        const Tensor upstream = random_tensor({n, f}, rng);
        worst = std::max(worst, layer_pair_diff(brn, bn, x, upstream));
    }
    EXPECT_LE(worst, 1e-12);
}

// ---------------------------------------------------------------------------
// train/eval consistency
// ---------------------------------------------------------------------------

TEST(Acceptance, MemorizedTrainAndEvalAgree) {
    Verdict v("MBN eval output equals the preceding train-mode output on the same batch within 1e-12");
    Rng rng = Rng::stream(2026, "accept-consistency", 0);
    NormOptions opt;
    opt.memory_capacity = 8;
    opt.lambda = 0.5;
    Network net = make_mlp(16, {32, 32}, 10, NormMode::MBN, opt, rng);
    double worst = 0.0;
    for (int round = 0; round < 5; ++round) {
        const Tensor x = random_tensor({12, 16}, rng);
        const Tensor y_train = net.forward(x, PassMode::TrainGrad);
        const Tensor y_eval = net.forward(x, PassMode::Eval);
        worst = std::max(worst, max_diff(y_train, y_eval));
        // grow the memory between rounds the way training would
        std::vector<BatchStats> fresh;
        net.forward(x, PassMode::StatsOnly, &fresh);
        net.record_stats(fresh);
    }
    EXPECT_LE(worst, 1e-12);
}

// ---------------------------------------------------------------------------
// second-pass freshness
// ---------------------------------------------------------------------------

TEST(Acceptance, SecondPassRecordsAreFresh) {
    Verdict v("two-pass records have exactly zero staleness; one-pass records go stale");
    const Dataset ds = gen_blobs(7, 40, 4, 8, 3.0, 0.0, "train", 0);
    TrainConfig cfg;
    cfg.hidden = {8, 8};
    cfg.mode = NormMode::MBN;
    cfg.batch_size = 16;
    cfg.lr0 = 0.1;
    cfg.measure_staleness = true;

    auto run_scheme = [&](ForwardScheme scheme, auto&& check) {
        cfg.scheme = scheme;
        Rng rng = Rng::stream(7, "accept-fresh", scheme == ForwardScheme::Double ? 0 : 1);
        NormOptions nopt;
        nopt.memory_capacity = cfg.memory_k;
        Network net = make_mlp(8, cfg.hidden, 4, cfg.mode, nopt, rng);
        OptState opt;
        opt.init(net.params());
        for (int it = 0; it < 5; ++it) {
            std::vector<std::size_t> idx(cfg.batch_size);
            std::iota(idx.begin(), idx.end(), it * cfg.batch_size);
            const auto [x, y] = gather(ds, idx);
            const IterationMetrics m = train_iteration(net, x, y, opt, cfg.lr0, cfg);
            check(m.staleness, it);
        }
    };
    run_scheme(ForwardScheme::Double, [](double staleness, int it) {
        EXPECT_EQ(staleness, 0.0) << "iteration " << it;
    });
    run_scheme(ForwardScheme::Single, [](double staleness, int it) {
        EXPECT_GT(staleness, 0.0) << "iteration " << it;
    });
}

// ---------------------------------------------------------------------------
// small-batch training study (shared by the two directional criteria)
// ---------------------------------------------------------------------------

namespace {

struct SmallBatchStudy {
    std::vector<double> bn, scheduled, fixed_01, fixed_05, fixed_09;

    static double mean(const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    }
};

// 4-layer MLP, batch size 8, 10-class blobs, identical update budget for
// every arm; 20 seeds. One normalization arm differs per column.
const SmallBatchStudy& small_batch_study() {
    static const SmallBatchStudy study = [] {
        auto run_arm = [](NormMode mode, std::uint64_t seed,
                          std::vector<std::pair<double, double>> lambda_schedule) {
            TrainConfig cfg;
            cfg.hidden = {64, 64, 64, 64};
            cfg.batch_size = 8;
            cfg.memory_k = 20;
            cfg.eta = 1.0;  // every remembered batch counts fully
            cfg.total_epochs = 5;
            cfg.measure_staleness = false;
            cfg.mode = mode;
            cfg.seed = seed;
            if (!lambda_schedule.empty()) cfg.lambda_schedule = lambda_schedule;
            const Dataset train = gen_blobs(seed, 60, 10, 16, 2.5, 0.0, "train", 0);
            const Dataset test = gen_blobs(seed, 200, 10, 16, 2.5, 0.0, "test", 1);
            return fit(cfg, train, test).final_test_error;
        };
        SmallBatchStudy s;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            s.bn.push_back(run_arm(NormMode::BN, seed, {}));
            s.scheduled.push_back(run_arm(NormMode::MBN, seed, {}));
            s.fixed_01.push_back(run_arm(NormMode::MBN, seed, {{0.0, 0.1}}));
            s.fixed_05.push_back(run_arm(NormMode::MBN, seed, {{0.0, 0.5}}));
            s.fixed_09.push_back(run_arm(NormMode::MBN, seed, {{0.0, 0.9}}));
        }
        std::printf(
            "[acceptance] small-batch study means: bn=%.4f mbn=%.4f "
            "fixed(0.1)=%.4f fixed(0.5)=%.4f fixed(0.9)=%.4f\n",
            SmallBatchStudy::mean(s.bn), SmallBatchStudy::mean(s.scheduled),
            SmallBatchStudy::mean(s.fixed_01), SmallBatchStudy::mean(s.fixed_05),
            SmallBatchStudy::mean(s.fixed_09));
        return s;
    }();
    return study;
}

}  // namespace

TEST(Acceptance, MemorizedBeatsBnAtSmallBatch) {
    Verdict v("batch-8 MLP: mean MBN test error within 0.5pp of BN and lower on most seeds");
    const SmallBatchStudy& s = small_batch_study();
    const double bn_mean = SmallBatchStudy::mean(s.bn);
    const double mbn_mean = SmallBatchStudy::mean(s.scheduled);
    EXPECT_LE(mbn_mean, bn_mean + 0.005)
        << "bn mean " << bn_mean << " vs mbn mean " << mbn_mean;
    std::size_t wins = 0;
    for (std::size_t i = 0; i < s.bn.size(); ++i)
        if (s.scheduled[i] < s.bn[i]) ++wins;
    EXPECT_GT(2 * wins, s.bn.size()) << "mbn lower on only " << wins << " of " << s.bn.size()
                                     << " seeds";
}

TEST(Acceptance, ScheduledWeightIsNonInferior) {
    Verdict v("scheduled memory weight within 0.5pp of every fixed weight");
    const SmallBatchStudy& s = small_batch_study();
    const double sched = SmallBatchStudy::mean(s.scheduled);
    EXPECT_LE(sched, SmallBatchStudy::mean(s.fixed_01) + 0.005);
    EXPECT_LE(sched, SmallBatchStudy::mean(s.fixed_05) + 0.005);
    EXPECT_LE(sched, SmallBatchStudy::mean(s.fixed_09) + 0.005);
}

// ---------------------------------------------------------------------------
// estimator quality
// ---------------------------------------------------------------------------

TEST(Acceptance, PooledEstimatorBeatsSingleBatchEstimator) {
    Verdict v("memorized estimator MSE strictly below single-batch MSE at batch 8, zero drift");
    const Config full = resolve_bench_config(
        Config::from_string("bench.batch_sizes = 8\nbench.trials = 200\n", "acceptance"));
    const std::vector<BenchRow> rows = statsbench(full);
    double single = -1.0, memorized = -1.0;
    for (const BenchRow& r : rows) {
        if (r.batch_size != 8) continue;
        if (r.estimator == "single") single = r.mse_total();
        if (r.estimator == "memorized") memorized = r.mse_total();
    }
    ASSERT_GE(single, 0.0);
    ASSERT_GE(memorized, 0.0);
    EXPECT_LT(memorized, single) << "memorized " << memorized << " vs single " << single;
}

// ---------------------------------------------------------------------------
// determinism
// ---------------------------------------------------------------------------

TEST(Acceptance, IdenticalConfigsProduceByteIdenticalMetrics) {
    Verdict v("two training runs with identical resolved configs write byte-identical metrics");
    TempDir tmp;
    {
        std::ofstream cfg(tmp.str("exp.cfg"), std::ios::binary);
        cfg << "net.hidden = 8,8\n"
               "norm.memory_k = 6\n"
               "train.batch_size = 16\n"
               "train.epochs = 3\n"
               "data.blobs.classes = 4\n"
               "data.blobs.dim = 6\n"
               "data.blobs.n_per_class = 25\n"
               "data.blobs.test_n_per_class = 15\n";
    }
    TrainCliOptions a, b;
    a.config_path = b.config_path = tmp.str("exp.cfg");
    a.out_dir = tmp.str("first");
    b.out_dir = tmp.str("second");
    std::ostringstream log, err;
    ASSERT_EQ(run_train(a, log, err), kExitOk) << err.str();
    ASSERT_EQ(run_train(b, log, err), kExitOk) << err.str();
    EXPECT_EQ(read_file(tmp.str("first/config.resolved")),
              read_file(tmp.str("second/config.resolved")));
    const std::string first = read_file(tmp.str("first/metrics.csv"));
    EXPECT_FALSE(first.empty());
    EXPECT_EQ(first, read_file(tmp.str("second/metrics.csv")));
}
