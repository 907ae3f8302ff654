#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mbn/config.hpp"
#include "mbn/data.hpp"
#include "mbn/net.hpp"
#include "mbn/norm.hpp"
#include "mbn/oracle.hpp"
#include "mbn/rng.hpp"
#include "mbn/stats.hpp"
#include "mbn/tensor.hpp"
#include "mbn/train.hpp"

namespace mbn::cli {

// Exit codes shared by every subcommand.
constexpr int kExitOk = 0;
constexpr int kExitGradcheckFailed = 1;
constexpr int kExitBadConfig = 2;
constexpr int kExitNumericError = 3;

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

// Known configuration keys with their default values (as strings, so the
// resolved config stays human-readable). Keys listed with nullopt-like empty
// marker are optional and appear in the resolved config only when set.
inline const std::vector<std::pair<std::string, std::string>>& train_key_defaults() {
    static const std::vector<std::pair<std::string, std::string>> defaults = {
        {"seed", "1"},
        {"net.hidden", "64,64,64"},
        {"norm.mode", "mbn"},
        {"norm.eps", "1e-5"},
        {"norm.theta", "0.1"},
        {"norm.memory_k", "20"},
        {"norm.eta", "0.9"},
        {"train.scheme", "double"},
        {"train.lr0", "0.1"},
        {"train.momentum", "0.9"},
        {"train.weight_decay", "1e-4"},
        {"train.batch_size", "128"},
        {"train.epochs", "30"},
        {"train.lr_drops", "0.4,0.6"},
        {"train.lambda_schedule", "0:0.1,0.4:0.5,0.6:0.9"},
        {"train.drop_last", "false"},
        {"train.measure_staleness", "true"},
        {"data.source", "blobs"},
        {"data.standardize", "false"},
        {"data.blobs.classes", "10"},
        {"data.blobs.dim", "16"},
        {"data.blobs.n_per_class", "100"},
        {"data.blobs.test_n_per_class", "100"},
        {"data.blobs.separation", "3.0"},
        {"data.blobs.drift", "0.0"},
    };
    return defaults;
}

inline const std::set<std::string>& train_optional_keys() {
    static const std::set<std::string> keys = {
        "seeds",          "data.idx.train_images", "data.idx.train_labels",
        "data.idx.test_images", "data.idx.test_labels",  "data.csv.train",
        "data.csv.test",
    };
    return keys;
}

// Merge user configuration over the defaults table, rejecting unknown keys.
inline Config resolve_train_config(const Config& user) {
    std::set<std::string> known;
    Config full;
    for (const auto& [key, value] : train_key_defaults()) {
        known.insert(key);
        full.set(key, value);
    }
    for (const auto& key : train_optional_keys()) known.insert(key);
    user.require_known_keys(known);
    for (const auto& [key, value] : user.entries()) full.set(key, value);
    return full;
}

inline TrainConfig train_config_from(const Config& full) try {
    TrainConfig cfg;
    cfg.seed = full.get_u64("seed", 1);
    cfg.hidden = full.get_size_list("net.hidden", cfg.hidden);
    cfg.mode = parse_norm_mode(full.get_str("norm.mode", "mbn"));
    cfg.eps = full.get_double("norm.eps", cfg.eps);
    cfg.theta = full.get_double("norm.theta", cfg.theta);
    cfg.memory_k = static_cast<std::size_t>(full.get_u64("norm.memory_k", cfg.memory_k));
    cfg.eta = full.get_double("norm.eta", cfg.eta);
    cfg.scheme = parse_forward_scheme(full.get_str("train.scheme", "double"));
    cfg.lr0 = full.get_double("train.lr0", cfg.lr0);
    cfg.momentum = full.get_double("train.momentum", cfg.momentum);
    cfg.weight_decay = full.get_double("train.weight_decay", cfg.weight_decay);
    cfg.batch_size = static_cast<std::size_t>(full.get_u64("train.batch_size", cfg.batch_size));
    cfg.total_epochs = static_cast<std::size_t>(full.get_u64("train.epochs", cfg.total_epochs));
    cfg.lr_drops = full.get_double_list("train.lr_drops", cfg.lr_drops);
    cfg.lambda_schedule = full.get_schedule("train.lambda_schedule", cfg.lambda_schedule);
    cfg.drop_last = full.get_bool("train.drop_last", cfg.drop_last);
    cfg.measure_staleness = full.get_bool("train.measure_staleness", cfg.measure_staleness);
    cfg.validate();
    return cfg;
} catch (const std::invalid_argument& e) {
    // bad enum names and out-of-range values are both configuration mistakes
    throw ConfigError(e.what());
}

// Per-feature standardization computed on the train split and applied to
// both splits (eps-stabilized).
inline void standardize_pair(Dataset& train, Dataset& test) {
    const std::size_t dim = train.features.size() / train.n();
    std::vector<double> mean(dim, 0.0), var(dim, 0.0);
    const std::size_t n = train.n();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t f = 0; f < dim; ++f) mean[f] += train.features[i * dim + f];
    for (std::size_t f = 0; f < dim; ++f) mean[f] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t f = 0; f < dim; ++f) {
            const double d = train.features[i * dim + f] - mean[f];
            var[f] += d * d;
        }
    for (std::size_t f = 0; f < dim; ++f) var[f] /= static_cast<double>(n);
    auto apply = [&](Dataset& ds) {
        const std::size_t rows = ds.n();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t f = 0; f < dim; ++f)
                ds.features[i * dim + f] =
                    (ds.features[i * dim + f] - mean[f]) / std::sqrt(var[f] + 1e-8);
    };
    apply(train);
    apply(test);
}

inline std::pair<Dataset, Dataset> datasets_from(const Config& full, std::uint64_t seed) {
    const std::string source = full.get_str("data.source", "blobs");
    Dataset train, test;
    if (source == "blobs") {
        const auto classes = static_cast<std::size_t>(full.get_u64("data.blobs.classes", 10));
        const auto dim = static_cast<std::size_t>(full.get_u64("data.blobs.dim", 16));
        const auto n_train = static_cast<std::size_t>(full.get_u64("data.blobs.n_per_class", 100));
        const auto n_test =
            static_cast<std::size_t>(full.get_u64("data.blobs.test_n_per_class", 100));
        const double sep = full.get_double("data.blobs.separation", 3.0);
        const double drift = full.get_double("data.blobs.drift", 0.0);
        // Both splits share the class geometry; noise streams 0/1 keep their
        // samples disjoint.
        train = gen_blobs(seed, n_train, classes, dim, sep, drift, "train", 0);
        test = gen_blobs(seed, n_test, classes, dim, sep, drift, "test", 1);
    } else if (source == "idx") {
        for (const char* key : {"data.idx.train_images", "data.idx.train_labels",
                                "data.idx.test_images", "data.idx.test_labels"})
            if (!full.has(key)) throw ConfigError(std::string("config: missing key '") + key +
                                                  "' for data.source = idx");
        try {
            train = load_idx(full.get_str("data.idx.train_images", ""),
                             full.get_str("data.idx.train_labels", ""), "train");
            test = load_idx(full.get_str("data.idx.test_images", ""),
                            full.get_str("data.idx.test_labels", ""), "test");
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
        const std::size_t classes = std::max(train.num_classes, test.num_classes);
        train.num_classes = classes;
        test.num_classes = classes;
    } else if (source == "csv") {
        for (const char* key : {"data.csv.train", "data.csv.test"})
            if (!full.has(key)) throw ConfigError(std::string("config: missing key '") + key +
                                                  "' for data.source = csv");
        try {
            train = load_csv(full.get_str("data.csv.train", ""), "train");
            test = load_csv(full.get_str("data.csv.test", ""), "test");
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
        const std::size_t classes = std::max(train.num_classes, test.num_classes);
        train.num_classes = classes;
        test.num_classes = classes;
    } else {
        throw ConfigError("config: data.source must be blobs|idx|csv, got '" + source + "'");
    }
    if (full.get_bool("data.standardize", false)) standardize_pair(train, test);
    return {std::move(train), std::move(test)};
}

inline std::string metrics_csv_header() {
    return "epoch,split,loss,error,lr,lambda,staleness,method,seed,batch_size";
}

inline std::string metrics_csv_row(const EpochRow& r) {
    std::ostringstream os;
    os << r.epoch << ',' << r.split << ',' << format_double(r.loss) << ','
       << format_double(r.error) << ',' << format_double(r.lr) << ',' << format_double(r.lambda)
       << ',' << format_double(r.staleness) << ',' << r.method << ',' << r.seed << ','
       << r.batch_size;
    return os.str();
}

inline void write_metrics_csv(const std::string& path, const std::vector<EpochRow>& rows) {
    std::ofstream out(path, std::ios::binary);  // binary: no newline translation
    if (!out) throw std::runtime_error("cannot write " + path);
    out << metrics_csv_header() << '\n';
    for (const auto& r : rows) out << metrics_csv_row(r) << '\n';
}

// Parse "1..5" (inclusive range) or "1,2,3" into a seed list.
inline std::vector<std::uint64_t> parse_seed_spec(const std::string& spec) {
    std::vector<std::uint64_t> seeds;
    const auto dots = spec.find("..");
    try {
        if (dots != std::string::npos) {
            const std::uint64_t lo = std::stoull(spec.substr(0, dots));
            const std::uint64_t hi = std::stoull(spec.substr(dots + 2));
            if (hi < lo) throw std::invalid_argument("descending range");
            for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
        } else {
            std::istringstream ss(spec);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!detail::trim(item).empty()) seeds.push_back(std::stoull(detail::trim(item)));
        }
    } catch (const std::exception&) {
        throw ConfigError("config: bad seed list '" + spec + "' (want e.g. 1..5 or 1,2,3)");
    }
    if (seeds.empty()) throw ConfigError("config: empty seed list '" + spec + "'");
    return seeds;
}

struct TrainCliOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "out";
};

// The `train` subcommand: load config, run fit() for each seed, write
// metrics.csv and config.resolved into the output directory.
inline int run_train(const TrainCliOptions& opt, std::ostream& log, std::ostream& err) {
    try {
        Config user = Config::from_file(opt.config_path);
        for (const auto& ov : opt.overrides) user.apply_override(ov);
        Config full = resolve_train_config(user);
        TrainConfig base = train_config_from(full);

        std::vector<std::uint64_t> seeds;
        if (full.has("seeds"))
            seeds = parse_seed_spec(full.get_str("seeds", ""));
        else
            seeds = {base.seed};

        std::filesystem::create_directories(opt.out_dir);
        {
            std::ofstream rc(opt.out_dir + "/config.resolved", std::ios::binary);
            if (!rc) throw std::runtime_error("cannot write " + opt.out_dir + "/config.resolved");
            rc << full.resolved();
        }

        std::vector<EpochRow> rows;
        for (std::uint64_t seed : seeds) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            auto [train_ds, test_ds] = datasets_from(full, seed);
            RunRecord rec = fit(cfg, train_ds, test_ds);
            rows.insert(rows.end(), rec.rows.begin(), rec.rows.end());
            log << "seed " << seed << ": final test error " << format_double(rec.final_test_error)
                << ", loss " << format_double(rec.final_test_loss) << "\n";
        }
        write_metrics_csv(opt.out_dir + "/metrics.csv", rows);
        log << "wrote " << opt.out_dir << "/metrics.csv (" << rows.size() << " rows)\n";
        return kExitOk;
    } catch (const ConfigError& e) {
        err << e.what() << "\n";
        return kExitBadConfig;
    } catch (const NumericError& e) {
        err << e.what() << "\n";
        return kExitNumericError;
    } catch (const std::exception& e) {
        err << e.what() << "\n";
        return kExitBadConfig;
    }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckOptions {
    std::string mode = "all";  // bn|mbn|brn|movnorm|mlp|all
    std::size_t batch = 4;
    std::size_t features = 3;
    std::size_t memory = 3;
    std::size_t instances = 20;
    std::uint64_t seed = 7;
    double lambda = 0.5;
    double eta = 0.9;
    double rel_tol = 1e-5;
    double abs_tol = 1e-8;
    double mlp_rel_tol = 1e-4;
};

namespace detail_gc {

struct GroupResult {
    bool pass = true;
    double worst_rel = 0.0;
    std::string worst_context;

    void fold(const oracle::GradReport& rep, const std::string& context) {
        if (rep.max_rel_err > worst_rel || (!rep.pass && pass)) {
            worst_rel = std::max(worst_rel, rep.max_rel_err);
            if (!rep.pass || worst_context.empty()) worst_context = context + ": " + rep.str();
        }
        if (!rep.pass) pass = false;
    }
};

// Build a randomized layer instance: parameters near identity, memory and
// moving statistics populated with well-conditioned random values.
inline NormLayer random_layer(NormMode mode, std::size_t batch, std::size_t features,
                              std::size_t memory, double lambda, double eta, Rng& rng) {
    NormLayer layer(mode, features, std::max<std::size_t>(memory, 1), 1e-5, 0.1, lambda, eta);
    for (std::size_t f = 0; f < features; ++f) {
        layer.gamma()[f] = 0.5 + rng.uniform();
        layer.beta()[f] = 0.5 * rng.normal();
    }
    if (layer.uses_memory()) {
        for (std::size_t e = 0; e < memory; ++e) {
            Tensor mean({features}), var({features});
            for (std::size_t f = 0; f < features; ++f) {
                mean[f] = 2.0 * rng.normal();
                var[f] = rng.uniform(0.2, 2.0);
            }
            layer.memory().push(BatchStats(mean, var, 2 + rng.below(4)));
        }
    }
    if (mode == NormMode::BRN) {
        layer.set_brn_bounds({3.0, 5.0});
        layer.moving().mean = Tensor({features});
        layer.moving().var = Tensor({features});
        for (std::size_t f = 0; f < features; ++f) {
            layer.moving().mean[f] = rng.normal();
            layer.moving().var[f] = rng.uniform(0.3, 2.0);
        }
        layer.moving().initialized = true;
    }
    (void)batch;
    return layer;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

}  // namespace detail_gc

// Check one normalization mode against finite differences on `instances`
// random layer instances. Returns per-group worst-case results.
inline std::map<std::string, detail_gc::GroupResult> gradcheck_layer(
    NormMode mode, const GradcheckOptions& opt) {
    std::map<std::string, detail_gc::GroupResult> groups;
    for (std::size_t inst = 0; inst < opt.instances; ++inst) {
        Rng rng = Rng::stream(opt.seed, "gradcheck-" + to_string(mode), inst);
        const std::size_t batch = 2 + rng.below(opt.batch >= 2 ? opt.batch - 1 : 1);
        const std::size_t features = 1 + rng.below(opt.features);
        const std::size_t memory = mode == NormMode::BN || mode == NormMode::BRN
                                       ? 0
                                       : rng.below(opt.memory + 1);
        NormLayer pristine = detail_gc::random_layer(mode, batch, features, memory, opt.lambda,
                                                     opt.eta, rng);
        const Tensor x = detail_gc::random_tensor({batch, features}, rng, 2.0);
        const Tensor g = detail_gc::random_tensor({batch, features}, rng);
        const std::string context = to_string(mode) + " instance " + std::to_string(inst) +
                                    " (batch " + std::to_string(batch) + ", features " +
                                    std::to_string(features) + ", memory " +
                                    std::to_string(memory) + ")";

        NormLayer analytic = pristine;
        analytic.forward_train(x);
        const Tensor grad_x = analytic.backward(g);

        std::function<double(const Tensor&)> f_x;
        if (mode == NormMode::BRN) {
            auto [r, d] = analytic.cached_rd();
            const Tensor r0 = *r, d0 = *d;
            f_x = [&, r0, d0](const Tensor& xp) {
                return dot(g, brn_apply(xp, r0, d0, pristine.gamma(), pristine.beta(),
                                        pristine.eps()));
            };
        } else {
            f_x = [&](const Tensor& xp) {
                NormLayer probe = pristine;
                return dot(g, probe.forward_train(xp));
            };
        }
        groups["grad_x"].fold(
            oracle::compare_grads(grad_x, oracle::fd_gradient(f_x, x), opt.rel_tol, opt.abs_tol),
            context);

        auto f_gamma = [&](const Tensor& gp) {
            NormLayer probe = pristine;
            probe.gamma() = gp;
            return dot(g, probe.forward_train(x));
        };
        groups["grad_gamma"].fold(
            oracle::compare_grads(analytic.grad_gamma(), oracle::fd_gradient(f_gamma, pristine.gamma()),
                                  opt.rel_tol, opt.abs_tol),
            context);

        auto f_beta = [&](const Tensor& bp) {
            NormLayer probe = pristine;
            probe.beta() = bp;
            return dot(g, probe.forward_train(x));
        };
        groups["grad_beta"].fold(
            oracle::compare_grads(analytic.grad_beta(), oracle::fd_gradient(f_beta, pristine.beta()),
                                  opt.rel_tol, opt.abs_tol),
            context);

        // lambda = 0 must reduce the memorized modes to plain batch norm.
        if (pristine.uses_memory() && opt.lambda == 0.0) {
            NormLayer bn(NormMode::BN, features);
            bn.gamma() = pristine.gamma();
            bn.beta() = pristine.beta();
            NormLayer mem = pristine;
            const Tensor y_mem = mem.forward_train(x);
            const Tensor y_bn = bn.forward_train(x);
            oracle::GradReport rep = oracle::compare_grads(y_mem, y_bn, 0.0, 1e-12);
            groups["bn_reduction"].fold(rep, context);
            const Tensor gx_mem = mem.backward(g);
            const Tensor gx_bn = bn.backward(g);
            groups["bn_reduction"].fold(oracle::compare_grads(gx_mem, gx_bn, 0.0, 1e-12),
                                        context);
        }
    }
    return groups;
}

// Whole-network finite-difference check: every learnable parameter of a
// small MLP, all four normalization modes. Renormalization runs with
// identity bounds so its piecewise-constant r, d are locally flat and the
// stop-gradient matches the true derivative.
inline std::map<std::string, detail_gc::GroupResult> gradcheck_mlp(const GradcheckOptions& opt) {
    std::map<std::string, detail_gc::GroupResult> groups;
    const std::vector<NormMode> modes = {NormMode::BN, NormMode::MBN, NormMode::BRN,
                                         NormMode::MovNorm};
    for (NormMode mode : modes) {
        Rng rng = Rng::stream(opt.seed, "gradcheck-mlp-" + to_string(mode), 0);
        const std::size_t input_dim = 4, classes = 3, batch = 6;
        NormOptions nopt{4, 1e-5, 0.1, opt.lambda, opt.eta};
        Network net = make_mlp(input_dim, {5, 4}, classes, mode, nopt, rng);
        for (auto* layer : net.norm_layers()) {
            const std::size_t features = layer->features();
            for (std::size_t f = 0; f < features; ++f) {
                layer->gamma()[f] = 0.5 + rng.uniform();
                layer->beta()[f] = 0.5 * rng.normal();
            }
            if (layer->uses_memory()) {
                for (std::size_t e = 0; e < 2; ++e) {
                    Tensor mean({features}), var({features});
                    for (std::size_t f = 0; f < features; ++f) {
                        mean[f] = rng.normal();
                        var[f] = rng.uniform(0.2, 2.0);
                    }
                    layer->memory().push(BatchStats(mean, var, 3));
                }
            }
            if (layer->mode() == NormMode::BRN) {
                layer->set_brn_bounds({1.0, 0.0});
                layer->moving().mean = detail_gc::random_tensor({features}, rng, 0.5);
                layer->moving().var = Tensor::full({features}, 1.0);
                layer->moving().initialized = true;
            }
        }
        const Tensor x = detail_gc::random_tensor({batch, input_dim}, rng);
        std::vector<std::size_t> labels(batch);
        for (auto& l : labels) l = rng.below(classes);

        Network analytic = net;
        Tensor logits = analytic.forward(x, PassMode::TrainGrad);
        auto [loss, grad_logits] = softmax_xent(logits, labels);
        (void)loss;
        analytic.backward(grad_logits);
        auto analytic_params = analytic.params();

        auto loss_of = [&](Network probe) {
            Tensor out = probe.forward(x, PassMode::TrainGrad);
            return softmax_xent(out, labels).first;
        };
        auto pristine_params = net.params();
        for (std::size_t p = 0; p < pristine_params.size(); ++p) {
            const Tensor& value = *pristine_params[p].value;
            auto f = [&](const Tensor& vp) {
                Network probe = net;
                *probe.params()[p].value = vp;
                return loss_of(std::move(probe));
            };
            const Tensor numeric = oracle::fd_gradient(f, value);
            groups["mlp_" + to_string(mode)].fold(
                oracle::compare_grads(*analytic_params[p].grad, numeric, opt.mlp_rel_tol,
                                      opt.abs_tol),
                to_string(mode) + " mlp param " + pristine_params[p].name);
        }

        // Gradient w.r.t. the network input closes the loop through every
        // layer type at once.
        auto f_input = [&](const Tensor& xp) {
            Network probe = net;
            Tensor out = probe.forward(xp, PassMode::TrainGrad);
            return softmax_xent(out, labels).first;
        };
        Network input_probe = net;
        Tensor out2 = input_probe.forward(x, PassMode::TrainGrad);
        auto [loss2, gl2] = softmax_xent(out2, labels);
        (void)loss2;
        const Tensor grad_in = input_probe.backward(gl2);
        groups["mlp_" + to_string(mode)].fold(
            oracle::compare_grads(grad_in, oracle::fd_gradient(f_input, x), opt.mlp_rel_tol,
                                  opt.abs_tol),
            to_string(mode) + " mlp input");
    }
    return groups;
}

// The `gradcheck` subcommand. Prints one line per parameter group; exit 0
// iff every group passed at the configured tolerances.
inline int run_gradcheck(const GradcheckOptions& opt, std::ostream& log, std::ostream& err) {
    try {
        std::map<std::string, detail_gc::GroupResult> groups;
        auto merge = [&](const std::string& prefix,
                         const std::map<std::string, detail_gc::GroupResult>& more) {
            for (const auto& [name, res] : more) {
                auto& dst = groups[prefix + name];
                if (!res.pass) dst.pass = false;
                if (res.worst_rel > dst.worst_rel) {
                    dst.worst_rel = res.worst_rel;
                    dst.worst_context = res.worst_context;
                }
                if (dst.worst_context.empty()) dst.worst_context = res.worst_context;
            }
        };
        const bool all = opt.mode == "all";
        if (all || opt.mode == "bn") merge("bn.", gradcheck_layer(NormMode::BN, opt));
        if (all || opt.mode == "mbn") merge("mbn.", gradcheck_layer(NormMode::MBN, opt));
        if (all || opt.mode == "brn") merge("brn.", gradcheck_layer(NormMode::BRN, opt));
        if (all || opt.mode == "movnorm") merge("movnorm.", gradcheck_layer(NormMode::MovNorm, opt));
        if (all || opt.mode == "mlp") merge("", gradcheck_mlp(opt));
        if (groups.empty()) {
            err << "gradcheck: unknown mode '" << opt.mode
                << "' (bn|mbn|brn|movnorm|mlp|all)\n";
            return kExitBadConfig;
        }
        bool ok = true;
        for (const auto& [name, res] : groups) {
            log << (res.pass ? "PASS" : "FAIL") << " " << name
                << " max_rel=" << format_double(res.worst_rel) << "\n";
            if (!res.pass) {
                ok = false;
                err << "gradcheck failure in " << name << ": " << res.worst_context << "\n";
            }
        }
        return ok ? kExitOk : kExitGradcheckFailed;
    } catch (const std::exception& e) {
        err << e.what() << "\n";
        return kExitBadConfig;
    }
}

// ---------------------------------------------------------------------------
// statsbench
// ---------------------------------------------------------------------------

inline const std::vector<std::pair<std::string, std::string>>& bench_key_defaults() {
    static const std::vector<std::pair<std::string, std::string>> defaults = {
        {"seed", "1"},          {"bench.batch_sizes", "8,16,32,64,128"},
        {"bench.trials", "100"}, {"bench.drift", "0.0"},
        {"bench.dim", "4"},      {"bench.sigma", "1.0"},
        {"bench.memory_k", "20"}, {"bench.lambda", "1.0"},
        {"bench.eta", "1.0"},    {"bench.theta", "0.1"},
    };
    return defaults;
}

inline Config resolve_bench_config(const Config& user) {
    std::set<std::string> known;
    Config full;
    for (const auto& [key, value] : bench_key_defaults()) {
        known.insert(key);
        full.set(key, value);
    }
    user.require_known_keys(known);
    for (const auto& [key, value] : user.entries()) full.set(key, value);
    return full;
}

struct BenchRow {
    std::size_t batch_size = 0;
    std::string estimator;
    double mse_mean = 0.0;
    double mse_var = 0.0;
    std::size_t trials = 0;
    double drift = 0.0;

    double mse_total() const { return mse_mean + mse_var; }
};

// Simulate a (possibly drifting) Gaussian stream and score each estimator's
// squared error against the true generating moments of the newest batch.
// Estimators: the newest batch alone, an exponential moving average, the
// weighted average without shift correction, the full memorized estimator on
// the recorded (stale under drift) window, and the same estimator on a
// window re-measured at the current distribution (the two-pass analogue).
inline std::vector<BenchRow> statsbench(const Config& full) {
    const auto batch_sizes = full.get_size_list("bench.batch_sizes", {8, 16, 32, 64, 128});
    const auto trials = static_cast<std::size_t>(full.get_u64("bench.trials", 100));
    const double drift = full.get_double("bench.drift", 0.0);
    const auto dim = static_cast<std::size_t>(full.get_u64("bench.dim", 4));
    const double sigma = full.get_double("bench.sigma", 1.0);
    const auto k = static_cast<std::size_t>(full.get_u64("bench.memory_k", 20));
    const double lambda = full.get_double("bench.lambda", 1.0);
    const double eta = full.get_double("bench.eta", 1.0);
    const double theta = full.get_double("bench.theta", 0.1);
    const std::uint64_t seed = full.get_u64("seed", 1);
    if (trials == 0) throw ConfigError("config: bench.trials must be >= 1");
    if (dim == 0) throw ConfigError("config: bench.dim must be >= 1");
    if (sigma <= 0.0) throw ConfigError("config: bench.sigma must be positive");
    if (drift < 0.0) throw ConfigError("config: bench.drift must be >= 0");
    if (k == 0) throw ConfigError("config: bench.memory_k must be >= 1");

    const std::vector<std::string> estimators = {"single", "moving", "weighted", "memorized",
                                                 "memorized_refreshed"};
    std::vector<BenchRow> rows;
    for (std::size_t bs : batch_sizes) {
        if (bs == 0) throw ConfigError("config: bench.batch_sizes entries must be >= 1");
        std::map<std::string, std::pair<double, double>> acc;  // estimator -> (mse_mean, mse_var)
        for (std::size_t trial = 0; trial < trials; ++trial) {
            Rng rng = Rng::stream(seed, "bench-b" + std::to_string(bs), trial);
            Tensor drift_dir({dim});
            {
                double norm2 = 0.0;
                for (std::size_t f = 0; f < dim; ++f) {
                    drift_dir[f] = rng.normal();
                    norm2 += drift_dir[f] * drift_dir[f];
                }
                const double norm = std::sqrt(norm2);
                for (std::size_t f = 0; f < dim; ++f)
                    drift_dir[f] = norm > 0.0 ? drift_dir[f] / norm : (f == 0 ? 1.0 : 0.0);
            }
            auto draw_batch = [&](std::size_t t) {
                Tensor x({bs, dim});
                for (std::size_t i = 0; i < bs; ++i)
                    for (std::size_t f = 0; f < dim; ++f)
                        x[i * dim + f] =
                            drift * static_cast<double>(t) * drift_dir[f] + sigma * rng.normal();
                return x;
            };

            StatsMemory recorded(k, lambda, eta);
            MovingStats moving(theta);
            for (std::size_t t = 0; t < k; ++t) {
                const BatchStats bsstats = batch_stats(draw_batch(t));
                recorded.push(bsstats);
                update_moving(moving, bsstats);
            }
            const BatchStats current = batch_stats(draw_batch(k));
            update_moving(moving, current);

            StatsMemory refreshed(k, lambda, eta);
            for (std::size_t t = 0; t < k; ++t) refreshed.push(batch_stats(draw_batch(k)));

            Tensor true_mean({dim});
            for (std::size_t f = 0; f < dim; ++f)
                true_mean[f] = drift * static_cast<double>(k) * drift_dir[f];
            const double true_var = sigma * sigma;

            auto score = [&](const std::string& name, const Tensor& mean, const Tensor& var) {
                double em = 0.0, ev = 0.0;
                for (std::size_t f = 0; f < dim; ++f) {
                    const double dm = mean[f] - true_mean[f];
                    const double dv = var[f] - true_var;
                    em += dm * dm;
                    ev += dv * dv;
                }
                acc[name].first += em / static_cast<double>(dim);
                acc[name].second += ev / static_cast<double>(dim);
            };
            score("single", current.mean, current.var);
            score("moving", moving.mean, moving.var);
            const AggregateStats weighted = weighted_moving_stats(recorded, current);
            score("weighted", weighted.mean, weighted.var);
            const AggregateStats memorized = memorized_stats(recorded, current);
            score("memorized", memorized.mean, memorized.var);
            const AggregateStats refreshed_stats = memorized_stats(refreshed, current);
            score("memorized_refreshed", refreshed_stats.mean, refreshed_stats.var);
        }
        for (const auto& name : estimators) {
            BenchRow row;
            row.batch_size = bs;
            row.estimator = name;
            row.mse_mean = acc[name].first / static_cast<double>(trials);
            row.mse_var = acc[name].second / static_cast<double>(trials);
            row.trials = trials;
            row.drift = drift;
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

struct StatsbenchCliOptions {
    std::string config_path;  // optional; defaults apply when empty
    std::vector<std::string> overrides;
    std::string out_dir = "out";
};

inline int run_statsbench(const StatsbenchCliOptions& opt, std::ostream& log, std::ostream& err) {
    try {
        Config user;
        if (!opt.config_path.empty()) user = Config::from_file(opt.config_path);
        for (const auto& ov : opt.overrides) user.apply_override(ov);
        Config full = resolve_bench_config(user);
        const auto rows = statsbench(full);

        std::filesystem::create_directories(opt.out_dir);
        const std::string path = opt.out_dir + "/statsbench.csv";
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path);
        const std::string header = "batch_size,estimator,mse_mean,mse_var,mse_total,trials,drift";
        out << header << '\n';
        log << header << "\n";
        for (const auto& r : rows) {
            std::ostringstream line;
            line << r.batch_size << ',' << r.estimator << ',' << format_double(r.mse_mean) << ','
                 << format_double(r.mse_var) << ',' << format_double(r.mse_total()) << ','
                 << r.trials << ',' << format_double(r.drift);
            out << line.str() << '\n';
            log << line.str() << "\n";
        }
        {
            std::ofstream rc(opt.out_dir + "/statsbench.config.resolved", std::ios::binary);
            if (rc) rc << full.resolved();
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        err << e.what() << "\n";
        return kExitBadConfig;
    } catch (const std::exception& e) {
        err << e.what() << "\n";
        return kExitBadConfig;
    }
}

}  // namespace mbn::cli
