#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mbn/norm.hpp"
#include "mbn/rng.hpp"
#include "mbn/stats.hpp"
#include "mbn/tensor.hpp"

namespace mbn {

enum class PassMode { TrainGrad, StatsOnly, Eval };

// Mutable handle to one learnable tensor and its gradient; decay marks
// whether weight decay applies (it never does for norm-layer gamma/beta).
struct ParamView {
    Tensor* value = nullptr;
    Tensor* grad = nullptr;
    bool decay = true;
    std::string name;
};

struct Dense {
    Tensor w;  // (in, out)
    Tensor b;  // (out)
    Tensor grad_w, grad_b;
    Tensor x_cache;
    bool cached = false;

    Dense(std::size_t in, std::size_t out, Rng& rng)
        : w({in, out}), b({out}), grad_w({in, out}), grad_b({out}) {
        const double stddev = std::sqrt(2.0 / static_cast<double>(in));
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, stddev);
    }

    Tensor forward(const Tensor& x, PassMode mode) {
        if (x.rank() != 2 || x.shape()[1] != w.shape()[0])
            throw std::invalid_argument("Dense: input shape " + shape_str(x.shape()) +
                                        " incompatible with weight " + shape_str(w.shape()));
        if (mode == PassMode::TrainGrad) {
            x_cache = x;
            cached = true;
        } else {
            cached = false;
        }
        Tensor y = matmul(x, w);
        const std::size_t out = w.shape()[1];
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i % out];
        return y;
    }

    Tensor backward(const Tensor& g) {
        if (!cached) throw std::runtime_error("Dense: backward without cached forward");
        grad_w = matmul(transpose2d(x_cache), g);
        grad_b = reduce_sum(g, {0});
        return matmul(g, transpose2d(w));
    }
};

struct ReLU {
    Tensor x_cache;
    bool cached = false;

    Tensor forward(const Tensor& x, PassMode mode) {
        if (mode == PassMode::TrainGrad) {
            x_cache = x;
            cached = true;
        } else {
            cached = false;
        }
        return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
    }

    // Subgradient at exactly zero is taken as zero.
    Tensor backward(const Tensor& g) {
        if (!cached) throw std::runtime_error("ReLU: backward without cached forward");
        Tensor out(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) out[i] = x_cache[i] > 0.0 ? g[i] : 0.0;
        return out;
    }
};

// Direct 3x3 convolution, stride 1, zero padding 1 (shape-preserving).
struct Conv3x3 {
    Tensor w;  // (out_channels, in_channels, 3, 3)
    Tensor b;  // (out_channels)
    Tensor grad_w, grad_b;
    Tensor x_cache;
    bool cached = false;

    Conv3x3(std::size_t in_ch, std::size_t out_ch, Rng& rng)
        : w({out_ch, in_ch, 3, 3}), b({out_ch}), grad_w({out_ch, in_ch, 3, 3}), grad_b({out_ch}) {
        const double stddev = std::sqrt(2.0 / (static_cast<double>(in_ch) * 9.0));
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, stddev);
    }

    Tensor forward(const Tensor& x, PassMode mode) {
        if (x.rank() != 4 || x.shape()[1] != w.shape()[1])
            throw std::invalid_argument("Conv3x3: input shape " + shape_str(x.shape()) +
                                        " incompatible with weight " + shape_str(w.shape()));
        if (mode == PassMode::TrainGrad) {
            x_cache = x;
            cached = true;
        } else {
            cached = false;
        }
        const std::size_t n = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
        const std::size_t co = w.shape()[0];
        Tensor y({n, co, h, wd});
        for (std::size_t img = 0; img < n; ++img)
            for (std::size_t oc = 0; oc < co; ++oc)
                for (std::size_t r = 0; r < h; ++r)
                    for (std::size_t c = 0; c < wd; ++c) {
                        double acc = b[oc];
                        for (std::size_t ic = 0; ic < ci; ++ic)
                            for (std::size_t kr = 0; kr < 3; ++kr)
                                for (std::size_t kc = 0; kc < 3; ++kc) {
                                    const std::ptrdiff_t rr =
                                        static_cast<std::ptrdiff_t>(r + kr) - 1;
                                    const std::ptrdiff_t cc =
                                        static_cast<std::ptrdiff_t>(c + kc) - 1;
                                    if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(h) ||
                                        cc >= static_cast<std::ptrdiff_t>(wd))
                                        continue;
                                    acc += x.at({img, ic, static_cast<std::size_t>(rr),
                                                 static_cast<std::size_t>(cc)}) *
                                           w.at({oc, ic, kr, kc});
                                }
                        y.at({img, oc, r, c}) = acc;
                    }
        return y;
    }

    Tensor backward(const Tensor& g) {
        if (!cached) throw std::runtime_error("Conv3x3: backward without cached forward");
        const Tensor& x = x_cache;
        const std::size_t n = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
        const std::size_t co = w.shape()[0];
        grad_w = Tensor(w.shape());
        grad_b = Tensor(b.shape());
        Tensor gx(x.shape());
        for (std::size_t img = 0; img < n; ++img)
            for (std::size_t oc = 0; oc < co; ++oc)
                for (std::size_t r = 0; r < h; ++r)
                    for (std::size_t c = 0; c < wd; ++c) {
                        const double go = g.at({img, oc, r, c});
                        grad_b[oc] += go;
                        for (std::size_t ic = 0; ic < ci; ++ic)
                            for (std::size_t kr = 0; kr < 3; ++kr)
                                for (std::size_t kc = 0; kc < 3; ++kc) {
                                    const std::ptrdiff_t rr =
                                        static_cast<std::ptrdiff_t>(r + kr) - 1;
                                    const std::ptrdiff_t cc =
                                        static_cast<std::ptrdiff_t>(c + kc) - 1;
                                    if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(h) ||
                                        cc >= static_cast<std::ptrdiff_t>(wd))
                                        continue;
                                    const double xv = x.at({img, ic, static_cast<std::size_t>(rr),
                                                            static_cast<std::size_t>(cc)});
                                    grad_w.at({oc, ic, kr, kc}) += go * xv;
                                    gx.at({img, ic, static_cast<std::size_t>(rr),
                                           static_cast<std::size_t>(cc)}) +=
                                        go * w.at({oc, ic, kr, kc});
                                }
                    }
        return gx;
    }
};

struct Flatten {
    Shape in_shape;

    Tensor forward(const Tensor& x, PassMode) {
        if (x.rank() < 2) throw std::invalid_argument("Flatten: need rank >= 2");
        in_shape = x.shape();
        std::size_t cols = 1;
        for (std::size_t a = 1; a < x.rank(); ++a) cols *= x.shape()[a];
        return x.reshaped({x.shape()[0], cols});
    }

    Tensor backward(const Tensor& g) { return g.reshaped(in_shape); }
};

using Layer = std::variant<Dense, ReLU, Conv3x3, Flatten, NormLayer>;

// Sequential network with value semantics: copying a Network copies all
// parameters, statistics, and caches, which is what lets finite-difference
// oracles probe whole networks without aliasing.
class Network {
  public:
    void add(Layer layer) { layers_.push_back(std::move(layer)); }
    std::size_t size() const { return layers_.size(); }
    Layer& layer(std::size_t i) { return layers_.at(i); }
    const Layer& layer(std::size_t i) const { return layers_.at(i); }

    // One forward pass. In StatsOnly mode each norm layer's fresh batch
    // statistics are appended to *fresh_stats (one entry per norm layer, in
    // network order); TrainGrad mode appends the stats cached for backward,
    // so the single-forward scheme can record the same pass it trained on.
    Tensor forward(const Tensor& x, PassMode mode,
                   std::vector<BatchStats>* fresh_stats = nullptr) {
        Tensor cur = x;
        for (auto& l : layers_) {
            if (auto* norm = std::get_if<NormLayer>(&l)) {
                switch (mode) {
                    case PassMode::TrainGrad:
                        cur = norm->forward_train(cur);
                        if (fresh_stats) fresh_stats->push_back(norm->cached_batch_stats());
                        break;
                    case PassMode::StatsOnly: {
                        auto [y, bs] = norm->forward_stats(cur);
                        cur = std::move(y);
                        if (fresh_stats) fresh_stats->push_back(std::move(bs));
                        break;
                    }
                    case PassMode::Eval:
                        cur = norm->forward_eval(cur);
                        break;
                }
            } else {
                cur = std::visit(
                    [&](auto& layer) -> Tensor {
                        using T = std::decay_t<decltype(layer)>;
                        if constexpr (std::is_same_v<T, NormLayer>) {
                            throw std::logic_error("norm layer handled above");
                        } else {
                            return layer.forward(cur, mode);
                        }
                    },
                    l);
            }
        }
        return cur;
    }

    // Backward through the most recent TrainGrad forward; fills every
    // layer's parameter gradients and returns the gradient w.r.t. the input.
    Tensor backward(const Tensor& grad_out) {
        Tensor g = grad_out;
        for (std::size_t i = layers_.size(); i-- > 0;)
            g = std::visit([&](auto& layer) { return layer.backward(g); }, layers_[i]);
        return g;
    }

    // Stable traversal of learnable parameters; OptState velocities align
    // with this order.
    std::vector<ParamView> params() {
        std::vector<ParamView> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const std::string tag = "layer" + std::to_string(i);
            if (auto* d = std::get_if<Dense>(&layers_[i])) {
                out.push_back({&d->w, &d->grad_w, true, tag + ".w"});
                out.push_back({&d->b, &d->grad_b, true, tag + ".b"});
            } else if (auto* c = std::get_if<Conv3x3>(&layers_[i])) {
                out.push_back({&c->w, &c->grad_w, true, tag + ".w"});
                out.push_back({&c->b, &c->grad_b, true, tag + ".b"});
            } else if (auto* n = std::get_if<NormLayer>(&layers_[i])) {
                out.push_back({&n->gamma(), &n->grad_gamma(), false, tag + ".gamma"});
                out.push_back({&n->beta(), &n->grad_beta(), false, tag + ".beta"});
            }
        }
        return out;
    }

    std::vector<NormLayer*> norm_layers() {
        std::vector<NormLayer*> out;
        for (auto& l : layers_)
            if (auto* n = std::get_if<NormLayer>(&l)) out.push_back(n);
        return out;
    }

    // Push one recorded BatchStats into each norm layer's memory, in network
    // order. No-op for layers without a memory store.
    void record_stats(const std::vector<BatchStats>& stats) {
        auto norms = norm_layers();
        if (stats.size() != norms.size())
            throw std::invalid_argument("record_stats: got " + std::to_string(stats.size()) +
                                        " stats for " + std::to_string(norms.size()) +
                                        " norm layers");
        for (std::size_t i = 0; i < norms.size(); ++i) norms[i]->record_stats(stats[i]);
    }

    void set_lambda(double lambda) {
        for (auto* n : norm_layers())
            if (n->uses_memory()) n->set_lambda(lambda);
    }

    void set_brn_bounds(BrnBounds b) {
        for (auto* n : norm_layers())
            if (n->mode() == NormMode::BRN) n->set_brn_bounds(b);
    }

  private:
    std::vector<Layer> layers_;
};

struct NormOptions {
    std::size_t memory_capacity = 20;
    double eps = 1e-5;
    double theta = 0.1;
    double lambda = 0.1;
    double eta = 0.9;
};

// MLP with one norm layer after every hidden linear layer, before the
// nonlinearity; the output layer is a plain linear map to logits.
inline Network make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                        std::size_t classes, NormMode mode, const NormOptions& opt, Rng& rng) {
    Network net;
    std::size_t in = input_dim;
    for (std::size_t width : hidden) {
        net.add(Dense(in, width, rng));
        net.add(NormLayer(mode, width, opt.memory_capacity, opt.eps, opt.theta, opt.lambda,
                          opt.eta));
        net.add(ReLU{});
        in = width;
    }
    net.add(Dense(in, classes, rng));
    return net;
}

// Small CNN: conv->norm->relu blocks, then flatten and a linear classifier.
inline Network make_cnn(std::size_t in_channels, std::size_t height, std::size_t width,
                        const std::vector<std::size_t>& channels, std::size_t classes,
                        NormMode mode, const NormOptions& opt, Rng& rng) {
    Network net;
    std::size_t ch = in_channels;
    for (std::size_t out_ch : channels) {
        net.add(Conv3x3(ch, out_ch, rng));
        net.add(NormLayer(mode, out_ch, opt.memory_capacity, opt.eps, opt.theta, opt.lambda,
                          opt.eta));
        net.add(ReLU{});
        ch = out_ch;
    }
    net.add(Flatten{});
    net.add(Dense(ch * height * width, classes, rng));
    return net;
}

// Mean cross-entropy over the batch with log-sum-exp stabilization.
// Returns the loss and d(loss)/d(logits) = (softmax - onehot) / batch.
inline std::pair<double, Tensor> softmax_xent(const Tensor& logits,
                                              const std::vector<std::size_t>& labels) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax_xent: logits must be rank 2");
    const std::size_t n = logits.shape()[0], c = logits.shape()[1];
    if (labels.size() != n)
        throw std::invalid_argument("softmax_xent: batch " + std::to_string(n) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    Tensor grad(logits.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= c)
            throw std::invalid_argument("softmax_xent: label " + std::to_string(labels[i]) +
                                        " out of range for " + std::to_string(c) + " classes");
        double mx = logits[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(logits[i * c + j] - mx);
        const double lse = mx + std::log(sum);
        loss += lse - logits[i * c + labels[i]];
        for (std::size_t j = 0; j < c; ++j) {
            const double p = std::exp(logits[i * c + j] - lse);
            grad[i * c + j] = (p - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
        }
    }
    return {loss / static_cast<double>(n), std::move(grad)};
}

// Fraction of rows whose argmax logit disagrees with the label.
inline double classification_error(const Tensor& logits, const std::vector<std::size_t>& labels) {
    const std::size_t n = logits.shape()[0], c = logits.shape()[1];
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (logits[i * c + j] > logits[i * c + best]) best = j;
        if (best != labels[i]) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(n);
}

}  // namespace mbn
