#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "mbn/net.hpp"
#include "mbn/norm.hpp"
#include "mbn/tensor.hpp"

namespace mbn {

// Checkpoint format (little-endian):
//   bytes 0..7   magic "MBNCKPT\0"
//   u32          format version (currently 1)
//   u32          buffer count
//   per buffer:  u32 name length, name bytes,
//                u32 rank, u64 dims...,
//                f64 data (product of dims values)
// Buffers are written in sorted name order so identical state produces
// identical bytes.
namespace ckpt {

constexpr char kMagic[8] = {'M', 'B', 'N', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated while reading " + what);
    return v;
}

}  // namespace detail

inline void save_buffers(const std::string& path, const std::map<std::string, Tensor>& buffers) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write(kMagic, sizeof(kMagic));
    detail::write_pod<std::uint32_t>(out, kVersion);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(buffers.size()));
    for (const auto& [name, tensor] : buffers) {
        detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
        for (std::size_t d : tensor.shape()) detail::write_pod<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(tensor.data()),
                  static_cast<std::streamsize>(tensor.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline std::map<std::string, Tensor> load_buffers(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint: " + path + ": bad magic");
    const auto version = detail::read_pod<std::uint32_t>(in, "version");
    if (version != kVersion)
        throw std::runtime_error("checkpoint: " + path + ": unsupported version " +
                                 std::to_string(version));
    const auto count = detail::read_pod<std::uint32_t>(in, "buffer count");
    std::map<std::string, Tensor> buffers;
    for (std::uint32_t b = 0; b < count; ++b) {
        const auto name_len = detail::read_pod<std::uint32_t>(in, "name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw std::runtime_error("checkpoint: truncated name");
        const auto rank = detail::read_pod<std::uint32_t>(in, "rank of " + name);
        Shape shape(rank);
        for (auto& d : shape)
            d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(in, "dim of " + name));
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated data for " + name);
        buffers.emplace(std::move(name), std::move(t));
    }
    return buffers;
}

}  // namespace ckpt

namespace detail {

inline std::map<std::string, Tensor> network_buffers(Network& net) {
    std::map<std::string, Tensor> buffers;
    for (const auto& p : net.params()) buffers.emplace(p.name, *p.value);
    auto norms = net.norm_layers();
    for (std::size_t i = 0; i < norms.size(); ++i) {
        const std::string tag = "norm" + std::to_string(i);
        NormLayer& n = *norms[i];
        if (n.uses_memory()) {
            const StatsMemory& mem = n.memory();
            buffers.emplace(tag + ".memory.size",
                            Tensor({1}, {static_cast<double>(mem.size())}));
            for (std::size_t e = 0; e < mem.size(); ++e) {
                const std::string etag = tag + ".memory." + std::to_string(e);
                buffers.emplace(etag + ".mean", mem.entry(e).mean);
                buffers.emplace(etag + ".var", mem.entry(e).var);
                buffers.emplace(etag + ".count",
                                Tensor({1}, {static_cast<double>(mem.entry(e).count)}));
            }
            if (n.eval_ready()) {
                auto [mean, var] = n.eval_stats();
                buffers.emplace(tag + ".eval.mean", *mean);
                buffers.emplace(tag + ".eval.var", *var);
            }
        } else if (n.moving().initialized) {
            buffers.emplace(tag + ".moving.mean", n.moving().mean);
            buffers.emplace(tag + ".moving.var", n.moving().var);
        }
    }
    return buffers;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, Network& net) {
    ckpt::save_buffers(path, detail::network_buffers(net));
}

// Restore parameters and statistics into an architecturally identical
// network (same layer sequence and sizes as when the checkpoint was saved).
inline void load_checkpoint(const std::string& path, Network& net) {
    const auto buffers = ckpt::load_buffers(path);
    auto need = [&](const std::string& name) -> const Tensor& {
        auto it = buffers.find(name);
        if (it == buffers.end())
            throw std::runtime_error("checkpoint: missing buffer '" + name + "'");
        return it->second;
    };
    for (auto& p : net.params()) {
        const Tensor& t = need(p.name);
        if (t.shape() != p.value->shape())
            throw std::runtime_error("checkpoint: shape mismatch for '" + p.name + "': file " +
                                     shape_str(t.shape()) + " vs network " +
                                     shape_str(p.value->shape()));
        *p.value = t;
    }
    auto norms = net.norm_layers();
    for (std::size_t i = 0; i < norms.size(); ++i) {
        const std::string tag = "norm" + std::to_string(i);
        NormLayer& n = *norms[i];
        if (n.uses_memory()) {
            n.memory().clear();
            const std::size_t count =
                static_cast<std::size_t>(need(tag + ".memory.size")[0]);
            for (std::size_t e = 0; e < count; ++e) {
                const std::string etag = tag + ".memory." + std::to_string(e);
                n.memory().push(BatchStats(
                    need(etag + ".mean"), need(etag + ".var"),
                    static_cast<std::size_t>(need(etag + ".count")[0])));
            }
            if (buffers.count(tag + ".eval.mean")) {
                // Rehydrate the eval snapshot via a stats pass contract:
                // stored aggregate becomes the layer's eval statistics.
                n.restore_eval_stats(need(tag + ".eval.mean"), need(tag + ".eval.var"));
            }
        } else if (buffers.count(tag + ".moving.mean")) {
            n.moving().mean = need(tag + ".moving.mean");
            n.moving().var = need(tag + ".moving.var");
            n.moving().initialized = true;
        }
    }
}

}  // namespace mbn
