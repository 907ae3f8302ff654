#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mbn/rng.hpp"
#include "mbn/tensor.hpp"

namespace mbn {

struct Dataset {
    Tensor features;  // (N,D) or (N,C,H,W)
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;
    std::string split;

    std::size_t n() const { return features.rank() == 0 ? 0 : features.shape()[0]; }

    void validate() const {
        if (n() != labels.size())
            throw std::invalid_argument("Dataset: " + std::to_string(n()) + " rows vs " +
                                        std::to_string(labels.size()) + " labels");
        for (std::size_t l : labels)
            if (l >= num_classes)
                throw std::invalid_argument("Dataset: label " + std::to_string(l) +
                                            " out of range for " + std::to_string(num_classes) +
                                            " classes");
    }
};

// Gaussian class clusters. Class means sit at class_separation times a
// seeded random unit direction. Samples are generated in rounds of one
// sample per class; when drift_per_round > 0 every round translates all
// class means by that amount along a fixed seeded direction, so consecutive
// generation-order batches show a linearly drifting mean.
//
// The class geometry (means, drift direction) depends only on the seed;
// noise_stream selects an independent sample-noise stream, so a train/test
// pair generated with noise_stream 0 and 1 shares one distribution while
// drawing disjoint samples.
inline Dataset gen_blobs(std::uint64_t seed, std::size_t n_per_class, std::size_t num_classes,
                         std::size_t dim, double class_separation, double drift_per_round = 0.0,
                         const std::string& split = "train", std::uint64_t noise_stream = 0) {
    if (n_per_class == 0 || num_classes == 0 || dim == 0)
        throw std::invalid_argument("gen_blobs: sizes must be positive");
    if (drift_per_round < 0.0) throw std::invalid_argument("gen_blobs: negative drift");
    Rng geometry = Rng::stream(seed, "data-geometry", 0);
    Rng rng = Rng::stream(seed, "data-noise", noise_stream);

    auto unit_vector = [&]() {
        std::vector<double> v(dim);
        double norm2 = 0.0;
        for (double& x : v) {
            x = geometry.normal();
            norm2 += x * x;
        }
        const double norm = std::sqrt(norm2);
        if (norm > 0.0)
            for (double& x : v) x /= norm;
        else
            v[0] = 1.0;
        return v;
    };

    std::vector<std::vector<double>> means(num_classes);
    for (auto& m : means) {
        m = unit_vector();
        for (double& x : m) x *= class_separation;
    }
    const std::vector<double> drift_dir = unit_vector();

    const std::size_t n = n_per_class * num_classes;
    Dataset ds;
    ds.features = Tensor({n, dim});
    ds.labels.resize(n);
    ds.num_classes = num_classes;
    ds.split = split;
    for (std::size_t round = 0; round < n_per_class; ++round)
        for (std::size_t c = 0; c < num_classes; ++c) {
            const std::size_t row = round * num_classes + c;
            ds.labels[row] = c;
            for (std::size_t f = 0; f < dim; ++f)
                ds.features[row * dim + f] = means[c][f] +
                                             drift_per_round * static_cast<double>(round) *
                                                 drift_dir[f] +
                                             rng.normal();
        }
    return ds;
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path,
                               const std::string& field) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in)
        throw std::runtime_error("idx: " + path + ": truncated while reading " + field);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

// Parse the classic big-endian IDX pair: images with magic 0x00000803
// (unsigned bytes, rank 3: count x rows x cols) and labels with magic
// 0x00000801. Pixels are scaled to [0,1]; features come out (N,1,R,C).
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        const std::string& split = "train") {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("idx: cannot open images file " + images_path);
    const std::uint32_t img_magic = detail::read_be32(img, images_path, "magic");
    if (img_magic != 0x00000803u) {
        std::ostringstream os;
        os << "idx: " << images_path << ": bad images magic 0x" << std::hex << img_magic
           << " (want 0x803)";
        throw std::runtime_error(os.str());
    }
    const std::uint32_t count = detail::read_be32(img, images_path, "image count");
    const std::uint32_t rows = detail::read_be32(img, images_path, "row count");
    const std::uint32_t cols = detail::read_be32(img, images_path, "column count");

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error("idx: cannot open labels file " + labels_path);
    const std::uint32_t lab_magic = detail::read_be32(lab, labels_path, "magic");
    if (lab_magic != 0x00000801u) {
        std::ostringstream os;
        os << "idx: " << labels_path << ": bad labels magic 0x" << std::hex << lab_magic
           << " (want 0x801)";
        throw std::runtime_error(os.str());
    }
    const std::uint32_t lab_count = detail::read_be32(lab, labels_path, "label count");
    if (lab_count != count)
        throw std::runtime_error("idx: image count " + std::to_string(count) +
                                 " != label count " + std::to_string(lab_count));

    const std::size_t pixels = std::size_t(count) * rows * cols;
    std::vector<unsigned char> buf(pixels);
    img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
    if (static_cast<std::size_t>(img.gcount()) != pixels)
        throw std::runtime_error("idx: " + images_path + ": truncated pixel payload (want " +
                                 std::to_string(pixels) + " bytes, got " +
                                 std::to_string(img.gcount()) + ")");

    std::vector<unsigned char> lbuf(count);
    lab.read(reinterpret_cast<char*>(lbuf.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(lab.gcount()) != count)
        throw std::runtime_error("idx: " + labels_path + ": truncated label payload (want " +
                                 std::to_string(count) + " bytes, got " +
                                 std::to_string(lab.gcount()) + ")");

    Dataset ds;
    ds.features = Tensor({count, 1, rows, cols});
    for (std::size_t i = 0; i < pixels; ++i)
        ds.features[i] = static_cast<double>(buf[i]) / 255.0;
    ds.labels.resize(count);
    std::size_t max_label = 0;
    for (std::size_t i = 0; i < count; ++i) {
        ds.labels[i] = lbuf[i];
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.num_classes = max_label + 1;
    ds.split = split;
    return ds;
}

// Write a dataset back out as an IDX pair. Pixel doubles are clamped to
// [0,1] and quantized to bytes; datasets that came from load_idx round-trip
// exactly.
inline void save_idx(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
    if (ds.features.rank() != 4 || ds.features.shape()[1] != 1)
        throw std::invalid_argument("save_idx: features must be (N,1,R,C)");
    std::ofstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("idx: cannot write " + images_path);
    const std::uint32_t count = static_cast<std::uint32_t>(ds.features.shape()[0]);
    detail::write_be32(img, 0x00000803u);
    detail::write_be32(img, count);
    detail::write_be32(img, static_cast<std::uint32_t>(ds.features.shape()[2]));
    detail::write_be32(img, static_cast<std::uint32_t>(ds.features.shape()[3]));
    for (std::size_t i = 0; i < ds.features.size(); ++i) {
        const double v = std::min(1.0, std::max(0.0, ds.features[i]));
        const unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
        img.write(reinterpret_cast<const char*>(&b), 1);
    }
    std::ofstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error("idx: cannot write " + labels_path);
    detail::write_be32(lab, 0x00000801u);
    detail::write_be32(lab, count);
    for (std::size_t l : ds.labels) {
        const unsigned char b = static_cast<unsigned char>(l);
        lab.write(reinterpret_cast<const char*>(&b), 1);
    }
}

// Numeric CSV loader: one header row, a column named "label" holding class
// indices, every other column a feature.
inline Dataset load_csv(const std::string& path, const std::string& split = "train") {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("csv: " + path + ": empty file");
    auto split_row = [](const std::string& row) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ss(row);
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        return cells;
    };
    const auto header = split_row(line);
    std::size_t label_col = header.size();
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == "label") label_col = i;
    if (label_col == header.size())
        throw std::runtime_error("csv: " + path + ": no column named 'label'");

    std::vector<double> values;
    std::vector<std::size_t> labels;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_row(line);
        if (cells.size() != header.size())
            throw std::runtime_error("csv: " + path + ": row " + std::to_string(rows + 2) +
                                     " has " + std::to_string(cells.size()) + " cells, want " +
                                     std::to_string(header.size()));
        for (std::size_t i = 0; i < cells.size(); ++i) {
            try {
                if (i == label_col)
                    labels.push_back(static_cast<std::size_t>(std::stoul(cells[i])));
                else
                    values.push_back(std::stod(cells[i]));
            } catch (const std::exception&) {
                throw std::runtime_error("csv: " + path + ": bad numeric cell '" + cells[i] +
                                         "' in row " + std::to_string(rows + 2));
            }
        }
        ++rows;
    }
    Dataset ds;
    ds.features = Tensor({rows, header.size() - 1}, std::move(values));
    ds.labels = std::move(labels);
    std::size_t max_label = 0;
    for (std::size_t l : ds.labels) max_label = std::max(max_label, l);
    ds.num_classes = ds.labels.empty() ? 0 : max_label + 1;
    ds.split = split;
    return ds;
}

// Index batches for one epoch under a seeded permutation. With drop_last
// the ragged tail is discarded; otherwise every sample appears exactly once.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                                     Rng& rng, bool drop_last = false) {
    if (batch_size == 0) throw std::invalid_argument("batches: batch_size must be >= 1");
    if (n == 0) throw std::invalid_argument("batches: empty dataset");
    if (drop_last && batch_size > n)
        throw std::invalid_argument("batches: batch_size " + std::to_string(batch_size) +
                                    " > n " + std::to_string(n) + " with drop_last yields an empty epoch");
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        if (drop_last && end - start < batch_size) break;
        out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

// Materialize the rows selected by an index batch.
inline std::pair<Tensor, std::vector<std::size_t>> gather(const Dataset& ds,
                                                          const std::vector<std::size_t>& idx) {
    Shape shape = ds.features.shape();
    shape[0] = idx.size();
    const std::size_t row_elems = ds.features.size() / ds.features.shape()[0];
    Tensor x(shape);
    std::vector<std::size_t> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= ds.n()) throw std::out_of_range("gather: index beyond dataset");
        for (std::size_t e = 0; e < row_elems; ++e)
            x[i * row_elems + e] = ds.features[idx[i] * row_elems + e];
        y[i] = ds.labels[idx[i]];
    }
    return {std::move(x), std::move(y)};
}

}  // namespace mbn
