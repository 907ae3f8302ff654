#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbn/data.hpp"
#include "mbn/rng.hpp"
#include "mbn/stats.hpp"
#include "mbn/tensor.hpp"

using mbn::batches;
using mbn::Dataset;
using mbn::gather;
using mbn::gen_blobs;
using mbn::load_csv;
using mbn::load_idx;
using mbn::Rng;
using mbn::save_idx;
using mbn::Tensor;

namespace {

std::filesystem::path temp_dir() {
    const auto dir =
        std::filesystem::temp_directory_path() / ("mbn_data_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

// ---------------------------------------------------------------------------
// synthetic blobs
// ---------------------------------------------------------------------------

TEST(GenBlobs, SameSeedIsDeterministic) {
    const Dataset a = gen_blobs(42, 10, 3, 4, 3.0);
    const Dataset b = gen_blobs(42, 10, 3, 4, 3.0);
    EXPECT_TRUE(mbn::bitwise_equal(a.features, b.features));
    EXPECT_EQ(a.labels, b.labels);
}

TEST(GenBlobs, DifferentSeedsDiffer) {
    const Dataset a = gen_blobs(42, 10, 3, 4, 3.0);
    const Dataset b = gen_blobs(43, 10, 3, 4, 3.0);
    EXPECT_FALSE(mbn::bitwise_equal(a.features, b.features));
}

TEST(GenBlobs, RoundMajorLayoutCyclesClasses) {
    const Dataset ds = gen_blobs(1, 3, 4, 2, 3.0);
    ASSERT_EQ(ds.n(), 12u);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(ds.labels[i], i % 4);
}

TEST(GenBlobs, TrainTestSplitsShareGeometryButNotSamples) {
    // Same seed, different noise streams: class means agree (empirically,
    // via per-class sample means over many draws) while the samples differ.
    const std::size_t per_class = 400;
    const Dataset train = gen_blobs(7, per_class, 2, 3, 4.0, 0.0, "train", 0);
    const Dataset test = gen_blobs(7, per_class, 2, 3, 4.0, 0.0, "test", 1);
    EXPECT_FALSE(mbn::bitwise_equal(train.features, test.features));

    for (std::size_t c = 0; c < 2; ++c) {
        for (std::size_t f = 0; f < 3; ++f) {
            double mt = 0.0, ms = 0.0;
            std::size_t n = 0;
            for (std::size_t i = 0; i < train.n(); ++i) {
                if (train.labels[i] != c) continue;
                mt += train.features[i * 3 + f];
                ms += test.features[i * 3 + f];
                ++n;
            }
            // sample means of N(mu, 1) over 400 draws agree within ~5 sigma/sqrt(n)
            EXPECT_NEAR(mt / double(n), ms / double(n), 5.0 / std::sqrt(double(n)));
        }
    }
}

TEST(GenBlobs, DriftTranslatesMeansLinearly) {
    // With zero noise impossible, compare consecutive-round deltas of the
    // same class against the analytic drift using many samples: the mean of
    // round r is mu_c + drift*r*dir, so round deltas average to drift.
    const double drift = 0.75;
    const std::size_t rounds = 500;
    const Dataset ds = gen_blobs(11, rounds, 1, 2, 0.0, drift);
    // single class at the origin: round r samples are drift*r*dir + noise
    double mean_last[2] = {0, 0}, mean_first[2] = {0, 0};
    const std::size_t half = rounds / 2;
    for (std::size_t r = 0; r < rounds; ++r)
        for (std::size_t f = 0; f < 2; ++f) {
            if (r < half) mean_first[f] += ds.features[r * 2 + f];
            else mean_last[f] += ds.features[r * 2 + f];
        }
    double delta_norm = 0.0;
    for (std::size_t f = 0; f < 2; ++f) {
        const double d = mean_last[f] / double(rounds - half) - mean_first[f] / double(half);
        delta_norm += d * d;
    }
    // the two window centers are rounds/2 apart along a unit direction
    EXPECT_NEAR(std::sqrt(delta_norm), drift * double(half), drift * double(half) * 0.05);
}

TEST(GenBlobs, SeparatedClassesAreLinearlyDistinguishable) {
    // nearest-class-mean classification on wide separation should be near
    // perfect; this guards the geometry stream from collapsing class means
    const Dataset ds = gen_blobs(13, 50, 3, 8, 6.0);
    std::vector<std::vector<double>> centroid(3, std::vector<double>(8, 0.0));
    std::vector<std::size_t> count(3, 0);
    for (std::size_t i = 0; i < ds.n(); ++i) {
        for (std::size_t f = 0; f < 8; ++f)
            centroid[ds.labels[i]][f] += ds.features[i * 8 + f];
        ++count[ds.labels[i]];
    }
    for (std::size_t c = 0; c < 3; ++c)
        for (double& v : centroid[c]) v /= double(count[c]);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < ds.n(); ++i) {
        double best = 1e300;
        std::size_t arg = 0;
        for (std::size_t c = 0; c < 3; ++c) {
            double d2 = 0.0;
            for (std::size_t f = 0; f < 8; ++f) {
                const double d = ds.features[i * 8 + f] - centroid[c][f];
                d2 += d * d;
            }
            if (d2 < best) { best = d2; arg = c; }
        }
        if (arg != ds.labels[i]) ++wrong;
    }
    EXPECT_LE(wrong, ds.n() / 50);  // <= 2% confusions at 6-sigma separation
}

TEST(GenBlobs, RejectsBadArguments) {
    EXPECT_THROW(gen_blobs(1, 0, 2, 2, 1.0), std::invalid_argument);
    EXPECT_THROW(gen_blobs(1, 2, 0, 2, 1.0), std::invalid_argument);
    EXPECT_THROW(gen_blobs(1, 2, 2, 0, 1.0), std::invalid_argument);
    EXPECT_THROW(gen_blobs(1, 2, 2, 2, 1.0, -0.5), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// idx files
// ---------------------------------------------------------------------------

namespace {

void write_bytes(std::ostream& out, std::initializer_list<unsigned> bytes) {
    for (unsigned b : bytes) out.put(static_cast<char>(b));
}

// 2 images of 2x2 pixels plus labels, in the big-endian binary layout.
void write_idx_fixture(const std::string& images, const std::string& labels) {
    std::ofstream img(images, std::ios::binary);
    write_bytes(img, {0, 0, 8, 3});        // magic: unsigned byte, rank 3
    write_bytes(img, {0, 0, 0, 2});        // count
    write_bytes(img, {0, 0, 0, 2});        // rows
    write_bytes(img, {0, 0, 0, 2});        // cols
    write_bytes(img, {0, 51, 102, 153});   // image 0
    write_bytes(img, {204, 255, 0, 255});  // image 1
    std::ofstream lbl(labels, std::ios::binary);
    write_bytes(lbl, {0, 0, 8, 1});  // magic: unsigned byte, rank 1
    write_bytes(lbl, {0, 0, 0, 2});
    write_bytes(lbl, {1, 0});
}

}  // namespace

TEST(IdxFiles, LoadsHandcraftedFixture) {
    const auto dir = temp_dir();
    const std::string images = (dir / "imgs.idx").string();
    const std::string labels = (dir / "lbls.idx").string();
    write_idx_fixture(images, labels);

    const Dataset ds = load_idx(images, labels, "train");
    ASSERT_EQ(ds.features.shape(), (mbn::Shape{2, 1, 2, 2}));
    EXPECT_EQ(ds.labels, (std::vector<std::size_t>{1, 0}));
    EXPECT_EQ(ds.num_classes, 2u);
    EXPECT_DOUBLE_EQ(ds.features[0], 0.0);
    EXPECT_DOUBLE_EQ(ds.features[1], 51.0 / 255.0);
    EXPECT_DOUBLE_EQ(ds.features[5], 255.0 / 255.0);
}

TEST(IdxFiles, SaveLoadRoundTripsQuantizedPixels) {
    const auto dir = temp_dir();
    const Dataset blob = gen_blobs(3, 4, 2, 9, 2.0);
    // reshape the 9 features into 3x3 images and squash into [0,1]
    Dataset ds;
    ds.features = Tensor({blob.n(), 1, 3, 3});
    for (std::size_t i = 0; i < blob.features.size(); ++i) {
        const double v = blob.features[i];
        ds.features[i] = std::round(std::clamp((v + 6.0) / 12.0, 0.0, 1.0) * 255.0) / 255.0;
    }
    ds.labels = blob.labels;
    ds.num_classes = blob.num_classes;
    ds.split = "train";

    const std::string images = (dir / "rt.idx").string();
    const std::string labels = (dir / "rt.lbl").string();
    save_idx(ds, images, labels);
    const Dataset back = load_idx(images, labels, "train");
    EXPECT_TRUE(mbn::bitwise_equal(back.features, ds.features));
    EXPECT_EQ(back.labels, ds.labels);
}

TEST(IdxFiles, RejectsWrongMagic) {
    const auto dir = temp_dir();
    const std::string images = (dir / "bad.idx").string();
    const std::string labels = (dir / "bad.lbl").string();
    write_idx_fixture(images, labels);
    {
        std::ofstream img(images, std::ios::binary);
        write_bytes(img, {0, 0, 7, 3});  // wrong type byte
        write_bytes(img, {0, 0, 0, 1});
    }
    EXPECT_THROW(load_idx(images, labels, "train"), std::runtime_error);
}

TEST(IdxFiles, RejectsCountMismatch) {
    const auto dir = temp_dir();
    const std::string images = (dir / "cm.idx").string();
    const std::string labels = (dir / "cm.lbl").string();
    write_idx_fixture(images, labels);
    {
        std::ofstream lbl(labels, std::ios::binary);
        write_bytes(lbl, {0, 0, 8, 1});
        write_bytes(lbl, {0, 0, 0, 3});  // claims 3 labels for 2 images
        write_bytes(lbl, {1, 0, 1});
    }
    EXPECT_THROW(load_idx(images, labels, "train"), std::runtime_error);
}

TEST(IdxFiles, RejectsTruncatedPixels) {
    const auto dir = temp_dir();
    const std::string images = (dir / "tr.idx").string();
    const std::string labels = (dir / "tr.lbl").string();
    write_idx_fixture(images, labels);
    {
        std::ofstream img(images, std::ios::binary);
        write_bytes(img, {0, 0, 8, 3});
        write_bytes(img, {0, 0, 0, 2});
        write_bytes(img, {0, 0, 0, 2});
        write_bytes(img, {0, 0, 0, 2});
        write_bytes(img, {1, 2, 3});  // 3 of 8 pixels
    }
    EXPECT_THROW(load_idx(images, labels, "train"), std::runtime_error);
}

TEST(IdxFiles, MissingFileThrows) {
    EXPECT_THROW(load_idx("/nonexistent/img.idx", "/nonexistent/lbl.idx", "train"),
                 std::runtime_error);
}

// ---------------------------------------------------------------------------
// csv files
// ---------------------------------------------------------------------------

TEST(CsvFiles, LoadsLabeledRows) {
    const auto dir = temp_dir();
    const std::string path = (dir / "toy.csv").string();
    {
        std::ofstream out(path);
        out << "x0,x1,label\n";
        out << "0.5,-1.5,0\n";
        out << "2.25,3.0,1\n";
        out << "-0.75,0.0,1\n";
    }
    const Dataset ds = load_csv(path, "train");
    ASSERT_EQ(ds.features.shape(), (mbn::Shape{3, 2}));
    EXPECT_DOUBLE_EQ(ds.features.at({0, 0}), 0.5);
    EXPECT_DOUBLE_EQ(ds.features.at({1, 1}), 3.0);
    EXPECT_EQ(ds.labels, (std::vector<std::size_t>{0, 1, 1}));
    EXPECT_EQ(ds.num_classes, 2u);
}

TEST(CsvFiles, RejectsMissingLabelColumn) {
    const auto dir = temp_dir();
    const std::string path = (dir / "nolabel.csv").string();
    {
        std::ofstream out(path);
        out << "x0,x1\n0.5,1.0\n";
    }
    EXPECT_THROW(load_csv(path, "train"), std::runtime_error);
}

TEST(CsvFiles, RejectsRaggedRows) {
    const auto dir = temp_dir();
    const std::string path = (dir / "ragged.csv").string();
    {
        std::ofstream out(path);
        out << "x0,x1,label\n0.5,1.0,0\n0.5,1\n";
    }
    EXPECT_THROW(load_csv(path, "train"), std::runtime_error);
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

TEST(Batches, PartitionsAllIndicesOnce) {
    Rng rng(17);
    const auto bs = batches(10, 3, rng);
    ASSERT_EQ(bs.size(), 4u);
    EXPECT_EQ(bs[0].size(), 3u);
    EXPECT_EQ(bs[3].size(), 1u);
    std::vector<bool> seen(10, false);
    for (const auto& b : bs)
        for (std::size_t i : b) {
            EXPECT_FALSE(seen[i]);
            seen[i] = true;
        }
    for (bool s : seen) EXPECT_TRUE(s);
}

TEST(Batches, SameRngStateSamePermutation) {
    Rng a(21), b(21);
    EXPECT_EQ(batches(50, 8, a), batches(50, 8, b));
}

TEST(Batches, DropLastRemovesRagged) {
    Rng rng(23);
    const auto bs = batches(10, 3, rng, true);
    ASSERT_EQ(bs.size(), 3u);
    for (const auto& b : bs) EXPECT_EQ(b.size(), 3u);
}

TEST(Batches, DropLastOnTinyDatasetThrows) {
    Rng rng(27);
    EXPECT_THROW(batches(2, 8, rng, true), std::invalid_argument);
    EXPECT_NO_THROW(batches(2, 8, rng, false));
}

TEST(Batches, RejectsZeroSizes) {
    Rng rng(29);
    EXPECT_THROW(batches(0, 4, rng), std::invalid_argument);
    EXPECT_THROW(batches(10, 0, rng), std::invalid_argument);
}

TEST(Gather, PullsRowsAndLabels) {
    const Dataset ds = gen_blobs(31, 5, 2, 3, 2.0);
    const auto [x, y] = gather(ds, {3, 0, 7});
    ASSERT_EQ(x.shape(), (mbn::Shape{3, 3}));
    EXPECT_EQ(y.size(), 3u);
    for (std::size_t f = 0; f < 3; ++f) {
        EXPECT_DOUBLE_EQ(x.at({0, f}), ds.features.at({3, f}));
        EXPECT_DOUBLE_EQ(x.at({1, f}), ds.features.at({0, f}));
    }
    EXPECT_EQ(y[0], ds.labels[3]);
    EXPECT_EQ(y[2], ds.labels[7]);
}

TEST(Gather, Rank4KeepsImageShape) {
    Dataset ds;
    ds.features = Tensor({3, 1, 2, 2});
    for (std::size_t i = 0; i < ds.features.size(); ++i) ds.features[i] = double(i);
    ds.labels = {0, 1, 0};
    ds.num_classes = 2;
    ds.split = "train";
    const auto [x, y] = gather(ds, {2, 1});
    ASSERT_EQ(x.shape(), (mbn::Shape{2, 1, 2, 2}));
    EXPECT_DOUBLE_EQ(x[0], 8.0);
}

TEST(Gather, OutOfRangeIndexThrows) {
    const Dataset ds = gen_blobs(37, 2, 2, 2, 2.0);
    EXPECT_THROW(gather(ds, {9}), std::out_of_range);
}
