#include "hld/io.hpp"
#include "hld/lora.hpp"
#include "hld/rng.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace hld;

namespace {

const std::vector<TargetShape> kSquare64{{Target::W_Q, 64, 64}, {Target::W_K, 64, 64}, {Target::W_V, 64, 64}};
const std::vector<TargetShape> kMixed{{Target::W_Q, 5, 4}, {Target::W_K, 3, 6}, {Target::W_V, 4, 4}};

LoraAdapterSet random_set(std::span<const TargetShape> shapes, int rank, std::uint64_t seed) {
    LoraAdapterSet s;
    Rng rng(seed);
    for (const auto &ts : shapes) {
        s.insert(ts.target, LoraEntry{randn(rank, ts.d_in, rng), randn(ts.d_out, rank, rng)});
    }
    return s;
}

// Rounds every factor to float32 so a float32 container can hold it exactly.
LoraAdapterSet as_f32(LoraAdapterSet s) {
    for (Target t : kAllTargets) {
        if (s.contains(t)) {
            s.at(t).A = s.at(t).A.cast<float>().cast<double>();
            s.at(t).B = s.at(t).B.cast<float>().cast<double>();
        }
    }
    return s;
}

bool bitwise_equal(const Mat &a, const Mat &b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

} // namespace

TEST(NewAdapterSet, ZeroInitHasZeroNorm) {
    const LoraAdapterSet s = new_adapter_set(kSquare64, 3, LoraInit::zero);
    EXPECT_EQ(adapter_sq_norm(s), 0.0);
    EXPECT_EQ(s.rank(), 3);
}

TEST(NewAdapterSet, RandomAInitHasZeroDelta) {
    const LoraAdapterSet s = new_adapter_set(kMixed, 2, LoraInit::b_zero_a_random, 9);
    for (const auto &[t, e] : s.entries()) {
        EXPECT_TRUE(adapter_delta(e).isZero(0.0));
        EXPECT_GT(e.A.squaredNorm(), 0.0);
        const double sd = std::sqrt(e.A.squaredNorm() / e.A.size());
        EXPECT_LT(sd, 0.06);
    }
}

TEST(NewAdapterSet, ParameterCount) {
    const LoraAdapterSet s = new_adapter_set(kSquare64, 3, LoraInit::zero);
    std::size_t n = 0;
    for (const auto &ts : kSquare64) {
        n += 3 * static_cast<std::size_t>(ts.d_in + ts.d_out);
    }
    EXPECT_EQ(n, 1152u);
    EXPECT_EQ(s.parameter_count(), n);
    EXPECT_EQ(static_cast<std::size_t>(s.flatten().size()), n);
}

TEST(NewAdapterSet, Errors) {
    EXPECT_THROW(new_adapter_set(kMixed, 0, LoraInit::zero), UsageError);
    EXPECT_THROW(new_adapter_set(std::vector<TargetShape>{}, 1, LoraInit::zero), UsageError);
    EXPECT_THROW(parse_target("W_X"), UsageError);
    EXPECT_EQ(parse_target("W_K"), Target::W_K);
}

TEST(AdapterDelta, HandExample) {
    LoraEntry e;
    e.B.resize(2, 1);
    e.B << 2, 0;
    e.A.resize(1, 2);
    e.A << 1, 3;
    Mat want(2, 2);
    want << 2, 6, 0, 0;
    EXPECT_EQ(adapter_delta(e), want);
    e.B.setZero();
    EXPECT_TRUE(adapter_delta(e).isZero(0.0));
    e.B.resize(2, 2);
    EXPECT_THROW(adapter_delta(e), UsageError);
}

TEST(AdapterDelta, RankAtMostR) {
    Rng rng(4);
    for (int r = 1; r <= 3; ++r) {
        for (int trial = 0; trial < 10; ++trial) {
            LoraEntry e{randn(r, 7, rng), randn(6, r, rng)};
            Eigen::JacobiSVD<Mat> svd(adapter_delta(e));
            const Vec sv = svd.singularValues();
            int numeric_rank = 0;
            for (Eigen::Index i = 0; i < sv.size(); ++i) {
                numeric_rank += sv[i] > 1e-10 * sv[0];
            }
            EXPECT_LE(numeric_rank, r);
        }
    }
}

TEST(AdapterSqNorm, HandExample) {
    LoraAdapterSet s;
    LoraEntry e;
    e.B.resize(2, 1);
    e.B << 1, 2;
    e.A.resize(1, 2);
    e.A << 3, 0;
    s.insert(Target::W_Q, e);
    EXPECT_DOUBLE_EQ(adapter_sq_norm(s), 14.0);
}

TEST(AdapterSqNorm, MatchesScalarLoopAndIsHomogeneous) {
    const LoraAdapterSet s = random_set(kMixed, 3, 5);
    double brute = 0.0;
    for (const auto &[t, e] : s.entries()) {
        for (Eigen::Index i = 0; i < e.A.size(); ++i) {
            brute += e.A.data()[i] * e.A.data()[i];
        }
        for (Eigen::Index i = 0; i < e.B.size(); ++i) {
            brute += e.B.data()[i] * e.B.data()[i];
        }
    }
    EXPECT_NEAR(adapter_sq_norm(s), brute, 1e-12 * brute);
    const Vec f = s.flatten();
    EXPECT_NEAR(adapter_sq_norm(s), f.dot(f), 1e-12 * brute);
    EXPECT_NEAR(adapter_sq_norm(s.scaled(-2.5)), 6.25 * brute, 1e-12 * brute);
}

TEST(Flatten, BRowMajorThenAPerTarget) {
    const LoraAdapterSet s = random_set(kMixed, 2, 6);
    const Vec f = s.flatten();
    Eigen::Index k = 0;
    for (Target t : kAllTargets) {
        const LoraEntry &e = s.at(t);
        for (Eigen::Index i = 0; i < e.B.rows(); ++i) {
            for (Eigen::Index j = 0; j < e.B.cols(); ++j) {
                EXPECT_EQ(f[k++], e.B(i, j));
            }
        }
        for (Eigen::Index i = 0; i < e.A.rows(); ++i) {
            for (Eigen::Index j = 0; j < e.A.cols(); ++j) {
                EXPECT_EQ(f[k++], e.A(i, j));
            }
        }
    }
    EXPECT_EQ(k, f.size());
}

TEST(Average, SingleAndAntipodal) {
    const LoraAdapterSet s = random_set(kMixed, 3, 7);
    const std::vector<LoraAdapterSet> one{s};
    EXPECT_EQ(average_adapters(one).flatten(), s.flatten());
    const std::vector<LoraAdapterSet> pair{s, s.scaled(-1.0)};
    EXPECT_EQ(adapter_sq_norm(average_adapters(pair)), 0.0);
}

TEST(Average, ElementwiseMeanOfThree) {
    const std::vector<LoraAdapterSet> sets{random_set(kMixed, 2, 8), random_set(kMixed, 2, 9),
                                           random_set(kMixed, 2, 10)};
    const Vec got = average_adapters(sets).flatten();
    const Vec a = sets[0].flatten(), b = sets[1].flatten(), c = sets[2].flatten();
    for (Eigen::Index i = 0; i < got.size(); ++i) {
        EXPECT_NEAR(got[i], (a[i] + b[i] + c[i]) / 3.0, 1e-12);
    }
    const std::vector<LoraAdapterSet> permuted{sets[2], sets[0], sets[1]};
    EXPECT_LT((average_adapters(permuted).flatten() - got).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Average, Errors) {
    EXPECT_THROW(average_adapters(std::span<const LoraAdapterSet>{}), UsageError);
    const std::vector<LoraAdapterSet> mixed{random_set(kMixed, 2, 1), random_set(kMixed, 3, 1)};
    EXPECT_THROW(average_adapters(mixed), UsageError);
}

TEST(Serialize, ZeroSetRoundTrip) {
    const LoraAdapterSet s = new_adapter_set(kMixed, 3, LoraInit::zero);
    const LoraAdapterSet back = deserialize_adapters(serialize_adapters(s));
    EXPECT_TRUE(back.same_structure(s));
    EXPECT_EQ(back.flatten(), s.flatten());
}

TEST(Serialize, RandomSetRoundTripIsBitwise) {
    const LoraAdapterSet s = as_f32(random_set(kMixed, 3, 11));
    const auto bytes = serialize_adapters(s);
    const LoraAdapterSet back = deserialize_adapters(bytes);
    for (Target t : kAllTargets) {
        EXPECT_TRUE(bitwise_equal(back.at(t).A, s.at(t).A));
        EXPECT_TRUE(bitwise_equal(back.at(t).B, s.at(t).B));
    }
    EXPECT_EQ(serialize_adapters(back), bytes);
}

TEST(Serialize, ByteLayout) {
    LoraAdapterSet s;
    LoraEntry e;
    e.B = Mat::Constant(2, 1, 1.0);
    e.A = Mat::Constant(1, 3, -2.0);
    s.insert(Target::W_K, e);
    const auto bytes = serialize_adapters(s);
    // magic, version, count, (len, "W_K", d_out, d_in, r), 5 floats, crc
    ASSERT_EQ(bytes.size(), 4u + 2 + 2 + (1 + 3 + 12) + 5 * 4 + 4);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "HLRA");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 0);
    EXPECT_EQ(bytes[6], 1);
    EXPECT_EQ(std::string(bytes.begin() + 9, bytes.begin() + 12), "W_K");
    EXPECT_EQ(bytes[12], 2); // d_out
    EXPECT_EQ(bytes[16], 3); // d_in
    EXPECT_EQ(bytes[20], 1); // rank
    float first = 0.0f;
    std::memcpy(&first, bytes.data() + 24, 4);
    EXPECT_EQ(first, 1.0f);
    float a0 = 0.0f;
    std::memcpy(&a0, bytes.data() + 32, 4);
    EXPECT_EQ(a0, -2.0f);
}

TEST(Serialize, CorruptionIsDetected) {
    const auto bytes = serialize_adapters(random_set(kMixed, 2, 12));
    auto bad_crc = bytes;
    bad_crc.back() ^= 0x01;
    EXPECT_THROW(deserialize_adapters(bad_crc), FormatError);
    auto bad_payload = bytes;
    bad_payload[bad_payload.size() - 10] ^= 0x40;
    EXPECT_THROW(deserialize_adapters(bad_payload), FormatError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize_adapters(bad_magic), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 2;
    EXPECT_THROW(deserialize_adapters(bad_version), FormatError);
    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.end() - 7);
    EXPECT_THROW(deserialize_adapters(truncated), FormatError);
}

TEST(Crc32, StandardCheckValue) {
    const std::string s = "123456789";
    const std::vector<std::uint8_t> v(s.begin(), s.end());
    EXPECT_EQ(io::crc32(v), 0xCBF43926u);
}
