#pragma once

// Synthetic subjects: each class is a shape archetype on a small grayscale grid, and
// each subject is one instance of it (placement, size, brightness, and an identity
// mark) derived from its seed. Images are stored as columns, row-major flattened,
// with pixel values in [0, 1].

#include "hld/common.hpp"
#include "hld/denoiser.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace hld {

inline constexpr int kImageSide = 16;
inline constexpr int kImageDim = kImageSide * kImageSide;
inline constexpr int kNumShapes = 4;

struct SubjectSpec {
    int class_id = 0;
    std::uint64_t subject_seed = 0;
};

// Instance parameters derived from (class_id, subject_seed).
struct SubjectInstance {
    double cx, cy, scale, intensity;
    double mark_x, mark_y, mark_amp;
};

SubjectInstance subject_instance(const SubjectSpec &s);

// n renderings with seeded jitter; image i depends only on (s, noise_seed, i).
Mat gen_subject_images(const SubjectSpec &s, int n, std::uint64_t noise_seed);

// m generic class members, each from a fresh subject seed outside every subject split.
Mat gen_class_prior(int class_id, int m, std::uint64_t seed);

PromptSpec make_prompt(int class_id, bool with_subject, int vocab = 16);

// Pixel space [0, 1] <-> diffusion space [-1, 1].
Mat to_model_space(const Mat &pixels);
Mat to_pixel_space(const Mat &x);
// Clamped to [0, 1].
Mat to_image(const Mat &x);

struct CorpusSpec {
    int num_classes = 4;
    int train_subjects = 64;
    int heldout_subjects = 16;
    int images_per_subject = 8;
    std::uint64_t seed = 0;
};

struct SubjectData {
    SubjectSpec spec;
    Mat images; // kImageDim x images_per_subject
};

struct Corpus {
    CorpusSpec spec;
    std::vector<SubjectData> train;
    std::vector<SubjectData> heldout;
};

// Train seeds are [0, train_subjects); held-out seeds start at kHeldoutSeedBase.
inline constexpr std::uint64_t kHeldoutSeedBase = 1'000'000;

Corpus make_corpus(const CorpusSpec &spec);

// Binary PGM (P5, 8-bit) for one image column.
void write_pgm(const std::filesystem::path &path, const Vec &pixels, int width = kImageSide,
               int height = kImageSide);
Vec read_pgm(const std::filesystem::path &path, int *width = nullptr, int *height = nullptr);

// Directory of PGMs plus manifest.jsonl with one {file, class_id, subject_seed, index, split} record per image.
void export_corpus(const Corpus &corpus, const std::filesystem::path &dir);
Corpus import_corpus(const std::filesystem::path &dir);

} // namespace hld
