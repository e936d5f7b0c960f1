#include "hld/toy_data.hpp"

#include "hld/io.hpp"
#include "hld/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hld {

namespace {

// Prior subject seeds live above this bound, disjoint from train and held-out seeds.
constexpr std::uint64_t kPriorSeedBase = 1ull << 40;

double uniform(Rng &rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Signed distance (pixels, negative inside) to the class archetype centered at (cx, cy).
double shape_distance(int class_id, double px, double py, double cx, double cy, double scale) {
    const double dx = px - cx;
    const double dy = py - cy;
    const double r = 4.5 * scale;
    switch (class_id % kNumShapes) {
    case 0: // disk
        return std::hypot(dx, dy) - r;
    case 1: // ring
        return std::abs(std::hypot(dx, dy) - r) - 1.1;
    case 2: { // plus
        const double w = 1.3;
        const double h = std::max(std::abs(dx) - r, std::abs(dy) - w);
        const double v = std::max(std::abs(dx) - w, std::abs(dy) - r);
        return std::min(h, v);
    }
    default: { // square
        const double half = 0.8 * r;
        return std::max(std::abs(dx), std::abs(dy)) - half;
    }
    }
}

Vec render(int class_id, const SubjectInstance &inst, double jx, double jy, double gain, Rng &pixel_rng,
           double pixel_noise) {
    std::normal_distribution<double> normal(0.0, pixel_noise);
    Vec img(kImageDim);
    const double cx = inst.cx + jx;
    const double cy = inst.cy + jy;
    const double mx = inst.mark_x + jx;
    const double my = inst.mark_y + jy;
    for (int i = 0; i < kImageSide; ++i) {
        for (int j = 0; j < kImageSide; ++j) {
            const double px = j + 0.5;
            const double py = i + 0.5;
            const double d = shape_distance(class_id, px, py, cx, cy, inst.scale);
            const double cover = std::clamp(0.5 - d, 0.0, 1.0);
            double v = inst.intensity * gain * cover;
            const double r2 = (px - mx) * (px - mx) + (py - my) * (py - my);
            v = std::max(v, inst.mark_amp * gain * std::exp(-r2 / 2.0));
            v += normal(pixel_rng);
            img[i * kImageSide + j] = std::clamp(v, 0.0, 1.0);
        }
    }
    return img;
}

Vec render_jittered(const SubjectSpec &s, std::uint64_t image_seed) {
    const SubjectInstance inst = subject_instance(s);
    Rng rng(image_seed);
    std::normal_distribution<double> jitter(0.0, 0.25);
    const double jx = jitter(rng);
    const double jy = jitter(rng);
    const double gain = 1.0 + 0.03 * std::normal_distribution<double>(0.0, 1.0)(rng);
    return render(s.class_id, inst, jx, jy, gain, rng, 0.02);
}

} // namespace

SubjectInstance subject_instance(const SubjectSpec &s) {
    Rng rng(derive_seed(s.subject_seed, {static_cast<std::uint64_t>(s.class_id), 0x5b1ec7ull}));
    SubjectInstance inst{};
    inst.cx = 8.0 + uniform(rng, -2.0, 2.0);
    inst.cy = 8.0 + uniform(rng, -2.0, 2.0);
    inst.scale = uniform(rng, 0.75, 1.2);
    inst.intensity = uniform(rng, 0.55, 1.0);
    inst.mark_x = uniform(rng, 2.0, 14.0);
    inst.mark_y = uniform(rng, 2.0, 14.0);
    inst.mark_amp = uniform(rng, 0.5, 0.9);
    return inst;
}

Mat gen_subject_images(const SubjectSpec &s, int n, std::uint64_t noise_seed) {
    require(n >= 1, "gen_subject_images: n must be >= 1");
    require(s.class_id >= 0, "gen_subject_images: class_id must be non-negative");
    Mat out(kImageDim, n);
    for (int i = 0; i < n; ++i) {
        const std::uint64_t image_seed =
            derive_seed(noise_seed, {static_cast<std::uint64_t>(s.class_id), s.subject_seed, static_cast<std::uint64_t>(i)});
        out.col(i) = render_jittered(s, image_seed);
    }
    return out;
}

Mat gen_class_prior(int class_id, int m, std::uint64_t seed) {
    require(m >= 1, "gen_class_prior: m must be >= 1");
    require(class_id >= 0, "gen_class_prior: class_id must be non-negative");
    Mat out(kImageDim, m);
    for (int i = 0; i < m; ++i) {
        const std::uint64_t h = derive_seed(seed, {static_cast<std::uint64_t>(class_id), static_cast<std::uint64_t>(i)});
        const SubjectSpec generic{class_id, kPriorSeedBase | (h >> 24)};
        out.col(i) = render_jittered(generic, derive_seed(h, {1}));
    }
    return out;
}

PromptSpec make_prompt(int class_id, bool with_subject, int vocab) {
    require(class_id >= 0 && kFirstClassToken + class_id < vocab,
            "make_prompt: class_id " + std::to_string(class_id) + " out of vocabulary range");
    PromptSpec p;
    if (with_subject) {
        p.tokens.push_back(kSubjectToken);
    }
    p.tokens.push_back(kFirstClassToken + class_id);
    return p;
}

Mat to_model_space(const Mat &pixels) { return (2.0 * pixels).array() - 1.0; }

Mat to_pixel_space(const Mat &x) { return (x.array() + 1.0) * 0.5; }

Mat to_image(const Mat &x) { return to_pixel_space(x).cwiseMax(0.0).cwiseMin(1.0); }

Corpus make_corpus(const CorpusSpec &spec) {
    require(spec.num_classes >= 1 && spec.train_subjects >= 1 && spec.heldout_subjects >= 0 &&
                spec.images_per_subject >= 1,
            "corpus sizes must be positive");
    Corpus c;
    c.spec = spec;
    for (int k = 0; k < spec.num_classes; ++k) {
        for (int s = 0; s < spec.train_subjects; ++s) {
            SubjectSpec ss{k, static_cast<std::uint64_t>(s)};
            c.train.push_back({ss, gen_subject_images(ss, spec.images_per_subject, spec.seed)});
        }
        for (int s = 0; s < spec.heldout_subjects; ++s) {
            SubjectSpec ss{k, kHeldoutSeedBase + static_cast<std::uint64_t>(s)};
            c.heldout.push_back({ss, gen_subject_images(ss, spec.images_per_subject, spec.seed)});
        }
    }
    return c;
}

void write_pgm(const std::filesystem::path &path, const Vec &pixels, int width, int height) {
    require(pixels.size() == static_cast<Eigen::Index>(width) * height, "write_pgm: pixel count mismatch");
    std::ostringstream header;
    header << "P5\n" << width << " " << height << "\n255\n";
    io::ByteWriter w;
    w.raw(header.str());
    for (Eigen::Index i = 0; i < pixels.size(); ++i) {
        const double v = std::clamp(pixels[i], 0.0, 1.0);
        w.u8(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
    io::write_file(path, w.data());
}

Vec read_pgm(const std::filesystem::path &path, int *width, int *height) {
    const auto bytes = io::read_file(path);
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') {
                    ++pos;
                }
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) {
            t.push_back(static_cast<char>(bytes[pos++]));
        }
        return t;
    };
    if (token() != "P5") {
        throw FormatError("not a binary PGM: " + path.string());
    }
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(token());
        h = std::stoi(token());
        maxval = std::stoi(token());
    } catch (const std::exception &) {
        throw FormatError("malformed PGM header: " + path.string());
    }
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
        throw FormatError("unsupported PGM geometry: " + path.string());
    }
    ++pos; // single whitespace before the raster
    if (bytes.size() < pos + static_cast<std::size_t>(w) * h) {
        throw FormatError("truncated PGM raster: " + path.string());
    }
    Vec img(static_cast<Eigen::Index>(w) * h);
    for (Eigen::Index i = 0; i < img.size(); ++i) {
        img[i] = static_cast<double>(bytes[pos + static_cast<std::size_t>(i)]) / maxval;
    }
    if (width != nullptr) {
        *width = w;
    }
    if (height != nullptr) {
        *height = h;
    }
    return img;
}

void export_corpus(const Corpus &corpus, const std::filesystem::path &dir) {
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    auto dump = [&](const std::vector<SubjectData> &subjects, const char *split) {
        for (const auto &sd : subjects) {
            for (Eigen::Index i = 0; i < sd.images.cols(); ++i) {
                const std::string file = std::string(split) + "_c" + std::to_string(sd.spec.class_id) + "_s" +
                                         std::to_string(sd.spec.subject_seed) + "_" + std::to_string(i) + ".pgm";
                write_pgm(dir / file, sd.images.col(i));
                nlohmann::json rec = {{"file", file},
                                      {"class_id", sd.spec.class_id},
                                      {"subject_seed", sd.spec.subject_seed},
                                      {"index", i},
                                      {"split", split}};
                manifest << rec.dump() << "\n";
            }
        }
    };
    dump(corpus.train, "train");
    dump(corpus.heldout, "heldout");
    io::write_text(dir / "manifest.jsonl", manifest.str());
}

Corpus import_corpus(const std::filesystem::path &dir) {
    std::ifstream in(dir / "manifest.jsonl");
    if (!in) {
        throw UsageError("corpus manifest not found in " + dir.string());
    }
    Corpus c;
    std::string line;
    struct Pending {
        SubjectSpec spec;
        std::vector<std::pair<int, Vec>> images;
    };
    std::vector<Pending> train, heldout;
    auto slot = [](std::vector<Pending> &v, const SubjectSpec &s) -> Pending & {
        for (auto &p : v) {
            if (p.spec.class_id == s.class_id && p.spec.subject_seed == s.subject_seed) {
                return p;
            }
        }
        v.push_back({s, {}});
        return v.back();
    };
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception &e) {
            throw FormatError(std::string("corpus manifest: ") + e.what());
        }
        const SubjectSpec s{rec.at("class_id").get<int>(), rec.at("subject_seed").get<std::uint64_t>()};
        const std::string split = rec.value("split", "train");
        auto &p = slot(split == "heldout" ? heldout : train, s);
        p.images.emplace_back(rec.at("index").get<int>(), read_pgm(dir / rec.at("file").get<std::string>()));
    }
    auto finish = [](std::vector<Pending> &src, std::vector<SubjectData> &dst) {
        for (auto &p : src) {
            std::sort(p.images.begin(), p.images.end(), [](const auto &a, const auto &b) { return a.first < b.first; });
            Mat m(kImageDim, static_cast<Eigen::Index>(p.images.size()));
            for (std::size_t i = 0; i < p.images.size(); ++i) {
                m.col(static_cast<Eigen::Index>(i)) = p.images[i].second;
            }
            dst.push_back({p.spec, std::move(m)});
        }
    };
    finish(train, c.train);
    finish(heldout, c.heldout);
    return c;
}

} // namespace hld
