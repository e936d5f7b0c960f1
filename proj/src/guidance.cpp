#include "hld/guidance.hpp"

#include "hld/io.hpp"
#include "hld/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>

namespace hld {

namespace {

constexpr char kSampleMagic[] = "HSMP";
constexpr std::uint16_t kSampleVersion = 1;

Mat combined_eps(const EpsModel &personalized, const EpsModel &base, const Mat &x, int t, const PromptSpec &prompt_S,
                 const PromptSpec &prompt_G, const GuidanceConfig &g) {
    static const PromptSpec null_prompt = PromptSpec::null_prompt();
    switch (g.mode) {
    case GuidanceMode::none:
        return personalized.predict(x, t, prompt_S);
    case GuidanceMode::cfg:
        if (g.w == 0.0) {
            // Guidance scale 1 is the plain conditional prediction.
            return personalized.predict(x, t, prompt_S);
        }
        return cfg_eps(personalized.predict(x, t, prompt_S), personalized.predict(x, t, null_prompt), g.w);
    case GuidanceMode::hmcfg: {
        const EpsModel &uncond = g.personalized_uncond ? personalized : base;
        return hmcfg_eps(personalized.predict(x, t, prompt_S), base.predict(x, t, prompt_G),
                         uncond.predict(x, t, null_prompt), g.w, g.kappa);
    }
    }
    throw UsageError("unknown guidance mode");
}

constexpr int kChainBlock = 32;

void run_chains(const EpsModel &personalized, const EpsModel &base, const PromptSpec &prompt_S,
                const PromptSpec &prompt_G, const GuidanceConfig &g, const RespacedSchedule &rs, int data_dim,
                std::uint64_t seed, Eigen::Index lo, Eigen::Index hi, Mat &out) {
    const Eigen::Index n = hi - lo;
    std::vector<Rng> rngs;
    rngs.reserve(static_cast<std::size_t>(n));
    Mat x(data_dim, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        rngs.emplace_back(derive_seed(seed, {static_cast<std::uint64_t>(lo + j)}));
        x.col(j) = randn(data_dim, 1, rngs.back());
    }
    for (int i = rs.schedule.T(); i >= 1; --i) {
        const int t_model = rs.timesteps[static_cast<std::size_t>(i - 1)];
        const Mat eps = combined_eps(personalized, base, x, t_model, prompt_S, prompt_G, g);
        if (i > 1) {
            Mat noise(data_dim, n);
            for (Eigen::Index j = 0; j < n; ++j) {
                noise.col(j) = randn(data_dim, 1, rngs[static_cast<std::size_t>(j)]);
            }
            x = reverse_step(x, eps, i, rs.schedule, &noise);
        } else {
            x = reverse_step(x, eps, i, rs.schedule, nullptr);
        }
    }
    out.middleCols(lo, n) = x;
}

} // namespace

std::string_view mode_name(GuidanceMode m) {
    switch (m) {
    case GuidanceMode::none:
        return "none";
    case GuidanceMode::cfg:
        return "cfg";
    case GuidanceMode::hmcfg:
        return "hmcfg";
    }
    return "?";
}

GuidanceMode parse_mode(std::string_view name) {
    for (GuidanceMode m : {GuidanceMode::none, GuidanceMode::cfg, GuidanceMode::hmcfg}) {
        if (mode_name(m) == name) {
            return m;
        }
    }
    throw UsageError("unknown guidance mode '" + std::string(name) + "' (expected none, cfg, or hmcfg)");
}

void GuidanceConfig::validate() const {
    require(w >= 0.0, "guidance strength w must be >= 0 (guidance scale >= 1)");
    require(kappa >= 0.0 && kappa <= 2.0, "kappa out of [0,2]");
    require(steps >= 1, "inference steps must be >= 1");
}

Mat cfg_eps(const Mat &eps_cond, const Mat &eps_uncond, double w) {
    require_same_shape(eps_cond, eps_uncond, "cfg_eps");
    return eps_uncond + (w + 1.0) * (eps_cond - eps_uncond);
}

Mat hmcfg_eps(const Mat &eps_pers_cS, const Mat &eps_base_cG, const Mat &eps_base_null, double w, double kappa) {
    require_same_shape(eps_pers_cS, eps_base_cG, "hmcfg_eps");
    require_same_shape(eps_pers_cS, eps_base_null, "hmcfg_eps");
    require(kappa >= 0.0 && kappa <= 2.0, "kappa out of [0,2]");
    return eps_base_null + (w + 1.0) * (kappa * eps_pers_cS + (2.0 - kappa) * eps_base_cG - 2.0 * eps_base_null);
}

int worker_threads() {
    if (const char *env = std::getenv("HLD_THREADS")) {
        try {
            const int n = std::stoi(env);
            if (n >= 1) {
                return n;
            }
        } catch (const std::exception &) {
        }
        throw UsageError(std::string("HLD_THREADS must be a positive integer, got '") + env + "'");
    }
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

Mat guided_sample(const EpsModel &personalized, const EpsModel &base, const PromptSpec &prompt_S,
                  const PromptSpec &prompt_G, const GuidanceConfig &g, const NoiseSchedule &sched, int data_dim,
                  int n, std::uint64_t seed) {
    g.validate();
    require(n >= 1, "guided_sample: n must be >= 1");
    require(data_dim >= 1, "guided_sample: data_dim must be >= 1");
    const RespacedSchedule rs = respace(sched, g.steps);
    Mat out(data_dim, n);
    // Chains run in fixed blocks so each block's arithmetic, and hence every output bit,
    // is independent of how many workers share the blocks.
    const int blocks = (n + kChainBlock - 1) / kChainBlock;
    const int workers = std::min(worker_threads(), blocks);
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    auto drain = [&](int w) {
        try {
            for (int b = next++; b < blocks; b = next++) {
                const Eigen::Index lo = static_cast<Eigen::Index>(b) * kChainBlock;
                const Eigen::Index hi = std::min<Eigen::Index>(lo + kChainBlock, n);
                run_chains(personalized, base, prompt_S, prompt_G, g, rs, data_dim, seed, lo, hi, out);
            }
        } catch (...) {
            errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < workers; ++w) {
        pool.emplace_back(drain, w);
    }
    drain(0);
    for (auto &th : pool) {
        th.join();
    }
    for (auto &e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return out;
}

Mat guided_sample(const DenoiserParams &base_params, const LoraAdapterSet *adapters, const PromptSpec &prompt_S,
                  const PromptSpec &prompt_G, const GuidanceConfig &g, const NoiseSchedule &sched, int n,
                  std::uint64_t seed) {
    if (g.mode == GuidanceMode::hmcfg) {
        require(adapters != nullptr, "hmcfg mode requires adapters");
        require(prompt_S.is_subject(), "hmcfg mode requires a subject prompt containing [V]");
    }
    require(sched.T() == base_params.config.T, "guided_sample: schedule length does not match the denoiser");
    const DenoiserModel base(base_params);
    const DenoiserModel personalized(base_params, adapters);
    return guided_sample(personalized, base, prompt_S, prompt_G, g, sched, base_params.config.data_dim, n, seed);
}

double hmcfg_score_identity_check(const Mat &x_t, int t, const EpsModel &personalized, const EpsModel &base,
                                  const PromptSpec &prompt_S, const PromptSpec &prompt_G, double w, double kappa,
                                  const NoiseSchedule &sched) {
    const double sigma = sched.sigma(t);
    const Mat e_s = personalized.predict(x_t, t, prompt_S);
    const Mat e_g = base.predict(x_t, t, prompt_G);
    const Mat e_n = base.predict(x_t, t, PromptSpec::null_prompt());
    const Mat via_eps = eps_to_score(hmcfg_eps(e_s, e_g, e_n, w, kappa), sigma);
    const Mat s_s = eps_to_score(e_s, sigma);
    const Mat s_g = eps_to_score(e_g, sigma);
    const Mat s_n = eps_to_score(e_n, sigma);
    const Mat via_score = s_n + (w + 1.0) * (kappa * s_s + (2.0 - kappa) * s_g - 2.0 * s_n);
    return (via_eps - via_score).cwiseAbs().maxCoeff();
}

std::vector<std::uint8_t> encode_samples(const Mat &samples, std::span<const std::uint32_t> item_shape) {
    std::size_t item = 1;
    for (auto d : item_shape) {
        item *= d;
    }
    require(item == static_cast<std::size_t>(samples.rows()), "encode_samples: item shape does not match data size");
    io::ByteWriter w;
    w.raw(std::string_view(kSampleMagic, 4));
    w.u16(kSampleVersion);
    w.u32(static_cast<std::uint32_t>(item_shape.size() + 1));
    w.u32(static_cast<std::uint32_t>(samples.cols()));
    for (auto d : item_shape) {
        w.u32(d);
    }
    w.matrix_f32(samples.transpose());
    return w.take();
}

Mat decode_samples(std::span<const std::uint8_t> bytes, std::vector<std::uint32_t> *shape) {
    io::ByteReader r(bytes);
    if (r.raw(4) != std::string_view(kSampleMagic, 4)) {
        throw FormatError("sample file: bad magic");
    }
    if (const auto v = r.u16(); v != kSampleVersion) {
        throw FormatError("sample file: unsupported version " + std::to_string(v));
    }
    const std::uint32_t rank = r.u32();
    if (rank < 1 || rank > 8) {
        throw FormatError("sample file: bad rank");
    }
    std::vector<std::uint32_t> dims(rank);
    std::size_t item = 1;
    for (auto &d : dims) {
        d = r.u32();
    }
    for (std::size_t i = 1; i < dims.size(); ++i) {
        item *= dims[i];
    }
    if (r.remaining() != 4ull * dims[0] * item) {
        throw FormatError("sample file: payload size mismatch");
    }
    Mat m = r.matrix_f32(dims[0], static_cast<Eigen::Index>(item)).transpose();
    if (shape != nullptr) {
        *shape = dims;
    }
    return m;
}

} // namespace hld
