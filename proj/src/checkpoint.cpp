#include "hld/checkpoint.hpp"

#include "hld/io.hpp"

#include <cstdio>
#include <fstream>
#include <string_view>

namespace hld {

namespace {

constexpr char kMagic[] = "HCKP";
constexpr std::uint32_t kMaxDim = 1u << 24;

template <class P> void write_blocks(io::ByteWriter &w, const P &params) {
    std::uint32_t n = 0;
    params.for_each([&](const auto &, const Mat &) { ++n; });
    w.u32(n);
    params.for_each([&](const auto &name, const Mat &m) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(m.rows()));
        w.u32(static_cast<std::uint32_t>(m.cols()));
        w.matrix_f32(m);
    });
}

// Fills an already-shaped parameter struct, checking names and shapes block by block.
template <class P> void read_blocks(io::ByteReader &r, P &params, const char *what) {
    std::uint32_t expected = 0;
    params.for_each([&](const auto &, Mat &) { ++expected; });
    if (r.u32() != expected) {
        throw FormatError(std::string("checkpoint: wrong number of ") + what + " blocks");
    }
    params.for_each([&](const auto &name, Mat &m) {
        const std::string got = r.str();
        if (got != std::string_view(name)) {
            throw FormatError(std::string("checkpoint: expected ") + what + " block '" + std::string(name) +
                              "', found '" + got + "'");
        }
        const std::uint32_t rows = r.u32();
        const std::uint32_t cols = r.u32();
        if (rows != m.rows() || cols != m.cols()) {
            throw FormatError("checkpoint: block '" + got + "' has shape " + std::to_string(rows) + "x" +
                              std::to_string(cols) + ", expected " + std::to_string(m.rows()) + "x" +
                              std::to_string(m.cols()));
        }
        m = r.matrix_f32(rows, cols);
    });
}

std::uint32_t read_dim(io::ByteReader &r, const char *what) {
    const std::uint32_t v = r.u32();
    if (v == 0 || v > kMaxDim) {
        throw FormatError(std::string("checkpoint: implausible ") + what);
    }
    return v;
}

} // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint &c) {
    io::ByteWriter p;
    p.u8(static_cast<std::uint8_t>(c.schedule.kind));
    p.u32(static_cast<std::uint32_t>(c.schedule.T));
    p.f64(c.schedule.beta_min);
    p.f64(c.schedule.beta_max);

    const DenoiserConfig &dc = c.denoiser.config;
    require(dc.T == c.schedule.T, "checkpoint: denoiser T does not match the schedule");
    for (int v : {dc.data_dim, dc.hidden, dc.mlp_hidden, dc.vocab, dc.T}) {
        p.u32(static_cast<std::uint32_t>(v));
    }
    write_blocks(p, c.denoiser);

    p.u8(c.hypernet ? 1 : 0);
    if (c.hypernet) {
        const HypernetConfig &hc = c.hypernet->config;
        for (int v : {hc.image_dim, hc.feature, hc.rank, hc.iterations}) {
            p.u32(static_cast<std::uint32_t>(v));
        }
        p.f64(hc.a_init_std);
        p.u32(static_cast<std::uint32_t>(hc.targets.size()));
        for (const auto &ts : hc.targets) {
            p.u8(static_cast<std::uint8_t>(ts.target));
            p.u32(static_cast<std::uint32_t>(ts.d_out));
            p.u32(static_cast<std::uint32_t>(ts.d_in));
        }
        write_blocks(p, *c.hypernet);
    }

    p.u32(static_cast<std::uint32_t>(c.adapters.size()));
    for (const auto &[id, set] : c.adapters) {
        check_adapters(c.denoiser, set);
        p.str(id);
        const auto blob = serialize_adapters(set);
        p.u32(static_cast<std::uint32_t>(blob.size()));
        p.bytes(blob);
    }
    p.str(c.config_echo);
    p.u64(c.seed);
    p.str(c.rng_summary);

    io::ByteWriter out;
    out.raw(std::string_view(kMagic, 4));
    out.u16(kCheckpointVersion);
    out.u32(static_cast<std::uint32_t>(p.size()));
    out.bytes(p.data());
    out.u32(io::crc32(p.data()));
    return out.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    io::ByteReader head(bytes);
    if (head.raw(4) != std::string_view(kMagic, 4)) {
        throw FormatError("checkpoint: bad magic");
    }
    if (const auto v = head.u16(); v != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(v) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint32_t len = head.u32();
    if (head.remaining() != static_cast<std::size_t>(len) + 4) {
        throw FormatError("checkpoint: truncated or oversized payload");
    }
    const auto payload = head.bytes(len);
    if (head.u32() != io::crc32(payload)) {
        throw FormatError("checkpoint: CRC mismatch");
    }

    io::ByteReader r(payload);
    Checkpoint c;
    const std::uint8_t kind = r.u8();
    if (kind != static_cast<std::uint8_t>(ScheduleKind::linear)) {
        throw FormatError("checkpoint: unknown schedule kind");
    }
    c.schedule.kind = ScheduleKind::linear;
    c.schedule.T = static_cast<int>(read_dim(r, "schedule length"));
    c.schedule.beta_min = r.f64();
    c.schedule.beta_max = r.f64();
    if (!(c.schedule.beta_min > 0.0 && c.schedule.beta_min <= c.schedule.beta_max && c.schedule.beta_max < 1.0)) {
        throw FormatError("checkpoint: invalid schedule betas");
    }

    DenoiserConfig dc;
    dc.data_dim = static_cast<int>(read_dim(r, "data size"));
    dc.hidden = static_cast<int>(read_dim(r, "hidden width"));
    dc.mlp_hidden = static_cast<int>(read_dim(r, "mlp width"));
    dc.vocab = static_cast<int>(read_dim(r, "vocabulary"));
    dc.T = static_cast<int>(read_dim(r, "denoiser steps"));
    if (dc.T != c.schedule.T) {
        throw FormatError("checkpoint: denoiser T does not match the schedule");
    }
    c.denoiser = init_denoiser(dc, 0);
    read_blocks(r, c.denoiser, "denoiser");

    const std::uint8_t has_hyper = r.u8();
    if (has_hyper > 1) {
        throw FormatError("checkpoint: bad hypernet flag");
    }
    if (has_hyper != 0) {
        HypernetConfig hc;
        hc.image_dim = static_cast<int>(read_dim(r, "hypernet image size"));
        hc.feature = static_cast<int>(read_dim(r, "hypernet width"));
        hc.rank = static_cast<int>(read_dim(r, "hypernet rank"));
        hc.iterations = static_cast<int>(read_dim(r, "hypernet iterations"));
        hc.a_init_std = r.f64();
        const std::uint32_t nt = r.u32();
        if (nt == 0 || nt > 3) {
            throw FormatError("checkpoint: bad hypernet target count");
        }
        for (std::uint32_t i = 0; i < nt; ++i) {
            const std::uint8_t t = r.u8();
            if (t > 2) {
                throw FormatError("checkpoint: unknown hypernet target");
            }
            TargetShape ts{static_cast<Target>(t), static_cast<int>(read_dim(r, "target rows")),
                           static_cast<int>(read_dim(r, "target cols"))};
            hc.targets.push_back(ts);
        }
        HypernetParams hp = init_hypernet(hc, 0);
        read_blocks(r, hp, "hypernet");
        c.hypernet = std::move(hp);
    }

    const std::uint32_t na = r.u32();
    for (std::uint32_t i = 0; i < na; ++i) {
        std::string id = r.str();
        const std::uint32_t n = r.u32();
        LoraAdapterSet set = deserialize_adapters(r.bytes(n));
        try {
            check_adapters(c.denoiser, set);
        } catch (const UsageError &e) {
            throw FormatError(std::string("checkpoint: adapters '") + id + "' do not fit the denoiser: " + e.what());
        }
        if (!c.adapters.emplace(std::move(id), std::move(set)).second) {
            throw FormatError("checkpoint: duplicate adapter id");
        }
    }
    c.config_echo = r.str();
    c.seed = r.u64();
    c.rng_summary = r.str();
    if (r.remaining() != 0) {
        throw FormatError("checkpoint: trailing bytes in payload");
    }
    return c;
}

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt) {
    io::write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) {
        throw UsageError("checkpoint not found: " + path.string());
    }
    return deserialize_checkpoint(io::read_file(path));
}

OutputLock::OutputLock(const std::filesystem::path &dir) {
    std::filesystem::create_directories(dir);
    path_ = dir / ".hld.lock";
    std::FILE *f = std::fopen(path_.string().c_str(), "wx");
    if (f == nullptr) {
        const std::string p = path_.string();
        path_.clear();
        throw UsageError("output directory is in use (lock file " + p + " exists)");
    }
    std::fclose(f);
}

OutputLock::~OutputLock() {
    if (!path_.empty()) {
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
}

} // namespace hld
