#include "hld/lora.hpp"

#include "hld/io.hpp"

#include <array>
#include <random>

namespace hld {

namespace {

constexpr char kMagic[] = "HLRA";
constexpr std::uint16_t kVersion = 1;

} // namespace

std::string_view target_name(Target t) {
    switch (t) {
    case Target::W_Q:
        return "W_Q";
    case Target::W_K:
        return "W_K";
    case Target::W_V:
        return "W_V";
    }
    return "?";
}

Target parse_target(std::string_view name) {
    for (Target t : kAllTargets) {
        if (target_name(t) == name) {
            return t;
        }
    }
    throw UsageError("unknown adapter target: " + std::string(name));
}

void LoraAdapterSet::insert(Target t, LoraEntry e) {
    require(e.B.cols() == e.A.rows(), "adapter entry: B columns must equal A rows");
    require(e.A.rows() >= 1, "adapter entry: rank must be >= 1");
    if (!entries_.empty()) {
        require(e.rank() == rank(), "adapter entries must share one rank");
    }
    entries_[t] = std::move(e);
}

const LoraEntry &LoraAdapterSet::at(Target t) const {
    auto it = entries_.find(t);
    if (it == entries_.end()) {
        throw UsageError("adapter set has no entry for " + std::string(target_name(t)));
    }
    return it->second;
}

LoraEntry &LoraAdapterSet::at(Target t) {
    auto it = entries_.find(t);
    if (it == entries_.end()) {
        throw UsageError("adapter set has no entry for " + std::string(target_name(t)));
    }
    return it->second;
}

const LoraEntry *LoraAdapterSet::find(Target t) const {
    auto it = entries_.find(t);
    return it == entries_.end() ? nullptr : &it->second;
}

int LoraAdapterSet::rank() const { return entries_.empty() ? 0 : entries_.begin()->second.rank(); }

std::size_t LoraAdapterSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto &[t, e] : entries_) {
        n += static_cast<std::size_t>(e.rank()) * static_cast<std::size_t>(e.d_in() + e.d_out());
    }
    return n;
}

Vec LoraAdapterSet::flatten() const {
    Vec out(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index k = 0;
    for (const auto &[t, e] : entries_) {
        for (Eigen::Index i = 0; i < e.B.rows(); ++i) {
            for (Eigen::Index j = 0; j < e.B.cols(); ++j) {
                out[k++] = e.B(i, j);
            }
        }
        for (Eigen::Index i = 0; i < e.A.rows(); ++i) {
            for (Eigen::Index j = 0; j < e.A.cols(); ++j) {
                out[k++] = e.A(i, j);
            }
        }
    }
    return out;
}

LoraAdapterSet LoraAdapterSet::scaled(double c) const {
    LoraAdapterSet out = *this;
    for (auto &[t, e] : out.entries_) {
        e.A *= c;
        e.B *= c;
    }
    return out;
}

bool LoraAdapterSet::same_structure(const LoraAdapterSet &other) const {
    if (entries_.size() != other.entries_.size()) {
        return false;
    }
    auto it = other.entries_.begin();
    for (const auto &[t, e] : entries_) {
        if (it->first != t || it->second.A.rows() != e.A.rows() || it->second.A.cols() != e.A.cols() ||
            it->second.B.rows() != e.B.rows() || it->second.B.cols() != e.B.cols()) {
            return false;
        }
        ++it;
    }
    return true;
}

LoraAdapterSet new_adapter_set(std::span<const TargetShape> targets, int rank, LoraInit init, std::uint64_t seed) {
    require(!targets.empty(), "new_adapter_set: target list is empty");
    require(rank >= 1, "new_adapter_set: rank must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    LoraAdapterSet set;
    for (const auto &ts : targets) {
        require(ts.d_in >= 1 && ts.d_out >= 1, "new_adapter_set: dimensions must be positive");
        require(!set.contains(ts.target), "new_adapter_set: duplicate target");
        LoraEntry e{Mat::Zero(rank, ts.d_in), Mat::Zero(ts.d_out, rank)};
        if (init == LoraInit::b_zero_a_random) {
            for (Eigen::Index i = 0; i < e.A.rows(); ++i) {
                for (Eigen::Index j = 0; j < e.A.cols(); ++j) {
                    e.A(i, j) = normal(rng);
                }
            }
        }
        set.insert(ts.target, std::move(e));
    }
    return set;
}

Mat adapter_delta(const LoraEntry &entry) {
    require(entry.B.cols() == entry.A.rows(), "adapter_delta: B columns must equal A rows");
    return entry.B * entry.A;
}

double adapter_sq_norm(const LoraAdapterSet &set) {
    double s = 0.0;
    for (const auto &[t, e] : set.entries()) {
        s += e.A.squaredNorm() + e.B.squaredNorm();
    }
    return s;
}

LoraAdapterSet average_adapters(std::span<const LoraAdapterSet> sets) {
    require(!sets.empty(), "average_adapters: empty list");
    LoraAdapterSet out = sets.front();
    if (sets.size() == 1) {
        return out;
    }
    for (std::size_t i = 1; i < sets.size(); ++i) {
        require(sets[i].same_structure(out), "average_adapters: mismatched adapter structure");
        for (const auto &[t, e] : sets[i].entries()) {
            out.at(t).A += e.A;
            out.at(t).B += e.B;
        }
    }
    const double inv = 1.0 / static_cast<double>(sets.size());
    for (Target t : kAllTargets) {
        if (out.contains(t)) {
            out.at(t).A *= inv;
            out.at(t).B *= inv;
        }
    }
    return out;
}

std::vector<std::uint8_t> serialize_adapters(const LoraAdapterSet &set) {
    io::ByteWriter header;
    header.raw(std::string_view(kMagic, 4));
    header.u16(kVersion);
    header.u16(static_cast<std::uint16_t>(set.entries().size()));
    for (const auto &[t, e] : set.entries()) {
        const auto name = target_name(t);
        header.u8(static_cast<std::uint8_t>(name.size()));
        header.raw(name);
        header.u32(static_cast<std::uint32_t>(e.d_out()));
        header.u32(static_cast<std::uint32_t>(e.d_in()));
        header.u32(static_cast<std::uint32_t>(e.rank()));
    }
    io::ByteWriter payload;
    for (const auto &[t, e] : set.entries()) {
        payload.matrix_f32(e.B);
        payload.matrix_f32(e.A);
    }
    const std::uint32_t crc = io::crc32(payload.data());
    header.bytes(payload.data());
    header.u32(crc);
    return header.take();
}

LoraAdapterSet deserialize_adapters(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    if (r.raw(4) != std::string_view(kMagic, 4)) {
        throw FormatError("adapter file: bad magic");
    }
    const std::uint16_t version = r.u16();
    if (version != kVersion) {
        throw FormatError("adapter file: unsupported version " + std::to_string(version));
    }
    const std::uint16_t count = r.u16();
    std::vector<std::pair<Target, std::array<std::uint32_t, 3>>> shapes;
    for (std::uint16_t i = 0; i < count; ++i) {
        const std::uint8_t len = r.u8();
        const std::string name = r.raw(len);
        Target t{};
        try {
            t = parse_target(name);
        } catch (const UsageError &) {
            throw FormatError("adapter file: unknown target '" + name + "'");
        }
        const std::uint32_t d_out = r.u32();
        const std::uint32_t d_in = r.u32();
        const std::uint32_t rank = r.u32();
        if (rank == 0 || d_out == 0 || d_in == 0 || d_out > (1u << 20) || d_in > (1u << 20) || rank > (1u << 16)) {
            throw FormatError("adapter file: implausible entry shape");
        }
        shapes.push_back({t, {d_out, d_in, rank}});
    }
    const std::size_t payload_start = r.pos();
    std::size_t payload_bytes = 0;
    for (const auto &[t, s] : shapes) {
        payload_bytes += 4ull * s[2] * (static_cast<std::size_t>(s[0]) + s[1]);
    }
    if (r.remaining() != payload_bytes + 4) {
        throw FormatError("adapter file: truncated or oversized payload");
    }
    const auto payload = bytes.subspan(payload_start, payload_bytes);
    LoraAdapterSet set;
    for (const auto &[t, s] : shapes) {
        LoraEntry e;
        e.B = r.matrix_f32(s[0], s[2]);
        e.A = r.matrix_f32(s[2], s[1]);
        if (set.contains(t)) {
            throw FormatError("adapter file: duplicate target");
        }
        try {
            set.insert(t, std::move(e));
        } catch (const UsageError &err) {
            throw FormatError(std::string("adapter file: ") + err.what());
        }
    }
    if (r.u32() != io::crc32(payload)) {
        throw FormatError("adapter file: checksum mismatch");
    }
    return set;
}

} // namespace hld
