#pragma once

#include "hld/common.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hld {

// Cross-attention projections that accept low-rank updates.
enum class Target : std::uint8_t { W_Q = 0, W_K = 1, W_V = 2 };

inline constexpr Target kAllTargets[] = {Target::W_Q, Target::W_K, Target::W_V};

std::string_view target_name(Target t);
Target parse_target(std::string_view name);

// One low-rank factor pair; the update is B * A with B: d_out x r and A: r x d_in.
struct LoraEntry {
    Mat A;
    Mat B;

    int rank() const { return static_cast<int>(A.rows()); }
    int d_in() const { return static_cast<int>(A.cols()); }
    int d_out() const { return static_cast<int>(B.rows()); }
};

struct TargetShape {
    Target target;
    int d_out;
    int d_in;
};

// Entries are kept in target order (W_Q, W_K, W_V).
class LoraAdapterSet {
public:
    LoraAdapterSet() = default;

    void insert(Target t, LoraEntry e);
    bool contains(Target t) const { return entries_.count(t) != 0; }
    const LoraEntry &at(Target t) const;
    LoraEntry &at(Target t);
    const LoraEntry *find(Target t) const;

    const std::map<Target, LoraEntry> &entries() const { return entries_; }
    bool empty() const { return entries_.empty(); }
    int rank() const;
    std::size_t parameter_count() const;

    // Flattened factor vector: for each target, B row-major then A row-major.
    Vec flatten() const;
    LoraAdapterSet scaled(double c) const;

    // Same targets, rank and shapes.
    bool same_structure(const LoraAdapterSet &other) const;

private:
    std::map<Target, LoraEntry> entries_;
};

enum class LoraInit { zero, b_zero_a_random };

LoraAdapterSet new_adapter_set(std::span<const TargetShape> targets, int rank, LoraInit init,
                               std::uint64_t seed = 0);

Mat adapter_delta(const LoraEntry &entry);

// Sum of squares over every factor entry (A and B), not over B*A.
double adapter_sq_norm(const LoraAdapterSet &set);

// Elementwise mean of A factors and of B factors, separately.
LoraAdapterSet average_adapters(std::span<const LoraAdapterSet> sets);

// "HLRA" v1 container; see README for the byte layout.
std::vector<std::uint8_t> serialize_adapters(const LoraAdapterSet &set);
LoraAdapterSet deserialize_adapters(std::span<const std::uint8_t> bytes);

} // namespace hld
