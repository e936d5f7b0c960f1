#pragma once

// Line-oriented `key = value` configuration with [section] headers and # comments,
// and the run configuration assembled from it.

#include "hld/core_math.hpp"
#include "hld/denoiser.hpp"
#include "hld/guidance.hpp"
#include "hld/hypernet.hpp"
#include "hld/metrics.hpp"
#include "hld/toy_data.hpp"
#include "hld/training.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>

namespace hld {

class ConfigFile {
public:
    static ConfigFile parse(std::string_view text, const std::string &origin = "<config>");
    static ConfigFile load(const std::filesystem::path &path);

    bool has(const std::string &section, const std::string &key) const;
    std::optional<std::string> get(const std::string &section, const std::string &key) const;

    std::string get_string(const std::string &section, const std::string &key, const std::string &fallback) const;
    double get_double(const std::string &section, const std::string &key, double fallback) const;
    int get_int(const std::string &section, const std::string &key, int fallback) const;
    std::uint64_t get_u64(const std::string &section, const std::string &key, std::uint64_t fallback) const;
    bool get_bool(const std::string &section, const std::string &key, bool fallback) const;

    // Throws UsageError naming the first key that no getter has read.
    void reject_unknown() const;

    const std::string &origin() const { return origin_; }

private:
    std::string where(const std::string &section, const std::string &key) const;

    std::string origin_;
    std::map<std::string, std::map<std::string, std::string>> values_;
    std::map<std::pair<std::string, std::string>, int> lines_;
    mutable std::set<std::pair<std::string, std::string>> read_;
};

// Shorter schedule used by the toy pipeline (alpha_bar(T) is about 5e-5).
inline constexpr ScheduleSpec kToySchedule{ScheduleKind::linear, 200, 1e-4, 0.1};

// Toy-pipeline defaults for each training stage.
TrainConfig default_pretrain_config();
TrainConfig default_hypernet_train_config();
TrainConfig default_finetune_config();

struct RunConfig {
    std::optional<std::uint64_t> seed; // absent: drawn from entropy by the caller
    std::filesystem::path output_dir = ".";
    std::filesystem::path metrics_path;

    ScheduleSpec schedule = kToySchedule;
    DenoiserConfig denoiser{kImageDim, 64, 128, 16, kToySchedule.T};
    HypernetConfig hypernet; // targets are filled from the denoiser
    CorpusSpec corpus;
    TrainConfig pretrain = default_pretrain_config();
    TrainConfig hypernet_train = default_hypernet_train_config();
    TrainConfig finetune = default_finetune_config();
    int finetune_rank = 3;
    GuidanceConfig guidance;
    MetricSuiteConfig metrics;
    int eval_samples = 64;

    // Applies `seed` to every seeded component.
    void set_seed(std::uint64_t s);
    void validate() const;
};

// Relative paths inside the file resolve against `base_dir`.
RunConfig run_config_from(const ConfigFile &cf, const std::filesystem::path &base_dir = {});
RunConfig load_run_config(const std::filesystem::path &path);

// Canonical text form (every field), used as the config echo in checkpoints.
std::string describe(const RunConfig &cfg);

} // namespace hld
