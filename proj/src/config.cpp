#include "hld/config.hpp"

#include "hld/io.hpp"
#include "hld/rng.hpp"

#include <cctype>
#include <charconv>
#include <iomanip>
#include <sstream>

namespace hld {

namespace {

std::string trim(std::string_view s) {
    std::size_t a = 0;
    std::size_t b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) {
        ++a;
    }
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) {
        --b;
    }
    return std::string(s.substr(a, b - a));
}

std::string num(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

} // namespace

// Defaults chosen so the toy pipeline runs in minutes on one core.
TrainConfig default_pretrain_config() {
    TrainConfig c;
    c.schedule = kToySchedule;
    c.lr = 2e-3;
    c.batch_size = 32;
    c.steps = 20000;
    c.prompt_dropout = 0.1;
    return c;
}

TrainConfig default_hypernet_train_config() {
    TrainConfig c;
    c.schedule = kToySchedule;
    c.lr = 1e-3;
    c.batch_size = 8;
    c.steps = 3000;
    c.lambda = 0.15;
    c.prompt_dropout = 0.0;
    c.subject_token_rate = 0.0;
    return c;
}

TrainConfig default_finetune_config() {
    TrainConfig c;
    c.schedule = kToySchedule;
    c.lr = 5e-3;
    c.batch_size = 8;
    c.steps = 1600;
    c.prompt_dropout = 0.0;
    c.subject_token_rate = 0.0;
    c.optimizer.weight_decay = 0.0;
    return c;
}

namespace {

TrainConfig read_train(const ConfigFile &cf, const std::string &sec, TrainConfig c) {
    c.gamma = cf.get_double(sec, "gamma", c.gamma);
    c.lambda = cf.get_double(sec, "lambda", c.lambda);
    c.lr = cf.get_double(sec, "lr", c.lr);
    c.batch_size = cf.get_int(sec, "batch_size", c.batch_size);
    c.steps = cf.get_int(sec, "steps", c.steps);
    c.prompt_dropout = cf.get_double(sec, "prompt_dropout", c.prompt_dropout);
    c.subject_token_rate = cf.get_double(sec, "subject_token_rate", c.subject_token_rate);
    c.exemplars = cf.get_int(sec, "exemplars", c.exemplars);
    c.reg_on_base = cf.get_bool(sec, "reg_on_base", c.reg_on_base);
    const std::string opt = cf.get_string(sec, "optimizer", c.optimizer.kind == OptimizerKind::sgd ? "sgd" : "adam");
    if (opt == "adam") {
        c.optimizer.kind = OptimizerKind::adam;
    } else if (opt == "sgd") {
        c.optimizer.kind = OptimizerKind::sgd;
    } else {
        throw UsageError(cf.origin() + ": [" + sec + "] optimizer must be adam or sgd");
    }
    c.optimizer.beta1 = cf.get_double(sec, "beta1", c.optimizer.beta1);
    c.optimizer.beta2 = cf.get_double(sec, "beta2", c.optimizer.beta2);
    c.optimizer.weight_decay = cf.get_double(sec, "weight_decay", c.optimizer.weight_decay);
    return c;
}

void write_train(std::ostream &os, const std::string &sec, const TrainConfig &c) {
    os << "\n[" << sec << "]\n";
    os << "gamma = " << num(c.gamma) << "\nlambda = " << num(c.lambda) << "\nlr = " << num(c.lr)
       << "\nbatch_size = " << c.batch_size << "\nsteps = " << c.steps << "\nprompt_dropout = " << num(c.prompt_dropout)
       << "\nsubject_token_rate = " << num(c.subject_token_rate) << "\nexemplars = " << c.exemplars
       << "\nreg_on_base = " << (c.reg_on_base ? "true" : "false")
       << "\noptimizer = " << (c.optimizer.kind == OptimizerKind::sgd ? "sgd" : "adam")
       << "\nbeta1 = " << num(c.optimizer.beta1) << "\nbeta2 = " << num(c.optimizer.beta2)
       << "\nweight_decay = " << num(c.optimizer.weight_decay) << '\n';
}

} // namespace

ConfigFile ConfigFile::parse(std::string_view text, const std::string &origin) {
    ConfigFile cf;
    cf.origin_ = origin;
    std::string section;
    int lineno = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        const std::string line = trim(text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos));
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++lineno;
        if (line.empty() || line[0] == '#' || line[0] == ';') {
            continue;
        }
        const std::string at = origin + ":" + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw UsageError(at + ": unterminated section header");
            }
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            if (section.empty()) {
                throw UsageError(at + ": empty section name");
            }
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError(at + ": expected 'key = value'");
        }
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        if (key.empty()) {
            throw UsageError(at + ": missing key");
        }
        auto &sec = cf.values_[section];
        if (sec.count(key) != 0) {
            throw UsageError(at + ": duplicate key '" + key + "'");
        }
        sec[key] = value;
        cf.lines_[{section, key}] = lineno;
    }
    return cf;
}

ConfigFile ConfigFile::load(const std::filesystem::path &path) {
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) {
        throw UsageError("config file not found: " + path.string());
    }
    const auto bytes = io::read_file(path);
    return parse(std::string_view(reinterpret_cast<const char *>(bytes.data()), bytes.size()), path.string());
}

bool ConfigFile::has(const std::string &section, const std::string &key) const {
    auto it = values_.find(section);
    return it != values_.end() && it->second.count(key) != 0;
}

std::optional<std::string> ConfigFile::get(const std::string &section, const std::string &key) const {
    auto it = values_.find(section);
    if (it == values_.end()) {
        return std::nullopt;
    }
    auto kv = it->second.find(key);
    if (kv == it->second.end()) {
        return std::nullopt;
    }
    read_.insert({section, key});
    return kv->second;
}

std::string ConfigFile::where(const std::string &section, const std::string &key) const {
    auto it = lines_.find({section, key});
    const std::string line = it == lines_.end() ? "" : ":" + std::to_string(it->second);
    return origin_ + line + ": [" + section + "] " + key;
}

std::string ConfigFile::get_string(const std::string &section, const std::string &key,
                                   const std::string &fallback) const {
    return get(section, key).value_or(fallback);
}

double ConfigFile::get_double(const std::string &section, const std::string &key, double fallback) const {
    const auto v = get(section, key);
    if (!v) {
        return fallback;
    }
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        throw UsageError(where(section, key) + ": expected a number, got '" + *v + "'");
    }
    return out;
}

int ConfigFile::get_int(const std::string &section, const std::string &key, int fallback) const {
    const auto v = get(section, key);
    if (!v) {
        return fallback;
    }
    int out = 0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        throw UsageError(where(section, key) + ": expected an integer, got '" + *v + "'");
    }
    return out;
}

std::uint64_t ConfigFile::get_u64(const std::string &section, const std::string &key, std::uint64_t fallback) const {
    const auto v = get(section, key);
    if (!v) {
        return fallback;
    }
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        throw UsageError(where(section, key) + ": expected an unsigned integer, got '" + *v + "'");
    }
    return out;
}

bool ConfigFile::get_bool(const std::string &section, const std::string &key, bool fallback) const {
    const auto v = get(section, key);
    if (!v) {
        return fallback;
    }
    if (*v == "true" || *v == "1" || *v == "yes") {
        return true;
    }
    if (*v == "false" || *v == "0" || *v == "no") {
        return false;
    }
    throw UsageError(where(section, key) + ": expected true or false, got '" + *v + "'");
}

void ConfigFile::reject_unknown() const {
    for (const auto &[sec, kv] : values_) {
        for (const auto &[key, value] : kv) {
            if (read_.count({sec, key}) == 0) {
                throw UsageError(where(sec, key) + ": unknown key");
            }
        }
    }
}

void RunConfig::set_seed(std::uint64_t s) {
    seed = s;
    pretrain.seed = derive_seed(s, {100});
    hypernet_train.seed = derive_seed(s, {101});
    finetune.seed = derive_seed(s, {102});
}

void RunConfig::validate() const {
    require(schedule.T >= 1, "schedule T must be >= 1");
    require(schedule.beta_min > 0.0 && schedule.beta_min <= schedule.beta_max && schedule.beta_max < 1.0,
            "schedule needs 0 < beta_min <= beta_max < 1");
    require(denoiser.hidden >= 1 && denoiser.mlp_hidden >= 1, "model widths must be positive");
    require(denoiser.vocab >= kFirstClassToken + corpus.num_classes, "vocab too small for the class count");
    require(corpus.num_classes >= 2 && corpus.num_classes <= kNumShapes,
            "corpus classes must lie in [2, " + std::to_string(kNumShapes) + "]");
    require(corpus.train_subjects >= 1 && corpus.heldout_subjects >= 0 && corpus.images_per_subject >= 1,
            "corpus sizes must be positive");
    require(hypernet.feature >= 1 && hypernet.rank >= 1 && hypernet.iterations >= 1, "hypernet sizes must be positive");
    require(finetune_rank >= 1, "finetune rank must be >= 1");
    require(eval_samples >= 1, "eval samples must be >= 1");
    pretrain.validate();
    hypernet_train.validate();
    finetune.validate();
    guidance.validate();
}

RunConfig run_config_from(const ConfigFile &cf, const std::filesystem::path &base_dir) {
    RunConfig c;

    auto resolve = [&](const std::string &p) {
        std::filesystem::path path(p);
        return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    };
    c.output_dir = resolve(cf.get_string("run", "output_dir", "."));
    if (const auto m = cf.get("run", "metrics")) {
        c.metrics_path = resolve(*m);
    }

    const std::string kind = cf.get_string("schedule", "kind", "linear");
    if (kind != "linear") {
        throw UsageError(cf.origin() + ": [schedule] kind must be linear");
    }
    c.schedule.T = cf.get_int("schedule", "T", c.schedule.T);
    c.schedule.beta_min = cf.get_double("schedule", "beta_min", c.schedule.beta_min);
    c.schedule.beta_max = cf.get_double("schedule", "beta_max", c.schedule.beta_max);

    c.denoiser.data_dim = kImageDim;
    c.denoiser.hidden = cf.get_int("model", "hidden", c.denoiser.hidden);
    c.denoiser.mlp_hidden = cf.get_int("model", "mlp_hidden", c.denoiser.mlp_hidden);
    c.denoiser.vocab = cf.get_int("model", "vocab", c.denoiser.vocab);
    c.denoiser.T = c.schedule.T;

    c.hypernet.image_dim = kImageDim;
    c.hypernet.feature = cf.get_int("hypernet", "feature", c.hypernet.feature);
    c.hypernet.rank = cf.get_int("hypernet", "rank", c.hypernet.rank);
    c.hypernet.iterations = cf.get_int("hypernet", "iterations", c.hypernet.iterations);
    c.hypernet.a_init_std = cf.get_double("hypernet", "a_init_std", c.hypernet.a_init_std);

    c.corpus.num_classes = cf.get_int("corpus", "classes", c.corpus.num_classes);
    c.corpus.train_subjects = cf.get_int("corpus", "train_subjects", c.corpus.train_subjects);
    c.corpus.heldout_subjects = cf.get_int("corpus", "heldout_subjects", c.corpus.heldout_subjects);
    c.corpus.images_per_subject = cf.get_int("corpus", "images_per_subject", c.corpus.images_per_subject);
    c.corpus.seed = cf.get_u64("corpus", "seed", c.corpus.seed);

    c.pretrain = read_train(cf, "pretrain", c.pretrain);
    c.hypernet_train = read_train(cf, "hypernet_train", c.hypernet_train);
    c.finetune = read_train(cf, "finetune", c.finetune);
    c.finetune_rank = cf.get_int("finetune", "rank", c.finetune_rank);
    for (TrainConfig *t : {&c.pretrain, &c.hypernet_train, &c.finetune}) {
        t->schedule = c.schedule;
    }

    c.guidance.mode = parse_mode(cf.get_string("guidance", "mode", std::string(mode_name(c.guidance.mode))));
    c.guidance.w = cf.get_double("guidance", "guidance_scale", c.guidance.w + 1.0) - 1.0;
    c.guidance.kappa = cf.get_double("guidance", "kappa", c.guidance.kappa);
    c.guidance.steps = cf.get_int("guidance", "steps", c.guidance.steps);

    c.metrics.num_classes = c.corpus.num_classes;
    c.metrics.features = cf.get_int("metrics", "features", c.metrics.features);
    c.metrics.center_per_class = cf.get_int("metrics", "center_per_class", c.metrics.center_per_class);
    c.metrics.seed = cf.get_u64("metrics", "seed", c.metrics.seed);
    c.metrics.probe.hidden = cf.get_int("metrics", "probe_hidden", c.metrics.probe.hidden);
    c.metrics.probe.steps = cf.get_int("metrics", "probe_steps", c.metrics.probe.steps);
    c.metrics.probe.batch = cf.get_int("metrics", "probe_batch", c.metrics.probe.batch);
    c.metrics.probe.lr = cf.get_double("metrics", "probe_lr", c.metrics.probe.lr);
    c.eval_samples = cf.get_int("eval", "samples", c.eval_samples);

    if (cf.has("run", "seed")) {
        c.set_seed(cf.get_u64("run", "seed", 0));
    }
    cf.reject_unknown();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path &path) {
    const ConfigFile cf = ConfigFile::load(path);
    return run_config_from(cf, path.parent_path());
}

std::string describe(const RunConfig &c) {
    std::ostringstream os;
    os << "[run]\n";
    if (c.seed) {
        os << "seed = " << *c.seed << '\n';
    }
    os << "\n[schedule]\nkind = linear\nT = " << c.schedule.T << "\nbeta_min = " << num(c.schedule.beta_min)
       << "\nbeta_max = " << num(c.schedule.beta_max) << '\n';
    os << "\n[model]\nhidden = " << c.denoiser.hidden << "\nmlp_hidden = " << c.denoiser.mlp_hidden
       << "\nvocab = " << c.denoiser.vocab << '\n';
    os << "\n[hypernet]\nfeature = " << c.hypernet.feature << "\nrank = " << c.hypernet.rank
       << "\niterations = " << c.hypernet.iterations << "\na_init_std = " << num(c.hypernet.a_init_std) << '\n';
    os << "\n[corpus]\nclasses = " << c.corpus.num_classes << "\ntrain_subjects = " << c.corpus.train_subjects
       << "\nheldout_subjects = " << c.corpus.heldout_subjects
       << "\nimages_per_subject = " << c.corpus.images_per_subject << "\nseed = " << c.corpus.seed << '\n';
    write_train(os, "pretrain", c.pretrain);
    write_train(os, "hypernet_train", c.hypernet_train);
    write_train(os, "finetune", c.finetune);
    os << "rank = " << c.finetune_rank << '\n';
    os << "\n[guidance]\nmode = " << mode_name(c.guidance.mode) << "\nguidance_scale = " << num(c.guidance.w + 1.0)
       << "\nkappa = " << num(c.guidance.kappa) << "\nsteps = " << c.guidance.steps << '\n';
    os << "\n[metrics]\nfeatures = " << c.metrics.features << "\ncenter_per_class = " << c.metrics.center_per_class
       << "\nseed = " << c.metrics.seed << "\nprobe_hidden = " << c.metrics.probe.hidden
       << "\nprobe_steps = " << c.metrics.probe.steps << "\nprobe_batch = " << c.metrics.probe.batch
       << "\nprobe_lr = " << num(c.metrics.probe.lr) << '\n';
    os << "\n[eval]\nsamples = " << c.eval_samples << '\n';
    return os.str();
}

} // namespace hld
