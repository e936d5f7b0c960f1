// hld: command-line driver for the toy personalization pipeline.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
// 4 corrupt or version-mismatched file.

#include "hld/checkpoint.hpp"
#include "hld/config.hpp"
#include "hld/guidance.hpp"
#include "hld/io.hpp"
#include "hld/metrics.hpp"
#include "hld/rng.hpp"
#include "hld/toy_data.hpp"
#include "hld/training.hpp"
#include "hld/verify.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace hld;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitFormat = 4;

std::uint64_t entropy_seed() {
    std::random_device rd;
    return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

// --seed wins, then the config file, then system entropy.
std::uint64_t resolve_seed(const std::optional<std::uint64_t> &flag, const std::optional<std::uint64_t> &config) {
    if (flag) {
        return *flag;
    }
    if (config) {
        return *config;
    }
    const std::uint64_t s = entropy_seed();
    std::cout << "seed: " << s << " (from system entropy)\n";
    return s;
}

RunConfig load_config(const std::string &path, const std::optional<std::uint64_t> &seed_flag) {
    RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
    cfg.set_seed(resolve_seed(seed_flag, cfg.seed));
    return cfg;
}

struct SubjectRef {
    std::string id;
    const SubjectData *data = nullptr;
};

// "train:<index>" or "heldout:<index>".
SubjectRef find_subject(const Corpus &corpus, const std::string &id) {
    const auto colon = id.find(':');
    require(colon != std::string::npos, "subject id must look like train:<index> or heldout:<index>, got '" + id + "'");
    const std::string split = id.substr(0, colon);
    int index = -1;
    try {
        std::size_t used = 0;
        index = std::stoi(id.substr(colon + 1), &used);
        require(used == id.size() - colon - 1, "");
    } catch (const std::exception &) {
        throw UsageError("subject id has a bad index: '" + id + "'");
    }
    const std::vector<SubjectData> *list = nullptr;
    if (split == "train") {
        list = &corpus.train;
    } else if (split == "heldout") {
        list = &corpus.heldout;
    } else {
        throw UsageError("subject split must be train or heldout, got '" + split + "'");
    }
    require(index >= 0 && index < static_cast<int>(list->size()),
            "subject index out of range: " + id + " (split has " + std::to_string(list->size()) + " subjects)");
    return {id, &(*list)[static_cast<std::size_t>(index)]};
}

std::string file_stem_for(const std::string &id) {
    std::string s = id;
    for (char &c : s) {
        if (c == ':') {
            c = '-';
        }
    }
    return s;
}

MetricSuite obtain_metrics(const fs::path &path, const MetricSuiteConfig &mc) {
    if (!path.empty() && fs::exists(path)) {
        return deserialize_metric_suite(io::read_file(path));
    }
    std::cout << "training metric probe...\n";
    const MetricSuite suite = make_metric_suite(mc);
    std::cout << "probe validation accuracy: " << suite.probe->val_accuracy << '\n';
    // Score with the stored (float32) weights so a fresh run matches later ones.
    const auto bytes = serialize_metric_suite(suite);
    if (!path.empty()) {
        io::write_file(path, bytes);
    }
    return deserialize_metric_suite(bytes);
}

fs::path lock_dir_for(const fs::path &file) {
    const fs::path parent = file.parent_path();
    return parent.empty() ? fs::path(".") : parent;
}

void print_loss_tail(const std::vector<TrainLogRecord> &log, const char *what) {
    if (log.empty()) {
        std::cout << what << ": no steps run\n";
        return;
    }
    const std::size_t n = std::min<std::size_t>(100, log.size());
    LossTerms mean;
    for (std::size_t i = log.size() - n; i < log.size(); ++i) {
        mean.loss_ft += log[i].terms.loss_ft / n;
        mean.loss_reg += log[i].terms.loss_reg / n;
        mean.sq_norm += log[i].terms.sq_norm / n;
        mean.total += log[i].terms.total / n;
    }
    std::cout << what << " final losses (mean of last " << n << " steps): total " << mean.total << ", ft "
              << mean.loss_ft << ", reg " << mean.loss_reg << ", sq_norm " << mean.sq_norm << '\n';
}

// ---------------------------------------------------------------------------

struct PretrainArgs {
    std::string config, out, log;
    std::optional<std::uint64_t> seed;
};

int cmd_pretrain(const PretrainArgs &a) {
    RunConfig cfg = load_config(a.config, a.seed);
    OutputLock lock(lock_dir_for(a.out));
    cfg.denoiser.T = cfg.schedule.T;
    const DenoiserParams init = init_denoiser(cfg.denoiser, derive_seed(*cfg.seed, {200}));
    PretrainResult res = pretrain_denoiser(cfg.corpus.num_classes, init, cfg.pretrain);
    Checkpoint ck;
    ck.schedule = cfg.schedule;
    ck.denoiser = std::move(res.params);
    ck.config_echo = describe(cfg);
    ck.seed = *cfg.seed;
    ck.rng_summary = "mt19937_64 streams derived from seed " + std::to_string(*cfg.seed) + " via splitmix64";
    save_checkpoint(a.out, ck);
    if (!a.log.empty()) {
        io::write_text(a.log, to_jsonl(res.log));
    }
    print_loss_tail(res.log, "pretrain");
    std::cout << "wrote " << a.out << '\n';
    return 0;
}

struct HypernetArgs {
    std::string config, base, out, log;
    std::optional<std::uint64_t> seed;
    std::optional<double> lambda;
};

int cmd_train_hypernet(const HypernetArgs &a) {
    RunConfig cfg = load_config(a.config, a.seed);
    if (a.lambda) {
        cfg.hypernet_train.lambda = *a.lambda;
        cfg.hypernet_train.validate();
    }
    const Checkpoint base = load_checkpoint(a.base);
    OutputLock lock(lock_dir_for(a.out));
    cfg.schedule = base.schedule;
    cfg.hypernet_train.schedule = base.schedule;
    const Corpus corpus = make_corpus(cfg.corpus);
    HypernetConfig hc = cfg.hypernet;
    hc.image_dim = kImageDim;
    hc.targets = base.denoiser.target_shapes();
    const HypernetParams init = init_hypernet(hc, derive_seed(*cfg.seed, {201}));
    HypernetTrainResult res = train_hypernet(corpus, base.denoiser, init, cfg.hypernet_train);

    Checkpoint ck;
    ck.schedule = base.schedule;
    ck.denoiser = base.denoiser;
    ck.hypernet = std::move(res.params);
    ck.config_echo = describe(cfg);
    ck.seed = *cfg.seed;
    ck.rng_summary = "mt19937_64 streams derived from seed " + std::to_string(*cfg.seed) + " via splitmix64";
    save_checkpoint(a.out, ck);
    const std::string log = a.log.empty() ? a.out + ".log.jsonl" : a.log;
    io::write_text(log, to_jsonl(res.log));
    print_loss_tail(res.log, "hypernet");
    std::cout << "wrote " << a.out << " and " << log << '\n';
    return 0;
}

struct FinetuneArgs {
    std::string config, base, subject, out_dir;
    int steps = -1;
    std::vector<int> marks;
    std::optional<std::uint64_t> seed;
};

int cmd_finetune(const FinetuneArgs &a) {
    RunConfig cfg = load_config(a.config, a.seed);
    const Checkpoint base = load_checkpoint(a.base);
    const Corpus corpus = make_corpus(cfg.corpus);
    const SubjectRef subj = find_subject(corpus, a.subject);
    const int steps = a.steps >= 0 ? a.steps : cfg.finetune.steps;
    std::vector<int> marks = a.marks.empty() ? std::vector<int>{steps} : a.marks;
    for (int m : marks) {
        require(m >= 0 && m <= steps, "snapshot mark " + std::to_string(m) + " outside [0, " + std::to_string(steps) + "]");
    }
    OutputLock lock(a.out_dir);
    cfg.finetune.schedule = base.schedule;
    std::vector<TrainLogRecord> log;
    const auto snaps = finetune_subject(subj.data->images, subj.data->spec.class_id, base.denoiser, steps, marks,
                                        cfg.finetune, cfg.finetune_rank,
                                        [&](const TrainLogRecord &r) { log.push_back(r); });
    const std::string stem = file_stem_for(subj.id);
    for (const auto &s : snaps) {
        const fs::path p = fs::path(a.out_dir) / (stem + "_step" + std::to_string(s.step) + ".hlra");
        io::write_file(p, serialize_adapters(s.adapters));
        std::cout << "wrote " << p.string() << '\n';
    }
    io::write_text(fs::path(a.out_dir) / (stem + ".log.jsonl"), to_jsonl(log));
    nlohmann::json meta = {{"subject", subj.id},
                           {"class_id", subj.data->spec.class_id},
                           {"steps", steps},
                           {"marks", marks},
                           {"seed", *cfg.seed}};
    io::write_text(fs::path(a.out_dir) / (stem + ".meta.json"), meta.dump(2) + "\n");
    print_loss_tail(log, "finetune");
    return 0;
}

struct SampleArgs {
    std::string checkpoint, adapters, out_dir, mode = "cfg";
    std::vector<std::string> exemplars;
    double guidance_scale = 7.5;
    double kappa = 1.0;
    int steps = 30;
    int n = 16;
    std::optional<int> cls, subject_class, generic_class;
    std::optional<std::uint64_t> seed;
};

int cmd_sample(const SampleArgs &a) {
    // Flag contract first: nothing is loaded or computed until these pass.
    GuidanceConfig g;
    g.mode = parse_mode(a.mode);
    g.w = a.guidance_scale - 1.0;
    g.kappa = a.kappa;
    g.steps = a.steps;
    g.validate();
    require(a.n >= 1, "-n must be >= 1");
    const bool has_adapters = !a.adapters.empty() || !a.exemplars.empty();
    require(a.adapters.empty() || a.exemplars.empty(), "use either --adapters or --exemplar, not both");
    if (g.mode == GuidanceMode::hmcfg) {
        require(has_adapters, "--mode hmcfg requires --adapters (or --exemplar)");
        require(a.subject_class.has_value() && a.generic_class.has_value(),
                "--mode hmcfg requires --subject-class and --generic-class");
    } else {
        require(a.subject_class.has_value() != a.cls.has_value(),
                "give exactly one of --class (generic prompt) or --subject-class ([V] prompt)");
    }
    const std::uint64_t seed = resolve_seed(a.seed, std::nullopt);

    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const int vocab = ck.denoiser.config.vocab;
    const PromptSpec pS = a.subject_class ? make_prompt(*a.subject_class, true, vocab) : make_prompt(*a.cls, false, vocab);
    const PromptSpec pG = a.generic_class ? make_prompt(*a.generic_class, false, vocab) : pS;

    std::optional<LoraAdapterSet> adapters;
    if (!a.adapters.empty()) {
        std::error_code ec;
        require(fs::is_regular_file(a.adapters, ec), "adapter file not found: " + a.adapters);
        adapters = deserialize_adapters(io::read_file(a.adapters));
    } else if (!a.exemplars.empty()) {
        if (!ck.hypernet) {
            throw UsageError("--exemplar needs a checkpoint that contains a hypernetwork");
        }
        std::vector<Vec> images;
        for (const auto &p : a.exemplars) {
            images.push_back(read_pgm(p));
        }
        adapters = predict(images, *ck.hypernet);
    }

    OutputLock lock(a.out_dir);
    const NoiseSchedule sched = make_schedule(ck.schedule);
    const Mat x = guided_sample(ck.denoiser, adapters ? &*adapters : nullptr, pS, pG, g, sched, a.n, seed);
    const Mat pixels = to_image(x);
    const std::uint32_t shape[] = {kImageSide, kImageSide};
    io::write_file(fs::path(a.out_dir) / "samples.hsmp", encode_samples(pixels, shape));
    for (Eigen::Index j = 0; j < pixels.cols(); ++j) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03d.pgm", static_cast<int>(j));
        write_pgm(fs::path(a.out_dir) / name, pixels.col(j));
    }
    nlohmann::json meta = {{"seed", seed},
                           {"mode", std::string(mode_name(g.mode))},
                           {"guidance_scale", g.guidance_scale()},
                           {"kappa", g.kappa},
                           {"steps", g.steps},
                           {"n", a.n},
                           {"prompt_subject", pS.tokens},
                           {"prompt_generic", pG.tokens}};
    io::write_text(fs::path(a.out_dir) / "meta.json", meta.dump(2) + "\n");
    std::cout << "wrote " << a.n << " samples to " << a.out_dir << '\n';
    return 0;
}

struct EvalArgs {
    std::string config, samples, subject, metrics, out;
    std::optional<int> cls;
    std::optional<std::uint64_t> seed;
};

int cmd_eval(const EvalArgs &a) {
    RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    std::error_code ec;
    require(fs::is_regular_file(a.samples, ec), "samples file not found: " + a.samples);
    std::vector<std::uint32_t> shape;
    const Mat samples = decode_samples(io::read_file(a.samples), &shape);
    const Corpus corpus = make_corpus(cfg.corpus);
    const SubjectRef subj = find_subject(corpus, a.subject);
    const int target = a.cls ? *a.cls : subj.data->spec.class_id;
    require(target >= 0 && target < cfg.corpus.num_classes, "--class out of range");
    const fs::path mpath = a.metrics.empty() ? cfg.metrics_path : fs::path(a.metrics);
    const MetricSuite suite = obtain_metrics(mpath, cfg.metrics);

    MetricEcho echo;
    const fs::path meta_path = fs::path(a.samples).parent_path() / "meta.json";
    if (fs::exists(meta_path)) {
        const auto bytes = io::read_file(meta_path);
        try {
            const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
            echo.seed = j.value("seed", std::uint64_t{0});
            echo.mode = j.value("mode", std::string("cfg"));
            echo.w = j.value("guidance_scale", 1.0) - 1.0;
            echo.kappa = j.value("kappa", 0.0);
            echo.steps = j.value("steps", 0);
        } catch (const nlohmann::json::exception &e) {
            throw FormatError("bad sample metadata " + meta_path.string() + ": " + e.what());
        }
    }
    if (a.seed) {
        echo.seed = *a.seed;
    }
    echo.lambda = cfg.hypernet_train.lambda;
    const MetricReport rep = evaluate(samples, subj.data->images, target, suite, echo);
    const std::string text = rep.to_text();
    if (a.out.empty()) {
        std::cout << text;
    } else {
        io::write_text(a.out, text);
        std::cout << "subject_fidelity: " << rep.subject_fidelity << "\nprompt_fidelity: " << rep.prompt_fidelity
                  << "\nwrote " << a.out << '\n';
    }
    return 0;
}

struct SweepArgs {
    std::string config, checkpoint, adapters, subject, metrics, out;
    std::vector<double> kappas{0.4, 0.8, 1.0, 1.2, 1.6};
    std::optional<int> target_class;
    double guidance_scale = 2.0;
    int steps = 30;
    int n = 32;
    std::optional<std::uint64_t> seed;
};

int cmd_sweep(const SweepArgs &a) {
    GuidanceConfig g;
    g.mode = GuidanceMode::hmcfg;
    g.w = a.guidance_scale - 1.0;
    g.steps = a.steps;
    g.validate();
    for (double k : a.kappas) {
        require(k >= 0.0 && k <= 2.0, "kappa out of [0,2]");
    }
    require(a.n >= 1, "-n must be >= 1");
    RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    const std::uint64_t seed = resolve_seed(a.seed, std::nullopt);
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    std::error_code ec;
    require(fs::is_regular_file(a.adapters, ec), "adapter file not found: " + a.adapters);
    const LoraAdapterSet adapters = deserialize_adapters(io::read_file(a.adapters));
    const Corpus corpus = make_corpus(cfg.corpus);
    const SubjectRef subj = find_subject(corpus, a.subject);
    const int target = a.target_class ? *a.target_class : recontext_class(subj.data->spec.class_id, cfg.corpus.num_classes);
    const fs::path mpath = a.metrics.empty() ? cfg.metrics_path : fs::path(a.metrics);
    const MetricSuite suite = obtain_metrics(mpath, cfg.metrics);
    const NoiseSchedule sched = make_schedule(ck.schedule);

    const int vocab = ck.denoiser.config.vocab;
    SweepSystem sys{&ck.denoiser, &adapters, &sched, &suite, subj.data->images};
    SweepPrompts prompts{make_prompt(target, true, vocab), make_prompt(target, false, vocab), target};
    const auto rows = kappa_sweep(sys, a.kappas, prompts, g, a.n, seed);
    const std::string table = sweep_csv(rows);
    if (a.out.empty()) {
        std::cout << table;
    } else {
        OutputLock lock(lock_dir_for(a.out));
        io::write_text(a.out, table);
        nlohmann::json meta = {{"seed", seed},        {"subject", subj.id},   {"target_class", target},
                               {"guidance_scale", a.guidance_scale}, {"steps", a.steps}, {"n", a.n}};
        io::write_text(a.out + ".meta.json", meta.dump(2) + "\n");
        std::cout << table << "wrote " << a.out << '\n';
    }
    std::vector<double> k, s, p;
    for (const auto &r : rows) {
        k.push_back(r.kappa);
        s.push_back(r.subject_fidelity);
        p.push_back(r.prompt_fidelity);
    }
    if (rows.size() >= 2) {
        std::cout << "spearman(kappa, subject_fidelity) = " << spearman(k, s)
                  << "\nspearman(kappa, prompt_fidelity) = " << spearman(k, p) << '\n';
    }
    return 0;
}

struct OracleArgs {
    std::optional<std::uint64_t> seed;
    int chains = 10000;
};

int cmd_oracle_verify(const OracleArgs &a) {
    require(a.chains >= 100, "--chains must be >= 100");
    OracleSuiteOptions opt;
    opt.seed = resolve_seed(a.seed, std::nullopt);
    opt.chains = a.chains;
    bool all = true;
    for (const auto &r : run_oracle_suite(opt)) {
        std::cout << (r.passed ? "PASS  " : "FAIL  ") << r.name << "  [" << r.detail << "]\n";
        all = all && r.passed;
    }
    std::cout << (all ? "all oracle checks passed\n" : "oracle checks FAILED\n");
    return all ? 0 : kExitNumerical;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Toy hypernetwork personalization for diffusion models"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "hld 0.1.0");

    PretrainArgs pre;
    auto *c_pre = app.add_subcommand("pretrain", "Train the base denoiser on generic class images");
    c_pre->add_option("--config", pre.config, "Run configuration file")->required();
    c_pre->add_option("--out", pre.out, "Checkpoint to write")->required();
    c_pre->add_option("--log", pre.log, "Optional JSON-lines training log");
    c_pre->add_option("--seed", pre.seed, "Root seed (default: config, then system entropy)");

    HypernetArgs hyp;
    auto *c_hyp = app.add_subcommand("train-hypernet", "Train the hypernetwork against a frozen base model");
    c_hyp->add_option("--config", hyp.config, "Run configuration file")->required();
    c_hyp->add_option("--base", hyp.base, "Base checkpoint")->required();
    c_hyp->add_option("--out", hyp.out, "Checkpoint to write")->required();
    c_hyp->add_option("--log", hyp.log, "Training log (default: <out>.log.jsonl)");
    c_hyp->add_option("--lambda", hyp.lambda, "Override the output-norm weight");
    c_hyp->add_option("--seed", hyp.seed, "Root seed");

    FinetuneArgs ft;
    auto *c_ft = app.add_subcommand("finetune", "Fit LoRA factors to one subject, saving snapshots");
    c_ft->add_option("--config", ft.config, "Run configuration file")->required();
    c_ft->add_option("--base", ft.base, "Base checkpoint")->required();
    c_ft->add_option("--subject", ft.subject, "Subject id, e.g. heldout:0")->required();
    c_ft->add_option("--steps", ft.steps, "Optimization steps (default: config)");
    c_ft->add_option("--marks", ft.marks, "Snapshot steps, comma separated")->delimiter(',');
    c_ft->add_option("--out-dir", ft.out_dir, "Directory for adapter files")->required();
    c_ft->add_option("--seed", ft.seed, "Root seed");

    SampleArgs smp;
    auto *c_smp = app.add_subcommand("sample", "Draw guided samples");
    c_smp->add_option("--checkpoint", smp.checkpoint, "Checkpoint with the base denoiser")->required();
    c_smp->add_option("--adapters", smp.adapters, "LoRA adapter file (HLRA)");
    c_smp->add_option("--exemplar", smp.exemplars, "Subject image (PGM) for the checkpoint's hypernetwork");
    c_smp->add_option("--mode", smp.mode, "none, cfg, or hmcfg")->capture_default_str();
    c_smp->add_option("--guidance-scale", smp.guidance_scale, "Guidance scale w + 1")->capture_default_str();
    c_smp->add_option("--kappa", smp.kappa, "hmcfg trade-off in [0,2]")->capture_default_str();
    c_smp->add_option("--steps", smp.steps, "Sampler steps")->capture_default_str();
    c_smp->add_option("-n", smp.n, "Number of samples")->capture_default_str();
    c_smp->add_option("--class", smp.cls, "Generic class prompt");
    c_smp->add_option("--subject-class", smp.subject_class, "Class for the [V] subject prompt c_S");
    c_smp->add_option("--generic-class", smp.generic_class, "Class for the generic prompt c_G");
    c_smp->add_option("--out-dir", smp.out_dir, "Output directory")->required();
    c_smp->add_option("--seed", smp.seed, "Sampling seed");

    EvalArgs ev;
    auto *c_ev = app.add_subcommand("eval", "Score samples against a subject");
    c_ev->add_option("--config", ev.config, "Run configuration file (corpus and metric settings)");
    c_ev->add_option("--samples", ev.samples, "HSMP sample file")->required();
    c_ev->add_option("--subject", ev.subject, "Reference subject id")->required();
    c_ev->add_option("--class", ev.cls, "Class the prompt asked for (default: the subject's class)");
    c_ev->add_option("--metrics", ev.metrics, "Metric suite file; created when missing");
    c_ev->add_option("--out", ev.out, "Report file (default: stdout)");
    c_ev->add_option("--seed", ev.seed, "Seed to record in the report");

    SweepArgs sw;
    auto *c_sw = app.add_subcommand("sweep", "hmcfg kappa sweep for one subject");
    c_sw->add_option("--config", sw.config, "Run configuration file");
    c_sw->add_option("--checkpoint", sw.checkpoint, "Base checkpoint")->required();
    c_sw->add_option("--adapters", sw.adapters, "Subject adapter file")->required();
    c_sw->add_option("--subject", sw.subject, "Subject id")->required();
    c_sw->add_option("--kappas", sw.kappas, "Kappa values, comma separated")->delimiter(',')->capture_default_str();
    c_sw->add_option("--target-class", sw.target_class, "Prompted class (default: next class after the subject's)");
    c_sw->add_option("--guidance-scale", sw.guidance_scale, "Guidance scale w + 1")->capture_default_str();
    c_sw->add_option("--steps", sw.steps, "Sampler steps")->capture_default_str();
    c_sw->add_option("-n", sw.n, "Samples per kappa")->capture_default_str();
    c_sw->add_option("--metrics", sw.metrics, "Metric suite file; created when missing");
    c_sw->add_option("--out", sw.out, "CSV output (default: stdout)");
    c_sw->add_option("--seed", sw.seed, "Sampling seed");

    OracleArgs orc;
    auto *c_orc = app.add_subcommand("oracle-verify", "Check guidance algebra and sampler against Gaussian oracles");
    c_orc->add_option("--seed", orc.seed, "Seed for random draws");
    c_orc->add_option("--chains", orc.chains, "Chains for the sampler moment check")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*c_pre) {
            return cmd_pretrain(pre);
        }
        if (*c_hyp) {
            return cmd_train_hypernet(hyp);
        }
        if (*c_ft) {
            return cmd_finetune(ft);
        }
        if (*c_smp) {
            return cmd_sample(smp);
        }
        if (*c_ev) {
            return cmd_eval(ev);
        }
        if (*c_sw) {
            return cmd_sweep(sw);
        }
        if (*c_orc) {
            return cmd_oracle_verify(orc);
        }
    } catch (const UsageError &e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericalError &e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const FormatError &e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kExitFormat;
    } catch (const fs::filesystem_error &e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}
