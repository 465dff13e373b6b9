// eksft: command-line driver for the fine-tuning pipeline.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
// Config precedence: built-in defaults < --config JSON < explicit flags.
// Relative output paths are resolved under $EKSFT_RUN_ROOT when it is set.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "eksft.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace eksft;

namespace {

constexpr const char* kVersion = "0.1.0";

fs::path resolve_out(const std::string& p) {
    fs::path path(p);
    if (path.is_relative()) {
        if (const char* root = std::getenv("EKSFT_RUN_ROOT"); root != nullptr && *root) {
            return fs::path(root) / path;
        }
    }
    return path;
}

void require_exists(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) {
        throw ConfigError(what + " not found: " + p.string());
    }
}

void require_checkpoint(const std::string& stem) {
    require_exists(manifest_path(stem), "checkpoint");
}

void prepare_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
        throw ConfigError(dir.string() + " already exists and is not empty; pass --force to overwrite");
    }
    fs::create_directories(dir);
}

json read_json(const std::string& path) {
    require_exists(path, "config file");
    std::ifstream in(path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + path + ": " + e.what());
    }
}

void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

json dataset_hashes(const fs::path& dir) {
    json h = json::object();
    for (const auto& name : split_names()) {
        const auto file = dir / (name + ".jsonl");
        if (fs::exists(file)) {
            h[name] = git_blob_hash(read_file(file));
        }
    }
    return h;
}

json base_manifest(const std::string& command, const json& config) {
    return {{"command", command}, {"tool_version", kVersion}, {"config", config}};
}

// Wall-clock time is kept out of metrics.csv so that file is byte-stable.
void write_timing(const fs::path& dir, std::chrono::steady_clock::time_point start) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_json(dir / "timing.json", {{"wall_seconds", secs}});
}

std::vector<std::size_t> parse_ks(const std::string& s) {
    std::vector<std::size_t> ks;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const long v = std::stol(item, &used);
            if (used != item.size() || v < 1) {
                throw std::invalid_argument(item);
            }
            ks.push_back(static_cast<std::size_t>(v));
        } catch (const std::logic_error&) {
            throw ConfigError("bad k value '" + item + "' in --ks");
        }
    }
    if (ks.empty()) {
        throw ConfigError("--ks is empty");
    }
    return ks;
}

std::vector<double> parse_doubles(const std::string& s, const std::string& flag) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) {
                throw std::invalid_argument(item);
            }
        } catch (const std::logic_error&) {
            throw ConfigError("bad value '" + item + "' in " + flag);
        }
    }
    return out;
}

template <typename T>
void apply(T& target, const std::optional<T>& flag) {
    if (flag) {
        target = *flag;
    }
}

struct SftFlags {
    std::optional<std::string> method;
    std::optional<double> lr, rho, lambda_h, lambda_kl, drop_fraction, weight_decay;
    std::optional<std::size_t> epochs, grad_accum, batch_size;
    std::optional<std::uint64_t> seed;

    void add(CLI::App* app, bool with_method) {
        if (with_method) {
            app->add_option("--method", method, "sft|eksft|dft|random_mask|global_reg");
        }
        app->add_option("--lr", lr, "learning rate");
        app->add_option("--epochs", epochs, "epochs");
        app->add_option("--grad-accum", grad_accum, "micro-batches per optimizer step");
        app->add_option("--batch-size", batch_size, "sequences per micro-batch");
        app->add_option("--rho", rho, "Top-K ratio");
        app->add_option("--lambda-h", lambda_h, "entropy regularization weight");
        app->add_option("--lambda-kl", lambda_kl, "KL regularization weight");
        app->add_option("--drop-fraction", drop_fraction, "random_mask drop fraction");
        app->add_option("--weight-decay", weight_decay, "AdamW weight decay");
        app->add_option("--seed", seed, "training seed");
    }

    void apply_to(SftConfig& c) const {
        if (method) {
            c.method = parse_sft_method(*method);
        }
        apply(c.learning_rate, lr);
        apply(c.epochs, epochs);
        apply(c.grad_accum, grad_accum);
        apply(c.batch_size, batch_size);
        apply(c.rho, rho);
        apply(c.lambda_h, lambda_h);
        apply(c.lambda_kl, lambda_kl);
        apply(c.drop_fraction, drop_fraction);
        apply(c.weight_decay, weight_decay);
        apply(c.seed, seed);
    }
};

// ---- gen-data -------------------------------------------------------------

struct GenDataArgs {
    std::string spec;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
    TaskSpec spec;
    if (!a.spec.empty()) {
        spec = read_json(a.spec).get<TaskSpec>();
    }
    apply(spec.seed, a.seed);
    const fs::path out = resolve_out(a.out);
    prepare_dir(out, a.force);
    const auto ds = generate_dataset(spec);
    const auto hashes = write_dataset(ds, out);
    write_json(out / "spec.json", spec);
    json summary = {{"spec", spec}, {"hashes", hashes},
                    {"sizes",
                     {{"pretrain", ds.pretrain.size()},
                      {"sft", ds.sft.size()},
                      {"rl_prompts", ds.rl_prompts.size()},
                      {"eval", ds.eval.size()}}}};
    write_json(out / "manifest.json", summary);
    std::cout << std::left << std::setw(12) << "split" << std::setw(8) << "size" << "hash\n";
    const std::size_t sizes[] = {ds.pretrain.size(), ds.sft.size(), ds.rl_prompts.size(),
                                 ds.eval.size()};
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& n = split_names()[i];
        std::cout << std::setw(12) << n << std::setw(8) << sizes[i] << hashes.at(n) << "\n";
    }
    return 0;
}

// ---- pretrain / train-sft -------------------------------------------------

struct SftArgs {
    std::string config;
    std::string data;
    std::string init;
    std::string out;
    std::optional<std::string> split;
    bool force = false;
    bool mask_dump = false;
    SftFlags flags;
    std::optional<std::size_t> d_model, n_layers, n_heads, context_len;
    std::optional<std::uint64_t> model_seed;
};

int run_sft(const SftArgs& a, bool pretrain) {
    const auto start = std::chrono::steady_clock::now();
    json file = a.config.empty() ? json::object() : read_json(a.config);
    SftConfig cfg = file.contains("sft") ? file.at("sft").get<SftConfig>() : SftConfig{};
    if (pretrain) {
        cfg.method = SftMethod::sft;
    }
    a.flags.apply_to(cfg);
    if (pretrain && cfg.method != SftMethod::sft) {
        throw ConfigError("pretrain always uses method sft");
    }
    cfg.validate();
    std::string data = !a.data.empty() ? a.data : file.value("data", std::string{});
    std::string split = file.value("split", std::string(pretrain ? "pretrain" : "sft"));
    apply(split, a.split);
    if (data.empty()) {
        throw ConfigError("--data is required");
    }
    const fs::path split_file = fs::path(data) / (split + ".jsonl");
    require_exists(split_file, "dataset split");

    ParameterSet init;
    std::string init_ref = !a.init.empty() ? a.init : file.value("init", std::string{});
    ModelConfig mc;
    if (pretrain) {
        if (file.contains("model")) {
            mc = file.at("model").get<ModelConfig>();
        }
        apply(mc.d_model, a.d_model);
        apply(mc.n_layers, a.n_layers);
        apply(mc.n_heads, a.n_heads);
        apply(mc.context_len, a.context_len);
        apply(mc.seed, a.model_seed);
        mc.validate();
        init = init_parameters(mc);
    } else {
        if (init_ref.empty()) {
            throw ConfigError("--init <checkpoint> is required");
        }
        require_checkpoint(init_ref);
        init = load_checkpoint(init_ref);
        mc = init.config();
    }
    const auto samples = load_jsonl(split_file);
    check_fits_context(samples, mc.context_len, split);

    const fs::path out = resolve_out(a.out);
    prepare_dir(out, a.force);
    fs::create_directories(out / "checkpoints");
    fs::create_directories(out / "reports");

    json resolved = {{"command", pretrain ? "pretrain" : "train-sft"},
                     {"data", data},
                     {"split", split},
                     {"sft", cfg}};
    if (pretrain) {
        resolved["model"] = mc;
    } else {
        resolved["init"] = init_ref;
    }
    write_json(out / "config.json", resolved);
    json manifest = base_manifest(pretrain ? "pretrain" : "train-sft", resolved);
    manifest["seeds"] = {{"train", cfg.seed}, {"model", mc.seed}};
    manifest["dataset_hashes"] = dataset_hashes(data);
    manifest["metrics_columns"] = sft_metrics_header().substr(0, sft_metrics_header().size() - 1);
    manifest["init_config_hash"] = hex64(init.config_hash());
    write_json(out / "manifest.json", manifest);

    const auto reference = snapshot_reference(init);
    if (pretrain) {
        save_checkpoint(init, out / "checkpoints" / "init", {mc.seed, out.filename().string()});
    }
    std::ofstream dump;
    SftHooks hooks;
    if (a.mask_dump) {
        dump.open(out / "reports" / "mask_dump.jsonl", std::ios::trunc);
        hooks.mask_dump = &dump;
    }
    std::ofstream metrics(out / "metrics.csv", std::ios::trunc);
    metrics << sft_metrics_header();
    hooks.on_step = [&](const SftMetrics& m) {
        metrics << to_csv_row(m);
        metrics.flush();
    };
    const auto result = train_sft(init, reference, samples, cfg, hooks);
    save_checkpoint(result.params, out / "checkpoints" / "final",
                    {cfg.seed, out.filename().string()});
    write_timing(out, start);

    const auto& last = result.metrics.back();
    std::cout << "steps " << result.metrics.size() << "  final loss " << format_double(last.loss)
              << "  mean entropy " << format_double(last.mean_entropy) << "  mean KL "
              << format_double(last.mean_kl) << "\n"
              << "checkpoint " << (out / "checkpoints" / "final").string() << "\n";
    return 0;
}

// ---- train-rl -------------------------------------------------------------

struct RlArgs {
    std::string config;
    std::string data;
    std::string init;
    std::string out;
    bool force = false;
    std::optional<double> lr, clip_low, clip_high, temperature;
    std::optional<std::size_t> steps, group_size, prompts_per_step, minibatches, max_gen_len;
    std::optional<std::uint64_t> seed;
};

int cmd_train_rl(const RlArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    json file = a.config.empty() ? json::object() : read_json(a.config);
    RlConfig cfg = file.contains("rl") ? file.at("rl").get<RlConfig>() : RlConfig{};
    apply(cfg.learning_rate, a.lr);
    apply(cfg.clip_low, a.clip_low);
    apply(cfg.clip_high, a.clip_high);
    apply(cfg.temperature, a.temperature);
    apply(cfg.total_steps, a.steps);
    apply(cfg.rollout_group_size, a.group_size);
    apply(cfg.prompts_per_step, a.prompts_per_step);
    apply(cfg.minibatches, a.minibatches);
    apply(cfg.max_gen_len, a.max_gen_len);
    apply(cfg.seed, a.seed);
    cfg.validate();
    const std::string data = !a.data.empty() ? a.data : file.value("data", std::string{});
    const std::string init_ref = !a.init.empty() ? a.init : file.value("init", std::string{});
    if (data.empty() || init_ref.empty()) {
        throw ConfigError("--data and --init are required");
    }
    const fs::path split_file = fs::path(data) / "rl_prompts.jsonl";
    require_exists(split_file, "dataset split");
    require_checkpoint(init_ref);
    const auto init = load_checkpoint(init_ref);
    const auto prompts = load_jsonl(split_file);

    const fs::path out = resolve_out(a.out);
    prepare_dir(out, a.force);
    fs::create_directories(out / "checkpoints");
    fs::create_directories(out / "reports");
    const json resolved = {{"command", "train-rl"}, {"data", data}, {"init", init_ref}, {"rl", cfg}};
    write_json(out / "config.json", resolved);
    json manifest = base_manifest("train-rl", resolved);
    manifest["seeds"] = {{"train", cfg.seed}};
    manifest["dataset_hashes"] = dataset_hashes(data);
    manifest["metrics_columns"] = rl_metrics_header().substr(0, rl_metrics_header().size() - 1);
    manifest["init_config_hash"] = hex64(init.config_hash());
    write_json(out / "manifest.json", manifest);

    std::ofstream metrics(out / "metrics.csv", std::ios::trunc);
    metrics << rl_metrics_header();
    RlHooks hooks;
    hooks.on_step = [&](const RlMetrics& m) {
        metrics << to_csv_row(m);
        metrics.flush();
    };
    const auto result = train_rl(init, prompts, cfg, verify, hooks);
    save_checkpoint(result.params, out / "checkpoints" / "final",
                    {cfg.seed, out.filename().string()});
    write_timing(out, start);
    std::cout << "steps " << result.metrics.size() << "  first reward "
              << format_double(result.metrics.front().mean_reward) << "  final reward "
              << format_double(result.metrics.back().mean_reward) << "\n"
              << "checkpoint " << (out / "checkpoints" / "final").string() << "\n";
    return 0;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
    std::string ckpt;
    std::string data;
    std::string split = "eval";
    std::string out;
    std::size_t n = 32;
    std::string ks = "1,4,8,16,32";
    double temperature = 1.0;
    std::size_t max_len = 64;
    std::uint64_t seed = 0;
    bool force = false;
};

int cmd_eval(const EvalArgs& a) {
    require_checkpoint(a.ckpt);
    const fs::path split_file = fs::path(a.data) / (a.split + ".jsonl");
    require_exists(split_file, "dataset split");
    EvalOptions opt{a.n, parse_ks(a.ks), a.temperature, a.max_len, a.seed};
    const auto params = load_checkpoint(a.ckpt);
    const auto samples = load_jsonl(split_file);
    const fs::path out = resolve_out(a.out);
    prepare_dir(out, a.force);
    const json resolved = {{"command", "eval"},       {"ckpt", a.ckpt},
                           {"data", a.data},          {"split", a.split},
                           {"n", a.n},                {"ks", opt.ks},
                           {"temperature", a.temperature}, {"max_len", a.max_len},
                           {"seed", a.seed}};
    write_json(out / "config.json", resolved);
    const auto rep = evaluate(params, samples, opt);
    write_json(out / "eval_report.json", to_json(rep));
    write_file(out / "eval.csv", eval_csv_header() + eval_csv_rows(rep, a.ckpt));
    std::cout << std::left << std::setw(6) << "k" << "pass@k\n";
    for (const auto& [k, v] : rep.pass_at) {
        std::cout << std::setw(6) << k << std::fixed << std::setprecision(4) << v << "\n";
    }
    std::cout << "avg@" << a.n << " " << std::setprecision(4) << rep.avg_at_n
              << "  mean response entropy " << rep.mean_response_entropy << "\n";
    return 0;
}

// ---- analyze --------------------------------------------------------------

struct AnalyzeArgs {
    std::string before, after, thresholds = "0.001,0.01,0.1";
    std::string dump;
    std::vector<std::string> csvs;
    std::string out;
    bool force = false;
    // sweep
    std::string config, data, init, rhos = "0,0.1,0.2,0.3,0.4", ks = "1,4,8,16,32";
    std::size_t n = 32;
    std::uint64_t eval_seed = 0;
    SftFlags flags;
};

int cmd_drift(const AnalyzeArgs& a) {
    require_checkpoint(a.before);
    require_checkpoint(a.after);
    const auto rep = parameter_drift(load_checkpoint(a.before), load_checkpoint(a.after),
                                     parse_doubles(a.thresholds, "--thresholds"));
    const fs::path out = resolve_out(a.out);
    prepare_dir(out, a.force);
    write_file(out / "drift.csv", to_csv(rep));
    std::cout << std::left << std::setw(12) << "threshold" << "fraction\n";
    for (std::size_t t = 0; t < rep.thresholds.size(); ++t) {
        std::cout << std::setw(12) << format_double(rep.thresholds[t])
                  << format_double(rep.global.fraction_exceeding[t]) << "\n";
    }
    std::cout << "mean relative change " << format_double(rep.global.mean_relative_change) << "\n";
    return 0;
}

int cmd_iou(const AnalyzeArgs& a) {
    require_exists(a.dump, "mask dump");
    const auto series = iou_series(read_file(a.dump));
    const fs::path out = resolve_out(a.out);
    prepare_dir(out, a.force);
    write_file(out / "iou_series.csv", to_csv(series));
    write_file(out / "iou_summary.csv", iou_summary_csv(series));
    std::cout << iou_summary_csv(series);
    if (series.malformed_lines > 0) {
        std::cout << "skipped " << series.malformed_lines << " malformed line(s)\n";
    }
    return 0;
}

int cmd_sweep(const AnalyzeArgs& a) {
    json file = a.config.empty() ? json::object() : read_json(a.config);
    SftConfig cfg = file.contains("sft") ? file.at("sft").get<SftConfig>() : SftConfig{};
    a.flags.apply_to(cfg);
    cfg.method = SftMethod::eksft;
    const std::string data = !a.data.empty() ? a.data : file.value("data", std::string{});
    const std::string init_ref = !a.init.empty() ? a.init : file.value("init", std::string{});
    if (data.empty() || init_ref.empty()) {
        throw ConfigError("--data and --init are required");
    }
    require_checkpoint(init_ref);
    require_exists(fs::path(data) / "sft.jsonl", "dataset split");
    require_exists(fs::path(data) / "eval.jsonl", "dataset split");
    const auto rhos = parse_doubles(a.rhos, "--rhos");
    for (double r : rhos) {
        require_ratio(r);
    }
    cfg.validate();
    const auto base = load_checkpoint(init_ref);
    const auto train = load_jsonl(fs::path(data) / "sft.jsonl");
    const auto eval = load_jsonl(fs::path(data) / "eval.jsonl");
    EvalOptions opt{a.n, parse_ks(a.ks), 1.0, 64, a.eval_seed};
    const fs::path out = resolve_out(a.out);
    prepare_dir(out, a.force);
    write_json(out / "config.json", {{"command", "analyze sweep"},
                                     {"data", data},
                                     {"init", init_ref},
                                     {"sft", cfg},
                                     {"rhos", rhos},
                                     {"n", a.n},
                                     {"ks", opt.ks},
                                     {"eval_seed", a.eval_seed}});
    const std::size_t kmax = *std::max_element(opt.ks.begin(), opt.ks.end());
    std::ofstream csv(out / "sweep.csv", std::ios::trunc);
    csv << sweep_header(kmax);
    csv.flush();
    std::cout << sweep_header(kmax);
    ratio_sweep(cfg, rhos, {&base, train, eval, opt}, [&](const SweepRow& r) {
        csv << to_csv_row(r);
        csv.flush();
        std::cout << to_csv_row(r) << std::flush;
    });
    return 0;
}

int cmd_plots(const AnalyzeArgs& a) {
    if (a.csvs.empty()) {
        throw ConfigError("at least one --csv is required");
    }
    std::vector<std::pair<std::string, CsvTable>> tables;
    for (const auto& p : a.csvs) {
        require_exists(p, "CSV");
        std::string name = fs::path(p).parent_path().filename().string();
        if (name.empty()) {
            name = fs::path(p).stem().string();
        }
        tables.emplace_back(name, read_csv(p));
    }
    const auto plots = export_plots(tables);
    const fs::path out = resolve_out(a.out);
    prepare_dir(out, a.force);
    for (const auto& pf : plots) {
        write_file(out / pf.file, pf.svg);
        std::cout << (out / pf.file).string() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EKSFT desk-scale pipeline"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "generate the four dataset splits");
    gen_cmd->add_option("--spec", gen.spec, "task spec JSON");
    gen_cmd->add_option("--out", gen.out, "output directory")->required();
    gen_cmd->add_option("--seed", gen.seed, "override the spec seed");
    gen_cmd->add_flag("--force", gen.force, "overwrite an existing directory");

    SftArgs pre;
    auto* pre_cmd = app.add_subcommand("pretrain", "train the base model from scratch");
    pre_cmd->add_option("--config", pre.config, "config JSON");
    pre_cmd->add_option("--data", pre.data, "dataset directory");
    pre_cmd->add_option("--split", pre.split, "split to train on (default pretrain)");
    pre_cmd->add_option("--out", pre.out, "run directory")->required();
    pre_cmd->add_option("--d-model", pre.d_model, "model width");
    pre_cmd->add_option("--n-layers", pre.n_layers, "layers");
    pre_cmd->add_option("--n-heads", pre.n_heads, "attention heads");
    pre_cmd->add_option("--context-len", pre.context_len, "context length");
    pre_cmd->add_option("--model-seed", pre.model_seed, "initialization seed");
    pre_cmd->add_flag("--force", pre.force, "overwrite an existing run directory");
    pre.flags.add(pre_cmd, false);

    SftArgs sft;
    auto* sft_cmd = app.add_subcommand("train-sft", "supervised fine-tuning");
    sft_cmd->add_option("--config", sft.config, "config JSON");
    sft_cmd->add_option("--data", sft.data, "dataset directory");
    sft_cmd->add_option("--split", sft.split, "split to train on (default sft)");
    sft_cmd->add_option("--init", sft.init, "initial checkpoint stem");
    sft_cmd->add_option("--out", sft.out, "run directory")->required();
    sft_cmd->add_flag("--mask-dump", sft.mask_dump, "write reports/mask_dump.jsonl");
    sft_cmd->add_flag("--force", sft.force, "overwrite an existing run directory");
    sft.flags.add(sft_cmd, true);

    RlArgs rl;
    auto* rl_cmd = app.add_subcommand("train-rl", "clipped group-rollout RL stage");
    rl_cmd->add_option("--config", rl.config, "config JSON");
    rl_cmd->add_option("--data", rl.data, "dataset directory");
    rl_cmd->add_option("--init", rl.init, "initial checkpoint stem");
    rl_cmd->add_option("--out", rl.out, "run directory")->required();
    rl_cmd->add_option("--lr", rl.lr, "learning rate");
    rl_cmd->add_option("--steps", rl.steps, "total steps");
    rl_cmd->add_option("--group-size", rl.group_size, "rollouts per prompt");
    rl_cmd->add_option("--prompts-per-step", rl.prompts_per_step, "prompts per step");
    rl_cmd->add_option("--minibatches", rl.minibatches, "updates per step");
    rl_cmd->add_option("--clip-low", rl.clip_low, "lower clip c_l");
    rl_cmd->add_option("--clip-high", rl.clip_high, "upper clip c_h");
    rl_cmd->add_option("--temperature", rl.temperature, "sampling temperature");
    rl_cmd->add_option("--max-gen-len", rl.max_gen_len, "generated tokens per rollout");
    rl_cmd->add_option("--seed", rl.seed, "seed");
    rl_cmd->add_flag("--force", rl.force, "overwrite an existing run directory");

    EvalArgs ev;
    auto* ev_cmd = app.add_subcommand("eval", "sample and report pass@k");
    ev_cmd->add_option("--ckpt", ev.ckpt, "checkpoint stem")->required();
    ev_cmd->add_option("--data", ev.data, "dataset directory")->required();
    ev_cmd->add_option("--split", ev.split, "split (default eval)");
    ev_cmd->add_option("--out", ev.out, "report directory")->required();
    ev_cmd->add_option("--n", ev.n, "samples per prompt");
    ev_cmd->add_option("--ks", ev.ks, "comma-separated k values");
    ev_cmd->add_option("--temperature", ev.temperature, "sampling temperature");
    ev_cmd->add_option("--max-len", ev.max_len, "generated tokens per sample");
    ev_cmd->add_option("--seed", ev.seed, "sampling seed");
    ev_cmd->add_flag("--force", ev.force, "overwrite an existing directory");

    AnalyzeArgs an;
    auto* an_cmd = app.add_subcommand("analyze", "post-hoc analyzers");
    an_cmd->require_subcommand(1);
    auto* drift_cmd = an_cmd->add_subcommand("drift", "parameter drift between checkpoints");
    drift_cmd->add_option("--before", an.before, "checkpoint stem")->required();
    drift_cmd->add_option("--after", an.after, "checkpoint stem")->required();
    drift_cmd->add_option("--thresholds", an.thresholds, "comma-separated thresholds");
    drift_cmd->add_option("--out", an.out, "report directory")->required();
    drift_cmd->add_flag("--force", an.force, "overwrite");
    auto* iou_cmd = an_cmd->add_subcommand("iou", "mask IoU series from a mask dump");
    iou_cmd->add_option("--dump", an.dump, "mask_dump.jsonl")->required();
    iou_cmd->add_option("--out", an.out, "report directory")->required();
    iou_cmd->add_flag("--force", an.force, "overwrite");
    auto* sweep_cmd = an_cmd->add_subcommand("sweep", "EKSFT ratio sweep");
    sweep_cmd->add_option("--config", an.config, "config JSON");
    sweep_cmd->add_option("--data", an.data, "dataset directory");
    sweep_cmd->add_option("--init", an.init, "base checkpoint stem");
    sweep_cmd->add_option("--rhos", an.rhos, "comma-separated ratios");
    sweep_cmd->add_option("--n", an.n, "eval samples per prompt");
    sweep_cmd->add_option("--ks", an.ks, "comma-separated k values");
    sweep_cmd->add_option("--eval-seed", an.eval_seed, "sampling seed");
    sweep_cmd->add_option("--out", an.out, "report directory")->required();
    sweep_cmd->add_flag("--force", an.force, "overwrite");
    an.flags.add(sweep_cmd, false);
    auto* plots_cmd = an_cmd->add_subcommand("plots", "SVG charts from metric CSVs");
    plots_cmd->add_option("--csv", an.csvs, "input CSV (repeatable)")->required();
    plots_cmd->add_option("--out", an.out, "output directory")->required();
    plots_cmd->add_flag("--force", an.force, "overwrite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(gen);
        if (*pre_cmd) return run_sft(pre, true);
        if (*sft_cmd) return run_sft(sft, false);
        if (*rl_cmd) return cmd_train_rl(rl);
        if (*ev_cmd) return cmd_eval(ev);
        if (*drift_cmd) return cmd_drift(an);
        if (*iou_cmd) return cmd_iou(an);
        if (*sweep_cmd) return cmd_sweep(an);
        if (*plots_cmd) return cmd_plots(an);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
