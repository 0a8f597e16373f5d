#include "jemb/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <ostream>

#include "jemb/analysis.hpp"

namespace jemb {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out << j.dump(2) << '\n';
    if (!out) throw Error("failed writing '" + path.string() + "'");
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

void ensure_dir(const std::string& dir) {
    if (dir.empty()) throw ConfigError("output directory must be given");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error("cannot create directory '" + dir + "'");
}

struct LoadedRun {
    Checkpoint ckpt;
    TrainMode mode = TrainMode::joint;
    std::vector<MultimodalSample> data;
    std::vector<std::vector<std::size_t>> split;
};

LoadedRun load_run(const std::string& ckpt_path, const std::string& data_path) {
    LoadedRun r;
    r.ckpt = load_checkpoint(ckpt_path);
    const auto& meta = r.ckpt.metadata;
    if (!meta.contains("mode") || !meta.contains("split_seed")) {
        throw ConfigError(ckpt_path + ": checkpoint metadata lacks mode/split_seed");
    }
    r.mode = parse_train_mode(meta.at("mode").get<std::string>());
    r.data = load_dataset(data_path);
    r.split = standard_split(r.data, meta.at("split_seed").get<std::uint64_t>());
    return r;
}

}  // namespace

nlohmann::json to_json(const RunManifest& m) {
    return {{"config", to_json(m.config)},
            {"seed", m.config.seed},
            {"tool_version", m.tool_version},
            {"data_path", m.data_path},
            {"out_dir", m.out_dir},
            {"split_seed", m.split_seed},
            {"split_fractions", {0.8, 0.1, 0.1}},
            {"timings", m.timings}};
}

RunManifest manifest_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("config")) throw ConfigError("$: manifest needs a config object");
    RunManifest m;
    try {
        m.config = train_config_from_json(j.at("config"));
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("$.config") + std::string(e.what()).substr(1));
    }
    m.tool_version = j.value("tool_version", std::string(kToolVersion));
    m.data_path = j.value("data_path", std::string());
    m.out_dir = j.value("out_dir", std::string());
    m.split_seed = j.value("split_seed", split_seed_for(m.config.seed));
    m.timings = j.value("timings", nlohmann::json::object());
    return m;
}

RunManifest load_manifest(const std::string& path) { return manifest_from_json(read_json(path)); }

std::uint64_t split_seed_for(std::uint64_t seed) { return Rng::derive(seed, 0x5b117).next(); }

std::vector<std::vector<std::size_t>> standard_split(std::span<const MultimodalSample> samples,
                                                     std::uint64_t split_seed) {
    const double fractions[] = {0.8, 0.1, 0.1};
    Rng rng(split_seed);
    return stratified_split(samples, fractions, rng);
}

void cmd_generate(const GenerateOptions& opts, std::ostream& log) {
    if (opts.out.empty()) throw ConfigError("--out must be given");
    if (opts.n < static_cast<std::size_t>(opts.palettes) * static_cast<std::size_t>(opts.layouts)) {
        log << "warning: n=" << opts.n << " is below palettes*layouts=" << opts.palettes * opts.layouts
            << "; some classes will be empty\n";
    }
    const auto samples = generate_dataset(opts.n, opts.palettes, opts.layouts, opts.size, opts.seed);
    save_dataset(opts.out, samples);

    std::map<int, std::size_t> appearance, structure;
    for (const auto& s : samples) {
        ++appearance[s.factors.appearance_class];
        ++structure[s.factors.structure_class];
    }
    log << "wrote " << samples.size() << " samples (" << opts.size << "x" << opts.size << ") to " << opts.out << '\n';
    log << "appearance classes:";
    for (const auto& [c, k] : appearance) log << ' ' << c << ':' << k;
    log << "\nstructure classes:";
    for (const auto& [c, k] : structure) log << ' ' << c << ':' << k;
    log << '\n';
}

RunManifest resolve_run(const TrainOptions& opts) {
    RunManifest m;
    if (!opts.manifest.empty()) {
        if (!opts.config.empty()) throw ConfigError("give either --config or --manifest, not both");
        m = load_manifest(opts.manifest);
    } else {
        m.config = opts.config.empty() ? desk_config() : train_config_from_json(read_json(opts.config));
        m.split_seed = split_seed_for(m.config.seed);
    }
    if (opts.mode) m.config.mode = *opts.mode;
    if (m.config.mode == TrainMode::ablation_no_contrastive) {
        m.config.loss.lambda_con = 0.0;
        m.config.loss.lambda_anti = 0.0;
    }
    m.config.validate();
    if (!opts.data.empty()) m.data_path = opts.data;
    if (!opts.out.empty()) m.out_dir = opts.out;
    if (m.data_path.empty()) throw ConfigError("--data must be given");
    m.tool_version = kToolVersion;
    m.timings = nlohmann::json::object();
    return m;
}

RunManifest cmd_train(const TrainOptions& opts, std::ostream& log) {
    const auto start = Clock::now();
    RunManifest m = resolve_run(opts);
    ensure_dir(m.out_dir);
    const fs::path out(m.out_dir);
    write_json(out / "manifest.json", to_json(m));

    const auto data = load_dataset(m.data_path);
    const auto split = standard_split(data, m.split_seed);
    const auto train = select(data, split[0]);
    const auto val = select(data, split[1]);
    m.timings["load_seconds"] = seconds_since(start);
    log << "data " << m.data_path << ": " << train.size() << " train / " << val.size() << " val / "
        << split[2].size() << " test, mode " << to_string(m.config.mode) << '\n';

    const auto fit_start = Clock::now();
    FitHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& r) {
        log << "epoch " << r.epoch << " lr " << r.lr << " rec " << r.train.rec << " con " << r.train.con << " anti "
            << r.train.anti << " kl " << r.train.kl << " val_rec " << r.val_rec << '\n';
    };
    const FitResult result = fit(m.config, train, val, hooks);
    m.timings["fit_seconds"] = seconds_since(fit_start);

    const nlohmann::json meta = {{"mode", to_string(m.config.mode)},
                                 {"split_seed", m.split_seed},
                                 {"best_epoch", result.best_epoch},
                                 {"config", to_json(m.config)},
                                 {"tool_version", kToolVersion}};
    save_checkpoint((out / "model.ckpt").string(), result.best, meta);
    write_history_csv((out / "history.csv").string(), result.history);
    m.timings["total_seconds"] = seconds_since(start);
    write_json(out / "manifest.json", to_json(m));
    log << "best epoch " << result.best_epoch << " of " << result.history.size()
        << (result.stopped_early ? " (early stop)" : "") << "; wrote " << (out / "model.ckpt").string() << '\n';
    return m;
}

EvalMetrics cmd_eval(const EvalOptions& opts, std::ostream& log) {
    ensure_dir(opts.out);
    LoadedRun run = load_run(opts.ckpt, opts.data);
    const auto val = select(run.data, run.split[1]);
    const EvalMetrics metrics = evaluate_model(run.ckpt.params, val, run.mode);
    const fs::path out(opts.out);
    write_json(out / "metrics.json", to_json(metrics));

    for (LatentSpace space : {LatentSpace::appearance, LatentSpace::structure_rgb, LatentSpace::structure_depth}) {
        const EmbeddingTable table = extract_embeddings(run.ckpt.params, val, space);
        const PcaResult pca = pca_project(table, 2);
        const std::string stem = "pca_" + to_string(space);
        write_embedding_csv((out / (stem + ".csv")).string(), table, pca.coords);
        const auto& labels = space == LatentSpace::appearance ? table.appearance_class : table.structure_class;
        write_scatter_svg((out / (stem + ".svg")).string(), pca.coords, labels,
                          to_string(space) + " (" +
                              (space == LatentSpace::appearance ? "appearance" : "structure") + " class)");
    }
    log << to_json(metrics).dump(2) << '\n';
    return metrics;
}

SwapMetrics cmd_modify(const ModifyOptions& opts, std::ostream& log) {
    ensure_dir(opts.out);
    LoadedRun run = load_run(opts.ckpt, opts.data);
    const auto train = select(run.data, run.split[0]);
    const auto val = select(run.data, run.split[1]);
    const SwapMetrics m = swap_metrics(run.ckpt.params, train, val, opts.source_class, opts.target_class);

    const fs::path out(opts.out);
    const std::size_t per = m.before.numel() / m.count;
    const Shape image{m.before.dim(1), m.before.dim(2), m.before.dim(3)};
    for (std::size_t k = 0; k < m.count; ++k) {
        const auto slice = [&](const Tensor& t) {
            const auto d = t.data().subspan(k * per, per);
            return Tensor(image, std::vector<double>(d.begin(), d.end()));
        };
        std::ostringstream stem;
        stem << std::setw(3) << std::setfill('0') << k;
        write_ppm((out / (stem.str() + "_before.ppm")).string(), slice(m.before));
        write_ppm((out / (stem.str() + "_after.ppm")).string(), slice(m.after));
    }
    nlohmann::json j = to_json(m);
    j["source_class"] = opts.source_class;
    j["target_class"] = opts.target_class;
    write_json(out / "swap_metrics.json", j);
    log << j.dump(2) << '\n';
    return m;
}

}  // namespace jemb
