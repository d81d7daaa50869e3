#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "synthpair/eval_harness.hpp"
#include "synthpair/pipeline.hpp"

namespace fs = std::filesystem;
using namespace synthpair;

namespace {

constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitMissingArtifact = 3;
constexpr int kExitEndpoint = 4;

struct GlobalFlags {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> concurrency;
    std::optional<std::size_t> target_size;
    std::optional<int> per_concept;
    std::optional<std::string> workdir;
    std::optional<std::string> concepts;
    bool mock = false;
    bool random_sampling = false;
    bool raw_substring = false;
};

RunConfig resolve_config(const GlobalFlags& g) {
    RunConfig cfg = g.config ? load_run_config(*g.config) : RunConfig{};
    if (g.seed) cfg.seed = *g.seed;
    if (g.concurrency) cfg.concurrency = *g.concurrency;
    if (g.target_size) cfg.target_size = *g.target_size;
    if (g.per_concept) cfg.generation.n_per_concept = *g.per_concept;
    if (g.workdir) cfg.workdir = *g.workdir;
    if (g.concepts) cfg.concepts = *g.concepts;
    if (g.mock) cfg.mock = true;
    if (g.random_sampling) cfg.random_sampling = true;
    if (g.raw_substring) cfg.match_mode = MatchMode::RawSubstring;
    cfg.propagate();
    cfg.validate();
    if (!cfg.concepts.empty() && !fs::exists(cfg.concepts)) {
        throw Error("concept file " + cfg.concepts.string() + " does not exist");
    }
    return cfg;
}

void print(const nlohmann::json& summary) { std::cout << summary.dump(2) << '\n'; }

std::string signed_fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%+.*f", digits, v);
    return buf;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic caption-image dataset pipeline and desk-scale contrastive training"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalFlags g;
    app.add_option("--config", g.config, "INI run configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "global seed");
    app.add_option("--concurrency", g.concurrency, "max in-flight requests and worker threads");
    app.add_option("--target-size", g.target_size, "balanced subset size");
    app.add_option("--captions-per-concept", g.per_concept, "captions generated per concept");
    app.add_option("--workdir", g.workdir, "directory holding all stage artifacts");
    app.add_option("--concepts", g.concepts, "concept bank, one concept per line");
    app.add_flag("--mock", g.mock, "use the in-process LLM, classifier and renderer");
    app.add_flag("--random-sampling", g.random_sampling, "uniform subset instead of balanced sampling");
    app.add_flag("--raw-substring", g.raw_substring, "match concepts anywhere, ignoring word boundaries");

    auto* gen_captions = app.add_subcommand("gen-captions", "generate captions for every concept");
    auto* match = app.add_subcommand("match", "find bank concepts in each caption");
    std::optional<std::string> corpus;
    auto* stats = app.add_subcommand("stats", "concept appearance statistics");
    stats->add_option("--corpus", corpus, "caption file to analyse instead of captions.tsv")->check(CLI::ExistingFile);
    auto* balance = app.add_subcommand("balance", "subsample captions toward the target size");
    auto* gen_images = app.add_subcommand("gen-images", "render an image for every balanced caption");
    auto* train_cmd = app.add_subcommand("train", "train the text and image encoders");
    auto* eval = app.add_subcommand("eval", "retrieval, zero-shot and probe metrics");
    auto* verify = app.add_subcommand("verify", "check image files against manifest checksums");
    auto* filter = app.add_subcommand("filter-nsfw", "flag unsafe concepts in the bank");
    auto* pipeline = app.add_subcommand("pipeline", "gen-captions, match, balance, gen-images, train, eval");

    SubsetRequest subset_req;
    std::optional<std::string> subset_corpus;
    std::string subset_out;
    auto* subset = app.add_subcommand("subset", "derive a smaller concept bank");
    auto* from_corpus = subset->add_option("--from-corpus", subset_corpus, "keep concepts occurring in this corpus")
                            ->check(CLI::ExistingFile);
    subset->add_option("--random", subset_req.random_n, "keep N concepts chosen uniformly")->excludes(from_corpus);
    subset->add_option("--out", subset_out, "output concept file")->required();

    std::string model_file, baseline_file;
    int digits = 1;
    auto* delta = app.add_subcommand("delta-mtl", "mean relative improvement of one metrics file over another");
    delta->add_option("model", model_file, "metrics of the model")->required()->check(CLI::ExistingFile);
    delta->add_option("baseline", baseline_file, "metrics of the baseline")->required()->check(CLI::ExistingFile);
    delta->add_option("--digits", digits, "decimal places")->check(CLI::Range(0, 12));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitUsage;  // --help exits 0
    }

    try {
        if (delta->parsed()) {
            const double d = delta_mtl(read_metrics_file(model_file), read_metrics_file(baseline_file));
            std::cout << signed_fixed(d, digits) << '\n';
            return 0;
        }

        const RunConfig cfg = resolve_config(g);
        WorkdirLock lock(cfg.workdir);

        if (gen_captions->parsed()) {
            Backends be(cfg);
            print(stage_gen_captions(cfg, be));
        } else if (match->parsed()) {
            print(stage_match(cfg));
        } else if (stats->parsed()) {
            std::string table;
            stage_stats(cfg, corpus ? std::optional<fs::path>(*corpus) : std::nullopt, &table);
            std::cout << table;
        } else if (balance->parsed()) {
            print(stage_balance(cfg));
        } else if (gen_images->parsed()) {
            Backends be(cfg);
            print(stage_gen_images(cfg, be));
        } else if (train_cmd->parsed()) {
            print(stage_train(cfg));
        } else if (eval->parsed()) {
            Backends be(cfg);
            const auto summary = stage_eval(cfg, be);
            std::cout << read_file(cfg.workdir / artifact::kMetricsTable);
            std::cerr << summary.dump() << '\n';
        } else if (verify->parsed()) {
            const auto summary = stage_verify(cfg);
            print(summary);
            if (!summary["corrupt"].empty()) return kExitError;
        } else if (filter->parsed()) {
            Backends be(cfg);
            print(stage_filter_nsfw(cfg, be));
        } else if (subset->parsed()) {
            if (subset_corpus) subset_req.from_corpus = *subset_corpus;
            subset_req.out = subset_out;
            print(stage_subset(cfg, subset_req));
        } else if (pipeline->parsed()) {
            Backends be(cfg);
            print(run_pipeline(cfg, be));
        }
        return 0;
    } catch (const MissingArtifact& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitMissingArtifact;
    } catch (const EndpointUnavailable& e) {
        std::cerr << "error: endpoint unavailable: " << e.what() << '\n';
        return kExitEndpoint;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitError;
    }
}
