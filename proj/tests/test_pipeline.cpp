#include <doctest.h>

#include <fstream>
#include <sstream>

#include "support.hpp"
#include "synthpair/eval_harness.hpp"
#include "synthpair/pipeline.hpp"

using namespace synthpair;

namespace {

RunConfig parse(const std::string& text) {
    std::istringstream in(text);
    return parse_run_config(in);
}

RunConfig mock_config(const testing::TempDir& dir, std::size_t concepts) {
    std::ofstream bank(dir / "bank.txt");
    for (std::size_t i = 0; i < concepts; ++i) bank << "thing" << char('a' + i % 26) << char('a' + i / 26) << '\n';
    bank.close();
    RunConfig cfg;
    cfg.concepts = dir / "bank.txt";
    cfg.workdir = dir / "work";
    cfg.mock = true;
    cfg.generation.n_per_concept = 2;
    cfg.target_size = concepts;
    cfg.train.epochs = 2;
    cfg.train.embed_dim = 16;
    cfg.train.batch_size = 16;
    cfg.tti_params.store_size = 32;
    cfg.seed = 3;
    cfg.propagate();
    cfg.validate();
    return cfg;
}

}  // namespace

TEST_CASE("config parsing") {
    const auto cfg = parse("[run]\nseed = 9\nconcurrency = 2\n[balance]\ncombiner = noisy_or\ntarget_size = 10\n"
                           "[train]\nepochs = 3\n");
    CHECK(cfg.seed == 9);
    CHECK(cfg.train.seed == 9);
    CHECK(cfg.generation.concurrency == 2);
    CHECK(cfg.combiner == Combiner::NoisyOr);
    CHECK(cfg.target_size == 10);
    CHECK(cfg.train.epochs == 3);

    CHECK_THROWS_AS(parse("[run]\nsed = 1\n"), Error);
    CHECK_THROWS_AS(parse("[nowhere]\nx = 1\n"), Error);
    CHECK_THROWS_AS(parse("[run]\nseed = one\n"), Error);
    CHECK_THROWS_AS(parse("[train]\nbase_lr = inf\n"), Error);
    CHECK_THROWS_AS(parse("[balance]\ncombiner = min\n"), Error);
    CHECK_THROWS_AS(parse("[run]\nmock = maybe\n"), Error);
    CHECK_THROWS_AS(parse("[eval]\ntemplate = a photo\n"), Error);
}

TEST_CASE("config paths are relative to the file") {
    testing::TempDir dir("cfg");
    std::filesystem::create_directories(dir / "sub");
    {
        std::ofstream out(dir / "sub" / "run.ini");
        out << "[paths]\nconcepts = bank.txt\nworkdir = out\n";
    }
    const auto cfg = load_run_config(dir / "sub" / "run.ini");
    CHECK(cfg.concepts == dir / "sub" / "bank.txt");
    CHECK(cfg.workdir == dir / "sub" / "out");
}

TEST_CASE("stages name the stage producing a missing input") {
    testing::TempDir dir("missing");
    const auto cfg = mock_config(dir, 30);
    std::filesystem::create_directories(cfg.workdir);
    try {
        stage_train(cfg);
        FAIL("expected MissingArtifact");
    } catch (const MissingArtifact& e) {
        CHECK(e.stage() == "gen-images");
        CHECK(std::string(e.what()).find("gen-images") != std::string::npos);
    }
    CHECK_THROWS_AS(stage_match(cfg), MissingArtifact);
    CHECK_THROWS_AS(stage_balance(cfg), MissingArtifact);
}

TEST_CASE("workdir lock is exclusive") {
    testing::TempDir dir("lock");
    std::filesystem::create_directories(dir.path());
    WorkdirLock first(dir.path());
    CHECK_THROWS_AS(WorkdirLock(dir.path()), Error);
}

TEST_CASE("mock pipeline runs end to end, logs every stage and reproduces") {
    testing::TempDir a("pipe_a"), b("pipe_b");
    auto run = [](const testing::TempDir& dir) {
        const auto cfg = mock_config(dir, 40);
        Backends be(cfg);
        const auto summary = run_pipeline(cfg, be);
        return std::make_pair(cfg, summary);
    };
    const auto [cfg_a, sum_a] = run(a);
    const auto [cfg_b, sum_b] = run(b);
    for (auto name : {artifact::kCaptions, artifact::kMatches, artifact::kPlan, artifact::kManifest,
                      artifact::kParams, artifact::kMetrics}) {
        CHECK(read_file(cfg_a.workdir / name) == read_file(cfg_b.workdir / name));
    }
    std::istringstream log(read_file(cfg_a.workdir / artifact::kRunLog));
    std::string line;
    std::vector<std::string> stages;
    while (std::getline(log, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j["status"] == "ok");
        stages.push_back(j["stage"]);
    }
    CHECK(stages == std::vector<std::string>{"gen-captions", "match", "balance", "gen-images", "train", "eval",
                                             "pipeline"});
    CHECK(stage_verify(cfg_a)["corrupt"].empty());
    CHECK(read_metrics_file((cfg_a.workdir / artifact::kMetrics).string())[Task::TextRet] >= 0.0);
}
