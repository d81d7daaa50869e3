#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "synthpair/run_config.hpp"

namespace synthpair {

// Workdir artifact names, one per stage output.
namespace artifact {
inline constexpr const char* kCaptions = "captions.tsv";
inline constexpr const char* kCaptionsPartial = "captions.partial.tsv";
inline constexpr const char* kMatches = "matches.tsv";
inline constexpr const char* kStats = "stats.txt";
inline constexpr const char* kPlan = "balance_plan.tsv";
inline constexpr const char* kBalanced = "balanced.tsv";
inline constexpr const char* kManifest = "manifest.tsv";
inline constexpr const char* kParams = "params.bin";
inline constexpr const char* kLossCurve = "loss_curve.tsv";
inline constexpr const char* kMetrics = "metrics.tsv";
inline constexpr const char* kMetricsTable = "metrics.txt";
inline constexpr const char* kEvalDetails = "eval_details.tsv";
inline constexpr const char* kNsfw = "nsfw.tsv";
inline constexpr const char* kSafeConcepts = "concepts_safe.txt";
inline constexpr const char* kRunLog = "run.log";
inline constexpr const char* kLock = ".lock";
}  // namespace artifact

/// A stage's input is missing; `stage()` names the stage that produces it.
class MissingArtifact : public Error {
public:
    MissingArtifact(const std::string& file, std::string stage)
        : Error("missing " + file + "; run `" + stage + "` first"), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

/// Exclusive advisory lock on <workdir>/.lock for the lifetime of the object.
class WorkdirLock {
public:
    explicit WorkdirLock(const std::filesystem::path& workdir);
    ~WorkdirLock();
    WorkdirLock(const WorkdirLock&) = delete;
    WorkdirLock& operator=(const WorkdirLock&) = delete;

private:
    int fd_ = -1;
};

/// Endpoint clients for a run: in-process mocks when cfg.mock, HTTP otherwise.
class Backends {
public:
    explicit Backends(const RunConfig& cfg);
    ~Backends();

    ChatClient& llm() { return *llm_; }
    ChatClient& nsfw() { return *nsfw_; }
    const Renderer& renderer() const { return renderer_; }

    /// Renderer for the backend recorded in a manifest ("mock" | "remote").
    Renderer renderer_for(const std::string& backend) const;

private:
    RunConfig cfg_;
    std::unique_ptr<ChatClient> llm_;
    std::unique_ptr<ChatClient> nsfw_;
    std::unique_ptr<ImageClient> tti_;
    Renderer renderer_;
};

// Stages. Each reads its inputs from cfg.workdir, writes its artifacts there,
// appends one JSON line to run.log and returns the same summary object.
nlohmann::json stage_gen_captions(const RunConfig& cfg, Backends& be);
nlohmann::json stage_match(const RunConfig& cfg);
/// Stats of `corpus` (one caption per line) when given, else of captions.tsv.
nlohmann::json stage_stats(const RunConfig& cfg, const std::optional<std::filesystem::path>& corpus,
                           std::string* table = nullptr);
nlohmann::json stage_balance(const RunConfig& cfg);
nlohmann::json stage_gen_images(const RunConfig& cfg, Backends& be);
nlohmann::json stage_train(const RunConfig& cfg);
nlohmann::json stage_eval(const RunConfig& cfg, Backends& be);
nlohmann::json stage_verify(const RunConfig& cfg);
nlohmann::json stage_filter_nsfw(const RunConfig& cfg, Backends& be);

struct SubsetRequest {
    std::optional<std::filesystem::path> from_corpus;
    std::optional<std::size_t> random_n;
    std::filesystem::path out;
};
nlohmann::json stage_subset(const RunConfig& cfg, const SubsetRequest& req);

/// gen-captions, match, balance, gen-images, train, eval.
nlohmann::json run_pipeline(const RunConfig& cfg, Backends& be);

void append_run_log(const RunConfig& cfg, const nlohmann::json& line);

}  // namespace synthpair
