#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "synthpair/balancer.hpp"
#include "synthpair/caption_engine.hpp"
#include "synthpair/clip_trainer.hpp"
#include "synthpair/concept_matcher.hpp"
#include "synthpair/endpoints.hpp"
#include "synthpair/image_engine.hpp"

namespace synthpair {

struct EvalConfig {
    int classes = 4;           ///< concept-classes for zero-shot and probing
    int per_class = 20;        ///< fresh captions rendered per class
    int shots = 5;             ///< few-shot examples per class
    std::string templ = "a photo of a {label}";
    int k = 1;                 ///< recall@k

    void validate() const;
};

/// Everything a run needs. Loaded from an INI-style file:
///
///   [paths]      concepts, workdir
///   [llm]        url, model, api_key_env, temperature, top_p,
///                presence_penalty, frequency_penalty, max_tokens
///   [nsfw]       url, model, api_key_env, retries
///   [generation] n_per_concept, max_words, max_attempts, dedup,
///                drop_concept_absent
///   [tti]        url, api_key_env, guidance_scale, num_steps, width, height,
///                store_size, retries
///   [match]      raw_substring
///   [balance]    target_size, tolerance, combiner (max | noisy_or)
///   [train]      epochs, batch_size, base_lr, weight_decay, warmup_epochs,
///                embed_dim, augment
///   [eval]       classes, per_class, shots, template, k
///   [run]        seed, concurrency, mock
///
/// Unknown sections or keys are rejected.
struct RunConfig {
    std::filesystem::path concepts;
    std::filesystem::path workdir = "work";

    EndpointConfig llm{"http://localhost:8000/v1/chat/completions", "LLM_API_KEY"};
    EndpointConfig nsfw{"http://localhost:8000/v1/chat/completions", "LLM_API_KEY"};
    EndpointConfig tti{"http://localhost:7860/generate", "TTI_API_KEY"};
    NsfwOptions nsfw_options;

    GenerationConfig generation;
    TtiParams tti_params;
    MatchMode match_mode = MatchMode::WordBoundary;

    std::size_t target_size = 0;  ///< 0 = must be given before `balance`
    double tolerance = 0.5;
    Combiner combiner = Combiner::Max;
    bool random_sampling = false;

    TrainConfig train;
    EvalConfig eval;

    std::uint64_t seed = 0;
    std::size_t concurrency = 4;
    bool mock = false;

    RunConfig();

    /// Pushes seed and concurrency into the per-stage structs.
    void propagate();
    void validate() const;
};

RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace synthpair
