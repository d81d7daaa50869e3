#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace synthpair {

struct ChatMessage {
    std::string role;
    std::string content;
};

struct SamplingParams {
    double temperature = 0.7;
    double top_p = 0.95;
    double presence_penalty = 1.0;
    double frequency_penalty = 1.0;
    int max_tokens = 64;
    std::uint64_t seed = 0;

    bool operator==(const SamplingParams&) const = default;
};

struct ChatRequest {
    std::string model;
    std::vector<ChatMessage> messages;
    SamplingParams sampling;
};

/// OpenAI-compatible request body.
nlohmann::json to_json(const ChatRequest& req);

/// Extracts choices[0].message.content; throws Error if absent.
std::string parse_chat_response(const std::string& body);

/// A chat-completion endpoint. Implementations return the first message
/// content verbatim and throw EndpointUnavailable when the endpoint cannot be
/// reached. Must be safe to call concurrently.
class ChatClient {
public:
    virtual ~ChatClient() = default;
    virtual std::string complete(const ChatRequest& req) = 0;
};

struct TtiRequest {
    std::string prompt;
    double guidance_scale = 2.0;
    int num_inference_steps = 50;
    int width = 512;
    int height = 512;
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const TtiRequest& req);

struct ImageResponse {
    int status = 0;       ///< HTTP status; 0 when no response was received
    std::string body;     ///< encoded image bytes
};

/// A text-to-image endpoint. Must be safe to call concurrently.
class ImageClient {
public:
    virtual ~ImageClient() = default;
    virtual ImageResponse render(const TtiRequest& req) = 0;
};

struct EndpointConfig {
    std::string url;           ///< e.g. http://localhost:8000/v1/chat/completions
    std::string api_key_env;   ///< name of the env var holding a bearer token; may be empty
    double timeout_seconds = 120.0;
};

struct ParsedUrl {
    std::string scheme_host_port;  ///< "http://host:port"
    std::string path;              ///< "/v1/chat/completions"
};

ParsedUrl parse_url(const std::string& url);

/// Resolves the bearer token named by cfg.api_key_env. Empty when unset.
std::string resolve_api_key(const EndpointConfig& cfg);

class HttpChatClient final : public ChatClient {
public:
    explicit HttpChatClient(EndpointConfig cfg);
    std::string complete(const ChatRequest& req) override;

private:
    EndpointConfig cfg_;
    ParsedUrl url_;
    std::string api_key_;
};

class HttpImageClient final : public ImageClient {
public:
    explicit HttpImageClient(EndpointConfig cfg);
    ImageResponse render(const TtiRequest& req) override;

private:
    EndpointConfig cfg_;
    ParsedUrl url_;
    std::string api_key_;
};

}  // namespace synthpair
