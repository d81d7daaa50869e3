#include "synthpair/endpoints.hpp"

#include <cstdlib>

#include <httplib.h>

#include "synthpair/common.hpp"

namespace synthpair {

nlohmann::json to_json(const ChatRequest& req) {
    nlohmann::json messages = nlohmann::json::array();
    for (const auto& m : req.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
    return {
        {"model", req.model},
        {"messages", std::move(messages)},
        {"temperature", req.sampling.temperature},
        {"top_p", req.sampling.top_p},
        {"presence_penalty", req.sampling.presence_penalty},
        {"frequency_penalty", req.sampling.frequency_penalty},
        {"max_tokens", req.sampling.max_tokens},
        {"seed", req.sampling.seed},
    };
}

std::string parse_chat_response(const std::string& body) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(std::string("chat response is not JSON: ") + e.what());
    }
    const auto& choices = j.value("choices", nlohmann::json::array());
    if (!choices.is_array() || choices.empty()) throw Error("chat response has no choices");
    const auto& msg = choices.at(0).value("message", nlohmann::json::object());
    if (!msg.contains("content") || !msg["content"].is_string()) {
        throw Error("chat response has no message content");
    }
    return msg["content"].get<std::string>();
}

nlohmann::json to_json(const TtiRequest& req) {
    return {
        {"prompt", req.prompt},
        {"guidance_scale", req.guidance_scale},
        {"num_inference_steps", req.num_inference_steps},
        {"width", req.width},
        {"height", req.height},
        {"seed", req.seed},
    };
}

ParsedUrl parse_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error("endpoint url lacks a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl out;
    if (path_start == std::string::npos) {
        out.scheme_host_port = url;
        out.path = "/";
    } else {
        out.scheme_host_port = url.substr(0, path_start);
        out.path = url.substr(path_start);
    }
    if (out.scheme_host_port.size() <= scheme_end + 3) throw Error("endpoint url lacks a host: " + url);
    return out;
}

std::string resolve_api_key(const EndpointConfig& cfg) {
    if (cfg.api_key_env.empty()) return {};
    const char* v = std::getenv(cfg.api_key_env.c_str());
    return v ? std::string(v) : std::string();
}

namespace {

httplib::Client make_client(const EndpointConfig& cfg, const ParsedUrl& url) {
    httplib::Client cli(url.scheme_host_port);
    const auto secs = static_cast<time_t>(cfg.timeout_seconds);
    cli.set_connection_timeout(10, 0);
    cli.set_read_timeout(secs, 0);
    cli.set_write_timeout(secs, 0);
    return cli;
}

httplib::Headers auth_headers(const std::string& key) {
    httplib::Headers h;
    if (!key.empty()) h.emplace("Authorization", "Bearer " + key);
    return h;
}

}  // namespace

HttpChatClient::HttpChatClient(EndpointConfig cfg)
    : cfg_(std::move(cfg)), url_(parse_url(cfg_.url)), api_key_(resolve_api_key(cfg_)) {}

std::string HttpChatClient::complete(const ChatRequest& req) {
    auto cli = make_client(cfg_, url_);
    auto res = cli.Post(url_.path, auth_headers(api_key_), to_json(req).dump(), "application/json");
    if (!res) {
        throw EndpointUnavailable("chat endpoint " + cfg_.url + ": " + httplib::to_string(res.error()));
    }
    if (res->status < 200 || res->status >= 300) {
        throw Error("chat endpoint returned HTTP " + std::to_string(res->status));
    }
    return parse_chat_response(res->body);
}

HttpImageClient::HttpImageClient(EndpointConfig cfg)
    : cfg_(std::move(cfg)), url_(parse_url(cfg_.url)), api_key_(resolve_api_key(cfg_)) {}

ImageResponse HttpImageClient::render(const TtiRequest& req) {
    auto cli = make_client(cfg_, url_);
    auto res = cli.Post(url_.path, auth_headers(api_key_), to_json(req).dump(), "application/json");
    if (!res) return {0, {}};
    return {res->status, res->body};
}

}  // namespace synthpair
