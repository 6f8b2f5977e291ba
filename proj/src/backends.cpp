#include "thermalign/backends.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace thermalign {
namespace {

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BackendError("cannot read image file: " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

constexpr const char* kChatPath = "/v1/chat/completions";

}  // namespace

LocalBackend::LocalBackend(const std::string& checkpoint_path)
    : model_(load_checkpoint<float>(checkpoint_path)) {}

LocalBackend::LocalBackend(ToyVLM<float> model) : model_(std::move(model)) {}

std::string LocalBackend::infer(const InferenceRequest& req) {
  AnyImage img;
  try {
    img = read_png(req.image_path);
  } catch (const IoError& e) {
    throw BackendError(std::string("local backend: ") + e.what());
  }
  std::lock_guard<std::mutex> lock(mu_);
  try {
    return model_.answer(img, "<image>\n" + req.prompt, req.max_new_tokens);
  } catch (const UnknownToken& e) {
    throw BackendError(std::string("prompt not tokenizable by the local model: ") + e.what());
  }
}

std::string base64_encode(const unsigned char* data, std::size_t n) {
  static const char* alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (std::size_t i = 0; i < n; i += 3) {
    const unsigned b0 = data[i];
    const unsigned b1 = i + 1 < n ? data[i + 1] : 0;
    const unsigned b2 = i + 2 < n ? data[i + 2] : 0;
    out.push_back(alphabet[b0 >> 2]);
    out.push_back(alphabet[((b0 & 0x3) << 4) | (b1 >> 4)]);
    out.push_back(i + 1 < n ? alphabet[((b1 & 0xf) << 2) | (b2 >> 6)] : '=');
    out.push_back(i + 2 < n ? alphabet[b2 & 0x3f] : '=');
  }
  return out;
}

std::string build_chat_body(const RemoteConfig& cfg, const InferenceRequest& req) {
  const std::string bytes = read_file_bytes(req.image_path);
  const std::string data_url =
      "data:image/png;base64," +
      base64_encode(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
  nlohmann::ordered_json body;
  body["model"] = cfg.model;
  body["messages"] = nlohmann::ordered_json::array(
      {{{"role", "user"},
        {"content",
         nlohmann::ordered_json::array(
             {{{"type", "text"}, {"text", req.prompt}},
              {{"type", "image_url"}, {"image_url", {{"url", data_url}}}}})}}});
  body["max_tokens"] = req.max_new_tokens;
  return body.dump();
}

RemoteBackend::RemoteBackend(const RemoteConfig& cfg) : cfg_(cfg) {
  if (cfg_.base_url.empty()) throw ConfigError("remote backend needs a base_url");
  host_ = cfg_.base_url;
  while (!host_.empty() && host_.back() == '/') host_.pop_back();
  if (!cfg_.auth_env.empty()) {
    const char* tok = std::getenv(cfg_.auth_env.c_str());
    if (!tok || !*tok)
      throw BackendError("auth token environment variable is not set: " + cfg_.auth_env);
    token_ = tok;
  }
  if (cfg_.max_parallel < 1) throw ConfigError("max_parallel must be >= 1");
  if (cfg_.max_retries < 0) throw ConfigError("max_retries must be >= 0");
  if (cfg_.jitter_seed != 0) jitter_rng_ = std::make_unique<Rng>(cfg_.jitter_seed);
}

std::string RemoteBackend::infer(const InferenceRequest& req) {
  const std::string body = build_chat_body(cfg_, req);

  for (int attempt = 0;; ++attempt) {
    httplib::Client cli(host_);
    cli.set_connection_timeout(std::chrono::duration<double>(cfg_.timeout_seconds));
    cli.set_read_timeout(std::chrono::duration<double>(cfg_.timeout_seconds));
    cli.set_write_timeout(std::chrono::duration<double>(cfg_.timeout_seconds));
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

    auto res = cli.Post(kChatPath, headers, body, "application/json");
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read ||
          err == httplib::Error::Write)
        throw TimeoutError("request " + req.request_id + " timed out after " +
                           format_double("%.1f", cfg_.timeout_seconds) + "s");
      throw BackendError("request " + req.request_id +
                         " failed: " + httplib::to_string(err));
    }

    if (res->status == 200) {
      try {
        const nlohmann::json j = nlohmann::json::parse(res->body);
        const auto& content = j.at("choices").at(0).at("message").at("content");
        if (!content.is_string())
          throw ProtocolError("response content is not a string for " + req.request_id);
        return content.get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw ProtocolError("malformed response for " + req.request_id + ": " + e.what());
      }
    }

    const bool retryable = res->status == 429 || res->status >= 500;
    if (retryable && attempt < cfg_.max_retries) {
      double jitter;
      if (jitter_rng_) {
        std::lock_guard<std::mutex> lock(jitter_mu_);
        jitter = jitter_rng_->uniform(0.5, 1.5);
      } else {
        thread_local std::mt19937_64 gen{std::random_device{}()};
        jitter = 0.5 + static_cast<double>(gen() >> 11) * 0x1.0p-53;
      }
      const double delay = cfg_.backoff_base_seconds * std::pow(2.0, attempt) * jitter;
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
      continue;
    }
    throw BackendError("HTTP " + std::to_string(res->status) + " for " + req.request_id +
                       (retryable ? " after " + std::to_string(attempt + 1) + " attempts"
                                  : ""));
  }
}

std::vector<BatchItem> batch_infer(Backend& backend,
                                   const std::vector<InferenceRequest>& requests,
                                   int parallelism) {
  if (parallelism < 1) throw ConfigError("parallelism must be >= 1");
  if (parallelism > backend.max_parallel())
    throw ConfigError("parallelism " + std::to_string(parallelism) +
                      " exceeds backend limit " + std::to_string(backend.max_parallel()));
  std::vector<BatchItem> results(requests.size());
  parallel_for(requests.size(), parallelism, [&](std::size_t i) {
    BatchItem& item = results[i];
    item.request_id = requests[i].request_id;
    try {
      item.text = backend.infer(requests[i]);
      item.ok = true;
    } catch (const Error& e) {
      item.ok = false;
      item.error = e.what();
    }
  });
  return results;
}

}  // namespace thermalign
