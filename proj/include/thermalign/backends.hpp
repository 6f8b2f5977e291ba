#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "thermalign/common.hpp"
#include "thermalign/vlm.hpp"

namespace thermalign {

struct TimeoutError : Error {
  using Error::Error;
};
struct BackendError : Error {
  using Error::Error;
};
struct ProtocolError : Error {
  using Error::Error;
};

struct InferenceRequest {
  std::string request_id;
  std::string image_path;
  std::string prompt;
  int max_new_tokens = 12;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string name() const = 0;
  // Returns the model's raw text response; throws a Backend/Timeout/Protocol
  // error on failure. Must be callable from multiple threads.
  virtual std::string infer(const InferenceRequest& req) = 0;
  // Upper bound on concurrent infer() calls the backend tolerates.
  virtual int max_parallel() const { return 1 << 20; }
};

// Greedy decoding against an aligned checkpoint. One model instance guarded
// by a mutex: forward passes reuse internal activation buffers, so calls are
// serialized rather than cloned per thread.
class LocalBackend final : public Backend {
 public:
  explicit LocalBackend(const std::string& checkpoint_path);
  explicit LocalBackend(ToyVLM<float> model);
  std::string name() const override { return "local-toy"; }
  std::string infer(const InferenceRequest& req) override;

 private:
  ToyVLM<float> model_;
  std::mutex mu_;
};

struct RemoteConfig {
  std::string base_url;       // scheme://host[:port]
  std::string model = "vlm";  // model name placed in the request body
  std::string auth_env = "VLM_API_KEY";  // env var holding the bearer token; "" = no auth
  double timeout_seconds = 30.0;
  int max_retries = 3;    // additional attempts after the first, 429/5xx only
  int max_parallel = 4;
  double backoff_base_seconds = 1.0;  // doubled per retry, jittered by [0.5,1.5)
  std::uint64_t jitter_seed = 0;      // 0 = nondeterministic jitter
  bool operator==(const RemoteConfig&) const = default;
};

// OpenAI-style chat-completions client. The image travels as a base64 data
// URL inside the user message; the bearer token is read from the environment
// at construction and never appears in any config file or artifact.
class RemoteBackend final : public Backend {
 public:
  explicit RemoteBackend(const RemoteConfig& cfg);
  std::string name() const override { return "remote:" + cfg_.model; }
  std::string infer(const InferenceRequest& req) override;
  int max_parallel() const override { return cfg_.max_parallel; }

 private:
  RemoteConfig cfg_;
  std::string token_;
  std::string host_;  // scheme://host:port for the HTTP client
  std::mutex jitter_mu_;
  std::unique_ptr<Rng> jitter_rng_;  // only when jitter_seed != 0
};

std::string base64_encode(const unsigned char* data, std::size_t n);

// Exact request body RemoteBackend sends; exposed so tests can pin it.
std::string build_chat_body(const RemoteConfig& cfg, const InferenceRequest& req);

struct BatchItem {
  std::string request_id;
  bool ok = false;
  std::string text;
  std::string error;
};

// Runs the requests with at most `parallelism` concurrent infer() calls and
// returns results in input order. Per-item failures land in the item's error
// slot; they never abort the batch. parallelism above the backend's
// max_parallel is a ConfigError.
std::vector<BatchItem> batch_infer(Backend& backend,
                                   const std::vector<InferenceRequest>& requests,
                                   int parallelism);

}  // namespace thermalign
