#include "layercake/judge.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "layercake/png_io.hpp"

namespace layercake {

const char* const kJudgeRubric =
    "You will evaluate layered poster results produced by multiple methods "
    "under the same input. For each method, inspect the full composited "
    "poster, the text layer, the foreground layer(s), and the background "
    "layer, and assign a single integer score in {1,2,3,4,5} based on visual "
    "consistency between layers, plausibility of occlusion and depth, and "
    "readability and layout of the final composed poster.\n"
    "Scale: 1 = very poor (severely unreasonable, chaotic structure, and "
    "strong visual inconsistency), 2 = poor, 3 = fair / acceptable but with "
    "clear flaws, 4 = good, 5 = very good (clear structure, reasonable layer "
    "relationships, and visually coherent as a whole).\n"
    "Return the scores as a JSON object mapping each method name to its "
    "integer score.";

namespace {

constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

}  // namespace

std::string base64_encode(const unsigned char* data, std::size_t n) {
  std::string out;
  out.reserve(((n + 2) / 3) * 4);
  for (std::size_t i = 0; i < n; i += 3) {
    const unsigned b0 = data[i];
    const unsigned b1 = (i + 1 < n) ? data[i + 1] : 0;
    const unsigned b2 = (i + 2 < n) ? data[i + 2] : 0;
    out.push_back(kB64Alphabet[b0 >> 2]);
    out.push_back(kB64Alphabet[((b0 & 0x3) << 4) | (b1 >> 4)]);
    out.push_back(i + 1 < n ? kB64Alphabet[((b1 & 0xf) << 2) | (b2 >> 6)] : '=');
    out.push_back(i + 2 < n ? kB64Alphabet[b2 & 0x3f] : '=');
  }
  return out;
}

std::string base64_encode(const std::vector<unsigned char>& data) {
  return base64_encode(data.data(), data.size());
}

std::vector<unsigned char> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0)
    throw std::invalid_argument("base64: length must be a multiple of 4");
  std::vector<unsigned char> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int vals[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=') {
        // Padding may only terminate the final group.
        if (i + 4 != text.size() || k < 2) {
          throw std::invalid_argument("base64: misplaced padding");
        }
        vals[k] = 0;
        ++pad;
      } else {
        if (pad > 0)
          throw std::invalid_argument("base64: data after padding");
        vals[k] = b64_value(c);
        if (vals[k] < 0)
          throw std::invalid_argument("base64: invalid character");
      }
    }
    out.push_back(static_cast<unsigned char>((vals[0] << 2) | (vals[1] >> 4)));
    if (pad < 2)
      out.push_back(
          static_cast<unsigned char>(((vals[1] & 0xf) << 4) | (vals[2] >> 2)));
    if (pad < 1)
      out.push_back(static_cast<unsigned char>(((vals[2] & 0x3) << 6) | vals[3]));
  }
  return out;
}

std::string judge_request_json(const JudgeRequest& request) {
  nlohmann::ordered_json j;
  j["prompt"] = request.prompt;
  j["images"] = request.images;
  j["method_names"] = request.method_names;
  return j.dump();
}

FixtureJudgeClient::FixtureJudgeClient(std::filesystem::path dir)
    : dir_(std::move(dir)) {
  if (!std::filesystem::is_directory(dir_)) {
    throw std::invalid_argument("judge fixtures: not a directory: " +
                                dir_.string());
  }
}

std::string FixtureJudgeClient::evaluate(const JudgeRequest&) {
  char name[32];
  std::snprintf(name, sizeof(name), "case_%03d.json", next_);
  const std::filesystem::path path = dir_ / name;
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("judge fixtures: missing " + path.string());
  }
  ++next_;
  std::ostringstream body;
  body << in.rdbuf();
  return body.str();
}

HttpJudgeClient::HttpJudgeClient(const std::string& endpoint, int timeout_sec,
                                 int attempts, int backoff_ms)
    : timeout_sec_(timeout_sec), attempts_(attempts), backoff_ms_(backoff_ms) {
  if (attempts_ < 1)
    throw std::invalid_argument("judge endpoint: attempts must be >= 1");
  const std::string scheme = "http://";
  if (endpoint.rfind(scheme, 0) != 0) {
    throw std::invalid_argument(
        "judge endpoint: only http:// endpoints are supported, got " + endpoint);
  }
  const std::string rest = endpoint.substr(scheme.size());
  const std::size_t slash = rest.find('/');
  const std::string host_port = rest.substr(0, slash);
  path_ = (slash == std::string::npos) ? "/" : rest.substr(slash);
  const std::size_t colon = host_port.find(':');
  host_ = host_port.substr(0, colon);
  port_ = 80;
  if (colon != std::string::npos) {
    try {
      port_ = std::stoi(host_port.substr(colon + 1));
    } catch (const std::exception&) {
      port_ = 0;
    }
  }
  if (host_.empty() || port_ <= 0 || port_ > 65535) {
    throw std::invalid_argument("judge endpoint: malformed endpoint " + endpoint);
  }
}

std::string HttpJudgeClient::evaluate(const JudgeRequest& request) {
  const std::string body = judge_request_json(request);
  std::string last_error;
  int backoff = backoff_ms_;
  for (int attempt = 0; attempt < attempts_; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
      backoff *= 2;
    }
    httplib::Client cli(host_, port_);
    cli.set_connection_timeout(timeout_sec_, 0);
    cli.set_read_timeout(timeout_sec_, 0);
    cli.set_write_timeout(timeout_sec_, 0);
    auto res = cli.Post(path_, body, "application/json");
    if (res && res->status == 200) return res->body;
    last_error = res ? "status " + std::to_string(res->status)
                     : "transport error " + httplib::to_string(res.error());
  }
  throw std::runtime_error("judge endpoint: request failed after " +
                           std::to_string(attempts_) + " attempts (" +
                           last_error + ")");
}

JudgeOutcome judge_score(const std::vector<JudgeCase>& cases,
                         JudgeClient& client) {
  if (cases.empty()) throw std::invalid_argument("judge: no cases");
  for (const JudgeCase& c : cases) {
    if (c.method_names.empty())
      throw std::invalid_argument("judge: case without methods: " + c.id);
    if (c.method_names.size() != c.renders.size())
      throw std::invalid_argument("judge: methods/renders mismatch: " + c.id);
  }

  JudgeOutcome outcome;
  std::map<std::string, double> sums;
  std::map<std::string, int> counts;
  for (const JudgeCase& c : cases) {
    JudgeRequest req;
    req.prompt = kJudgeRubric;
    req.method_names = c.method_names;
    for (const RgbaImage& img : c.renders) {
      req.images.push_back(base64_encode(encode_png(img)));
    }

    const std::string body = client.evaluate(req);
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      ++outcome.errors;
      continue;
    }

    // The whole case is accepted or rejected: partial scores would bias the
    // per-method means.
    bool ok = parsed.is_object();
    std::map<std::string, int> case_scores;
    if (ok) {
      for (const std::string& method : c.method_names) {
        if (!parsed.contains(method) || !parsed[method].is_number_integer()) {
          ok = false;
          break;
        }
        const int v = parsed[method].get<int>();
        if (v < 1 || v > 5) {
          ok = false;
          break;
        }
        case_scores[method] = v;
      }
    }
    if (!ok) {
      ++outcome.errors;
      continue;
    }
    for (const auto& [method, v] : case_scores) {
      sums[method] += v;
      counts[method] += 1;
    }
    ++outcome.cases_used;
  }

  for (const auto& [method, sum] : sums) {
    outcome.scores[method] = sum / counts[method] / 5.0;
  }
  return outcome;
}

}  // namespace layercake
