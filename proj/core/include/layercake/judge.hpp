#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "layercake/image.hpp"

namespace layercake {

// Scoring instructions sent with every request: the published side-by-side
// rubric sentence, the 1-5 scale, and the JSON output contract.
extern const char* const kJudgeRubric;

std::string base64_encode(const unsigned char* data, std::size_t n);
std::string base64_encode(const std::vector<unsigned char>& data);
std::vector<unsigned char> base64_decode(const std::string& text);

struct JudgeRequest {
  std::string prompt;
  std::vector<std::string> images;        // base64 PNG payloads, ordered
  std::vector<std::string> method_names;  // aligned with images
};

// Wire format: {"prompt": ..., "images": [...], "method_names": [...]}.
std::string judge_request_json(const JudgeRequest& request);

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  virtual std::string name() const = 0;
  // Returns the raw response body for one test case; throws on transport
  // failure.
  virtual std::string evaluate(const JudgeRequest& request) = 0;
};

// Replays canned response bodies case_000.json, case_001.json, ... from a
// directory, one per call in call order. Running out of fixtures throws.
class FixtureJudgeClient : public JudgeClient {
 public:
  explicit FixtureJudgeClient(std::filesystem::path dir);
  std::string name() const override { return "fixture"; }
  std::string evaluate(const JudgeRequest& request) override;

 private:
  std::filesystem::path dir_;
  int next_ = 0;
};

// POSTs request JSON to an http:// endpoint, retrying failed requests with
// doubling backoff (attempts total tries).
class HttpJudgeClient : public JudgeClient {
 public:
  explicit HttpJudgeClient(const std::string& endpoint, int timeout_sec = 30,
                           int attempts = 3, int backoff_ms = 250);
  std::string name() const override { return "http"; }
  std::string evaluate(const JudgeRequest& request) override;

 private:
  std::string host_;
  int port_;
  std::string path_;
  int timeout_sec_;
  int attempts_;
  int backoff_ms_;
};

struct JudgeCase {
  std::string id;
  std::vector<std::string> method_names;
  std::vector<RgbaImage> renders;  // aligned with method_names
};

struct JudgeOutcome {
  std::map<std::string, double> scores;  // method -> mean score / 5, in [0,1]
  int errors = 0;                        // cases rejected and excluded
  int cases_used = 0;                    // cases that contributed scores
};

// One request per case carrying all methods' renders plus the rubric. A
// response must map every method name of the case to an integer in 1..5;
// otherwise the whole case is rejected (counted in errors) and excluded.
// Accepted integer scores are averaged per method, then divided by 5.
// Transport errors from the client propagate.
JudgeOutcome judge_score(const std::vector<JudgeCase>& cases,
                         JudgeClient& client);

}  // namespace layercake
