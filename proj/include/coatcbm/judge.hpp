// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coatcbm/interp.hpp"

#include "json.hpp"

#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

namespace coatcbm {

/// Chat-completion style HTTP endpoint used as a relevance judge.
/// Templates substitute `{subject}` and `{concept}`. The auth token is read
/// from the environment variable named by `token_env` and is never logged.
struct JudgeEndpoint {
  std::string base_url;  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string token_env;
  std::string image_template =
      "Image description: {subject}\nIs the visual concept \"{concept}\" present in this "
      "image? Answer with a single word: yes or no.";
  std::string class_template =
      "Is the concept \"{concept}\" relevant to recognizing the class \"{subject}\"? Answer "
      "with a single word: yes or no.";
  double timeout_s = 30.0;
  int max_retries = 3;
  int backoff_ms = 500;   // doubled after every failed attempt
  int min_interval_ms = 0;

  static JudgeEndpoint from_json(const nlohmann::json& j);
};

/// Parses a constrained yes/no reply. Accepts either a chat-completion JSON
/// body (choices[0].message.content) or plain text. Throws JudgeError naming
/// the raw reply otherwise.
bool parse_judge_reply(const std::string& body);

std::string render_prompt(const std::string& tmpl, const std::string& subject,
                          const std::string& concept_text);

/// Remote relevance oracle with a per-run cache. Requests are serialized and
/// spaced at least `min_interval_ms` apart.
class RemoteJudge : public RelevanceOracle {
 public:
  RemoteJudge(JudgeEndpoint endpoint, std::vector<std::string> image_descriptions,
              std::vector<std::string> class_names, std::vector<std::string> concepts);

  /// Single judgment; served from the cache when the pair was seen before.
  bool judge(SubjectType type, const std::string& subject, const std::string& concept_text);

  bool image_relevant(int image, int concept_id) override;
  bool class_relevant(int label, int concept_id) override;

  std::size_t network_calls() const { return network_calls_; }

 private:
  std::string post(const std::string& prompt);

  JudgeEndpoint endpoint_;
  std::vector<std::string> image_descriptions_;
  std::vector<std::string> class_names_;
  std::vector<std::string> concepts_;
  std::map<std::tuple<SubjectType, std::string, std::string>, bool> cache_;
  std::mutex mutex_;
  std::size_t network_calls_ = 0;
  long long last_request_ms_ = -1;
};

}  // namespace coatcbm
