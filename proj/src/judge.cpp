// SPDX-License-Identifier: Apache-2.0
#include "coatcbm/judge.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <thread>

namespace coatcbm {

using json = nlohmann::json;

JudgeEndpoint JudgeEndpoint::from_json(const json& j) {
  JudgeEndpoint e;
  try {
    e.base_url = j.at("base_url").get<std::string>();
    e.model = j.value("model", e.model);
    e.path = j.value("path", e.path);
    e.token_env = j.value("token_env", e.token_env);
    e.image_template = j.value("image_template", e.image_template);
    e.class_template = j.value("class_template", e.class_template);
    e.timeout_s = j.value("timeout_s", e.timeout_s);
    e.max_retries = j.value("max_retries", e.max_retries);
    e.backoff_ms = j.value("backoff_ms", e.backoff_ms);
    e.min_interval_ms = j.value("min_interval_ms", e.min_interval_ms);
  } catch (const json::exception& ex) {
    throw DataError(std::string("malformed judge config: ") + ex.what());
  }
  if (e.max_retries < 0 || e.timeout_s <= 0) throw DataError("judge config: bad retry/timeout");
  return e;
}

bool parse_judge_reply(const std::string& body) {
  std::string text = body;
  try {
    const auto j = json::parse(body);
    if (j.is_object() && j.contains("choices"))
      text = j.at("choices").at(0).at("message").at("content").get<std::string>();
    else if (j.is_string())
      text = j.get<std::string>();
  } catch (const json::exception&) {
    // plain-text reply
  }
  std::string norm;
  for (char c : text) norm += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  const auto b = norm.find_first_not_of(" \t\r\n\"'");
  const auto e = norm.find_last_not_of(" \t\r\n\"'.!");
  norm = b == std::string::npos || e < b ? "" : norm.substr(b, e - b + 1);
  if (norm == "yes") return true;
  if (norm == "no") return false;
  throw JudgeError("unparseable judge reply: '" + body + "'");
}

std::string render_prompt(const std::string& tmpl, const std::string& subject,
                          const std::string& concept_text) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl.compare(i, 9, "{subject}") == 0) {
      out += subject;
      i += 9;
    } else if (tmpl.compare(i, 9, "{concept}") == 0) {
      out += concept_text;
      i += 9;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

RemoteJudge::RemoteJudge(JudgeEndpoint endpoint, std::vector<std::string> image_descriptions,
                         std::vector<std::string> class_names, std::vector<std::string> concepts)
    : endpoint_(std::move(endpoint)),
      image_descriptions_(std::move(image_descriptions)),
      class_names_(std::move(class_names)),
      concepts_(std::move(concepts)) {}

bool RemoteJudge::judge(SubjectType type, const std::string& subject, const std::string& concept_text) {
  std::lock_guard lock(mutex_);
  const auto key = std::make_tuple(type, subject, concept_text);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  const auto& tmpl =
      type == SubjectType::image ? endpoint_.image_template : endpoint_.class_template;
  const bool answer = parse_judge_reply(post(render_prompt(tmpl, subject, concept_text)));
  cache_.emplace(key, answer);
  return answer;
}

bool RemoteJudge::image_relevant(int image, int concept_id) {
  const auto i = static_cast<std::size_t>(image);
  const std::string subject = i < image_descriptions_.size() ? image_descriptions_[i]
                                                             : "image " + std::to_string(image);
  return judge(SubjectType::image, subject, concepts_.at(static_cast<std::size_t>(concept_id)));
}

bool RemoteJudge::class_relevant(int label, int concept_id) {
  return judge(SubjectType::klass, class_names_.at(static_cast<std::size_t>(label)),
               concepts_.at(static_cast<std::size_t>(concept_id)));
}

std::string RemoteJudge::post(const std::string& prompt) {
  using clock = std::chrono::steady_clock;
  auto now_ms = [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               clock::now().time_since_epoch())
        .count();
  };

  json body = {{"model", endpoint_.model},
               {"temperature", 0},
               {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
  httplib::Headers headers;
  if (!endpoint_.token_env.empty()) {
    if (const char* token = std::getenv(endpoint_.token_env.c_str()))
      headers.emplace("Authorization", std::string("Bearer ") + token);
  }

  httplib::Client client(endpoint_.base_url);
  const auto timeout = std::chrono::duration<double>(endpoint_.timeout_s);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));

  std::string last_error;
  int backoff = endpoint_.backoff_ms;
  for (int attempt = 0; attempt <= endpoint_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
      backoff *= 2;
    }
    if (endpoint_.min_interval_ms > 0 && last_request_ms_ >= 0) {
      const auto wait = last_request_ms_ + endpoint_.min_interval_ms - now_ms();
      if (wait > 0) std::this_thread::sleep_for(std::chrono::milliseconds(wait));
    }
    last_request_ms_ = now_ms();
    ++network_calls_;
    auto res = client.Post(endpoint_.path, headers, body.dump(), "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      throw JudgeError("judge endpoint returned HTTP " + std::to_string(res->status));
    return res->body;
  }
  throw JudgeError("judge endpoint unreachable after " + std::to_string(endpoint_.max_retries + 1) +
                   " attempts: " + last_error);
}

}  // namespace coatcbm
