#pragma once

// Fixed byte-level vocabulary: 256 raw byte values plus four specials.
// Conversations serialize as
//   [BOS] ( [SEP] role-name-bytes content-bytes )*  [EOS]
// where role-name is "user" / "assistant" / "system". Generation prompts end
// with [SEP] "assistant" and the model continues with content bytes.

#include <cstdint>
#include <string>
#include <vector>

#include "btx/common.hpp"

namespace btx {

constexpr int32_t kVocabSize = 260;
constexpr int32_t kPad = 256;
constexpr int32_t kBos = 257;
constexpr int32_t kEos = 258;
constexpr int32_t kSep = 259;

enum class Role { User, Assistant, System };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
    case Role::System: return "system";
  }
  return "user";
}

inline Role role_from_name(const std::string& name) {
  if (name == "user") return Role::User;
  if (name == "assistant") return Role::Assistant;
  if (name == "system") return Role::System;
  fail("unknown role: " + name);
}

struct Message {
  Role role;
  std::string content;
};

struct Conversation {
  std::vector<Message> messages;
};

inline std::vector<int32_t> encode_bytes(const std::string& text) {
  std::vector<int32_t> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<int32_t>(c));
  return out;
}

inline std::string decode_bytes(const std::vector<int32_t>& tokens) {
  std::string out;
  for (int32_t t : tokens)
    if (t >= 0 && t < 256) out += static_cast<char>(static_cast<unsigned char>(t));
  return out;
}

// Token role tags aligned with the serialized conversation; used to build
// loss masks and to locate completion spans.
enum class TokenTag : uint8_t { Control, RoleName, UserText, AssistantText, SystemText };

struct TaggedTokens {
  std::vector<int32_t> tokens;
  std::vector<TokenTag> tags;
};

inline void append_message(TaggedTokens& out, Role role, const std::string& content) {
  out.tokens.push_back(kSep);
  out.tags.push_back(TokenTag::Control);
  for (int32_t b : encode_bytes(role_name(role))) {
    out.tokens.push_back(b);
    out.tags.push_back(TokenTag::RoleName);
  }
  TokenTag tag = role == Role::User      ? TokenTag::UserText
                 : role == Role::Assistant ? TokenTag::AssistantText
                                           : TokenTag::SystemText;
  for (int32_t b : encode_bytes(content)) {
    out.tokens.push_back(b);
    out.tags.push_back(tag);
  }
}

inline TaggedTokens serialize_conversation(const Conversation& conv, bool closing_eos = true) {
  TaggedTokens out;
  out.tokens.push_back(kBos);
  out.tags.push_back(TokenTag::Control);
  for (const auto& m : conv.messages) append_message(out, m.role, m.content);
  if (closing_eos) {
    out.tokens.push_back(kEos);
    out.tags.push_back(TokenTag::Control);
  }
  return out;
}

// Serialized prompt that invites an assistant completion.
inline TaggedTokens serialize_prompt(const Conversation& prefix) {
  TaggedTokens out = serialize_conversation(prefix, /*closing_eos=*/false);
  out.tokens.push_back(kSep);
  out.tags.push_back(TokenTag::Control);
  for (int32_t b : encode_bytes(role_name(Role::Assistant))) {
    out.tokens.push_back(b);
    out.tags.push_back(TokenTag::RoleName);
  }
  return out;
}

}  // namespace btx
