#pragma once

#include <string>
#include <vector>

#include "desklm/errors.hpp"
#include "desklm/tokenizer.hpp"

// ChatML rendering and parsing. Each turn encodes as
//   <|im_start|>role\ncontent<|im_end|>\n
// and the loss mask is 1 only over assistant content and the assistant
// turn's <|im_end|>, so training never fits the system or user inputs.

namespace desklm::chatml {

inline constexpr const char* kImStart = "<|im_start|>";
inline constexpr const char* kImEnd = "<|im_end|>";

enum class Role { system, user, assistant };

const char* role_name(Role r);
Role role_from_name(const std::string& name); // throws ParseError on unknown role

struct Turn {
    Role role;
    std::string content;
};

struct Conversation {
    std::vector<Turn> turns;

    // Rejects content containing any of the given special-token texts.
    void add_turn(Role role, std::string content,
                  const std::vector<std::string>& forbidden_specials);
};

struct MaskedStream {
    std::vector<int> ids;
    std::vector<uint8_t> mask; // same length; 1 = contributes to the loss
};

// The vocabulary must register <|im_start|> and <|im_end|>. Content
// containing any registered special-token text is rejected.
MaskedStream render(const Conversation& conv, const tok::Vocabulary& v);

// Inverse of render on well-formed streams; errors carry token offsets.
Conversation parse(const std::vector<int>& ids, const tok::Vocabulary& v);

// render(conv) plus the assistant prelude <|im_start|>assistant\n, ready
// for decoding; generation stops at <|im_end|>.
std::vector<int> generation_prompt(const Conversation& conv, const tok::Vocabulary& v);

// One JSON array of {"role": ..., "content": ...} objects.
Conversation conversation_from_json(const std::string& json_text,
                                    const std::vector<std::string>& forbidden_specials);

} // namespace desklm::chatml
