#include "desklm/chatml.hpp"

#include <nlohmann/json.hpp>

namespace desklm::chatml {

const char* role_name(Role r) {
    switch (r) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    return "";
}

Role role_from_name(const std::string& name) {
    if (name == "system") return Role::system;
    if (name == "user") return Role::user;
    if (name == "assistant") return Role::assistant;
    throw ParseError("chatml: unknown role '" + name + "'");
}

namespace {

void check_content(const std::string& content, const std::vector<std::string>& specials) {
    for (const auto& s : specials) {
        if (!s.empty() && content.find(s) != std::string::npos)
            throw DomainError("chatml: content contains special token text '" + s + "'");
    }
}

} // namespace

void Conversation::add_turn(Role role, std::string content,
                            const std::vector<std::string>& forbidden_specials) {
    check_content(content, forbidden_specials);
    turns.push_back({role, std::move(content)});
}

MaskedStream render(const Conversation& conv, const tok::Vocabulary& v) {
    const int im_start = v.special_id(kImStart);
    const int im_end = v.special_id(kImEnd);
    MaskedStream out;
    auto append = [&](const std::vector<int>& ids, uint8_t mask) {
        out.ids.insert(out.ids.end(), ids.begin(), ids.end());
        out.mask.insert(out.mask.end(), ids.size(), mask);
    };
    for (const auto& turn : conv.turns) {
        check_content(turn.content, v.special_list);
        const bool assist = turn.role == Role::assistant;
        out.ids.push_back(im_start);
        out.mask.push_back(0);
        append(tok::encode(v, std::string(role_name(turn.role)) + "\n").ids, 0);
        append(tok::encode(v, turn.content).ids, assist ? 1 : 0);
        out.ids.push_back(im_end);
        out.mask.push_back(assist ? 1 : 0);
        append(tok::encode(v, "\n").ids, 0);
    }
    return out;
}

Conversation parse(const std::vector<int>& ids, const tok::Vocabulary& v) {
    const int im_start = v.special_id(kImStart);
    const int im_end = v.special_id(kImEnd);
    Conversation conv;
    size_t i = 0;
    while (i < ids.size()) {
        if (ids[i] != im_start)
            throw ParseError("chatml: expected " + std::string(kImStart) + " at token " +
                             std::to_string(i));
        const size_t open_at = i;
        ++i;
        std::vector<int> body;
        while (i < ids.size() && ids[i] != im_end) {
            if (ids[i] == im_start)
                throw ParseError("chatml: nested " + std::string(kImStart) + " at token " +
                                 std::to_string(i) + " inside the turn opened at token " +
                                 std::to_string(open_at));
            body.push_back(ids[i]);
            ++i;
        }
        if (i == ids.size())
            throw ParseError("chatml: missing " + std::string(kImEnd) + " for the turn opened at token " +
                             std::to_string(open_at));
        ++i; // consume im_end
        const std::string text = tok::decode(v, body);
        const size_t nl = text.find('\n');
        if (nl == std::string::npos)
            throw ParseError("chatml: turn opened at token " + std::to_string(open_at) +
                             " has no role/content separator");
        conv.turns.push_back({role_from_name(text.substr(0, nl)), text.substr(nl + 1)});
        // Between turns: exactly the rendered newline (absent at end of
        // stream when generation stopped at im_end).
        std::vector<int> gap;
        while (i < ids.size() && ids[i] != im_start) {
            gap.push_back(ids[i]);
            ++i;
        }
        const std::string gap_text = tok::decode(v, gap);
        if (gap_text != "\n" && !(gap_text.empty() && i == ids.size()))
            throw ParseError("chatml: unexpected bytes after " + std::string(kImEnd) +
                             " near token " + std::to_string(i));
    }
    return conv;
}

std::vector<int> generation_prompt(const Conversation& conv, const tok::Vocabulary& v) {
    if (!conv.turns.empty() && conv.turns.back().role == Role::assistant)
        throw DomainError("chatml: generation prompt after an assistant turn");
    MaskedStream rendered = render(conv, v);
    std::vector<int> ids = std::move(rendered.ids);
    ids.push_back(v.special_id(kImStart));
    const auto prelude = tok::encode(v, "assistant\n").ids;
    ids.insert(ids.end(), prelude.begin(), prelude.end());
    return ids;
}

Conversation conversation_from_json(const std::string& json_text,
                                    const std::vector<std::string>& forbidden_specials) {
    nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
    if (j.is_discarded() || !j.is_array())
        throw ParseError("chatml: expected a JSON array of {role, content} objects");
    Conversation conv;
    for (const auto& item : j) {
        if (!item.is_object() || !item.contains("role") || !item.contains("content"))
            throw ParseError("chatml: each turn needs 'role' and 'content'");
        conv.add_turn(role_from_name(item["role"].get<std::string>()),
                      item["content"].get<std::string>(), forbidden_specials);
    }
    return conv;
}

} // namespace desklm::chatml
