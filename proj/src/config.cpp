#include "desklm/config.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace desklm {

using nlohmann::json;

namespace {

json model_to_json(const core::ModelConfig& m) {
    return json{{"vocab_size", m.vocab_size},
                {"hidden", m.hidden},
                {"n_heads", m.n_heads},
                {"n_layers", m.n_layers},
                {"ffn_hidden", m.ffn_hidden},
                {"rope_base", m.rope_base},
                {"train_context", m.train_context},
                {"tie_embeddings", m.tie_embeddings},
                {"precision", core::to_string(m.precision)}};
}

core::ModelConfig model_from_json(const json& j) {
    core::ModelConfig m;
    m.vocab_size = j.value("vocab_size", m.vocab_size);
    m.hidden = j.value("hidden", m.hidden);
    m.n_heads = j.value("n_heads", m.n_heads);
    m.n_layers = j.value("n_layers", m.n_layers);
    m.ffn_hidden = j.value("ffn_hidden", size_t(0));
    m.rope_base = j.value("rope_base", m.rope_base);
    m.train_context = j.value("train_context", m.train_context);
    m.tie_embeddings = j.value("tie_embeddings", m.tie_embeddings);
    if (j.contains("precision"))
        m.precision = core::precision_from_string(j["precision"].get<std::string>());
    m.finalize();
    return m;
}

json extension_to_json(const ext::ExtensionConfig& e) {
    json j;
    if (std::holds_alternative<ext::NtkOff>(e.ntk_mode)) {
        j["ntk"] = "off";
    } else if (auto* st = std::get_if<ext::NtkStatic>(&e.ntk_mode)) {
        j["ntk"] = "static";
        j["ntk_scale"] = st->scale;
    } else {
        j["ntk"] = "dynamic";
        j["ntk_chunk"] = std::get<ext::NtkDynamic>(e.ntk_mode).chunk;
    }
    j["logn"] = e.logn;
    if (auto* w = std::get_if<std::vector<size_t>>(&e.window_schedule)) {
        j["windows"] = *w;
    } else if (auto* a = std::get_if<ext::WindowAuto>(&e.window_schedule)) {
        j["windows"] = json{{"w_min", a->w_min}, {"w_max", a->w_max}};
    } else {
        j["windows"] = nullptr;
    }
    return j;
}

ext::ExtensionConfig extension_from_json(const json& j) {
    ext::ExtensionConfig e;
    const std::string mode = j.value("ntk", "off");
    if (mode == "off") {
        e.ntk_mode = ext::NtkOff{};
    } else if (mode == "static") {
        e.ntk_mode = ext::NtkStatic{j.value("ntk_scale", 1.0)};
    } else if (mode == "dynamic") {
        e.ntk_mode = ext::NtkDynamic{j.value("ntk_chunk", size_t(0))};
    } else {
        throw ParseError("config: unknown ntk mode '" + mode + "'");
    }
    e.logn = j.value("logn", false);
    if (j.contains("windows") && !j["windows"].is_null()) {
        const auto& w = j["windows"];
        if (w.is_array()) {
            e.window_schedule = w.get<std::vector<size_t>>();
        } else if (w.is_object()) {
            e.window_schedule =
                ext::WindowAuto{w.value("w_min", size_t(0)), w.value("w_max", size_t(0))};
        } else if (w.is_string() && w.get<std::string>() == "auto") {
            e.window_schedule = ext::WindowAuto{};
        } else {
            throw ParseError("config: windows must be an array, {w_min,w_max}, or \"auto\"");
        }
    }
    return e;
}

json train_to_json(const train::TrainConfig& t) {
    return json{{"peak_lr", t.peak_lr},
                {"warmup_steps", t.warmup_steps},
                {"total_steps", t.total_steps},
                {"min_lr_fraction", t.min_lr_fraction},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"weight_decay", t.weight_decay},
                {"grad_clip", t.grad_clip},
                {"batch_size", t.batch_size},
                {"context", t.context},
                {"dropout", t.dropout}};
}

train::TrainConfig train_from_json(const json& j) {
    train::TrainConfig t;
    t.peak_lr = j.value("peak_lr", t.peak_lr);
    t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
    t.total_steps = j.value("total_steps", t.total_steps);
    t.min_lr_fraction = j.value("min_lr_fraction", t.min_lr_fraction);
    t.beta1 = j.value("beta1", t.beta1);
    t.beta2 = j.value("beta2", t.beta2);
    t.eps = j.value("eps", t.eps);
    t.weight_decay = j.value("weight_decay", t.weight_decay);
    t.grad_clip = j.value("grad_clip", t.grad_clip);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.context = j.value("context", t.context);
    t.dropout = j.value("dropout", t.dropout);
    return t;
}

json engine_to_json(const EngineConfig& c) {
    return json{{"model", model_to_json(c.model)},
                {"extension", extension_to_json(c.extension)},
                {"train", train_to_json(c.train)},
                {"paths", json{{"vocab", c.paths.vocab},
                               {"checkpoint", c.paths.checkpoint},
                               {"corpus", c.paths.corpus}}},
                {"seed", c.seed},
                {"special_tokens", c.special_tokens}};
}

EngineConfig engine_from_json(const json& j) {
    EngineConfig c;
    if (j.contains("model")) c.model = model_from_json(j["model"]);
    if (j.contains("extension")) c.extension = extension_from_json(j["extension"]);
    if (j.contains("train")) c.train = train_from_json(j["train"]);
    if (j.contains("paths")) {
        const auto& p = j["paths"];
        c.paths.vocab = p.value("vocab", "");
        c.paths.checkpoint = p.value("checkpoint", "");
        c.paths.corpus = p.value("corpus", "");
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("special_tokens"))
        c.special_tokens = j["special_tokens"].get<std::vector<std::string>>();
    c.extension.train_context = c.model.train_context;
    if (c.train.context == 0) c.train.context = c.model.train_context;
    return c;
}

} // namespace

EngineConfig engine_config_from_json_string(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError("config: invalid JSON");
    return engine_from_json(j);
}

EngineConfig load_engine_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    try {
        return engine_config_from_json_string(ss.str());
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

std::string engine_config_to_json_string(const EngineConfig& cfg) {
    return engine_to_json(cfg).dump(2);
}

void apply_override(EngineConfig& cfg, const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ParseError("override '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq);
    const std::string value = kv.substr(eq + 1);
    json j = engine_to_json(cfg);
    json* node = &j;
    size_t pos = 0;
    while (true) {
        const size_t dot = key.find('.', pos);
        const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (!node->is_object() || !node->contains(part))
            throw ParseError("override: unknown key '" + key + "'");
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        pos = dot + 1;
    }
    // Parse the value with JSON rules; bare words fall back to strings.
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;
    *node = parsed;
    cfg = engine_from_json(j);
}

std::string model_config_to_json_string(const core::ModelConfig& cfg) {
    return model_to_json(cfg).dump(2);
}

core::ModelConfig model_config_from_json_string(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError("model config: invalid JSON");
    return model_from_json(j);
}

ext::NtkMode parse_ntk_mode(const std::string& text) {
    if (text == "off") return ext::NtkOff{};
    if (text.rfind("static:", 0) == 0) {
        try {
            return ext::NtkStatic{std::stod(text.substr(7))};
        } catch (const std::exception&) {
            throw ParseError("--ntk static:S needs a numeric scale, got '" + text + "'");
        }
    }
    if (text.rfind("dynamic", 0) == 0) {
        if (text == "dynamic") return ext::NtkDynamic{0};
        if (text[7] == ':') {
            try {
                return ext::NtkDynamic{size_t(std::stoull(text.substr(8)))};
            } catch (const std::exception&) {
                throw ParseError("--ntk dynamic:CHUNK needs a count, got '" + text + "'");
            }
        }
    }
    throw ParseError("--ntk expects off|static:S|dynamic:CHUNK, got '" + text + "'");
}

ext::WindowSchedule parse_window_schedule(const std::string& text) {
    if (text.empty() || text == "none") return std::monostate{};
    if (text == "auto") return ext::WindowAuto{};
    if (text.rfind("auto:", 0) == 0) {
        const size_t c2 = text.find(':', 5);
        if (c2 == std::string::npos)
            throw ParseError("--windows auto:MIN:MAX needs two bounds, got '" + text + "'");
        try {
            return ext::WindowAuto{size_t(std::stoull(text.substr(5, c2 - 5))),
                                   size_t(std::stoull(text.substr(c2 + 1)))};
        } catch (const std::exception&) {
            throw ParseError("--windows auto:MIN:MAX needs counts, got '" + text + "'");
        }
    }
    std::vector<size_t> sizes;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            sizes.push_back(size_t(std::stoull(item)));
        } catch (const std::exception&) {
            throw ParseError("--windows expects comma-separated sizes, got '" + text + "'");
        }
    }
    if (sizes.empty()) throw ParseError("--windows got an empty list");
    return sizes;
}

ext::ExtensionConfig parse_technique_set(const std::string& label, size_t train_context) {
    ext::ExtensionConfig e;
    e.train_context = train_context;
    if (label == "off") return e;
    std::stringstream ss(label);
    std::string part;
    while (std::getline(ss, part, '+')) {
        if (part == "ntk" || part == "dynamic" || part == "dynamic_ntk") {
            e.ntk_mode = ext::NtkDynamic{0};
        } else if (part == "logn") {
            e.logn = true;
        } else if (part == "window" || part == "window_attn") {
            e.window_schedule = ext::WindowAuto{};
        } else {
            throw ParseError("unknown technique '" + part + "' in set '" + label + "'");
        }
    }
    return e;
}

} // namespace desklm
