#pragma once

#include <string>
#include <vector>

#include "desklm/extension.hpp"
#include "desklm/model_config.hpp"
#include "desklm/training.hpp"

namespace desklm {

// Everything a run needs, loaded from one JSON file and overridable from
// the command line with --set key=value (flags win).
struct EngineConfig {
    core::ModelConfig model;
    ext::ExtensionConfig extension;
    train::TrainConfig train;
    struct Paths {
        std::string vocab;
        std::string checkpoint;
        std::string corpus;
    } paths;
    uint64_t seed = 42;
    std::vector<std::string> special_tokens = {"<|endoftext|>", "<|im_start|>", "<|im_end|>"};
};

EngineConfig engine_config_from_json_string(const std::string& text);
EngineConfig load_engine_config(const std::string& path);
std::string engine_config_to_json_string(const EngineConfig& cfg);

// Dotted-path override, e.g. "model.hidden=256" or "extension.logn=true".
void apply_override(EngineConfig& cfg, const std::string& key_equals_value);

std::string model_config_to_json_string(const core::ModelConfig& cfg);
core::ModelConfig model_config_from_json_string(const std::string& text);

// "--ntk off|static:S|dynamic:CHUNK"
ext::NtkMode parse_ntk_mode(const std::string& text);
// "--windows w0,w1,..." or "--windows auto:MIN:MAX" or "auto"
ext::WindowSchedule parse_window_schedule(const std::string& text);
// "off" or '+'-joined subset of {ntk, logn, window}, e.g. "ntk+logn+window".
ext::ExtensionConfig parse_technique_set(const std::string& label, size_t train_context);

} // namespace desklm
