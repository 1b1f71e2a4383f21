#pragma once

#include <string>
#include <variant>

#include "desklm/errors.hpp"
#include "desklm/model.hpp"
#include "desklm/model_config.hpp"

// Checkpoint container: magic "QWMC", u32 version, u32 tensor count, then
// per tensor a u32 name length, the UTF-8 name, a u8 dtype code
// (0 = fp32, 1 = fp64), a u8 rank, u64 dims, and raw little-endian
// row-major data. The model config rides alongside as "<path>.json" so the
// binary stays a pure tensor container.

namespace desklm::core {

inline constexpr char kCheckpointMagic[4] = {'Q', 'W', 'M', 'C'};
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Weights<float>& w, const ModelConfig& cfg, const std::string& path);
void save_checkpoint(const Weights<double>& w, const ModelConfig& cfg, const std::string& path);

struct LoadedModel {
    ModelConfig cfg;
    std::variant<Weights<float>, Weights<double>> weights;

    Precision precision() const {
        return std::holds_alternative<Weights<float>>(weights) ? Precision::f32 : Precision::f64;
    }
};

LoadedModel load_checkpoint(const std::string& path);

template <typename T>
Weights<T>& weights_as(LoadedModel& m) {
    auto* w = std::get_if<Weights<T>>(&m.weights);
    if (!w)
        throw CheckpointError(CheckpointError::Kind::bad_tensor,
                              "checkpoint precision does not match the requested type");
    return *w;
}

// One line per tensor: name, dtype, shape, element count. For the
// inspect-checkpoint subcommand.
std::string describe_checkpoint(const std::string& path);

} // namespace desklm::core
