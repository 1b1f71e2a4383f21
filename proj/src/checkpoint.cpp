#include "desklm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "desklm/config.hpp"

namespace desklm::core {

namespace {

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    return v;
}
uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8))
        throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    return v;
}
uint8_t read_u8(std::istream& is) {
    char c = 0;
    if (!is.get(c))
        throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    return uint8_t(c);
}

template <typename T>
constexpr uint8_t dtype_code() {
    return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
void save_impl(const Weights<T>& w, const ModelConfig& cfg, const std::string& path) {
    // parameters() wants a mutable ref purely for the optimizer's sake.
    auto params = parameters(const_cast<Weights<T>&>(w), cfg);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + path);
    f.write(kCheckpointMagic, 4);
    write_u32(f, kCheckpointVersion);
    write_u32(f, uint32_t(params.size()));
    for (const auto& p : params) {
        write_u32(f, uint32_t(p.name.size()));
        f.write(p.name.data(), std::streamsize(p.name.size()));
        f.put(char(dtype_code<T>()));
        f.put(char(p.tensor->rank()));
        for (size_t d : p.tensor->shape) write_u64(f, uint64_t(d));
        f.write(reinterpret_cast<const char*>(p.tensor->data.data()),
                std::streamsize(p.tensor->data.size() * sizeof(T)));
    }
    if (!f) throw IoError("short write to checkpoint " + path);

    std::ofstream cj(path + ".json", std::ios::trunc);
    if (!cj) throw IoError("cannot write checkpoint config " + path + ".json");
    cj << model_config_to_json_string(cfg) << "\n";
    if (!cj) throw IoError("short write to checkpoint config " + path + ".json");
}

template <typename T>
void load_tensors(std::istream& f, uint32_t count, Weights<T>& w, const ModelConfig& cfg,
                  uint8_t first_dtype, std::string first_name,
                  std::vector<size_t> first_shape) {
    auto params = parameters(w, cfg);
    size_t filled = 0;
    std::string name = std::move(first_name);
    uint8_t dtype = first_dtype;
    std::vector<size_t> shape = std::move(first_shape);
    for (uint32_t idx = 0; idx < count; ++idx) {
        if (idx > 0) {
            const uint32_t name_len = read_u32(f);
            name.resize(name_len);
            if (!f.read(name.data(), name_len))
                throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
            dtype = read_u8(f);
            const uint8_t rank = read_u8(f);
            shape.assign(rank, 0);
            for (auto& d : shape) d = size_t(read_u64(f));
        }
        if (dtype != dtype_code<T>())
            throw CheckpointError(CheckpointError::Kind::bad_tensor,
                                  "checkpoint: tensor '" + name + "' dtype differs from config");
        ParamRef<T>* target = nullptr;
        for (auto& p : params)
            if (p.name == name) target = &p;
        if (!target)
            throw CheckpointError(CheckpointError::Kind::bad_tensor,
                                  "checkpoint: unknown tensor '" + name + "'");
        if (target->tensor->shape != shape)
            throw CheckpointError(CheckpointError::Kind::bad_tensor,
                                  "checkpoint: tensor '" + name + "' has unexpected shape");
        if (!f.read(reinterpret_cast<char*>(target->tensor->data.data()),
                    std::streamsize(target->tensor->data.size() * sizeof(T))))
            throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
        ++filled;
    }
    if (filled != params.size())
        throw CheckpointError(CheckpointError::Kind::bad_tensor,
                              "checkpoint: missing tensors for this configuration");
}

} // namespace

void save_checkpoint(const Weights<float>& w, const ModelConfig& cfg, const std::string& path) {
    save_impl(w, cfg, path);
}
void save_checkpoint(const Weights<double>& w, const ModelConfig& cfg, const std::string& path) {
    save_impl(w, cfg, path);
}

LoadedModel load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path);

    char magic[4] = {};
    if (!f.read(magic, 4))
        throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw CheckpointError(CheckpointError::Kind::bad_magic,
                              "not a checkpoint file (bad magic)");
    const uint32_t version = read_u32(f);
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Kind::bad_version,
                              "unsupported checkpoint version " + std::to_string(version));
    const uint32_t count = read_u32(f);
    if (count == 0)
        throw CheckpointError(CheckpointError::Kind::bad_tensor, "checkpoint has no tensors");

    std::ifstream cj(path + ".json");
    if (!cj) throw IoError("cannot open checkpoint config " + path + ".json");
    std::stringstream ss;
    ss << cj.rdbuf();
    LoadedModel out;
    out.cfg = model_config_from_json_string(ss.str());

    // Peek the first tensor header to pick the precision.
    const uint32_t name_len = read_u32(f);
    std::string name(name_len, '\0');
    if (!f.read(name.data(), name_len))
        throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    const uint8_t dtype = read_u8(f);
    const uint8_t rank = read_u8(f);
    std::vector<size_t> shape(rank);
    for (auto& d : shape) d = size_t(read_u64(f));

    if (dtype == 0) {
        Weights<float> w = make_weights<float>(out.cfg);
        load_tensors(f, count, w, out.cfg, dtype, std::move(name), std::move(shape));
        out.weights = std::move(w);
    } else if (dtype == 1) {
        Weights<double> w = make_weights<double>(out.cfg);
        load_tensors(f, count, w, out.cfg, dtype, std::move(name), std::move(shape));
        out.weights = std::move(w);
    } else {
        throw CheckpointError(CheckpointError::Kind::bad_tensor,
                              "checkpoint: unknown dtype code " + std::to_string(dtype));
    }
    return out;
}

std::string describe_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path);
    f.seekg(0, std::ios::end);
    const std::streamoff file_size = f.tellg();
    f.seekg(0, std::ios::beg);
    char magic[4] = {};
    if (!f.read(magic, 4))
        throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw CheckpointError(CheckpointError::Kind::bad_magic,
                              "not a checkpoint file (bad magic)");
    const uint32_t version = read_u32(f);
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Kind::bad_version,
                              "unsupported checkpoint version " + std::to_string(version));
    const uint32_t count = read_u32(f);
    std::ostringstream out;
    out << "version " << version << ", " << count << " tensors\n";
    size_t total = 0;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_u32(f);
        std::string name(name_len, '\0');
        if (!f.read(name.data(), name_len))
            throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
        const uint8_t dtype = read_u8(f);
        const uint8_t rank = read_u8(f);
        size_t elems = 1;
        out << "  " << name << "  " << (dtype == 0 ? "fp32" : "fp64") << " [";
        for (uint8_t r = 0; r < rank; ++r) {
            const uint64_t d = read_u64(f);
            elems *= size_t(d);
            out << d << (r + 1 < rank ? ", " : "");
        }
        out << "] " << elems << " elements\n";
        total += elems;
        const size_t bytes = elems * (dtype == 0 ? 4 : 8);
        if (std::streamoff(f.tellg()) + std::streamoff(bytes) > file_size)
            throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
        f.seekg(std::streamoff(bytes), std::ios::cur);
    }
    out << "total parameters: " << total << "\n";
    return out.str();
}

} // namespace desklm::core
