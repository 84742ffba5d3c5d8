#pragma once

// Weight container: magic bytes, format version, a key/value config block,
// then named tensors as (name, dtype tag, dims, little-endian f32 payload).
// Target and speculator files share the layout and differ only in the kind
// tag. Speculator files never hold the embedding or the output head: both
// are frozen views of the target and are rebuilt from it at load time.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "spdl/model.hpp"
#include "spdl/speculator.hpp"

namespace spdl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are raw little-endian words");

namespace detail {

constexpr uint32_t kCkptVersion = 1;
constexpr uint32_t kKindTarget = 0;
constexpr uint32_t kKindSpeculator = 1;
constexpr uint8_t kDtypeF32 = 0;

class FileWriter {
public:
    explicit FileWriter(const std::string& path) : f_(std::fopen(path.c_str(), "wb")) {
        if (f_ == nullptr) {
            throw IoError("cannot open for writing: " + path);
        }
    }
    ~FileWriter() {
        if (f_ != nullptr) {
            std::fclose(f_);
        }
    }
    FileWriter(const FileWriter&) = delete;
    FileWriter& operator=(const FileWriter&) = delete;

    void bytes(const void* p, size_t n) {
        if (std::fwrite(p, 1, n, f_) != n) {
            throw IoError("short write");
        }
    }
    void u8(uint8_t x) { bytes(&x, 1); }
    void u32(uint32_t x) { bytes(&x, 4); }
    void f64(double x) { bytes(&x, 8); }
    void str(const std::string& s) {
        u32((uint32_t)s.size());
        bytes(s.data(), s.size());
    }

private:
    std::FILE* f_;
};

class FileReader {
public:
    explicit FileReader(const std::string& path) : f_(std::fopen(path.c_str(), "rb")) {
        if (f_ == nullptr) {
            throw IoError("cannot open for reading: " + path);
        }
    }
    ~FileReader() {
        if (f_ != nullptr) {
            std::fclose(f_);
        }
    }
    FileReader(const FileReader&) = delete;
    FileReader& operator=(const FileReader&) = delete;

    void bytes(void* p, size_t n) {
        if (std::fread(p, 1, n, f_) != n) {
            throw IoError("truncated checkpoint");
        }
    }
    uint8_t u8() {
        uint8_t x;
        bytes(&x, 1);
        return x;
    }
    uint32_t u32() {
        uint32_t x;
        bytes(&x, 4);
        return x;
    }
    double f64() {
        double x;
        bytes(&x, 8);
        return x;
    }
    std::string str() {
        const uint32_t n = u32();
        if (n > (1u << 20)) {
            throw DataError("unreasonable string length in checkpoint");
        }
        std::string s((size_t)n, '\0');
        bytes(s.data(), s.size());
        return s;
    }
    bool at_eof() {
        const int c = std::fgetc(f_);
        if (c == EOF) {
            return true;
        }
        std::ungetc(c, f_);
        return false;
    }

private:
    std::FILE* f_;
};

using ConfigMap = std::map<std::string, double>;

inline void write_config(FileWriter& w, const ConfigMap& cfg) {
    w.u32((uint32_t)cfg.size());
    for (const auto& [k, v] : cfg) {
        w.str(k);
        w.f64(v);
    }
}

inline ConfigMap read_config(FileReader& r) {
    ConfigMap out;
    const uint32_t n = r.u32();
    if (n > 1024) {
        throw DataError("unreasonable config entry count");
    }
    for (uint32_t i = 0; i < n; ++i) {
        std::string k = r.str();
        out[k] = r.f64();
    }
    return out;
}

inline double config_get(const ConfigMap& cfg, const std::string& key) {
    auto it = cfg.find(key);
    if (it == cfg.end()) {
        throw DataError("checkpoint config missing key: " + key);
    }
    return it->second;
}

template <typename T>
void write_tensors(FileWriter& w, const std::vector<std::pair<std::string, Tensor<T>*>>& named) {
    w.u32((uint32_t)named.size());
    for (const auto& [name, t] : named) {
        w.str(name);
        w.u8(kDtypeF32);
        w.u32((uint32_t)t->rank());
        for (int i = 0; i < t->rank(); ++i) {
            w.u32((uint32_t)t->shape()[(size_t)i]);
        }
        if constexpr (std::is_same_v<T, float>) {
            w.bytes(t->data(), sizeof(float) * (size_t)t->numel());
        } else {
            std::vector<float> buf((size_t)t->numel());
            for (int64_t i = 0; i < t->numel(); ++i) {
                buf[(size_t)i] = (float)t->data()[i];
            }
            w.bytes(buf.data(), sizeof(float) * buf.size());
        }
    }
}

template <typename T>
void read_tensors(FileReader& r, const std::vector<std::pair<std::string, Tensor<T>*>>& named) {
    std::map<std::string, Tensor<T>*> want;
    for (const auto& [name, t] : named) {
        want[name] = t;
    }
    const uint32_t count = r.u32();
    if (count != want.size()) {
        throw DataError("checkpoint tensor count mismatch");
    }
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        auto it = want.find(name);
        if (it == want.end()) {
            throw DataError("unknown tensor in checkpoint: " + name);
        }
        Tensor<T>* t = it->second;
        if (r.u8() != kDtypeF32) {
            throw DataError("unsupported dtype for tensor: " + name);
        }
        const uint32_t rank = r.u32();
        if ((int)rank != t->rank()) {
            throw DataError("rank mismatch for tensor: " + name);
        }
        for (uint32_t d = 0; d < rank; ++d) {
            if ((int)r.u32() != t->shape()[(size_t)d]) {
                throw DataError("shape mismatch for tensor: " + name);
            }
        }
        if constexpr (std::is_same_v<T, float>) {
            r.bytes(t->data(), sizeof(float) * (size_t)t->numel());
        } else {
            std::vector<float> buf((size_t)t->numel());
            r.bytes(buf.data(), sizeof(float) * buf.size());
            for (int64_t j = 0; j < t->numel(); ++j) {
                t->data()[j] = (T)buf[(size_t)j];
            }
        }
        want.erase(it);
    }
    if (!want.empty()) {
        throw DataError("checkpoint missing tensor: " + want.begin()->first);
    }
}

inline ConfigMap model_config_map(const ModelConfig& cfg) {
    return {{"vocab_size", (double)cfg.vocab_size},
            {"hidden_size", (double)cfg.hidden_size},
            {"num_heads", (double)cfg.num_heads},
            {"num_layers", (double)cfg.num_layers},
            {"mlp_hidden", (double)cfg.mlp_hidden},
            {"max_seq_len", (double)cfg.max_seq_len},
            {"rope_theta", (double)cfg.rope_theta},
            {"rms_eps", (double)cfg.rms_eps}};
}

inline ModelConfig model_config_from_map(const ConfigMap& m) {
    ModelConfig cfg;
    cfg.vocab_size = (int)config_get(m, "vocab_size");
    cfg.hidden_size = (int)config_get(m, "hidden_size");
    cfg.num_heads = (int)config_get(m, "num_heads");
    cfg.num_layers = (int)config_get(m, "num_layers");
    cfg.mlp_hidden = (int)config_get(m, "mlp_hidden");
    cfg.max_seq_len = (int)config_get(m, "max_seq_len");
    cfg.rope_theta = (float)config_get(m, "rope_theta");
    cfg.rms_eps = (float)config_get(m, "rms_eps");
    cfg.validate();
    return cfg;
}

inline void read_header(FileReader& r, uint32_t want_kind) {
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "SPDL", 4) != 0) {
        throw DataError("not a weight container (bad magic)");
    }
    if (r.u32() != kCkptVersion) {
        throw DataError("unsupported checkpoint version");
    }
    const uint32_t kind = r.u32();
    if (kind != want_kind) {
        throw DataError(kind == kKindTarget
                            ? "file holds target weights, expected speculator"
                            : "file holds speculator weights, expected target");
    }
}

}  // namespace detail

template <typename T>
void save_target(const std::string& path, TargetModel<T>& model) {
    detail::FileWriter w(path);
    w.bytes("SPDL", 4);
    w.u32(detail::kCkptVersion);
    w.u32(detail::kKindTarget);
    detail::write_config(w, detail::model_config_map(model.cfg));
    detail::write_tensors(w, model.named_parameters());
}

template <typename T>
TargetModel<T> load_target(const std::string& path) {
    detail::FileReader r(path);
    detail::read_header(r, detail::kKindTarget);
    ModelConfig cfg = detail::model_config_from_map(detail::read_config(r));
    TargetModel<T> model(cfg);
    detail::read_tensors(r, model.named_parameters());
    return model;
}

template <typename T>
void save_speculator(const std::string& path, Speculator<T>& spec) {
    detail::FileWriter w(path);
    w.bytes("SPDL", 4);
    w.u32(detail::kCkptVersion);
    w.u32(detail::kKindSpeculator);
    detail::ConfigMap cfg = detail::model_config_map(spec.tcfg);
    cfg["spec_num_heads"] = (double)spec.scfg.num_heads;
    cfg["spec_augment_layers"] = (double)spec.scfg.augment_layers;
    detail::write_config(w, cfg);
    detail::write_tensors(w, spec.named_parameters());
}

// The embedding and output head come from the live target, so the target
// passed here must be the one the speculator was built against.
template <typename T>
Speculator<T> load_speculator(const std::string& path, TargetModel<T>& target) {
    detail::FileReader r(path);
    detail::read_header(r, detail::kKindSpeculator);
    detail::ConfigMap m = detail::read_config(r);
    ModelConfig file_cfg = detail::model_config_from_map(m);
    const ModelConfig& t = target.cfg;
    if (file_cfg.vocab_size != t.vocab_size || file_cfg.hidden_size != t.hidden_size ||
        file_cfg.num_heads != t.num_heads || file_cfg.num_layers != t.num_layers ||
        file_cfg.mlp_hidden != t.mlp_hidden) {
        throw DataError("speculator checkpoint was built for a different target");
    }
    SpeculatorConfig scfg;
    scfg.num_heads = (int)detail::config_get(m, "spec_num_heads");
    scfg.augment_layers = (int)detail::config_get(m, "spec_augment_layers");
    scfg.init_noise = 0.0f;
    Rng rng(0);
    Speculator<T> spec = Speculator<T>::init_from_target(target, scfg, rng);
    detail::read_tensors(r, spec.named_parameters());
    return spec;
}

}  // namespace spdl
