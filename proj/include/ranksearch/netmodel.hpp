#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "ranksearch/binio.hpp"
#include "ranksearch/errors.hpp"
#include "ranksearch/lowrank.hpp"
#include "ranksearch/matrix.hpp"

namespace ranksearch {

struct LayerSpec {
    std::string name;
    Matrix weights;
    bool searchable = true;
};

struct LayeredModel {
    std::vector<LayerSpec> layers;
    std::map<std::string, std::string> metadata;

    std::vector<std::size_t> searchable_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].searchable) idx.push_back(i);
        return idx;
    }
};

// One rank decision per searchable layer, in model order. 0 = leave the layer
// uncompressed.
using Scheme = std::vector<int>;

struct CompressedLayer {
    std::string name;
    bool searchable = true;
    bool factored = false;
    Matrix dense;        // valid when !factored
    TruncatedPair pair;  // valid when factored
};

struct CompressedModel {
    std::vector<CompressedLayer> layers;
    std::map<std::string, std::string> metadata;
};

inline void validate_model(const LayeredModel& model) {
    if (model.layers.empty()) throw InvalidMatrix("model must have at least one layer");
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& layer = model.layers[i];
        if (layer.name.empty()) throw InvalidMatrix("layer name must be non-empty");
        if (layer.weights.rows() < 1 || layer.weights.cols() < 1)
            throw InvalidMatrix("layer " + layer.name + " has empty weights");
        for (double x : layer.weights.data())
            if (!std::isfinite(x)) throw InvalidMatrix("layer " + layer.name + " non-finite");
        for (std::size_t j = i + 1; j < model.layers.size(); ++j)
            if (model.layers[j].name == layer.name)
                throw InvalidMatrix("duplicate layer name " + layer.name);
    }
}

inline void validate_scheme(const LayeredModel& model, const Scheme& scheme) {
    const auto idx = model.searchable_indices();
    if (scheme.size() != idx.size())
        throw InvalidScheme("scheme length " + std::to_string(scheme.size()) +
                            " does not match searchable layer count " +
                            std::to_string(idx.size()));
    for (std::size_t i = 0; i < scheme.size(); ++i) {
        const LayerSpec& layer = model.layers[idx[i]];
        const int max_rank =
            static_cast<int>(std::min(layer.weights.rows(), layer.weights.cols()));
        if (scheme[i] < 0 || scheme[i] > max_rank)
            throw InvalidRank("scheme rank " + std::to_string(scheme[i]) +
                              " out of range for layer " + layer.name);
    }
}

// Caches the SVD of each layer so repeated scheme applications during a
// search factorize every matrix exactly once.
class FactorCache {
public:
    explicit FactorCache(const LayeredModel& model) : model_(&model) {}

    const Factorization& factorization(std::size_t layer_index) {
        auto it = cache_.find(layer_index);
        if (it == cache_.end())
            it = cache_.emplace(layer_index, svd(model_->layers[layer_index].weights)).first;
        return it->second;
    }

    const LayeredModel& model() const { return *model_; }

private:
    const LayeredModel* model_;
    std::unordered_map<std::size_t, Factorization> cache_;
};

inline CompressedModel as_uncompressed(const LayeredModel& model) {
    CompressedModel cm;
    cm.metadata = model.metadata;
    for (const LayerSpec& layer : model.layers) {
        CompressedLayer cl;
        cl.name = layer.name;
        cl.searchable = layer.searchable;
        cl.dense = layer.weights;
        cm.layers.push_back(std::move(cl));
    }
    return cm;
}

inline CompressedModel apply_scheme(const LayeredModel& model, const Scheme& scheme,
                                    FactorCache* cache = nullptr) {
    validate_scheme(model, scheme);
    CompressedModel cm;
    cm.metadata = model.metadata;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& layer = model.layers[i];
        CompressedLayer cl;
        cl.name = layer.name;
        cl.searchable = layer.searchable;
        int k = 0;
        if (layer.searchable) k = scheme[pos++];
        if (k > 0) {
            cl.factored = true;
            if (cache != nullptr) {
                cl.pair = truncate(cache->factorization(i), k);
            } else {
                cl.pair = truncate(svd(layer.weights), k);
            }
        } else {
            cl.dense = layer.weights;
        }
        cm.layers.push_back(std::move(cl));
    }
    return cm;
}

inline std::size_t param_count(const LayeredModel& model) {
    std::size_t total = 0;
    for (const LayerSpec& layer : model.layers) total += layer.weights.size();
    return total;
}

inline std::size_t param_count(const CompressedModel& model) {
    std::size_t total = 0;
    for (const CompressedLayer& layer : model.layers) {
        if (layer.factored) {
            total += layer.pair.u_trunc.size() + layer.pair.v_star.size();
        } else {
            total += layer.dense.size();
        }
    }
    return total;
}

// Whole-model speedup: original multiply-accumulate count over the count
// under the scheme. Layers the scheme leaves alone contribute their full
// m*n to both sums.
inline double scheme_speedup(const LayeredModel& model, const Scheme& scheme) {
    validate_scheme(model, scheme);
    double original = 0.0;
    double compressed = 0.0;
    std::size_t pos = 0;
    for (const LayerSpec& layer : model.layers) {
        const double m = static_cast<double>(layer.weights.rows());
        const double n = static_cast<double>(layer.weights.cols());
        original += m * n;
        int k = 0;
        if (layer.searchable) k = scheme[pos++];
        compressed += (k > 0) ? static_cast<double>(k) * (m + n) : m * n;
    }
    return original / compressed;
}

// ---------------------------------------------------------------------------
// On-disk weight format. Little-endian: magic "LRFM", version u32 = 1,
// layer_count u32; per layer name_len u16 + name, flags u8 (bit0 searchable,
// bit1 factored-pair member), m u32, n u32, m*n float64 row-major; then
// metadata_count u32 and (key_len u16, key, val_len u32, val) pairs.
// Compressed models reuse the container with two records per factored layer,
// named "<layer>.u" and "<layer>.v".
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint8_t kFlagSearchable = 0x01;
constexpr std::uint8_t kFlagFactoredMember = 0x02;

inline void write_matrix_record(ByteWriter& w, const std::string& name, std::uint8_t flags,
                                const Matrix& mat) {
    w.str16(name);
    w.u8(flags);
    w.u32(static_cast<std::uint32_t>(mat.rows()));
    w.u32(static_cast<std::uint32_t>(mat.cols()));
    for (double x : mat.data()) w.f64(x);
}

struct MatrixRecord {
    std::string name;
    std::uint8_t flags = 0;
    Matrix mat;
};

inline MatrixRecord read_matrix_record(ByteReader& r) {
    MatrixRecord rec;
    rec.name = r.str16();
    rec.flags = r.u8();
    const std::uint32_t m = r.u32();
    const std::uint32_t n = r.u32();
    if (m == 0 || n == 0) throw FormatError("matrix record with zero dimension", r.offset());
    rec.mat = Matrix(m, n);
    for (double& x : rec.mat.data()) x = r.f64();
    return rec;
}

inline void write_metadata(ByteWriter& w, const std::map<std::string, std::string>& metadata) {
    w.u32(static_cast<std::uint32_t>(metadata.size()));
    for (const auto& [key, val] : metadata) {
        w.str16(key);
        w.str32(val);
    }
}

inline std::map<std::string, std::string> read_metadata(ByteReader& r) {
    std::map<std::string, std::string> metadata;
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string key = r.str16();
        metadata[std::move(key)] = r.str32();
    }
    return metadata;
}

inline void check_header(ByteReader& r, const char* magic) {
    for (int i = 0; i < 4; ++i) {
        if (r.u8() != static_cast<std::uint8_t>(magic[i]))
            throw FormatError("bad magic", r.offset() - 1);
    }
    const std::uint32_t version = r.u32();
    if (version != 1) throw FormatError("unsupported version " + std::to_string(version),
                                        r.offset() - 4);
}

inline void write_header(ByteWriter& w, const char* magic) {
    w.bytes(magic, 4);
    w.u32(1);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_model(const LayeredModel& model) {
    ByteWriter w;
    detail::write_header(w, "LRFM");
    w.u32(static_cast<std::uint32_t>(model.layers.size()));
    for (const LayerSpec& layer : model.layers) {
        const std::uint8_t flags = layer.searchable ? detail::kFlagSearchable : 0;
        detail::write_matrix_record(w, layer.name, flags, layer.weights);
    }
    detail::write_metadata(w, model.metadata);
    return w.buffer();
}

inline LayeredModel deserialize_model(std::vector<std::uint8_t> bytes) {
    ByteReader r(std::move(bytes));
    detail::check_header(r, "LRFM");
    LayeredModel model;
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        detail::MatrixRecord rec = detail::read_matrix_record(r);
        if (rec.flags & detail::kFlagFactoredMember)
            throw FormatError("factored record in plain model file", r.offset());
        LayerSpec layer;
        layer.name = std::move(rec.name);
        layer.searchable = (rec.flags & detail::kFlagSearchable) != 0;
        layer.weights = std::move(rec.mat);
        model.layers.push_back(std::move(layer));
    }
    model.metadata = detail::read_metadata(r);
    if (!r.at_end()) throw FormatError("trailing bytes after model", r.offset());
    validate_model(model);
    return model;
}

inline void save_model(const LayeredModel& model, const std::string& path) {
    write_file_bytes(path, serialize_model(model));
}

inline LayeredModel load_model(const std::string& path) {
    return deserialize_model(read_file_bytes(path));
}

inline std::vector<std::uint8_t> serialize_compressed(const CompressedModel& model) {
    ByteWriter w;
    detail::write_header(w, "LRFM");
    std::uint32_t records = 0;
    for (const CompressedLayer& layer : model.layers) records += layer.factored ? 2 : 1;
    w.u32(records);
    for (const CompressedLayer& layer : model.layers) {
        std::uint8_t flags = layer.searchable ? detail::kFlagSearchable : 0;
        if (layer.factored) {
            flags |= detail::kFlagFactoredMember;
            detail::write_matrix_record(w, layer.name + ".u", flags, layer.pair.u_trunc);
            detail::write_matrix_record(w, layer.name + ".v", flags, layer.pair.v_star);
        } else {
            detail::write_matrix_record(w, layer.name, flags, layer.dense);
        }
    }
    detail::write_metadata(w, model.metadata);
    return w.buffer();
}

inline CompressedModel deserialize_compressed(std::vector<std::uint8_t> bytes) {
    ByteReader r(std::move(bytes));
    detail::check_header(r, "LRFM");
    CompressedModel model;
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        detail::MatrixRecord rec = detail::read_matrix_record(r);
        CompressedLayer layer;
        layer.searchable = (rec.flags & detail::kFlagSearchable) != 0;
        if (rec.flags & detail::kFlagFactoredMember) {
            if (rec.name.size() < 3 || rec.name.substr(rec.name.size() - 2) != ".u")
                throw FormatError("expected '.u' member of factored pair", r.offset());
            if (i + 1 >= count) throw FormatError("unpaired factored record", r.offset());
            detail::MatrixRecord vrec = detail::read_matrix_record(r);
            ++i;
            const std::string base = rec.name.substr(0, rec.name.size() - 2);
            if (vrec.name != base + ".v")
                throw FormatError("factored pair name mismatch", r.offset());
            if (rec.mat.cols() != vrec.mat.rows())
                throw FormatError("factored pair rank mismatch", r.offset());
            layer.name = base;
            layer.factored = true;
            layer.pair.u_trunc = std::move(rec.mat);
            layer.pair.v_star = std::move(vrec.mat);
        } else {
            layer.name = std::move(rec.name);
            layer.dense = std::move(rec.mat);
        }
        model.layers.push_back(std::move(layer));
    }
    model.metadata = detail::read_metadata(r);
    if (!r.at_end()) throw FormatError("trailing bytes after model", r.offset());
    return model;
}

inline void save_compressed(const CompressedModel& model, const std::string& path) {
    write_file_bytes(path, serialize_compressed(model));
}

inline CompressedModel load_compressed(const std::string& path) {
    return deserialize_compressed(read_file_bytes(path));
}

}  // namespace ranksearch
