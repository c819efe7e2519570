#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ranksearch/binio.hpp"
#include "ranksearch/errors.hpp"
#include "ranksearch/matrix.hpp"
#include "ranksearch/netmodel.hpp"
#include "ranksearch/rng.hpp"

namespace ranksearch {

// Single-layer LSTM policy: l steps, one learned position embedding per step,
// step i's hidden state feeding a per-layer linear head of d units + softmax.
// All trainable state lives in one flat vector so the Adam update, the
// checkpoint format and finite-difference checks stay uniform.

struct ControllerConfig {
    int num_layers = 1;   // l: one decision per searchable layer
    int num_options = 2;  // d: options per decision
    int hidden = 100;     // H
    int embed = 100;      // E

    int gates() const { return 4 * hidden; }
    // Offsets into the flat parameter vector.
    std::size_t off_wx() const { return 0; }
    std::size_t off_wh() const { return off_wx() + std::size_t(embed) * gates(); }
    std::size_t off_b() const { return off_wh() + std::size_t(hidden) * gates(); }
    std::size_t off_embed() const { return off_b() + std::size_t(gates()); }
    std::size_t off_head_w() const { return off_embed() + std::size_t(num_layers) * embed; }
    std::size_t off_head_b() const {
        return off_head_w() + std::size_t(num_layers) * hidden * num_options;
    }
    std::size_t param_count() const {
        return off_head_b() + std::size_t(num_layers) * num_options;
    }

    std::size_t wx(int e, int g) const { return off_wx() + std::size_t(e) * gates() + g; }
    std::size_t wh(int h, int g) const { return off_wh() + std::size_t(h) * gates() + g; }
    std::size_t b(int g) const { return off_b() + std::size_t(g); }
    std::size_t pos(int layer, int e) const {
        return off_embed() + std::size_t(layer) * embed + e;
    }
    std::size_t head_w(int layer, int h, int option) const {
        return off_head_w() + (std::size_t(layer) * hidden + h) * num_options + option;
    }
    std::size_t head_b(int layer, int option) const {
        return off_head_b() + std::size_t(layer) * num_options + option;
    }
};

struct ControllerParams {
    ControllerConfig cfg;
    std::vector<double> theta;
    std::vector<double> adam_m;
    std::vector<double> adam_v;
    std::int64_t adam_step = 0;
    std::uint64_t revision = 0;  // bumped on every update; guards stale caches
};

struct PolicyOutput {
    Matrix dist;  // l x d, rows sum to 1
    // Forward intermediates for the backward pass, indexed per step.
    std::vector<std::vector<double>> gate_i, gate_f, gate_g, gate_o;
    std::vector<std::vector<double>> cell, cell_tanh, hidden;
    std::uint64_t params_revision = 0;
};

struct SampledScheme {
    std::vector<int> indices;   // j_i, option index per decision
    std::vector<double> probs;  // p_i = D[i][j_i]
};

inline ControllerParams init_controller(int num_layers, int num_options, int hidden, int embed,
                                        std::uint64_t seed) {
    if (num_layers < 1 || num_options < 1 || hidden < 1 || embed < 1)
        throw ConfigError("controller sizes must be >= 1");
    ControllerParams p;
    p.cfg = ControllerConfig{num_layers, num_options, hidden, embed};
    const std::size_t n = p.cfg.param_count();
    p.theta.resize(n);
    p.adam_m.assign(n, 0.0);
    p.adam_v.assign(n, 0.0);
    Rng rng(seed);
    for (double& x : p.theta) x = rng.uniform(-0.08, 0.08);
    return p;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline PolicyOutput forward(const ControllerParams& params) {
    const ControllerConfig& c = params.cfg;
    const int H = c.hidden;
    const int G = c.gates();
    const std::vector<double>& t = params.theta;

    PolicyOutput out;
    out.dist = Matrix(c.num_layers, c.num_options);
    out.params_revision = params.revision;
    const int L = c.num_layers;
    out.gate_i.resize(L);
    out.gate_f.resize(L);
    out.gate_g.resize(L);
    out.gate_o.resize(L);
    out.cell.resize(L);
    out.cell_tanh.resize(L);
    out.hidden.resize(L);

    std::vector<double> h(H, 0.0), cell(H, 0.0), z(G);
    for (int step = 0; step < L; ++step) {
        for (int g = 0; g < G; ++g) z[g] = t[c.b(g)];
        for (int e = 0; e < c.embed; ++e) {
            const double x = t[c.pos(step, e)];
            const std::size_t row = c.wx(e, 0);
            for (int g = 0; g < G; ++g) z[g] += x * t[row + g];
        }
        for (int hh = 0; hh < H; ++hh) {
            const double hv = h[hh];
            if (hv == 0.0) continue;
            const std::size_t row = c.wh(hh, 0);
            for (int g = 0; g < G; ++g) z[g] += hv * t[row + g];
        }

        auto& gi = out.gate_i[step];
        auto& gf = out.gate_f[step];
        auto& gg = out.gate_g[step];
        auto& go = out.gate_o[step];
        gi.resize(H);
        gf.resize(H);
        gg.resize(H);
        go.resize(H);
        for (int hh = 0; hh < H; ++hh) {
            gi[hh] = sigmoid(z[hh]);
            gf[hh] = sigmoid(z[H + hh]);
            gg[hh] = std::tanh(z[2 * H + hh]);
            go[hh] = sigmoid(z[3 * H + hh]);
        }
        for (int hh = 0; hh < H; ++hh) cell[hh] = gf[hh] * cell[hh] + gi[hh] * gg[hh];
        out.cell[step] = cell;
        auto& ct = out.cell_tanh[step];
        ct.resize(H);
        for (int hh = 0; hh < H; ++hh) ct[hh] = std::tanh(cell[hh]);
        for (int hh = 0; hh < H; ++hh) h[hh] = go[hh] * ct[hh];
        out.hidden[step] = h;

        // Head + softmax in log space with max subtraction.
        std::vector<double> logits(c.num_options);
        for (int o = 0; o < c.num_options; ++o) logits[o] = t[c.head_b(step, o)];
        for (int hh = 0; hh < H; ++hh) {
            const double hv = h[hh];
            for (int o = 0; o < c.num_options; ++o) logits[o] += hv * t[c.head_w(step, hh, o)];
        }
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double denom = 0.0;
        for (int o = 0; o < c.num_options; ++o) {
            logits[o] = std::exp(logits[o] - mx);
            denom += logits[o];
        }
        for (int o = 0; o < c.num_options; ++o) {
            const double p = logits[o] / denom;
            if (!std::isfinite(p)) throw NumericalError("controller forward produced non-finite");
            out.dist(step, o) = p;
        }
    }
    return out;
}

inline SampledScheme sample(const PolicyOutput& output, Rng& rng) {
    SampledScheme s;
    const std::size_t L = output.dist.rows();
    const std::size_t d = output.dist.cols();
    s.indices.resize(L);
    s.probs.resize(L);
    for (std::size_t i = 0; i < L; ++i) {
        const double u = rng.uniform();
        double cum = 0.0;
        std::size_t j = d - 1;
        for (std::size_t o = 0; o < d; ++o) {
            cum += output.dist(i, o);
            if (u < cum) {
                j = o;
                break;
            }
        }
        s.indices[i] = static_cast<int>(j);
        s.probs[i] = output.dist(i, j);
    }
    return s;
}

// Gradient of L(theta) = -(sum_i log p_i) * r, by full backpropagation through
// every softmax head and the LSTM unrolled over all l steps.
inline std::vector<double> policy_gradient(const ControllerParams& params,
                                           const PolicyOutput& output,
                                           const SampledScheme& sampled, double r) {
    if (output.params_revision != params.revision)
        throw StaleCache("forward cache does not match current parameters");
    const ControllerConfig& c = params.cfg;
    const int H = c.hidden;
    const int G = c.gates();
    const int L = c.num_layers;
    const std::vector<double>& t = params.theta;

    std::vector<double> grad(c.param_count(), 0.0);
    // dL/dh from each step's head.
    std::vector<std::vector<double>> dh_head(L, std::vector<double>(H, 0.0));
    for (int step = 0; step < L; ++step) {
        const int j = sampled.indices[step];
        for (int o = 0; o < c.num_options; ++o) {
            // dL/dlogit_o = r * (D_o - [o == j])
            const double dlogit = r * (output.dist(step, o) - (o == j ? 1.0 : 0.0));
            grad[c.head_b(step, o)] += dlogit;
            for (int hh = 0; hh < H; ++hh) {
                grad[c.head_w(step, hh, o)] += output.hidden[step][hh] * dlogit;
                dh_head[step][hh] += t[c.head_w(step, hh, o)] * dlogit;
            }
        }
    }

    std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0), dz(G);
    for (int step = L - 1; step >= 0; --step) {
        const auto& gi = output.gate_i[step];
        const auto& gf = output.gate_f[step];
        const auto& gg = output.gate_g[step];
        const auto& go = output.gate_o[step];
        const auto& ct = output.cell_tanh[step];
        const std::vector<double>* c_prev = (step > 0) ? &output.cell[step - 1] : nullptr;
        const std::vector<double>* h_prev = (step > 0) ? &output.hidden[step - 1] : nullptr;

        for (int hh = 0; hh < H; ++hh) {
            const double dh = dh_head[step][hh] + dh_next[hh];
            const double dO = dh * ct[hh];
            const double dc = dh * go[hh] * (1.0 - ct[hh] * ct[hh]) + dc_next[hh];
            const double dI = dc * gg[hh];
            const double dF = dc * (c_prev ? (*c_prev)[hh] : 0.0);
            const double dG = dc * gi[hh];
            dz[hh] = dI * gi[hh] * (1.0 - gi[hh]);
            dz[H + hh] = dF * gf[hh] * (1.0 - gf[hh]);
            dz[2 * H + hh] = dG * (1.0 - gg[hh] * gg[hh]);
            dz[3 * H + hh] = dO * go[hh] * (1.0 - go[hh]);
            dc_next[hh] = dc * gf[hh];
        }

        for (int g = 0; g < G; ++g) grad[c.b(g)] += dz[g];
        for (int e = 0; e < c.embed; ++e) {
            const double x = t[c.pos(step, e)];
            const std::size_t row = c.wx(e, 0);
            double dx = 0.0;
            for (int g = 0; g < G; ++g) {
                grad[row + g] += x * dz[g];
                dx += t[row + g] * dz[g];
            }
            grad[c.pos(step, e)] += dx;
        }
        for (int hh = 0; hh < H; ++hh) {
            const double hv = h_prev ? (*h_prev)[hh] : 0.0;
            const std::size_t row = c.wh(hh, 0);
            double dhp = 0.0;
            for (int g = 0; g < G; ++g) {
                grad[row + g] += hv * dz[g];
                dhp += t[row + g] * dz[g];
            }
            dh_next[hh] = dhp;
        }
    }
    return grad;
}

// Adam step descending the policy loss.
inline void apply_update(ControllerParams& params, const std::vector<double>& grad,
                         double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8) {
    if (grad.size() != params.theta.size())
        throw ConfigError("gradient size does not match parameter count");
    for (double g : grad)
        if (!std::isfinite(g)) throw NumericalError("non-finite gradient");

    params.adam_step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(params.adam_step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(params.adam_step));
    for (std::size_t i = 0; i < grad.size(); ++i) {
        params.adam_m[i] = beta1 * params.adam_m[i] + (1.0 - beta1) * grad[i];
        params.adam_v[i] = beta2 * params.adam_v[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double mhat = params.adam_m[i] / bc1;
        const double vhat = params.adam_v[i] / bc2;
        params.theta[i] -= learning_rate * mhat / (std::sqrt(vhat) + eps);
    }
    params.revision += 1;
}

// Log-probability of a set of sampled indices under a forward pass; the
// floor keeps the loss finite when a head saturates.
inline double log_prob_sum(const PolicyOutput& output, const std::vector<int>& indices) {
    double s = 0.0;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const double p = std::max(output.dist(i, indices[i]), 1e-30);
        s += std::log(p);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Checkpoint: the weight-file container with magic "LRCP". Stores each logical
// tensor plus Adam state and the step counter; round-trip is bit-exact.
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> serialize_controller(const ControllerParams& params) {
    const ControllerConfig& c = params.cfg;
    ByteWriter w;
    detail::write_header(w, "LRCP");

    auto slice = [&](std::size_t off, std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < rows * cols; ++i) m.data()[i] = params.theta[off + i];
        return m;
    };

    std::vector<std::pair<std::string, Matrix>> tensors;
    tensors.emplace_back("lstm.wx", slice(c.off_wx(), c.embed, c.gates()));
    tensors.emplace_back("lstm.wh", slice(c.off_wh(), c.hidden, c.gates()));
    tensors.emplace_back("lstm.b", slice(c.off_b(), 1, c.gates()));
    tensors.emplace_back("embed", slice(c.off_embed(), c.num_layers, c.embed));
    for (int i = 0; i < c.num_layers; ++i) {
        tensors.emplace_back("head." + std::to_string(i) + ".w",
                             slice(c.head_w(i, 0, 0), c.hidden, c.num_options));
        tensors.emplace_back("head." + std::to_string(i) + ".b",
                             slice(c.head_b(i, 0), 1, c.num_options));
    }
    Matrix am(1, params.adam_m.size());
    am.data() = params.adam_m;
    Matrix av(1, params.adam_v.size());
    av.data() = params.adam_v;
    tensors.emplace_back("adam.m", std::move(am));
    tensors.emplace_back("adam.v", std::move(av));

    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, mat] : tensors) detail::write_matrix_record(w, name, 0, mat);

    std::map<std::string, std::string> meta;
    meta["num_layers"] = std::to_string(c.num_layers);
    meta["num_options"] = std::to_string(c.num_options);
    meta["hidden"] = std::to_string(c.hidden);
    meta["embed"] = std::to_string(c.embed);
    meta["adam_step"] = std::to_string(params.adam_step);
    detail::write_metadata(w, meta);
    return w.buffer();
}

inline ControllerParams deserialize_controller(std::vector<std::uint8_t> bytes) {
    ByteReader r(std::move(bytes));
    detail::check_header(r, "LRCP");
    const std::uint32_t count = r.u32();
    std::vector<detail::MatrixRecord> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) records.push_back(detail::read_matrix_record(r));
    auto meta = detail::read_metadata(r);
    if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());

    auto meta_int = [&](const char* key) {
        auto it = meta.find(key);
        if (it == meta.end()) throw FormatError(std::string("missing metadata ") + key, 0);
        return std::stoll(it->second);
    };
    ControllerParams p;
    p.cfg = ControllerConfig{static_cast<int>(meta_int("num_layers")),
                             static_cast<int>(meta_int("num_options")),
                             static_cast<int>(meta_int("hidden")),
                             static_cast<int>(meta_int("embed"))};
    p.adam_step = meta_int("adam_step");
    p.theta.assign(p.cfg.param_count(), 0.0);

    auto find = [&](const std::string& name) -> const Matrix& {
        for (const auto& rec : records)
            if (rec.name == name) return rec.mat;
        throw FormatError("missing tensor " + name, 0);
    };
    auto place = [&](const std::string& name, std::size_t off, std::size_t n) {
        const Matrix& m = find(name);
        if (m.size() != n) throw FormatError("tensor " + name + " has wrong size", 0);
        for (std::size_t i = 0; i < n; ++i) p.theta[off + i] = m.data()[i];
    };
    const ControllerConfig& c = p.cfg;
    place("lstm.wx", c.off_wx(), std::size_t(c.embed) * c.gates());
    place("lstm.wh", c.off_wh(), std::size_t(c.hidden) * c.gates());
    place("lstm.b", c.off_b(), c.gates());
    place("embed", c.off_embed(), std::size_t(c.num_layers) * c.embed);
    for (int i = 0; i < c.num_layers; ++i) {
        place("head." + std::to_string(i) + ".w", c.head_w(i, 0, 0),
              std::size_t(c.hidden) * c.num_options);
        place("head." + std::to_string(i) + ".b", c.head_b(i, 0), c.num_options);
    }
    const Matrix& am = find("adam.m");
    const Matrix& av = find("adam.v");
    if (am.size() != p.theta.size() || av.size() != p.theta.size())
        throw FormatError("optimizer state size mismatch", 0);
    p.adam_m = am.data();
    p.adam_v = av.data();
    return p;
}

inline void save_controller(const ControllerParams& params, const std::string& path) {
    write_file_bytes(path, serialize_controller(params));
}

inline ControllerParams load_controller(const std::string& path) {
    return deserialize_controller(read_file_bytes(path));
}

}  // namespace ranksearch
