#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include "json.hpp"
#include "ranksearch/errors.hpp"
#include "ranksearch/matrix.hpp"
#include "ranksearch/netmodel.hpp"
#include "ranksearch/rng.hpp"

namespace ranksearch {

// ---------------------------------------------------------------------------
// Datasets and evaluation results
// ---------------------------------------------------------------------------

struct Sample {
    int id = 0;
    std::vector<double> features;
    int label = 0;
    int length = 1;  // reference-token count; 1 for the toy classifier
};

struct Dataset {
    std::string split;  // train | dev | condensed | test
    std::vector<Sample> samples;
};

struct EvalResult {
    double aggregate = 0.0;  // error percent in [0, 100]
    std::optional<std::vector<double>> per_sample;
    std::int64_t wall_ms = 0;
};

namespace detail {

inline std::int64_t elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - start)
        .count();
}

// Forward pass over a whole split at once: x*W per dense layer, (x*U')*V*
// per factored layer, tanh between layers, argmax at the output.
inline Matrix forward_logits(const CompressedModel& model, const Matrix& features) {
    Matrix x = features;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        const CompressedLayer& layer = model.layers[li];
        const std::size_t in_dim =
            layer.factored ? layer.pair.u_trunc.rows() : layer.dense.rows();
        if (x.cols() != in_dim)
            throw ModelShapeError("layer " + layer.name + " expects " + std::to_string(in_dim) +
                                  " inputs, got " + std::to_string(x.cols()));
        x = layer.factored ? matmul(matmul(x, layer.pair.u_trunc), layer.pair.v_star)
                           : matmul(x, layer.dense);
        if (li + 1 < model.layers.size())
            for (double& v : x.data()) v = std::tanh(v);
    }
    return x;
}

}  // namespace detail

inline EvalResult evaluate(const CompressedModel& model, const Dataset& dataset,
                           bool with_per_sample = false) {
    const auto start = std::chrono::steady_clock::now();
    if (dataset.samples.empty()) throw EvaluatorError("empty dataset " + dataset.split);

    Matrix features(dataset.samples.size(), dataset.samples[0].features.size());
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        if (dataset.samples[i].features.size() != features.cols())
            throw ModelShapeError("inconsistent feature widths in split " + dataset.split);
        for (std::size_t j = 0; j < features.cols(); ++j)
            features(i, j) = dataset.samples[i].features[j];
    }
    Matrix logits = detail::forward_logits(model, features);

    double weighted_err = 0.0;
    double total_len = 0.0;
    std::vector<double> per_sample(dataset.samples.size(), 0.0);
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        std::size_t arg = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j)
            if (logits(i, j) > logits(i, arg)) arg = j;
        const double err = (static_cast<int>(arg) == dataset.samples[i].label) ? 0.0 : 100.0;
        per_sample[i] = err;
        weighted_err += err * dataset.samples[i].length;
        total_len += dataset.samples[i].length;
    }

    EvalResult result;
    result.aggregate = weighted_err / total_len;
    if (with_per_sample) result.per_sample = std::move(per_sample);
    result.wall_ms = detail::elapsed_ms(start);
    return result;
}

inline EvalResult evaluate(const LayeredModel& model, const Dataset& dataset,
                           bool with_per_sample = false) {
    return evaluate(as_uncompressed(model), dataset, with_per_sample);
}

// Dense view of a compressed model, with every factored pair multiplied back.
inline LayeredModel densify(const CompressedModel& model) {
    LayeredModel out;
    out.metadata = model.metadata;
    for (const CompressedLayer& layer : model.layers) {
        LayerSpec spec;
        spec.name = layer.name;
        spec.searchable = layer.searchable;
        spec.weights = layer.factored ? matmul(layer.pair.u_trunc, layer.pair.v_star)
                                      : layer.dense;
        out.layers.push_back(std::move(spec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluator interface: the search only ever sees this.
// ---------------------------------------------------------------------------

class ErrorEvaluator {
public:
    virtual ~ErrorEvaluator() = default;
    virtual EvalResult evaluate(const CompressedModel& model, const std::string& dataset_id,
                                bool per_sample) = 0;
};

// ---------------------------------------------------------------------------
// Gradient trainer shared by baseline profile construction and retraining.
// Factored layers keep their U'/V* split; both halves are trainable.
// ---------------------------------------------------------------------------

struct TrainOptions {
    int epochs = 20;
    double learning_rate = 0.01;
    double momentum = 0.9;
    int batch_size = 32;
    std::uint64_t seed = 1;
    std::set<std::string> frozen;  // layer names excluded from updates
};

namespace detail {

struct LayerGrads {
    Matrix a;  // dense or u_trunc
    Matrix b;  // v_star when factored
};

// Softmax cross-entropy over the batch; writes dlogits in place.
inline void softmax_xent_backward(Matrix& logits, const std::vector<int>& labels) {
    const double inv_batch = 1.0 / static_cast<double>(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        double mx = logits(i, 0);
        for (std::size_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            logits(i, j) = std::exp(logits(i, j) - mx);
            denom += logits(i, j);
        }
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            logits(i, j) /= denom;
            if (static_cast<int>(j) == labels[i]) logits(i, j) -= 1.0;
            logits(i, j) *= inv_batch;
        }
    }
}

}  // namespace detail

// Trains the model in place; returns the train-split error after each epoch.
inline std::vector<double> train_compressed(CompressedModel& model, const Dataset& train,
                                            const TrainOptions& opt) {
    Rng rng(opt.seed);
    const std::size_t num_layers = model.layers.size();
    std::vector<detail::LayerGrads> velocity(num_layers);
    for (std::size_t li = 0; li < num_layers; ++li) {
        const CompressedLayer& layer = model.layers[li];
        if (layer.factored) {
            velocity[li].a = Matrix(layer.pair.u_trunc.rows(), layer.pair.u_trunc.cols());
            velocity[li].b = Matrix(layer.pair.v_star.rows(), layer.pair.v_star.cols());
        } else {
            velocity[li].a = Matrix(layer.dense.rows(), layer.dense.cols());
        }
    }

    std::vector<std::size_t> order(train.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> epoch_errors;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t begin = 0; begin < order.size();
             begin += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end =
                std::min(order.size(), begin + static_cast<std::size_t>(opt.batch_size));
            const std::size_t bsz = end - begin;

            Matrix x(bsz, train.samples[0].features.size());
            std::vector<int> labels(bsz);
            for (std::size_t i = 0; i < bsz; ++i) {
                const Sample& s = train.samples[order[begin + i]];
                for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) = s.features[j];
                labels[i] = s.label;
            }

            // Forward, keeping post-activation inputs of every layer.
            std::vector<Matrix> inputs(num_layers);
            std::vector<Matrix> mids(num_layers);  // x*U' for factored layers
            Matrix cur = std::move(x);
            for (std::size_t li = 0; li < num_layers; ++li) {
                const CompressedLayer& layer = model.layers[li];
                inputs[li] = cur;
                if (layer.factored) {
                    mids[li] = matmul(cur, layer.pair.u_trunc);
                    cur = matmul(mids[li], layer.pair.v_star);
                } else {
                    cur = matmul(cur, layer.dense);
                }
                if (li + 1 < num_layers)
                    for (double& v : cur.data()) v = std::tanh(v);
            }

            detail::softmax_xent_backward(cur, labels);  // cur becomes dlogits

            // Backward.
            Matrix delta = std::move(cur);
            for (std::size_t li = num_layers; li-- > 0;) {
                CompressedLayer& layer = model.layers[li];
                const bool frozen = opt.frozen.count(layer.name) > 0;
                Matrix dinput;
                if (layer.factored) {
                    Matrix dmid = matmul(delta, transpose(layer.pair.v_star));
                    if (!frozen) {
                        Matrix dv = matmul(transpose(mids[li]), delta);
                        Matrix du = matmul(transpose(inputs[li]), dmid);
                        auto& vel = velocity[li];
                        for (std::size_t i = 0; i < vel.a.size(); ++i)
                            vel.a.data()[i] = opt.momentum * vel.a.data()[i] + du.data()[i];
                        for (std::size_t i = 0; i < vel.b.size(); ++i)
                            vel.b.data()[i] = opt.momentum * vel.b.data()[i] + dv.data()[i];
                        for (std::size_t i = 0; i < vel.a.size(); ++i)
                            layer.pair.u_trunc.data()[i] -= opt.learning_rate * vel.a.data()[i];
                        for (std::size_t i = 0; i < vel.b.size(); ++i)
                            layer.pair.v_star.data()[i] -= opt.learning_rate * vel.b.data()[i];
                    }
                    if (li > 0) dinput = matmul(dmid, transpose(layer.pair.u_trunc));
                } else {
                    if (!frozen) {
                        Matrix dw = matmul(transpose(inputs[li]), delta);
                        auto& vel = velocity[li];
                        for (std::size_t i = 0; i < vel.a.size(); ++i)
                            vel.a.data()[i] = opt.momentum * vel.a.data()[i] + dw.data()[i];
                        for (std::size_t i = 0; i < vel.a.size(); ++i)
                            layer.dense.data()[i] -= opt.learning_rate * vel.a.data()[i];
                    }
                    if (li > 0) dinput = matmul(delta, transpose(layer.dense));
                }
                if (li > 0) {
                    // Through the tanh that produced inputs[li].
                    for (std::size_t i = 0; i < dinput.size(); ++i) {
                        const double a = inputs[li].data()[i];
                        dinput.data()[i] *= (1.0 - a * a);
                    }
                    delta = std::move(dinput);
                }
            }
        }
        epoch_errors.push_back(evaluate(model, train).aggregate);
    }
    return epoch_errors;
}

struct RetrainResult {
    CompressedModel model;
    std::vector<double> epoch_errors;  // train-split error after each epoch
};

// Fine-tunes a compressed model without changing its topology. Factored
// layers stay factored; U' and V* are the trainable parameters.
inline RetrainResult retrain(const CompressedModel& model, const Dataset& train, int epochs,
                             std::uint64_t seed, double learning_rate = 0.01,
                             double momentum = 0.9, int batch_size = 32) {
    RetrainResult result;
    result.model = model;
    if (epochs == 0) return result;

    TrainOptions opt;
    opt.epochs = 1;
    opt.learning_rate = learning_rate;
    opt.momentum = momentum;
    opt.batch_size = batch_size;
    opt.seed = seed;

    // Divergence threshold: twice the starting error, floored so a model
    // that starts at (near) zero error still has a meaningful bound.
    const double initial = evaluate(result.model, train).aggregate;
    const double divergence_bar = 2.0 * std::max(initial, 1.0);
    int bad_epochs = 0;
    for (int e = 0; e < epochs; ++e) {
        opt.seed = seed + static_cast<std::uint64_t>(e) * 1000003ULL;
        auto errs = train_compressed(result.model, train, opt);
        result.epoch_errors.push_back(errs.back());
        bad_epochs = (errs.back() > divergence_bar) ? bad_epochs + 1 : 0;
        if (bad_epochs >= 3) {
            std::string history;
            for (double h : result.epoch_errors) history += std::to_string(h) + " ";
            throw DivergenceError("retraining diverged; epoch errors: " + history);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Bundled toy profile: a deterministic 6-layer tanh classifier over a
// synthetic 8-class corpus, with sensitivity structure planted so there is
// something for the search to discover:
//   fc1  frozen random feature map - every direction matters downstream, so
//        truncating it is expensive (the sensitive layer),
//   fc2  trainable router,
//   fc3  frozen rank-12 partial isometry - compresses losslessly at k=12,
//   fc4  wide layer fed through the fc3 bottleneck, initialized near zero so
//        its trained weight stays concentrated (the redundant layer),
//   fc5, fc6  trainable; fc6 is the narrow output head.
// 20% of dev carries injected label noise so the condense heuristic has
// something to filter.
// ---------------------------------------------------------------------------

struct ToyProfile {
    LayeredModel model;
    Dataset train, dev, test;
    Dataset condensed;  // empty until set_condensed
    double baseline_error = 0.0;   // dev error of the trained baseline
    double dev_clean_error = 0.0;  // dev error against pre-noise labels
    double test_error = 0.0;
    std::vector<int> noisy_dev_ids;
    std::string sensitive_layer = "fc1";
    std::string bottleneck_layer = "fc3";
    std::string redundant_layer = "fc4";

    const Dataset& split(const std::string& id) const {
        if (id == "train") return train;
        if (id == "dev") return dev;
        if (id == "test") return test;
        if (id == "condensed") {
            if (condensed.samples.empty())
                throw EvaluatorError("condensed split has not been set");
            return condensed;
        }
        throw EvaluatorError("unknown split " + id);
    }

    void set_condensed(const std::vector<int>& sample_ids) {
        std::set<int> wanted(sample_ids.begin(), sample_ids.end());
        condensed.split = "condensed";
        condensed.samples.clear();
        for (const Sample& s : dev.samples)
            if (wanted.count(s.id)) condensed.samples.push_back(s);
        if (condensed.samples.size() != wanted.size())
            throw EvaluatorError("condensed ids must be a subset of dev");
    }
};

namespace detail {

// Gram-Schmidt on the columns.
inline Matrix orthonormal_columns(std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix m = random_gaussian_matrix(rows, cols, rng);
    for (std::size_t j = 0; j < cols; ++j) {
        for (std::size_t prev = 0; prev < j; ++prev) {
            double proj = 0.0;
            for (std::size_t i = 0; i < rows; ++i) proj += m(i, j) * m(i, prev);
            for (std::size_t i = 0; i < rows; ++i) m(i, j) -= proj * m(i, prev);
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < rows; ++i) norm += m(i, j) * m(i, j);
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < rows; ++i) m(i, j) /= norm;
    }
    return m;
}

struct ToyCorpusSpec {
    std::size_t features = 64;
    std::size_t classes = 8;
    std::size_t teacher_hidden = 16;
    double margin = 0.8;
};

// Labels come from a fixed random tanh teacher; samples too close to a
// decision boundary are resampled so the task is cleanly learnable.
inline Sample draw_sample(int id, const Matrix& t1, const Matrix& t2, const ToyCorpusSpec& spec,
                          Rng& rng) {
    Sample s;
    s.id = id;
    s.length = 1;
    while (true) {
        s.features.resize(spec.features);
        for (double& f : s.features) f = rng.gaussian();
        Matrix x(1, spec.features);
        for (std::size_t j = 0; j < spec.features; ++j) x(0, j) = s.features[j];
        Matrix h = matmul(x, t1);
        for (double& v : h.data()) v = std::tanh(v);
        Matrix logits = matmul(h, t2);
        std::size_t best = 0, second = 1;
        if (logits(0, second) > logits(0, best)) std::swap(best, second);
        for (std::size_t j = 2; j < spec.classes; ++j) {
            if (logits(0, j) > logits(0, best)) {
                second = best;
                best = j;
            } else if (logits(0, j) > logits(0, second)) {
                second = j;
            }
        }
        if (logits(0, best) - logits(0, second) >= spec.margin) {
            s.label = static_cast<int>(best);
            return s;
        }
    }
}

}  // namespace detail

inline ToyProfile build_toy_profile(std::uint64_t seed) {
    detail::ToyCorpusSpec spec;
    Rng root(seed);
    Rng teacher_rng = root.fork(1);
    Rng data_rng = root.fork(2);
    Rng init_rng = root.fork(3);
    Rng noise_rng = root.fork(4);

    Matrix t1 = random_gaussian_matrix(spec.features, spec.teacher_hidden, teacher_rng,
                                       1.0 / std::sqrt(double(spec.features)));
    Matrix t2 = random_gaussian_matrix(spec.teacher_hidden, spec.classes, teacher_rng, 0.4);

    ToyProfile profile;
    auto fill = [&](Dataset& ds, const char* split, int count, int id_base) {
        ds.split = split;
        for (int i = 0; i < count; ++i)
            ds.samples.push_back(detail::draw_sample(id_base + i, t1, t2, spec, data_rng));
    };
    fill(profile.train, "train", 3000, 0);
    fill(profile.dev, "dev", 500, 10000);
    fill(profile.test, "test", 500, 20000);

    // Inject label noise into 20% of dev, remembering the clean labels.
    std::vector<int> clean_dev_labels(profile.dev.samples.size());
    for (std::size_t i = 0; i < profile.dev.samples.size(); ++i)
        clean_dev_labels[i] = profile.dev.samples[i].label;
    std::vector<std::size_t> dev_order(profile.dev.samples.size());
    for (std::size_t i = 0; i < dev_order.size(); ++i) dev_order[i] = i;
    noise_rng.shuffle(dev_order);
    const std::size_t noisy = profile.dev.samples.size() / 5;
    for (std::size_t i = 0; i < noisy; ++i) {
        Sample& s = profile.dev.samples[dev_order[i]];
        s.label = static_cast<int>(noise_rng.index(spec.classes));
        profile.noisy_dev_ids.push_back(s.id);
    }
    std::sort(profile.noisy_dev_ids.begin(), profile.noisy_dev_ids.end());

    // Student: 64 -> 96 -> 96 -> 96 -> 96 -> 32 -> 8, tanh between layers.
    auto gauss_layer = [&](const char* name, std::size_t m, std::size_t n, double stddev) {
        return LayerSpec{name, random_gaussian_matrix(m, n, init_rng, stddev), true};
    };
    LayeredModel& model = profile.model;
    model.layers.push_back(gauss_layer("fc1", 64, 96, 1.0 / 8.0));
    model.layers.push_back(gauss_layer("fc2", 96, 96, 1.0 / std::sqrt(96.0)));
    {
        Matrix a = detail::orthonormal_columns(96, 12, init_rng);
        Matrix bt = detail::orthonormal_columns(96, 12, init_rng);
        Matrix w3 = matmul(a, transpose(bt));
        for (double& v : w3.data()) v *= 5.0;
        model.layers.push_back(LayerSpec{"fc3", std::move(w3), true});
    }
    model.layers.push_back(gauss_layer("fc4", 96, 96, 0.01));
    model.layers.push_back(gauss_layer("fc5", 96, 32, 1.0 / std::sqrt(96.0)));
    model.layers.push_back(gauss_layer("fc6", 32, 8, 1.0 / std::sqrt(32.0)));
    model.metadata["activation"] = "tanh";
    model.metadata["classes"] = std::to_string(spec.classes);
    model.metadata["profile_seed"] = std::to_string(seed);

    // fc1 and fc3 stay fixed during training; fc2 routes around them.
    CompressedModel trainee = as_uncompressed(model);
    TrainOptions opt;
    opt.momentum = 0.9;
    opt.batch_size = 32;
    opt.seed = root.fork(5).next_u64();
    opt.frozen = {"fc1", "fc3"};
    opt.epochs = 20;
    opt.learning_rate = 0.1;
    train_compressed(trainee, profile.train, opt);
    opt.seed += 13;
    opt.learning_rate = 0.05;
    train_compressed(trainee, profile.train, opt);
    for (std::size_t li = 0; li < model.layers.size(); ++li)
        model.layers[li].weights = trainee.layers[li].dense;

    // Convergence gate measured against the pre-noise dev labels; the
    // returned baseline error is on the dev split as served (with noise).
    Dataset dev_clean = profile.dev;
    for (std::size_t i = 0; i < dev_clean.samples.size(); ++i)
        dev_clean.samples[i].label = clean_dev_labels[i];
    profile.dev_clean_error = evaluate(model, dev_clean).aggregate;
    if (profile.dev_clean_error >= 15.0)
        throw ProfileBuildError("toy profile seed " + std::to_string(seed) +
                                " trained to only " + std::to_string(profile.dev_clean_error) +
                                "% dev error; try a fallback seed (1, 2, 4 and 6 are known good)");
    profile.baseline_error = evaluate(model, profile.dev).aggregate;
    profile.test_error = evaluate(model, profile.test).aggregate;
    return profile;
}

// Process-wide cache: profile construction trains a network, so tests share
// one instance per seed.
inline const ToyProfile& toy_profile(std::uint64_t seed) {
    static std::mutex mu;
    static std::map<std::uint64_t, std::unique_ptr<ToyProfile>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(seed);
    if (it == cache.end())
        it = cache.emplace(seed, std::make_unique<ToyProfile>(build_toy_profile(seed))).first;
    return *it->second;
}

class ToyEvaluator : public ErrorEvaluator {
public:
    explicit ToyEvaluator(const ToyProfile& profile) : profile_(&profile) {}

    EvalResult evaluate(const CompressedModel& model, const std::string& dataset_id,
                        bool per_sample) override {
        return ranksearch::evaluate(model, profile_->split(dataset_id), per_sample);
    }

private:
    const ToyProfile* profile_;
};

// Cohort models for the condense heuristic: compression-scheme variations of
// the baseline, in the spirit of a family of related model builds.
inline std::vector<CompressedModel> toy_cohort_models(const ToyProfile& profile, int count,
                                                      std::uint64_t seed) {
    std::vector<CompressedModel> cohorts;
    FactorCache cache(profile.model);
    const auto searchable = profile.model.searchable_indices();
    Rng rng(seed);
    const double energies[] = {0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6};
    for (int c = 0; c < count; ++c) {
        Scheme scheme;
        for (std::size_t idx : searchable) {
            const auto& w = profile.model.layers[idx].weights;
            const int max_rank = static_cast<int>(std::min(w.rows(), w.cols()));
            const double energy = energies[c % 8] + 0.02 * rng.uniform();
            const Factorization& f = cache.factorization(idx);
            int k = rank_for_energy(f.sigma, std::min(1.0, energy));
            if (static_cast<double>(k) * (w.rows() + w.cols()) >=
                static_cast<double>(w.rows()) * w.cols())
                k = 0;
            if (k > max_rank) k = max_rank;
            scheme.push_back(k);
        }
        cohorts.push_back(apply_scheme(profile.model, scheme, &cache));
    }
    return cohorts;
}

// ---------------------------------------------------------------------------
// External evaluator protocol: spawn a command, write one JSON request line
// {"model_path": str, "dataset": str, "per_sample": bool} to its stdin, read
// one JSON response line {"error": float, "per_sample": [..]?, "wall_ms": int}
// from its stdout. Nonzero exit means failure.
// ---------------------------------------------------------------------------

inline EvalResult external_evaluate(const std::string& command, const std::string& model_path,
                                    const std::string& dataset_id, bool per_sample = false,
                                    double timeout_s = 3600.0,
                                    std::int64_t expected_samples = -1) {
    const auto start = std::chrono::steady_clock::now();

    int in_pipe[2], out_pipe[2], err_pipe[2];
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0 || pipe(err_pipe) != 0)
        throw ProtocolError("pipe() failed");

    const pid_t pid = fork();
    if (pid < 0) throw ProtocolError("fork() failed");
    if (pid == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        dup2(err_pipe[1], STDERR_FILENO);
        close(in_pipe[0]);
        close(in_pipe[1]);
        close(out_pipe[0]);
        close(out_pipe[1]);
        close(err_pipe[0]);
        close(err_pipe[1]);
        execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    close(err_pipe[1]);

    nlohmann::json request;
    request["model_path"] = model_path;
    request["dataset"] = dataset_id;
    request["per_sample"] = per_sample;
    const std::string req_line = request.dump() + "\n";
    // A request this small fits any pipe buffer; a stuck child is caught by
    // the read timeout below. An endpoint that exits without reading must not
    // SIGPIPE us.
    {
        void (*old_handler)(int) = signal(SIGPIPE, SIG_IGN);
        (void)!write(in_pipe[1], req_line.data(), req_line.size());
        signal(SIGPIPE, old_handler);
    }
    close(in_pipe[1]);

    auto drain = [&](int fd, std::string& sink) {
        char buf[4096];
        const ssize_t n = read(fd, buf, sizeof(buf));
        if (n > 0) sink.append(buf, static_cast<std::size_t>(n));
        return n;
    };

    std::string out, err;
    bool out_open = true, err_open = true;
    while (out_open || err_open) {
        struct pollfd fds[2];
        nfds_t nfds = 0;
        if (out_open) fds[nfds++] = {out_pipe[0], POLLIN, 0};
        if (err_open) fds[nfds++] = {err_pipe[0], POLLIN, 0};

        const double left_s =
            timeout_s - static_cast<double>(detail::elapsed_ms(start)) / 1000.0;
        if (left_s <= 0.0) {
            kill(pid, SIGKILL);
            waitpid(pid, nullptr, 0);
            close(out_pipe[0]);
            close(err_pipe[0]);
            throw EvalTimeout("external evaluator exceeded " + std::to_string(timeout_s) + " s");
        }
        const int rc = poll(fds, nfds, std::max(1, static_cast<int>(left_s * 1000.0)));
        if (rc <= 0) continue;
        for (nfds_t i = 0; i < nfds; ++i) {
            if (!(fds[i].revents & (POLLIN | POLLHUP))) continue;
            const bool is_out = (fds[i].fd == out_pipe[0]);
            if (drain(fds[i].fd, is_out ? out : err) <= 0) {
                close(fds[i].fd);
                (is_out ? out_open : err_open) = false;
            }
        }
    }

    int status = 0;
    waitpid(pid, &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
        throw ProtocolError("external evaluator failed (exit " +
                            std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1) +
                            "): " + err);

    nlohmann::json response;
    try {
        response = nlohmann::json::parse(out);
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("malformed evaluator response: ") + e.what());
    }
    if (!response.is_object() || !response.contains("error") ||
        !response["error"].is_number())
        throw ProtocolError("evaluator response missing numeric 'error'");

    EvalResult result;
    result.aggregate = response["error"].get<double>();
    if (!std::isfinite(result.aggregate) || result.aggregate < 0.0 ||
        result.aggregate > 100.0)
        throw ProtocolError("evaluator error out of [0, 100]");
    if (response.contains("per_sample") && !response["per_sample"].is_null()) {
        if (!response["per_sample"].is_array())
            throw ProtocolError("per_sample must be an array");
        result.per_sample = response["per_sample"].get<std::vector<double>>();
        if (expected_samples >= 0 &&
            static_cast<std::int64_t>(result.per_sample->size()) != expected_samples)
            throw ProtocolError("per_sample length " +
                                std::to_string(result.per_sample->size()) + ", expected " +
                                std::to_string(expected_samples));
    } else if (per_sample) {
        throw ProtocolError("evaluator did not return requested per_sample errors");
    }
    result.wall_ms = response.contains("wall_ms") && response["wall_ms"].is_number()
                         ? response["wall_ms"].get<std::int64_t>()
                         : detail::elapsed_ms(start);
    return result;
}

class ExternalEvaluator : public ErrorEvaluator {
public:
    ExternalEvaluator(std::string command, std::string scratch_dir, double timeout_s = 3600.0)
        : command_(std::move(command)), scratch_dir_(std::move(scratch_dir)),
          timeout_s_(timeout_s) {}

    void expect_samples(const std::string& dataset_id, std::int64_t count) {
        expected_[dataset_id] = count;
    }

    EvalResult evaluate(const CompressedModel& model, const std::string& dataset_id,
                        bool per_sample) override {
        const std::string path = scratch_dir_ + "/eval_model_" +
                                 std::to_string(++serial_) + ".lrfm";
        save_compressed(model, path);
        const auto it = expected_.find(dataset_id);
        return external_evaluate(command_, path, dataset_id, per_sample, timeout_s_,
                                 it == expected_.end() ? -1 : it->second);
    }

private:
    std::string command_;
    std::string scratch_dir_;
    double timeout_s_;
    std::map<std::string, std::int64_t> expected_;
    std::uint64_t serial_ = 0;
};

}  // namespace ranksearch
