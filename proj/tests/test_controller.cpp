#include "doctest.h"

#include <cmath>
#include <vector>

#include "ranksearch/controller.hpp"
#include "ranksearch/rng.hpp"

using namespace ranksearch;

#include "fdiff_oracle.hpp"

TEST_CASE("init_controller is deterministic per seed and sizes its tensors") {
    ControllerParams a = init_controller(3, 4, 8, 8, 99);
    ControllerParams b = init_controller(3, 4, 8, 8, 99);
    CHECK(a.theta == b.theta);
    CHECK(a.adam_step == 0);
    for (double x : a.theta) {
        CHECK(x >= -0.08);
        CHECK(x <= 0.08);
    }

    ControllerParams c = init_controller(3, 4, 8, 8, 100);
    CHECK(c.theta != a.theta);

    // Production-sized controller: 18 decisions, 5 options, 100/100 LSTM.
    ControllerParams big = init_controller(18, 5, 100, 100, 1);
    const ControllerConfig& cfg = big.cfg;
    CHECK(cfg.param_count() ==
          std::size_t(100) * 400 + std::size_t(100) * 400 + 400 +  // lstm
              18 * 100 +                                           // embeddings
              18 * (100 * 5 + 5));                                 // heads
    CHECK(cfg.head_w(1, 0, 0) - cfg.head_w(0, 0, 0) == 500);

    ControllerParams tiny = init_controller(1, 2, 4, 4, 7);
    CHECK(forward(tiny).dist.rows() == 1);

    CHECK_THROWS_AS(init_controller(0, 2, 4, 4, 7), ConfigError);
}

TEST_CASE("forward emits normalized distributions, deterministically") {
    ControllerParams p = init_controller(3, 3, 16, 16, 7);
    PolicyOutput a = forward(p);
    PolicyOutput b = forward(p);
    CHECK(a.dist == b.dist);
    for (std::size_t i = 0; i < 3; ++i) {
        double sum = 0.0;
        for (std::size_t o = 0; o < 3; ++o) {
            CHECK(a.dist(i, o) > 0.0);
            CHECK(a.dist(i, o) < 1.0);
            sum += a.dist(i, o);
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("a saturated head pins its distribution") {
    ControllerParams p = init_controller(2, 3, 8, 8, 3);
    const ControllerConfig& c = p.cfg;
    for (int h = 0; h < c.hidden; ++h)
        for (int o = 0; o < c.num_options; ++o) p.theta[c.head_w(1, h, o)] = 1e-6;
    p.theta[c.head_b(1, 0)] = 20.0;
    p.theta[c.head_b(1, 1)] = -20.0;
    p.theta[c.head_b(1, 2)] = -20.0;
    PolicyOutput out = forward(p);
    CHECK(out.dist(1, 0) > 0.999999);
    CHECK(out.dist(1, 1) < 1e-6);
    CHECK(out.dist(1, 2) < 1e-6);
}

TEST_CASE("sampling follows the distribution") {
    ControllerParams p = init_controller(1, 4, 8, 8, 21);
    const ControllerConfig& c = p.cfg;
    // Flatten the head so the row is exactly uniform.
    for (int h = 0; h < c.hidden; ++h)
        for (int o = 0; o < c.num_options; ++o) p.theta[c.head_w(0, h, o)] = 0.0;
    for (int o = 0; o < c.num_options; ++o) p.theta[c.head_b(0, o)] = 0.0;
    PolicyOutput out = forward(p);
    for (int o = 0; o < 4; ++o) CHECK(out.dist(0, o) == doctest::Approx(0.25).epsilon(1e-12));

    Rng rng(4242);
    int counts[4] = {0, 0, 0, 0};
    const int draws = 40000;
    for (int i = 0; i < draws; ++i) counts[sample(out, rng).indices[0]] += 1;
    for (int o = 0; o < 4; ++o)
        CHECK(std::abs(double(counts[o]) / draws - 0.25) < 0.02);

    // Identical rng seed, identical draws.
    Rng r1(5), r2(5);
    for (int i = 0; i < 32; ++i) CHECK(sample(out, r1).indices == sample(out, r2).indices);

    // Near-deterministic row.
    p.theta[c.head_b(0, 2)] = 40.0;
    PolicyOutput sat = forward(p);
    Rng r3(8);
    for (int i = 0; i < 64; ++i) {
        SampledScheme s = sample(sat, r3);
        CHECK(s.indices[0] == 2);
        CHECK(s.probs[0] > 0.999999);
    }
}

TEST_CASE("policy gradient scales linearly with the reward") {
    ControllerParams p = init_controller(2, 3, 8, 8, 11);
    PolicyOutput out = forward(p);
    Rng rng(1);
    SampledScheme s = sample(out, rng);

    const std::vector<double> g0 = policy_gradient(p, out, s, 0.0);
    for (double g : g0) CHECK(g == 0.0);

    const std::vector<double> g1 = policy_gradient(p, out, s, 1.0);
    const std::vector<double> g2 = policy_gradient(p, out, s, 2.0);
    for (std::size_t i = 0; i < g1.size(); ++i)
        CHECK(g2[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-12));
}

TEST_CASE("policy gradient matches central finite differences") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        ControllerParams p = init_controller(3, 4, 8, 8, seed);
        Rng rng(seed * 17 + 1);
        PolicyOutput out = forward(p);
        SampledScheme s = sample(out, rng);
        const std::vector<double> grad = policy_gradient(p, out, s, 1.7);
        CHECK(fdiff::max_rel_error(p, s.indices, 1.7, grad) < 1e-5);
    }
}

TEST_CASE("stale forward caches are rejected") {
    ControllerParams p = init_controller(2, 2, 8, 8, 5);
    PolicyOutput out = forward(p);
    Rng rng(2);
    SampledScheme s = sample(out, rng);
    std::vector<double> g = policy_gradient(p, out, s, 1.0);
    apply_update(p, g, 1e-3);
    CHECK_THROWS_AS(policy_gradient(p, out, s, 1.0), StaleCache);
}

TEST_CASE("apply_update edge cases") {
    ControllerParams p = init_controller(2, 2, 8, 8, 9);
    const std::vector<double> theta0 = p.theta;

    apply_update(p, std::vector<double>(p.theta.size(), 0.0), 1e-3);
    CHECK(p.theta == theta0);
    CHECK(p.adam_step == 1);

    PolicyOutput out = forward(p);
    Rng rng(3);
    SampledScheme s = sample(out, rng);
    std::vector<double> g = policy_gradient(p, out, s, 1.0);
    apply_update(p, g, 0.0);
    CHECK(p.theta == theta0);

    std::vector<double> bad = g;
    bad[0] = std::nan("");
    CHECK_THROWS_AS(apply_update(p, bad, 1e-3), NumericalError);
    CHECK_THROWS_AS(apply_update(p, std::vector<double>{1.0}, 1e-3), ConfigError);
}

TEST_CASE("a positive-reward update raises the sampled log-probability") {
    ControllerParams p = init_controller(3, 3, 12, 12, 13);
    PolicyOutput out = forward(p);
    Rng rng(7);
    SampledScheme s = sample(out, rng);
    const double before = log_prob_sum(out, s.indices);
    apply_update(p, policy_gradient(p, out, s, 1.0), 1e-4);
    const double after = log_prob_sum(forward(p), s.indices);
    CHECK(after > before);
}

TEST_CASE("rows stay normalized across many updates and trajectories repeat") {
    auto run = [](std::uint64_t seed) {
        ControllerParams p = init_controller(2, 3, 8, 8, seed);
        Rng rng(seed + 1);
        for (int step = 0; step < 50; ++step) {
            PolicyOutput out = forward(p);
            for (int i = 0; i < 2; ++i) {
                double sum = 0.0;
                for (int o = 0; o < 3; ++o) sum += out.dist(i, o);
                CHECK(std::abs(sum - 1.0) < 1e-9);
            }
            SampledScheme s = sample(out, rng);
            const double r = (s.indices[0] == 0) ? 1.0 : -1.0;
            apply_update(p, policy_gradient(p, out, s, r), 1e-3);
        }
        return p.theta;
    };
    CHECK(run(31) == run(31));
    CHECK(run(31) != run(32));
}

TEST_CASE("REINFORCE solves a two-armed bandit") {
    ControllerParams p = init_controller(1, 2, 8, 8, 17);
    Rng rng(18);
    for (int step = 0; step < 500; ++step) {
        PolicyOutput out = forward(p);
        SampledScheme s = sample(out, rng);
        const double r = (s.indices[0] == 0) ? 1.0 : -1.0;
        apply_update(p, policy_gradient(p, out, s, r), 0.01);
    }
    CHECK(forward(p).dist(0, 0) > 0.9);
}

TEST_CASE("controller checkpoints round-trip bit-exactly") {
    ControllerParams p = init_controller(3, 4, 8, 8, 23);
    Rng rng(5);
    for (int step = 0; step < 7; ++step) {
        PolicyOutput out = forward(p);
        SampledScheme s = sample(out, rng);
        apply_update(p, policy_gradient(p, out, s, -1.3), 1e-3);
    }
    const auto bytes = serialize_controller(p);
    ControllerParams q = deserialize_controller(bytes);
    CHECK(q.theta == p.theta);
    CHECK(q.adam_m == p.adam_m);
    CHECK(q.adam_v == p.adam_v);
    CHECK(q.adam_step == p.adam_step);
    CHECK(serialize_controller(q) == bytes);

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_controller(bad), FormatError);
}
