#include <catch2/catch_amalgamated.hpp>

#include "treeformer/constituent.hpp"
#include "test_util.hpp"

using namespace treeformer;
using tftest::check_gradients;
using tftest::random_array;

namespace {

// independent oracle: direct multiplication of all links between i and j
Array<double> prior_product_oracle(const std::vector<double>& links) {
    const std::size_t n = links.size() + 1;
    Array<double> c(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double prod = 1.0;
            for (std::size_t k = std::min(i, j); k < std::max(i, j); ++k) prod *= links[k];
            c.at(i, j) = prod;
        }
    }
    return c;
}

std::vector<double> random_links(std::size_t m, Rng& rng, double lo = 0.0, double hi = 1.0) {
    std::vector<double> a(m);
    for (auto& v : a) v = rng.uniform(lo, hi);
    return a;
}

}  // namespace

TEST_CASE("neighbor scores use the d_model/2 scaling") {
    // identity projections, hidden rows with q_i . k_{i+1} = 256 at d_model = 512
    const std::size_t d = 512, n = 3;
    Tape<double> t;
    Array<double> eye({d, d});
    for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1.0;
    Array<double> h({n, d});
    for (std::size_t i = 0; i < n; ++i) h.at(i, 0) = 16.0;  // 16 * 16 = 256
    LinkProjection<double> proj{t.constant(Array<double>(eye)), t.constant(Array<double>({d})),
                                t.constant(std::move(eye)), t.constant(Array<double>({d}))};
    auto* s = neighbor_scores(t, t.constant(std::move(h)), proj);
    REQUIRE(s->value.numel() == n - 1);
    CHECK(s->value[0] == Catch::Approx(1.0));
    CHECK(s->value[1] == Catch::Approx(1.0));
}

TEST_CASE("single-word input has no neighbor scores") {
    Tape<double> t;
    Rng rng(1);
    LinkProjection<double> proj{t.constant(random_array({4, 4}, rng)),
                                t.constant(random_array({4}, rng)),
                                t.constant(random_array({4, 4}, rng)),
                                t.constant(random_array({4}, rng))};
    auto* s = neighbor_scores(t, t.constant(random_array({1, 4}, rng)), proj);
    CHECK(s->value.numel() == 0);
}

TEST_CASE("neighbor scores match a naive dot-product oracle") {
    Rng rng(9);
    const std::size_t n = 6, d = 8;
    auto h = random_array({n, d}, rng);
    auto wq = random_array({d, d}, rng), wk = random_array({d, d}, rng);
    auto bq = random_array({d}, rng), bk = random_array({d}, rng);

    Tape<double> t;
    LinkProjection<double> proj{t.constant(Array<double>(wq)), t.constant(Array<double>(bq)),
                                t.constant(Array<double>(wk)), t.constant(Array<double>(bk))};
    auto* s = neighbor_scores(t, t.constant(Array<double>(h)), proj);

    for (std::size_t i = 0; i + 1 < n; ++i) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            double qc = bq[c], kc = bk[c];
            for (std::size_t r = 0; r < d; ++r) {
                qc += h.at(i, r) * wq.at(r, c);
                kc += h.at(i + 1, r) * wk.at(r, c);
            }
            dot += qc * kc;
        }
        CHECK(std::fabs(s->value[i] - dot / (d / 2.0)) < 1e-9);
    }
}

TEST_CASE("paired softmax splits equal scores evenly") {
    auto p = neighbor_softmax<double>({1.3, 1.3});  // N = 3, interior word 1
    CHECK(p.to_right[1] == Catch::Approx(0.5));
    CHECK(p.to_left[1] == Catch::Approx(0.5));
}

TEST_CASE("boundary words put probability one on their only link") {
    auto p = neighbor_softmax<double>({0.2, -3.0, 7.0});  // N = 4
    CHECK(p.to_right[0] == 1.0);
    CHECK(p.to_left[3] == 1.0);
}

TEST_CASE("paired softmax matches the scalar softmax oracle") {
    // s(i, i+1) = 2, s(i, i-1) = 0  ->  p(right) = e^2 / (e^2 + 1)
    auto p = neighbor_softmax<double>({0.0, 2.0});
    const double expected = std::exp(2.0) / (std::exp(2.0) + 1.0);
    CHECK(p.to_right[1] == Catch::Approx(expected).margin(1e-9));
    CHECK(p.to_right[1] == Catch::Approx(0.8808).margin(5e-4));

    Rng rng(12);
    for (int rep = 0; rep < 50; ++rep) {
        auto s = random_links(7, rng, -5.0, 5.0);
        auto probs = neighbor_softmax<double>(s);
        for (std::size_t i = 1; i + 1 < 8; ++i) {
            // scalar two-way softmax computed directly
            const double er = std::exp(s[i] - std::max(s[i], s[i - 1]));
            const double el = std::exp(s[i - 1] - std::max(s[i], s[i - 1]));
            CHECK(std::fabs(probs.to_right[i] - er / (er + el)) < 1e-12);
            // normalization within 1e-9
            CHECK(std::fabs(probs.to_right[i] + probs.to_left[i] - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("link averaging is the geometric mean") {
    DirectedLinks<double> p;
    p.to_right = {1.0, 0.5, 0.0, 1.0};
    p.to_left = {0.0, 1.0, 0.5, 0.7};
    auto a_hat = average_links(p);
    REQUIRE(a_hat.size() == 3);
    CHECK(a_hat[0] == Catch::Approx(1.0));            // 1 * 1
    CHECK(a_hat[1] == Catch::Approx(0.5));            // sqrt(0.5 * 0.5)
    CHECK(a_hat[2] == 0.0);                           // annihilated by zero link
}

TEST_CASE("hierarchical update merges monotonically") {
    CHECK(hierarchical_update<double>({0.0}, {0.3})[0] == Catch::Approx(0.3));
    CHECK(hierarchical_update<double>({1.0}, {0.9})[0] == Catch::Approx(1.0));
    CHECK(hierarchical_update<double>({0.5}, {0.4})[0] == Catch::Approx(0.7));

    Rng rng(4);
    for (int rep = 0; rep < 200; ++rep) {
        auto prev = random_links(9, rng);
        auto a_hat = random_links(9, rng);
        auto out = hierarchical_update(prev, a_hat);
        for (std::size_t i = 0; i < out.size(); ++i) {
            CHECK(out[i] >= prev[i]);
            CHECK(out[i] <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("prior of all-ones links is the all-ones matrix") {
    auto c = build_prior<double>({1.0, 1.0, 1.0});
    for (std::size_t i = 0; i < c.numel(); ++i) CHECK(c[i] == Catch::Approx(1.0));
}

TEST_CASE("prior respects exact zeros and the product rule") {
    // 1-based fixture from a hand product: a = [0.5, 0, 0.9], N = 4
    auto c = build_prior<double>({0.5, 0.0, 0.9});
    CHECK(c.at(0, 1) == Catch::Approx(0.5));
    CHECK(c.at(0, 2) == 0.0);
    CHECK(c.at(0, 3) == 0.0);
    CHECK(c.at(1, 2) == 0.0);
    CHECK(c.at(2, 3) == Catch::Approx(0.9));
}

TEST_CASE("log-sum prior equals the direct product oracle") {
    Rng rng(21);
    for (int rep = 0; rep < 300; ++rep) {
        const std::size_t n = 2 + rng.uniform_int(15);  // N <= 16
        auto links = random_links(n - 1, rng);
        if (rep % 3 == 0) links[rng.uniform_int(links.size())] = 0.0;  // exercise zeros
        auto c = build_prior(links);
        auto oracle = prior_product_oracle(links);
        for (std::size_t i = 0; i < c.numel(); ++i)
            CHECK(std::fabs(c[i] - oracle[i]) < 1e-9);
        // symmetry and unit diagonal, exact
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(c.at(i, i) == 1.0);
            for (std::size_t j = 0; j < n; ++j) CHECK(c.at(i, j) == c.at(j, i));
        }
    }
}

TEST_CASE("prior factorizes over intermediate words") {
    Rng rng(33);
    for (int rep = 0; rep < 100; ++rep) {
        auto links = random_links(9, rng, 0.05, 1.0);
        auto c = build_prior(links);
        for (std::size_t i = 0; i < 10; ++i)
            for (std::size_t j = i + 1; j < 10; ++j)
                for (std::size_t k = j + 1; k < 10; ++k)
                    CHECK(std::fabs(c.at(i, k) - c.at(i, j) * c.at(j, k)) < 1e-7);
    }
}

TEST_CASE("tape route equals the numeric route") {
    Rng rng(55);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t m = 1 + rng.uniform_int(12);
        auto scores = random_links(m, rng, -4.0, 4.0);

        Tape<double> t;
        auto* s_node = t.constant(Array<double>::vector(scores));
        auto* a_hat_node = average_links_from_scores(t, s_node);
        auto a_hat_numeric = average_links(neighbor_softmax(scores));
        REQUIRE(a_hat_node->value.numel() == a_hat_numeric.size());
        for (std::size_t i = 0; i < a_hat_numeric.size(); ++i)
            CHECK(std::fabs(a_hat_node->value[i] - a_hat_numeric[i]) < 1e-12);

        auto links = random_links(m, rng, 1e-4, 1.0);
        Tape<double> t2;
        auto* prior_node = build_prior(t2, t2.constant(Array<double>::vector(links)));
        auto prior_numeric = build_prior(links);
        for (std::size_t i = 0; i < prior_numeric.numel(); ++i)
            CHECK(std::fabs(prior_node->value[i] - prior_numeric[i]) < 1e-9);
    }
}

TEST_CASE("gradients flow through the full constituent pipeline") {
    Rng rng(77);
    const std::size_t n = 5, d = 6;
    auto h = random_array({n, d}, rng);
    auto wq = random_array({d, d}, rng, -0.5, 0.5);
    auto wk = random_array({d, d}, rng, -0.5, 0.5);
    auto bq = random_array({d}, rng, -0.1, 0.1);
    auto bk = random_array({d}, rng, -0.1, 0.1);
    auto weights = random_array({n, n}, rng);
    auto prev = random_array({n - 1}, rng, 0.0, 0.9);

    auto res = check_gradients(
        [&](Tape<double>& t, std::vector<Node<double>*>& in) {
            LinkProjection<double> proj{in[1], in[2], in[3], in[4]};
            auto* s = neighbor_scores(t, in[0], proj);
            auto* a_hat = average_links_from_scores(t, s);
            auto* a = hierarchical_update(t, t.constant(Array<double>(prev)), a_hat);
            auto* c = build_prior(t, a);
            return t.reduce_sum(t.mul(c, t.constant(Array<double>(weights))));
        },
        {h, wq, bq, wk, bk});
    INFO("max rel err " << res.max_rel_err << " over " << res.checked << " coords");
    CHECK(res.max_rel_err < 1e-4);
}
