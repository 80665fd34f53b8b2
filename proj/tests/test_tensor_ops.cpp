#include <doctest.h>

#include <cmath>
#include <random>

#include "mman/grad_check.hpp"
#include "mman/ops.hpp"
#include "mman/tensor.hpp"

using namespace mman;

namespace {

Tensor rand_tensor(Shape shape, std::mt19937_64& rng, bool rg = true, double lo = -2.0,
                   double hi = 2.0) {
    return Tensor::uniform(std::move(shape), lo, hi, rng, rg);
}

// Scalar loss that weights every output coordinate differently, so adjoints
// that mix up positions cannot cancel out. Weights are derived from the seed
// alone so repeated evaluations see the same loss function.
Tensor weighted_sum(const Tensor& out, std::uint64_t wseed) {
    std::mt19937_64 wrng(wseed);
    Tensor w = Tensor::uniform(out.shape(), -1.0, 1.0, wrng);
    return sum_all(mul(out, w));
}

double fd_max_err(const std::function<Tensor()>& loss,
                  std::vector<std::pair<std::string, Tensor>> params,
                  double eps = 1e-5) {
    return grad_check(loss, params, eps).max_rel_err;
}

} // namespace

TEST_CASE("matmul identity and hand-computed products") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(eye, a);
    CHECK(r.values() == std::vector<double>{1, 2, 3, 4});

    Tensor b = Tensor::from_data({2, 1}, {5, 6});
    Tensor ab = matmul(a, b);
    CHECK(ab.values() == std::vector<double>{17, 39});

    Tensor bad = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(bad, bad), ShapeError);
}

TEST_CASE("matmul matches brute force on random batched cases") {
    std::mt19937_64 rng(7);
    for (int iter = 0; iter < 200; ++iter) {
        std::uniform_int_distribution<std::size_t> d(1, 4);
        const std::size_t bb = d(rng), p = d(rng), q = d(rng), r = d(rng);
        const bool bcast_a = (iter % 3 == 0);
        Tensor a = rand_tensor({bcast_a ? 1 : bb, p, q}, rng, false);
        Tensor b = rand_tensor({bb, q, r}, rng, false);
        Tensor out = matmul(a, b);
        REQUIRE(out.shape() == Shape{bb, p, r});
        for (std::size_t bi = 0; bi < bb; ++bi) {
            const std::size_t abi = bcast_a ? 0 : bi;
            for (std::size_t i = 0; i < p; ++i) {
                for (std::size_t j = 0; j < r; ++j) {
                    double s = 0.0;
                    for (std::size_t k = 0; k < q; ++k) {
                        s += a.values()[(abi * p + i) * q + k] * b.values()[(bi * q + k) * r + j];
                    }
                    CHECK(out.values()[(bi * p + i) * r + j] == doctest::Approx(s).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("softmax closed forms") {
    Tensor u = softmax_lastdim(Tensor::from_data({3}, {0, 0, 0}));
    for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));

    Tensor s = softmax_lastdim(Tensor::from_data({2}, {0.0, std::log(2.0)}));
    CHECK(s.values()[0] == doctest::Approx(1.0 / 3).epsilon(1e-13));
    CHECK(s.values()[1] == doctest::Approx(2.0 / 3).epsilon(1e-13));

    Tensor big = softmax_lastdim(Tensor::from_data({2}, {1000.0, 0.0}));
    CHECK(std::fabs(big.values()[0] - 1.0) <= 1e-12);
    CHECK(std::fabs(big.values()[1]) <= 1e-12);
    CHECK(big.all_finite());
}

TEST_CASE("softmax rows sum to one and shift invariance") {
    std::mt19937_64 rng(11);
    for (int iter = 0; iter < 100; ++iter) {
        Tensor x = rand_tensor({3, 5}, rng, false, -50.0, 50.0);
        Tensor y = softmax_lastdim(x);
        for (std::size_t r = 0; r < 3; ++r) {
            double s = 0.0;
            for (std::size_t i = 0; i < 5; ++i) {
                const double v = y.values()[r * 5 + i];
                CHECK(v >= 0.0);
                s += v;
            }
            CHECK(std::fabs(s - 1.0) <= 1e-12);
        }
        Tensor shifted = scalar_add(x, 123.456);
        Tensor y2 = softmax_lastdim(shifted);
        for (std::size_t i = 0; i < y.numel(); ++i) {
            CHECK(std::fabs(y.values()[i] - y2.values()[i]) <= 1e-12);
        }
    }
}

TEST_CASE("sigmoid closed forms and saturation") {
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(sigmoid(Tensor::scalar(std::log(3.0))).item() == doctest::Approx(0.75).epsilon(1e-13));
    const double sat = sigmoid(Tensor::scalar(-1000.0)).item();
    CHECK(sat > 0.0);
    CHECK(sat <= 1e-300);
    const double top = sigmoid(Tensor::scalar(1000.0)).item();
    CHECK(top < 1.0);
}

TEST_CASE("linear identity, hand case and mismatch") {
    Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor zb = Tensor::zeros({2});
    CHECK(linear(x, eye, zb).values() == std::vector<double>{1, 2, 3, 4});

    Tensor xv = Tensor::from_data({2}, {1, 1});
    Tensor w = Tensor::from_data({2, 1}, {1, 2});
    Tensor b = Tensor::from_data({1}, {3});
    CHECK(linear(xv, w, b).values() == std::vector<double>{6});

    Tensor bad = Tensor::zeros({3});
    CHECK_THROWS_AS(linear(bad, w, b), ShapeError);
}

TEST_CASE("conv1d hand cases") {
    Tensor x = Tensor::from_data({1, 3}, {1, 2, 3});
    Tensor unit = Tensor::from_data({1, 1, 1}, {1});
    CHECK(conv1d(x, unit, 1).values() == std::vector<double>{1, 2, 3});

    Tensor k = Tensor::from_data({1, 1, 2}, {1, 1});
    CHECK(conv1d(x, k, 1).values() == std::vector<double>{3, 5});

    Tensor shortx = Tensor::from_data({1, 2}, {1, 2});
    Tensor k3 = Tensor::from_data({1, 1, 3}, {1, 1, 1});
    CHECK_THROWS_AS(conv1d(shortx, k3, 1), ShapeError);
}

TEST_CASE("conv2d hand cases") {
    Tensor x = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
    Tensor unit = Tensor::from_data({1, 1, 1, 1}, {1});
    CHECK(conv2d(x, unit, 1, 1).values() == std::vector<double>{1, 2, 3, 4});

    Tensor ones = Tensor::from_data({1, 1, 2, 2}, {1, 1, 1, 1});
    CHECK(conv2d(x, ones, 1, 1).values() == std::vector<double>{10});

    Tensor big = Tensor::from_data({1, 1, 3, 3}, {1, 1, 1, 1, 1, 1, 1, 1, 1});
    CHECK_THROWS_AS(conv2d(x, big, 1, 1), ShapeError);
}

TEST_CASE("conv oracle: random instances vs brute force") {
    std::mt19937_64 rng(13);
    for (int iter = 0; iter < 200; ++iter) {
        std::uniform_int_distribution<std::size_t> d(1, 3);
        const std::size_t c = d(rng), o = d(rng), k = d(rng);
        const std::size_t len = k + d(rng) + 2;
        const std::size_t stride = d(rng);
        Tensor x = rand_tensor({c, len}, rng, false);
        Tensor ker = rand_tensor({o, c, k}, rng, false);
        Tensor out = conv1d(x, ker, stride);
        const std::size_t out_len = (len - k) / stride + 1;
        REQUIRE(out.shape() == Shape{o, out_len});
        for (std::size_t oc = 0; oc < o; ++oc) {
            for (std::size_t t = 0; t < out_len; ++t) {
                double s = 0.0;
                for (std::size_t ic = 0; ic < c; ++ic) {
                    for (std::size_t i = 0; i < k; ++i) {
                        s += x.values()[ic * len + t * stride + i] *
                             ker.values()[(oc * c + ic) * k + i];
                    }
                }
                CHECK(out.values()[oc * out_len + t] == doctest::Approx(s).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("backward basics") {
    SUBCASE("sum gives all-ones gradient") {
        Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
        Tape tape;
        {
            TapeScope scope(tape);
            tape.backward(sum_all(x));
        }
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    SUBCASE("sum of squares") {
        Tensor x = Tensor::from_data({2}, {1, 2}, true);
        Tape tape;
        {
            TapeScope scope(tape);
            tape.backward(sum_all(mul(x, x)));
        }
        CHECK(x.grad() == std::vector<double>{2, 4});
    }
    SUBCASE("parameter off the tape keeps zero gradient") {
        Tensor x = Tensor::from_data({2}, {1, 2}, true);
        Tensor unused = Tensor::from_data({2}, {5, 5}, true);
        Tape tape;
        {
            TapeScope scope(tape);
            tape.backward(sum_all(x));
        }
        CHECK(unused.grad() == std::vector<double>{0, 0});
    }
    SUBCASE("non-scalar loss rejected") {
        Tensor x = Tensor::from_data({2}, {1, 2}, true);
        Tape tape;
        CHECK_THROWS_AS(tape.backward(x), ContractError);
    }
}

TEST_CASE("backward linearity: sum of losses equals summed backward passes") {
    std::mt19937_64 rng(17);
    for (int iter = 0; iter < 20; ++iter) {
        Tensor x = rand_tensor({4}, rng);
        std::mt19937_64 wrng(100 + iter);
        Tensor w1 = Tensor::uniform({4}, -1, 1, wrng);
        Tensor w2 = Tensor::uniform({4}, -1, 1, wrng);

        auto l1 = [&] { return sum_all(mul(sigmoid(x), w1)); };
        auto l2 = [&] { return sum_all(mul(tanh_act(x), w2)); };

        x.zero_grad();
        {
            Tape tape;
            TapeScope scope(tape);
            tape.backward(add(l1(), l2()));
        }
        std::vector<double> joint = x.grad();

        x.zero_grad();
        {
            Tape tape;
            TapeScope scope(tape);
            tape.backward(l1());
        }
        std::vector<double> g1 = x.grad();
        x.zero_grad();
        {
            Tape tape;
            TapeScope scope(tape);
            tape.backward(l2());
        }
        std::vector<double> g2 = x.grad();

        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(std::fabs(joint[i] - (g1[i] + g2[i])) <= 1e-12);
        }
    }
}

TEST_CASE("gradient accumulates across consumers") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor doubled = add(x, x);
        tape.backward(sum_all(doubled));
    }
    CHECK(x.grad() == std::vector<double>{2, 2});
}

TEST_CASE("grad_check on exact linear function") {
    Tensor x = Tensor::from_data({5}, {1, 2, 3, 4, 5}, true);
    auto loss = [&] { return sum_all(x); };
    CHECK(fd_max_err(loss, {{"x", x}}) <= 1e-9);
}

TEST_CASE("grad_check at sigmoid saturation with adjusted eps") {
    Tensor x = Tensor::from_data({1}, {30.0}, true);
    auto loss = [&] { return sum_all(sigmoid(x)); };
    CHECK(fd_max_err(loss, {{"x", x}}, 1e-3) <= 1e-4);
}

TEST_CASE("per-op finite-difference sweep, 100 seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        double worst = 0.0;
        auto track = [&](double e) { worst = std::max(worst, e); };

        {
            Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng);
            const std::uint64_t wr = seed * 31 + 1;
            track(fd_max_err([&] { return weighted_sum(add(a, b), wr); }, {{"a", a}, {"b", b}}));
        }
        {
            Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng);
            const std::uint64_t wr = seed * 31 + 2;
            track(fd_max_err([&] { return weighted_sum(sub(a, b), wr); }, {{"a", a}, {"b", b}}));
        }
        {
            Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng);
            const std::uint64_t wr = seed * 31 + 3;
            track(fd_max_err([&] { return weighted_sum(mul(a, b), wr); }, {{"a", a}, {"b", b}}));
        }
        {
            Tensor a = rand_tensor({2, 3}, rng);
            Tensor b = rand_tensor({2, 3}, rng, true, 0.5, 2.0); // away from 0
            const std::uint64_t wr = seed * 31 + 4;
            track(fd_max_err([&] { return weighted_sum(div(a, b), wr); }, {{"a", a}, {"b", b}}));
        }
        {
            Tensor x = rand_tensor({6}, rng);
            const std::uint64_t wr = seed * 31 + 5;
            track(fd_max_err([&] { return weighted_sum(sigmoid(x), wr); }, {{"x", x}}));
            track(fd_max_err([&] { return weighted_sum(tanh_act(x), wr); }, {{"x", x}}));
            track(fd_max_err([&] { return weighted_sum(scalar_mul(x, 1.7), wr); }, {{"x", x}}));
            track(fd_max_err([&] { return weighted_sum(scalar_add(x, -0.3), wr); }, {{"x", x}}));
        }
        {
            // keep relu inputs away from the kink so central differences are clean
            Tensor x = rand_tensor({6}, rng);
            for (double& v : x.values()) v += (v >= 0 ? 0.05 : -0.05);
            const std::uint64_t wr = seed * 31 + 6;
            track(fd_max_err([&] { return weighted_sum(relu(x), wr); }, {{"x", x}}));
        }
        {
            Tensor a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({2, 4, 2}, rng);
            const std::uint64_t wr = seed * 31 + 7;
            track(fd_max_err([&] { return weighted_sum(matmul(a, b), wr); }, {{"a", a}, {"b", b}}));
        }
        {
            Tensor a = rand_tensor({1, 3, 4}, rng), b = rand_tensor({3, 2, 4}, rng);
            const std::uint64_t wr = seed * 31 + 8;
            track(fd_max_err([&] { return weighted_sum(matmul_nt(a, b), wr); },
                             {{"a", a}, {"b", b}}));
        }
        {
            Tensor x = rand_tensor({3, 4}, rng);
            Tensor w = rand_tensor({4, 2}, rng);
            Tensor b = rand_tensor({2}, rng);
            const std::uint64_t wr = seed * 31 + 9;
            track(fd_max_err([&] { return weighted_sum(linear(x, w, b), wr); },
                             {{"x", x}, {"w", w}, {"b", b}}));
        }
        {
            Tensor x = rand_tensor({2, 5}, rng);
            const std::uint64_t wr = seed * 31 + 10;
            track(fd_max_err([&] { return weighted_sum(softmax_lastdim(x), wr); }, {{"x", x}}));
        }
        {
            Tensor x = rand_tensor({2, 6}, rng);
            Tensor k = rand_tensor({3, 2, 3}, rng);
            const std::uint64_t wr = seed * 31 + 11;
            track(fd_max_err([&] { return weighted_sum(conv1d(x, k, 1), wr); },
                             {{"x", x}, {"k", k}}));
        }
        {
            Tensor x = rand_tensor({2, 4, 4}, rng);
            Tensor k = rand_tensor({2, 2, 2, 2}, rng);
            const std::uint64_t wr = seed * 31 + 12;
            track(fd_max_err([&] { return weighted_sum(conv2d(x, k, 1, 2), wr); },
                             {{"x", x}, {"k", k}}));
        }
        {
            Tensor x = rand_tensor({2, 6}, rng);
            const std::uint64_t wr = seed * 31 + 13;
            track(fd_max_err([&] { return weighted_sum(max_pool1d(x, 2, 2), wr); }, {{"x", x}}));
        }
        {
            Tensor table = rand_tensor({5, 3}, rng);
            std::vector<int> ids = {0, 3, 3, 1};
            const std::uint64_t wr = seed * 31 + 14;
            track(fd_max_err([&] { return weighted_sum(embedding_rows(table, ids), wr); },
                             {{"table", table}}));
        }
        {
            Tensor x = rand_tensor({3, 4}, rng);
            Tensor g = rand_tensor({4}, rng, true, 0.5, 1.5);
            Tensor b = rand_tensor({4}, rng);
            const std::uint64_t wr = seed * 31 + 15;
            track(fd_max_err([&] { return weighted_sum(layer_norm(x, g, b), wr); },
                             {{"x", x}, {"g", g}, {"b", b}}));
        }
        {
            Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 2}, rng);
            const std::uint64_t wr = seed * 31 + 16;
            track(fd_max_err([&] { return weighted_sum(concat_lastdim(a, b), wr); },
                             {{"a", a}, {"b", b}}));
        }
        {
            Tensor x = rand_tensor({2, 3, 2}, rng);
            const std::uint64_t wr = seed * 31 + 17;
            track(fd_max_err([&] { return weighted_sum(permute(x, {2, 0, 1}), wr); }, {{"x", x}}));
            track(fd_max_err([&] { return weighted_sum(transpose_last2(x), wr); }, {{"x", x}}));
            track(fd_max_err([&] { return weighted_sum(reshape(x, {6, 2}), wr); }, {{"x", x}}));
        }
        {
            Tensor x = rand_tensor({3, 4}, rng);
            Tensor v = rand_tensor({3}, rng);
            Tensor f = rand_tensor({4}, rng);
            const std::uint64_t wr = seed * 31 + 18;
            track(fd_max_err([&] { return weighted_sum(scale_channels(x, v), wr); },
                             {{"x", x}, {"v", v}}));
            track(fd_max_err([&] { return weighted_sum(shift_channels(x, v), wr); },
                             {{"x", x}, {"v", v}}));
            track(fd_max_err([&] { return weighted_sum(scale_features(x, f), wr); },
                             {{"x", x}, {"f", f}}));
            track(fd_max_err([&] { return weighted_sum(shift_features(x, f), wr); },
                             {{"x", x}, {"f", f}}));
        }
        {
            Tensor x = rand_tensor({4, 3}, rng);
            Mask mask = {1, 0, 1, 1};
            const std::uint64_t wr = seed * 31 + 19;
            track(fd_max_err([&] { return weighted_sum(masked_mean_dim0(x, mask), wr); },
                             {{"x", x}}));
            track(fd_max_err([&] { return weighted_sum(mean_lastdim(x), wr); }, {{"x", x}}));
            track(fd_max_err([&] { return weighted_sum(norm_lastdim(x), wr); }, {{"x", x}}));
        }
        {
            Tensor scores = rand_tensor({3, 3}, rng);
            Mask mask = {1, 1, 0};
            const std::uint64_t wr = seed * 31 + 20;
            track(fd_max_err(
                [&] { return weighted_sum(softmax_lastdim(mask_scores(scores, mask)), wr); },
                {{"scores", scores}}));
        }
        {
            Tensor x = rand_tensor({4, 4}, rng);
            const std::uint64_t wr = seed * 31 + 21;
            track(fd_max_err(
                [&] {
                    std::mt19937_64 drng(seed + 999); // same mask on every evaluation
                    return weighted_sum(dropout(x, 0.4, drng, true), wr);
                },
                {{"x", x}}));
        }

        CHECK_MESSAGE(worst <= 1e-4, "seed ", seed, " worst rel err ", worst);
    }
}

TEST_CASE("dropout identity in eval mode and reproducible in train mode") {
    std::mt19937_64 rng(23);
    Tensor x = rand_tensor({4, 8}, rng, false);

    std::mt19937_64 r1(5);
    Tensor eval_out = dropout(x, 0.5, r1, false);
    CHECK(eval_out.node().get() == x.node().get()); // identity, bit for bit

    std::mt19937_64 r2(5), r3(5);
    Tensor t1 = dropout(x, 0.5, r2, true);
    Tensor t2 = dropout(x, 0.5, r3, true);
    CHECK(t1.values() == t2.values());

    std::mt19937_64 r4(6);
    Tensor t3 = dropout(x, 0.5, r4, true);
    CHECK(t1.values() != t3.values());
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::zeros({2, 0, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor::from_data({2}, {1, 2, 3}), ShapeError);
    CHECK(Tensor::scalar(1.5).item() == 1.5);

    Tensor s = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK_THROWS_AS(s.item(), ContractError);
    CHECK(s.all_finite());
}

TEST_CASE("max pool forward and tie break") {
    Tensor x = Tensor::from_data({1, 4}, {1, 3, 3, 2});
    Tensor out = max_pool1d(x, 2, 2);
    CHECK(out.values() == std::vector<double>{3, 3});

    // ties route gradient to the first index
    Tensor tie = Tensor::from_data({1, 2}, {5, 5}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum_all(max_pool1d(tie, 2, 2)));
    }
    CHECK(tie.grad() == std::vector<double>{1, 0});
}

TEST_CASE("embedding rejects out-of-range ids") {
    Tensor table = Tensor::zeros({4, 2});
    CHECK_THROWS_AS(embedding_rows(table, {0, 4}), ContractError);
    CHECK_THROWS_AS(embedding_rows(table, {-1}), ContractError);
}
