#include "doctest.h"

#include <cmath>
#include <functional>

#include "avcap/tensor.hpp"

using namespace avcap;

namespace {

// central-difference oracle, independent of the tape
double numeric_grad(const std::function<double()>& eval, double* coord, double h = 1e-5) {
    const double orig = *coord;
    *coord = orig + h;
    const double up = eval();
    *coord = orig - h;
    const double down = eval();
    *coord = orig;
    return (up - down) / (2.0 * h);
}

double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

// checks every coordinate of every input against finite differences
void check_gradients(const std::vector<Tensor>& inputs, const std::function<Tensor()>& make_loss,
                     double tol = 1e-4) {
    const auto eval = [&] { return make_loss().item(); };
    Tensor loss = make_loss();
    for (const auto& t : inputs) {
        Tensor handle = t;
        handle.zero_grad();
    }
    backward(loss);
    for (const auto& t : inputs) {
        Tensor handle = t;
        for (size_t i = 0; i < handle.size(); ++i) {
            const double num = numeric_grad(eval, &handle.data()[i]);
            const double ana = handle.grad()[i];
            CAPTURE(i);
            CHECK(rel_err(ana, num) < tol);
        }
    }
}

Tensor weighted_sum(const Tensor& x, Rng& rng) {
    Tensor w = Tensor::randn(x.shape(), rng);
    return sum(mul(x, w));
}

}  // namespace

TEST_CASE("matmul forward: identity and hand arithmetic") {
    const Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Rng rng(7);
    const Tensor x = Tensor::randn({3, 5}, rng);
    const Tensor y = matmul(eye, x);
    for (size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(0));

    const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    const Tensor b = Tensor::from_data({2, 1}, {5, 6});
    const Tensor c = matmul(a, b);
    CHECK(c.at(0, 0) == 17.0);
    CHECK(c.at(1, 0) == 39.0);
}

TEST_CASE("matmul shape mismatch reports both shapes") {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2x3)") != std::string::npos);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(11);
    const Tensor x = Tensor::randn({6, 9}, rng, 3.0);
    const Tensor y = softmax(x);
    for (int i = 0; i < 6; ++i) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) s += y.at(i, j);
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("log_softmax equals log of softmax") {
    Rng rng(13);
    const Tensor x = Tensor::randn({4, 7}, rng, 2.0);
    const Tensor ls = log_softmax(x);
    const Tensor s = softmax(x);
    for (size_t i = 0; i < ls.size(); ++i) {
        CHECK(std::abs(ls.data()[i] - std::log(s.data()[i])) < 1e-10);
    }
}

TEST_CASE("backward: sum gives all-ones gradient") {
    Rng rng(17);
    Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
    backward(sum(x));
    for (const double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward: analytic derivative of sum of squares") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward rejects non-scalar loss and detached tensors") {
    Rng rng(19);
    Tensor x = Tensor::randn({2, 2}, rng, 1.0, true);
    CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
    CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), ContractError);
}

TEST_CASE("finite differences: every elementwise and reduction op") {
    Rng rng(23);
    SUBCASE("add/sub/mul") {
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor b = Tensor::randn({3, 4}, rng, 1.0, true);
        check_gradients({a, b}, [&] { return sum(mul(add(a, b), sub(a, b))); });
    }
    SUBCASE("scale and mean") {
        Tensor a = Tensor::randn({5}, rng, 1.0, true);
        check_gradients({a}, [&] { return mean(scale(mul(a, a), 2.5)); });
    }
    SUBCASE("gelu") {
        Tensor a = Tensor::randn({4, 3}, rng, 2.0, true);
        Tensor w = Tensor::randn({4, 3}, rng);
        check_gradients({a}, [&] { return sum(mul(gelu(a), w)); });
    }
    SUBCASE("logsigmoid") {
        Tensor a = Tensor::randn({6}, rng, 3.0, true);
        Tensor w = Tensor::randn({6}, rng);
        check_gradients({a}, [&] { return sum(mul(logsigmoid(a), w)); });
    }
    SUBCASE("softmax and log_softmax") {
        Tensor a = Tensor::randn({3, 5}, rng, 1.5, true);
        Tensor w = Tensor::randn({3, 5}, rng);
        check_gradients({a}, [&] { return sum(mul(softmax(a), w)); });
        check_gradients({a}, [&] { return sum(mul(log_softmax(a), w)); });
    }
}

TEST_CASE("finite differences: matmul, transpose, bias, layout ops") {
    Rng rng(29);
    SUBCASE("matmul both sides") {
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 2}, rng);
        check_gradients({a, b}, [&] { return sum(mul(matmul(a, b), w)); });
    }
    SUBCASE("transpose") {
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 3}, rng);
        check_gradients({a}, [&] { return sum(mul(transpose(a), w)); });
    }
    SUBCASE("add_bias") {
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor bias = Tensor::randn({4}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        check_gradients({a, bias}, [&] { return sum(mul(add_bias(a, bias), w)); });
    }
    SUBCASE("concat axis 0 and 1") {
        Tensor a = Tensor::randn({2, 3}, rng, 1.0, true);
        Tensor b = Tensor::randn({1, 3}, rng, 1.0, true);
        Tensor w0 = Tensor::randn({3, 3}, rng);
        check_gradients({a, b}, [&] { return sum(mul(concat({a, b}, 0), w0)); });
        Tensor c = Tensor::randn({2, 2}, rng, 1.0, true);
        Tensor w1 = Tensor::randn({2, 5}, rng);
        check_gradients({a, c}, [&] { return sum(mul(concat({a, c}, 1), w1)); });
    }
    SUBCASE("slice rows and cols") {
        Tensor a = Tensor::randn({4, 5}, rng, 1.0, true);
        Tensor w0 = Tensor::randn({2, 5}, rng);
        check_gradients({a}, [&] { return sum(mul(slice(a, 0, 1, 3), w0)); });
        Tensor w1 = Tensor::randn({4, 2}, rng);
        check_gradients({a}, [&] { return sum(mul(slice(a, 1, 2, 4), w1)); });
    }
    SUBCASE("embedding") {
        Tensor table = Tensor::randn({6, 3}, rng, 1.0, true);
        const std::vector<int> ids = {1, 4, 1, 0};
        Tensor w = Tensor::randn({4, 3}, rng);
        check_gradients({table}, [&] { return sum(mul(embedding(table, ids), w)); });
    }
    SUBCASE("gather_cols") {
        Tensor a = Tensor::randn({4, 5}, rng, 1.0, true);
        const std::vector<int> cols = {0, 3, 2, 4};
        Tensor w = Tensor::randn({4}, rng);
        check_gradients({a}, [&] { return sum(mul(gather_cols(a, cols), w)); });
    }
    SUBCASE("layer_norm") {
        Tensor x = Tensor::randn({3, 6}, rng, 1.0, true);
        Tensor g = Tensor::randn({6}, rng, 1.0, true);
        Tensor b = Tensor::randn({6}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 6}, rng);
        check_gradients({x, g, b}, [&] { return sum(mul(layer_norm(x, g, b), w)); });
    }
}

TEST_CASE("finite differences: random two-layer net") {
    Rng rng(31);
    Tensor x = Tensor::randn({2, 6}, rng);
    Tensor w1 = Tensor::randn({6, 8}, rng, 0.5, true);
    Tensor b1 = Tensor::randn({8}, rng, 0.5, true);
    Tensor w2 = Tensor::randn({8, 4}, rng, 0.5, true);
    Tensor b2 = Tensor::randn({4}, rng, 0.5, true);
    Tensor w = Tensor::randn({2, 4}, rng);
    check_gradients({w1, b1, w2, b2}, [&] {
        const Tensor h = gelu(add_bias(matmul(x, w1), b1));
        return sum(mul(add_bias(matmul(h, w2), b2), w));
    });
}

TEST_CASE("interior slice of tracked graph accumulates correctly on reuse") {
    Rng rng(37);
    Tensor x = Tensor::randn({4}, rng, 1.0, true);
    // x used twice: gradients must sum
    backward(add(sum(mul(x, x)), sum(x)));
    for (size_t i = 0; i < x.size(); ++i) {
        CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i] + 1.0));
    }
}

TEST_CASE("ops refuse non-finite results") {
    const Tensor big = Tensor::full({2, 2}, 1e308);
    CHECK_THROWS_AS(matmul(big, big), NumericError);
    CHECK_THROWS_AS(Tensor::from_data({1}, {std::nan("")}), NumericError);
}

TEST_CASE("determinism: same seed gives bit-identical tensors") {
    Rng a(99), b(99);
    const Tensor x = Tensor::randn({16, 16}, a);
    const Tensor y = Tensor::randn({16, 16}, b);
    CHECK(x.data() == y.data());
    const Tensor sx = softmax(x);
    const Tensor sy = softmax(y);
    CHECK(sx.data() == sy.data());
}

TEST_CASE("graph visits each node exactly once") {
    Rng rng(41);
    Tensor x = Tensor::randn({3}, rng, 1.0, true);
    const Tensor y = mul(x, x);
    const Tensor loss = add(sum(y), sum(y));  // diamond reuse
    const Graph g = Graph::trace(loss);
    backward(loss);
    // d/dx (2 * sum(x^2)) = 4x; double-visiting y would give 8x
    for (size_t i = 0; i < x.size(); ++i) {
        CHECK(x.grad()[i] == doctest::Approx(4.0 * x.data()[i]));
    }
    CHECK(g.node_count() >= 4);
}

TEST_CASE("empty slices are valid and concat back exhaustively") {
    Rng rng(43);
    const Tensor a = Tensor::randn({5, 3}, rng);
    const Tensor empty = slice(a, 0, 2, 2);
    CHECK(empty.dim(0) == 0);
    const Tensor whole = concat({slice(a, 0, 0, 2), empty, slice(a, 0, 2, 5)}, 0);
    CHECK(whole.data() == a.data());
}
