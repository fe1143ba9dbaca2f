#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dgrcl/tensor.hpp"

using namespace dgrcl;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("forward values match definitions") {
    SECTION("softmax of equal logits is uniform") {
        Tensor x({1, 2}, {0.0, 0.0});
        Tensor y = softmax_rows(x);
        CHECK(y[0] == Catch::Approx(0.5).margin(1e-15));
        CHECK(y[1] == Catch::Approx(0.5).margin(1e-15));
    }
    SECTION("relu clamps negatives") {
        Tensor x({1, 2}, {-1.0, 2.0});
        Tensor y = relu(x);
        CHECK(y[0] == 0.0);
        CHECK(y[1] == 2.0);
    }
    SECTION("matmul by identity is a no-op") {
        Tensor a({2, 2}, {1, 2, 3, 4});
        Tensor y = matmul(a, Tensor::identity(2));
        for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == a[i]);
    }
    SECTION("transpose and concat_rows") {
        Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
        Tensor t = transpose(a);
        CHECK(t.shape() == Shape{3, 2});
        CHECK(t.at(0, 1) == 4.0);
        Tensor c = concat_rows(a, a);
        CHECK(c.shape() == Shape{4, 3});
        CHECK(c.at(3, 2) == 6.0);
    }
    SECTION("sum and mean reduce to scalars") {
        Tensor a({2, 2}, {1, 2, 3, 4});
        CHECK(sum(a).value() == 10.0);
        CHECK(mean(a).value() == 2.5);
    }
}

TEST_CASE("forward shape and finiteness errors") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({3, 2}, std::vector<double>(6, 1.0));
    CHECK_THROWS_AS(add(a, b), ShapeMismatch);
    CHECK_THROWS_AS(matmul(a, b), ShapeMismatch);

    Tensor bad({1, 2}, {1.0, std::nan("")});
    CHECK_THROWS_AS(relu(bad), NonFinite);
    Tensor inf({1, 1}, {INFINITY});
    CHECK_THROWS_AS(add(inf, Tensor({1, 1}, {1.0})), NonFinite);
}

TEST_CASE("generic forward dispatcher routes to primitives") {
    Tensor a({1, 2}, {1.0, -1.0});
    Tensor b({1, 2}, {2.0, 2.0});
    Tensor s = forward(OpKind::add, {a, b});
    CHECK(s[0] == 3.0);
    Tensor r = forward(OpKind::relu, {a});
    CHECK(r[1] == 0.0);
    Tensor m = forward(OpKind::scalar_mul, {a}, 3.0);
    CHECK(m[0] == 3.0);
    CHECK_THROWS_AS(forward(OpKind::add, {a}), ShapeMismatch);
}

TEST_CASE("backward on simple graphs") {
    SECTION("d(x*x)/dx = 2x") {
        Tape tape;
        Tensor x({1, 1}, {3.0});
        Tensor xl = tape.leaf(x);
        Tensor loss = sum(hadamard(xl, xl));
        tape.backward(loss);
        CHECK(x.grad()[0] == Catch::Approx(6.0).margin(1e-12));
    }
    SECTION("mean of relu uses subgradient 0 at negatives") {
        Tape tape;
        Tensor x({1, 2}, {-1.0, 1.0});
        Tensor xl = tape.leaf(x);
        Tensor loss = mean(relu(xl));
        tape.backward(loss);
        CHECK(x.grad()[0] == 0.0);
        CHECK(x.grad()[1] == 0.5);
    }
    SECTION("matmul gradient matches finite differences") {
        Rng rng(11);
        Tensor a = random_tensor({2, 2}, rng);
        Tensor b = random_tensor({2, 2}, rng);
        auto f = [&](const Tensor& v) { return sum(matmul(v, b)); };
        CHECK(finite_diff_check(f, a, 1e-5) < 1e-6);
    }
    SECTION("unreachable leaves get zero grad") {
        Tape tape;
        Tensor x({1, 1}, {2.0});
        Tensor y({1, 1}, {5.0});
        Tensor xl = tape.leaf(x);
        Tensor yl = tape.leaf(y);
        (void)yl;
        Tensor loss = sum(xl);
        tape.backward(loss);
        CHECK(x.grad()[0] == 1.0);
        CHECK(y.grad()[0] == 0.0);
    }
}

TEST_CASE("backward error contracts") {
    Tape tape;
    Tensor x({1, 2}, {1.0, 2.0});
    Tensor xl = tape.leaf(x);
    CHECK_THROWS_AS(tape.backward(xl), NotScalar);

    Tensor detached = Tensor::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(detached), DetachedTensor);
}

TEST_CASE("every primitive passes a finite-difference check") {
    Rng rng(20240209);
    const double tol = 1e-6;

    auto fd_unary = [&](auto make_loss, Shape shape, double lo, double hi) {
        Tensor x = random_tensor(shape, rng, lo, hi);
        auto f = [&](const Tensor& v) { return make_loss(v); };
        return finite_diff_check(f, x, 1e-5);
    };

    SECTION("elementwise and reductions") {
        CHECK(fd_unary([](const Tensor& v) { return sum(relu(v)); }, {3, 3}, -2, 2) < tol);
        CHECK(fd_unary([](const Tensor& v) { return sum(tanh(v)); }, {3, 3}, -2, 2) < tol);
        CHECK(fd_unary([](const Tensor& v) { return sum(sigmoid(v)); }, {3, 3}, -2, 2) < tol);
        CHECK(fd_unary([](const Tensor& v) { return sum(exp(v)); }, {3, 3}, -2, 2) < tol);
        CHECK(fd_unary([](const Tensor& v) { return sum(log(v)); }, {3, 3}, 0.5, 2.5) < tol);
        CHECK(fd_unary([](const Tensor& v) { return mean(hadamard(v, v)); }, {2, 4}, -2, 2) < tol);
        CHECK(fd_unary([](const Tensor& v) { return sum(scalar_mul(v, -1.7)); }, {2, 2}, -2, 2) < tol);
    }
    SECTION("softmax, normalize, structural ops") {
        Rng wr(7);
        Tensor w = random_tensor({3, 3}, wr);
        CHECK(fd_unary([&](const Tensor& v) { return sum(hadamard(softmax_rows(v), w)); },
                       {3, 3}, -2, 2) < tol);
        CHECK(fd_unary([&](const Tensor& v) { return sum(hadamard(l2_normalize_rows(v), w)); },
                       {3, 3}, -2, 2) < tol);
        CHECK(fd_unary([&](const Tensor& v) { return sum(hadamard(transpose(v), w)); },
                       {3, 3}, -2, 2) < tol);
        Tensor other = random_tensor({2, 3}, wr);
        CHECK(fd_unary([&](const Tensor& v) { return mean(concat_rows(v, other)); },
                       {2, 3}, -2, 2) < tol);
    }
    SECTION("binary op chains") {
        Rng br(9);
        Tensor b = random_tensor({3, 3}, br);
        CHECK(fd_unary([&](const Tensor& v) { return sum(hadamard(add(v, b), subtract(v, b))); },
                       {3, 3}, -2, 2) < tol);
        CHECK(fd_unary([&](const Tensor& v) { return sum(matmul(v, matmul(b, v))); },
                       {3, 3}, -2, 2) < tol);
    }
}

TEST_CASE("softmax rows are strict distributions") {
    Rng rng(33);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor x = random_tensor({4, 5}, rng);
        Tensor y = softmax_rows(x);
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 5; ++j) {
                CHECK(y.at(i, j) > 0.0);
                s += y.at(i, j);
            }
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("l2_normalize_rows yields unit or zero rows") {
    Rng rng(34);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor x = random_tensor({4, 6}, rng);
        for (std::size_t j = 0; j < 6; ++j) x.at(2, j) = 0.0;  // plant a zero row
        Tensor y = l2_normalize_rows(x);
        for (std::size_t i = 0; i < 4; ++i) {
            double sq = 0.0;
            for (std::size_t j = 0; j < 6; ++j) sq += y.at(i, j) * y.at(i, j);
            if (i == 2)
                CHECK(sq == 0.0);
            else
                CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("backward is deterministic on a fixed tape") {
    Rng rng(55);
    Tensor a = random_tensor({3, 3}, rng);
    Tensor b = random_tensor({3, 3}, rng);

    Tape tape;
    Tensor al = tape.leaf(a);
    Tensor bl = tape.leaf(b);
    Tensor loss = mean(relu(matmul(softmax_rows(al), tanh(bl))));

    tape.backward(loss);
    std::vector<double> first(a.grad().begin(), a.grad().end());
    std::vector<double> firstb(b.grad().begin(), b.grad().end());

    a.zero_grad();
    b.zero_grad();
    tape.backward(loss);
    std::vector<double> second(a.grad().begin(), a.grad().end());
    std::vector<double> secondb(b.grad().begin(), b.grad().end());

    CHECK(first == second);
    CHECK(firstb == secondb);
}

TEST_CASE("finite_diff_check contract") {
    SECTION("sum of squares is accurate") {
        Rng rng(77);
        Tensor x = random_tensor({3, 3}, rng);
        auto f = [](const Tensor& v) { return sum(hadamard(v, v)); };
        CHECK(finite_diff_check(f, x, 1e-5) < 1e-6);
    }
    SECTION("constant function has zero error") {
        Tensor x({2, 2}, {1, 2, 3, 4});
        auto f = [](const Tensor& v) { return scalar_mul(sum(subtract(v, v)), 0.0); };
        CHECK(finite_diff_check(f, x, 1e-5) == 0.0);
    }
    SECTION("non-scalar f is rejected") {
        Tensor x({2, 2}, {1, 2, 3, 4});
        auto f = [](const Tensor& v) { return relu(v); };
        CHECK_THROWS_AS(finite_diff_check(f, x, 1e-5), NotScalar);
    }
}

TEST_CASE("gradient accumulates across backward calls until zeroed") {
    Tape tape;
    Tensor x({1, 1}, {4.0});
    Tensor xl = tape.leaf(x);
    Tensor loss = sum(xl);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad()[0] == 2.0);
    x.zero_grad();
    tape.backward(loss);
    CHECK(x.grad()[0] == 1.0);
}
