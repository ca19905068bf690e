#include <doctest.h>

#include <cmath>

#include "prvr/grad_check.hpp"
#include "prvr/rng.hpp"

using namespace prvr;

namespace {

std::vector<double> random_params(uint64_t seed, size_t n) {
    Rng rng(seed);
    std::vector<double> p(n);
    for (auto& v : p) v = rng.next_gaussian();
    return p;
}

}  // namespace

TEST_CASE("grad_check passes a quadratic form") {
    // f(x) = sum_i (i + 1) * x_i^2
    LossFn f = [](Graph* g, const Tensor& x) {
        Tensor w = Tensor::vec({1, 2, 3, 4});
        (void)g;
        return sum(mul(w, mul(x, x)));
    };
    auto rep = grad_check(f, random_params(1, 4), 1e-5, 1e-6);
    CHECK(rep.pass);
}

TEST_CASE("grad_check passes a random 3-layer composition") {
    // params = two 4x4 weight matrices + a 4-vector; f = mean(gelu(W2 gelu(W1 x)))
    LossFn f = [](Graph*, const Tensor& flat) {
        Tensor w1 = reshape(slice_rows(flat, 0, 16), {4, 4});
        Tensor w2 = reshape(slice_rows(flat, 16, 32), {4, 4});
        Tensor x = reshape(slice_rows(flat, 32, 36), {1, 4});
        Tensor h = gelu(matmul(x, w1));
        Tensor out = gelu(matmul(h, w2));
        return mean(softmax_rows(out));
    };
    for (uint64_t seed : {2, 3, 4}) {
        auto rep = grad_check(f, random_params(seed, 36), 1e-5, 1e-6);
        INFO("seed ", seed, ": ", rep.summary());
        CHECK(rep.pass);
    }
}

TEST_CASE("fd_compare flags a corrupted gradient with the offending coordinate") {
    LossFn f = [](Graph*, const Tensor& x) { return sum(mul(x, x)); };
    std::vector<double> params = random_params(9, 5);
    Graph g;
    Tensor leaf = g.leaf(Tensor::vec(params));
    auto grads = g.backward(f(&g, leaf));
    std::vector<double> corrupted = grads.wrt(leaf);
    corrupted[3] += 0.5;
    auto rep = fd_compare(f, params, corrupted, 1e-5, 1e-6);
    CHECK_FALSE(rep.pass);
    CHECK(rep.worst_coord == 3);
}

TEST_CASE("grad_check reports non-finite objectives") {
    LossFn f = [](Graph*, const Tensor& x) { return log(sum(x)); };
    CHECK_THROWS_AS(grad_check(f, {0.5, -0.5}, 1e-5, 1e-6), NumericError);
}

TEST_CASE("layer norm and attention-style composite pass the checker") {
    LossFn f = [](Graph*, const Tensor& flat) {
        Tensor x = reshape(slice_rows(flat, 0, 12), {3, 4});
        Tensor gain = slice_rows(flat, 12, 16);
        Tensor bias = slice_rows(flat, 16, 20);
        Tensor h = layer_norm_rows(x, gain, bias);
        Tensor attn = softmax_rows(scale(matmul(h, transpose(h)), 0.5));
        return mean(matmul(attn, h));
    };
    for (uint64_t seed : {5, 6}) {
        auto rep = grad_check(f, random_params(seed, 20), 1e-5, 1e-6);
        INFO("seed ", seed, ": ", rep.summary());
        CHECK(rep.pass);
    }
}
