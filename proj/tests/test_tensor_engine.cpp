#include <cmath>
#include <sstream>

#include "doctest.h"
#include "sgma/gradcheck.hpp"
#include "sgma/ops.hpp"
#include "sgma/serialize.hpp"
#include "test_util.hpp"

using namespace sgma;
using sgma::testing::probe_weights;
using sgma::testing::random_parameter;
using sgma::testing::random_tensor;

namespace {

// Collapses any op output into a scalar with non-uniform weights so that no
// gradient entry vanishes by symmetry.
template <typename Op>
double check_unary(Op op, const Tensor& x, std::uint64_t seed, double eps = 1e-5) {
  return grad_check(
      [&](const Tensor& in) {
        Tensor y = op(in);
        return weighted_sum(y, probe_weights(y, seed));
      },
      x, eps);
}

}  // namespace

TEST_CASE("tensor construction validates shapes and values") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), NonFiniteError);
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.grad().empty());
  t.set_requires_grad(true);
  CHECK(t.grad().size() == 6);
}

TEST_CASE("conv2d") {
  SUBCASE("1x1 identity kernel reproduces the input") {
    Tensor x = random_tensor({1, 1, 4, 5}, 1);
    Tensor y = conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0), 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("all-ones 3x3 sums to 9") {
    Tensor y = conv2d(Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == 9.0);
  }
  SUBCASE("padding and stride shapes") {
    Tensor y = conv2d(Tensor::zeros({2, 3, 7, 7}), Tensor::zeros({4, 3, 3, 3}), 2, 1);
    CHECK(y.shape() == Shape{2, 4, 4, 4});
  }
  SUBCASE("gradients for input and kernel match finite differences") {
    Tensor x = random_parameter({2, 3, 5, 5}, 2);
    Tensor k = random_parameter({4, 3, 3, 3}, 3);
    Tensor w = probe_weights(Tensor::zeros({2, 4, 5, 5}), 4);
    Tensor inputs[] = {x, k};
    CHECK(grad_check([&] { return weighted_sum(conv2d(x, k, 1, 1), w); }, inputs) <= 1e-4);
  }
  SUBCASE("more shapes") {
    for (auto [shape, kshape, stride, pad] :
         {std::tuple{Shape{1, 2, 6, 4}, Shape{3, 2, 3, 3}, 1, 0}, std::tuple{Shape{2, 1, 7, 7}, Shape{2, 1, 3, 3}, 2, 1},
          std::tuple{Shape{1, 3, 4, 4}, Shape{2, 3, 2, 2}, 1, 1}}) {
      Tensor x = random_parameter(shape, 10);
      Tensor k = random_parameter(kshape, 11);
      Tensor w = probe_weights(conv2d(x.detach(), k.detach(), stride, pad), 12);
      Tensor inputs[] = {x, k};
      CHECK(grad_check([&] { return weighted_sum(conv2d(x, k, stride, pad), w); }, inputs) <= 1e-4);
    }
  }
  SUBCASE("shape errors name the offending dimension") {
    try {
      conv2d(Tensor::zeros({1, 2, 5, 5}), Tensor::zeros({1, 3, 3, 3}), 1, 0);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("channels") != std::string::npos);
    }
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), 0, 0), ShapeError);
  }
}

TEST_CASE("fully_connected") {
  Tensor x = Tensor::from({1, 2}, {2, 3});
  Tensor y = fully_connected(x, Tensor::from({1, 2}, {1, 1}), Tensor::from({1}, {0}));
  CHECK(y.item() == 5.0);

  Tensor id = fully_connected(x, Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2}));
  CHECK(id[0] == 2.0);
  CHECK(id[1] == 3.0);

  Tensor in = random_parameter({3, 6}, 5);
  Tensor w = random_parameter({4, 6}, 6);
  Tensor b = random_parameter({4}, 7);
  Tensor probe = probe_weights(Tensor::zeros({3, 4}), 8);
  Tensor inputs[] = {in, w, b};
  CHECK(grad_check([&] { return weighted_sum(fully_connected(in, w, b), probe); }, inputs) <= 1e-4);

  CHECK_THROWS_AS(fully_connected(in, Tensor::zeros({4, 5}), b), ShapeError);
  CHECK_THROWS_AS(fully_connected(in, w, Tensor::zeros({3})), ShapeError);
}

TEST_CASE("pointwise activations") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  Tensor r = relu(Tensor::from({2}, {-3, 3}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 3.0);

  Tensor x = Tensor::parameter({}, {0.0});
  {
    Tape tape;
    tape.backward(sigmoid(x));
  }
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(grad_check([](const Tensor& in) { return sigmoid(in); }, Tensor::scalar(0.0)) <= 1e-9);

  SUBCASE("relu subgradient at zero is zero") {
    Tensor z = Tensor::parameter({1}, {0.0});
    Tape tape;
    tape.backward(sum(relu(z)));
    CHECK(z.grad()[0] == 0.0);
  }
  for (std::uint64_t s = 0; s < 3; ++s) {
    Tensor in = random_tensor({2 + s, 3, 2}, 20 + s, -2, 2);
    CHECK(check_unary([](const Tensor& t) { return sigmoid(t); }, in, s) <= 1e-4);
    CHECK(check_unary([](const Tensor& t) { return relu(t); }, in, s) <= 1e-4);
  }
}

TEST_CASE("global_avg_pool") {
  Tensor c = global_avg_pool(Tensor::full({1, 1, 3, 3}, 4.25));
  CHECK(c.item() == 4.25);
  CHECK(global_avg_pool(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4})).item() == 2.5);

  Tensor x = random_parameter({1, 1, 3, 4}, 30);
  {
    Tape tape;
    tape.backward(sum(global_avg_pool(x)));
  }
  for (double g : x.grad()) CHECK(g == doctest::Approx(1.0 / 12.0));
  for (std::uint64_t s = 0; s < 3; ++s) {
    CHECK(check_unary([](const Tensor& t) { return global_avg_pool(t); }, random_tensor({1 + s, 2, 3 + s, 2}, 31 + s), s) <=
          1e-4);
  }
}

TEST_CASE("avg_pool2") {
  Tensor y = avg_pool2(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}));
  CHECK(y.item() == 2.5);
  for (std::uint64_t s = 0; s < 3; ++s) {
    CHECK(check_unary([](const Tensor& t) { return avg_pool2(t); }, random_tensor({1, 2 + s, 4, 6}, 40 + s), s) <= 1e-4);
  }
}

TEST_CASE("bilinear_resize") {
  Tensor c = bilinear_resize(Tensor::full({1, 2, 3, 5}, 0.7), 6, 4);
  for (double v : c.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));

  Tensor x = random_tensor({1, 1, 4, 3}, 50);
  Tensor same = bilinear_resize(x, 4, 3);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same[i] == x[i]);

  // Hand evaluation: the centre of a 3x3 align-corners grid sits at (0.5, 0.5)
  // of the source, i.e. the mean of all four source pixels.
  Tensor up = bilinear_resize(Tensor::from({1, 1, 2, 2}, {0, 1, 2, 3}), 3, 3);
  CHECK(up[4] == doctest::Approx(1.5));
  CHECK(up[0] == 0.0);
  CHECK(up[2] == 1.0);
  CHECK(up[6] == 2.0);
  CHECK(up[8] == 3.0);
  CHECK(up[1] == doctest::Approx(0.5));

  for (std::uint64_t s = 0; s < 3; ++s) {
    CHECK(check_unary([s](const Tensor& t) { return bilinear_resize(t, 5 + static_cast<int>(s), 3); },
                      random_tensor({1, 2, 4, 6}, 51 + s), s) <= 1e-4);
  }
}

TEST_CASE("l2_normalize") {
  Tensor y = l2_normalize(Tensor::from({1, 2}, {3, 4}), 1e-12);
  CHECK(y[0] == doctest::Approx(0.6));
  CHECK(y[1] == doctest::Approx(0.8));
  Tensor u = l2_normalize(Tensor::from({1, 3}, {0, 1, 0}), 1e-12);
  CHECK(u[1] == 1.0);
  CHECK(check_unary([](const Tensor& t) { return l2_normalize(t, 1e-12); }, random_tensor({2, 5}, 60), 0) <= 1e-4);
  CHECK(check_unary([](const Tensor& t) { return l2_normalize(t, 1e-12); }, random_tensor({3, 2}, 61), 1) <= 1e-4);
  CHECK(check_unary([](const Tensor& t) { return l2_normalize(t, 1e-12); }, random_tensor({1, 7}, 62), 2) <= 1e-4);
  // Below eps the row is divided by eps and is not unit length.
  Tensor tiny = l2_normalize(Tensor::from({1, 2}, {1e-9, 0}), 1e-6);
  CHECK(tiny[0] == doctest::Approx(1e-3));
}

TEST_CASE("remaining differentiable primitives pass grad_check on several shapes") {
  for (std::uint64_t s = 0; s < 3; ++s) {
    Tensor a = random_tensor({2, 3 + s}, 70 + s);
    Tensor b = random_tensor({3 + s, 2}, 80 + s);
    Tensor bp = b.detach();
    bp.set_requires_grad(true);
    Tensor ap = a.detach();
    ap.set_requires_grad(true);
    Tensor pw = probe_weights(Tensor::zeros({2, 2}), s);
    Tensor inputs[] = {ap, bp};
    CHECK(grad_check([&] { return weighted_sum(matmul(ap, bp), pw); }, inputs) <= 1e-4);

    Tensor t = random_tensor({4, 3 + s}, 90 + s, 0.05, 0.95);
    Tensor target = random_tensor({4, 3 + s}, 95 + s, 0.0, 1.0);
    CHECK(grad_check([&](const Tensor& p) { return mse(p, target); }, t) <= 1e-4);
    CHECK(grad_check([&](const Tensor& p) { return binary_cross_entropy(p, target); }, t) <= 1e-4);
    CHECK(check_unary([](const Tensor& p) { return mul(p, p); }, t, s) <= 1e-4);
    CHECK(check_unary([](const Tensor& p) { return sub(scale(p, 3.0), p); }, t, s) <= 1e-4);
    CHECK(check_unary([](const Tensor& p) { return reshape(p, {p.numel()}); }, t, s) <= 1e-4);
    CHECK(check_unary([](const Tensor& p) { return slice_columns(p, 1, 3); }, t, s) <= 1e-4);
    std::vector<double> sc{2.0, -1.0, 0.5, 3.0, 1.5}, off{1, 2, 3, 4, 5};
    CHECK(check_unary(
              [&](const Tensor& p) {
                return column_affine(p, std::span(sc).first(p.dim(1)), std::span(off).first(p.dim(1)));
              },
              t, s) <= 1e-4);
    Tensor bias_in = random_tensor({2, 3, 2, 2}, 97 + s);
    Tensor bias = random_parameter({3}, 98 + s);
    Tensor bin = bias_in.detach();
    bin.set_requires_grad(true);
    Tensor pw2 = probe_weights(bias_in, s);
    Tensor bias_inputs[] = {bin, bias};
    CHECK(grad_check([&] { return weighted_sum(add_channel_bias(bin, bias), pw2); }, bias_inputs) <= 1e-4);

    std::vector<int> labels{0, 2, 1, 2};
    CHECK(grad_check([&](const Tensor& l) { return softmax_cross_entropy(l, labels); }, random_tensor({4, 3 + s}, 99 + s, -3, 3)) <= 1e-4);
  }
}

TEST_CASE("grad_check") {
  SUBCASE("exact for linear maps") {
    Tensor x = random_tensor({3, 4}, 101);
    Tensor w = probe_weights(x, 100);
    CHECK(grad_check([&](const Tensor& in) { return weighted_sum(in, w); }, x) <= 1e-9);
  }
  SUBCASE("conv -> relu -> fc -> softmax loss chain") {
    Tensor x = random_parameter({2, 2, 5, 5}, 110);
    Tensor k = random_parameter({3, 2, 3, 3}, 111);
    // Small FC weights keep the softmax away from saturation, where gradient
    // entries shrink below the finite-difference noise floor.
    Tensor w = random_parameter({4, 27}, 112, -0.3, 0.3);
    Tensor b = random_parameter({4}, 113);
    std::vector<int> labels{1, 3};
    Tensor inputs[] = {x, k, w, b};
    double err = grad_check(
        [&] {
          Tensor h = relu(conv2d(x, k, 1, 0));
          return softmax_cross_entropy(fully_connected(reshape(h, {2, 27}), w, b), labels);
        },
        inputs);
    CHECK(err <= 1e-4);
  }
  SUBCASE("detects a corrupted backward rule") {
    auto bad_square = [](const Tensor& x) {
      Tensor out = Tensor::zeros(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) out.mutable_data()[i] = x[i] * x[i];
      if (detail::should_record({&x})) {
        detail::record("bad_square", out, [x, out]() mutable {
          for (std::size_t i = 0; i < x.numel(); ++i) x.mutable_grad()[i] += out.grad()[i] * x[i];  // missing factor 2
        });
      }
      return out;
    };
    CHECK(grad_check([&](const Tensor& x) { return sum(bad_square(x)); }, random_tensor({5}, 120, 0.5, 1.0)) > 1e-2);
  }
  SUBCASE("non-finite intermediate raises") {
    auto blow_up = [](const Tensor& x) { return sum(scale(x, 1e308)); };
    CHECK_THROWS_AS(grad_check(blow_up, Tensor::full({2}, 10.0)), NonFiniteError);
  }
}

TEST_CASE("tape semantics") {
  SUBCASE("ops outside a tape do not record") {
    Tensor p = Tensor::parameter({2}, {1, 2});
    Tensor y = scale(p, 2.0);
    CHECK_FALSE(y.requires_grad());
  }
  SUBCASE("every recorded op is replayed once and off-path gradients stay zero") {
    Tensor a = Tensor::parameter({2}, {1, 2});
    Tensor b = Tensor::parameter({2}, {3, 4});
    Tape tape;
    Tensor side = mul(b, b);
    Tensor loss = sum(scale(a, 3.0));
    CHECK(tape.size() == 3);
    tape.backward(loss);
    for (double g : side.grad()) CHECK(g == 0.0);
    for (double g : b.grad()) CHECK(g == 0.0);
    for (double g : a.grad()) CHECK(g == 3.0);
  }
  SUBCASE("backward is linear in the loss") {
    Tensor x = random_parameter({3, 4}, 130);
    auto f = [&] { return sum(mul(sigmoid(x), x)); };
    auto g = [&] { return mean(l2_normalize(x, 1e-12)); };
    auto grad_of = [&](auto fn) {
      x.zero_grad();
      Tape tape;
      tape.backward(fn());
      return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    auto gf = grad_of(f), gg = grad_of(g);
    auto gc = grad_of([&] { return add(scale(f(), 2.0), scale(g(), -0.5)); });
    for (std::size_t i = 0; i < gc.size(); ++i) CHECK(gc[i] == doctest::Approx(2.0 * gf[i] - 0.5 * gg[i]).epsilon(1e-12));
  }
  SUBCASE("forward and backward are bit-identical across runs") {
    auto run = [] {
      Tensor x = random_parameter({2, 3, 6, 6}, 140);
      Tensor k = random_parameter({4, 3, 3, 3}, 141);
      Tape tape;
      Tensor loss = mean(relu(conv2d(x, k, 1, 1)));
      tape.backward(loss);
      std::vector<double> out{loss.item()};
      out.insert(out.end(), k.grad().begin(), k.grad().end());
      out.insert(out.end(), x.grad().begin(), x.grad().end());
      return out;
    };
    CHECK(run() == run());
  }
}

TEST_CASE("tensor blob format") {
  Tensor t = random_tensor({2, 3, 4}, 150);
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 4 + 4 + 3 * 8 + 24 * 8);
  CHECK(bytes.substr(0, 4) == "SGMT");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  CHECK(static_cast<unsigned char>(bytes[8]) == 3);
  Tensor back = read_tensor(ss);
  CHECK(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(read_tensor(truncated), FormatError);
  std::string wrong_version = bytes;
  wrong_version[4] = 7;
  std::stringstream wv(wrong_version);
  CHECK_THROWS_AS(read_tensor(wv), FormatError);
}
