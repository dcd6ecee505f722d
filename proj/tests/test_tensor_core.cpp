#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "plc/adam.hpp"
#include "plc/checkpoint.hpp"
#include "plc/error.hpp"
#include "plc/kernels.hpp"
#include "plc/ops.hpp"
#include "support/gradcheck.hpp"

using namespace plc;
using plc::testing::gradcheck;
using plc::testing::random_tensor;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  const Tensor t = random_tensor({n}, seed);
  return {t.data().begin(), t.data().end()};
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("elementwise ops on small tensors") {
  CHECK(ops::sigmoid(Tensor({1}, 0.0))[0] == 0.5);
  CHECK(ops::sum(Tensor({2, 2}, 1.0)).item() == 4.0);
  const Tensor x = random_tensor({1, 1, 4, 4}, 3);
  const Tensor id({1, 1, 1, 1}, 1.0);
  const Tensor y = ops::conv2d(x, id, Tensor(), 0);
  CHECK(max_abs_diff(x.data(), y.data()) == 0.0);
}

TEST_CASE("shape mismatch names the op") {
  try {
    ops::add(Tensor({2}), Tensor({3}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("add") != std::string::npos);
  }
}

TEST_CASE("gradient of sum of squares") {
  Tensor w({1}, 3.0);
  w.set_requires_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::hadamard(w, w)));
  }
  CHECK(w.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("dead relu passes no gradient") {
  Tensor w({3}, std::vector<double>{-1.0, -2.0, -0.5});
  w.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  tape.backward(ops::sum(ops::relu(w)));
  for (double g : w.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward replays in reverse recording order") {
  Tensor a({2}, 1.0);
  a.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  const Tensor b = ops::mul(a, 2.0);
  const Tensor c = ops::sigmoid(b);
  const Tensor l = ops::sum(c);
  std::vector<std::size_t> order;
  tape.backward(l, [&](std::size_t i) { order.push_back(i); });
  REQUIRE(order.size() == 3);
  CHECK(order[0] > order[1]);
  CHECK(order[1] > order[2]);
}

TEST_CASE("leaf gradients accumulate, backward is linear in the seed") {
  Tensor w = random_tensor({5}, 11, -1, 1, true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor l1 = ops::sum(ops::sigmoid(w));
  tape.backward(l1);
  const std::vector<double> g1(w.grad().begin(), w.grad().end());
  const Tensor l3 = ops::mul(ops::sum(ops::sigmoid(w)), 3.0);
  w.zero_grad();
  tape.backward(l3);
  for (std::size_t i = 0; i < 5; ++i) CHECK(w.grad()[i] == doctest::Approx(3.0 * g1[i]));
}

TEST_CASE("three-layer network passes the finite-difference check") {
  const Tensor x = random_tensor({2, 2, 6, 6}, 1);
  std::vector<NamedTensor> params;
  std::size_t in = 2;
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t out = l == 2 ? 1 : 3;
    params.push_back({"w" + std::to_string(l), random_tensor({out, in, 3, 3}, 10 + l, -0.5, 0.5, true)});
    params.push_back({"b" + std::to_string(l), random_tensor({out}, 20 + l, -0.1, 0.1, true)});
    in = out;
  }
  auto loss = [&] {
    Tensor h = x;
    for (std::size_t l = 0; l < 3; ++l) {
      h = ops::conv2d(h, params[2 * l].tensor, params[2 * l + 1].tensor, 1);
      h = l == 2 ? ops::sigmoid(h) : ops::relu(h);
    }
    return ops::sum(h);
  };
  plc::testing::GradCheckOptions opt;
  opt.coords_per_tensor = 6;
  opt.kink_margin = 1e-6;
  const auto r = gradcheck(loss, params, opt);
  REQUIRE_FALSE(r.near_kink);
  CHECK_MESSAGE(r.max_rel_error <= 1e-4, r.worst);
}

TEST_CASE("op gradients: norm, blur, logit, log, pac") {
  Tensor x = random_tensor({2, 2, 4, 4}, 5, -1, 1, true);
  Tensor scale = random_tensor({2}, 6, 0.5, 1.5, true);
  Tensor shift = random_tensor({2}, 7, -0.5, 0.5, true);
  Tensor wts = random_tensor({2, 2, 3, 3}, 8, -1, 1, true);
  Tensor feat = random_tensor({2, 3, 4, 4}, 9, -1, 1, true);
  auto loss = [&] {
    auto stats = ops::NormStats::fresh(2);
    Tensor h = ops::affine_norm(x, scale, shift, stats, true);
    h = ops::blur_downsample(h, 3);
    Tensor p = ops::sigmoid(h);
    Tensor m = ops::pac_message(ops::sigmoid(ops::blur_downsample(x, 5)), ops::blur_downsample(feat, 2), wts, 1.0);
    Tensor q = ops::sigmoid(ops::sub(ops::logit(p, 1e-7), m));
    return ops::add(ops::sum(ops::log_clamped(q, 1e-12)),
                    ops::sum(ops::neg_log1mexp(ops::affine(p, 0.5, -1.0), -1e-12)));
  };
  const auto r = gradcheck(loss, {{"x", x}, {"scale", scale}, {"shift", shift}, {"w", wts}, {"f", feat}});
  REQUIRE_FALSE(r.near_kink);
  CHECK_MESSAGE(r.max_rel_error <= 1e-4, r.worst);
}

TEST_CASE("non-finite op results raise NumericError") {
  CHECK_THROWS_AS(ops::log_clamped(Tensor({1}, -1.0), 0.0), NumericError);
}

TEST_CASE("adam: zero gradient and zero decay leave the parameter alone") {
  Tensor w({3}, std::vector<double>{1.0, -2.0, 0.5});
  w.set_requires_grad();
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  Adam opt({{"w", w}}, cfg);
  opt.step();
  CHECK(w[0] == 1.0);
  CHECK(w[1] == -2.0);
  CHECK(w[2] == 0.5);
}

TEST_CASE("adam: single step matches the hand computation") {
  Tensor w({1}, 2.0);
  w.set_requires_grad();
  w.mutable_grad()[0] = 0.5;
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.01;
  Adam opt({{"w", w}}, cfg);
  opt.step();
  // m_hat = g, v_hat = g^2 after bias correction.
  const double expected = 2.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 2.0);
  CHECK(w[0] == doctest::Approx(expected).epsilon(1e-14));
  opt.end_epoch();
  CHECK(opt.learning_rate() == doctest::Approx(0.095));
}

TEST_CASE("checkpoint round trip is byte exact") {
  std::vector<NamedTensor> ts{{"a", random_tensor({2, 3}, 1)},
                              {"b.c", Tensor::scalar(-0.0)},
                              {"d", Tensor({1, 1, 2, 2}, std::vector<double>{1e-300, -1e300, 0.1, 3.0})}};
  const auto bytes = encode_checkpoint(ts);
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == 3);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back[1].name == "b.c");
  CHECK(back[2].tensor.shape() == Shape{1, 1, 2, 2});

  const auto path = std::filesystem::temp_directory_path() / "plc_test_ckpt.plck";
  save_checkpoint(path, ts);
  CHECK(encode_checkpoint(load_checkpoint(path)) == bytes);
  std::filesystem::remove(path);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS(decode_checkpoint(truncated));
}

TEST_CASE("restore_tensors rejects missing names and shape changes") {
  std::vector<NamedTensor> src{{"a", Tensor({2}, 1.0)}};
  std::vector<NamedTensor> dst{{"a", Tensor({2}, 0.0)}};
  restore_tensors(src, dst);
  CHECK(dst[0].tensor[1] == 1.0);
  std::vector<NamedTensor> wrong{{"a", Tensor({3}, 0.0)}};
  CHECK_THROWS(restore_tensors(src, wrong));
  std::vector<NamedTensor> missing{{"b", Tensor({2}, 0.0)}};
  CHECK_THROWS(restore_tensors(src, missing));
}

TEST_CASE("serial and OpenMP kernels agree") {
  using namespace kernels;
  SUBCASE("conv") {
    const ConvDims d{3, 4, 9, 7, 5, 3, 1};
    const auto x = noise(d.batch * d.in_channels * d.height * d.width, 1);
    const auto w = noise(d.out_channels * d.in_channels * 9, 2);
    const auto b = noise(d.out_channels, 3);
    const auto g = noise(d.batch * d.out_channels * d.out_height() * d.out_width(), 4);
    std::vector<double> y1(g.size()), y2(g.size());
    serial::conv2d_forward(d, x, w, b, y1);
    omp::conv2d_forward(d, x, w, b, y2);
    CHECK(max_abs_diff(y1, y2) < 1e-12);
    std::vector<double> dx1(x.size()), dx2(x.size()), dw1(w.size()), dw2(w.size()), db1(b.size()), db2(b.size());
    serial::conv2d_backward(d, x, w, g, dx1, dw1, db1);
    omp::conv2d_backward(d, x, w, g, dx2, dw2, db2);
    CHECK(max_abs_diff(dx1, dx2) < 1e-12);
    CHECK(max_abs_diff(dw1, dw2) < 1e-12);
    CHECK(max_abs_diff(db1, db2) < 1e-12);
  }
  SUBCASE("blur") {
    for (std::size_t taps : {1, 2, 3, 5}) {
      const BlurDims d{3, 8, 6, taps};
      const auto x = noise(3 * 48, taps);
      std::vector<double> y1(36), y2(36);
      serial::blur_downsample_forward(d, x, y1);
      omp::blur_downsample_forward(d, x, y2);
      CHECK(max_abs_diff(y1, y2) < 1e-14);
      std::vector<double> dx1(x.size()), dx2(x.size());
      serial::blur_downsample_backward(d, y1, dx1);
      omp::blur_downsample_backward(d, y1, dx2);
      CHECK(max_abs_diff(dx1, dx2) < 1e-14);
    }
  }
  SUBCASE("pac") {
    const PacDims d{2, 3, 4, 5, 3, 0.7};
    const auto z = noise(2 * 3 * 25, 5);
    const auto f = noise(2 * 4 * 25, 6);
    const auto w = noise(3 * 3 * 9, 7);
    const auto g = noise(z.size(), 8);
    std::vector<double> m1(z.size()), m2(z.size());
    serial::pac_message_forward(d, z, f, w, m1);
    omp::pac_message_forward(d, z, f, w, m2);
    CHECK(max_abs_diff(m1, m2) < 1e-13);
    std::vector<double> dz1(z.size()), dz2(z.size()), df1(f.size()), df2(f.size()), dw1(w.size()), dw2(w.size());
    serial::pac_message_backward(d, z, f, w, g, dz1, df1, dw1);
    omp::pac_message_backward(d, z, f, w, g, dz2, df2, dw2);
    CHECK(max_abs_diff(dz1, dz2) < 1e-12);
    CHECK(max_abs_diff(df1, df2) < 1e-12);
    CHECK(max_abs_diff(dw1, dw2) < 1e-12);
  }
}
