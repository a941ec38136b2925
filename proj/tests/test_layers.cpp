#include <doctest.h>

#include <cmath>

#include "cguard/layers.hpp"
#include "cguard/rng.hpp"

using namespace cguard;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.next_uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("zero input through zero-bias dense stays zero") {
  Network net({LayerSpec::dense(4, 3), LayerSpec::relu(), LayerSpec::dense(3, 1)}, {4}, 0, 1);
  const Tensor out = net.forward(Tensor({2, 4}), nullptr, Mode::Eval, nullptr);
  CHECK(out(0, 0) == 0.0);
  CHECK(out(1, 0) == 0.0);
}

TEST_CASE("dense with unit weights sums the input") {
  Network net({LayerSpec::dense(2, 1)}, {2}, 0, 1);
  auto* dense = dynamic_cast<DenseLayer*>(&net.layer(0));
  REQUIRE(dense != nullptr);
  dense->weight().fill(1.0);
  dense->bias().fill(0.0);
  const Tensor out = net.forward(Tensor::row_major({1, 2}, {3, 4}), nullptr, Mode::Eval, nullptr);
  CHECK(out(0, 0) == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("fixed-seed two-layer net matches a scalar re-implementation") {
  Network net({LayerSpec::dense(3, 2), LayerSpec::relu(), LayerSpec::dense(2, 1)}, {3}, 0, 99);
  const Tensor x = Tensor::row_major({1, 3}, {-0.6, 0.9, 1.4});
  const Tensor out = net.forward(x, nullptr, Mode::Eval, nullptr);

  // Independent scalar-by-scalar forward over the extracted parameters.
  auto* d1 = dynamic_cast<DenseLayer*>(&net.layer(0));
  auto* d2 = dynamic_cast<DenseLayer*>(&net.layer(2));
  double hidden[2];
  for (int o = 0; o < 2; ++o) {
    double acc = d1->bias()[o];
    for (int i = 0; i < 3; ++i) acc += x[i] * d1->weight()(i, o);
    hidden[o] = acc > 0.0 ? acc : 0.0;
  }
  double expected = d2->bias()[0];
  for (int i = 0; i < 2; ++i) expected += hidden[i] * d2->weight()(i, 0);
  CHECK(out(0, 0) == doctest::Approx(expected).epsilon(1e-15));

  // Frozen golden value for the seed-99 parameters (regression pin).
  CHECK(out(0, 0) == doctest::Approx(-1.7895650816125035).epsilon(1e-12));
}

TEST_CASE("dense and conv forwards are linear in the input with zero bias") {
  Rng rng(7);
  Network net({LayerSpec::conv2d(2, 3), LayerSpec::flatten(), LayerSpec::dense(3 * 16, 5)},
              {2, 4, 4}, 0, 3);
  const Tensor x = random_tensor({2, 2, 4, 4}, rng);
  Tensor ax = x;
  for (double& v : ax.values()) v *= 2.5;
  const Tensor y = net.forward(x, nullptr, Mode::Eval, nullptr);
  const Tensor ay = net.forward(ax, nullptr, Mode::Eval, nullptr);
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK(ay[i] == doctest::Approx(2.5 * y[i]).epsilon(1e-12));
  }
}

TEST_CASE("relu forward is idempotent") {
  Rng rng(11);
  ReluLayer relu;
  LayerCache cache;
  const Tensor x = random_tensor({3, 5}, rng);
  const Tensor once = relu.forward(x, nullptr, Mode::Eval, cache);
  const Tensor twice = relu.forward(once, nullptr, Mode::Eval, cache);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(once[i] == twice[i]);
}

TEST_CASE("batchnorm train-mode statistics and eval running stats") {
  Rng rng(13);
  BatchNormLayer bn(4, 0.9);
  LayerCache cache;
  const Tensor x = random_tensor({16, 4}, rng, -3.0, 5.0);
  const Tensor y = bn.forward(x, nullptr, Mode::Train, cache);

  // Default gamma=1, beta=0, so the output stats are the normalized ones.
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (std::size_t s = 0; s < 16; ++s) mean += y(s, c);
    mean /= 16.0;
    double var = 0.0;
    for (std::size_t s = 0; s < 16; ++s) var += (y(s, c) - mean) * (y(s, c) - mean);
    var /= 16.0;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }

  // Eval output depends only on running stats: same input, same answer,
  // and no mutation from eval passes.
  const Tensor e1 = bn.forward(x, nullptr, Mode::Eval, cache);
  const Tensor e2 = bn.forward(x, nullptr, Mode::Eval, cache);
  for (std::size_t i = 0; i < e1.size(); ++i) CHECK(e1[i] == e2[i]);
}

TEST_CASE("batchnorm on conv maps normalizes per channel") {
  Rng rng(17);
  BatchNormLayer bn(3, 0.9);
  LayerCache cache;
  const Tensor x = random_tensor({6, 3, 5, 5}, rng, -2.0, 4.0);
  const Tensor y = bn.forward(x, nullptr, Mode::Train, cache);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t s = 0; s < 6; ++s) {
      for (std::size_t p = 0; p < 25; ++p) mean += y.data()[(s * 3 + c) * 25 + p];
    }
    mean /= 6.0 * 25.0;
    CHECK(std::abs(mean) <= 1e-6);
  }
}

TEST_CASE("layernorm normalizes each sample") {
  Rng rng(19);
  LayerNormLayer ln(6);
  LayerCache cache;
  const Tensor x = random_tensor({5, 6}, rng, -4.0, 9.0);
  const Tensor y = ln.forward(x, nullptr, Mode::Train, cache);
  for (std::size_t s = 0; s < 5; ++s) {
    double mean = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mean += y(s, c);
    mean /= 6.0;
    double var = 0.0;
    for (std::size_t c = 0; c < 6; ++c) var += (y(s, c) - mean) * (y(s, c) - mean);
    var /= 6.0;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("eval-mode forward is pure") {
  Rng rng(23);
  BaselineCnnConfig cfg;
  cfg.image_hw = 8;
  cfg.conv1_filters = 2;
  cfg.conv2_filters = 3;
  cfg.fc_units = 6;
  cfg.norm = NormMode::BatchNorm;
  Network net(baseline_cnn_specs(cfg), {1, 8, 8}, 0, 31);
  const Tensor x = random_tensor({3, 1, 8, 8}, rng);
  const Tensor a = net.forward(x, nullptr, Mode::Eval, nullptr);
  const Tensor b = net.forward(x, nullptr, Mode::Eval, nullptr);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  Rng rng(29);
  Network net({LayerSpec::conv2d(1, 2), LayerSpec::relu(), LayerSpec::flatten(),
               LayerSpec::dense(2 * 9, 1)},
              {1, 3, 3}, 0, 37);
  const Tensor x = random_tensor({2, 1, 3, 3}, rng);
  ForwardTape tape;
  net.forward(x, nullptr, Mode::Train, &tape);
  net.backward(tape, Tensor({2, 1}));
  for (const ParamRef& p : net.weight_params()) {
    for (double v : p.grad->values()) CHECK(v == 0.0);
  }
}

TEST_CASE("backward rejects a tape from another network") {
  Network a({LayerSpec::dense(2, 1)}, {2}, 0, 1);
  Network b({LayerSpec::dense(2, 1)}, {2}, 0, 1);
  ForwardTape tape;
  a.forward(Tensor({1, 2}), nullptr, Mode::Train, &tape);
  CHECK_THROWS_AS(b.backward(tape, Tensor({1, 1})), Error);
  try {
    b.backward(tape, Tensor({1, 1}));
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TapeMismatch);
  }
}

TEST_CASE("backward rejects an eval-mode tape") {
  Network net({LayerSpec::dense(2, 1)}, {2}, 0, 1);
  ForwardTape tape;
  net.forward(Tensor({1, 2}), nullptr, Mode::Eval, &tape);
  CHECK_THROWS_AS(net.backward(tape, Tensor({1, 1})), Error);
}

TEST_CASE("non-finite activations are reported") {
  Network net({LayerSpec::dense(2, 1)}, {2}, 0, 1);
  Tensor x({1, 2});
  x[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(net.forward(x, nullptr, Mode::Eval, nullptr), Error);
}

TEST_CASE("bad layer composition is rejected at construction") {
  CHECK_THROWS_AS(Network({LayerSpec::dense(4, 3), LayerSpec::dense(4, 2)}, {4}, 0, 1), Error);
  CHECK_THROWS_AS(Network({LayerSpec::conv2d(2, 4)}, {1, 8, 8}, 0, 1), Error);
  CHECK_THROWS_AS(Network({LayerSpec::layer_norm(5)}, {4}, 0, 1), Error);
}

TEST_CASE("flatten round-trips shapes through backward") {
  Rng rng(31);
  FlattenLayer flat;
  LayerCache cache;
  const Tensor x = random_tensor({2, 3, 4, 4}, rng);
  const Tensor y = flat.forward(x, nullptr, Mode::Train, cache);
  CHECK(y.shape() == std::vector<std::size_t>{2, 48});
  const Tensor back = flat.backward(y, cache);
  CHECK(back.shape() == x.shape());
}

TEST_CASE("baseline cnn probe index points at the first-FC activations") {
  for (NormMode mode :
       {NormMode::None, NormMode::BatchNorm, NormMode::Mdn, NormMode::Pmdn}) {
    BaselineCnnConfig cfg;
    cfg.image_hw = 8;
    cfg.conv1_filters = 2;
    cfg.conv2_filters = 3;
    cfg.fc_units = 6;
    cfg.norm = mode;
    Network net(baseline_cnn_specs(cfg), {1, 8, 8}, 3, 5);
    const std::size_t probe = baseline_probe_index(cfg);
    REQUIRE(probe < net.layer_count());
    CHECK(net.layer_output_shapes()[probe] == std::vector<std::size_t>{6});
    // The next layer is the ReLU of the FC block.
    CHECK(net.layer(probe + 1).spec().kind == LayerKind::Relu);
  }
}

TEST_CASE("parameter counts follow the specs") {
  BaselineCnnConfig cfg;  // 32x32 full-size baseline
  cfg.norm = NormMode::None;
  Network net(baseline_cnn_specs(cfg), {1, 32, 32}, 0, 1);
  // conv1 16*9+16, conv2 32*16*9+32, fc1 32768*84+84, fc2 84+1
  CHECK(net.param_count() == 144u + 16u + 4608u + 32u + 32768u * 84u + 84u + 84u + 1u);
}
