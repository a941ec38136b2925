#include <doctest.h>

#include <cmath>

#include "cguard/mdn.hpp"
#include "cguard/rng.hpp"

using namespace cguard;

namespace {

MetadataMatrix raw_meta(Tensor values, std::vector<ColumnRole> roles) {
  MetadataMatrix m;
  m.col_mean.assign(values.dim(1), 0.0);
  m.col_std.assign(values.dim(1), 1.0);
  m.column_roles = std::move(roles);
  m.values = std::move(values);
  return m;
}

// intercept + z-ish confounder + 0/1 label
MetadataMatrix random_train_meta(std::size_t n, Rng& rng) {
  Tensor v({n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    v(i, 0) = 1.0;
    v(i, 1) = rng.next_uniform(-1.5, 1.5);
    v(i, 2) = static_cast<double>(rng.next_below(2));
  }
  return raw_meta(std::move(v),
                  {ColumnRole::Intercept, ColumnRole::Confounder, ColumnRole::LabelAug});
}

MdnState make_state(const MetadataMatrix& m, std::size_t channels, double ridge = 0.0) {
  MdnState state;
  state.gram_inv = std::make_shared<GramInverse>(invert_gram(m, ridge));
  state.running_beta = Tensor({channels, m.cols()});
  return state;
}

}  // namespace

TEST_CASE("metadata-explained features give zero residual at b = N") {
  Rng rng(61);
  const std::size_t n = 32;
  const MetadataMatrix m = random_train_meta(n, rng);
  Tensor beta0({2, 3});
  for (double& v : beta0.values()) v = rng.next_uniform(-2.0, 2.0);

  Tensor f({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 3; ++k) acc += m.values(i, k) * beta0(c, k);
      f(i, c) = acc;
    }
  }
  MdnState state = make_state(m, 2);
  const Tensor r = mdn_forward_train(f, m.values, state, n);
  for (double v : r.values()) CHECK(std::abs(v) <= 1e-6);
  CHECK(state.seen_batches == 1);
}

TEST_CASE("metadata-orthogonal features pass through at b = N") {
  // Build f orthogonal to every metadata column, then r must equal f.
  Rng rng(67);
  const std::size_t n = 24;
  const MetadataMatrix m = random_train_meta(n, rng);
  Tensor f({n, 1});
  for (std::size_t i = 0; i < n; ++i) f(i, 0) = rng.next_uniform(-1.0, 1.0);
  // Project out the metadata span using the closed form.
  MdnState tmp = make_state(m, 1);
  Tensor fcol({n});
  for (std::size_t i = 0; i < n; ++i) fcol[i] = f(i, 0);
  const Tensor beta = solve_beta_full(m, fcol, *tmp.gram_inv);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < 3; ++k) f(i, 0) -= m.values(i, k) * beta[k];
  }

  MdnState state = make_state(m, 1);
  const Tensor r = mdn_forward_train(f, m.values, state, n);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(r(i, 0) == doctest::Approx(f(i, 0)).epsilon(1e-6));
  }
}

TEST_CASE("batch beta dispersion shrinks like one over sqrt b") {
  Rng rng(71);
  const std::size_t n = 2000;
  const MetadataMatrix m = random_train_meta(n, rng);
  Tensor f({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    f(i, 0) = 0.8 * m.values(i, 1) + 0.3 * m.values(i, 2) + rng.next_uniform(-1.0, 1.0);
  }
  const GramInverse gi = invert_gram(m, 0.0);

  auto dispersion = [&](std::size_t b) {
    const std::size_t trials = 500;
    double sum = 0.0, sum_sq = 0.0;
    Tensor mb({b, 3}), fb({b});
    for (std::size_t t = 0; t < trials; ++t) {
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t row = static_cast<std::size_t>(rng.next_below(n));
        for (std::size_t k = 0; k < 3; ++k) mb(i, k) = m.values(row, k);
        fb[i] = f(row, 0);
      }
      const Tensor est = batch_beta_estimate(gi, mb, fb, n);
      sum += est[1];
      sum_sq += est[1] * est[1];
    }
    const double mean = sum / trials;
    return std::sqrt(sum_sq / trials - mean * mean);
  };

  const double d20 = dispersion(20);
  const double d320 = dispersion(320);
  // 16x batch size should shrink the spread by about 4; allow slack.
  CHECK(d320 < d20 / 2.5);
  CHECK(d20 < d320 * 6.5);
}

TEST_CASE("eval drops the label column by role") {
  Rng rng(73);
  const std::size_t n = 16;
  const MetadataMatrix m = random_train_meta(n, rng);
  MdnState state = make_state(m, 1);
  Tensor f({n, 1});
  for (std::size_t i = 0; i < n; ++i) f(i, 0) = rng.next_uniform(-2.0, 2.0);
  mdn_forward_train(f, m.values, state, n);

  // K = intercept+confounder+label: eval residual must ignore the label
  // coefficient entirely.
  const MetadataMatrix dropped = m.without_label_column();
  const Tensor r_dropped = mdn_forward_eval(f, dropped.values, dropped.column_roles, state);

  // Same rows with the label column zeroed but still tagged LabelAug.
  MetadataMatrix zeroed = m;
  for (std::size_t i = 0; i < n; ++i) zeroed.values(i, 2) = 0.0;
  const Tensor r_zeroed = mdn_forward_eval(f, zeroed.values, zeroed.column_roles, state);
  for (std::size_t i = 0; i < n; ++i) CHECK(r_dropped(i, 0) == r_zeroed(i, 0));

  // Perturbing the tagged label column changes nothing, bit for bit.
  MetadataMatrix perturbed = m;
  for (std::size_t i = 0; i < n; ++i) perturbed.values(i, 2) += rng.next_uniform(-5.0, 5.0);
  const Tensor r_perturbed = mdn_forward_eval(f, perturbed.values, perturbed.column_roles, state);
  for (std::size_t i = 0; i < n; ++i) CHECK(r_perturbed(i, 0) == r_dropped(i, 0));
}

TEST_CASE("zero running beta passes features through at eval") {
  Rng rng(79);
  const MetadataMatrix m = random_train_meta(8, rng);
  MdnState state = make_state(m, 2);
  state.seen_batches = 1;  // pretend trained, running β still zero
  Tensor f({8, 2});
  for (double& v : f.values()) v = rng.next_uniform(-1.0, 1.0);
  const Tensor r = mdn_forward_eval(f, m.values, m.column_roles, state);
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(r[i] == f[i]);
}

TEST_CASE("eval before training reports NeverTrained") {
  Rng rng(83);
  const MetadataMatrix m = random_train_meta(8, rng);
  const MdnState state = make_state(m, 1);
  Tensor f({8, 1});
  CHECK_THROWS_AS(mdn_forward_eval(f, m.values, m.column_roles, state), Error);
  try {
    mdn_forward_eval(f, m.values, m.column_roles, state);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NeverTrained);
  }
}

TEST_CASE("pmdn residual basics") {
  Rng rng(89);
  const std::size_t n = 12;
  const MetadataMatrix m = random_train_meta(n, rng);
  Tensor f({n, 2});
  for (double& v : f.values()) v = rng.next_uniform(-1.0, 1.0);

  PmdnParams zero{Tensor({2, 3})};
  const Tensor r0 = pmdn_forward(f, m.values, m.column_roles, zero, Mode::Train);
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(r0[i] == f[i]);

  PmdnParams beta{Tensor({2, 3})};
  for (double& v : beta.beta.values()) v = rng.next_uniform(-1.0, 1.0);
  Tensor fitted({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 3; ++k) acc += m.values(i, k) * beta.beta(c, k);
      fitted(i, c) = acc;
    }
  }
  const Tensor rf = pmdn_forward(fitted, m.values, m.column_roles, beta, Mode::Train);
  for (double v : rf.values()) CHECK(std::abs(v) <= 1e-12);

  // Shape preserved.
  CHECK(rf.shape() == fitted.shape());
}

TEST_CASE("pmdn eval ignores the label column bit-for-bit") {
  Rng rng(97);
  const std::size_t n = 10;
  const MetadataMatrix m = random_train_meta(n, rng);
  PmdnParams params{Tensor({1, 3})};
  for (double& v : params.beta.values()) v = rng.next_uniform(-1.0, 1.0);
  Tensor f({n, 1});
  for (double& v : f.values()) v = rng.next_uniform(-1.0, 1.0);

  const Tensor r1 = pmdn_forward(f, m.values, m.column_roles, params, Mode::Eval);
  MetadataMatrix perturbed = m;
  for (std::size_t i = 0; i < n; ++i) perturbed.values(i, 2) = rng.next_uniform(-9.0, 9.0);
  const Tensor r2 = pmdn_forward(f, perturbed.values, perturbed.column_roles, params, Mode::Eval);
  for (std::size_t i = 0; i < n; ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("pmdn loss is stationary at the least-squares solution") {
  Rng rng(101);
  const std::size_t n = 40;
  const MetadataMatrix m = random_train_meta(n, rng);
  Tensor f({n, 1});
  for (double& v : f.values()) v = rng.next_uniform(-2.0, 2.0);
  Tensor fcol({n});
  for (std::size_t i = 0; i < n; ++i) fcol[i] = f(i, 0);
  const Tensor beta_ls = solve_beta_full(m, fcol, invert_gram(m, 0.0));

  PmdnParams params{Tensor({1, 3})};
  for (std::size_t k = 0; k < 3; ++k) params.beta(0, k) = beta_ls[k];
  auto [loss, grad] = pmdn_loss(f, m.values, params);
  (void)loss;
  for (double g : grad.values()) CHECK(std::abs(g) <= 1e-6);
}

TEST_CASE("pmdn loss of zeros is zero") {
  Rng rng(103);
  const MetadataMatrix m = random_train_meta(6, rng);
  PmdnParams params{Tensor({2, 3})};
  auto [loss, grad] = pmdn_loss(Tensor({6, 2}), m.values, params);
  CHECK(loss == 0.0);
  for (double g : grad.values()) CHECK(g == 0.0);
}

TEST_CASE("pmdn beta gradient matches finite differences") {
  Rng rng(107);
  const std::size_t n = 14;
  const MetadataMatrix m = random_train_meta(n, rng);
  Tensor f({n, 1});
  for (double& v : f.values()) v = rng.next_uniform(-1.0, 1.0);
  PmdnParams params{Tensor({1, 3})};
  for (double& v : params.beta.values()) v = rng.next_uniform(-0.5, 0.5);

  auto [loss, grad] = pmdn_loss(f, m.values, params);
  (void)loss;
  const double h = 1e-6;
  for (std::size_t k = 0; k < 3; ++k) {
    PmdnParams pp = params, pm = params;
    pp.beta(0, k) += h;
    pm.beta(0, k) -= h;
    const double fd =
        (pmdn_loss(f, m.values, pp).first - pmdn_loss(f, m.values, pm).first) / (2.0 * h);
    CHECK(grad(0, k) == doctest::Approx(fd).epsilon(1e-6));
  }

  // Multi-channel gradient rows equal single-channel runs.
  Tensor f2({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    f2(i, 0) = f(i, 0);
    f2(i, 1) = rng.next_uniform(-1.0, 1.0);
  }
  PmdnParams two{Tensor({2, 3})};
  for (std::size_t k = 0; k < 3; ++k) {
    two.beta(0, k) = params.beta(0, k);
    two.beta(1, k) = rng.next_uniform(-0.5, 0.5);
  }
  auto [l2, g2] = pmdn_loss(f2, m.values, two);
  (void)l2;
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(g2(0, k) == doctest::Approx(grad(0, k)).epsilon(1e-12));
  }
}

TEST_CASE("gradient descent on beta reaches the closed-form optimum") {
  Rng rng(109);
  const std::size_t n = 30;
  const MetadataMatrix m = random_train_meta(n, rng);
  Tensor f({n, 2});
  for (double& v : f.values()) v = rng.next_uniform(-2.0, 2.0);

  // Stability bound: η below 1 / λmax(2MᵀM/b), λmax bounded by the trace.
  double trace = 0.0;
  for (double v : m.values.values()) trace += v * v;
  const double eta = 0.9 / (2.0 * trace / static_cast<double>(n));

  PmdnParams params{Tensor({2, 3})};
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < 4000; ++it) {
    auto [loss, grad] = pmdn_loss(f, m.values, params);
    CHECK(loss <= prev + 1e-12);
    prev = loss;
    for (std::size_t i = 0; i < params.beta.size(); ++i) {
      params.beta[i] -= eta * grad[i];
    }
  }

  const GramInverse gi = invert_gram(m, 0.0);
  for (std::size_t c = 0; c < 2; ++c) {
    Tensor fcol({n});
    for (std::size_t i = 0; i < n; ++i) fcol[i] = f(i, c);
    const Tensor beta_ls = solve_beta_full(m, fcol, gi);
    double dist = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      dist += (params.beta(c, k) - beta_ls[k]) * (params.beta(c, k) - beta_ls[k]);
    }
    CHECK(std::sqrt(dist) <= 1e-4);
  }
}

TEST_CASE("converged pmdn equals mdn when the batch is the dataset") {
  Rng rng(113);
  const std::size_t n = 26;
  const MetadataMatrix m = random_train_meta(n, rng);
  Tensor f({n, 1});
  for (double& v : f.values()) v = rng.next_uniform(-2.0, 2.0);

  // Converged β = closed form; MDN with b = N computes the same β.
  Tensor fcol({n});
  for (std::size_t i = 0; i < n; ++i) fcol[i] = f(i, 0);
  const Tensor beta_ls = solve_beta_full(m, fcol, invert_gram(m, 0.0));
  PmdnParams params{Tensor({1, 3})};
  for (std::size_t k = 0; k < 3; ++k) params.beta(0, k) = beta_ls[k];
  const Tensor r_pmdn = pmdn_forward(f, m.values, m.column_roles, params, Mode::Train);

  MdnState state = make_state(m, 1);
  const Tensor r_mdn = mdn_forward_train(f, m.values, state, n);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(std::abs(r_pmdn(i, 0) - r_mdn(i, 0)) <= 1e-4);
  }
}

TEST_CASE("running beta follows the momentum update") {
  Rng rng(127);
  const std::size_t n = 10;
  const MetadataMatrix m = random_train_meta(n, rng);
  MdnState state = make_state(m, 1);
  state.momentum = 0.9;
  Tensor f({n, 1});
  for (double& v : f.values()) v = rng.next_uniform(-1.0, 1.0);

  const Tensor beta1 = batch_beta_estimate_channels(*state.gram_inv, m.values, f, n);
  mdn_forward_train(f, m.values, state, n);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(state.running_beta(0, k) == doctest::Approx(0.1 * beta1(0, k)).epsilon(1e-12));
  }
  mdn_forward_train(f, m.values, state, n);
  for (std::size_t k = 0; k < 3; ++k) {
    const double expect = 0.9 * 0.1 * beta1(0, k) + 0.1 * beta1(0, k);
    CHECK(state.running_beta(0, k) == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK(state.seen_batches == 2);
}
