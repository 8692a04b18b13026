#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "zxyseg/losses.hpp"

using namespace zxyseg;
using gradcheck::random_tensor;
namespace ad = zxyseg::ad;

namespace {

Tensor<double> random_probs(Shape shape, Xoshiro256& rng) {
  Tensor<double> t = Tensor<double>::zeros(shape);
  const std::int64_t c = shape[0];
  const std::int64_t p = t.size() / c;
  for (std::int64_t i = 0; i < p; ++i) {
    double sum = 0;
    for (std::int64_t cl = 0; cl < c; ++cl) {
      const double v = rng.uniform(0.05, 1.0);
      t.data[cl * p + i] = v;
      sum += v;
    }
    for (std::int64_t cl = 0; cl < c; ++cl) t.data[cl * p + i] /= sum;
  }
  return t;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("uniform logits give ln 3") {
  const Tensor<double> logits = Tensor<double>::full({3, 2, 2, 2}, 0.7);
  const std::vector<std::uint8_t> labels(8, 1);
  CHECK(cross_entropy_loss(logits, labels) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("confident correct prediction drives CE to zero") {
  Tensor<double> logits = Tensor<double>::zeros({3, 1, 1, 2});
  logits.data[0 * 2 + 0] = 60.0;  // class 0 at voxel 0
  logits.data[1 * 2 + 1] = 60.0;  // class 1 at voxel 1
  const std::vector<std::uint8_t> labels = {0, 1};
  CHECK(cross_entropy_loss(logits, labels) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("two-voxel CE matches the hand computation") {
  // logits per voxel: [1,0,0] and [0,2,0]; labels 0 and 1
  Tensor<double> logits = Tensor<double>::zeros({3, 2});
  logits.data[0 * 2 + 0] = 1.0;
  logits.data[1 * 2 + 1] = 2.0;
  const std::vector<std::uint8_t> labels = {0, 1};
  const double p0 = std::exp(1.0) / (std::exp(1.0) + 2.0);
  const double p1 = std::exp(2.0) / (std::exp(2.0) + 2.0);
  const double want = 0.5 * (-std::log(p0) - std::log(p1));
  CHECK(cross_entropy_loss(logits, labels) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("perfect one-hot probabilities give near-zero dice loss") {
  Xoshiro256 rng(1);
  const std::vector<std::uint8_t> labels = {0, 1, 2, 1, 0, 2, 1, 1};
  Tensor<double> p = Tensor<double>::zeros({3, 8});
  for (int i = 0; i < 8; ++i) p.data[labels[static_cast<size_t>(i)] * 8 + i] = 1.0;
  CHECK(dice_loss(p, labels) <= 1e-4);
}

TEST_CASE("half-coverage closed form: per-class dice 0.5") {
  // p = [0.5, 0.5, 0] at every voxel; class 1 covers half the voxels
  const int n = 8;
  Tensor<double> p = Tensor<double>::zeros({3, n});
  for (int i = 0; i < n; ++i) {
    p.data[0 * n + i] = 0.5;
    p.data[1 * n + i] = 0.5;
  }
  std::vector<std::uint8_t> labels(n, 0);
  for (int i = 0; i < n / 2; ++i) labels[static_cast<size_t>(i)] = 1;
  std::vector<double> per_class;
  const double loss = dice_loss(p, labels, &per_class);
  REQUIRE(per_class.size() == 3);
  CHECK(per_class[0] == doctest::Approx(0.5).epsilon(1e-5));
  CHECK(per_class[1] == doctest::Approx(0.5).epsilon(1e-5));
  CHECK(per_class[2] == doctest::Approx(1.0).epsilon(1e-5));  // absent class: eps/eps
  CHECK(loss == doctest::Approx(1.0 - (0.5 + 0.5 + 1.0) / 3.0).epsilon(1e-5));
}

TEST_CASE("disjoint one-hot prediction scores near-zero dice for that class") {
  const int n = 6;
  Tensor<double> p = Tensor<double>::zeros({3, n});
  for (int i = 0; i < n; ++i) p.data[2 * n + i] = 1.0;  // predict canal everywhere
  const std::vector<std::uint8_t> labels(n, 1);          // truth is tooth everywhere
  std::vector<double> per_class;
  dice_loss(p, labels, &per_class);
  CHECK(per_class[1] < 1e-5);
  CHECK(per_class[2] < 1e-5);
}

TEST_CASE("uncertainty at agreement is exactly one") {
  Xoshiro256 rng(2);
  const Tensor<double> p = random_probs({3, 4, 4, 4}, rng);
  CHECK(uncertainty_loss(p, p) == 1.0);  // bitwise
}

TEST_CASE("uncertainty single-entry closed forms") {
  Tensor<double> pm = Tensor<double>::full({1, 1}, 0.25);
  Tensor<double> pa = Tensor<double>::full({1, 1}, 0.5);
  CHECK(uncertainty_loss(pm, pa) ==
        doctest::Approx(std::pow(2.0, -0.5)).epsilon(1e-12));

  // clamp keeps the value finite
  pm.data[0] = 1e-9;
  const double v = uncertainty_loss(pm, pa);
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(std::exp(0.5 * std::log(2e-7))).epsilon(1e-9));
}

TEST_CASE("total loss composes the three closed forms") {
  // perfect one-hot main and aux: ce ~ 0, dice ~ 0, un = 1
  const std::vector<std::uint8_t> labels = {0, 1, 2, 2};
  Tensor<double> logits = Tensor<double>::zeros({3, 4});
  for (int i = 0; i < 4; ++i) logits.data[labels[static_cast<size_t>(i)] * 4 + i] = 60.0;
  const auto perfect = total_loss(logits, logits, labels);
  CHECK(perfect.ce == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(perfect.dice == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(perfect.un == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(perfect.total == doctest::Approx(1.0).epsilon(1e-9));

  // all-zero logits, single-class labels: uniform probabilities
  const int n = 8;
  const Tensor<double> zeros = Tensor<double>::zeros({3, n});
  const std::vector<std::uint8_t> ones(n, 0);
  const auto uniform = total_loss(zeros, zeros, ones);
  CHECK(uniform.ce == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(uniform.un == doctest::Approx(1.0).epsilon(1e-12));
  const double eps = 1e-5;
  const double nn = n;
  const double d0 = (2.0 * nn / 3.0 + eps) / (nn / 3.0 + nn + eps);
  const double d12 = eps / (nn / 3.0 + eps);
  const double want_dice = 1.0 - (d0 + 2.0 * d12) / 3.0;
  CHECK(uniform.dice == doctest::Approx(want_dice).epsilon(1e-9));

  CHECK(uniform.total == uniform.ce + uniform.dice + uniform.un);  // exact sum
  CHECK(perfect.total == perfect.ce + perfect.dice + perfect.un);
}

TEST_CASE("loss gradients through softmax pass finite differences") {
  Xoshiro256 rng(3);
  const auto main_logits = random_tensor({3, 2}, rng, -1.5, 1.5);
  const auto aux_logits = random_tensor({3, 2}, rng, -1.5, 1.5);
  const auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0, 2});

  SUBCASE("cross entropy") {
    const auto rep = gradcheck::check({main_logits}, [&](ad::Tape<double>& t,
                                                         const std::vector<ad::Var>& v) {
      ad::Var probs = ad::clamp(t, ad::softmax_ch(t, v[0]), kProbFloor, 1.0);
      return ad::nll_mean(t, probs, labels);
    });
    CHECK(rep.max_rel_err < 1e-4);
  }
  SUBCASE("dice") {
    const auto rep = gradcheck::check({main_logits}, [&](ad::Tape<double>& t,
                                                         const std::vector<ad::Var>& v) {
      return ad::dice_loss_mean(t, ad::softmax_ch(t, v[0]), labels, 1e-5);
    });
    CHECK(rep.max_rel_err < 1e-4);
  }
  SUBCASE("uncertainty") {
    const auto rep = gradcheck::check(
        {main_logits, aux_logits}, [&](ad::Tape<double>& t, const std::vector<ad::Var>& v) {
          ad::Var pm = ad::clamp(t, ad::softmax_ch(t, v[0]), kProbFloor, 1.0);
          ad::Var pa = ad::clamp(t, ad::softmax_ch(t, v[1]), kProbFloor, 1.0);
          return ad::uncertainty_mean(t, pm, pa);
        });
    CHECK(rep.max_rel_err < 1e-4);
  }
  SUBCASE("total") {
    const auto rep = gradcheck::check(
        {main_logits, aux_logits}, [&](ad::Tape<double>& t, const std::vector<ad::Var>& v) {
          const std::vector<std::uint8_t> y = {0, 2};
          return total_loss_on_tape<double>(t, v[0], v[1], y, true);
        });
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("dice loss is equivariant under voxel permutation") {
  Xoshiro256 rng(4);
  const int n = 12;
  const Tensor<double> p = random_probs({3, n}, rng);
  std::vector<std::uint8_t> labels(n);
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(3));
  const double base = dice_loss(p, labels);

  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i)
    std::swap(perm[static_cast<size_t>(i)],
              perm[static_cast<size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
  Tensor<double> pp = Tensor<double>::zeros({3, n});
  std::vector<std::uint8_t> pl(n);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) pp.data[c * n + perm[static_cast<size_t>(i)]] = p.data[c * n + i];
    pl[static_cast<size_t>(perm[static_cast<size_t>(i)])] = labels[static_cast<size_t>(i)];
  }
  CHECK(dice_loss(pp, pl) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("losses remain finite on clamped extremes") {
  Tensor<double> pm = Tensor<double>::zeros({3, 2});
  Tensor<double> pa = Tensor<double>::zeros({3, 2});
  for (std::int64_t i = 0; i < 6; ++i) {
    pm.data[i] = i % 2 ? 1e-12 : 1.0;
    pa.data[i] = i % 2 ? 1.0 : 1e-12;
  }
  const double v = uncertainty_loss(pm, pa);
  CHECK(std::isfinite(v));
}

}  // TEST_SUITE
