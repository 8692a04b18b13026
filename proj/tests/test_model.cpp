#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "zxyseg/losses.hpp"
#include "zxyseg/model.hpp"

using namespace zxyseg;
using gradcheck::random_tensor;
namespace ad = zxyseg::ad;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.n_levels = 3;
  cfg.heads = 2;
  cfg.zxy_levels = {1};
  return cfg;
}

template <typename S>
NetworkParameters<S> zero_parameters(const ModelConfig& cfg) {
  NetworkParameters<S> p;
  for (const auto& spec : parameter_schema(cfg)) p.add(spec.name, Tensor<S>::zeros(spec.shape));
  return p;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("init_parameters is deterministic and bounded") {
  ModelConfig cfg;
  cfg.base_channels = 4;
  const auto a = init_parameters<float>(cfg, 99);
  const auto b = init_parameters<float>(cfg, 99);
  REQUIRE(a.order == b.order);
  for (const auto& name : a.order) {
    const auto& ta = a.at(name);
    const auto& tb = b.at(name);
    REQUIRE(ta.shape == tb.shape);
    for (std::int64_t i = 0; i < ta.size(); ++i) {
      REQUIRE(ta.data[i] == tb.data[i]);
      REQUIRE(std::abs(ta.data[i]) <= 0.2f);
    }
  }
  const auto c = init_parameters<float>(cfg, 100);
  bool any_diff = false;
  for (const auto& name : a.order)
    for (std::int64_t i = 0; i < a.at(name).size(); ++i)
      any_diff |= a.at(name).data[i] != c.at(name).data[i];
  CHECK(any_diff);
}

TEST_CASE("init samples have the truncated-normal spread") {
  ModelConfig cfg;  // default is comfortably above 1e5 parameters
  const auto p = init_parameters<double>(cfg, 7);
  REQUIRE(p.total_size() >= 100000);
  double sum = 0, sum2 = 0;
  std::int64_t n = 0;
  for (const auto& name : p.order) {
    const auto& t = p.at(name);
    for (std::int64_t i = 0; i < t.size() && n < 100000; ++i, ++n) {
      sum += t.data[i];
      sum2 += t.data[i] * t.data[i];
    }
    if (n >= 100000) break;
  }
  const double mean = sum / static_cast<double>(n);
  const double sigma = std::sqrt(sum2 / static_cast<double>(n) - mean * mean);
  CHECK(sigma >= 0.07);
  CHECK(sigma <= 0.10);
}

TEST_CASE("parameter shapes depend on the config alone") {
  ModelConfig cfg = tiny_cfg();
  const auto schema = parameter_schema(cfg);
  CHECK(schema.size() > 20);
  // no entry may reference a spatial extent; conv kernels are 3 or 2 wide
  for (const auto& s : schema)
    for (int d : s.shape) CHECK(d <= cfg.channels_at(cfg.n_levels - 1) * 27);
}

TEST_CASE("deformable conv with zeroed offset branch equals plain conv") {
  Xoshiro256 rng(21);
  const int e = 4;
  const auto x = random_tensor({e, 6, 5, 4}, rng);
  const auto wm = random_tensor({e, e, 3, 3, 3}, rng);
  const auto bm = random_tensor({e}, rng);
  ad::Tape<double> tape;
  const ad::Var xv = tape.input(x);
  const ad::Var deform = ad::deformable_conv3d<double>(
      tape, xv, tape.input(Tensor<double>::zeros({81, e, 3, 3, 3})),
      tape.input(Tensor<double>::zeros({81})), tape.input(wm), tape.input(bm));
  const ad::Var plain = ad::conv3d(tape, xv, tape.input(wm), tape.input(bm), 1);
  REQUIRE(tape.val(deform).shape == tape.val(plain).shape);
  double max_diff = 0;
  for (std::int64_t i = 0; i < tape.val(deform).size(); ++i)
    max_diff = std::max(max_diff, std::abs(tape.val(deform).data[i] - tape.val(plain).data[i]));
  CHECK(max_diff < 1e-5);
}

TEST_CASE("deformable conv on a constant field matches plain conv at interior voxels") {
  Xoshiro256 rng(22);
  const int e = 3;
  const Tensor<double> x = Tensor<double>::full({e, 6, 6, 6}, 1.7);
  const auto wm = random_tensor({e, e, 3, 3, 3}, rng);
  const auto bm = random_tensor({e}, rng);
  // bounded offsets keep interior taps inside the volume
  Tensor<double> ow = Tensor<double>::zeros({81, e, 3, 3, 3});
  Tensor<double> ob = Tensor<double>::zeros({81});
  for (std::int64_t i = 0; i < ob.size(); ++i) ob.data[i] = rng.uniform(-0.45, 0.45);
  ad::Tape<double> tape;
  const ad::Var xv = tape.input(x);
  const ad::Var deform =
      ad::deformable_conv3d<double>(tape, xv, tape.input(ow), tape.input(ob), tape.input(wm),
                                    tape.input(bm));
  const ad::Var plain = ad::conv3d(tape, xv, tape.input(wm), tape.input(bm), 1);
  for (int c = 0; c < e; ++c)
    for (int z = 2; z < 4; ++z)
      for (int y = 2; y < 4; ++y)
        for (int xx = 2; xx < 4; ++xx) {
          const std::int64_t at = ((static_cast<std::int64_t>(c) * 6 + z) * 6 + y) * 6 + xx;
          CHECK(tape.val(deform).data[at] ==
                doctest::Approx(tape.val(plain).data[at]).epsilon(1e-9));
        }
}

TEST_CASE("drct attention: constant value stream aggregates to that constant") {
  Xoshiro256 rng(23);
  ModelConfig cfg = tiny_cfg();
  const int l = 1, e = cfg.expanded_at(l);
  auto params = init_parameters<double>(cfg, 3);
  const std::string stem = "zxy1.x";
  // zero the kv deformable conv and give it a constant bias: V becomes the
  // same vector at every token, so each convex attention row reproduces it
  params.at(stem + ".deform_kv.main.w") = Tensor<double>::zeros({e, e, 3, 3, 3});
  Tensor<double> beta = Tensor<double>::zeros({e});
  for (int i = 0; i < e; ++i) beta.data[i] = rng.uniform(-1, 1);
  params.at(stem + ".deform_kv.main.b") = beta;

  ad::Tape<double> tape;
  auto bound = ad::bind_parameters(tape, params, false);
  const ad::Var sh = tape.input(random_tensor({e, 4, 4, 4}, rng));
  const ad::Var dp = tape.input(random_tensor({e, 4, 4, 4}, rng));
  ad::ForwardDiagnostics<double> diag;
  const ad::Var out = ad::drct_attention<double>(tape, sh, dp, bound, stem, cfg.heads,
                                                 cfg.max_tokens, &diag);
  CHECK(diag.attention.min_row_sum == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(diag.attention.max_row_sum == doctest::Approx(1.0).epsilon(1e-5));
  // expected constant: proj_out(proj_v(beta))
  const auto& wv = params.at(stem + ".proj_v.w");
  const auto& bv = params.at(stem + ".proj_v.b");
  const auto& wo = params.at(stem + ".proj_out.w");
  const auto& bo = params.at(stem + ".proj_out.b");
  Eigen::VectorXd vvec = wv.mat(e, e) * beta.data.matrix() + bv.data.matrix();
  Eigen::VectorXd expect = wo.mat(e, e) * vvec + bo.data.matrix();
  const auto om = tape.val(out).mat(e, 64);
  for (int c = 0; c < e; ++c)
    for (int p = 0; p < 64; ++p) CHECK(om(c, p) == doctest::Approx(expect[c]).epsilon(1e-8));
}

TEST_CASE("drct attention token guard fires") {
  ModelConfig cfg = tiny_cfg();
  cfg.max_tokens = 32;
  auto params = init_parameters<double>(cfg, 5);
  ad::Tape<double> tape;
  auto bound = ad::bind_parameters(tape, params, false);
  Xoshiro256 rng(1);
  const int e = cfg.expanded_at(1);
  const ad::Var sh = tape.input(random_tensor({e, 4, 4, 4}, rng));
  const ad::Var dp = tape.input(random_tensor({e, 4, 4, 4}, rng));
  CHECK_THROWS_WITH_AS(ad::drct_attention<double>(tape, sh, dp, bound, "zxy1.x", cfg.heads,
                                                  cfg.max_tokens, nullptr),
                       doctest::Contains("max_tokens"), Error);
}

TEST_CASE("zxyformer block keeps the shallow shape and channel count") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_parameters<double>(cfg, 11);
  ad::Tape<double> tape;
  auto bound = ad::bind_parameters(tape, params, false);
  Xoshiro256 rng(2);
  const int c1 = cfg.channels_at(1), c2 = cfg.channels_at(2);
  const ad::Var sh = tape.input(random_tensor({c1, 4, 4, 4}, rng));
  const ad::Var dp = tape.input(random_tensor({c2, 2, 2, 2}, rng));
  const ad::Var out = ad::zxyformer_block(tape, sh, dp, bound, "zxy1", cfg);
  CHECK(tape.val(out).shape == Shape{c1, 4, 4, 4});
}

TEST_CASE("zxyformer with zeroed attention output and MLP tail is the residual path") {
  ModelConfig cfg = tiny_cfg();
  const int l = 1, e = cfg.expanded_at(l);
  auto params = init_parameters<double>(cfg, 13);
  params.at("zxy1.x.proj_out.w") = Tensor<double>::zeros({e, e});
  params.at("zxy1.x.proj_out.b") = Tensor<double>::zeros({e});
  params.at("zxy1.y.mlp2.w") = Tensor<double>::zeros({e, 2 * e});
  params.at("zxy1.y.mlp2.b") = Tensor<double>::zeros({e});

  ad::Tape<double> tape;
  auto bound = ad::bind_parameters(tape, params, false);
  Xoshiro256 rng(3);
  const int c1 = cfg.channels_at(1), c2 = cfg.channels_at(2);
  const auto sh_t = random_tensor({c1, 4, 4, 4}, rng);
  const ad::Var sh = tape.input(sh_t);
  const ad::Var dp = tape.input(random_tensor({c2, 2, 2, 2}, rng));
  const ad::Var out = ad::zxyformer_block(tape, sh, dp, bound, "zxy1", cfg);

  // reference: restore(LN(expand(shallow)))
  ad::Var s1 = ad::linear_ch(tape, sh, bound.at("zxy1.z.expand_shallow.w"),
                             bound.at("zxy1.z.expand_shallow.b"));
  s1 = ad::layer_norm_ch(tape, s1, bound.at("zxy1.z.ln_shallow.gamma"),
                         bound.at("zxy1.z.ln_shallow.beta"));
  const ad::Var ref = ad::linear_ch(tape, s1, bound.at("zxy1.y.restore.w"),
                                    bound.at("zxy1.y.restore.b"));
  for (std::int64_t i = 0; i < tape.val(out).size(); ++i)
    CHECK(tape.val(out).data[i] == doctest::Approx(tape.val(ref).data[i]).epsilon(1e-12));
}

TEST_CASE("zxyformer block parameter gradients pass finite differences") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_parameters<double>(cfg, 17);
  Xoshiro256 rng(4);
  const int c1 = cfg.channels_at(1), c2 = cfg.channels_at(2);
  const auto sh_t = random_tensor({c1, 4, 4, 4}, rng);
  const auto dp_t = random_tensor({c2, 2, 2, 2}, rng);

  // representative parameters across the Z, X, and Y processes
  const std::vector<std::string> picked = {
      "zxy1.z.deconv.w",          "zxy1.z.ln_shallow.gamma", "zxy1.x.deform_kv.offset.w",
      "zxy1.x.deform_q.main.w",   "zxy1.x.proj_q.w",         "zxy1.y.mlp1.w",
      "zxy1.y.restore.w"};

  ad::Tape<double> tape;
  ad::BoundParams bound;
  std::unordered_map<std::string, ad::Var> tracked;
  for (const auto& name : params.order) {
    const bool track = std::find(picked.begin(), picked.end(), name) != picked.end();
    ad::Var v = tape.input(params.at(name), track);
    bound.vars.emplace(name, v);
    if (track) tracked.emplace(name, v);
  }
  const ad::Var sh = tape.input(sh_t);
  const ad::Var dp = tape.input(dp_t);
  const ad::Var out = ad::zxyformer_block(tape, sh, dp, bound, "zxy1", cfg);
  // deterministic weighting turns the block output into a scalar
  Eigen::ArrayXd wts(tape.val(out).size());
  for (std::int64_t i = 0; i < wts.size(); ++i) wts[i] = 0.05 + 0.01 * static_cast<double>(i % 13);
  Tensor<double> loss_t = Tensor<double>::full({1}, (tape.val(out).data * wts).sum());
  ad::Var loss = tape.node(std::move(loss_t), true);
  tape.set_backprop(loss, [out, loss, wts](ad::Tape<double>& t) {
    t.grad(out).data += t.grad(loss).data[0] * wts;
  });
  tape.backward(loss);

  auto eval_with = [&](const std::string& pname, std::int64_t coord, double delta) {
    NetworkParameters<double> mod = params;
    mod.at(pname).data[coord] += delta;
    ad::Tape<double> t2;
    auto b2 = ad::bind_parameters(t2, mod, false);
    const ad::Var o2 = ad::zxyformer_block(t2, t2.input(sh_t), t2.input(dp_t), b2, "zxy1", cfg);
    return (t2.val(o2).data * wts).sum();
  };

  Xoshiro256 pick_rng(5);
  for (const auto& name : picked) {
    const auto& g = tape.grad(tracked.at(name));
    for (int trial = 0; trial < 3; ++trial) {
      const std::int64_t coord =
          static_cast<std::int64_t>(pick_rng.below(static_cast<std::uint64_t>(g.size())));
      const double h = 1e-6;
      const double fd = (eval_with(name, coord, h) - eval_with(name, coord, -h)) / (2 * h);
      const double an = g.data[coord];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
      CAPTURE(name);
      CHECK(rel < 1e-4);
    }
  }
}

TEST_CASE("network_forward obeys the shape contract") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_parameters<float>(cfg, 19);
  ad::Tape<float> tape;
  auto bound = ad::bind_parameters(tape, params, false);
  Xoshiro256 rng(6);
  Tensor<float> x = Tensor<float>::zeros({1, 16, 16, 16});
  for (std::int64_t i = 0; i < x.size(); ++i) x.data[i] = static_cast<float>(rng.uniform());
  const auto pred = ad::network_forward(tape, tape.input(x), bound, cfg);
  CHECK(tape.val(pred.main_logits).shape == Shape{3, 16, 16, 16});
  CHECK(tape.val(pred.aux_logits).shape == Shape{3, 16, 16, 16});
  for (std::int64_t i = 0; i < tape.val(pred.main_logits).size(); ++i)
    CHECK(std::isfinite(tape.val(pred.main_logits).data[i]));

  // indivisible input shape is rejected
  ad::Tape<float> t2;
  auto b2 = ad::bind_parameters(t2, params, false);
  CHECK_THROWS_AS(ad::network_forward(t2, t2.input(Tensor<float>::zeros({1, 10, 16, 16})), b2, cfg),
                  Error);
}

TEST_CASE("all-zero parameters give uniform softmax") {
  ModelConfig cfg = tiny_cfg();
  auto params = zero_parameters<float>(cfg);
  ad::Tape<float> tape;
  auto bound = ad::bind_parameters(tape, params, false);
  Xoshiro256 rng(7);
  Tensor<float> x = Tensor<float>::zeros({1, 8, 8, 8});
  for (std::int64_t i = 0; i < x.size(); ++i) x.data[i] = static_cast<float>(rng.uniform());
  const auto pred = ad::network_forward(tape, tape.input(x), bound, cfg);
  for (std::int64_t i = 0; i < tape.val(pred.main_logits).size(); ++i)
    CHECK(tape.val(pred.main_logits).data[i] == 0.0f);
  const ad::Var probs = ad::softmax_ch(tape, pred.main_logits);
  for (std::int64_t i = 0; i < tape.val(probs).size(); ++i)
    CHECK(tape.val(probs).data[i] == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("the network is fully convolutional: one parameter set, two input sizes") {
  ModelConfig cfg = tiny_cfg();  // zxy at level 1
  auto params = init_parameters<float>(cfg, 23);
  Xoshiro256 rng(8);
  for (int n : {16, 32}) {
    ad::Tape<float> tape;
    auto bound = ad::bind_parameters(tape, params, false);
    Tensor<float> x = Tensor<float>::zeros({1, n, n, n});
    for (std::int64_t i = 0; i < x.size(); ++i) x.data[i] = static_cast<float>(rng.uniform());
    const auto pred = ad::network_forward(tape, tape.input(x), bound, cfg);
    CHECK(tape.val(pred.main_logits).shape == Shape{3, n, n, n});
  }
}

TEST_CASE("end-to-end gradients on an 8^3 input pass finite differences") {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.n_levels = 4;  // bottleneck at 1^3
  cfg.heads = 2;
  // wider-than-production weights keep gradient magnitudes well above the
  // floating-point noise floor of the central difference
  auto params = init_parameters<double>(cfg, 29);
  Xoshiro256 wrng(77);
  for (const auto& name : params.order) {
    auto& t = params.at(name);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data[i] = wrng.uniform(-0.4, 0.4);
  }
  Xoshiro256 rng(9);
  Tensor<double> x = Tensor<double>::zeros({1, 8, 8, 8});
  for (std::int64_t i = 0; i < x.size(); ++i) x.data[i] = rng.uniform();
  std::vector<std::uint8_t> labels(512);
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(3));

  // pick 5 parameters at random, spread across the net
  std::vector<std::string> names;
  Xoshiro256 pick(31);
  for (int i = 0; i < 5; ++i)
    names.push_back(params.order[pick.below(params.order.size())]);

  ad::Tape<double> tape;
  ad::BoundParams bound;
  std::unordered_map<std::string, ad::Var> tracked;
  for (const auto& name : params.order) {
    const bool track = std::find(names.begin(), names.end(), name) != names.end();
    ad::Var v = tape.input(params.at(name), track);
    bound.vars.emplace(name, v);
    if (track) tracked.emplace(name, v);
  }
  const auto pred = ad::network_forward(tape, tape.input(x), bound, cfg);
  const ad::Var loss =
      total_loss_on_tape<double>(tape, pred.main_logits, pred.aux_logits, labels, true);
  tape.backward(loss);

  auto eval_with = [&](const std::string& pname, std::int64_t coord, double delta) {
    NetworkParameters<double> mod = params;
    mod.at(pname).data[coord] += delta;
    ad::Tape<double> t2;
    auto b2 = ad::bind_parameters(t2, mod, false);
    const auto p2 = ad::network_forward(t2, t2.input(x), b2, cfg);
    return t2.val(total_loss_on_tape<double>(t2, p2.main_logits, p2.aux_logits, labels, true))
        .data[0];
  };

  for (const auto& name : names) {
    const auto& g = tape.grad(tracked.at(name));
    const std::int64_t coord =
        static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(g.size())));
    const double h = 1e-4;
    const double fd = (eval_with(name, coord, h) - eval_with(name, coord, -h)) / (2 * h);
    const double an = g.data[coord];
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
    CAPTURE(name);
    CHECK(rel < 1e-4);
  }
}

}  // TEST_SUITE
