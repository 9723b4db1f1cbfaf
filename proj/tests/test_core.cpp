#include <catch2/catch.hpp>

#include "lldif/nn.hpp"
#include "lldif/optim.hpp"
#include "support/gradcheck.hpp"

using namespace lldif;
using lldif::testing::grad_check;
using lldif::testing::rel_err;

namespace {

VarPtr rand_param(Rng& rng, std::vector<int> shape, double scale = 1.0) {
  return make_param(rng.normal_tensor(std::move(shape), scale));
}

}  // namespace

TEST_CASE("tensor shape bookkeeping", "[core]") {
  Tensor t({2, 3});
  REQUIRE(t.numel() == 6);
  REQUIRE(t.rank() == 2);
  t.at(1, 2) = 5.0;
  REQUIRE(t[5] == 5.0);
  Tensor r = t.reshaped({3, 2});
  REQUIRE(r.at(2, 1) == 5.0);
  REQUIRE_THROWS_AS(t.reshaped({4, 2}), Error);
  REQUIRE(Tensor::scalar(3.5).item() == 3.5);
  REQUIRE(Tensor::full({2, 2}, 2.0).sum() == 8.0);
  Tensor c({2, 2, 2});
  c.at3(1, 0, 1) = 7.0;
  REQUIRE(c[5] == 7.0);
}

TEST_CASE("tensor eigen views share storage", "[core]") {
  Tensor t({2, 2});
  t.mat() << 1, 2, 3, 4;
  REQUIRE(t[1] == 2.0);  // row-major
  REQUIRE(t.at(1, 0) == 3.0);
  Tensor u({4});
  u.as_mat(2, 2)(0, 1) = 9.0;
  REQUIRE(u[1] == 9.0);
}

TEST_CASE("rng reproducibility and ranges", "[core]") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) {
    double u = a.uniform();
    REQUIRE(u == b.uniform());
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  Rng c(1);
  double acc = 0.0;
  for (int i = 0; i < 20000; ++i) acc += c.normal();
  REQUIRE(std::abs(acc / 20000.0) < 0.03);
}

TEST_CASE("rng shuffle is a permutation", "[core]") {
  Rng r(7);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  r.shuffle(v);
  std::vector<int> s = v;
  std::sort(s.begin(), s.end());
  for (int i = 0; i < 10; ++i) REQUIRE(s[i] == i);
}

TEST_CASE("seed mixing separates streams", "[core]") {
  REQUIRE(mix_seed(1, 2) != mix_seed(2, 1));
  REQUIRE(fnv1a64("a") != fnv1a64("b"));
  Rng a(mix_seed(42, 0)), b(mix_seed(42, 1));
  REQUIRE(a.next_u64() != b.next_u64());
}

// --------------------------------------------------------------------------
// autodiff: value oracles

TEST_CASE("softmax rows sum to one and shift invariance", "[core]") {
  Rng rng(3);
  Tensor x = rng.normal_tensor({4, 6});
  VarPtr p = softmax(make_const(x));
  for (int i = 0; i < 4; ++i) {
    double s = 0.0;
    for (int j = 0; j < 6; ++j) s += p->value.at(i, j);
    REQUIRE(std::abs(s - 1.0) < 1e-12);
  }
  Tensor shifted = x;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) shifted.at(i, j) += 100.0;
  VarPtr p2 = softmax(make_const(shifted));
  REQUIRE(p->value.max_abs_diff(p2->value) < 1e-12);
}

TEST_CASE("cross entropy closed forms", "[core]") {
  // uniform logits -> ln(M) per row
  VarPtr z = make_const(Tensor({2, 5}));
  VarPtr l = cross_entropy_with_logits(z, {0, 3}, Reduction::kMean);
  REQUIRE(std::abs(l->value.item() - std::log(5.0)) < 1e-12);
  VarPtr ls = cross_entropy_with_logits(z, {0, 3}, Reduction::kSum);
  REQUIRE(std::abs(ls->value.item() - 2.0 * std::log(5.0)) < 1e-12);
  // a dominant correct logit drives the loss toward zero
  Tensor big({1, 3});
  big.at(0, 1) = 50.0;
  VarPtr l2 = cross_entropy_with_logits(make_const(big), {1}, Reduction::kMean);
  REQUIRE(l2->value.item() < 1e-12);
  REQUIRE_THROWS_AS(cross_entropy_with_logits(z, {0, 5}, Reduction::kMean), Error);
}

TEST_CASE("layernorm normalizes to zero mean unit variance", "[core]") {
  Rng rng(5);
  VarPtr x = make_const(rng.normal_tensor({3, 8}, 2.0));
  VarPtr y = layernorm_rows(x);
  for (int i = 0; i < 3; ++i) {
    double m = 0.0, v = 0.0;
    for (int j = 0; j < 8; ++j) m += y->value.at(i, j);
    m /= 8;
    for (int j = 0; j < 8; ++j) v += (y->value.at(i, j) - m) * (y->value.at(i, j) - m);
    v /= 8;
    REQUIRE(std::abs(m) < 1e-12);
    REQUIRE(std::abs(v - 1.0) < 1e-5);
  }
}

TEST_CASE("gelu fixed points", "[core]") {
  VarPtr x = make_const(Tensor({3}, {0.0, 100.0, -100.0}));
  VarPtr y = gelu(x);
  REQUIRE(y->value[0] == 0.0);
  REQUIRE(std::abs(y->value[1] - 100.0) < 1e-9);
  REQUIRE(std::abs(y->value[2]) < 1e-9);
}

TEST_CASE("l2 normalize returns unit vectors", "[core]") {
  Rng rng(6);
  VarPtr x = make_const(rng.normal_tensor({7}, 3.0));
  VarPtr y = l2_normalize(x);
  double n = 0.0;
  for (int i = 0; i < 7; ++i) n += y->value[i] * y->value[i];
  REQUIRE(std::abs(n - 1.0) < 1e-12);
}

TEST_CASE("softmax probe records every softmax", "[core]") {
  std::vector<Tensor> probe;
  softmax_probe() = &probe;
  softmax(make_const(Tensor({2, 3})));
  softmax(make_const(Tensor({4})));
  softmax_probe() = nullptr;
  REQUIRE(probe.size() == 2);
  REQUIRE(probe[0].rank() == 2);
  REQUIRE(probe[1].rank() == 1);
  softmax(make_const(Tensor({2})));
  REQUIRE(probe.size() == 2);  // detached probe stays untouched
}

TEST_CASE("no-grad guard suppresses graph construction", "[core]") {
  VarPtr p = make_param(Tensor::full({3}, 2.0));
  {
    NoGradGuard ng;
    VarPtr y = sum(mul(p, p));
    REQUIRE_FALSE(y->requires_grad);
    REQUIRE(y->parents.empty());
  }
  VarPtr y = sum(mul(p, p));
  REQUIRE(y->requires_grad);
  backward(y);
  REQUIRE(std::abs(p->grad[0] - 4.0) < 1e-12);
}

TEST_CASE("gradients accumulate until cleared", "[core]") {
  VarPtr p = make_param(Tensor::full({2}, 1.0));
  backward(sum(p));
  backward(sum(p));
  REQUIRE(p->grad[0] == 2.0);
  p->zero_grad();
  backward(sum(p));
  REQUIRE(p->grad[0] == 1.0);
}

TEST_CASE("shared subexpression gets both contributions", "[core]") {
  VarPtr p = make_param(Tensor::full({1}, 3.0));
  VarPtr y = mul(p, p);  // d/dp p^2 = 2p
  backward(sum(y));
  REQUIRE(std::abs(p->grad[0] - 6.0) < 1e-12);
}

// --------------------------------------------------------------------------
// autodiff: finite-difference checks, op by op

TEST_CASE("gradcheck elementwise chain", "[core]") {
  Rng rng(11);
  VarPtr a = rand_param(rng, {3, 4});
  VarPtr b = rand_param(rng, {3, 4});
  auto fn = [&] { return sum(mul(add(a, scale(b, 0.5)), sub(a, neg(b)))); };
  auto r = grad_check({a, b}, fn);
  REQUIRE(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck exp log gelu", "[core]") {
  Rng rng(12);
  VarPtr a = rand_param(rng, {8}, 0.5);
  auto fn = [&] { return mean(gelu(log_eps(exp_op(a), 1e-3))); };
  auto r = grad_check({a}, fn);
  REQUIRE(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck scale_by scalar variable", "[core]") {
  Rng rng(13);
  VarPtr a = rand_param(rng, {5});
  VarPtr s = make_param(Tensor::scalar(0.7));
  auto fn = [&] { return sum(scale_by(a, s)); };
  auto r = grad_check({a, s}, fn);
  REQUIRE(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck matmul transpose linear", "[core]") {
  Rng rng(14);
  VarPtr A = rand_param(rng, {3, 4});
  VarPtr B = rand_param(rng, {4, 2});
  VarPtr W = rand_param(rng, {5, 2});
  VarPtr b = rand_param(rng, {5});
  auto fn = [&] {
    VarPtr y = matmul(A, B);                  // {3,2}
    VarPtr z = linear(y, W, b);               // {3,5}
    return sum(mul(transpose(z), transpose(z)));
  };
  auto r = grad_check({A, B, W, b}, fn);
  REQUIRE(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck linear on vector input", "[core]") {
  Rng rng(15);
  VarPtr x = rand_param(rng, {4});
  VarPtr W = rand_param(rng, {3, 4});
  VarPtr b = rand_param(rng, {3});
  auto fn = [&] { return mean(gelu(linear(x, W, b))); };
  auto r = grad_check({x, W, b}, fn);
  REQUIRE(r.max_rel_err < 1e-5);
}

TEST_CASE("gradcheck softmax and layernorms", "[core]") {
  Rng rng(16);
  VarPtr x = rand_param(rng, {3, 5});
  VarPtr w = make_const(rng.normal_tensor({3, 5}));
  auto fn1 = [&] { return sum(mul(softmax(x), w)); };
  REQUIRE(grad_check({x}, fn1).max_rel_err < 1e-5);
  auto fn2 = [&] { return sum(mul(layernorm_rows(x), w)); };
  REQUIRE(grad_check({x}, fn2).max_rel_err < 1e-5);
  VarPtr c = rand_param(rng, {4, 3, 3});
  VarPtr wc = make_const(rng.normal_tensor({4, 3, 3}));
  auto fn3 = [&] { return sum(mul(layernorm_channels(c), wc)); };
  REQUIRE(grad_check({c}, fn3).max_rel_err < 1e-5);
}

TEST_CASE("gradcheck l2 normalize", "[core]") {
  Rng rng(17);
  VarPtr x = rand_param(rng, {6});
  VarPtr w = make_const(rng.normal_tensor({6}));
  auto fn = [&] { return sum(mul(l2_normalize(x), w)); };
  REQUIRE(grad_check({x}, fn).max_rel_err < 1e-5);
}

TEST_CASE("gradcheck cross entropy", "[core]") {
  Rng rng(18);
  VarPtr z = rand_param(rng, {4, 7});
  auto fn_mean = [&] { return cross_entropy_with_logits(z, {1, 0, 6, 3}, Reduction::kMean); };
  REQUIRE(grad_check({z}, fn_mean).max_rel_err < 1e-6);
  auto fn_sum = [&] { return cross_entropy_with_logits(z, {1, 0, 6, 3}, Reduction::kSum); };
  REQUIRE(grad_check({z}, fn_sum).max_rel_err < 1e-6);
}

TEST_CASE("gradcheck conv2d variants", "[core]") {
  Rng rng(19);
  VarPtr x = rand_param(rng, {2, 6, 6});
  VarPtr W = rand_param(rng, {3, 2, 3, 3}, 0.5);
  VarPtr b = rand_param(rng, {3});
  VarPtr w_same = make_const(rng.normal_tensor({3, 6, 6}));
  auto fn_same = [&] { return sum(mul(conv2d(x, W, b, 1, 1), w_same)); };
  REQUIRE(grad_check({x, W, b}, fn_same).max_rel_err < 1e-5);
  VarPtr w_s2 = make_const(rng.normal_tensor({3, 3, 3}));
  auto fn_s2 = [&] { return sum(mul(conv2d(x, W, nullptr, 2, 1), w_s2)); };
  REQUIRE(grad_check({x, W}, fn_s2).max_rel_err < 1e-5);
  VarPtr W1 = rand_param(rng, {4, 2, 1, 1});
  VarPtr w_1x1 = make_const(rng.normal_tensor({4, 6, 6}));
  auto fn_1x1 = [&] { return sum(mul(conv2d(x, W1, nullptr, 1, 0), w_1x1)); };
  REQUIRE(grad_check({x, W1}, fn_1x1).max_rel_err < 1e-5);
}

TEST_CASE("conv2d matches direct convolution", "[core]") {
  // independent oracle: naive quadruple loop
  Rng rng(20);
  Tensor x = rng.normal_tensor({2, 5, 5});
  Tensor W = rng.normal_tensor({3, 2, 3, 3});
  VarPtr y = conv2d(make_const(x), make_const(W), nullptr, 1, 1);
  for (int co = 0; co < 3; ++co)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = 0.0;
        for (int ci = 0; ci < 2; ++ci)
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj) {
              int ii = i + ki - 1, jj = j + kj - 1;
              if (ii < 0 || ii >= 5 || jj < 0 || jj >= 5) continue;
              acc += W[((static_cast<long>(co) * 2 + ci) * 3 + ki) * 3 + kj] * x.at3(ci, ii, jj);
            }
        REQUIRE(std::abs(y->value.at3(co, i, j) - acc) < 1e-12);
      }
}

TEST_CASE("gradcheck depthwise and pooling and upsample", "[core]") {
  Rng rng(21);
  VarPtr x = rand_param(rng, {3, 4, 4});
  VarPtr W = rand_param(rng, {3, 3, 3}, 0.5);
  VarPtr wd = make_const(rng.normal_tensor({3, 4, 4}));
  auto fn_dw = [&] { return sum(mul(depthwise3x3(x, W), wd)); };
  REQUIRE(grad_check({x, W}, fn_dw).max_rel_err < 1e-6);
  VarPtr wp = make_const(rng.normal_tensor({3, 2, 2}));
  auto fn_pool = [&] { return sum(mul(avgpool_to(x, 2, 2), wp)); };
  REQUIRE(grad_check({x}, fn_pool).max_rel_err < 1e-6);
  VarPtr wg = make_const(rng.normal_tensor({3}));
  auto fn_gap = [&] { return sum(mul(global_avgpool(x), wg)); };
  REQUIRE(grad_check({x}, fn_gap).max_rel_err < 1e-6);
  VarPtr wu = make_const(rng.normal_tensor({3, 8, 8}));
  auto fn_up = [&] { return sum(mul(upsample2x(x), wu)); };
  REQUIRE(grad_check({x}, fn_up).max_rel_err < 1e-6);
}

TEST_CASE("upsample then pool recovers input exactly", "[core]") {
  Rng rng(22);
  Tensor x = rng.normal_tensor({2, 3, 3});
  VarPtr y = avgpool_to(upsample2x(make_const(x)), 3, 3);
  REQUIRE(y->value.max_abs_diff(x) < 1e-12);
}

TEST_CASE("gradcheck token reshapes and gathers", "[core]") {
  Rng rng(23);
  VarPtr x = rand_param(rng, {3, 2, 4});
  VarPtr w = make_const(rng.normal_tensor({8, 3}));
  auto fn_tok = [&] { return sum(mul(chw_to_tokens(x), w)); };
  REQUIRE(grad_check({x}, fn_tok).max_rel_err < 1e-6);

  VarPtr t = rand_param(rng, {6, 4});
  VarPtr wg = make_const(rng.normal_tensor({4, 4}));
  auto fn_gather = [&] { return sum(mul(gather_rows(t, {5, 0, 0, 2}), wg)); };
  REQUIRE(grad_check({t}, fn_gather).max_rel_err < 1e-6);
  VarPtr ws = make_const(rng.normal_tensor({6, 2}));
  auto fn_slice = [&] { return sum(mul(slice_cols(t, 1, 3), ws)); };
  REQUIRE(grad_check({t}, fn_slice).max_rel_err < 1e-6);
}

TEST_CASE("token roundtrip is identity", "[core]") {
  Rng rng(24);
  Tensor x = rng.normal_tensor({3, 4, 5});
  VarPtr back = tokens_to_chw(chw_to_tokens(make_const(x)), 4, 5);
  REQUIRE(back->value.max_abs_diff(x) < 1e-12);
}

TEST_CASE("gradcheck concat and stack family", "[core]") {
  Rng rng(25);
  VarPtr a = rand_param(rng, {3});
  VarPtr b = rand_param(rng, {2});
  VarPtr wv = make_const(rng.normal_tensor({5}));
  auto fn_cv = [&] { return sum(mul(concat_vec({a, b}), wv)); };
  REQUIRE(grad_check({a, b}, fn_cv).max_rel_err < 1e-6);

  VarPtr r1 = rand_param(rng, {4});
  VarPtr r2 = rand_param(rng, {4});
  VarPtr wr = make_const(rng.normal_tensor({2, 4}));
  auto fn_st = [&] { return sum(mul(stack_rows({r1, r2}), wr)); };
  REQUIRE(grad_check({r1, r2}, fn_st).max_rel_err < 1e-6);

  VarPtr m1 = rand_param(rng, {2, 3});
  VarPtr m2 = rand_param(rng, {2, 2});
  VarPtr wc = make_const(rng.normal_tensor({2, 5}));
  auto fn_cc = [&] { return sum(mul(concat_cols({m1, m2}), wc)); };
  REQUIRE(grad_check({m1, m2}, fn_cc).max_rel_err < 1e-6);

  VarPtr n1 = rand_param(rng, {2, 3});
  VarPtr n2 = rand_param(rng, {1, 3});
  VarPtr wn = make_const(rng.normal_tensor({3, 3}));
  auto fn_cr = [&] { return sum(mul(concat_rows({n1, n2}), wn)); };
  REQUIRE(grad_check({n1, n2}, fn_cr).max_rel_err < 1e-6);

  VarPtr ch1 = rand_param(rng, {2, 3, 3});
  VarPtr ch2 = rand_param(rng, {1, 3, 3});
  VarPtr wch = make_const(rng.normal_tensor({3, 3, 3}));
  auto fn_cch = [&] { return sum(mul(concat_channels(ch1, ch2), wch)); };
  REQUIRE(grad_check({ch1, ch2}, fn_cch).max_rel_err < 1e-6);

  VarPtr wrow = make_const(rng.normal_tensor({3}));
  auto fn_row = [&] { return sum(mul(row(m1, 1), wrow)); };
  REQUIRE(grad_check({m1}, fn_row).max_rel_err < 1e-6);
}

TEST_CASE("gradcheck reductions", "[core]") {
  Rng rng(26);
  VarPtr x = rand_param(rng, {3, 4});
  auto fn_mean = [&] { return mean(x); };
  REQUIRE(grad_check({x}, fn_mean).max_rel_err < 1e-6);
  VarPtr w = make_const(rng.normal_tensor({4}));
  auto fn_mr = [&] { return sum(mul(mean_rows(x), w)); };
  REQUIRE(grad_check({x}, fn_mr).max_rel_err < 1e-6);
  auto fn_rs = [&] { return mean(reshape(x, {2, 6})); };
  REQUIRE(grad_check({x}, fn_rs).max_rel_err < 1e-6);
}

// --------------------------------------------------------------------------
// nn modules and optimizer

TEST_CASE("param registry rejects duplicates and preserves order", "[core]") {
  ParamRegistry reg;
  VarPtr a = make_param(Tensor({2}));
  VarPtr b = make_param(Tensor({3}));
  reg.add("w", a);
  reg.add("b", b);
  REQUIRE_THROWS_AS(reg.add("w", a), Error);
  REQUIRE(reg.items()[0].first == "w");
  REQUIRE(reg.total_size() == 5);
  ParamRegistry outer;
  outer.merge("layer", reg);
  REQUIRE(outer.items()[1].first == "layer.b");
  REQUIRE(outer.find("layer.w") == a);
  REQUIRE(outer.find("missing") == nullptr);
}

TEST_CASE("linear module init bounds", "[core]") {
  Rng rng(30);
  Linear l(rng, 16, 8);
  double bound = 1.0 / 4.0;
  for (long i = 0; i < l.W->value.numel(); ++i) {
    REQUIRE(l.W->value[i] >= -bound);
    REQUIRE(l.W->value[i] <= bound);
  }
  REQUIRE(l.b->value.max_abs_diff(Tensor({8})) == 0.0);
}

TEST_CASE("gradcheck mlp and layernorm modules", "[core]") {
  Rng rng(31);
  Mlp mlp(rng, 6);
  LayerNorm ln(6);
  ParamRegistry reg;
  mlp.register_params(reg, "mlp");
  ln.register_params(reg, "ln");
  VarPtr x = rand_param(rng, {3, 6});
  reg.add("x", x);
  VarPtr w = make_const(rng.normal_tensor({3, 6}));
  auto fn = [&] { return sum(mul(mlp(ln(x)), w)); };
  REQUIRE(grad_check(reg.params(), fn).max_rel_err < 1e-5);
}

TEST_CASE("layernorm module at init matches plain normalization", "[core]") {
  Rng rng(32);
  LayerNorm ln(5);
  VarPtr x = make_const(rng.normal_tensor({4, 5}));
  REQUIRE(ln(x)->value.max_abs_diff(layernorm_rows(x)->value) < 1e-12);
}

TEST_CASE("adam minimizes a quadratic", "[core]") {
  Rng rng(33);
  VarPtr x = make_param(rng.normal_tensor({10}, 2.0));
  Tensor target = rng.normal_tensor({10});
  Adam opt({x}, 0.05);
  for (int step = 0; step < 400; ++step) {
    opt.zero_grad();
    VarPtr d = sub(x, make_const(target));
    backward(sum(mul(d, d)));
    opt.step();
  }
  REQUIRE(x->value.max_abs_diff(target) < 1e-3);
}

TEST_CASE("adam weight decay shrinks unused weights", "[core]") {
  VarPtr x = make_param(Tensor::full({4}, 1.0));
  Adam opt({x}, 0.01, 0.1);
  for (int step = 0; step < 200; ++step) {
    opt.zero_grad();
    backward(scale(sum(x), 0.0));  // zero data gradient, decay only
    opt.step();
  }
  for (int i = 0; i < 4; ++i) REQUIRE(std::abs(x->value[i]) < 0.5);
}

TEST_CASE("cosine schedule endpoints", "[core]") {
  REQUIRE(cosine_lr(1.0, 0, 100) == 1.0);
  REQUIRE(std::abs(cosine_lr(1.0, 100, 100)) < 1e-12);
  REQUIRE(std::abs(cosine_lr(1.0, 50, 100) - 0.5) < 1e-12);
  REQUIRE(std::abs(cosine_lr(2.0, 100, 100, 0.1) - 0.2) < 1e-12);
}
