#include <catch2/catch.hpp>

#include <cmath>
#include <vector>

#include "lldif/pnet.hpp"
#include "support/gradcheck.hpp"

using namespace lldif;
using namespace lldif::testing;

namespace {

void set_values(const VarPtr& p, const std::vector<double>& v) {
  REQUIRE(p != nullptr);
  REQUIRE(p->value.numel() == static_cast<long>(v.size()));
  for (long i = 0; i < p->value.numel(); ++i) p->value[i] = v[static_cast<size_t>(i)];
}

}  // namespace

TEST_CASE("stage-1 prior has the configured width", "[pnet]") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.embed_dim = 8;
  cfg.epd_dim = 12;
  Rng rng(3);
  PnetS1 net(cfg, rng);
  VarPtr f = make_const(rng.uniform_tensor({8}, -1.0, 1.0));
  VarPtr l = make_const(rng.uniform_tensor({8}, -1.0, 1.0));
  VarPtr z = net.forward(f, l);
  REQUIRE(z->value.rank() == 1);
  REQUIRE(z->value.dim(0) == 12);
  VarPtr bad = make_const(rng.uniform_tensor({6}, -1.0, 1.0));
  REQUIRE_THROWS_AS(net.forward(f, bad), Error);
}

TEST_CASE("single-layer cross attention matches hand computation", "[pnet]") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.embed_dim = 2;
  cfg.epd_dim = 2;
  Rng rng(5);
  PnetS1 net(cfg, rng, 1, 1);
  ParamRegistry reg;
  net.register_params(reg, "p");
  set_values(reg.find("p.layer0.wq.W"), {1, 0, 0, 1});
  set_values(reg.find("p.layer0.wq.b"), {0, 0});
  set_values(reg.find("p.layer0.wk.W"), {1, 0, 0, 1});
  set_values(reg.find("p.layer0.wk.b"), {0, 0});
  set_values(reg.find("p.layer0.wv.W"), {1, 2, 3, 4});
  set_values(reg.find("p.layer0.wv.b"), {0.1, -0.2});
  set_values(reg.find("p.layer0.wo.W"), {0.5, 0, 0, 0.5});
  set_values(reg.find("p.layer0.wo.b"), {0, 0});
  set_values(reg.find("p.out.W"), {1, 0, 0, 1});
  set_values(reg.find("p.out.b"), {0, 0});

  VarPtr f = make_const(Tensor({2}, {0.3, -0.7}));
  VarPtr l = make_const(Tensor({2}, {0.2, 0.4}));
  VarPtr z = net.forward(f, l);
  // one key token: attention weight is exactly 1, so the layer adds Wo(Wv f + bv)
  double v0 = 1.0 * 0.3 + 2.0 * (-0.7) + 0.1;   // -1.0
  double v1 = 3.0 * 0.3 + 4.0 * (-0.7) - 0.2;   // -2.1
  double z0 = 0.2 + 0.5 * v0;
  double z1 = 0.4 + 0.5 * v1;
  REQUIRE(std::abs(z->value[0] - z0) < 1e-12);
  REQUIRE(std::abs(z->value[1] - z1) < 1e-12);
}

TEST_CASE("cross attention records one unit distribution per head and layer", "[pnet]") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.embed_dim = 8;
  cfg.epd_dim = 8;
  Rng rng(7);
  PnetS1 net(cfg, rng, 2, 4);
  std::vector<Tensor> seen;
  softmax_probe() = &seen;
  VarPtr f = make_const(rng.uniform_tensor({8}, -1.0, 1.0));
  VarPtr l = make_const(rng.uniform_tensor({8}, -1.0, 1.0));
  net.forward(f, l);
  softmax_probe() = nullptr;
  REQUIRE(seen.size() == 8);  // 2 layers x 4 heads
  for (const auto& t : seen) {
    REQUIRE(t.numel() == 1);
    REQUIRE(std::abs(t[0] - 1.0) < 1e-12);
  }
}

TEST_CASE("stage-1 prior gradcheck", "[pnet]") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.embed_dim = 8;
  cfg.epd_dim = 6;
  Rng rng(9);
  PnetS1 net(cfg, rng, 2, 2);
  ParamRegistry reg;
  net.register_params(reg, "p");
  VarPtr f = make_param(rng.uniform_tensor({8}, -1.0, 1.0));
  VarPtr l = make_param(rng.uniform_tensor({8}, -1.0, 1.0));
  std::vector<VarPtr> params = reg.params();
  params.push_back(f);
  params.push_back(l);
  auto fn = [&]() {
    VarPtr z = net.forward(f, l);
    return sum(mul(z, z));
  };
  Rng pick(10);
  auto res = grad_check_sampled(params, fn, pick, 0.0, 120, 1e-5);
  INFO("param " << res.worst_param << "[" << res.worst_index << "] analytic "
                << res.worst_analytic << " fd " << res.worst_fd);
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("stage-2 prior has the configured width and rejects bad input", "[pnet]") {
  ModelConfig cfg = ModelConfig::desk();
  Rng rng(13);
  PnetS2 net(cfg, rng);
  VarPtr img = make_const(rng.uniform_tensor({3, 32, 32}, 0.0, 1.0));
  VarPtr x = net.forward(img);
  REQUIRE(x->value.rank() == 1);
  REQUIRE(x->value.dim(0) == cfg.epd_dim);
  REQUIRE_THROWS_AS(net.forward(make_const(rng.uniform_tensor({1, 32, 32}, 0.0, 1.0))), Error);
}

TEST_CASE("zeroed output head maps any image to the zero vector", "[pnet]") {
  ModelConfig cfg = ModelConfig::desk();
  Rng rng(15);
  PnetS2 net(cfg, rng);
  for (long i = 0; i < net.out().W->value.numel(); ++i) net.out().W->value[i] = 0.0;
  for (long i = 0; i < net.out().b->value.numel(); ++i) net.out().b->value[i] = 0.0;
  VarPtr zero_img = make_const(Tensor({3, 32, 32}));
  VarPtr x = net.forward(zero_img);
  for (long i = 0; i < x->value.numel(); ++i) REQUIRE(x->value[i] == 0.0);
  VarPtr rand_img = make_const(rng.uniform_tensor({3, 32, 32}, 0.0, 1.0));
  VarPtr y = net.forward(rand_img);
  for (long i = 0; i < y->value.numel(); ++i) REQUIRE(y->value[i] == 0.0);
}

TEST_CASE("stage-2 prior gradcheck", "[pnet]") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.resolution = 16;
  cfg.epd_dim = 6;
  cfg.pnet_s2_widths = {4, 6, 8};
  Rng rng(17);
  PnetS2 net(cfg, rng);
  ParamRegistry reg;
  net.register_params(reg, "p");
  Tensor img = rng.uniform_tensor({3, 16, 16}, 0.0, 1.0);
  auto fn = [&]() {
    VarPtr x = net.forward(make_const(img));
    return sum(mul(x, x));
  };
  Rng pick(18);
  auto res = grad_check_sampled(reg.params(), fn, pick, 0.0, 80, 1e-5);
  INFO("param " << res.worst_param << "[" << res.worst_index << "] analytic "
                << res.worst_analytic << " fd " << res.worst_fd);
  REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("prior networks are deterministic across identical seeds", "[pnet]") {
  ModelConfig cfg = ModelConfig::desk();
  Rng ra(23), rb(23), rimg(24);
  PnetS2 a(cfg, ra), b(cfg, rb);
  Tensor img = rimg.uniform_tensor({3, 32, 32}, 0.0, 1.0);
  VarPtr xa = a.forward(make_const(img));
  VarPtr xb = b.forward(make_const(img));
  REQUIRE(xa->value.max_abs_diff(xb->value) == 0.0);
}
