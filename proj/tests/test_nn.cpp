#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "dynrep/core/autodiff.hpp"
#include "dynrep/nn/checkpoint.hpp"
#include "dynrep/nn/encoder.hpp"
#include "dynrep/nn/mae.hpp"
#include "dynrep/nn/probe.hpp"

using namespace dynrep;

namespace {

MaeConfig tiny_mae_cfg() {
  MaeConfig c;
  c.in_channels = 1;
  c.frames = 4;
  c.height = 16;
  c.width = 16;
  c.patch = 4;
  c.tubelet = 2;
  c.enc_dim = 32;
  c.enc_depth = 1;
  c.dec_dim = 16;
  c.dec_depth = 1;
  return c;
}

}  // namespace

TEST_CASE("linear and layernorm shapes and values") {
  Rng rng(1);
  Linear lin(3, 5, rng);
  Tensor x = Tensor::randn({2, 7, 3}, rng);
  REQUIRE(lin.forward(x).shape() == Shape{2, 7, 5});
  REQUIRE_THROWS_AS(lin.forward(Tensor::randn({2, 4}, rng)), Error);

  LayerNorm ln(6);
  Tensor y = ln.forward(Tensor::randn({4, 6}, rng));
  // fresh gamma/beta: each row exactly standardized (population variance)
  for (int64_t r = 0; r < 4; ++r) {
    double s = 0, sq = 0;
    for (int64_t j = 0; j < 6; ++j) {
      double v = y.data()[static_cast<size_t>(r * 6 + j)];
      s += v;
      sq += v * v;
    }
    REQUIRE(std::abs(s / 6) < 1e-12);
    REQUIRE(sq / 6 == Catch::Approx(1.0).margin(1e-4));
  }

  // channel-axis normalization on a conv layout
  LayerNorm lnc(3);
  Tensor z = lnc.forward(Tensor::randn({2, 3, 2, 4, 4}, rng), 1);
  REQUIRE(z.shape() == Shape{2, 3, 2, 4, 4});
}

TEST_CASE("encoder output grid shapes") {
  Rng rng(2);
  EncoderConfig desk;
  desk.in_channels = 3;
  Encoder enc(desk, rng);
  Tensor clip = Tensor::randn({2, 3, 8, 32, 32}, rng);
  Tensor z = enc.forward(clip);
  REQUIRE(z.shape() == Shape{2, 4, 4, 64});

  EncoderConfig big;
  big.in_channels = 1;
  big.context_frames = 16;
  big.widths = {16, 32, 64, 128};
  big.downsample = 16;
  big.embed_dim = 128;
  Encoder enc16(big, rng);
  Tensor z16 = enc16.forward(Tensor::randn({1, 1, 16, 64, 64}, rng));
  REQUIRE(z16.shape() == Shape{1, 4, 4, 128});
}

TEST_CASE("encoder rejects mismatched clips and bad configs") {
  Rng rng(3);
  Encoder enc(EncoderConfig{}, rng);
  REQUIRE_THROWS_AS(enc.forward(Tensor::randn({1, 1, 7, 32, 32}, rng)), Error);
  REQUIRE_THROWS_AS(enc.forward(Tensor::randn({1, 2, 8, 32, 32}, rng)), Error);
  REQUIRE_THROWS_AS(enc.forward(Tensor::randn({1, 1, 8, 20, 20}, rng)), Error);

  EncoderConfig bad;
  bad.embed_dim = 32;  // last width is 64
  REQUIRE_THROWS_AS(Encoder(bad, rng), Error);
  EncoderConfig bad2;
  bad2.downsample = 16;  // 3 stages only give 8
  REQUIRE_THROWS_AS(Encoder(bad2, rng), Error);
}

TEST_CASE("identical clips in a batch embed identically") {
  Rng rng(4);
  EncoderConfig cfg;
  cfg.context_frames = 4;
  cfg.widths = {8, 16};
  cfg.downsample = 4;
  cfg.embed_dim = 16;
  Encoder enc(cfg, rng);
  Tensor one = Tensor::randn({1, 1, 4, 16, 16}, rng);
  Tensor two = concat({one, one}, 0);
  Tensor z = enc.forward(two);
  size_t half = z.data().size() / 2;
  for (size_t i = 0; i < half; ++i)
    REQUIRE(z.data()[i] == z.data()[half + i]);

  // determinism across calls
  Tensor za = enc.forward(one), zb = enc.forward(one);
  for (size_t i = 0; i < za.data().size(); ++i)
    REQUIRE(za.data()[i] == zb.data()[i]);
}

TEST_CASE("predictor preserves shape and zeroed projections give identity") {
  Rng rng(5);
  PredictorConfig cfg;
  Predictor pred(cfg, rng);
  Tensor z = Tensor::randn({1, 4, 4, 64}, rng);
  REQUIRE(pred.forward(z).shape() == Shape{1, 4, 4, 64});
  REQUIRE_THROWS_AS(pred.forward(Tensor::randn({1, 4, 4, 32}, rng)), Error);

  for (auto& b : pred.blocks) {
    std::fill(b.pw2.weight.mutable_data().begin(),
              b.pw2.weight.mutable_data().end(), 0.0);
    std::fill(b.pw2.bias.mutable_data().begin(),
              b.pw2.bias.mutable_data().end(), 0.0);
  }
  Tensor out = pred.forward(z);
  for (size_t i = 0; i < z.data().size(); ++i)
    REQUIRE(out.data()[i] == z.data()[i]);
}

TEST_CASE("joint loss reaches both encoder and predictor parameters") {
  Rng rng(6);
  EncoderConfig ecfg;
  ecfg.context_frames = 4;
  ecfg.widths = {4, 8};
  ecfg.downsample = 4;
  ecfg.embed_dim = 8;
  Encoder enc(ecfg, rng);
  PredictorConfig pcfg;
  pcfg.embed_dim = 8;
  pcfg.depth = 1;
  Predictor pred(pcfg, rng);

  Tensor a = Tensor::randn({2, 1, 4, 8, 8}, rng);
  Tensor b = Tensor::randn({2, 1, 4, 8, 8}, rng);
  Tensor loss = mse(pred.forward(enc.forward(a)), enc.forward(b));
  backward(loss);
  size_t with_grad = 0, without = 0;
  for (auto& p : enc.params())
    (p.tensor.has_grad() ? with_grad : without)++;
  for (auto& p : pred.params())
    (p.tensor.has_grad() ? with_grad : without)++;
  REQUIRE(without == 0);
  REQUIRE(with_grad > 0);
}

TEST_CASE("encoder+predictor joint gradients match finite differences") {
  Rng rng(7);
  EncoderConfig ecfg;
  ecfg.context_frames = 4;
  ecfg.widths = {4, 8};
  ecfg.downsample = 4;
  ecfg.embed_dim = 8;
  Encoder enc(ecfg, rng);
  PredictorConfig pcfg;
  pcfg.embed_dim = 8;
  pcfg.depth = 1;
  Predictor pred(pcfg, rng);
  Tensor a = Tensor::randn({2, 1, 4, 8, 8}, rng);
  Tensor b = Tensor::randn({2, 1, 4, 8, 8}, rng);

  // through the input clip (exercises every op's input-side backward)
  double e_in = grad_check(
      [&](const Tensor& x) { return mse(pred.forward(enc.forward(x)), enc.forward(b).detach()); },
      a, 1e-4, 24, 77);
  REQUIRE(e_in < 1e-4);

  // through a sample of parameters from both nets
  std::vector<Tensor> picks;
  auto eps_list = enc.params();
  auto pps_list = pred.params();
  picks.push_back(eps_list[0].tensor);
  picks.push_back(eps_list[eps_list.size() / 2].tensor);
  picks.push_back(pps_list[0].tensor);
  picks.push_back(pps_list.back().tensor);
  double e_par = grad_check_params(
      [&]() { return mse(pred.forward(enc.forward(a)), enc.forward(b)); },
      picks, 1e-4, 4, 78);
  REQUIRE(e_par < 1e-4);
}

TEST_CASE("mae reconstruction shape and visible token counts") {
  Rng rng(8);
  MaeConfig cfg;  // desk default: 8 frames, 32x32, p=4, tubelet 2
  Mae mae(cfg, rng);
  REQUIRE(cfg.grid_h() == 8);
  REQUIRE(cfg.grid_w() == 8);
  REQUIRE(cfg.num_tokens() == 4 * 64);

  Rng mrng(9);
  TubeMask mask = tube_mask(8, 8, 0.75, mrng);
  REQUIRE(mask.num_masked() == 48);
  REQUIRE(static_cast<int64_t>(mae.visible_token_indices(mask).size()) == 4 * 16);

  Tensor clip = Tensor::randn({1, 1, 8, 32, 32}, rng);
  Tensor rec = mae.forward(clip, mask);
  REQUIRE(rec.shape() == clip.shape());

  TubeMask wrong = tube_mask(4, 4, 0.75, mrng);
  REQUIRE_THROWS_AS(mae.forward(clip, wrong), Error);
}

TEST_CASE("mae 16-patch example: ratio 0.75 leaves 16 of 64 visible") {
  Rng rng(10);
  TubeMask m = tube_mask(8, 8, 0.75, rng);
  REQUIRE(m.num_patches() - m.num_masked() == 16);
}

TEST_CASE("patchify and unpatchify invert each other") {
  Rng rng(11);
  MaeConfig cfg = tiny_mae_cfg();
  Tensor clip = Tensor::randn({2, 1, 4, 16, 16}, rng);
  Tensor rt = unpatchify(patchify(clip, cfg), cfg);
  for (size_t i = 0; i < clip.data().size(); ++i)
    REQUIRE(rt.data()[i] == clip.data()[i]);
}

TEST_CASE("mae gradients match finite differences") {
  Rng rng(12);
  MaeConfig cfg = tiny_mae_cfg();
  Mae mae(cfg, rng);
  Rng mrng(13);
  TubeMask mask = tube_mask(4, 4, 0.5, mrng);
  Tensor clip = Tensor::randn({1, 1, 4, 16, 16}, rng);
  Tensor target = normalize_patches(clip, cfg.patch, cfg.tubelet);

  double e_in = grad_check(
      [&](const Tensor& x) { return mae_loss(mae.forward(x, mask), target, mask); },
      clip, 1e-4, 16, 21);
  REQUIRE(e_in < 1e-4);

  auto ps = mae.params();
  std::vector<Tensor> picks = {ps[0].tensor, mae.mask_token, mae.pos_sp_enc,
                               ps.back().tensor};
  double e_par = grad_check_params(
      [&]() { return mae_loss(mae.forward(clip, mask), target, mask); }, picks,
      1e-4, 4, 22);
  REQUIRE(e_par < 1e-4);
}

TEST_CASE("mae overfits one clip until masked error collapses") {
  Rng rng(14);
  MaeConfig cfg = tiny_mae_cfg();
  Mae mae(cfg, rng);
  Rng mrng(15);
  TubeMask mask = tube_mask(4, 4, 0.5, mrng);
  Tensor clip = Tensor::randn({1, 1, 4, 16, 16}, rng);
  Tensor target = normalize_patches(clip, cfg.patch, cfg.tubelet);

  auto ps = mae.params();
  AdamW opt;
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 300; ++step) {
    zero_grads(ps);
    Tensor loss = mae_loss(mae.forward(clip, mask), target, mask);
    if (step == 0) first = loss.item();
    last = loss.item();
    backward(loss);
    opt.step(ps, 3e-3);
  }
  REQUIRE(first > 0.5);
  REQUIRE(last < 0.1);
  REQUIRE(last < 0.2 * first);
}

TEST_CASE("probe shape contract and identical-token pooling") {
  Rng rng(16);
  ProbeConfig cfg;
  AttentiveProbe probe(cfg, rng);
  Tensor grid = Tensor::randn({1, 4, 4, 64}, rng);
  REQUIRE(probe.forward(grid).shape() == Shape{1, 2});

  // all-equal tokens: uniform attention pools to the single token's value
  Tensor one = Tensor::randn({3, 1, 64}, rng);
  Tensor many = concat({one, one, one, one, one}, 1);
  Tensor ya = probe.forward(many);
  Tensor yb = probe.forward(one);
  for (size_t i = 0; i < ya.data().size(); ++i)
    REQUIRE(ya.data()[i] == Catch::Approx(yb.data()[i]).margin(1e-12));

  REQUIRE_THROWS_AS(probe.forward(Tensor::randn({1, 5, 32}, rng)), Error);
}

TEST_CASE("probe output is invariant to token permutation") {
  Rng rng(17);
  ProbeConfig cfg;
  cfg.token_dim = 32;
  cfg.dim = 24;
  cfg.out = 2;
  AttentiveProbe probe(cfg, rng);
  Tensor tokens = Tensor::randn({2, 10, 32}, rng);
  Tensor base = probe.forward(tokens);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int64_t> perm = rng.permutation(10);
    Tensor shuffled = index_select(tokens, 1, perm);
    Tensor y = probe.forward(shuffled);
    for (size_t i = 0; i < y.data().size(); ++i)
      REQUIRE(std::abs(y.data()[i] - base.data()[i]) < 1e-10);
  }
}

TEST_CASE("probe gradients match finite differences") {
  Rng rng(18);
  ProbeConfig cfg;
  cfg.token_dim = 16;
  cfg.dim = 12;
  cfg.out = 2;
  AttentiveProbe probe(cfg, rng);
  Tensor tokens = Tensor::randn({2, 6, 16}, rng);
  Tensor target = Tensor::randn({2, 2}, rng);

  double e_in = grad_check(
      [&](const Tensor& t) { return mse(probe.forward(t), target); }, tokens,
      1e-4, 24, 31);
  REQUIRE(e_in < 1e-4);

  std::vector<Tensor> picks = {probe.query, probe.k.weight, probe.head.weight,
                               probe.norm.gamma};
  double e_par = grad_check_params(
      [&]() { return mse(probe.forward(tokens), target); }, picks, 1e-4, 4, 32);
  REQUIRE(e_par < 1e-4);
}

TEST_CASE("frozen encoder gets no gradients from probe loss") {
  Rng rng(19);
  EncoderConfig ecfg;
  ecfg.context_frames = 4;
  ecfg.widths = {4, 8};
  ecfg.downsample = 4;
  ecfg.embed_dim = 8;
  Encoder enc(ecfg, rng);
  ProbeConfig pcfg;
  pcfg.token_dim = 8;
  pcfg.dim = 8;
  AttentiveProbe probe(pcfg, rng);

  Tensor clip = Tensor::randn({2, 1, 4, 8, 8}, rng);
  Tensor z;
  {
    NoGradGuard ng;
    z = enc.forward(clip);
  }
  Tensor loss = mse(probe.forward(z), Tensor::randn({2, 2}, rng));
  backward(loss);
  for (auto& p : enc.params()) REQUIRE(!p.tensor.has_grad());
  bool probe_touched = false;
  for (auto& p : probe.params())
    if (p.tensor.has_grad()) probe_touched = true;
  REQUIRE(probe_touched);
}

TEST_CASE("checkpoint round-trip restores parameters at 32-bit precision") {
  Rng rng(20);
  ProbeConfig cfg;
  AttentiveProbe a(cfg, rng);
  Rng rng2(21);
  AttentiveProbe b(cfg, rng2);

  auto pa = a.params();
  auto pb = b.params();
  nlohmann::json meta = {{"step", 17}, {"seed", 20}, {"kind", "probe"}};
  std::string path = "ckpt_test.bin";
  save_checkpoint(path, meta, pa);
  nlohmann::json loaded = load_checkpoint(path, pb);
  REQUIRE(loaded.at("step").get<int>() == 17);
  for (size_t i = 0; i < pa.size(); ++i) {
    const auto& da = pa[i].tensor.data();
    const auto& db = pb[i].tensor.data();
    for (size_t j = 0; j < da.size(); ++j)
      REQUIRE(db[j] == static_cast<double>(static_cast<float>(da[j])));
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint errors: missing file, bad magic, wrong model") {
  Rng rng(22);
  ProbeConfig cfg;
  AttentiveProbe a(cfg, rng);
  auto pa = a.params();
  REQUIRE_THROWS_AS(load_checkpoint("no_such_file.bin", pa), Error);

  std::string bad = "ckpt_bad.bin";
  {
    std::ofstream f(bad, std::ios::binary);
    f << "garbage data that is not a checkpoint";
  }
  try {
    load_checkpoint(bad, pa);
    FAIL("expected format error");
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrCode::format);
  }
  std::remove(bad.c_str());

  // save a probe, try to load into a differently-shaped probe
  std::string path = "ckpt_mismatch.bin";
  save_checkpoint(path, {{"step", 0}}, pa);
  ProbeConfig other = cfg;
  other.dim = 32;
  Rng rng3(23);
  AttentiveProbe c(other, rng3);
  auto pc = c.params();
  try {
    load_checkpoint(path, pc);
    FAIL("expected shape error");
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrCode::shape);
  }
  std::remove(path.c_str());
}
