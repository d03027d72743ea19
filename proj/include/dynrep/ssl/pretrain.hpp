#pragma once

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dynrep/core/autodiff.hpp"
#include "dynrep/nn/checkpoint.hpp"
#include "dynrep/nn/mae.hpp"
#include "dynrep/sim/dataset.hpp"
#include "dynrep/ssl/jepa.hpp"
#include "dynrep/ssl/masking.hpp"

namespace dynrep {

struct PretrainConfig {
  std::string method = "jepa";  // jepa | mae
  int64_t epochs = 6;
  int64_t batch = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double warmup_frac = 0.05;
  bool per_token_vicreg = false;
  bool resume = true;
  VicregWeights vicreg;
  EncoderConfig encoder;
  PredictorConfig predictor;
  MaeConfig mae;
  uint64_t seed = 1;

  void validate() const {
    if (method != "jepa" && method != "mae")
      throw Error(ErrCode::value, "pretrain: unknown method '" + method + "'");
    if (epochs < 0 || batch < 1)
      throw Error(ErrCode::value, "pretrain: bad epochs/batch");
    if (lr <= 0.0 || warmup_frac < 0.0 || warmup_frac >= 1.0)
      throw Error(ErrCode::value, "pretrain: bad lr/warmup");
    if (method == "jepa") {
      encoder.validate();
      predictor.validate();
    } else {
      mae.validate();
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, method,
                                                epochs, batch, lr,
                                                weight_decay, warmup_frac,
                                                per_token_vicreg, resume,
                                                vicreg, encoder, predictor,
                                                mae, seed)

struct PretrainResult {
  std::string checkpoint;
  std::string loss_csv;
  int64_t steps = 0;  // optimizer steps taken across all epochs so far
  double final_loss = 0.0;
};

namespace detail {

// One window start per usable trajectory (uniform offset), shuffled: a
// single-branch analog of make_jepa_pairs for reconstruction training.
inline std::vector<JepaPair> make_clip_windows(
    const std::vector<Trajectory>& trajectories, int64_t k, uint64_t seed) {
  if (k < 1) throw Error(ErrCode::value, "clip windows: k must be >= 1");
  Rng rng(seed);
  std::vector<JepaPair> windows;
  for (size_t i = 0; i < trajectories.size(); ++i) {
    int64_t t = trajectories[i].T;
    if (t < k) {
      std::fprintf(stderr,
                   "warning: trajectory %zu has %lld frames, needs %lld; "
                   "skipping\n",
                   i, static_cast<long long>(t), static_cast<long long>(k));
      continue;
    }
    JepaPair w;
    w.trajectory = static_cast<int64_t>(i);
    w.offset = rng.uniform_int(0, t - k + 1);
    windows.push_back(w);
  }
  if (windows.empty())
    throw Error(ErrCode::value,
                "clip windows: no trajectory is long enough for k = " +
                    std::to_string(k));
  rng.shuffle(windows);
  return windows;
}

inline std::vector<Trajectory> load_split(const DatasetManifest& manifest,
                                          const std::string& dir,
                                          const std::string& split) {
  std::vector<Trajectory> out;
  for (const auto* e : manifest.split_entries(split))
    out.push_back(load_entry(dir, *e));
  if (out.empty())
    throw Error(ErrCode::value, "dataset has no '" + split + "' split");
  return out;
}

inline Tensor batch_clips(const std::vector<Trajectory>& trajs,
                          const std::vector<JepaPair>& windows, size_t begin,
                          size_t end, int64_t shift, int64_t k,
                          const DatasetManifest& m) {
  std::vector<Tensor> clips;
  clips.reserve(end - begin);
  for (size_t i = begin; i < end; ++i) {
    const auto& w = windows[i];
    clips.push_back(clip_tensor(trajs[static_cast<size_t>(w.trajectory)],
                                w.offset + shift, k, m.channel_mean,
                                m.channel_std));
  }
  return clips.size() == 1 ? clips[0] : concat(clips, 0);
}

class LossLog {
 public:
  LossLog(const std::string& path, bool append) {
    bool fresh = !append || !std::filesystem::exists(path);
    f_ = std::fopen(path.c_str(), fresh ? "w" : "a");
    if (!f_) throw Error(ErrCode::io, "pretrain: cannot write " + path);
    if (fresh) std::fputs("step,lr,loss,s,v,c\n", f_);
  }
  ~LossLog() {
    if (f_) std::fclose(f_);
  }
  LossLog(const LossLog&) = delete;
  LossLog& operator=(const LossLog&) = delete;

  void row(int64_t step, double lr, double loss, double s, double v,
           double c) {
    std::fprintf(f_, "%" PRId64 ",%.17g,%.17g,%.17g,%.17g,%.17g\n", step, lr,
                 loss, s, v, c);
  }

 private:
  std::FILE* f_ = nullptr;
};

}  // namespace detail

// Mean over dimensions of the per-dim batch std of pooled embeddings; the
// collapse diagnostic (near zero once representations collapse).
inline double embedding_std(Encoder& encoder, const Tensor& clips) {
  NoGradGuard guard;
  Tensor z = pool_embedding(encoder.forward(clips));
  Tensor sd = sqrt_op(reduce_var(z, {0}));
  return mean_all(sd).data()[0];
}

inline PretrainResult pretrain(
    const DatasetManifest& manifest, const std::string& data_dir,
    const PretrainConfig& cfg, const std::string& out_dir,
    const nlohmann::json& extra_meta = nlohmann::json::object()) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  std::string ckpt_path = out_dir + "/" + cfg.method + ".ckpt";
  std::string csv_path = out_dir + "/" + cfg.method + "_loss.csv";

  std::vector<Trajectory> trajs =
      detail::load_split(manifest, data_dir, "pretrain");
  int64_t channels = trajs[0].C;
  int64_t k = cfg.method == "jepa" ? cfg.encoder.context_frames
                                   : cfg.mae.frames;
  int64_t expect_channels =
      cfg.method == "jepa" ? cfg.encoder.in_channels : cfg.mae.in_channels;
  if (channels != expect_channels)
    throw Error(ErrCode::value,
                "pretrain: dataset has " + std::to_string(channels) +
                    " channels but the model expects " +
                    std::to_string(expect_channels));

  JepaModel jepa;
  Mae mae;
  std::vector<ParamRef> params;
  if (cfg.method == "jepa") {
    jepa = JepaModel(cfg.encoder, cfg.predictor, cfg.seed);
    params = jepa.params();
  } else {
    Rng rng = Rng(cfg.seed).fork(0x3AE);
    mae = Mae(cfg.mae, rng);
    params = mae.params();
  }

  // Window span per sample: two adjacent k-windows for jepa, one for mae.
  int64_t span = cfg.method == "jepa" ? 2 * k : k;
  int64_t usable = 0;
  for (const auto& t : trajs)
    if (t.T >= span) ++usable;
  if (usable == 0)
    throw Error(ErrCode::value, "pretrain: no trajectory has " +
                                    std::to_string(span) + " frames");
  int64_t steps_per_epoch = (usable + cfg.batch - 1) / cfg.batch;
  int64_t total_steps = cfg.epochs * steps_per_epoch;
  int64_t warmup =
      std::llround(cfg.warmup_frac * static_cast<double>(total_steps));

  int64_t start_epoch = 0, step = 0;
  bool resumed = false;
  if (cfg.resume && std::filesystem::exists(ckpt_path)) {
    nlohmann::json meta = read_checkpoint_meta(ckpt_path);
    if (meta.value("method", "") != cfg.method)
      throw Error(ErrCode::format, "pretrain: checkpoint at " + ckpt_path +
                                       " was written by method '" +
                                       meta.value("method", "?") + "'");
    load_checkpoint(ckpt_path, params);
    start_epoch = meta.value("epoch", int64_t{0});
    step = meta.value("step", int64_t{0});
    resumed = true;
  }

  auto save = [&](int64_t epoch) {
    nlohmann::json meta = {{"method", cfg.method},
                           {"seed", cfg.seed},
                           {"epoch", epoch},
                           {"step", step}};
    if (cfg.method == "jepa") {
      meta["encoder"] = cfg.encoder;
      meta["predictor"] = cfg.predictor;
    } else {
      meta["mae"] = cfg.mae;
    }
    for (const auto& [key, value] : extra_meta.items()) meta[key] = value;
    save_checkpoint(ckpt_path, meta, params);
  };

  PretrainResult result;
  result.checkpoint = ckpt_path;
  result.loss_csv = csv_path;
  if (start_epoch >= cfg.epochs) {
    if (!resumed) save(0);
    result.steps = step;
    return result;
  }

  detail::LossLog log(csv_path, resumed);
  AdamW opt(cfg.weight_decay);
  double last_loss = 0.0;

  for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    uint64_t epoch_seed = Rng(cfg.seed).fork(0xEC00 + static_cast<uint64_t>(epoch)).seed();
    std::vector<JepaPair> windows =
        cfg.method == "jepa" ? make_jepa_pairs(trajs, k, epoch_seed)
                             : detail::make_clip_windows(trajs, k, epoch_seed);
    Rng mask_rng = Rng(cfg.seed).fork(0x3A5C00 + static_cast<uint64_t>(epoch));

    for (size_t begin = 0; begin < windows.size();
         begin += static_cast<size_t>(cfg.batch)) {
      size_t end = std::min(windows.size(),
                            begin + static_cast<size_t>(cfg.batch));
      double lr = cosine_lr(step, total_steps, cfg.lr, warmup);
      JepaStepLog entry;
      if (cfg.method == "jepa") {
        if (end - begin < 2 && !cfg.per_token_vicreg) continue;
        Tensor ctx = detail::batch_clips(trajs, windows, begin, end, 0, k,
                                         manifest);
        Tensor tgt = detail::batch_clips(trajs, windows, begin, end, k, k,
                                         manifest);
        entry = jepa_train_step(jepa, params, opt, lr, ctx, tgt, cfg.vicreg,
                                cfg.per_token_vicreg);
      } else {
        Tensor x = detail::batch_clips(trajs, windows, begin, end, 0, k,
                                       manifest);
        TubeMask mask = tube_mask(cfg.mae.grid_h(), cfg.mae.grid_w(),
                                  cfg.mae.mask_ratio, mask_rng);
        zero_grads(params);
        Tensor target = cfg.mae.norm_per_patch
                            ? normalize_patches(x, cfg.mae.patch, cfg.mae.tubelet)
                            : x;
        Tensor loss = mae_loss(mae.forward(x, mask), target, mask);
        entry.loss = loss.data()[0];
        if (!std::isfinite(entry.loss))
          throw Error(ErrCode::numeric, "mae step: non-finite loss");
        backward(loss);
        opt.step(params, lr);
      }
      log.row(step, lr, entry.loss, entry.s, entry.v, entry.c);
      last_loss = entry.loss;
      ++step;
    }
    save(epoch + 1);
  }

  result.steps = step;
  result.final_loss = last_loss;
  return result;
}

}  // namespace dynrep
