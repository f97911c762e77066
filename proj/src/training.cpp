#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "nft/harness.hpp"
#include "nft/tokenizer.hpp"

namespace nft {

namespace {

using nlohmann::json;

struct TrainState {
  int next_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::vector<double> train_loss;
  std::vector<double> val_metric;
};

void save_train_state(const std::string& dir, const TrainState& st) {
  json j;
  j["next_epoch"] = st.next_epoch;
  j["best_val"] = st.best_val;
  j["best_epoch"] = st.best_epoch;
  j["train_loss"] = st.train_loss;
  j["val_metric"] = st.val_metric;
  std::ofstream f(dir + "/state.json");
  if (!f) throw std::runtime_error("cannot write " + dir + "/state.json");
  f << j.dump(2) << "\n";
}

TrainState load_train_state(const std::string& dir) {
  std::ifstream f(dir + "/state.json");
  if (!f) throw std::runtime_error("cannot read " + dir + "/state.json");
  json j;
  f >> j;
  TrainState st;
  st.next_epoch = j.at("next_epoch").get<int>();
  st.best_val = j.at("best_val").get<double>();
  st.best_epoch = j.at("best_epoch").get<int>();
  st.train_loss = j.at("train_loss").get<std::vector<double>>();
  st.val_metric = j.at("val_metric").get<std::vector<double>>();
  return st;
}

void write_log(const std::string& dir, const TrainState& st) {
  std::ofstream f(dir + "/train_log.csv");
  if (!f) throw std::runtime_error("cannot write " + dir + "/train_log.csv");
  f << "epoch,train_loss,val_rmse_d\n";
  for (size_t e = 0; e < st.train_loss.size(); ++e)
    f << e << "," << st.train_loss[e] << "," << st.val_metric[e] << "\n";
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
    std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
}

double annealed(double target, double frac, int64_t step, int64_t total) {
  const int64_t ramp = std::max<int64_t>(1, static_cast<int64_t>(frac * total));
  return target * std::min<double>(1.0, static_cast<double>(step) / ramp);
}

void parallel_for(int n, int threads, const std::function<void(int)>& body) {
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += threads) body(i);
    });
  for (auto& th : pool) th.join();
}

// Reduce per-sample gradient maps in sample order; the result does not depend
// on how the samples were scheduled across threads.
void reduce_grads(std::vector<ad::GradMap>& slots, int count,
                  ad::GradMap& grads) {
  for (int b = 0; b < count; ++b)
    for (auto& [name, g] : slots[b]) {
      auto it = grads.find(name);
      if (it == grads.end())
        grads.emplace(name, g);
      else
        it->second += g;
    }
  for (auto& [name, g] : grads) g /= static_cast<double>(count);
}

}  // namespace

TrainResult train_past(const RunConfig& cfg, const std::string& data_dir,
                       const std::string& out_dir, uint64_t seed, bool resume,
                       int epoch_limit, int threads) {
  const StaticDataset ds = load_static_dataset(data_dir);
  const ArrayGeometry geom = build_geometry(cfg);
  const ChannelConfig ch = build_channel(cfg);
  const auto alloc = comb_allocate(ch.subcarriers, geom.subarrays(),
                                   ch.subcarrier_spacing());
  const PastConfig pcfg = build_past_config(cfg);
  const PastModel model(pcfg, geom, alloc);

  std::vector<FrameFeatures> feats(ds.frames.size());
  parallel_for(static_cast<int>(ds.frames.size()), threads, [&](int i) {
    feats[i] = tokenize_frame(ds.frames[i], alloc, ch, pcfg.tone_groups);
  });

  const SplitIndices split = split_80_10_10(static_cast<int>(feats.size()));
  const int batch = std::max(1, cfg.training.past_batch);
  const int steps_per_epoch =
      std::max<int>(1, static_cast<int>(split.train.size()) / batch);
  const int epochs = cfg.training.past_epochs;
  const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * epochs;

  ad::LrSchedule sched;
  sched.peak = cfg.training.past_lr_peak;
  sched.floor = cfg.training.lr_floor;
  sched.warmup_steps =
      static_cast<int64_t>(cfg.training.warmup_frac * total_steps);
  sched.total_steps = total_steps;
  ad::AdamWConfig opt;
  opt.weight_decay = cfg.training.weight_decay;
  opt.clip_norm = cfg.training.clip_norm;

  std::filesystem::create_directories(out_dir + "/best");
  std::filesystem::create_directories(out_dir + "/last");

  ad::ParamStore store;
  TrainState st;
  if (resume) {
    store = ad::load_checkpoint(out_dir + "/last");
    st = load_train_state(out_dir);
  } else {
    Rng irng = Rng(seed).split("past-init");
    model.init_params(store, irng);
    // Seed the descriptor conditioning from train-split statistics so the
    // large constant offsets of the log features enter the encoder centered
    // and on a unit scale.
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(kTokenDim);
    Eigen::RowVectorXd sq = Eigen::RowVectorXd::Zero(kTokenDim);
    long count = 0;
    for (int i : split.train)
      for (const auto& row : feats[i].tokens)
        for (const auto& tok : row) {
          for (int c = 0; c < kTokenDim; ++c) {
            mean(c) += tok[c];
            sq(c) += tok[c] * tok[c];
          }
          ++count;
        }
    if (count > 1) {
      mean /= static_cast<double>(count);
      Eigen::RowVectorXd gain(kTokenDim);
      for (int c = 0; c < kTokenDim; ++c) {
        const double var = sq(c) / count - mean(c) * mean(c);
        gain(c) = 1.0 / std::max(std::sqrt(std::max(var, 0.0)), 1e-3);
      }
      store.params.at("past.feat_shift") = mean;
      store.params.at("past.feat_gain") = gain;
    }
  }

  const auto validate = [&]() {
    std::vector<Vec3> est, truth;
    for (int i : split.val) {
      est.push_back(model.evidence(store, feats[i]).p_hat);
      truth.push_back(ds.truth[i].p);
    }
    return eval_rmse(est, truth, geom).dist_m;
  };

  std::vector<int> order(split.train.begin(), split.train.end());
  const int stop = epoch_limit >= 0 ? std::min(epoch_limit, epochs) : epochs;
  for (int epoch = st.next_epoch; epoch < stop; ++epoch) {
    Rng erng = Rng(seed).split("past-epoch").split(epoch);
    order.assign(split.train.begin(), split.train.end());
    shuffle_indices(order, erng);

    double epoch_loss = 0.0;
    std::vector<ad::GradMap> slots(batch);
    std::vector<double> lvals(batch);
    for (int step = 0; step < steps_per_epoch; ++step) {
      const double lam = annealed(pcfg.lambda_phy, pcfg.anneal_frac,
                                  store.step, total_steps);
      parallel_for(batch, threads, [&](int b) {
        const int i = order[step * batch + b];
        const std::vector<const FrameFeatures*> fb = {&feats[i]};
        const std::vector<Vec3> tb = {ds.truth[i].p};
        ad::Tape tape;
        ad::Var loss = model.loss(tape, store, fb, tb, lam);
        lvals[b] = tape.value(loss)(0, 0);
        tape.backward(loss);
        slots[b].clear();
        tape.param_grads(slots[b]);
      });
      double lv = 0.0;
      for (int b = 0; b < batch; ++b) lv += lvals[b];
      lv /= batch;
      if (!std::isfinite(lv))
        throw std::runtime_error(
            "train_past: non-finite loss at epoch " + std::to_string(epoch) +
            " step " + std::to_string(step));
      ad::GradMap grads;
      reduce_grads(slots, batch, grads);
      ad::optimizer_step(store, grads, sched.lr(store.step), opt);
      epoch_loss += lv;
    }
    epoch_loss /= steps_per_epoch;

    const double val = validate();
    st.train_loss.push_back(epoch_loss);
    st.val_metric.push_back(val);
    if (val < st.best_val) {
      st.best_val = val;
      st.best_epoch = epoch;
      ad::save_checkpoint(store, out_dir + "/best");
    }
    st.next_epoch = epoch + 1;
    ad::save_checkpoint(store, out_dir + "/last");
    save_train_state(out_dir, st);
    write_log(out_dir, st);
  }

  TrainResult res;
  res.best_dir = out_dir + "/best";
  res.last_dir = out_dir + "/last";
  res.best_val = st.best_val;
  res.best_epoch = st.best_epoch;
  res.train_loss = st.train_loss;
  return res;
}

TrainResult train_tt(const RunConfig& cfg, const std::string& data_dir,
                     const std::string& past_dir, const std::string& out_dir,
                     uint64_t seed, bool resume, int epoch_limit, int threads) {
  const TrajectoryDataset ds = load_trajectory_dataset(data_dir);
  const ArrayGeometry geom = build_geometry(cfg);
  const ChannelConfig ch = build_channel(cfg);
  const auto alloc = comb_allocate(ch.subcarriers, geom.subarrays(),
                                   ch.subcarrier_spacing());
  const PastConfig pcfg = build_past_config(cfg);
  const PastModel past(pcfg, geom, alloc);
  ad::ParamStore past_store = ad::load_checkpoint(past_dir);

  const TtConfig tcfg = build_tt_config(cfg);
  const TtModel model(tcfg, pcfg, geom, cfg.geometry.carrier_hz,
                      cfg.probing.t0_s);

  // Spatial evidence from the frozen first stage, computed once.
  std::vector<std::vector<FrameEvidence>> evidence(ds.frames.size());
  parallel_for(static_cast<int>(ds.frames.size()), threads, [&](int i) {
    for (size_t q = 0; q < ds.frames[i].size(); ++q) {
      FrameEvidence ev;
      ev.q = static_cast<int>(q);
      ev.packet = past.evidence(
          past_store, tokenize_frame(ds.frames[i][q], alloc, ch,
                                     pcfg.tone_groups));
      ev.increments =
          q == 0 ? initial_increments(geom.subarrays())
                 : increment_features(ds.frames[i][q], ds.frames[i][q - 1],
                                      alloc, ch, cfg.probing.t0_s,
                                      tcfg.dtau_max);
      evidence[i].push_back(std::move(ev));
    }
  });

  const SplitIndices split = split_80_10_10(static_cast<int>(evidence.size()));
  const int batch = std::max(1, cfg.training.tt_batch);
  const int steps_per_epoch =
      std::max<int>(1, static_cast<int>(split.train.size()) / batch);
  const int epochs = cfg.training.tt_epochs;
  const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * epochs;

  ad::LrSchedule sched;
  sched.peak = cfg.training.tt_lr_peak;
  sched.floor = cfg.training.lr_floor;
  sched.warmup_steps =
      static_cast<int64_t>(cfg.training.warmup_frac * total_steps);
  sched.total_steps = total_steps;
  ad::AdamWConfig opt;
  opt.weight_decay = cfg.training.weight_decay;
  opt.clip_norm = cfg.training.clip_norm;

  std::filesystem::create_directories(out_dir + "/best");
  std::filesystem::create_directories(out_dir + "/last");

  ad::ParamStore store;
  TrainState st;
  if (resume) {
    store = ad::load_checkpoint(out_dir + "/last");
    st = load_train_state(out_dir);
  } else {
    Rng irng = Rng(seed).split("tt-init");
    model.init_params(store, irng);
  }

  const auto validate = [&]() {
    std::vector<Vec3> est, truth;
    for (int i : split.val) {
      WindowBuffer buf(tcfg.window);
      for (size_t q = 0; q + 1 < evidence[i].size(); ++q) {
        const TtState s = model.step(store, buf, evidence[i][q]);
        est.push_back(s.mu_pre.head<3>());
        truth.push_back(ds.truth[i][q + 1].p);
      }
    }
    return eval_rmse(est, truth, geom).dist_m;
  };

  std::vector<int> order;
  const int stop = epoch_limit >= 0 ? std::min(epoch_limit, epochs) : epochs;
  for (int epoch = st.next_epoch; epoch < stop; ++epoch) {
    Rng erng = Rng(seed).split("tt-epoch").split(epoch);
    order.assign(split.train.begin(), split.train.end());
    shuffle_indices(order, erng);

    double epoch_loss = 0.0;
    std::vector<ad::GradMap> slots(batch);
    std::vector<double> lvals(batch);
    for (int step = 0; step < steps_per_epoch; ++step) {
      const double lam_phy = annealed(tcfg.lambda_phy, tcfg.anneal_frac,
                                      store.step, total_steps);
      parallel_for(batch, threads, [&](int b) {
        const int i = order[step * batch + b];
        const std::vector<KinematicState>& truth = ds.truth[i];
        ad::Tape tape;
        ad::Var loss = model.loss(tape, store, evidence[i], truth,
                                  tcfg.lambda_pre, lam_phy);
        lvals[b] = tape.value(loss)(0, 0);
        tape.backward(loss);
        slots[b].clear();
        tape.param_grads(slots[b]);
      });
      double batch_loss = 0.0;
      for (int b = 0; b < batch; ++b) batch_loss += lvals[b];
      batch_loss /= batch;
      if (!std::isfinite(batch_loss))
        throw std::runtime_error(
            "train_tt: non-finite loss at epoch " + std::to_string(epoch) +
            " step " + std::to_string(step));
      ad::GradMap grads;
      reduce_grads(slots, batch, grads);
      ad::optimizer_step(store, grads, sched.lr(store.step), opt);
      epoch_loss += batch_loss;
    }
    epoch_loss /= steps_per_epoch;

    const double val = validate();
    st.train_loss.push_back(epoch_loss);
    st.val_metric.push_back(val);
    if (val < st.best_val) {
      st.best_val = val;
      st.best_epoch = epoch;
      ad::save_checkpoint(store, out_dir + "/best");
    }
    st.next_epoch = epoch + 1;
    ad::save_checkpoint(store, out_dir + "/last");
    save_train_state(out_dir, st);
    write_log(out_dir, st);
  }

  TrainResult res;
  res.best_dir = out_dir + "/best";
  res.last_dir = out_dir + "/last";
  res.best_val = st.best_val;
  res.best_epoch = st.best_epoch;
  res.train_loss = st.train_loss;
  return res;
}

}  // namespace nft
