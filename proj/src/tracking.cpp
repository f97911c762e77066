#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "nft/harness.hpp"
#include "nft/tokenizer.hpp"

namespace nft {

namespace {

using nlohmann::json;

struct FrameRecord {
  int traj = 0;
  int q = 0;
  Vec3 p_true, p_fil, p_pre;
  Vec3 p_next = Vec3::Zero();  // truth the prediction refers to
  bool has_next = false;
  double se_ideal = -1.0, se_pred = -1.0, se_ff = -1.0;  // -1: not evaluated
};

struct CellSetting {
  double snr_db = 0.0;
  double alpha = 0.0;
  double accel_psd = 0.0;
};

struct Rollout {
  std::vector<FrameRecord> records;
};

Rollout roll_trajectory(const RunConfig& cfg, const CellSetting& cell,
                        const ArrayGeometry& geom, const ChannelConfig& ch,
                        const CombAllocation& alloc, const MatXcd& codebook,
                        const PastModel& past, ad::ParamStore& past_store,
                        const TtModel& tt, ad::ParamStore& tt_store,
                        TrackerKind tracker, const StatePrior& prior,
                        Rng rng, int traj_index) {
  TrajectoryConfig tcfg;
  tcfg.frames = cfg.probing.frames;
  tcfg.t0_s = cfg.probing.t0_s;
  tcfg.accel_psd = cell.accel_psd;
  tcfg.snr_db = cell.snr_db;
  tcfg.bad_prob = cell.alpha;
  tcfg.range_min = cfg.probing.range_min;
  tcfg.range_max = cfg.probing.range_max;
  tcfg.speed_min = cfg.probing.speed_min;
  tcfg.speed_max = cfg.probing.speed_max;

  Rng init = rng.split("init");
  Rng env = rng.split("env");
  Vec3 u;
  do {
    const double az = init.uniform(0.0, 2.0 * M_PI);
    const double el = std::asin(init.uniform(-1.0, 1.0));
    u = direction_from_angles({az, el});
  } while (u.y() < 0.34 || std::abs(u.z()) > 0.94);
  const double range = init.uniform(tcfg.range_min, tcfg.range_max);
  KinematicState state;
  state.p = geom.subarray_ref[0] + range * u;
  const double speed = init.uniform(tcfg.speed_min, tcfg.speed_max);
  const double vaz = init.uniform(0.0, 2.0 * M_PI);
  const double vel = std::asin(init.uniform(-1.0, 1.0));
  state.v = speed * direction_from_angles({vaz, vel});

  const double los_phase = env.uniform(0.0, 2.0 * M_PI);
  const auto scatterers = sample_scatterers(state.p, geom, ch, env);
  DopplerLedger ledger = make_ledger(geom.subarrays());
  ledger.t0_s = tcfg.t0_s;

  WindowBuffer buffer(tt.config().window);
  EkfBelief belief;
  PilotFrame prev_frame;
  Vec3 p_beam = state.p;  // first frame probes from the true initial position

  Rollout out;
  Rng frames = rng.split("frames");
  for (int q = 0; q < tcfg.frames; ++q) {
    Rng frng = frames.split(static_cast<uint64_t>(q));
    const bool bad = frng.uniform() < tcfg.bad_prob;
    const auto paths = make_paths(state.p, scatterers, geom, ch, los_phase);
    const auto setup = make_probing_setup(p_beam, codebook, geom);
    PilotFrame frame = observe_frame(state, paths, setup, alloc, ledger, geom,
                                     ch, tcfg.snr_db, bad, frng);

    const FrameFeatures feats =
        tokenize_frame(frame, alloc, ch, past.config().tone_groups);
    FrameEvidence ev;
    ev.q = q;
    ev.packet = past.evidence(past_store, feats);
    ev.increments = q == 0 ? initial_increments(geom.subarrays())
                           : increment_features(frame, prev_frame, alloc, ch,
                                                tcfg.t0_s,
                                                tt.config().dtau_max);
    prev_frame = frame;

    TtState st;
    switch (tracker) {
      case TrackerKind::Tt:
        st = tt.step(tt_store, buffer, ev);
        break;
      case TrackerKind::Ekf: {
        const double ps2 =
            past.config().pos_scale * past.config().pos_scale;
        if (q == 0) {
          belief = ekf_init(ev.packet.p_hat,
                            measurement_variance(ev.packet.r_hat, kFeatureEps,
                                                 -6.0, 6.0, ps2));
          st.mu_fil = belief.mean;
          st.mu_pre = prior.f * belief.mean;
        } else {
          st = ekf_track(belief, ev.packet, prior, ps2);
        }
        break;
      }
      case TrackerKind::Hold:
        st = hold_track(ev.packet,
                        past.config().pos_scale * past.config().pos_scale);
        break;
    }

    FrameRecord rec;
    rec.traj = traj_index;
    rec.q = q;
    rec.p_true = state.p;
    rec.p_fil = st.mu_fil.head<3>();
    rec.p_pre = st.mu_pre.head<3>();

    const KinematicState next =
        propagate_state(state, tcfg.t0_s, tcfg.accel_psd, frng);
    if (q + 1 < tcfg.frames) {
      rec.has_next = true;
      rec.p_next = next.p;
      const auto [d1, u1] = subarray_range_dir(geom, next.p, 0);
      if (d1 <= cfg.eval.se_max_range) {
        const auto paths_next =
            make_paths(next.p, scatterers, geom, ch, los_phase);
        const double noise = se_noise_power(d1, cfg.eval.se_snr_db, geom, ch);
        rec.se_ideal =
            spectral_efficiency(next.p, true, paths_next, geom, ch, noise);
        rec.se_pred =
            spectral_efficiency(rec.p_pre, true, paths_next, geom, ch, noise);
        rec.se_ff =
            spectral_efficiency(rec.p_pre, false, paths_next, geom, ch, noise);
      }
    }
    out.records.push_back(rec);

    p_beam = rec.p_pre;
    state = next;
  }
  return out;
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

std::string tracker_name(TrackerKind k) {
  switch (k) {
    case TrackerKind::Tt: return "tt";
    case TrackerKind::Ekf: return "ekf";
    case TrackerKind::Hold: return "hold";
  }
  return "?";
}

}  // namespace

std::vector<CellMetrics> track_eval(const RunConfig& cfg,
                                    const std::string& past_dir,
                                    const std::string& tt_dir,
                                    TrackerKind tracker,
                                    const std::string& out_dir, int threads) {
  const ArrayGeometry geom = build_geometry(cfg);
  const ChannelConfig ch = build_channel(cfg);
  const auto alloc = comb_allocate(ch.subcarriers, geom.subarrays(),
                                   ch.subcarrier_spacing());
  const MatXcd codebook = make_dft_codebook(geom);
  const PastConfig pcfg = build_past_config(cfg);
  const PastModel past(pcfg, geom, alloc);
  ad::ParamStore past_store = ad::load_checkpoint(past_dir);
  const TtConfig tcfg = build_tt_config(cfg);
  const TtModel tt(tcfg, pcfg, geom, cfg.geometry.carrier_hz,
                   cfg.probing.t0_s);
  ad::ParamStore tt_store;
  if (tracker == TrackerKind::Tt) tt_store = ad::load_checkpoint(tt_dir);

  std::vector<CellSetting> cells;
  for (double snr : cfg.eval.snr_db)
    for (double alpha : cfg.eval.alpha)
      for (double qa : cfg.eval.accel_psd) cells.push_back({snr, alpha, qa});

  std::filesystem::create_directories(out_dir);
  std::ofstream frames_csv(out_dir + "/frames.csv");
  if (!frames_csv)
    throw std::runtime_error("cannot write " + out_dir + "/frames.csv");
  frames_csv << "tracker,snr_db,alpha,accel_psd,traj,frame,"
                "true_x,true_y,true_z,fil_x,fil_y,fil_z,pre_x,pre_y,pre_z,"
                "next_x,next_y,next_z,se_ideal,se_pred,se_ff\n";
  frames_csv.precision(17);

  std::vector<CellMetrics> out;
  const Rng base = Rng(cfg.seed).split("track-eval");
  for (size_t c = 0; c < cells.size(); ++c) {
    const CellSetting& cell = cells[c];
    const StatePrior prior = make_state_prior(cfg.probing.t0_s,
                                              cell.accel_psd);
    const int n = cfg.eval.trajectories;
    std::vector<Rollout> rolls(n);
    const Rng cell_rng = base.split(static_cast<uint64_t>(c));
    parallel_for(n, threads, [&](int i) {
      // Parameter stores are read-only during evaluation; copies keep the
      // workers independent.
      ad::ParamStore ps = past_store;
      ad::ParamStore ts = tt_store;
      rolls[i] = roll_trajectory(cfg, cell, geom, ch, alloc, codebook, past,
                                 ps, tt, ts, tracker, prior,
                                 cell_rng.split(static_cast<uint64_t>(i)), i);
    });

    std::vector<Vec3> fil_est, fil_truth, pre_est, pre_truth;
    double se_i = 0.0, se_p = 0.0, se_f = 0.0;
    long se_n = 0, se_ok = 0, total = 0;
    for (const auto& roll : rolls) {
      for (const auto& r : roll.records) {
        fil_est.push_back(r.p_fil);
        fil_truth.push_back(r.p_true);
        if (r.has_next) {
          pre_est.push_back(r.p_pre);
          pre_truth.push_back(r.p_next);
        }
        if (r.se_ideal >= 0.0) {
          se_i += r.se_ideal;
          se_p += r.se_pred;
          se_f += r.se_ff;
          ++se_n;
          if (r.se_ideal >= r.se_pred && r.se_pred >= r.se_ff) ++se_ok;
        }
        ++total;
        frames_csv << tracker_name(tracker) << "," << cell.snr_db << ","
                   << cell.alpha << "," << cell.accel_psd << "," << r.traj
                   << "," << r.q << "," << r.p_true.x() << "," << r.p_true.y()
                   << "," << r.p_true.z() << "," << r.p_fil.x() << ","
                   << r.p_fil.y() << "," << r.p_fil.z() << "," << r.p_pre.x()
                   << "," << r.p_pre.y() << "," << r.p_pre.z() << ","
                   << r.p_next.x() << "," << r.p_next.y() << ","
                   << r.p_next.z() << "," << r.se_ideal << "," << r.se_pred
                   << "," << r.se_ff << "\n";
      }
    }

    CellMetrics m;
    m.snr_db = cell.snr_db;
    m.alpha = cell.alpha;
    m.accel_psd = cell.accel_psd;
    m.filtering = eval_rmse(fil_est, fil_truth, geom);
    m.prediction = eval_rmse(pre_est, pre_truth, geom);
    if (se_n > 0) {
      m.se_ideal = se_i / se_n;
      m.se_pred = se_p / se_n;
      m.se_ff = se_f / se_n;
      m.se_order_frac = static_cast<double>(se_ok) / se_n;
    }
    m.se_frames = se_n;
    m.frames = total;
    out.push_back(m);
  }

  std::ofstream curves(out_dir + "/curves.csv");
  if (!curves)
    throw std::runtime_error("cannot write " + out_dir + "/curves.csv");
  curves << "tracker,snr_db,alpha,accel_psd,fil_rmse_d,fil_rmse_ang,"
            "pre_rmse_d,pre_rmse_ang,se_ideal,se_pred,se_ff,se_order_frac,"
            "se_frames,frames\n";
  curves.precision(17);
  json jcells = json::array();
  for (const auto& m : out) {
    curves << tracker_name(tracker) << "," << m.snr_db << "," << m.alpha << ","
           << m.accel_psd << "," << m.filtering.dist_m << ","
           << m.filtering.angle_deg << "," << m.prediction.dist_m << ","
           << m.prediction.angle_deg << "," << m.se_ideal << "," << m.se_pred
           << "," << m.se_ff << "," << m.se_order_frac << "," << m.se_frames
           << "," << m.frames << "\n";
    jcells.push_back({{"snr_db", m.snr_db},
                      {"alpha", m.alpha},
                      {"accel_psd", m.accel_psd},
                      {"fil_rmse_d", m.filtering.dist_m},
                      {"fil_rmse_ang", m.filtering.angle_deg},
                      {"pre_rmse_d", m.prediction.dist_m},
                      {"pre_rmse_ang", m.prediction.angle_deg},
                      {"se_ideal", m.se_ideal},
                      {"se_pred", m.se_pred},
                      {"se_ff", m.se_ff},
                      {"se_order_frac", m.se_order_frac},
                      {"se_frames", m.se_frames},
                      {"frames", m.frames}});
  }

  json metrics;
  metrics["tracker"] = tracker_name(tracker);
  metrics["seed"] = cfg.seed;
  metrics["cells"] = jcells;
  metrics["config"] = json::parse(run_config_text(cfg));
  std::ofstream mj(out_dir + "/metrics.json");
  if (!mj) throw std::runtime_error("cannot write " + out_dir + "/metrics.json");
  mj << metrics.dump(2) << "\n";

  return out;
}

}  // namespace nft
