#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "nft/harness.hpp"
#include "nft/tokenizer.hpp"

namespace {

nft::RunConfig resolve_config(const std::string& config_path, uint64_t seed,
                              bool seed_set) {
  nft::RunConfig cfg;
  if (!config_path.empty()) cfg = nft::load_run_config(config_path);
  if (seed_set) cfg.seed = seed;
  return cfg;
}

void apply_grid(nft::RunConfig& cfg, const std::vector<double>& snr,
                const std::vector<double>& alpha,
                const std::vector<double>& qa) {
  if (!snr.empty()) cfg.eval.snr_db = snr;
  if (!alpha.empty()) cfg.eval.alpha = alpha;
  if (!qa.empty()) cfg.eval.accel_psd = qa;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"near-field beam tracking lab"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, past_dir, tt_dir, tracker = "tt";
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  bool resume = false;
  std::vector<double> snr, alpha, qa;

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run configuration file");
    cmd->add_option_function<uint64_t>(
        "--seed",
        [&](uint64_t s) {
          seed = s;
          seed_set = true;
        },
        "override the config seed");
    cmd->add_option("--out", out_dir, "output directory")->required();
    cmd->add_option("--threads", threads, "worker threads (1 = bit-exact)");
  };

  auto* gen = app.add_subcommand("gen", "generate a dataset");
  auto* gen_static = gen->add_subcommand("static", "static localization set");
  auto* gen_traj = gen->add_subcommand("traj", "tracking trajectory set");
  gen->require_subcommand(1);
  add_common(gen_static);
  add_common(gen_traj);

  auto* train = app.add_subcommand("train", "train a model stage");
  auto* train_past = train->add_subcommand("past", "spatial stage");
  auto* train_tt = train->add_subcommand("tt", "temporal stage");
  train->require_subcommand(1);
  for (CLI::App* cmd : {train_past, train_tt}) {
    add_common(cmd);
    cmd->add_option("--data", data_dir, "dataset directory")->required();
    cmd->add_flag("--resume", resume, "resume from the last checkpoint");
  }
  train_tt->add_option("--past", past_dir, "frozen spatial checkpoint")
      ->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* eval_rmse_cmd = eval->add_subcommand("rmse", "static localization");
  auto* eval_se_cmd = eval->add_subcommand("se", "beam spectral efficiency");
  eval->require_subcommand(1);
  add_common(eval_rmse_cmd);
  eval_rmse_cmd->add_option("--data", data_dir, "static dataset directory")
      ->required();
  eval_rmse_cmd->add_option("--past", past_dir, "spatial checkpoint")
      ->required();
  add_common(eval_se_cmd);
  eval_se_cmd->add_option("--past", past_dir, "spatial checkpoint")
      ->required();
  eval_se_cmd->add_option("--tt", tt_dir, "temporal checkpoint")->required();
  eval_se_cmd->add_option("--snr", snr, "probing SNR grid (dB)");
  eval_se_cmd->add_option("--alpha", alpha, "bad-frame rate grid");
  eval_se_cmd->add_option("--qa", qa, "process-noise grid");

  auto* track = app.add_subcommand("track", "closed-loop tracking evaluation");
  add_common(track);
  track->add_option("--tracker", tracker, "tt | ekf | hold");
  track->add_option("--past", past_dir, "spatial checkpoint")->required();
  track->add_option("--tt", tt_dir, "temporal checkpoint");
  track->add_option("--snr", snr, "probing SNR grid (dB)");
  track->add_option("--alpha", alpha, "bad-frame rate grid");
  track->add_option("--qa", qa, "process-noise grid");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_static->parsed()) {
      nft::gen_static_dataset(resolve_config(config_path, seed, seed_set),
                              out_dir, threads);
    } else if (gen_traj->parsed()) {
      nft::gen_trajectory_dataset(resolve_config(config_path, seed, seed_set),
                                  out_dir, threads);
    } else if (train_past->parsed()) {
      const nft::RunConfig cfg = resolve_config(config_path, seed, seed_set);
      const auto res =
          nft::train_past(cfg, data_dir, out_dir, cfg.seed, resume, -1,
                          threads);
      std::cout << "best val RMSE(D) " << res.best_val << " m at epoch "
                << res.best_epoch << "\n";
    } else if (train_tt->parsed()) {
      const nft::RunConfig cfg = resolve_config(config_path, seed, seed_set);
      const auto res =
          nft::train_tt(cfg, data_dir, past_dir, out_dir, cfg.seed, resume, -1,
                        threads);
      std::cout << "best val RMSE(D) " << res.best_val << " m at epoch "
                << res.best_epoch << "\n";
    } else if (eval_rmse_cmd->parsed()) {
      const nft::RunConfig ignored = resolve_config(config_path, seed, seed_set);
      (void)ignored;
      const nft::StaticDataset ds = nft::load_static_dataset(data_dir);
      const nft::ArrayGeometry geom = nft::build_geometry(ds.cfg);
      const nft::ChannelConfig ch = nft::build_channel(ds.cfg);
      const auto alloc = nft::comb_allocate(
          ch.subcarriers, geom.subarrays(), ch.subcarrier_spacing());
      const nft::PastConfig pcfg = nft::build_past_config(ds.cfg);
      const nft::PastModel model(pcfg, geom, alloc);
      nft::ad::ParamStore store = nft::ad::load_checkpoint(past_dir);
      std::vector<nft::Vec3> est, truth;
      for (size_t i = 0; i < ds.frames.size(); ++i) {
        est.push_back(
            model
                .evidence(store, nft::tokenize_frame(ds.frames[i], alloc, ch,
                                                     pcfg.tone_groups))
                .p_hat);
        truth.push_back(ds.truth[i].p);
      }
      const nft::RmseReport r = nft::eval_rmse(est, truth, geom);
      std::filesystem::create_directories(out_dir);
      std::ofstream f(out_dir + "/metrics.json");
      f.precision(17);
      f << "{\n  \"rmse_d_m\": " << r.dist_m
        << ",\n  \"rmse_angle_deg\": " << r.angle_deg
        << ",\n  \"samples\": " << ds.frames.size() << "\n}\n";
      std::cout << "RMSE(D) " << r.dist_m << " m, RMSE(angle) " << r.angle_deg
                << " deg\n";
    } else if (eval_se_cmd->parsed() || track->parsed()) {
      nft::RunConfig cfg = resolve_config(config_path, seed, seed_set);
      apply_grid(cfg, snr, alpha, qa);
      const nft::TrackerKind kind = eval_se_cmd->parsed()
                                        ? nft::TrackerKind::Tt
                                        : nft::tracker_from_name(tracker);
      if (kind == nft::TrackerKind::Tt && tt_dir.empty())
        throw std::runtime_error("--tt checkpoint required for the tt tracker");
      const auto cells =
          nft::track_eval(cfg, past_dir, tt_dir, kind, out_dir, threads);
      for (const auto& m : cells)
        std::cout << "snr " << m.snr_db << " alpha " << m.alpha << " qa "
                  << m.accel_psd << ": pre RMSE(D) " << m.prediction.dist_m
                  << " m, SE ideal/pred/ff " << m.se_ideal << "/" << m.se_pred
                  << "/" << m.se_ff << " (order ok " << m.se_order_frac
                  << ")\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
