#pragma once

#include <string>
#include <vector>

#include "nft/trackers.hpp"

namespace nft {

// Full experiment description: every section round-trips through the config
// file and is echoed verbatim into output manifests.  Unknown keys in a
// config file are rejected on load.
struct RunConfig {
  uint64_t seed = 1;

  struct Geometry {
    double carrier_hz = 0.3e12;
    int subarrays_x = 4;
    int subarrays_z = 2;
    double subarray_spacing_wl = 64.0;  // wavelengths between references
    int ns_x = 4, ns_z = 4;             // per-subarray BS lattice
    int nr_x = 2, nr_z = 2;             // UE lattice
  } geometry;

  struct Channel {
    double bandwidth_hz = 1e9;
    int subcarriers = 128;
    double k_factor_db = 13.0;
    bool k_factor_infinite = false;
    int nlos_paths = 2;
    double max_excess_delay_s = 30e-9;
    std::string model = "hspm";  // "hspm" | "swm"
    bool random_cpe = true;
  } channel;

  struct Probing {
    int tone_groups = 4;
    double t0_s = 1e-3;
    double snr_db = 15.0;
    double alpha = 0.1;      // bad-frame rate for trajectory data
    double accel_psd = 4.0;  // process-noise spectral density
    int frames = 64;         // per trajectory
    double range_min = 35.0, range_max = 120.0;
    double speed_min = 10.0, speed_max = 30.0;
  } probing;

  struct Dataset {
    int static_samples = 5000;
    int trajectories = 96;
  } dataset;

  struct Model {
    PastConfig past;
    TtConfig tt;
  } model;

  struct Training {
    int past_epochs = 20;
    int past_batch = 64;
    double past_lr_peak = 2e-4;
    int tt_epochs = 10;
    int tt_batch = 2;  // trajectories per optimizer step
    double tt_lr_peak = 1e-4;
    double lr_floor = 1e-6;
    double warmup_frac = 0.05;  // fraction of total steps
    double weight_decay = 1e-2;
    double clip_norm = 1.0;
  } training;

  struct Eval {
    std::vector<double> snr_db = {15.0};
    std::vector<double> alpha = {0.0, 0.1, 0.3};
    std::vector<double> accel_psd = {4.0};
    int trajectories = 16;
    double se_snr_db = 10.0;     // post-beamforming SNR of the matched beam
    double se_max_range = 60.0;  // ordering statistics restricted to <= this
  } eval;
};

RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& text);
std::string run_config_text(const RunConfig& cfg);  // round-trips exactly

ArrayGeometry build_geometry(const RunConfig& cfg);
ChannelConfig build_channel(const RunConfig& cfg);
PastConfig build_past_config(const RunConfig& cfg);
TtConfig build_tt_config(const RunConfig& cfg);

// Sample-count split by the floor rule: val and test get floor(n/10) each,
// the remainder goes to train.
struct SplitIndices {
  std::vector<int> train, val, test;
};
SplitIndices split_80_10_10(int n);

// ---------------------------------------------------------------------------
// Datasets: directory of manifest.json + frames.bin (little-endian float32,
// interleaved re/im, tones ordered subarray-ascending then tone-ascending)
// + truth.bin (little-endian float64, [p v] per frame).

void gen_static_dataset(const RunConfig& cfg, const std::string& dir,
                        int threads = 1);
void gen_trajectory_dataset(const RunConfig& cfg, const std::string& dir,
                            int threads = 1);

struct StaticDataset {
  RunConfig cfg;
  std::vector<PilotFrame> frames;
  std::vector<KinematicState> truth;
};
struct TrajectoryDataset {
  RunConfig cfg;
  std::vector<std::vector<PilotFrame>> frames;
  std::vector<std::vector<KinematicState>> truth;
};
StaticDataset load_static_dataset(const std::string& dir);
TrajectoryDataset load_trajectory_dataset(const std::string& dir);

// ---------------------------------------------------------------------------
// Metrics.

// Subarray-averaged range and bearing errors between aligned estimate/truth
// lists; the bearing error is reported in degrees.
struct RmseReport {
  double dist_m = 0.0;
  double angle_deg = 0.0;
};
RmseReport eval_rmse(const std::vector<Vec3>& estimates,
                     const std::vector<Vec3>& truths,
                     const ArrayGeometry& geom);

// Subcarrier-averaged single-stream rate of a beam steered at p_beam against
// the channel realized by `paths`.  Intra-subarray weights steer at the local
// departure angles; inter-subarray phases co-phase the spherical range terms
// when use_distance is set and fall back to a plane-wave approximation
// otherwise.  The combiner is matched to the center-subcarrier response.
double spectral_efficiency(const Vec3& p_beam, bool use_distance,
                           const std::vector<PropagationPath>& paths,
                           const ArrayGeometry& geom, const ChannelConfig& cfg,
                           double noise_power);

// Noise power that makes the matched beam at range d1 reach target_snr_db.
double se_noise_power(double d1, double target_snr_db,
                      const ArrayGeometry& geom, const ChannelConfig& cfg);

// ---------------------------------------------------------------------------
// Training.

struct TrainResult {
  std::string best_dir;   // best-validation checkpoint
  std::string last_dir;   // resumable state
  double best_val = 0.0;  // validation range RMSE (m)
  int best_epoch = -1;
  std::vector<double> train_loss;  // per finished epoch
};

// epoch_limit >= 0 stops after that many total epochs (simulating an
// interruption) without changing the schedule derived from the config; a
// later resume continues bit-exactly.
// Batch gradients are accumulated from one tape per sample and reduced in
// sample order, so the result is bit-identical for every thread count.
TrainResult train_past(const RunConfig& cfg, const std::string& data_dir,
                       const std::string& out_dir, uint64_t seed,
                       bool resume = false, int epoch_limit = -1,
                       int threads = 1);
TrainResult train_tt(const RunConfig& cfg, const std::string& data_dir,
                     const std::string& past_dir, const std::string& out_dir,
                     uint64_t seed, bool resume = false, int epoch_limit = -1,
                     int threads = 1);

// ---------------------------------------------------------------------------
// Closed-loop tracking evaluation.

enum class TrackerKind { Tt, Ekf, Hold };
TrackerKind tracker_from_name(const std::string& name);

struct CellMetrics {
  double snr_db = 0.0;
  double alpha = 0.0;
  double accel_psd = 0.0;
  RmseReport filtering;
  RmseReport prediction;
  double se_ideal = 0.0;  // means over frames with range <= se_max_range
  double se_pred = 0.0;
  double se_ff = 0.0;
  double se_order_frac = 0.0;  // fraction with ideal >= pred >= far-field
  long se_frames = 0;
  long frames = 0;
};

// Rolls closed-loop trajectories (each frame's probing beam aimed by the
// previous prediction) over the snr x alpha x accel_psd grid and writes
// metrics.json, frames.csv, and curves.csv into out_dir.
std::vector<CellMetrics> track_eval(const RunConfig& cfg,
                                    const std::string& past_dir,
                                    const std::string& tt_dir,
                                    TrackerKind tracker,
                                    const std::string& out_dir,
                                    int threads = 1);

}  // namespace nft
