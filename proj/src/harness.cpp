#include "nft/harness.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "nft/tokenizer.hpp"

namespace nft {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& section) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const auto& a : allowed) ok = ok || key == a;
    if (!ok)
      throw std::runtime_error("config: unknown key \"" + key +
                               "\" in section " + section);
  }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

void parse_geometry(const json& j, RunConfig::Geometry& g) {
  check_keys(j,
             {"carrier_hz", "subarrays_x", "subarrays_z",
              "subarray_spacing_wl", "ns_x", "ns_z", "nr_x", "nr_z"},
             "geometry");
  maybe(j, "carrier_hz", g.carrier_hz);
  maybe(j, "subarrays_x", g.subarrays_x);
  maybe(j, "subarrays_z", g.subarrays_z);
  maybe(j, "subarray_spacing_wl", g.subarray_spacing_wl);
  maybe(j, "ns_x", g.ns_x);
  maybe(j, "ns_z", g.ns_z);
  maybe(j, "nr_x", g.nr_x);
  maybe(j, "nr_z", g.nr_z);
}

void parse_channel(const json& j, RunConfig::Channel& c) {
  check_keys(j,
             {"bandwidth_hz", "subcarriers", "k_factor_db",
              "k_factor_infinite", "nlos_paths", "max_excess_delay_s",
              "model", "random_cpe"},
             "channel");
  maybe(j, "bandwidth_hz", c.bandwidth_hz);
  maybe(j, "subcarriers", c.subcarriers);
  maybe(j, "k_factor_db", c.k_factor_db);
  maybe(j, "k_factor_infinite", c.k_factor_infinite);
  maybe(j, "nlos_paths", c.nlos_paths);
  maybe(j, "max_excess_delay_s", c.max_excess_delay_s);
  maybe(j, "model", c.model);
  maybe(j, "random_cpe", c.random_cpe);
  if (c.model != "hspm" && c.model != "swm")
    throw std::runtime_error("config: channel.model must be hspm or swm");
}

void parse_probing(const json& j, RunConfig::Probing& p) {
  check_keys(j,
             {"tone_groups", "t0_s", "snr_db", "alpha", "accel_psd", "frames",
              "range_min", "range_max", "speed_min", "speed_max"},
             "probing");
  maybe(j, "tone_groups", p.tone_groups);
  maybe(j, "t0_s", p.t0_s);
  maybe(j, "snr_db", p.snr_db);
  maybe(j, "alpha", p.alpha);
  maybe(j, "accel_psd", p.accel_psd);
  maybe(j, "frames", p.frames);
  maybe(j, "range_min", p.range_min);
  maybe(j, "range_max", p.range_max);
  maybe(j, "speed_min", p.speed_min);
  maybe(j, "speed_max", p.speed_max);
}

void parse_dataset(const json& j, RunConfig::Dataset& d) {
  check_keys(j, {"static_samples", "trajectories"}, "dataset");
  maybe(j, "static_samples", d.static_samples);
  maybe(j, "trajectories", d.trajectories);
}

void parse_past(const json& j, PastConfig& p) {
  check_keys(j,
             {"d_model", "intra_layers", "inter_layers", "heads", "geo_hidden",
              "lambda_phy", "anneal_frac", "pos_scale"},
             "model.past");
  maybe(j, "d_model", p.d_model);
  maybe(j, "intra_layers", p.intra_layers);
  maybe(j, "inter_layers", p.inter_layers);
  maybe(j, "heads", p.heads);
  maybe(j, "geo_hidden", p.geo_hidden);
  maybe(j, "lambda_phy", p.lambda_phy);
  maybe(j, "anneal_frac", p.anneal_frac);
  maybe(j, "pos_scale", p.pos_scale);
}

void parse_tt(const json& j, TtConfig& t) {
  check_keys(j,
             {"d_model", "layers", "heads", "window", "delta_t", "lambda_pre",
              "lambda_phy", "anneal_frac", "pos_scale", "vel_scale"},
             "model.tt");
  maybe(j, "d_model", t.d_model);
  maybe(j, "layers", t.layers);
  maybe(j, "heads", t.heads);
  maybe(j, "window", t.window);
  maybe(j, "delta_t", t.delta_t);
  maybe(j, "lambda_pre", t.lambda_pre);
  maybe(j, "lambda_phy", t.lambda_phy);
  maybe(j, "anneal_frac", t.anneal_frac);
  maybe(j, "pos_scale", t.pos_scale);
  maybe(j, "vel_scale", t.vel_scale);
}

void parse_training(const json& j, RunConfig::Training& t) {
  check_keys(j,
             {"past_epochs", "past_batch", "past_lr_peak", "tt_epochs",
              "tt_batch", "tt_lr_peak", "lr_floor", "warmup_frac",
              "weight_decay", "clip_norm"},
             "training");
  maybe(j, "past_epochs", t.past_epochs);
  maybe(j, "past_batch", t.past_batch);
  maybe(j, "past_lr_peak", t.past_lr_peak);
  maybe(j, "tt_epochs", t.tt_epochs);
  maybe(j, "tt_batch", t.tt_batch);
  maybe(j, "tt_lr_peak", t.tt_lr_peak);
  maybe(j, "lr_floor", t.lr_floor);
  maybe(j, "warmup_frac", t.warmup_frac);
  maybe(j, "weight_decay", t.weight_decay);
  maybe(j, "clip_norm", t.clip_norm);
}

void parse_eval(const json& j, RunConfig::Eval& e) {
  check_keys(j,
             {"snr_db", "alpha", "accel_psd", "trajectories", "se_snr_db",
              "se_max_range"},
             "eval");
  maybe(j, "snr_db", e.snr_db);
  maybe(j, "alpha", e.alpha);
  maybe(j, "accel_psd", e.accel_psd);
  maybe(j, "trajectories", e.trajectories);
  maybe(j, "se_snr_db", e.se_snr_db);
  maybe(j, "se_max_range", e.se_max_range);
}

json config_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["geometry"] = {{"carrier_hz", c.geometry.carrier_hz},
                   {"subarrays_x", c.geometry.subarrays_x},
                   {"subarrays_z", c.geometry.subarrays_z},
                   {"subarray_spacing_wl", c.geometry.subarray_spacing_wl},
                   {"ns_x", c.geometry.ns_x},
                   {"ns_z", c.geometry.ns_z},
                   {"nr_x", c.geometry.nr_x},
                   {"nr_z", c.geometry.nr_z}};
  j["channel"] = {{"bandwidth_hz", c.channel.bandwidth_hz},
                  {"subcarriers", c.channel.subcarriers},
                  {"k_factor_db", c.channel.k_factor_db},
                  {"k_factor_infinite", c.channel.k_factor_infinite},
                  {"nlos_paths", c.channel.nlos_paths},
                  {"max_excess_delay_s", c.channel.max_excess_delay_s},
                  {"model", c.channel.model},
                  {"random_cpe", c.channel.random_cpe}};
  j["probing"] = {{"tone_groups", c.probing.tone_groups},
                  {"t0_s", c.probing.t0_s},
                  {"snr_db", c.probing.snr_db},
                  {"alpha", c.probing.alpha},
                  {"accel_psd", c.probing.accel_psd},
                  {"frames", c.probing.frames},
                  {"range_min", c.probing.range_min},
                  {"range_max", c.probing.range_max},
                  {"speed_min", c.probing.speed_min},
                  {"speed_max", c.probing.speed_max}};
  j["dataset"] = {{"static_samples", c.dataset.static_samples},
                  {"trajectories", c.dataset.trajectories}};
  j["model"] = {{"past",
                 {{"d_model", c.model.past.d_model},
                  {"intra_layers", c.model.past.intra_layers},
                  {"inter_layers", c.model.past.inter_layers},
                  {"heads", c.model.past.heads},
                  {"geo_hidden", c.model.past.geo_hidden},
                  {"lambda_phy", c.model.past.lambda_phy},
                  {"anneal_frac", c.model.past.anneal_frac},
                  {"pos_scale", c.model.past.pos_scale}}},
                {"tt",
                 {{"d_model", c.model.tt.d_model},
                  {"layers", c.model.tt.layers},
                  {"heads", c.model.tt.heads},
                  {"window", c.model.tt.window},
                  {"delta_t", c.model.tt.delta_t},
                  {"lambda_pre", c.model.tt.lambda_pre},
                  {"lambda_phy", c.model.tt.lambda_phy},
                  {"anneal_frac", c.model.tt.anneal_frac},
                  {"pos_scale", c.model.tt.pos_scale},
                  {"vel_scale", c.model.tt.vel_scale}}}};
  j["training"] = {{"past_epochs", c.training.past_epochs},
                   {"past_batch", c.training.past_batch},
                   {"past_lr_peak", c.training.past_lr_peak},
                   {"tt_epochs", c.training.tt_epochs},
                   {"tt_batch", c.training.tt_batch},
                   {"tt_lr_peak", c.training.tt_lr_peak},
                   {"lr_floor", c.training.lr_floor},
                   {"warmup_frac", c.training.warmup_frac},
                   {"weight_decay", c.training.weight_decay},
                   {"clip_norm", c.training.clip_norm}};
  j["eval"] = {{"snr_db", c.eval.snr_db},
               {"alpha", c.eval.alpha},
               {"accel_psd", c.eval.accel_psd},
               {"trajectories", c.eval.trajectories},
               {"se_snr_db", c.eval.se_snr_db},
               {"se_max_range", c.eval.se_max_range}};
  return j;
}

RunConfig config_from_json(const json& j) {
  check_keys(j,
             {"seed", "geometry", "channel", "probing", "dataset", "model",
              "training", "eval"},
             "(top level)");
  RunConfig c;
  maybe(j, "seed", c.seed);
  if (j.contains("geometry")) parse_geometry(j.at("geometry"), c.geometry);
  if (j.contains("channel")) parse_channel(j.at("channel"), c.channel);
  if (j.contains("probing")) parse_probing(j.at("probing"), c.probing);
  if (j.contains("dataset")) parse_dataset(j.at("dataset"), c.dataset);
  if (j.contains("model")) {
    check_keys(j.at("model"), {"past", "tt"}, "model");
    if (j.at("model").contains("past"))
      parse_past(j.at("model").at("past"), c.model.past);
    if (j.at("model").contains("tt"))
      parse_tt(j.at("model").at("tt"), c.model.tt);
  }
  if (j.contains("training")) parse_training(j.at("training"), c.training);
  if (j.contains("eval")) parse_eval(j.at("eval"), c.eval);
  return c;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(f),
                     std::istreambuf_iterator<char>());
}

void write_blob(const std::string& path, const void* data, size_t bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!f) throw std::runtime_error("write failed for " + path);
}

std::vector<char> read_blob(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot read " + path);
  const std::streamsize n = f.tellg();
  std::vector<char> out(static_cast<size_t>(n));
  f.seekg(0);
  f.read(out.data(), n);
  if (!f) throw std::runtime_error("read failed for " + path);
  return out;
}

// frames.bin layout for one frame: subarrays ascending, tones ascending
// within each subarray's comb, interleaved re/im float32.
void append_frame(std::vector<float>& out, const PilotFrame& frame) {
  for (const auto& y : frame.y)
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      out.push_back(static_cast<float>(y(i).real()));
      out.push_back(static_cast<float>(y(i).imag()));
    }
}

void append_truth(std::vector<double>& out, const KinematicState& st) {
  for (int a = 0; a < 3; ++a) out.push_back(st.p(a));
  for (int a = 0; a < 3; ++a) out.push_back(st.v(a));
}

PilotFrame frame_from_floats(const float* data, const CombAllocation& alloc,
                             int q, bool bad, double snr_db) {
  PilotFrame f;
  f.q = q;
  f.bad = bad;
  f.snr_db = snr_db;
  size_t at = 0;
  for (const auto& set : alloc.sets) {
    Eigen::VectorXcd y(static_cast<Eigen::Index>(set.size()));
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      y(i) = {static_cast<double>(data[at]), static_cast<double>(data[at + 1])};
      at += 2;
    }
    f.y.push_back(std::move(y));
  }
  return f;
}

KinematicState truth_from_doubles(const double* data) {
  KinematicState st;
  for (int a = 0; a < 3; ++a) st.p(a) = data[a];
  for (int a = 0; a < 3; ++a) st.v(a) = data[3 + a];
  return st;
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

// Forward-cone direction sampling shared with the trajectory initializer.
Vec3 sample_direction(Rng& rng) {
  Vec3 u;
  do {
    const double az = rng.uniform(0.0, 2.0 * M_PI);
    const double el = std::asin(rng.uniform(-1.0, 1.0));
    u = direction_from_angles({az, el});
  } while (u.y() < 0.34 || std::abs(u.z()) > 0.94);
  return u;
}

TrajectoryConfig trajectory_config(const RunConfig& cfg) {
  TrajectoryConfig t;
  t.frames = cfg.probing.frames;
  t.t0_s = cfg.probing.t0_s;
  t.accel_psd = cfg.probing.accel_psd;
  t.snr_db = cfg.probing.snr_db;
  t.bad_prob = cfg.probing.alpha;
  t.range_min = cfg.probing.range_min;
  t.range_max = cfg.probing.range_max;
  t.speed_min = cfg.probing.speed_min;
  t.speed_max = cfg.probing.speed_max;
  return t;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  return config_from_json(json::parse(text));
}

RunConfig load_run_config(const std::string& path) {
  return parse_run_config(read_text(path));
}

std::string run_config_text(const RunConfig& cfg) {
  return config_json(cfg).dump(2) + "\n";
}

ArrayGeometry build_geometry(const RunConfig& cfg) {
  const auto& g = cfg.geometry;
  return ArrayGeometry::make(kSpeedOfLight / g.carrier_hz, g.subarrays_x,
                             g.subarrays_z, g.subarray_spacing_wl, g.ns_x,
                             g.ns_z, g.nr_x, g.nr_z);
}

ChannelConfig build_channel(const RunConfig& cfg) {
  ChannelConfig c;
  c.carrier_hz = cfg.geometry.carrier_hz;
  c.bandwidth_hz = cfg.channel.bandwidth_hz;
  c.subcarriers = cfg.channel.subcarriers;
  c.k_factor_db = cfg.channel.k_factor_db;
  c.k_factor_infinite = cfg.channel.k_factor_infinite;
  c.nlos_paths = cfg.channel.nlos_paths;
  c.max_excess_delay_s = cfg.channel.max_excess_delay_s;
  c.model =
      cfg.channel.model == "swm" ? ChannelModel::Swm : ChannelModel::Hspm;
  c.random_cpe = cfg.channel.random_cpe;
  return c;
}

PastConfig build_past_config(const RunConfig& cfg) {
  PastConfig p = cfg.model.past;
  p.tone_groups = cfg.probing.tone_groups;
  return p;
}

TtConfig build_tt_config(const RunConfig& cfg) {
  TtConfig t = cfg.model.tt;
  t.dtau_max = t.rho_tau / cfg.channel.bandwidth_hz;
  return t;
}

SplitIndices split_80_10_10(int n) {
  const int val = n / 10;
  const int test = n / 10;
  SplitIndices s;
  for (int i = 0; i < n - val - test; ++i) s.train.push_back(i);
  for (int i = n - val - test; i < n - test; ++i) s.val.push_back(i);
  for (int i = n - test; i < n; ++i) s.test.push_back(i);
  return s;
}

void gen_static_dataset(const RunConfig& cfg, const std::string& dir,
                        int threads) {
  const ArrayGeometry geom = build_geometry(cfg);
  const ChannelConfig ch = build_channel(cfg);
  const auto alloc = comb_allocate(ch.subcarriers, geom.subarrays(),
                                   ch.subcarrier_spacing());
  const MatXcd codebook = make_dft_codebook(geom);
  const int n = cfg.dataset.static_samples;

  std::vector<PilotFrame> frames(n);
  std::vector<KinematicState> truth(n);
  const Rng base = Rng(cfg.seed).split("static");
  parallel_for(n, threads, [&](int i) {
    Rng rng = base.split(static_cast<uint64_t>(i));
    Rng init = rng.split("init");
    Rng env = rng.split("env");
    const Vec3 u = sample_direction(init);
    const double range =
        init.uniform(cfg.probing.range_min, cfg.probing.range_max);
    KinematicState st;
    st.p = geom.subarray_ref[0] + range * u;
    const double los_phase = env.uniform(0.0, 2.0 * M_PI);
    const auto scatterers = sample_scatterers(st.p, geom, ch, env);
    const auto paths = make_paths(st.p, scatterers, geom, ch, los_phase);
    const auto setup = make_probing_setup(st.p, codebook, geom);
    DopplerLedger ledger = make_ledger(geom.subarrays());
    ledger.t0_s = cfg.probing.t0_s;
    Rng frng = rng.split("frames").split(0ULL);
    frames[i] = observe_frame(st, paths, setup, alloc, ledger, geom, ch,
                              cfg.probing.snr_db, false, frng);
    truth[i] = st;
  });

  std::filesystem::create_directories(dir);
  std::vector<float> fbuf;
  std::vector<double> tbuf;
  for (int i = 0; i < n; ++i) {
    append_frame(fbuf, frames[i]);
    append_truth(tbuf, truth[i]);
  }
  write_blob(dir + "/frames.bin", fbuf.data(), fbuf.size() * sizeof(float));
  write_blob(dir + "/truth.bin", tbuf.data(), tbuf.size() * sizeof(double));

  json manifest;
  manifest["kind"] = "static";
  manifest["samples"] = n;
  manifest["subarrays"] = geom.subarrays();
  manifest["tones"] = ch.subcarriers;
  manifest["frame_floats"] = 2 * ch.subcarriers;
  manifest["truth_doubles"] = 6;
  manifest["endianness"] = "little";
  manifest["frames_dtype"] = "float32";
  manifest["truth_dtype"] = "float64";
  manifest["tone_order"] = "subarray ascending, tone ascending, re/im";
  manifest["seed"] = cfg.seed;
  manifest["config"] = config_json(cfg);
  write_text(dir + "/manifest.json", manifest.dump(2) + "\n");
}

void gen_trajectory_dataset(const RunConfig& cfg, const std::string& dir,
                            int threads) {
  const ArrayGeometry geom = build_geometry(cfg);
  const ChannelConfig ch = build_channel(cfg);
  const MatXcd codebook = make_dft_codebook(geom);
  const TrajectoryConfig tcfg = trajectory_config(cfg);
  const int n = cfg.dataset.trajectories;

  std::vector<std::vector<TrajectoryStep>> trajs(n);
  const Rng base = Rng(cfg.seed).split("trajectory");
  parallel_for(n, threads, [&](int i) {
    Rng rng = base.split(static_cast<uint64_t>(i));
    trajs[i] = sample_trajectory(tcfg, geom, ch, codebook, rng);
  });

  std::filesystem::create_directories(dir);
  std::vector<float> fbuf;
  std::vector<double> tbuf;
  json bad = json::array();
  for (const auto& traj : trajs) {
    json flags = json::array();
    for (const auto& step : traj) {
      append_frame(fbuf, step.frame);
      append_truth(tbuf, step.state);
      flags.push_back(step.frame.bad ? 1 : 0);
    }
    bad.push_back(flags);
  }
  write_blob(dir + "/frames.bin", fbuf.data(), fbuf.size() * sizeof(float));
  write_blob(dir + "/truth.bin", tbuf.data(), tbuf.size() * sizeof(double));

  json manifest;
  manifest["kind"] = "trajectory";
  manifest["trajectories"] = n;
  manifest["frames_per_trajectory"] = tcfg.frames;
  manifest["subarrays"] = geom.subarrays();
  manifest["tones"] = ch.subcarriers;
  manifest["frame_floats"] = 2 * ch.subcarriers;
  manifest["truth_doubles"] = 6;
  manifest["endianness"] = "little";
  manifest["frames_dtype"] = "float32";
  manifest["truth_dtype"] = "float64";
  manifest["tone_order"] = "subarray ascending, tone ascending, re/im";
  manifest["bad_flags"] = bad;
  manifest["seed"] = cfg.seed;
  manifest["config"] = config_json(cfg);
  write_text(dir + "/manifest.json", manifest.dump(2) + "\n");
}

StaticDataset load_static_dataset(const std::string& dir) {
  const json manifest = json::parse(read_text(dir + "/manifest.json"));
  if (manifest.at("kind") != "static")
    throw std::runtime_error(dir + ": not a static dataset");
  StaticDataset ds;
  ds.cfg = config_from_json(manifest.at("config"));
  const ArrayGeometry geom = build_geometry(ds.cfg);
  const ChannelConfig ch = build_channel(ds.cfg);
  const auto alloc = comb_allocate(ch.subcarriers, geom.subarrays(),
                                   ch.subcarrier_spacing());
  const int n = manifest.at("samples").get<int>();
  const auto fblob = read_blob(dir + "/frames.bin");
  const auto tblob = read_blob(dir + "/truth.bin");
  const size_t ffloats = 2 * static_cast<size_t>(ch.subcarriers);
  if (fblob.size() != n * ffloats * sizeof(float))
    throw std::runtime_error(dir + "/frames.bin: unexpected size");
  if (tblob.size() != static_cast<size_t>(n) * 6 * sizeof(double))
    throw std::runtime_error(dir + "/truth.bin: unexpected size");
  const float* fd = reinterpret_cast<const float*>(fblob.data());
  const double* td = reinterpret_cast<const double*>(tblob.data());
  for (int i = 0; i < n; ++i) {
    ds.frames.push_back(frame_from_floats(fd + i * ffloats, alloc, 0, false,
                                          ds.cfg.probing.snr_db));
    ds.truth.push_back(truth_from_doubles(td + i * 6));
  }
  return ds;
}

TrajectoryDataset load_trajectory_dataset(const std::string& dir) {
  const json manifest = json::parse(read_text(dir + "/manifest.json"));
  if (manifest.at("kind") != "trajectory")
    throw std::runtime_error(dir + ": not a trajectory dataset");
  TrajectoryDataset ds;
  ds.cfg = config_from_json(manifest.at("config"));
  const ArrayGeometry geom = build_geometry(ds.cfg);
  const ChannelConfig ch = build_channel(ds.cfg);
  const auto alloc = comb_allocate(ch.subcarriers, geom.subarrays(),
                                   ch.subcarrier_spacing());
  const int n = manifest.at("trajectories").get<int>();
  const int q_len = manifest.at("frames_per_trajectory").get<int>();
  const auto& bad = manifest.at("bad_flags");
  const auto fblob = read_blob(dir + "/frames.bin");
  const auto tblob = read_blob(dir + "/truth.bin");
  const size_t ffloats = 2 * static_cast<size_t>(ch.subcarriers);
  if (fblob.size() != static_cast<size_t>(n) * q_len * ffloats * sizeof(float))
    throw std::runtime_error(dir + "/frames.bin: unexpected size");
  if (tblob.size() != static_cast<size_t>(n) * q_len * 6 * sizeof(double))
    throw std::runtime_error(dir + "/truth.bin: unexpected size");
  const float* fd = reinterpret_cast<const float*>(fblob.data());
  const double* td = reinterpret_cast<const double*>(tblob.data());
  for (int i = 0; i < n; ++i) {
    std::vector<PilotFrame> frames;
    std::vector<KinematicState> truth;
    for (int q = 0; q < q_len; ++q) {
      const size_t at = (static_cast<size_t>(i) * q_len + q);
      frames.push_back(frame_from_floats(
          fd + at * ffloats, alloc, q, bad.at(i).at(q).get<int>() != 0,
          ds.cfg.probing.snr_db));
      truth.push_back(truth_from_doubles(td + at * 6));
    }
    ds.frames.push_back(std::move(frames));
    ds.truth.push_back(std::move(truth));
  }
  return ds;
}

RmseReport eval_rmse(const std::vector<Vec3>& estimates,
                     const std::vector<Vec3>& truths,
                     const ArrayGeometry& geom) {
  if (estimates.size() != truths.size())
    throw std::invalid_argument("eval_rmse: misaligned lists");
  double sum_d2 = 0.0, sum_a2 = 0.0;
  long count = 0;
  for (size_t i = 0; i < estimates.size(); ++i) {
    for (int k = 0; k < geom.subarrays(); ++k) {
      const auto [d_true, u_true] = subarray_range_dir(geom, truths[i], k);
      const auto [d_est, u_est] = subarray_range_dir(geom, estimates[i], k);
      const double dd = d_est - d_true;
      // Chord form of acos(clamp(u.u')): identical directions give exactly
      // zero and small angles keep full precision.
      const double chord = std::clamp(0.5 * (u_true - u_est).norm(), 0.0, 1.0);
      const double ang = 2.0 * std::asin(chord) * 180.0 / M_PI;
      sum_d2 += dd * dd;
      sum_a2 += ang * ang;
      ++count;
    }
  }
  RmseReport r;
  if (count > 0) {
    r.dist_m = std::sqrt(sum_d2 / count);
    r.angle_deg = std::sqrt(sum_a2 / count);
  }
  return r;
}

double spectral_efficiency(const Vec3& p_beam, bool use_distance,
                           const std::vector<PropagationPath>& paths,
                           const ArrayGeometry& geom, const ChannelConfig& cfg,
                           double noise_power) {
  const int k_n = geom.subarrays();
  const int m_n = cfg.subcarriers;
  const double wl = kSpeedOfLight / cfg.carrier_hz;
  const double norm = 1.0 / std::sqrt(static_cast<double>(k_n) *
                                      geom.subarray_elements());

  // Per-subarray transmit weights: conjugate intra-panel steering at the
  // candidate's local departure angles, phased across subarrays either by
  // the candidate's exact ranges or by the plane-wave projection.
  std::vector<Eigen::VectorXcd> f(k_n);
  const auto [d1, u1] = subarray_range_dir(geom, p_beam, 0);
  for (int k = 0; k < k_n; ++k) {
    const LocalAngles dep = local_angles(geom, p_beam, k);
    Eigen::VectorXcd steer =
        steering_vector(dep, geom.bs_offsets, wl).conjugate() * norm;
    double phase;
    if (use_distance) {
      phase = 2.0 * M_PI / wl * subarray_range_dir(geom, p_beam, k).first;
    } else {
      phase = 2.0 * M_PI / wl * (d1 - geom.geo_arm[k].dot(u1));
    }
    f[k] = steer * std::polar(1.0, phase);
  }

  // Combiner matched to the center-subcarrier response.
  const int mc = m_n / 2;
  Eigen::VectorXcd r = Eigen::VectorXcd::Zero(geom.ue_elements());
  std::vector<MatXcd> h_mc(k_n);
  for (int k = 0; k < k_n; ++k) {
    h_mc[k] = hspm_subchannel(paths, mc, geom, k, cfg);
    r += h_mc[k] * f[k];
  }
  const double rn = r.norm();
  if (rn <= 0.0) return 0.0;
  const Eigen::VectorXcd w = r / rn;

  double se = 0.0;
  for (int m = 0; m < m_n; ++m) {
    std::complex<double> g = 0.0;
    for (int k = 0; k < k_n; ++k) {
      const MatXcd h = (m == mc) ? h_mc[k] : hspm_subchannel(paths, m, geom, k, cfg);
      g += w.dot(h * f[k]);
    }
    se += std::log2(1.0 + std::norm(g) / noise_power);
  }
  return se / m_n;
}

double se_noise_power(double d1, double target_snr_db,
                      const ArrayGeometry& geom, const ChannelConfig& cfg) {
  const double wl = kSpeedOfLight / cfg.carrier_hz;
  const double beta = wl / (4.0 * M_PI * d1);
  const double matched_gain = beta * beta * geom.subarray_elements() *
                              geom.ue_elements() * geom.subarrays();
  return matched_gain / std::pow(10.0, target_snr_db / 10.0);
}

TrackerKind tracker_from_name(const std::string& name) {
  if (name == "tt") return TrackerKind::Tt;
  if (name == "ekf") return TrackerKind::Ekf;
  if (name == "hold") return TrackerKind::Hold;
  throw std::runtime_error("unknown tracker \"" + name + "\"");
}

}  // namespace nft
