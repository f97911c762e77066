#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nft/rng.hpp"

namespace nft::ad {

using Mat = Eigen::MatrixXd;

class Tape;

// Lightweight handle into a tape; scalars are 1x1, vectors 1xN or Nx1.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

using GradMap = std::map<std::string, Mat>;

// Named parameter tensors plus AdamW moments; the unit every checkpoint
// serializes.
struct ParamStore {
  std::map<std::string, Mat> params;
  std::map<std::string, Mat> adam_m;
  std::map<std::string, Mat> adam_v;
  int64_t step = 0;

  Mat& add(const std::string& name, int rows, int cols);
  // Uniform fan-in init U[-1/sqrt(fan_in), 1/sqrt(fan_in)].
  Mat& add_uniform(const std::string& name, int rows, int cols, Rng& rng);
  bool has(const std::string& name) const { return params.count(name) > 0; }
};

// Reverse-mode tape over dense real matrices.  Nodes are created in
// topological order; backward replays them once in reverse.
class Tape {
 public:
  Var leaf(const Mat& value);
  // Leaf bound to a named parameter; its gradient lands in param_grads().
  Var param(ParamStore& store, const std::string& name);
  Var constant(double value);

  const Mat& value(Var v) const;
  const Mat& grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var neg(Var a);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var mul(Var a, Var b);       // elementwise
  Var div(Var a, Var b);       // elementwise
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var vcat(const std::vector<Var>& parts);
  Var hcat(const std::vector<Var>& parts);
  Var reshape(Var a, int rows, int cols);  // column-major reflow
  Var slice_rows(Var a, int begin, int count);
  Var slice_cols(Var a, int begin, int count);
  Var add_rowvec(Var a, Var row);  // broadcast a 1xN bias over rows
  Var mul_scalar_var(Var a, Var s);  // s is 1x1

  Var relu(Var a);
  Var sigmoid(Var a);
  Var softplus(Var a);
  Var tanh(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var square(Var a);
  Var sin(Var a);
  Var cos(Var a);
  Var clamp(Var a, double lo, double hi);  // zero gradient outside [lo, hi]

  // Row softmax with an optional additive mask; -inf mask entries get
  // exactly zero weight and exactly zero gradient.
  Var softmax_rows(Var a, const Mat* mask = nullptr);
  Var layernorm_rows(Var a, double eps = 1e-6);

  Var sum(Var a);   // 1x1
  Var mean(Var a);  // 1x1
  Var sum_cols(Var a);  // Nx1 rowwise sums

  Var stop_grad(Var a);

  // Reverse sweep from a scalar loss (1x1).
  void backward(Var loss);
  // Adds parameter-leaf gradients into out (accumulating across tapes).
  void param_grads(GradMap& out) const;

 private:
  struct Node {
    Mat val;
    Mat grad;
    std::function<void(Tape&, int)> back;
  };

  int push(Mat value, std::function<void(Tape&, int)> back = nullptr);
  Mat& grad_ref(int id) { return nodes_[id].grad; }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, int>> param_leaves_;
};

// Linear warm-up to peak, then cosine decay to floor.
struct LrSchedule {
  double peak = 1e-3;
  double floor = 1e-5;
  int64_t warmup_steps = 0;
  int64_t total_steps = 1;

  double lr(int64_t step) const;
};

// AdamW with decoupled weight decay and global-norm gradient clipping.
struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
};

void optimizer_step(ParamStore& store, const GradMap& grads, double lr,
                    const AdamWConfig& cfg = {});

// Max relative error between tape gradients and central finite differences,
// per parameter.  f must be deterministic and fill grads when asked.
using LossFn = std::function<double(ParamStore&, GradMap*)>;
std::map<std::string, double> grad_check(const LossFn& f, ParamStore& store,
                                         double step = 1e-5,
                                         int max_entries_per_param = 0);

// Checkpoint: manifest.json (names, shapes, byte offsets, optimizer step)
// next to a little-endian float64 blob.  Round-trips bit-exactly.
void save_checkpoint(const ParamStore& store, const std::string& dir);
ParamStore load_checkpoint(const std::string& dir);

}  // namespace nft::ad
