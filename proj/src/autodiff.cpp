#include "nft/autodiff.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace nft::ad {

namespace {

[[noreturn]] void shape_error(const char* op, const Mat& a, const Mat& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                              std::to_string(a.rows()) + "x" +
                              std::to_string(a.cols()) + " vs " +
                              std::to_string(b.rows()) + "x" +
                              std::to_string(b.cols()) + ")");
}

void check_same(const char* op, const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

}  // namespace

Mat& ParamStore::add(const std::string& name, int rows, int cols) {
  if (params.count(name))
    throw std::invalid_argument("ParamStore: duplicate name " + name);
  params[name] = Mat::Zero(rows, cols);
  adam_m[name] = Mat::Zero(rows, cols);
  adam_v[name] = Mat::Zero(rows, cols);
  return params[name];
}

Mat& ParamStore::add_uniform(const std::string& name, int rows, int cols,
                             Rng& rng) {
  Mat& m = add(name, rows, cols);
  // Inputs are row vectors hitting (in x out) matrices, so fan-in = rows.
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows > 1 ? rows : cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
  return m;
}

int Tape::push(Mat value, std::function<void(Tape&, int)> back) {
  Node n;
  n.val = std::move(value);
  n.grad = Mat::Zero(n.val.rows(), n.val.cols());
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(const Mat& value) { return {this, push(value)}; }

Var Tape::param(ParamStore& store, const std::string& name) {
  auto it = store.params.find(name);
  if (it == store.params.end())
    throw std::invalid_argument("Tape::param: unknown parameter " + name);
  const int id = push(it->second);
  param_leaves_.emplace_back(name, id);
  return {this, id};
}

Var Tape::constant(double value) {
  Mat m(1, 1);
  m(0, 0) = value;
  return {this, push(std::move(m))};
}

const Mat& Tape::value(Var v) const { return nodes_.at(v.id).val; }
const Mat& Tape::grad(Var v) const { return nodes_.at(v.id).grad; }

Var Tape::add(Var a, Var b) {
  check_same("add", value(a), value(b));
  const int ia = a.id, ib = b.id;
  const int id = push(value(a) + value(b), [ia, ib](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad;
    t.grad_ref(ib) += t.nodes_[self].grad;
  });
  return {this, id};
}

Var Tape::sub(Var a, Var b) {
  check_same("sub", value(a), value(b));
  const int ia = a.id, ib = b.id;
  const int id = push(value(a) - value(b), [ia, ib](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad;
    t.grad_ref(ib) -= t.nodes_[self].grad;
  });
  return {this, id};
}

Var Tape::neg(Var a) { return scale(a, -1.0); }

Var Tape::scale(Var a, double s) {
  const int ia = a.id;
  const int id = push(s * value(a), [ia, s](Tape& t, int self) {
    t.grad_ref(ia) += s * t.nodes_[self].grad;
  });
  return {this, id};
}

Var Tape::add_scalar(Var a, double s) {
  const int ia = a.id;
  const int id = push(value(a).array() + s, [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad;
  });
  return {this, id};
}

Var Tape::mul(Var a, Var b) {
  check_same("mul", value(a), value(b));
  const int ia = a.id, ib = b.id;
  const int id = push(value(a).cwiseProduct(value(b)),
                      [ia, ib](Tape& t, int self) {
                        const Mat& g = t.nodes_[self].grad;
                        t.grad_ref(ia) += g.cwiseProduct(t.nodes_[ib].val);
                        t.grad_ref(ib) += g.cwiseProduct(t.nodes_[ia].val);
                      });
  return {this, id};
}

Var Tape::div(Var a, Var b) {
  check_same("div", value(a), value(b));
  const int ia = a.id, ib = b.id;
  const int id = push(value(a).cwiseQuotient(value(b)),
                      [ia, ib](Tape& t, int self) {
                        const Mat& g = t.nodes_[self].grad;
                        const Mat& bv = t.nodes_[ib].val;
                        t.grad_ref(ia) += g.cwiseQuotient(bv);
                        t.grad_ref(ib) -= g.cwiseProduct(t.nodes_[self].val)
                                              .cwiseQuotient(bv);
                      });
  return {this, id};
}

Var Tape::matmul(Var a, Var b) {
  if (value(a).cols() != value(b).rows()) shape_error("matmul", value(a), value(b));
  const int ia = a.id, ib = b.id;
  const int id = push(value(a) * value(b), [ia, ib](Tape& t, int self) {
    const Mat& g = t.nodes_[self].grad;
    t.grad_ref(ia) += g * t.nodes_[ib].val.transpose();
    t.grad_ref(ib) += t.nodes_[ia].val.transpose() * g;
  });
  return {this, id};
}

Var Tape::transpose(Var a) {
  const int ia = a.id;
  const int id = push(value(a).transpose(), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad.transpose();
  });
  return {this, id};
}

Var Tape::vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("vcat: empty");
  const Eigen::Index cols = value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    if (value(p).cols() != cols) shape_error("vcat", value(parts[0]), value(p));
    rows += value(p).rows();
  }
  Mat out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleRows(at, value(p).rows()) = value(p);
    ids.push_back(p.id);
    offsets.push_back(at);
    at += value(p).rows();
  }
  const int id = push(std::move(out), [ids, offsets](Tape& t, int self) {
    for (size_t i = 0; i < ids.size(); ++i) {
      Mat& g = t.grad_ref(ids[i]);
      g += t.nodes_[self].grad.middleRows(offsets[i], g.rows());
    }
  });
  return {this, id};
}

Var Tape::hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("hcat: empty");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (value(p).rows() != rows) shape_error("hcat", value(parts[0]), value(p));
    cols += value(p).cols();
  }
  Mat out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, value(p).cols()) = value(p);
    ids.push_back(p.id);
    offsets.push_back(at);
    at += value(p).cols();
  }
  const int id = push(std::move(out), [ids, offsets](Tape& t, int self) {
    for (size_t i = 0; i < ids.size(); ++i) {
      Mat& g = t.grad_ref(ids[i]);
      g += t.nodes_[self].grad.middleCols(offsets[i], g.cols());
    }
  });
  return {this, id};
}

Var Tape::reshape(Var a, int rows, int cols) {
  if (value(a).size() != static_cast<Eigen::Index>(rows) * cols)
    throw std::invalid_argument("reshape: element count mismatch");
  const int ia = a.id;
  Mat v = Eigen::Map<const Mat>(value(a).data(), rows, cols);
  const int id = push(std::move(v), [ia](Tape& t, int self) {
    const Mat& src = t.nodes_[ia].val;
    t.grad_ref(ia) += Eigen::Map<const Mat>(t.nodes_[self].grad.data(),
                                            src.rows(), src.cols());
  });
  return {this, id};
}

Var Tape::slice_rows(Var a, int begin, int count) {
  if (begin < 0 || begin + count > value(a).rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  const int ia = a.id;
  const int id = push(value(a).middleRows(begin, count),
                      [ia, begin, count](Tape& t, int self) {
                        t.grad_ref(ia).middleRows(begin, count) +=
                            t.nodes_[self].grad;
                      });
  return {this, id};
}

Var Tape::slice_cols(Var a, int begin, int count) {
  if (begin < 0 || begin + count > value(a).cols())
    throw std::invalid_argument("slice_cols: range out of bounds");
  const int ia = a.id;
  const int id = push(value(a).middleCols(begin, count),
                      [ia, begin, count](Tape& t, int self) {
                        t.grad_ref(ia).middleCols(begin, count) +=
                            t.nodes_[self].grad;
                      });
  return {this, id};
}

Var Tape::add_rowvec(Var a, Var row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols())
    shape_error("add_rowvec", value(a), value(row));
  const int ia = a.id, ir = row.id;
  const int id = push(value(a).rowwise() + value(row).row(0),
                      [ia, ir](Tape& t, int self) {
                        const Mat& g = t.nodes_[self].grad;
                        t.grad_ref(ia) += g;
                        t.grad_ref(ir) += g.colwise().sum();
                      });
  return {this, id};
}

Var Tape::mul_scalar_var(Var a, Var s) {
  if (value(s).size() != 1) throw std::invalid_argument("mul_scalar_var: scalar required");
  const int ia = a.id, is = s.id;
  const int id = push(value(s)(0, 0) * value(a), [ia, is](Tape& t, int self) {
    const Mat& g = t.nodes_[self].grad;
    t.grad_ref(ia) += t.nodes_[is].val(0, 0) * g;
    t.grad_ref(is)(0, 0) += g.cwiseProduct(t.nodes_[ia].val).sum();
  });
  return {this, id};
}

Var Tape::relu(Var a) {
  const int ia = a.id;
  const int id = push(value(a).cwiseMax(0.0), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self]
                          .grad.cwiseProduct((t.nodes_[ia].val.array() > 0.0)
                                                 .cast<double>()
                                                 .matrix());
  });
  return {this, id};
}

Var Tape::sigmoid(Var a) {
  const int ia = a.id;
  Mat v = (1.0 / (1.0 + (-value(a).array()).exp())).matrix();
  const int id = push(std::move(v), [ia](Tape& t, int self) {
    const Mat& y = t.nodes_[self].val;
    t.grad_ref(ia) += t.nodes_[self].grad.cwiseProduct(
        y.cwiseProduct((1.0 - y.array()).matrix()));
  });
  return {this, id};
}

Var Tape::softplus(Var a) {
  const int ia = a.id;
  // Stable: max(x, 0) + log1p(exp(-|x|)).
  Mat v = value(a).unaryExpr(
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  const int id = push(std::move(v), [ia](Tape& t, int self) {
    const Mat sig = t.nodes_[ia].val.unaryExpr(
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    t.grad_ref(ia) += t.nodes_[self].grad.cwiseProduct(sig);
  });
  return {this, id};
}

Var Tape::tanh(Var a) {
  const int ia = a.id;
  const int id = push(value(a).array().tanh().matrix(), [ia](Tape& t, int self) {
    const Mat& y = t.nodes_[self].val;
    t.grad_ref(ia) += t.nodes_[self].grad.cwiseProduct(
        (1.0 - y.array().square()).matrix());
  });
  return {this, id};
}

Var Tape::exp(Var a) {
  const int ia = a.id;
  const int id = push(value(a).array().exp().matrix(), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad.cwiseProduct(t.nodes_[self].val);
  });
  return {this, id};
}

Var Tape::log(Var a) {
  const int ia = a.id;
  const int id = push(value(a).array().log().matrix(), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad.cwiseQuotient(t.nodes_[ia].val);
  });
  return {this, id};
}

Var Tape::sqrt(Var a) {
  const int ia = a.id;
  const int id = push(value(a).array().sqrt().matrix(), [ia](Tape& t, int self) {
    t.grad_ref(ia) += (0.5 * t.nodes_[self].grad.array() /
                       t.nodes_[self].val.array())
                          .matrix();
  });
  return {this, id};
}

Var Tape::square(Var a) {
  const int ia = a.id;
  const int id = push(value(a).array().square().matrix(), [ia](Tape& t, int self) {
    t.grad_ref(ia) += (2.0 * t.nodes_[self].grad.array() *
                       t.nodes_[ia].val.array())
                          .matrix();
  });
  return {this, id};
}

Var Tape::sin(Var a) {
  const int ia = a.id;
  const int id = push(value(a).array().sin().matrix(), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad.cwiseProduct(
        t.nodes_[ia].val.array().cos().matrix());
  });
  return {this, id};
}

Var Tape::cos(Var a) {
  const int ia = a.id;
  const int id = push(value(a).array().cos().matrix(), [ia](Tape& t, int self) {
    t.grad_ref(ia) -= t.nodes_[self].grad.cwiseProduct(
        t.nodes_[ia].val.array().sin().matrix());
  });
  return {this, id};
}

Var Tape::clamp(Var a, double lo, double hi) {
  const int ia = a.id;
  const int id = push(value(a).cwiseMax(lo).cwiseMin(hi),
                      [ia, lo, hi](Tape& t, int self) {
                        const Mat& x = t.nodes_[ia].val;
                        const Mat pass = ((x.array() >= lo) && (x.array() <= hi))
                                             .cast<double>()
                                             .matrix();
                        t.grad_ref(ia) +=
                            t.nodes_[self].grad.cwiseProduct(pass);
                      });
  return {this, id};
}

Var Tape::softmax_rows(Var a, const Mat* mask) {
  const Mat& x = value(a);
  if (mask) check_same("softmax_rows(mask)", x, *mask);
  Mat z = x;
  if (mask) z += *mask;
  Mat p(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < z.cols(); ++c)
      if (z(r, c) > mx) mx = z(r, c);
    if (!std::isfinite(mx))
      throw std::invalid_argument("softmax_rows: fully masked row");
    double s = 0.0;
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      const double e = std::isfinite(z(r, c)) ? std::exp(z(r, c) - mx) : 0.0;
      p(r, c) = e;
      s += e;
    }
    p.row(r) /= s;
  }
  const int ia = a.id;
  const int id = push(std::move(p), [ia](Tape& t, int self) {
    const Mat& y = t.nodes_[self].val;
    const Mat& g = t.nodes_[self].grad;
    // dx = y .* (g - rowdot(g, y)); masked entries have y = 0 exactly.
    const Eigen::VectorXd dots = (g.cwiseProduct(y)).rowwise().sum();
    t.grad_ref(ia) += y.cwiseProduct(g - dots.replicate(1, y.cols()));
  });
  return {this, id};
}

Var Tape::layernorm_rows(Var a, double eps) {
  const Mat& x = value(a);
  const Eigen::Index n = x.cols();
  Mat y(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    y.row(r) = ((x.row(r).array() - mu) * is).matrix();
  }
  const int ia = a.id;
  const int id = push(std::move(y), [ia, inv_std, n](Tape& t, int self) {
    const Mat& y2 = t.nodes_[self].val;
    const Mat& g = t.nodes_[self].grad;
    Mat& gx = t.grad_ref(ia);
    for (Eigen::Index r = 0; r < y2.rows(); ++r) {
      const double gm = g.row(r).mean();
      const double gy = (g.row(r).cwiseProduct(y2.row(r))).mean();
      gx.row(r) += (inv_std(r) *
                    (g.row(r).array() - gm - y2.row(r).array() * gy))
                       .matrix();
    }
    (void)n;
  });
  return {this, id};
}

Var Tape::sum(Var a) {
  const int ia = a.id;
  Mat v(1, 1);
  v(0, 0) = value(a).sum();
  const int id = push(std::move(v), [ia](Tape& t, int self) {
    t.grad_ref(ia).array() += t.nodes_[self].grad(0, 0);
  });
  return {this, id};
}

Var Tape::mean(Var a) {
  const double n = static_cast<double>(value(a).size());
  return scale(sum(a), 1.0 / n);
}

Var Tape::sum_cols(Var a) {
  const int ia = a.id;
  const int id = push(value(a).rowwise().sum(), [ia](Tape& t, int self) {
    t.grad_ref(ia) +=
        t.nodes_[self].grad.replicate(1, t.nodes_[ia].val.cols());
  });
  return {this, id};
}

Var Tape::stop_grad(Var a) { return {this, push(value(a))}; }

void Tape::backward(Var loss) {
  if (value(loss).size() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  for (auto& n : nodes_) n.grad.setZero();
  nodes_[loss.id].grad(0, 0) = 1.0;
  for (int i = loss.id; i >= 0; --i)
    if (nodes_[i].back) nodes_[i].back(*this, i);
}

void Tape::param_grads(GradMap& out) const {
  for (const auto& [name, id] : param_leaves_) {
    auto it = out.find(name);
    if (it == out.end())
      out[name] = nodes_[id].grad;
    else
      it->second += nodes_[id].grad;
  }
}

double LrSchedule::lr(int64_t step) const {
  if (warmup_steps > 0 && step < warmup_steps)
    return peak * static_cast<double>(step + 1) / warmup_steps;
  const int64_t decay_total = std::max<int64_t>(1, total_steps - warmup_steps);
  const double frac =
      std::min(1.0, static_cast<double>(step - warmup_steps) / decay_total);
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(M_PI * frac));
}

void optimizer_step(ParamStore& store, const GradMap& grads, double lr,
                    const AdamWConfig& cfg) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    if (!g.allFinite())
      throw std::runtime_error("optimizer_step: non-finite gradient for " + name);
    sq += g.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double clip =
      (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;

  store.step += 1;
  const double t = static_cast<double>(store.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [name, g_raw] : grads) {
    auto it = store.params.find(name);
    if (it == store.params.end())
      throw std::invalid_argument("optimizer_step: unknown parameter " + name);
    const Mat g = clip * g_raw;
    Mat& m = store.adam_m[name];
    Mat& v = store.adam_v[name];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const Mat mhat = m / bc1;
    const Mat vhat = v / bc2;
    it->second -= lr * (mhat.array() / (vhat.array().sqrt() + cfg.eps)).matrix();
    it->second -= lr * cfg.weight_decay * it->second;
  }
}

std::map<std::string, double> grad_check(const LossFn& f, ParamStore& store,
                                         double step, int max_entries_per_param) {
  GradMap grads;
  f(store, &grads);

  std::map<std::string, double> report;
  for (auto& [name, p] : store.params) {
    const auto git = grads.find(name);
    double worst = 0.0;
    const int total = static_cast<int>(p.size());
    const int limit = (max_entries_per_param > 0 &&
                       max_entries_per_param < total)
                          ? max_entries_per_param
                          : total;
    const int stride = std::max(1, total / limit);
    for (int i = 0; i < total; i += stride) {
      double* cell = p.data() + i;
      const double keep = *cell;
      *cell = keep + step;
      const double hi = f(store, nullptr);
      *cell = keep - step;
      const double lo = f(store, nullptr);
      *cell = keep;
      const double fd = (hi - lo) / (2.0 * step);
      const double an = git == grads.end() ? 0.0 : git->second(i);
      // The floor matches the noise floor of central differences on a deep
      // graph (~machine eps * loss / step); below it the comparison is an
      // absolute one at the limit of what float64 differences can resolve.
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
    report[name] = worst;
  }
  return report;
}

namespace {

void write_doubles(std::ofstream& out, const Mat& m) {
  // Column-major, matching Eigen's internal layout.
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::string& dir) {
  nlohmann::json manifest;
  manifest["dtype"] = "float64le";
  manifest["step"] = store.step;
  std::ofstream blob(dir + "/params.bin", std::ios::binary);
  if (!blob) throw std::runtime_error("save_checkpoint: cannot write " + dir);
  int64_t offset = 0;
  auto dump = [&](const std::map<std::string, Mat>& group, const char* key) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [name, m] : group) {
      entries.push_back({{"name", name},
                         {"rows", m.rows()},
                         {"cols", m.cols()},
                         {"offset", offset}});
      write_doubles(blob, m);
      offset += static_cast<int64_t>(m.size() * sizeof(double));
    }
    manifest[key] = entries;
  };
  dump(store.params, "params");
  dump(store.adam_m, "adam_m");
  dump(store.adam_v, "adam_v");
  blob.close();
  std::ofstream mf(dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
}

ParamStore load_checkpoint(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw std::runtime_error("load_checkpoint: missing manifest in " + dir);
  nlohmann::json manifest;
  mf >> manifest;
  std::ifstream blob(dir + "/params.bin", std::ios::binary);
  if (!blob) throw std::runtime_error("load_checkpoint: missing blob in " + dir);

  ParamStore store;
  store.step = manifest.at("step").get<int64_t>();
  auto read_group = [&](const char* key, std::map<std::string, Mat>& group) {
    for (const auto& e : manifest.at(key)) {
      Mat m(e.at("rows").get<int>(), e.at("cols").get<int>());
      blob.seekg(e.at("offset").get<int64_t>());
      blob.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
      group[e.at("name").get<std::string>()] = std::move(m);
    }
  };
  read_group("params", store.params);
  read_group("adam_m", store.adam_m);
  read_group("adam_v", store.adam_v);
  return store;
}

}  // namespace nft::ad
