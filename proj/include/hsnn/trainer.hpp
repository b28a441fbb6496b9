#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hsnn/common.hpp"
#include "hsnn/datasets.hpp"
#include "hsnn/nn.hpp"
#include "hsnn/rng.hpp"

namespace hsnn {

// --- configuration -----------------------------------------------------------

struct OptimizerConfig {
  double lr = 0.08;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  index_t epochs = 160;
  index_t batch_size = 32;
};

struct AdmmConfig {
  double rho = 1e-2;
  index_t outer_iterations = 10;
  index_t inner_epochs = 2;
  index_t final_finetune_epochs = -1;  // -1: use the optimizer's epoch count
};

struct RerouteConfig {
  index_t epochs = 40;
  double lr = 0.05;
};

struct TrainPlan {
  DatasetSpec dataset;
  std::uint64_t seed = 7;
  std::vector<index_t> layer_dims = {16, 64, 64, 64, 2};
  Activation hidden_activation = Activation::tanh;
  bool normalization = false;
  OptimizerConfig optimizer;
  index_t regrow_epochs = -1;  // -1: optimizer epochs
  std::vector<double> densities = {0.05, 0.20};
  AdmmConfig admm;
  std::vector<index_t> switch_points;  // empty: every block boundary
  RerouteConfig reroute;

  index_t num_blocks() const { return static_cast<index_t>(layer_dims.size()) - 1; }
  index_t pretrain_epochs() const { return optimizer.epochs; }
  index_t finetune_epochs() const {
    return admm.final_finetune_epochs >= 0 ? admm.final_finetune_epochs : optimizer.epochs;
  }
  index_t regrow_epoch_count() const { return regrow_epochs >= 0 ? regrow_epochs : optimizer.epochs; }
  std::vector<index_t> effective_switch_points() const {
    if (!switch_points.empty()) return switch_points;
    std::vector<index_t> all;
    for (index_t p = 0; p <= num_blocks(); ++p) all.push_back(p);
    return all;
  }

  void validate() const {
    if (layer_dims.size() < 2) throw ConfigError("architecture needs at least one layer");
    for (index_t d : layer_dims)
      if (d <= 0) throw ConfigError("layer dims must be positive");
    if (densities.empty()) throw ConfigError("at least one density required");
    for (std::size_t i = 0; i < densities.size(); ++i) {
      if (densities[i] <= 0.0 || densities[i] > 1.0)
        throw ConfigError("densities must lie in (0, 1]");
      // equal adjacent densities are allowed for degenerate setups ([1.0, 1.0])
      if (i > 0 && densities[i] < densities[i - 1])
        throw ConfigError("densities must be increasing");
    }
    if (optimizer.epochs < 0 || optimizer.batch_size <= 0 || optimizer.lr <= 0)
      throw ConfigError("bad optimizer settings");
    if (admm.rho <= 0) throw ConfigError("admm rho must be positive");
    if (admm.outer_iterations <= 0 || admm.inner_epochs <= 0)
      throw ConfigError("bad admm iteration counts");
    const auto sp = effective_switch_points();
    for (std::size_t i = 0; i < sp.size(); ++i) {
      if (sp[i] < 0 || sp[i] > num_blocks()) throw ConfigError("switch point out of range");
      if (i > 0 && sp[i] <= sp[i - 1]) throw ConfigError("switch points must be strictly increasing");
    }
  }
};

inline nlohmann::json plan_to_json(const TrainPlan& p) {
  nlohmann::json j;
  j["dataset"] = {{"id", p.dataset.id},         {"n_train", p.dataset.n_train},
                  {"n_val", p.dataset.n_val},   {"seed", p.dataset.seed},
                  {"noise", p.dataset.noise},   {"features", p.dataset.features},
                  {"turns", p.dataset.turns}};
  j["seed"] = p.seed;
  j["architecture"] = {{"dims", p.layer_dims},
                       {"activation", to_string(p.hidden_activation)},
                       {"normalization", p.normalization}};
  j["optimizer"] = {{"lr", p.optimizer.lr},
                    {"momentum", p.optimizer.momentum},
                    {"weight_decay", p.optimizer.weight_decay},
                    {"epochs", p.optimizer.epochs},
                    {"batch_size", p.optimizer.batch_size}};
  j["regrow_epochs"] = p.regrow_epochs;
  j["densities"] = p.densities;
  j["admm"] = {{"rho", p.admm.rho},
               {"outer_iterations", p.admm.outer_iterations},
               {"inner_epochs", p.admm.inner_epochs},
               {"final_finetune_epochs", p.admm.final_finetune_epochs}};
  j["switch_points"] = p.switch_points;
  j["reroute"] = {{"epochs", p.reroute.epochs}, {"lr", p.reroute.lr}};
  return j;
}

inline TrainPlan plan_from_json(const nlohmann::json& j) {
  TrainPlan p;
  try {
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      if (d.contains("id")) p.dataset.id = d["id"].get<std::string>();
      if (d.contains("n_train")) p.dataset.n_train = d["n_train"].get<index_t>();
      if (d.contains("n_val")) p.dataset.n_val = d["n_val"].get<index_t>();
      if (d.contains("seed")) p.dataset.seed = d["seed"].get<std::uint64_t>();
      if (d.contains("noise")) p.dataset.noise = d["noise"].get<double>();
      if (d.contains("features")) p.dataset.features = d["features"].get<index_t>();
      if (d.contains("turns")) p.dataset.turns = d["turns"].get<double>();
    }
    if (j.contains("seed")) p.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("architecture")) {
      const auto& a = j["architecture"];
      if (a.contains("dims")) p.layer_dims = a["dims"].get<std::vector<index_t>>();
      if (a.contains("activation"))
        p.hidden_activation = activation_from_string(a["activation"].get<std::string>());
      if (a.contains("normalization")) p.normalization = a["normalization"].get<bool>();
    }
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      if (o.contains("lr")) p.optimizer.lr = o["lr"].get<double>();
      if (o.contains("momentum")) p.optimizer.momentum = o["momentum"].get<double>();
      if (o.contains("weight_decay")) p.optimizer.weight_decay = o["weight_decay"].get<double>();
      if (o.contains("epochs")) p.optimizer.epochs = o["epochs"].get<index_t>();
      if (o.contains("batch_size")) p.optimizer.batch_size = o["batch_size"].get<index_t>();
    }
    if (j.contains("regrow_epochs")) p.regrow_epochs = j["regrow_epochs"].get<index_t>();
    if (j.contains("densities")) p.densities = j["densities"].get<std::vector<double>>();
    if (j.contains("admm")) {
      const auto& a = j["admm"];
      if (a.contains("rho")) p.admm.rho = a["rho"].get<double>();
      if (a.contains("outer_iterations"))
        p.admm.outer_iterations = a["outer_iterations"].get<index_t>();
      if (a.contains("inner_epochs")) p.admm.inner_epochs = a["inner_epochs"].get<index_t>();
      if (a.contains("final_finetune_epochs"))
        p.admm.final_finetune_epochs = a["final_finetune_epochs"].get<index_t>();
    }
    if (j.contains("switch_points")) p.switch_points = j["switch_points"].get<std::vector<index_t>>();
    if (j.contains("reroute")) {
      const auto& r = j["reroute"];
      if (r.contains("epochs")) p.reroute.epochs = r["epochs"].get<index_t>();
      if (r.contains("lr")) p.reroute.lr = r["lr"].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad plan json: ") + e.what());
  }
  p.validate();
  return p;
}

inline TrainPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad plan json: ") + e.what());
  }
  return plan_from_json(j);
}

// --- training curve ------------------------------------------------------------

struct CurveRow {
  std::string phase;
  index_t epoch = 0;
  double loss = 0.0;
  double val_accuracy = 0.0;
};

inline std::string curve_csv(const std::vector<CurveRow>& curve) {
  std::ostringstream os;
  os << "epoch,phase,loss,accuracy\n";
  char buf[64];
  for (const auto& r : curve) {
    os << r.epoch << "," << r.phase << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.loss);
    os << buf << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.val_accuracy);
    os << buf << "\n";
  }
  return os.str();
}

// --- the internal dense training network ----------------------------------------
//
// Training runs on dense row-major storage with an optional active mask and a
// frozen mask per block; pruning only toggles masks. Frozen entries receive no
// update of any kind, which makes bit-exact permanence structural. The HCSR
// model is assembled at the end.

struct LinearBlock {
  index_t in = 0, out = 0;
  std::vector<double> W, b;          // W row-major out x in
  std::vector<double> vW, vb;        // momentum
  std::vector<std::uint8_t> active;  // empty: dense
  std::vector<std::uint8_t> frozen;  // empty: none

  bool is_active(index_t idx) const { return active.empty() || active[static_cast<std::size_t>(idx)] != 0; }
  bool is_frozen(index_t idx) const { return !frozen.empty() && frozen[static_cast<std::size_t>(idx)] != 0; }
};

struct BnBlock {
  std::vector<double> gamma, beta, rmean, rvar;
  std::vector<double> vgamma, vbeta;
};

struct TrainNet {
  std::vector<index_t> dims;
  Activation hidden_act = Activation::tanh;
  bool use_bn = false;
  std::vector<LinearBlock> blocks;
  std::vector<BnBlock> bns;  // one per hidden block when use_bn

  index_t num_blocks() const { return static_cast<index_t>(blocks.size()); }
};

inline double glorot_limit(index_t fan_in, index_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline TrainNet init_net(const TrainPlan& plan, Rng& rng) {
  TrainNet net;
  net.dims = plan.layer_dims;
  net.hidden_act = plan.hidden_activation;
  net.use_bn = plan.normalization;
  for (std::size_t b = 0; b + 1 < plan.layer_dims.size(); ++b) {
    LinearBlock blk;
    blk.in = plan.layer_dims[b];
    blk.out = plan.layer_dims[b + 1];
    const double s = glorot_limit(blk.in, blk.out);
    blk.W.resize(static_cast<std::size_t>(blk.in * blk.out));
    for (auto& w : blk.W) w = rng.uniform(-s, s);
    blk.b.assign(static_cast<std::size_t>(blk.out), 0.0);
    blk.vW.assign(blk.W.size(), 0.0);
    blk.vb.assign(blk.b.size(), 0.0);
    net.blocks.push_back(std::move(blk));
    if (net.use_bn && b + 2 < plan.layer_dims.size()) {
      BnBlock bn;
      const std::size_t d = static_cast<std::size_t>(plan.layer_dims[b + 1]);
      bn.gamma.assign(d, 1.0);
      bn.beta.assign(d, 0.0);
      bn.rmean.assign(d, 0.0);
      bn.rvar.assign(d, 1.0);
      bn.vgamma.assign(d, 0.0);
      bn.vbeta.assign(d, 0.0);
      net.bns.push_back(std::move(bn));
    }
  }
  return net;
}

namespace traindetail {

struct Grads {
  std::vector<std::vector<double>> gW, gb, ggamma, gbeta;
  void init_like(const TrainNet& net) {
    gW.clear();
    gb.clear();
    ggamma.clear();
    gbeta.clear();
    for (const auto& blk : net.blocks) {
      gW.emplace_back(blk.W.size(), 0.0);
      gb.emplace_back(blk.b.size(), 0.0);
    }
    for (const auto& bn : net.bns) {
      ggamma.emplace_back(bn.gamma.size(), 0.0);
      gbeta.emplace_back(bn.beta.size(), 0.0);
    }
  }
};

struct AdmmState {
  // per block: auxiliary Z and scaled dual U, aligned with W
  std::vector<std::vector<double>> Z, U;
  double rho = 0.0;
};

inline void apply_act(Activation act, std::vector<double>& v) {
  if (act == Activation::relu)
    for (auto& x : v) x = x > 0.0 ? x : 0.0;
  else if (act == Activation::tanh)
    for (auto& x : v) x = std::tanh(x);
}

// y[B][out] = x[B][in] * W^T + b, honoring the active mask
inline void linear_forward(const LinearBlock& blk, const std::vector<double>& x, index_t B,
                           std::vector<double>& y) {
  y.assign(static_cast<std::size_t>(B * blk.out), 0.0);
  for (index_t s = 0; s < B; ++s) {
    const double* xs = x.data() + s * blk.in;
    double* ys = y.data() + s * blk.out;
    for (index_t o = 0; o < blk.out; ++o) {
      const double* wrow = blk.W.data() + o * blk.in;
      double acc = 0.0;
      if (blk.active.empty()) {
        for (index_t j = 0; j < blk.in; ++j) acc += wrow[j] * xs[j];
      } else {
        const std::uint8_t* arow = blk.active.data() + o * blk.in;
        for (index_t j = 0; j < blk.in; ++j)
          if (arow[j]) acc += wrow[j] * xs[j];
      }
      ys[o] = acc + blk.b[static_cast<std::size_t>(o)];
    }
  }
}

struct BatchCache {
  std::vector<std::vector<double>> inputs;   // input to each linear block
  std::vector<std::vector<double>> z;        // linear outputs (pre-bn/pre-act)
  std::vector<std::vector<double>> bn_xhat;  // per bn block
  std::vector<std::vector<double>> bn_invstd, bn_mean;
  std::vector<std::vector<double>> act_out;  // post-activation (for act')
};

// Forward the whole batch; returns logits. train_mode governs batch-norm.
inline std::vector<double> net_forward(TrainNet& net, const std::vector<double>& X, index_t B,
                                       bool train_mode, BatchCache* cache) {
  std::vector<double> cur = X;
  const index_t L = net.num_blocks();
  for (index_t bi = 0; bi < L; ++bi) {
    auto& blk = net.blocks[static_cast<std::size_t>(bi)];
    if (cache) cache->inputs.push_back(cur);
    std::vector<double> z;
    linear_forward(blk, cur, B, z);
    if (cache) cache->z.push_back(z);
    const bool hidden = bi + 1 < L;
    if (hidden && net.use_bn) {
      auto& bn = net.bns[static_cast<std::size_t>(bi)];
      const index_t d = blk.out;
      std::vector<double> mean(static_cast<std::size_t>(d), 0.0), var(static_cast<std::size_t>(d), 0.0),
          invstd(static_cast<std::size_t>(d), 0.0);
      if (train_mode) {
        for (index_t s = 0; s < B; ++s)
          for (index_t o = 0; o < d; ++o) mean[static_cast<std::size_t>(o)] += z[static_cast<std::size_t>(s * d + o)];
        for (auto& m : mean) m /= static_cast<double>(B);
        for (index_t s = 0; s < B; ++s)
          for (index_t o = 0; o < d; ++o) {
            const double c = z[static_cast<std::size_t>(s * d + o)] - mean[static_cast<std::size_t>(o)];
            var[static_cast<std::size_t>(o)] += c * c;
          }
        for (auto& v : var) v /= static_cast<double>(B);
        for (index_t o = 0; o < d; ++o) {
          bn.rmean[static_cast<std::size_t>(o)] =
              0.9 * bn.rmean[static_cast<std::size_t>(o)] + 0.1 * mean[static_cast<std::size_t>(o)];
          bn.rvar[static_cast<std::size_t>(o)] =
              0.9 * bn.rvar[static_cast<std::size_t>(o)] + 0.1 * var[static_cast<std::size_t>(o)];
        }
      } else {
        mean = bn.rmean;
        var = bn.rvar;
      }
      for (index_t o = 0; o < d; ++o)
        invstd[static_cast<std::size_t>(o)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(o)] + kNormEps);
      std::vector<double> xhat(z.size());
      for (index_t s = 0; s < B; ++s)
        for (index_t o = 0; o < d; ++o) {
          const std::size_t idx = static_cast<std::size_t>(s * d + o);
          xhat[idx] = (z[idx] - mean[static_cast<std::size_t>(o)]) * invstd[static_cast<std::size_t>(o)];
          z[idx] = bn.gamma[static_cast<std::size_t>(o)] * xhat[idx] + bn.beta[static_cast<std::size_t>(o)];
        }
      if (cache) {
        cache->bn_xhat.push_back(std::move(xhat));
        cache->bn_invstd.push_back(std::move(invstd));
        cache->bn_mean.push_back(std::move(mean));
      }
    }
    if (hidden) {
      apply_act(net.hidden_act, z);
      if (cache) cache->act_out.push_back(z);
    }
    cur = std::move(z);
  }
  return cur;  // logits
}

// Softmax cross entropy; fills dlogits with (p - onehot)/B.
inline double softmax_ce(const std::vector<double>& logits, const std::vector<index_t>& y,
                         index_t B, index_t C, std::vector<double>* dlogits) {
  double loss = 0.0;
  if (dlogits) dlogits->assign(logits.size(), 0.0);
  for (index_t s = 0; s < B; ++s) {
    const double* ls = logits.data() + s * C;
    double mx = ls[0];
    for (index_t c = 1; c < C; ++c) mx = std::max(mx, ls[c]);
    double sum = 0.0;
    for (index_t c = 0; c < C; ++c) sum += std::exp(ls[c] - mx);
    const double logsum = mx + std::log(sum);
    loss += logsum - ls[y[static_cast<std::size_t>(s)]];
    if (dlogits) {
      for (index_t c = 0; c < C; ++c) {
        double p = std::exp(ls[c] - logsum);
        if (c == y[static_cast<std::size_t>(s)]) p -= 1.0;
        (*dlogits)[static_cast<std::size_t>(s * C + c)] = p / static_cast<double>(B);
      }
    }
  }
  return loss / static_cast<double>(B);
}

// Full backward pass from dlogits; accumulates into grads.
inline void net_backward(TrainNet& net, const BatchCache& cache, index_t B,
                         const std::vector<double>& dlogits, Grads& grads) {
  std::vector<double> delta = dlogits;
  for (index_t bi = net.num_blocks() - 1; bi >= 0; --bi) {
    const auto& blk = net.blocks[static_cast<std::size_t>(bi)];
    const bool hidden = bi + 1 < net.num_blocks();

    if (hidden) {
      // through activation
      const auto& a = cache.act_out[static_cast<std::size_t>(bi)];
      if (net.hidden_act == Activation::tanh) {
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] *= 1.0 - a[i] * a[i];
      } else if (net.hidden_act == Activation::relu) {
        for (std::size_t i = 0; i < delta.size(); ++i)
          if (a[i] <= 0.0) delta[i] = 0.0;
      }
      if (net.use_bn) {
        auto& bn = net.bns[static_cast<std::size_t>(bi)];
        const index_t d = blk.out;
        const auto& xhat = cache.bn_xhat[static_cast<std::size_t>(bi)];
        const auto& invstd = cache.bn_invstd[static_cast<std::size_t>(bi)];
        std::vector<double> sum_dxhat(static_cast<std::size_t>(d), 0.0),
            sum_dxhat_xhat(static_cast<std::size_t>(d), 0.0);
        for (index_t s = 0; s < B; ++s)
          for (index_t o = 0; o < d; ++o) {
            const std::size_t idx = static_cast<std::size_t>(s * d + o);
            const double dout = delta[idx];
            grads.ggamma[static_cast<std::size_t>(bi)][static_cast<std::size_t>(o)] += dout * xhat[idx];
            grads.gbeta[static_cast<std::size_t>(bi)][static_cast<std::size_t>(o)] += dout;
            const double dxhat = dout * bn.gamma[static_cast<std::size_t>(o)];
            sum_dxhat[static_cast<std::size_t>(o)] += dxhat;
            sum_dxhat_xhat[static_cast<std::size_t>(o)] += dxhat * xhat[idx];
          }
        for (index_t s = 0; s < B; ++s)
          for (index_t o = 0; o < d; ++o) {
            const std::size_t idx = static_cast<std::size_t>(s * d + o);
            const double dxhat = delta[idx] * bn.gamma[static_cast<std::size_t>(o)];
            delta[idx] = invstd[static_cast<std::size_t>(o)] / static_cast<double>(B) *
                         (static_cast<double>(B) * dxhat - sum_dxhat[static_cast<std::size_t>(o)] -
                          xhat[idx] * sum_dxhat_xhat[static_cast<std::size_t>(o)]);
          }
      }
    }

    // linear backward
    const auto& xin = cache.inputs[static_cast<std::size_t>(bi)];
    auto& gW = grads.gW[static_cast<std::size_t>(bi)];
    auto& gb = grads.gb[static_cast<std::size_t>(bi)];
    for (index_t s = 0; s < B; ++s) {
      const double* xs = xin.data() + s * blk.in;
      const double* ds = delta.data() + s * blk.out;
      for (index_t o = 0; o < blk.out; ++o) {
        const double dv = ds[o];
        if (dv == 0.0) continue;
        double* grow = gW.data() + o * blk.in;
        for (index_t j = 0; j < blk.in; ++j) grow[j] += dv * xs[j];
        gb[static_cast<std::size_t>(o)] += dv;
      }
    }
    if (bi > 0) {
      std::vector<double> dprev(static_cast<std::size_t>(B * blk.in), 0.0);
      for (index_t s = 0; s < B; ++s) {
        const double* ds = delta.data() + s * blk.out;
        double* dp = dprev.data() + s * blk.in;
        for (index_t o = 0; o < blk.out; ++o) {
          const double dv = ds[o];
          if (dv == 0.0) continue;
          const double* wrow = blk.W.data() + o * blk.in;
          if (blk.active.empty()) {
            for (index_t j = 0; j < blk.in; ++j) dp[j] += dv * wrow[j];
          } else {
            const std::uint8_t* arow = blk.active.data() + o * blk.in;
            for (index_t j = 0; j < blk.in; ++j)
              if (arow[j]) dp[j] += dv * wrow[j];
          }
        }
      }
      delta = std::move(dprev);
    }
  }
}

// SGD with momentum and weight decay. Frozen entries are skipped entirely;
// masked-out entries stay zero.
inline void sgd_update(TrainNet& net, const Grads& grads, const OptimizerConfig& opt,
                       const AdmmState* admm) {
  for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
    auto& blk = net.blocks[bi];
    for (index_t idx = 0; idx < blk.in * blk.out; ++idx) {
      if (blk.is_frozen(idx) || !blk.is_active(idx)) continue;
      const std::size_t i = static_cast<std::size_t>(idx);
      double g = grads.gW[bi][i] + opt.weight_decay * blk.W[i];
      if (admm != nullptr)
        g += admm->rho * (blk.W[i] - admm->Z[bi][i] + admm->U[bi][i]);
      blk.vW[i] = opt.momentum * blk.vW[i] + g;
      blk.W[i] -= opt.lr * blk.vW[i];
    }
    for (std::size_t i = 0; i < blk.b.size(); ++i) {
      blk.vb[i] = opt.momentum * blk.vb[i] + grads.gb[bi][i];
      blk.b[i] -= opt.lr * blk.vb[i];
    }
  }
  for (std::size_t ni = 0; ni < net.bns.size(); ++ni) {
    auto& bn = net.bns[ni];
    for (std::size_t i = 0; i < bn.gamma.size(); ++i) {
      bn.vgamma[i] = opt.momentum * bn.vgamma[i] + grads.ggamma[ni][i];
      bn.gamma[i] -= opt.lr * bn.vgamma[i];
      bn.vbeta[i] = opt.momentum * bn.vbeta[i] + grads.gbeta[ni][i];
      bn.beta[i] -= opt.lr * bn.vbeta[i];
    }
  }
}

inline std::vector<double> flatten_batch(const std::vector<std::vector<double>>& rows,
                                         const std::vector<index_t>& pick) {
  const std::size_t dim = rows.front().size();
  std::vector<double> X(pick.size() * dim);
  for (std::size_t s = 0; s < pick.size(); ++s)
    std::copy(rows[static_cast<std::size_t>(pick[s])].begin(),
              rows[static_cast<std::size_t>(pick[s])].end(), X.begin() + s * dim);
  return X;
}

}  // namespace traindetail

inline double net_accuracy(TrainNet& net, const std::vector<std::vector<double>>& X,
                           const std::vector<index_t>& y) {
  if (X.empty()) return 0.0;
  const index_t B = static_cast<index_t>(X.size());
  std::vector<index_t> all(X.size());
  std::iota(all.begin(), all.end(), 0);
  const auto flat = traindetail::flatten_batch(X, all);
  const auto logits = traindetail::net_forward(net, flat, B, /*train=*/false, nullptr);
  const index_t C = net.dims.back();
  index_t correct = 0;
  for (index_t s = 0; s < B; ++s) {
    index_t best = 0;
    for (index_t c = 1; c < C; ++c)
      if (logits[static_cast<std::size_t>(s * C + c)] > logits[static_cast<std::size_t>(s * C + best)])
        best = c;
    if (best == y[static_cast<std::size_t>(s)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(B);
}

// One epoch of minibatch SGD; returns mean training loss.
inline double train_epoch(TrainNet& net, const Dataset& data, const OptimizerConfig& opt, Rng& rng,
                          const traindetail::AdmmState* admm, index_t threads = 1) {
  std::vector<index_t> order(data.train_x.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  const index_t n = static_cast<index_t>(order.size());
  const index_t C = data.num_classes;
  double loss_sum = 0.0;
  index_t batches = 0;
  traindetail::Grads grads;

  for (index_t start = 0; start < n; start += opt.batch_size) {
    const index_t B = std::min<index_t>(opt.batch_size, n - start);
    std::vector<index_t> pick(order.begin() + start, order.begin() + start + B);
    std::vector<index_t> yb(static_cast<std::size_t>(B));
    for (index_t s = 0; s < B; ++s) yb[static_cast<std::size_t>(s)] = data.train_y[static_cast<std::size_t>(pick[static_cast<std::size_t>(s)])];

    double loss = 0.0;
    grads.init_like(net);
    if (threads <= 1 || net.use_bn || B < 2 * threads) {
      const auto Xb = traindetail::flatten_batch(data.train_x, pick);
      traindetail::BatchCache cache;
      const auto logits = traindetail::net_forward(net, Xb, B, /*train=*/true, &cache);
      std::vector<double> dlogits;
      loss = traindetail::softmax_ce(logits, yb, B, C, &dlogits);
      traindetail::net_backward(net, cache, B, dlogits, grads);
    } else {
      // opt-in data-parallel gradients; reduction in thread index order, so
      // results depend on the thread count (documented as non-bit-exact
      // relative to a single-thread run)
      const index_t T = std::min<index_t>(threads, B);
      std::vector<traindetail::Grads> partial(static_cast<std::size_t>(T));
      std::vector<double> plosses(static_cast<std::size_t>(T), 0.0);
      std::vector<std::thread> pool;
      for (index_t t = 0; t < T; ++t) {
        pool.emplace_back([&, t]() {
          const index_t lo = t * B / T, hi = (t + 1) * B / T;
          if (lo >= hi) return;
          std::vector<index_t> sub(pick.begin() + lo, pick.begin() + hi);
          std::vector<index_t> ysub(static_cast<std::size_t>(hi - lo));
          for (index_t s = 0; s < hi - lo; ++s)
            ysub[static_cast<std::size_t>(s)] = data.train_y[static_cast<std::size_t>(sub[static_cast<std::size_t>(s)])];
          const auto Xs = traindetail::flatten_batch(data.train_x, sub);
          traindetail::BatchCache cache;
          const auto logits = traindetail::net_forward(net, Xs, hi - lo, true, &cache);
          std::vector<double> dl;
          plosses[static_cast<std::size_t>(t)] =
              traindetail::softmax_ce(logits, ysub, hi - lo, C, &dl) * static_cast<double>(hi - lo);
          for (auto& v : dl) v *= static_cast<double>(hi - lo) / static_cast<double>(B);
          partial[static_cast<std::size_t>(t)].init_like(net);
          traindetail::net_backward(net, cache, hi - lo, dl, partial[static_cast<std::size_t>(t)]);
        });
      }
      for (auto& th : pool) th.join();
      for (index_t t = 0; t < T; ++t) {
        loss += plosses[static_cast<std::size_t>(t)];
        for (std::size_t bi = 0; bi < grads.gW.size(); ++bi) {
          for (std::size_t i = 0; i < grads.gW[bi].size(); ++i)
            grads.gW[bi][i] += partial[static_cast<std::size_t>(t)].gW[bi][i];
          for (std::size_t i = 0; i < grads.gb[bi].size(); ++i)
            grads.gb[bi][i] += partial[static_cast<std::size_t>(t)].gb[bi][i];
        }
      }
      loss /= static_cast<double>(B);
    }

    if (!std::isfinite(loss)) throw TrainingDiverged("training loss became non-finite");
    traindetail::sgd_update(net, grads, opt, admm);
    loss_sum += loss;
    ++batches;
  }
  return batches > 0 ? loss_sum / static_cast<double>(batches) : 0.0;
}

inline void run_phase(TrainNet& net, const Dataset& data, const OptimizerConfig& opt,
                      index_t epochs, Rng& rng, std::vector<CurveRow>& curve,
                      const std::string& phase, const traindetail::AdmmState* admm = nullptr,
                      index_t threads = 1) {
  for (index_t e = 1; e <= epochs; ++e) {
    const double loss = train_epoch(net, data, opt, rng, admm, threads);
    curve.push_back({phase, e, loss, net_accuracy(net, data.val_x, data.val_y)});
  }
}

// --- cardinality projection -------------------------------------------------------

// Nearest point to v with at most `budget` nonzeros whose support contains
// every frozen position: keep the frozen set, fill the rest of the budget with
// the largest-magnitude free entries (ties to the smaller flat index).
inline std::vector<std::uint8_t> cardinality_project(const std::vector<double>& v,
                                                     const std::vector<std::uint8_t>& frozen,
                                                     index_t budget) {
  index_t frozen_count = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!frozen.empty() && frozen[i] != 0) ++frozen_count;
  if (budget < frozen_count) throw ConfigError("frozen set exceeds the sparsity budget");

  std::vector<index_t> free;
  free.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    if (frozen.empty() || frozen[i] == 0) free.push_back(static_cast<index_t>(i));
  std::sort(free.begin(), free.end(), [&v](index_t a, index_t b) {
    const double ma = std::abs(v[static_cast<std::size_t>(a)]);
    const double mb = std::abs(v[static_cast<std::size_t>(b)]);
    return ma != mb ? ma > mb : a < b;
  });

  std::vector<std::uint8_t> mask(v.size(), 0);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!frozen.empty() && frozen[i] != 0) mask[i] = 1;
  for (index_t t = 0; t < budget - frozen_count && t < static_cast<index_t>(free.size()); ++t)
    mask[static_cast<std::size_t>(free[static_cast<std::size_t>(t)])] = 1;
  return mask;
}

// ADMM on a single weight matrix with a caller-supplied loss gradient;
// the W-step runs plain gradient descent with the quadratic penalty. Returns
// the final mask and leaves w hard-pruned (fine-tuning is the caller's call).
template <typename GradFn>
inline std::vector<std::uint8_t> admm_prune_matrix(std::vector<double>& w,
                                                   const std::vector<std::uint8_t>& frozen,
                                                   index_t budget, const AdmmConfig& cfg,
                                                   GradFn&& grad_fn, double step,
                                                   index_t steps_per_w_update) {
  auto is_frozen = [&frozen](std::size_t i) { return !frozen.empty() && frozen[i] != 0; };
  std::vector<double> Z = w, U(w.size(), 0.0);
  {
    const auto m0 = cardinality_project(w, frozen, budget);
    for (std::size_t i = 0; i < Z.size(); ++i) Z[i] = m0[i] ? w[i] : 0.0;
  }
  std::vector<double> g(w.size());
  for (index_t outer = 0; outer < cfg.outer_iterations; ++outer) {
    for (index_t it = 0; it < steps_per_w_update; ++it) {
      grad_fn(w, g);
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (is_frozen(i)) continue;
        w[i] -= step * (g[i] + cfg.rho * (w[i] - Z[i] + U[i]));
      }
    }
    std::vector<double> v(w.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = w[i] + U[i];
    const auto mask = cardinality_project(v, frozen, budget);
    for (std::size_t i = 0; i < Z.size(); ++i) Z[i] = mask[i] ? v[i] : 0.0;
    for (std::size_t i = 0; i < U.size(); ++i) U[i] += w[i] - Z[i];
  }
  std::vector<std::uint8_t> mask(w.size(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = Z[i] != 0.0 || is_frozen(i);
  for (std::size_t i = 0; i < w.size(); ++i)
    if (!mask[i]) w[i] = 0.0;
  return mask;
}

// --- pipeline -----------------------------------------------------------------------

struct LevelAuxSnapshot {
  std::vector<std::vector<double>> bias;  // per block
  std::vector<BnBlock> bn;                // per hidden block when use_bn
};

struct PipelineResult {
  MultiLevelModel model;
  std::vector<CurveRow> curve;
  double dense_accuracy = 0.0;
  std::vector<double> level_accuracy;  // per level, on the validation split
  FrozenReference frozen_reference;    // per sparse layer, cumulative
  // named checkpoints: per layer, values of the frozen entries recorded so far
  std::vector<std::pair<std::string, std::vector<std::vector<double>>>> frozen_checkpoints;
  HierarchyReport hierarchy;
};

namespace traindetail {

inline std::vector<std::vector<double>> frozen_values_snapshot(const TrainNet& net,
                                                               const FrozenReference& ref) {
  std::vector<std::vector<double>> snap;
  for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
    const auto& blk = net.blocks[bi];
    std::vector<double> vals;
    if (bi < ref.size()) {
      vals.reserve(ref[bi].size());
      for (const auto& f : ref[bi])
        vals.push_back(blk.W[static_cast<std::size_t>(f.row * blk.in + f.col)]);
    }
    snap.push_back(std::move(vals));
  }
  return snap;
}

inline LevelAuxSnapshot snapshot_aux(const TrainNet& net) {
  LevelAuxSnapshot s;
  for (const auto& blk : net.blocks) s.bias.push_back(blk.b);
  for (const auto& bn : net.bns) s.bn.push_back(bn);
  return s;
}

}  // namespace traindetail

// ADMM pruning of every prunable block to a uniform density, frozen entries
// kept intact, followed by masked fine-tuning. The frozen set is the net's
// per-block frozen masks (see freeze_active).
inline void admm_prune(TrainNet& net, const Dataset& data, const TrainPlan& plan,
                       double target_density, Rng& rng, std::vector<CurveRow>& curve,
                       const std::string& tag, index_t threads = 1) {
  using traindetail::AdmmState;
  AdmmState admm;
  admm.rho = plan.admm.rho;
  for (auto& blk : net.blocks) {
    const index_t size = blk.in * blk.out;
    const index_t budget = static_cast<index_t>(std::floor(target_density * static_cast<double>(size)));
    index_t fcount = 0;
    if (!blk.frozen.empty())
      for (auto f : blk.frozen) fcount += f;
    if (budget < fcount) throw ConfigError("frozen set exceeds the per-layer sparsity budget");
    std::vector<double> z = blk.W;
    const auto m0 = cardinality_project(blk.W, blk.frozen, budget);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = m0[i] ? blk.W[i] : 0.0;
    admm.Z.push_back(std::move(z));
    admm.U.emplace_back(blk.W.size(), 0.0);
  }

  for (index_t outer = 0; outer < plan.admm.outer_iterations; ++outer) {
    // W-step: task loss plus the rho/2 ||W - Z + U||^2 penalty
    run_phase(net, data, plan.optimizer, plan.admm.inner_epochs, rng, curve, "admm_" + tag, &admm,
              threads);
    // Z-step and dual update
    for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
      auto& blk = net.blocks[bi];
      const index_t size = blk.in * blk.out;
      const index_t budget =
          static_cast<index_t>(std::floor(target_density * static_cast<double>(size)));
      std::vector<double> v(blk.W.size());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = blk.W[i] + admm.U[bi][i];
      const auto mask = cardinality_project(v, blk.frozen, budget);
      for (std::size_t i = 0; i < v.size(); ++i) admm.Z[bi][i] = mask[i] ? v[i] : 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) admm.U[bi][i] += blk.W[i] - admm.Z[bi][i];
    }
  }

  // adopt the final Z pattern, hard-prune, fine-tune under the fixed mask
  for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
    auto& blk = net.blocks[bi];
    const index_t size = blk.in * blk.out;
    const index_t budget =
        static_cast<index_t>(std::floor(target_density * static_cast<double>(size)));
    std::vector<double> v(blk.W.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = blk.W[i] + admm.U[bi][i];
    blk.active = cardinality_project(v, blk.frozen, budget);
    for (std::size_t i = 0; i < blk.W.size(); ++i)
      if (!blk.active[i]) {
        blk.W[i] = 0.0;
        blk.vW[i] = 0.0;
      }
  }
  run_phase(net, data, plan.optimizer, plan.finetune_epochs(), rng, curve, "finetune_" + tag,
            nullptr, threads);
}

// Freeze the current active pattern: values become immutable from here on.
inline void freeze_active(TrainNet& net, SparsityLevel level, FrozenReference& ref) {
  if (ref.empty()) ref.resize(net.blocks.size());
  for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
    auto& blk = net.blocks[bi];
    if (blk.frozen.empty()) blk.frozen.assign(blk.W.size(), 0);
    for (index_t o = 0; o < blk.out; ++o)
      for (index_t j = 0; j < blk.in; ++j) {
        const std::size_t idx = static_cast<std::size_t>(o * blk.in + j);
        if (blk.active.empty() || !blk.active[idx] || blk.frozen[idx]) continue;
        blk.frozen[idx] = 1;
        ref[bi].push_back({o, j, blk.W[idx], level});
      }
  }
}

// Grow back to dense: every position trainable again except the frozen set,
// with pruned positions re-initialized from the Glorot-uniform distribution
// rather than zero so gradients can reach them.
inline void reinit_pruned(TrainNet& net, Rng& rng) {
  for (auto& blk : net.blocks) {
    const double s = glorot_limit(blk.in, blk.out);
    for (std::size_t i = 0; i < blk.W.size(); ++i) {
      if (blk.is_frozen(static_cast<index_t>(i))) continue;
      if (!blk.active.empty() && !blk.active[i]) blk.W[i] = rng.uniform(-s, s);
      blk.vW[i] = 0.0;
    }
    blk.active.clear();
  }
}

// Re-initialize pruned positions and train the dense net; frozen entries do
// not move.
inline void regrow_dense(TrainNet& net, const Dataset& data, const TrainPlan& plan, Rng& rng,
                         std::vector<CurveRow>& curve, const std::string& tag,
                         index_t threads = 1) {
  reinit_pruned(net, rng);
  run_phase(net, data, plan.optimizer, plan.regrow_epoch_count(), rng, curve, tag, nullptr,
            threads);
}

inline MultiLevelModel assemble_model(const TrainNet& net, const TrainPlan& plan,
                                      const std::vector<std::vector<std::vector<std::uint8_t>>>&
                                          level_masks,  // [level][block][idx]
                                      const std::vector<LevelAuxSnapshot>& aux) {
  const index_t levels = static_cast<index_t>(level_masks.size());
  MultiLevelModel m;
  m.num_levels = levels;
  m.num_blocks = net.num_blocks();
  m.switch_points = plan.effective_switch_points();
  m.level_densities = plan.densities;

  for (index_t bi = 0; bi < net.num_blocks(); ++bi) {
    const auto& blk = net.blocks[static_cast<std::size_t>(bi)];
    const bool last = bi + 1 == net.num_blocks();

    Layer lin;
    lin.spec = {LayerKind::sparse_linear, blk.in, blk.out,
                last ? Activation::softmax_output : Activation::none};
    lin.block = bi;
    SparseLinearLayer s;
    LevelMaskSet masks;
    masks.rows = blk.out;
    masks.cols = blk.in;
    for (index_t k = 0; k < levels; ++k)
      masks.masks.push_back(level_masks[static_cast<std::size_t>(k)][static_cast<std::size_t>(bi)]);
    s.weights = encode(DenseMatrix(blk.out, blk.in, blk.W), masks);
    for (index_t k = 0; k < levels; ++k)
      s.per_level_bias.push_back(aux[static_cast<std::size_t>(k)].bias[static_cast<std::size_t>(bi)]);
    for (index_t p : m.switch_points)
      for (SparsityLevel to = 0; to + 1 < levels; ++to)
        s.reroute_bias_variants[{p, to}] = s.per_level_bias[static_cast<std::size_t>(to)];
    lin.sparse = std::move(s);
    m.layers.push_back(std::move(lin));

    if (!last && net.use_bn) {
      Layer nl;
      nl.spec = {LayerKind::normalization, blk.out, blk.out, Activation::none};
      nl.block = bi;
      NormalizationLayer norm;
      for (index_t k = 0; k < levels; ++k) {
        const auto& bn = aux[static_cast<std::size_t>(k)].bn[static_cast<std::size_t>(bi)];
        norm.per_level.push_back({bn.gamma, bn.beta, bn.rmean, bn.rvar});
      }
      for (index_t p : m.switch_points)
        for (SparsityLevel to = 0; to + 1 < levels; ++to)
          norm.variants[{p, to}] = norm.per_level[static_cast<std::size_t>(to)];
      nl.norm = std::move(norm);
      m.layers.push_back(std::move(nl));
    }

    if (!last) {
      Layer act;
      act.spec = {LayerKind::activation, blk.out, blk.out, plan.hidden_activation};
      act.block = bi;
      m.layers.push_back(std::move(act));
    }
  }
  check_model(m);
  return m;
}

// Dense pretraining: step one of the pipeline.
inline TrainNet pretrain_dense(const TrainPlan& plan, const Dataset& data,
                               std::vector<CurveRow>& curve, index_t threads = 1) {
  plan.validate();
  Rng init_rng(substream_seed(plan.seed, 1));
  TrainNet net = init_net(plan, init_rng);
  Rng train_rng(substream_seed(plan.seed, 2));
  run_phase(net, data, plan.optimizer, plan.pretrain_epochs(), train_rng, curve, "dense", nullptr,
            threads);
  return net;
}

// The alternating prune/regrow pipeline for any number of levels; two
// densities give the plain tiny-dense-small sequence.
inline PipelineResult generalize_levels(const TrainPlan& plan, index_t threads = 1) {
  plan.validate();
  const Dataset data = make_dataset(plan.dataset);
  if (data.feature_dim != plan.layer_dims.front())
    throw ConfigError("architecture input dim does not match the dataset");
  if (data.num_classes != plan.layer_dims.back())
    throw ConfigError("architecture output dim does not match the dataset");

  PipelineResult res;
  TrainNet net = pretrain_dense(plan, data, res.curve, threads);
  res.dense_accuracy = net_accuracy(net, data.val_x, data.val_y);

  const index_t levels = static_cast<index_t>(plan.densities.size());
  std::vector<std::vector<std::vector<std::uint8_t>>> level_masks(
      static_cast<std::size_t>(levels));
  std::vector<LevelAuxSnapshot> aux(static_cast<std::size_t>(levels));

  for (index_t k = 0; k < levels; ++k) {
    Rng rng(substream_seed(plan.seed, 10 + static_cast<std::uint64_t>(k)));
    if (k > 0) {
      regrow_dense(net, data, plan, rng, res.curve, "regrow_l" + std::to_string(k), threads);
      res.frozen_checkpoints.push_back({"regrow_l" + std::to_string(k),
                                        traindetail::frozen_values_snapshot(net, res.frozen_reference)});
    }
    admm_prune(net, data, plan, plan.densities[static_cast<std::size_t>(k)], rng, res.curve,
               "l" + std::to_string(k), threads);
    res.level_accuracy.push_back(net_accuracy(net, data.val_x, data.val_y));
    for (std::size_t bi = 0; bi < net.blocks.size(); ++bi)
      level_masks[static_cast<std::size_t>(k)].push_back(net.blocks[bi].active);
    aux[static_cast<std::size_t>(k)] = traindetail::snapshot_aux(net);
    freeze_active(net, k, res.frozen_reference);
    res.frozen_checkpoints.push_back({"level_" + std::to_string(k),
                                      traindetail::frozen_values_snapshot(net, res.frozen_reference)});
  }

  res.model = assemble_model(net, plan, level_masks, aux);
  res.model.provenance["plan"] = plan_to_json(plan);
  res.model.provenance["seed"] = plan.seed;
  nlohmann::json acc;
  acc["dense"] = res.dense_accuracy;
  for (index_t k = 0; k < levels; ++k)
    acc["level_" + std::to_string(k)] = res.level_accuracy[static_cast<std::size_t>(k)];
  res.model.provenance["accuracy"] = std::move(acc);

  res.frozen_checkpoints.push_back(
      {"assembled", traindetail::frozen_values_snapshot(net, res.frozen_reference)});

  VerifyOptions vopts;
  vopts.expected_densities = plan.densities;
  vopts.density_tolerance = 0.005;
  vopts.frozen_reference = &res.frozen_reference;
  res.hierarchy = verify_hierarchy(res.model, vopts);
  return res;
}

// The paper's three-step sequence: prune to tiny, regrow dense with the tiny
// subset fixed, prune to small with it still fixed.
inline PipelineResult tiny_dense_small(const TrainPlan& plan, index_t threads = 1) {
  if (plan.densities.size() != 2)
    throw ConfigError("tiny_dense_small expects exactly two densities");
  return generalize_levels(plan, threads);
}

// --- reroute variant training ----------------------------------------------------
//
// Trains the (switch_point, to_level) auxiliary parameters of every layer at
// or after the switch point; all weights stay bit-identical. Normalization
// layers train scale/shift against their stored running statistics.

namespace traindetail {

struct RerouteTrainables {
  // per model-layer index: bias or norm scale/shift (when trainable)
  std::map<std::size_t, std::vector<double>> bias;
  std::map<std::size_t, NormParams> norm;
};

inline RerouteTrainables collect_initial_variants(const MultiLevelModel& m, index_t p,
                                                  SparsityLevel to) {
  RerouteTrainables t;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const auto& l = m.layers[li];
    if (l.block < p) continue;
    if (l.spec.kind == LayerKind::sparse_linear)
      t.bias[li] = l.sparse->per_level_bias[static_cast<std::size_t>(to)];
    else if (l.spec.kind == LayerKind::dense_linear)
      t.bias[li] = l.dense->per_level_bias[static_cast<std::size_t>(to)];
    else if (l.spec.kind == LayerKind::normalization)
      t.norm[li] = l.norm->per_level[static_cast<std::size_t>(to)];
  }
  return t;
}

inline void install_variants(MultiLevelModel& m, index_t p, SparsityLevel to,
                             const RerouteTrainables& t) {
  const VariantKey key{p, to};
  for (auto& [li, bias] : t.bias) {
    auto& l = m.layers[li];
    if (l.spec.kind == LayerKind::sparse_linear)
      l.sparse->reroute_bias_variants[key] = bias;
    else
      l.dense->reroute_bias_variants[key] = bias;
  }
  for (auto& [li, params] : t.norm) m.layers[li].norm->variants[key] = params;
}

}  // namespace traindetail

struct RerouteTrainReport {
  double initial_accuracy = 0.0;
  double best_accuracy = 0.0;
  index_t best_epoch = 0;  // 0 = the untouched initialization
};

inline RerouteTrainReport train_reroute_variant(MultiLevelModel& model, index_t switch_point,
                                                const TrainPlan& plan, const Dataset& data,
                                                SparsityLevel to_level = 0,
                                                SparsityLevel from_level = -1) {
  if (from_level < 0) from_level = model.num_levels - 1;
  if (!model.has_switch_point(switch_point))
    throw ConfigError("switch point not registered on this model");
  if (from_level <= to_level) throw ConfigError("reroute must target a sparser level");

  // working variant copies, installed so forward() can run the reroute plan
  auto trainables = traindetail::collect_initial_variants(model, switch_point, to_level);
  traindetail::install_variants(model, switch_point, to_level, trainables);
  const auto plan_r = InferencePlan::reroute(switch_point, from_level, to_level);

  RerouteTrainReport rep;
  rep.initial_accuracy = model_accuracy(model, data.val_x, data.val_y, plan_r);
  rep.best_accuracy = rep.initial_accuracy;
  auto best = trainables;
  if (trainables.bias.empty() && trainables.norm.empty()) return rep;  // nothing after the switch

  // momentum buffers
  auto vel = trainables;
  for (auto& [li, b] : vel.bias) std::fill(b.begin(), b.end(), 0.0);
  for (auto& [li, n] : vel.norm) {
    std::fill(n.scale.begin(), n.scale.end(), 0.0);
    std::fill(n.shift.begin(), n.shift.end(), 0.0);
  }

  Rng rng(substream_seed(plan.seed, 100 + static_cast<std::uint64_t>(switch_point)));
  const index_t C = data.num_classes;

  for (index_t epoch = 1; epoch <= plan.reroute.epochs; ++epoch) {
    std::vector<index_t> order(data.train_x.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    for (index_t start = 0; start < static_cast<index_t>(order.size());
         start += plan.optimizer.batch_size) {
      const index_t B =
          std::min<index_t>(plan.optimizer.batch_size, static_cast<index_t>(order.size()) - start);

      // accumulate gradients over the minibatch, sample by sample
      auto grads = trainables;
      for (auto& [li, b] : grads.bias) std::fill(b.begin(), b.end(), 0.0);
      for (auto& [li, n] : grads.norm) {
        std::fill(n.scale.begin(), n.scale.end(), 0.0);
        std::fill(n.shift.begin(), n.shift.end(), 0.0);
      }
      double loss = 0.0;

      for (index_t s = 0; s < B; ++s) {
        const auto& x0 = data.train_x[static_cast<std::size_t>(order[static_cast<std::size_t>(start + s)])];
        const index_t y = data.train_y[static_cast<std::size_t>(order[static_cast<std::size_t>(start + s)])];

        // forward with per-layer input caching (logits, no softmax)
        std::vector<std::vector<double>> layer_in;
        std::vector<double> x = x0;
        for (std::size_t li = 0; li < model.layers.size(); ++li) {
          const auto& l = model.layers[li];
          layer_in.push_back(x);
          const bool after = l.block >= switch_point;
          const SparsityLevel lev = after ? to_level : from_level;
          if (l.spec.kind == LayerKind::sparse_linear) {
            CostCounter cc;
            auto yv = spmv(l.sparse->weights, lev, x, cc);
            const auto& bias = after ? trainables.bias.at(li)
                                     : l.sparse->per_level_bias[static_cast<std::size_t>(lev)];
            for (std::size_t i = 0; i < yv.size(); ++i) yv[i] += bias[i];
            x = std::move(yv);
          } else if (l.spec.kind == LayerKind::dense_linear) {
            const auto& w = l.dense->weights;
            std::vector<double> yv(static_cast<std::size_t>(w.rows), 0.0);
            for (index_t i = 0; i < w.rows; ++i) {
              double acc = 0.0;
              for (index_t j = 0; j < w.cols; ++j) acc += w.at(i, j) * x[static_cast<std::size_t>(j)];
              yv[static_cast<std::size_t>(i)] = acc;
            }
            const auto& bias = after ? trainables.bias.at(li)
                                     : l.dense->per_level_bias[static_cast<std::size_t>(lev)];
            for (std::size_t i = 0; i < yv.size(); ++i) yv[i] += bias[i];
            x = std::move(yv);
          } else if (l.spec.kind == LayerKind::normalization) {
            const NormParams& np = after ? trainables.norm.at(li)
                                         : l.norm->per_level[static_cast<std::size_t>(lev)];
            for (std::size_t i = 0; i < x.size(); ++i)
              x[i] = (x[i] - np.running_mean[i]) / std::sqrt(np.running_var[i] + kNormEps) *
                         np.scale[i] +
                     np.shift[i];
          } else {
            traindetail::apply_act(l.spec.activation, x);
          }
        }

        // softmax CE on the logits
        std::vector<double> delta(x.size());
        {
          double mx = *std::max_element(x.begin(), x.end());
          double sum = 0.0;
          for (auto v : x) sum += std::exp(v - mx);
          const double logsum = mx + std::log(sum);
          loss += (logsum - x[static_cast<std::size_t>(y)]) / static_cast<double>(B);
          for (std::size_t c = 0; c < x.size(); ++c) {
            delta[c] = std::exp(x[c] - logsum) / static_cast<double>(B);
            if (static_cast<index_t>(c) == y) delta[c] -= 1.0 / static_cast<double>(B);
          }
        }

        // backward, stopping once no trainable layer remains below
        for (std::size_t li = model.layers.size(); li-- > 0;) {
          const auto& l = model.layers[li];
          const bool after = l.block >= switch_point;
          const SparsityLevel lev = after ? to_level : from_level;
          if (!after) break;
          if (l.spec.kind == LayerKind::sparse_linear || l.spec.kind == LayerKind::dense_linear) {
            auto& gb = grads.bias.at(li);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += delta[i];
            if (li == 0) break;
            if (l.spec.kind == LayerKind::sparse_linear) {
              CostCounter cc;
              delta = spmv_transpose_accumulate(l.sparse->weights, lev, delta, cc);
            } else {
              const auto& w = l.dense->weights;
              std::vector<double> dprev(static_cast<std::size_t>(w.cols), 0.0);
              for (index_t i = 0; i < w.rows; ++i)
                for (index_t j = 0; j < w.cols; ++j)
                  dprev[static_cast<std::size_t>(j)] += w.at(i, j) * delta[static_cast<std::size_t>(i)];
              delta = std::move(dprev);
            }
          } else if (l.spec.kind == LayerKind::normalization) {
            auto& gn = grads.norm.at(li);
            const NormParams& np = trainables.norm.at(li);
            const auto& xin = layer_in[li];
            for (std::size_t i = 0; i < delta.size(); ++i) {
              const double xhat =
                  (xin[i] - np.running_mean[i]) / std::sqrt(np.running_var[i] + kNormEps);
              gn.scale[i] += delta[i] * xhat;
              gn.shift[i] += delta[i];
              delta[i] *= np.scale[i] / std::sqrt(np.running_var[i] + kNormEps);
            }
          } else {
            const auto& xin = layer_in[li];
            if (l.spec.activation == Activation::tanh) {
              for (std::size_t i = 0; i < delta.size(); ++i) {
                const double t = std::tanh(xin[i]);
                delta[i] *= 1.0 - t * t;
              }
            } else if (l.spec.activation == Activation::relu) {
              for (std::size_t i = 0; i < delta.size(); ++i)
                if (xin[i] <= 0.0) delta[i] = 0.0;
            }
          }
        }
      }

      if (!std::isfinite(loss)) throw TrainingDiverged("reroute training diverged");

      // momentum SGD on the trainables
      for (auto& [li, b] : trainables.bias) {
        auto& v = vel.bias.at(li);
        const auto& g = grads.bias.at(li);
        for (std::size_t i = 0; i < b.size(); ++i) {
          v[i] = plan.optimizer.momentum * v[i] + g[i];
          b[i] -= plan.reroute.lr * v[i];
        }
      }
      for (auto& [li, n] : trainables.norm) {
        auto& v = vel.norm.at(li);
        const auto& g = grads.norm.at(li);
        for (std::size_t i = 0; i < n.scale.size(); ++i) {
          v.scale[i] = plan.optimizer.momentum * v.scale[i] + g.scale[i];
          n.scale[i] -= plan.reroute.lr * v.scale[i];
          v.shift[i] = plan.optimizer.momentum * v.shift[i] + g.shift[i];
          n.shift[i] -= plan.reroute.lr * v.shift[i];
        }
      }
    }

    traindetail::install_variants(model, switch_point, to_level, trainables);
    const double acc = model_accuracy(model, data.val_x, data.val_y, plan_r);
    if (acc > rep.best_accuracy) {
      rep.best_accuracy = acc;
      rep.best_epoch = epoch;
      best = trainables;
    }
  }

  traindetail::install_variants(model, switch_point, to_level, best);
  return rep;
}

}  // namespace hsnn
