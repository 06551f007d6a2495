#pragma once

// Adversarial optimization of (T_theta, phi_omega): one potential update and
// n_T transport updates per step, both with RMSProp. Every random draw is a
// pure function of (seed, purpose, step), so runs are bitwise reproducible
// and checkpoint resume replays the uninterrupted run exactly.

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include "darcot/io.hpp"
#include "darcot/losses.hpp"
#include "darcot/nets.hpp"
#include "darcot/synth.hpp"

namespace darcot::train {

enum class Objective { frot, l1_only };

inline const char* objective_name(Objective o) {
  return o == Objective::frot ? "frot" : "l1_only";
}
inline Objective objective_from_name(const std::string& s) {
  if (s == "frot") return Objective::frot;
  if (s == "l1_only") return Objective::l1_only;
  fail_contract("unknown objective '", s, "'");
}

struct TrainConfig {
  double lr_T = 1e-4;
  double lr_phi = 0.5e-4;
  int n_T = 1;
  int batch_size = 6;
  int steps = 2000;
  double tau = 0.07;
  double gamma_task = 0.1;
  double lambda_pair = 10.0;
  bool paired = true;
  uint64_t seed = 0;
  double rmsprop_decay = 0.99;
  double rmsprop_eps = 1e-8;
  // Optional stabilizer (off by default): a finite-difference Lipschitz
  // penalty on the potential; any run that enables it reports so in its
  // metrics metadata.
  double grad_penalty = 0.0;

  Objective objective = Objective::frot;
  bool use_task_loss = true;  // gamma * L_task (needs >= 2 tasks and R1)
  losses::RegMode residual_reg_mode = losses::RegMode::fourier_l1;
  bool reg_enabled = true;  // false = "without g" ablation arm
  nets::ModelConfig model;
  int metrics_every = 10;

  losses::CostConfig cost_config() const {
    losses::CostConfig c = losses::CostConfig::defaults();
    c.residual_reg_mode = residual_reg_mode;
    if (!reg_enabled) {
      c.residual_reg_mode = losses::RegMode::off;
      c.per_task_reg.clear();
    }
    c.lambda_pair = lambda_pair;
    c.gamma_task = gamma_task;
    c.tau = tau;
    return c;
  }

  void validate() const {
    DARCOT_REQUIRE(lr_T >= 0 && lr_phi >= 0, "TrainConfig: learning rates must be >= 0");
    DARCOT_REQUIRE(n_T >= 1, "TrainConfig: n_T must be >= 1, got ", n_T);
    DARCOT_REQUIRE(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    DARCOT_REQUIRE(steps >= 0, "TrainConfig: steps must be >= 0");
    DARCOT_REQUIRE(rmsprop_decay > 0 && rmsprop_decay < 1, "TrainConfig: decay in (0,1)");
    DARCOT_REQUIRE(rmsprop_eps >= 0 && grad_penalty >= 0, "TrainConfig: eps/penalty >= 0");
    DARCOT_REQUIRE(objective == Objective::frot || paired,
                   "TrainConfig: l1_only objective requires paired mode");
    model.validate();
    cost_config().validate();
  }
};

// v <- decay*v + (1-decay)*g^2;  p <- p - lr*g/(sqrt(v)+eps), elementwise.
template <class S>
void rmsprop_update(Tensor<S>& param, const std::vector<S>& grad, Tensor<S>& v_state,
                    double lr, double decay, double eps) {
  DARCOT_REQUIRE(int64_t(grad.size()) == param.numel() && v_state.numel() == param.numel(),
                 "rmsprop_update: shape mismatch");
  auto p = param.mut_data();
  auto v = v_state.mut_data();
  for (size_t i = 0; i < grad.size(); ++i) {
    double g = double(grad[i]);
    if (!std::isfinite(g)) fail_numeric("rmsprop_update: non-finite gradient");
    double vn = decay * double(v[i]) + (1.0 - decay) * g * g;
    v[i] = S(vn);
    if (g != 0.0) p[i] = S(double(p[i]) - lr * g / (std::sqrt(vn) + eps));
  }
}

struct StepMetrics {
  int64_t step = 0;
  double l_phi = 0;
  double l_t = 0;
  double l_task = 0;
  double wall_ms = 0;
  std::vector<std::string> warnings;
};

template <class S>
class Trainer {
 public:
  Trainer(TrainConfig cfg, const synth::DatasetBundle& data)
      : cfg_(std::move(cfg)), data_(&data) {
    cfg_.validate();
    DARCOT_REQUIRE(!data.degraded_pool.empty(), "Trainer: empty dataset");
    patch_check();
    map_ = nets::TransportMap<S>::make(cfg_.model, mix64(cfg_.seed ^ 0x7464u));
    pot_ = nets::Potential<S>::make(cfg_.model, mix64(cfg_.seed ^ 0x9a11u));
    theta_ = map_.params();
    omega_ = nets::ParamList<S>{};
    pot_.collect(omega_);
    for (auto& [n, t] : theta_.items) t.set_requires_grad(true);
    for (auto& [n, t] : omega_.items) t.set_requires_grad(true);
    v_theta_ = make_state(theta_);
    v_omega_ = make_state(omega_);
    index_by_task();
  }

  const TrainConfig& config() const { return cfg_; }
  const nets::TransportMap<S>& map() const { return map_; }
  const nets::Potential<S>& potential() const { return pot_; }
  int64_t current_step() const { return step_; }
  int64_t potential_update_count() const { return n_pot_updates_; }
  int64_t transport_update_count() const { return n_transport_updates_; }

  // One full Algorithm-1 iteration.
  StepMetrics step() {
    auto t0 = std::chrono::steady_clock::now();
    step_ += 1;
    StepMetrics m;
    m.step = step_;

    Batch batch = sample_batch(step_);

    if (cfg_.objective == Objective::l1_only) {
      transport_phase_l1(batch, m);
    } else {
      Tape<S> tape_T;
      auto out = nets::two_pass_restore(batch.y, map_);
      potential_phase(batch, out.x_hat.detach(), m);
      transport_phase(batch, out, tape_T, m, /*fresh=*/false);
      for (int t = 1; t < cfg_.n_T; ++t) {
        Tape<S> tape2;
        auto out2 = nets::two_pass_restore(batch.y, map_);
        transport_phase(batch, out2, tape2, m, /*fresh=*/true);
      }
    }

    if (!std::isfinite(m.l_phi)) fail_numeric("train_step ", step_, ": L_phi is non-finite");
    if (!std::isfinite(m.l_t)) fail_numeric("train_step ", step_, ": L_T is non-finite");
    if (!std::isfinite(m.l_task)) fail_numeric("train_step ", step_, ": L_task is non-finite");

    m.wall_ms = std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    return m;
  }

  // Runs the remaining budget, recording metrics every cfg.metrics_every
  // steps (plus the first and last step).
  std::vector<StepMetrics> fit() {
    std::vector<StepMetrics> log;
    while (step_ < cfg_.steps) {
      StepMetrics m = step();
      if (m.step == 1 || m.step == cfg_.steps ||
          (cfg_.metrics_every > 0 && m.step % cfg_.metrics_every == 0))
        log.push_back(std::move(m));
    }
    return log;
  }

  io::Checkpoint make_checkpoint(const std::string& config_hash = "") const {
    io::Checkpoint ck;
    ck.step = step_;
    ck.config_hash = config_hash;
    ck.meta["dtype"] = std::is_same_v<S, float> ? "f32" : "f64";
    ck.meta["conditioning"] = nets::conditioning_name(cfg_.model.conditioning);
    for (size_t i = 0; i < theta_.items.size(); ++i) {
      ck.tensors.emplace_back("T." + theta_.items[i].first, theta_.items[i].second.detach());
      ck.tensors.emplace_back("opt.T." + theta_.items[i].first, v_theta_[i].detach());
    }
    for (size_t i = 0; i < omega_.items.size(); ++i) {
      ck.tensors.emplace_back("phi." + omega_.items[i].first, omega_.items[i].second.detach());
      ck.tensors.emplace_back("opt.phi." + omega_.items[i].first, v_omega_[i].detach());
    }
    return ck;
  }

  void load_checkpoint(const io::Checkpoint& ck) {
    step_ = ck.step;
    auto fetch = [&](const std::string& name, Tensor<S>& dst) {
      const io::AnyTensor* t = ck.find(name);
      DARCOT_REQUIRE(t != nullptr, "checkpoint missing tensor '", name, "'");
      const Tensor<S>* typed = std::get_if<Tensor<S>>(t);
      if (!typed) throw FormatError("checkpoint tensor '" + name + "' has wrong dtype");
      DARCOT_REQUIRE(typed->shape() == dst.shape(), "checkpoint tensor '", name,
                     "' shape ", shape_str(typed->shape()), " != expected ",
                     shape_str(dst.shape()));
      std::copy(typed->data().begin(), typed->data().end(), dst.mut_data().begin());
    };
    for (size_t i = 0; i < theta_.items.size(); ++i) {
      fetch("T." + theta_.items[i].first, theta_.items[i].second);
      fetch("opt.T." + theta_.items[i].first, v_theta_[i]);
    }
    for (size_t i = 0; i < omega_.items.size(); ++i) {
      fetch("phi." + omega_.items[i].first, omega_.items[i].second);
      fetch("opt.phi." + omega_.items[i].first, v_omega_[i]);
    }
  }

 private:
  struct Batch {
    Tensor<S> y;      // [B,3,H,W]
    Tensor<S> xstar;  // [B,3,H,W] ground-truth pairs (paired mode)
    Tensor<S> x;      // [B,3,H,W] clean batch for E_Q[phi]
    std::vector<synth::Task> tasks;
    std::vector<int> labels;
  };

  void patch_check() {
    const auto& first = data_->degraded_pool.front().degraded;
    for (const auto& item : data_->degraded_pool)
      DARCOT_REQUIRE(item.degraded.shape() == first.shape(),
                     "Trainer: all patches must share one shape");
    DARCOT_REQUIRE(first.dim(1) % 4 == 0 && first.dim(2) % 4 == 0,
                   "Trainer: patch size must be divisible by 4");
  }

  static std::vector<Tensor<S>> make_state(const nets::ParamList<S>& params) {
    std::vector<Tensor<S>> v;
    v.reserve(params.items.size());
    for (const auto& [n, t] : params.items) v.push_back(Tensor<S>::zeros(t.shape()));
    return v;
  }

  void index_by_task() {
    for (size_t i = 0; i < data_->degraded_pool.size(); ++i)
      by_task_[int(data_->degraded_pool[i].task)].push_back(i);
    for (auto& [t, v] : by_task_) task_order_.push_back(t);
    std::sort(task_order_.begin(), task_order_.end());
  }

  static void to_batch_slot(Tensor<S>& batch, int64_t slot, const synth::Image& img) {
    auto src = img.data();
    auto dst = batch.mut_data();
    int64_t chunk = img.numel();
    for (int64_t i = 0; i < chunk; ++i) dst[size_t(slot * chunk + i)] = S(src[size_t(i)]);
  }

  // Stratified sampling: tasks cycle round-robin, indices drawn from the
  // per-task pools. Unpaired mode draws the clean batch independently
  // (random shuffling of targets against inputs).
  Batch sample_batch(int64_t step) {
    const auto& pool = data_->degraded_pool;
    const auto& shape = pool.front().degraded.shape();
    const int64_t b = cfg_.batch_size;
    Batch out;
    out.y = Tensor<S>::zeros({b, shape[0], shape[1], shape[2]});
    out.xstar = Tensor<S>::zeros({b, shape[0], shape[1], shape[2]});
    out.x = Tensor<S>::zeros({b, shape[0], shape[1], shape[2]});
    Rng rng = Rng::at(cfg_.seed, "data", uint64_t(step));
    Rng rng_clean = Rng::at(cfg_.seed, "data_clean", uint64_t(step));
    for (int64_t i = 0; i < b; ++i) {
      int task = task_order_[size_t(i % int64_t(task_order_.size()))];
      const auto& ids = by_task_[task];
      size_t idx = ids[size_t(rng.below(ids.size()))];
      const auto& item = pool[idx];
      to_batch_slot(out.y, i, item.degraded);
      to_batch_slot(out.xstar, i, data_->clean_pool[size_t(item.clean_index)]);
      out.tasks.push_back(item.task);
      out.labels.push_back(int(item.task));
      if (data_->paired) {
        to_batch_slot(out.x, i, data_->clean_pool[size_t(item.clean_index)]);
      } else {
        size_t ci = size_t(rng_clean.below(data_->clean_pool.size()));
        to_batch_slot(out.x, i, data_->clean_pool[ci]);
      }
    }
    return out;
  }

  void set_omega_requires_grad(bool rg) {
    for (auto& [n, t] : omega_.items) t.set_requires_grad(rg);
  }

  void apply_updates(nets::ParamList<S>& params, std::vector<Tensor<S>>& vstate, double lr) {
    for (size_t i = 0; i < params.items.size(); ++i) {
      Tensor<S>& p = params.items[i].second;
      std::vector<S> g = p.grad();
      rmsprop_update(p, g, vstate[i], lr, cfg_.rmsprop_decay, cfg_.rmsprop_eps);
      p.zero_grad();
    }
  }

  // Lines 3-4: L_phi over a frozen T(y), one RMSProp step on omega.
  void potential_phase(const Batch& batch, const Tensor<S>& ty_frozen, StepMetrics& m) {
    Tape<S> tape_phi;
    Tensor<S> phi_ty = pot_(ty_frozen);
    Tensor<S> phi_x = pot_(batch.x);
    Tensor<S> l_phi = losses::loss_potential(phi_ty, phi_x);
    if (cfg_.grad_penalty > 0)
      l_phi = ops::add(l_phi, lipschitz_penalty(batch, ty_frozen));
    m.l_phi = double(l_phi.item());
    tape_phi.backward(l_phi);
    apply_updates(omega_, v_omega_, cfg_.lr_phi);
    n_pot_updates_ += 1;
  }

  // Finite-difference directional penalty pushing |d phi| toward 1 along a
  // random direction at points between T(y) and x. First-order only.
  Tensor<S> lipschitz_penalty(const Batch& batch, const Tensor<S>& ty) {
    const double eps = 1e-2;
    Rng rng = Rng::at(cfg_.seed, "gp", uint64_t(step_));
    Tensor<S> mixed = Tensor<S>::zeros(ty.shape());
    Tensor<S> bumped = Tensor<S>::zeros(ty.shape());
    const int64_t b = ty.dim(0);
    const int64_t chunk = ty.numel() / b;
    for (int64_t i = 0; i < b; ++i) {
      double t = rng.uniform();
      std::vector<double> dir(static_cast<size_t>(chunk));
      double norm = 0;
      for (auto& d : dir) {
        d = rng.normal();
        norm += d * d;
      }
      norm = std::sqrt(std::max(norm, 1e-30));
      for (int64_t j = 0; j < chunk; ++j) {
        double base = t * double(batch.x.data()[size_t(i * chunk + j)]) +
                      (1 - t) * double(ty.data()[size_t(i * chunk + j)]);
        mixed.mut_data()[size_t(i * chunk + j)] = S(base);
        bumped.mut_data()[size_t(i * chunk + j)] = S(base + eps * dir[size_t(j)] / norm);
      }
    }
    Tensor<S> delta = ops::div(ops::sub(pot_(bumped), pot_(mixed)), Tensor<S>::scalar(S(eps)));
    Tensor<S> mag = ops::add(ops::relu(delta), ops::relu(ops::mul(delta, Tensor<S>::scalar(S(-1)))));
    Tensor<S> dev = ops::sub(mag, Tensor<S>::full({ty.dim(0)}, S(1)));
    return ops::mul(Tensor<S>::scalar(S(cfg_.grad_penalty)), ops::mean(ops::mul(dev, dev)));
  }

  // Lines 5-15: L_T (+ gamma L_task), one RMSProp step on theta.
  void transport_phase(const Batch& batch, const nets::TwoPassOut<S>& out, Tape<S>& tape,
                       StepMetrics& m, bool fresh) {
    (void)fresh;
    set_omega_requires_grad(false);  // phi is a frozen critic here
    Tensor<S> phi_ty = pot_(out.x_hat);
    losses::CostConfig cost = cfg_.cost_config();
    Tensor<S> l_t =
        cfg_.paired
            ? losses::loss_transport_paired(batch.y, out.x_hat, batch.xstar, phi_ty,
                                            batch.tasks, cost)
            : losses::loss_transport_unpaired(batch.y, out.x_hat, phi_ty, batch.tasks, cost);
    Tensor<S> total = l_t;
    m.l_t = double(l_t.item());
    m.l_task = 0;

    bool want_task_loss = cfg_.use_task_loss && cfg_.gamma_task > 0 &&
                          task_order_.size() > 1 && out.embeddings.r1.has_value();
    if (want_task_loss && cfg_.batch_size < 2) {
      m.warnings.push_back("L_task skipped: batch smaller than 2");
      want_task_loss = false;
    }
    if (want_task_loss) {
      Tensor<S> pooled = nets::pooled_r1(out.embeddings);
      auto task_res = losses::loss_task_contrastive(pooled, batch.labels, cfg_.tau);
      for (auto& f : task_res.flags) m.warnings.push_back(f);
      m.l_task = double(task_res.loss.item());
      total = ops::add(total, ops::mul(Tensor<S>::scalar(S(cfg_.gamma_task)), task_res.loss));
    }

    tape.backward(total);
    set_omega_requires_grad(true);
    apply_updates(theta_, v_theta_, cfg_.lr_T);
    n_transport_updates_ += 1;
  }

  // Supervised baseline arm: L = mean ||T(y) - x*||_1, no potential.
  void transport_phase_l1(const Batch& batch, StepMetrics& m) {
    for (int t = 0; t < cfg_.n_T; ++t) {
      Tape<S> tape;
      auto out = nets::two_pass_restore(batch.y, map_);
      Tensor<S> l = ops::mean(ops::l1_norm_per_sample(ops::sub(out.x_hat, batch.xstar)));
      m.l_t = double(l.item());
      m.l_phi = 0;
      m.l_task = 0;
      tape.backward(l);
      apply_updates(theta_, v_theta_, cfg_.lr_T);
      n_transport_updates_ += 1;
    }
  }

  TrainConfig cfg_;
  const synth::DatasetBundle* data_;
  nets::TransportMap<S> map_;
  nets::Potential<S> pot_;
  nets::ParamList<S> theta_, omega_;
  std::vector<Tensor<S>> v_theta_, v_omega_;
  std::map<int, std::vector<size_t>> by_task_;
  std::vector<int> task_order_;
  int64_t step_ = 0;
  int64_t n_pot_updates_ = 0, n_transport_updates_ = 0;
};

template <class S>
struct FitResult {
  nets::TransportMap<S> map;
  nets::Potential<S> potential;
  std::vector<StepMetrics> metrics;
  io::Checkpoint checkpoint;
};

template <class S>
FitResult<S> fit(const TrainConfig& cfg, const synth::DatasetBundle& data,
                 const std::string& config_hash = "") {
  Trainer<S> trainer(cfg, data);
  FitResult<S> out;
  out.metrics = trainer.fit();
  out.map = trainer.map();
  out.potential = trainer.potential();
  out.checkpoint = trainer.make_checkpoint(config_hash);
  return out;
}

// Rebuilds a transport map (and potential) from a checkpoint produced by
// Trainer::make_checkpoint.
template <class S>
nets::TransportMap<S> map_from_checkpoint(const io::Checkpoint& ck, const nets::ModelConfig& cfg) {
  nets::TransportMap<S> map = nets::TransportMap<S>::make(cfg, 0);
  auto params = map.params();
  for (auto& [name, t] : params.items) {
    const io::AnyTensor* stored = ck.find("T." + name);
    DARCOT_REQUIRE(stored != nullptr, "checkpoint missing tensor 'T.", name, "'");
    const Tensor<S>* typed = std::get_if<Tensor<S>>(stored);
    if (!typed) throw FormatError("checkpoint tensor 'T." + name + "' has wrong dtype");
    DARCOT_REQUIRE(typed->shape() == t.shape(), "checkpoint tensor 'T.", name, "' has shape ",
                   shape_str(typed->shape()), ", expected ", shape_str(t.shape()));
    std::copy(typed->data().begin(), typed->data().end(), t.mut_data().begin());
  }
  return map;
}

}  // namespace darcot::train
