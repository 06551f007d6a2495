#pragma once

// Transport costs and the unpaired/paired minimax losses, plus the
// contrastive task-identification loss. Everything here is an ordinary op
// composition, so all losses are differentiable end-to-end.

#include <map>
#include <string>
#include <vector>

#include "darcot/ops.hpp"
#include "darcot/synth.hpp"

namespace darcot::losses {

enum class RegMode { fourier_l1, fourier_l2, off };

inline const char* reg_mode_name(RegMode m) {
  switch (m) {
    case RegMode::fourier_l1: return "fourier_l1";
    case RegMode::fourier_l2: return "fourier_l2";
    case RegMode::off: return "off";
  }
  return "?";
}
inline RegMode reg_mode_from_name(const std::string& s) {
  if (s == "fourier_l1") return RegMode::fourier_l1;
  if (s == "fourier_l2") return RegMode::fourier_l2;
  if (s == "off") return RegMode::off;
  fail_contract("unknown residual_reg_mode '", s, "'");
}

// Residual-regularizer selection and the scalar weights of the objective.
struct CostConfig {
  RegMode residual_reg_mode = RegMode::fourier_l1;     // fallback mode
  std::map<synth::Task, RegMode> per_task_reg;         // task-specific override
  double lambda_pair = 10.0;  // weight of the paired l1 term
  double gamma_task = 0.1;    // weight of the contrastive task loss
  double tau = 0.07;          // contrastive temperature

  // The l2 regularizer is reserved for denoising; every other task defaults
  // to the sparser l1 penalty.
  static CostConfig defaults() {
    CostConfig c;
    c.per_task_reg[synth::Task::noise] = RegMode::fourier_l2;
    return c;
  }

  static CostConfig without_reg() {
    CostConfig c = defaults();
    c.residual_reg_mode = RegMode::off;
    c.per_task_reg.clear();
    return c;
  }

  RegMode reg_for(synth::Task t) const {
    auto it = per_task_reg.find(t);
    return it == per_task_reg.end() ? residual_reg_mode : it->second;
  }

  void validate() const {
    DARCOT_REQUIRE(tau > 0, "CostConfig: tau must be > 0, got ", tau);
    DARCOT_REQUIRE(lambda_pair >= 0, "CostConfig: lambda_pair must be >= 0");
    DARCOT_REQUIRE(gamma_task >= 0, "CostConfig: gamma_task must be >= 0");
  }
};

// c(y, x) = ||y - x||, the Euclidean norm over all entries.
template <class S>
Tensor<S> transport_cost(const Tensor<S>& y, const Tensor<S>& t_y) {
  DARCOT_REQUIRE(y.shape() == t_y.shape(), "transport_cost: shape mismatch ",
                 shape_str(y.shape()), " vs ", shape_str(t_y.shape()));
  return ops::l2_norm(ops::sub(y, t_y));
}

// g(r): norm of the unnormalized DFT magnitudes of the residual.
template <class S>
Tensor<S> residual_reg(const Tensor<S>& r, RegMode mode) {
  switch (mode) {
    case RegMode::fourier_l1: return ops::l1_norm(ops::fft2_magnitudes(r));
    case RegMode::fourier_l2: return ops::l2_norm(ops::fft2_magnitudes(r));
    case RegMode::off: return Tensor<S>::scalar(S(0));
  }
  fail_contract("residual_reg: bad mode");
}

namespace detail {

template <class S>
void check_batch(const char* op, const Tensor<S>& y, const Tensor<S>& t_y,
                 const Tensor<S>& phi, const std::vector<synth::Task>& tasks) {
  DARCOT_REQUIRE(y.rank() >= 2, op, ": batches must be [N,...], got ",
                 shape_str(y.shape()));
  DARCOT_REQUIRE(y.dim(0) > 0, op, ": empty batch");
  DARCOT_REQUIRE(y.shape() == t_y.shape(), op, ": y/T(y) shape mismatch ",
                 shape_str(y.shape()), " vs ", shape_str(t_y.shape()));
  DARCOT_REQUIRE(phi.rank() == 1 && phi.dim(0) == y.dim(0), op,
                 ": phi values must be [N]=[", y.dim(0), "], got ",
                 shape_str(phi.shape()));
  DARCOT_REQUIRE(int64_t(tasks.size()) == y.dim(0), op, ": need one task label per sample");
}

// Per-sample g(y - T(y)) selected by task label; [N] tensor. Skips the
// spectral transform entirely when every sample is in `off` mode.
template <class S>
Tensor<S> per_sample_reg(const Tensor<S>& residual, const std::vector<synth::Task>& tasks,
                         const CostConfig& cfg) {
  const int64_t n = residual.dim(0);
  Tensor<S> mask_l1 = Tensor<S>::zeros({n});
  Tensor<S> mask_l2 = Tensor<S>::zeros({n});
  bool any_l1 = false, any_l2 = false;
  for (int64_t i = 0; i < n; ++i) {
    switch (cfg.reg_for(tasks[size_t(i)])) {
      case RegMode::fourier_l1:
        mask_l1.mut_data()[size_t(i)] = S(1);
        any_l1 = true;
        break;
      case RegMode::fourier_l2:
        mask_l2.mut_data()[size_t(i)] = S(1);
        any_l2 = true;
        break;
      case RegMode::off: break;
    }
  }
  if (!any_l1 && !any_l2) return Tensor<S>::zeros({n});
  Tensor<S> mags = ops::fft2_magnitudes(residual);
  Tensor<S> out;
  if (any_l1) out = ops::mul(ops::l1_norm_per_sample(mags), mask_l1);
  if (any_l2) {
    Tensor<S> l2m = ops::mul(ops::l2_norm_per_sample(mags), mask_l2);
    out = any_l1 ? ops::add(out, l2m) : l2m;
  }
  return out;
}

}  // namespace detail

// Discretized L_u transport term: mean over the batch of
//   c(y, T(y)) + g(y - T(y)) - phi(T(y)).
template <class S>
Tensor<S> loss_transport_unpaired(const Tensor<S>& batch_y, const Tensor<S>& batch_ty,
                                  const Tensor<S>& batch_phi_of_ty,
                                  const std::vector<synth::Task>& tasks,
                                  const CostConfig& cfg) {
  detail::check_batch("loss_transport_unpaired", batch_y, batch_ty, batch_phi_of_ty, tasks);
  cfg.validate();
  Tensor<S> residual = ops::sub(batch_y, batch_ty);
  Tensor<S> c = ops::l2_norm_per_sample(residual);
  Tensor<S> g = detail::per_sample_reg(residual, tasks, cfg);
  return ops::mean(ops::sub(ops::add(c, g), batch_phi_of_ty));
}

// Discretized L_p transport term: the unpaired term plus
//   lambda * mean ||T(y) - x*(y)||_1.
template <class S>
Tensor<S> loss_transport_paired(const Tensor<S>& batch_y, const Tensor<S>& batch_ty,
                                const Tensor<S>& batch_xstar,
                                const Tensor<S>& batch_phi_of_ty,
                                const std::vector<synth::Task>& tasks,
                                const CostConfig& cfg) {
  DARCOT_REQUIRE(batch_xstar.shape() == batch_ty.shape(),
                 "loss_transport_paired: missing or mismatched pairs, x* ",
                 shape_str(batch_xstar.shape()), " vs T(y) ",
                 shape_str(batch_ty.shape()));
  Tensor<S> base =
      loss_transport_unpaired(batch_y, batch_ty, batch_phi_of_ty, tasks, cfg);
  if (cfg.lambda_pair == 0) return base;  // bitwise reduction to the unpaired loss
  Tensor<S> pair = ops::mean(ops::l1_norm_per_sample(ops::sub(batch_ty, batch_xstar)));
  return ops::add(base, ops::mul(Tensor<S>::scalar(S(cfg.lambda_pair)), pair));
}

// L_phi = mean phi(T(y)) - mean phi(x). Minimizing in omega performs the sup
// over potentials in the minimax objective.
template <class S>
Tensor<S> loss_potential(const Tensor<S>& phi_of_ty, const Tensor<S>& phi_of_x) {
  DARCOT_REQUIRE(phi_of_ty.rank() == 1 && phi_of_ty.dim(0) > 0 &&
                     phi_of_x.rank() == 1 && phi_of_x.dim(0) > 0,
                 "loss_potential: empty batch");
  return ops::sub(ops::mean(phi_of_ty), ops::mean(phi_of_x));
}

template <class S>
struct ContrastiveResult {
  Tensor<S> loss;
  std::vector<std::string> flags;  // tasks that had no positive pair
};

// Contrastive task-identification loss over pooled embeddings.
//
// For each task k with at least one positive pair:
//   -log( P_k / (P_k + N_k) )
// where P_k and N_k average exp(sim/tau) over the positive (same task,
// self-pairs excluded) and negative (anchor in k, other task) pairs.
// Averaging makes the symmetric equal-similarity case evaluate to K*log 2
// for any batch composition. Rows are L2-normalized before dot products.
template <class S>
ContrastiveResult<S> loss_task_contrastive(const Tensor<S>& embeddings,
                                           const std::vector<int>& labels,
                                           double tau) {
  DARCOT_REQUIRE(embeddings.rank() == 2, "loss_task_contrastive: embeddings must be [N,C], got ",
                 shape_str(embeddings.shape()));
  const int64_t n = embeddings.dim(0);
  DARCOT_REQUIRE(n > 0, "loss_task_contrastive: empty batch");
  DARCOT_REQUIRE(int64_t(labels.size()) == n,
                 "loss_task_contrastive: need one label per embedding");
  DARCOT_REQUIRE(tau > 0, "loss_task_contrastive: tau must be > 0, got ", tau);

  Tensor<S> e = ops::l2_normalize_rows(embeddings);
  Tensor<S> sim = ops::matmul(e, e, false, true);                       // [N,N]
  Tensor<S> z = ops::exp(ops::div(sim, Tensor<S>::scalar(S(tau))));     // [N,N]

  std::vector<int> tasks;
  for (int l : labels)
    if (std::find(tasks.begin(), tasks.end(), l) == tasks.end()) tasks.push_back(l);

  ContrastiveResult<S> out;
  out.loss = Tensor<S>::scalar(S(0));
  for (int k : tasks) {
    Tensor<S> pos_mask = Tensor<S>::zeros({n, n});
    Tensor<S> neg_mask = Tensor<S>::zeros({n, n});
    int64_t pos_count = 0, neg_count = 0;
    for (int64_t i = 0; i < n; ++i) {
      if (labels[size_t(i)] != k) continue;
      for (int64_t j = 0; j < n; ++j) {
        if (i == j) continue;
        if (labels[size_t(j)] == k) {
          pos_mask.mut_data()[size_t(i * n + j)] = S(1);
          ++pos_count;
        } else {
          neg_mask.mut_data()[size_t(i * n + j)] = S(1);
          ++neg_count;
        }
      }
    }
    if (pos_count == 0) {
      out.flags.push_back(cat("task ", k, " has a single sample; contributes 0"));
      continue;
    }
    Tensor<S> p_mean = ops::div(ops::sum(ops::mul(z, pos_mask)),
                                Tensor<S>::scalar(S(double(pos_count))));
    if (neg_count == 0) continue;  // -log(1) contributes exactly 0
    Tensor<S> n_mean = ops::div(ops::sum(ops::mul(z, neg_mask)),
                                Tensor<S>::scalar(S(double(neg_count))));
    Tensor<S> term = ops::sub(ops::log(ops::add(p_mean, n_mean)), ops::log(p_mean));
    out.loss = ops::add(out.loss, term);
  }
  return out;
}

}  // namespace darcot::losses
