#pragma once

// Training loops for the two-encoder alternating (SDMI) and shared-encoder
// joint (JMI) prototypes, the SimSiam/BYOL-style baselines and the
// marginal-term / predictor ablations.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mimax/autodiff.hpp"
#include "mimax/encoder.hpp"
#include "mimax/errors.hpp"
#include "mimax/metrics.hpp"
#include "mimax/objectives.hpp"
#include "mimax/optimizer.hpp"
#include "mimax/rng.hpp"
#include "mimax/synth_data.hpp"

namespace mimax {

enum class Method {
  kSdmi,
  kJmi,
  kSimSiam,
  kByol,
  kSdmiNoDv,
  kSdmiNoDvPred,
  kSimSiamNoPred,
  kSimSiamSdmi,
};

inline constexpr std::array<std::pair<Method, std::string_view>, 8> kMethodNames{{
    {Method::kSdmi, "sdmi"},
    {Method::kJmi, "jmi"},
    {Method::kSimSiam, "simsiam"},
    {Method::kByol, "byol"},
    {Method::kSdmiNoDv, "sdmi-nodv"},
    {Method::kSdmiNoDvPred, "sdmi-nodv-pred"},
    {Method::kSimSiamNoPred, "simsiam-nopred"},
    {Method::kSimSiamSdmi, "simsiam-sdmi"},
}};

inline std::string_view method_name(Method m) {
  for (const auto& [method, name] : kMethodNames)
    if (method == m) return name;
  return "?";
}

inline std::optional<Method> parse_method(std::string_view name) {
  for (const auto& [method, n] : kMethodNames)
    if (n == name) return method;
  return std::nullopt;
}

inline std::string valid_method_list() {
  std::string out;
  for (const auto& [method, name] : kMethodNames) {
    if (!out.empty()) out += ", ";
    out += name;
  }
  return out;
}

/// Two independently updated encoders (alternating E/M passes).
inline bool is_two_encoder(Method m) {
  return m == Method::kSdmi || m == Method::kSdmiNoDv ||
         m == Method::kSdmiNoDvPred;
}

/// Single encoder whose target branch is its own stop-gradient output.
inline bool is_self_target(Method m) {
  return m == Method::kSimSiam || m == Method::kSimSiamNoPred ||
         m == Method::kSimSiamSdmi;
}

struct TrainConfig {
  Method method = Method::kSdmi;
  std::size_t epochs = 100;
  std::size_t batch_size = 500;
  bool full_batch = false;
  // Redraw view noise every epoch. Unset: fixed views for full-batch runs,
  // redrawn for minibatch runs.
  std::optional<bool> resample_views;
  double temp = 0.1;
  double lr = 0.5;
  LrSchedule schedule = LrSchedule::kCosine;
  double weight_decay = 0.0;
  double ema_tau = 0.996;
  double bn_momentum = 0.1;
  std::size_t predictor_hidden = kDefaultPredictorHidden;
  bool byol_predictor = true;
  std::uint64_t seed = 0;
  GaussianMixtureSpec data;  // data.seed is overwritten by `seed`

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!full_batch && batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(ema_tau >= 0.0 && ema_tau <= 1.0))
      throw ConfigError("ema_tau must lie in [0, 1]");
    if (!(bn_momentum > 0.0 && bn_momentum < 1.0))
      throw ConfigError("bn_momentum must lie in (0, 1)");
    if (predictor_hidden < 1) throw ConfigError("predictor_hidden must be >= 1");
    (void)Temperature(temp);
    data.validate();
  }

  bool views_resampled() const { return resample_views.value_or(!full_batch); }

  GaussianMixtureSpec data_spec() const {
    GaussianMixtureSpec s = data;
    s.seed = seed;
    return s;
  }
};

struct TrainerOutput {
  Method method = Method::kSdmi;
  EncoderParams encoder;                    // f (online)
  std::optional<EncoderParams> second;      // g (SDMI) or EMA target (BYOL)
  std::optional<PredictorParams> predictor;    // on f
  std::optional<PredictorParams> predictor_g;  // on g (sdmi-nodv-pred)
  std::vector<MITraceRow> trace;            // epochs 1..E
  std::vector<Tensor> centers;              // epochs 0..E, k x 3 each
  std::vector<Tensor> centers_second;       // same, for `second`
  std::vector<double> train_loss;           // mean minibatch loss per epoch
};

/// Called after every epoch with the 1-based epoch and the state so far.
using EpochHook = std::function<void(std::size_t, const TrainerOutput&)>;

/// Row-index minibatches for one pass. Trailing batches with fewer than two
/// rows are dropped since batch statistics need two samples.
inline std::vector<std::vector<std::size_t>> make_minibatches(
    std::size_t n, const TrainConfig& cfg, std::uint64_t shuffle_seed) {
  std::vector<std::vector<std::size_t>> out;
  if (cfg.full_batch || cfg.batch_size >= n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    out.push_back(std::move(all));
    return out;
  }
  Rng rng(shuffle_seed);
  const auto perm = rng.permutation(n);
  for (std::size_t start = 0; start < n; start += cfg.batch_size) {
    const std::size_t end = std::min(n, start + cfg.batch_size);
    if (end - start < 2) break;
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                     perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

namespace detail {

inline std::vector<Tensor*> param_ptrs(NamedTensors named) {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named) out.push_back(t);
  return out;
}

inline void require_finite(const char* module, NamedTensors named,
                           std::size_t epoch) {
  for (const auto& [name, t] : named) {
    if (!t->all_finite()) {
      throw std::runtime_error("non-finite value in " + std::string(module) +
                               "." + name + " during epoch " +
                               std::to_string(epoch + 1));
    }
  }
}

inline void require_no_grad(const Tape& tape, const BoundParams& b,
                            const char* which) {
  for (const Var& v : b.vars) {
    if (tape.has_grad(v)) {
      throw std::logic_error(std::string("stop-gradient violated: ") + which +
                             " received a gradient");
    }
  }
}

/// Symmetric "online vs. frozen" loss for the method family.
inline LossExpr branch_loss(Method m, const Var& online1, const Var& online2,
                            const Var& frozen1, const Var& frozen2,
                            Temperature temp) {
  switch (m) {
    case Method::kSdmi:
    case Method::kSimSiamSdmi: {
      const LossExpr a = cos_dv_loss(online1, frozen2, temp);
      const LossExpr b = cos_dv_loss(online2, frozen1, temp);
      return {scalar_mul(add(a.total, b.total), 0.5),
              scalar_mul(add(a.joint, b.joint), 0.5),
              scalar_mul(add(a.marginal, b.marginal), 0.5)};
    }
    case Method::kSdmiNoDv:
    case Method::kSdmiNoDvPred: {
      const LossExpr a = joint_only_loss(online1, frozen2, temp);
      const LossExpr b = joint_only_loss(online2, frozen1, temp);
      return {scalar_mul(add(a.total, b.total), 0.5),
              scalar_mul(add(a.joint, b.joint), 0.5),
              scalar_mul(add(a.marginal, b.marginal), 0.5)};
    }
    default: {
      Var l = scalar_mul(add(neg_cosine_loss(online1, frozen2),
                             neg_cosine_loss(online2, frozen1)),
                         0.5);
      Var zero = l.tape()->constant(Tensor::scalar(0.0));
      return {l, neg(l), zero};
    }
  }
}

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
          EpochHook hook = {})
      : cfg_(cfg),
        hook_(std::move(hook)),
        train_(train),
        val_(make_paired_views(val, cfg.data.tau,
                               derive_seed(cfg.seed, "validation-views"))),
        spec_(cfg.data_spec()),
        temp_(cfg.temp),
        opt_{cfg.lr, cfg.weight_decay, cfg.schedule, cfg.epochs} {
    cfg.validate();
    Rng init_f(derive_seed(cfg.seed, "init-f"));
    out_.method = cfg.method;
    out_.encoder = init_encoder(init_f);
    set_bn_momentum(out_.encoder);
    if (is_two_encoder(cfg.method)) {
      Rng init_g(derive_seed(cfg.seed, "init-g"));
      out_.second = init_encoder(init_g);
      set_bn_momentum(*out_.second);
    }
    if (cfg.method == Method::kByol) out_.second = copy_params(out_.encoder);
    if (uses_predictor()) {
      Rng init_p(derive_seed(cfg.seed, "init-predictor"));
      out_.predictor = init_predictor(init_p, cfg.predictor_hidden);
    }
    if (cfg.method == Method::kSdmiNoDvPred) {
      Rng init_pg(derive_seed(cfg.seed, "init-predictor-g"));
      out_.predictor_g = init_predictor(init_pg, cfg.predictor_hidden);
    }
  }

  TrainerOutput run() {
    record_centers();
    std::optional<EncoderParams> previous;
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      if (is_self_target(cfg_.method)) previous = out_.encoder;
      const double lr = opt_.lr_at(epoch);
      const PairedBatch views = make_paired_views(
          train_, cfg_.data.tau,
          derive_seed(cfg_.seed, "train-views",
                      cfg_.views_resampled() ? epoch : 0));
      double loss = 0.0;
      if (is_two_encoder(cfg_.method)) {
        loss += alternating_pass(views, epoch, lr, /*e_step=*/true);
        loss += alternating_pass(views, epoch, lr, /*e_step=*/false);
        loss *= 0.5;
      } else {
        loss = joint_pass(views, epoch, lr);
      }
      out_.train_loss.push_back(loss);
      record_epoch(epoch, previous);
      if (hook_) hook_(epoch + 1, out_);
    }
    return std::move(out_);
  }

 private:
  void set_bn_momentum(EncoderParams& p) const {
    p.bn1.momentum = cfg_.bn_momentum;
    p.bn2.momentum = cfg_.bn_momentum;
  }

  bool uses_predictor() const {
    switch (cfg_.method) {
      case Method::kSimSiam:
      case Method::kSdmiNoDvPred:
        return true;
      case Method::kByol:
        return cfg_.byol_predictor;
      default:
        return false;
    }
  }

  std::vector<std::vector<std::size_t>> batches(std::size_t epoch,
                                                std::size_t pass) const {
    return make_minibatches(train_.labels.size(), cfg_,
                            derive_seed(cfg_.seed, "shuffle", 2 * epoch + pass));
  }

  // E-step (e_step = true) updates f against stop-gradient g outputs; the
  // M-step mirrors it. One optimizer step per minibatch.
  double alternating_pass(const PairedBatch& views, std::size_t epoch,
                          double lr, bool e_step) {
    EncoderParams& online = e_step ? out_.encoder : *out_.second;
    EncoderParams& frozen = e_step ? *out_.second : out_.encoder;
    std::optional<PredictorParams>& pred =
        e_step ? out_.predictor : out_.predictor_g;
    const auto mbs = batches(epoch, e_step ? 0 : 1);
    double total = 0.0;
    for (const auto& idx : mbs) {
      const PairedBatch b = gather(views, idx);
      Tape tape;
      const BoundParams bo = bind(tape, online, true);
      const BoundParams bf = bind(tape, frozen, true);
      Var x1 = tape.constant(b.x1);
      Var x2 = tape.constant(b.x2);
      EncodeResult o1 = encode(tape, bo, online, x1, Mode::kTrain);
      EncodeResult o2 = encode(tape, bo, online, x2, Mode::kTrain);
      EncodeResult f1 = encode(tape, bf, frozen, x1, Mode::kTrain);
      EncodeResult f2 = encode(tape, bf, frozen, x2, Mode::kTrain);
      Var a1 = o1.z, a2 = o2.z;
      BoundParams bp;
      if (pred) {
        bp = bind(tape, *pred, true);
        a1 = predict(bp, a1);
        a2 = predict(bp, a2);
      }
      const LossExpr loss =
          branch_loss(cfg_.method, a1, a2, stop_gradient(f1.z),
                      stop_gradient(f2.z), temp_);
      tape.backward(loss.total);
      require_no_grad(tape, bf, e_step ? "frozen g during E-step"
                                       : "frozen f during M-step");
      opt_.step(param_ptrs(named_parameters(online)), gradients(tape, bo), lr);
      update_running_stats(online, o1.stats);
      update_running_stats(online, o2.stats);
      if (pred) {
        opt_.step(param_ptrs(named_parameters(*pred)), gradients(tape, bp), lr);
        require_finite("predictor", named_parameters(*pred), epoch);
      }
      require_finite(e_step ? "f" : "g", named_parameters(online), epoch);
      total += loss.values().total;
    }
    return total / static_cast<double>(mbs.size());
  }

  double joint_pass(const PairedBatch& views, std::size_t epoch, double lr) {
    const auto mbs = batches(epoch, 0);
    double total = 0.0;
    EncoderParams& f = out_.encoder;
    for (const auto& idx : mbs) {
      const PairedBatch b = gather(views, idx);
      Tape tape;
      const BoundParams bf = bind(tape, f, true);
      Var x1 = tape.constant(b.x1);
      Var x2 = tape.constant(b.x2);
      EncodeResult r1 = encode(tape, bf, f, x1, Mode::kTrain);
      EncodeResult r2 = encode(tape, bf, f, x2, Mode::kTrain);
      BoundParams bp;
      Var p1 = r1.z, p2 = r2.z;
      if (out_.predictor) {
        bp = bind(tape, *out_.predictor, true);
        p1 = predict(bp, r1.z);
        p2 = predict(bp, r2.z);
      }
      LossExpr loss;
      switch (cfg_.method) {
        case Method::kJmi:
          loss = symmetric(cos_dv_loss, r1.z, r2.z, temp_);
          break;
        case Method::kByol: {
          const BoundParams bt = bind(tape, *out_.second, false);
          Var t1 = encode(tape, bt, *out_.second, x1, Mode::kTrain).z;
          Var t2 = encode(tape, bt, *out_.second, x2, Mode::kTrain).z;
          loss = branch_loss(cfg_.method, p1, p2, stop_gradient(t1),
                             stop_gradient(t2), temp_);
          break;
        }
        default:
          // Target reset after every step means the frozen branch is this
          // step's own encoder output under a stop-gradient.
          loss = branch_loss(cfg_.method, p1, p2, stop_gradient(r1.z),
                             stop_gradient(r2.z), temp_);
      }
      tape.backward(loss.total);
      opt_.step(param_ptrs(named_parameters(f)), gradients(tape, bf), lr);
      update_running_stats(f, r1.stats);
      update_running_stats(f, r2.stats);
      if (out_.predictor) {
        opt_.step(param_ptrs(named_parameters(*out_.predictor)),
                  gradients(tape, bp), lr);
        require_finite("predictor", named_parameters(*out_.predictor), epoch);
      }
      if (cfg_.method == Method::kByol) {
        ema_update(*out_.second, f, cfg_.ema_tau);
      }
      require_finite("f", named_parameters(f), epoch);
      total += loss.values().total;
    }
    return total / static_cast<double>(mbs.size());
  }

  void record_centers() {
    out_.centers.push_back(track_centers(out_.encoder, spec_));
    if (out_.second) {
      out_.centers_second.push_back(track_centers(*out_.second, spec_));
    }
  }

  void record_epoch(std::size_t epoch,
                    const std::optional<EncoderParams>& previous) {
    record_centers();
    MITraceRow row;
    row.epoch = epoch + 1;
    const EncoderParams& branch_b =
        out_.second ? *out_.second : (previous ? *previous : out_.encoder);
    const MIEstimates mi =
        estimate_mi_epoch(out_.encoder, branch_b, val_, temp_);
    row.mi_cos_dv = mi.cos_dv;
    row.mi_infonce = mi.infonce;
    row.mi_jsd = mi.jsd;
    row.mean_pairwise_cos =
        collapse_score(encode_eval(out_.encoder, val_.x1)).mean_pairwise_cos;
    row.nn_gap = nn_angle_gaps(out_.centers.back());
    out_.trace.push_back(row);
  }

  TrainConfig cfg_;
  EpochHook hook_;
  const Dataset& train_;
  PairedBatch val_;
  GaussianMixtureSpec spec_;
  Temperature temp_;
  SgdOptimizer opt_;
  TrainerOutput out_;
};

}  // namespace detail

/// Runs `cfg.method` on explicit training and validation sets.
inline TrainerOutput train(const TrainConfig& cfg, const Dataset& train_data,
                           const Dataset& val_data, EpochHook hook = {}) {
  cfg.validate();
  if (train_data.labels.size() < 2 || val_data.labels.size() < 2) {
    throw BatchTooSmallError("training and validation sets need >= 2 rows");
  }
  return detail::Trainer(cfg, train_data, val_data, std::move(hook)).run();
}

/// Generates the mixture (seed) and validation set (seed + 1), then trains.
inline TrainerOutput train(const TrainConfig& cfg) {
  cfg.validate();
  const Dataset data = generate_dataset(cfg.data_spec());
  const Dataset val = generate_validation_dataset(cfg.data_spec());
  return train(cfg, data, val);
}

namespace detail {

inline void require_method(const TrainConfig& cfg,
                           std::initializer_list<Method> allowed,
                           const char* trainer) {
  for (Method m : allowed)
    if (cfg.method == m) return;
  throw ConfigError(std::string(trainer) + " cannot run method '" +
                    std::string(method_name(cfg.method)) + "'");
}

}  // namespace detail

inline TrainerOutput train_sdmi(const TrainConfig& cfg, const Dataset& d,
                                const Dataset& v) {
  detail::require_method(cfg, {Method::kSdmi}, "train_sdmi");
  return train(cfg, d, v);
}

inline TrainerOutput train_jmi(const TrainConfig& cfg, const Dataset& d,
                               const Dataset& v) {
  detail::require_method(cfg, {Method::kJmi}, "train_jmi");
  return train(cfg, d, v);
}

inline TrainerOutput train_simsiam_style(const TrainConfig& cfg,
                                         const Dataset& d, const Dataset& v) {
  detail::require_method(
      cfg, {Method::kSimSiam, Method::kSimSiamNoPred, Method::kSimSiamSdmi},
      "train_simsiam_style");
  return train(cfg, d, v);
}

inline TrainerOutput train_byol_style(const TrainConfig& cfg, const Dataset& d,
                                      const Dataset& v) {
  detail::require_method(cfg, {Method::kByol}, "train_byol_style");
  return train(cfg, d, v);
}

inline TrainerOutput train_ablation(const TrainConfig& cfg, const Dataset& d,
                                    const Dataset& v) {
  detail::require_method(cfg, {Method::kSdmiNoDv, Method::kSdmiNoDvPred},
                         "train_ablation");
  return train(cfg, d, v);
}

}  // namespace mimax
