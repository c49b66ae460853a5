#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "attnfd/checkpoint.hpp"
#include "attnfd/config.hpp"
#include "attnfd/dataset.hpp"
#include "attnfd/distill.hpp"
#include "attnfd/metrics.hpp"
#include "attnfd/segnet.hpp"

namespace attnfd {

/// Cosine decay from lr0 (step 0) to lr_min (step total_steps). Endpoints are
/// returned exactly rather than through the trig evaluation.
inline real cosine_lr(int64_t step, int64_t total_steps, real lr0, real lr_min) {
  if (total_steps < 1) throw ContractError("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) throw ContractError("cosine_lr: step outside [0,total]");
  if (!(lr0 >= lr_min)) throw ContractError("cosine_lr: lr0 must be >= lr_min");
  if (step == 0) return lr0;
  if (step == total_steps) return lr_min;
  const real t = real(step) / real(total_steps);
  return lr_min +
         real(0.5) * (lr0 - lr_min) * (real(1) + std::cos(std::numbers::pi_v<real> * t));
}

/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
inline void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, real lr,
                     real momentum, real weight_decay) {
  if (!param.same_shape(grad) || !param.same_shape(velocity))
    throw ContractError("sgd_step: param, grad and velocity shapes must agree");
  real* p = param.data();
  const real* g = grad.data();
  real* v = velocity.data();
  const int64_t n = param.size();
  for (int64_t i = 0; i < n; ++i) {
    v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
    p[i] -= lr * v[i];
  }
}

class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Param*> params, real momentum, real weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (Param* p : params_) velocity_.emplace_back(p->value.shape());
  }

  void zero_grad() {
    for (Param* p : params_) p->zero_grad();
  }

  /// Updates trainable parameters only; frozen ones stay bitwise untouched.
  void step(real lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i]->trainable) continue;
      sgd_step(params_[i]->value, params_[i]->grad, velocity_[i], lr, momentum_,
               weight_decay_);
    }
  }

 private:
  std::vector<Param*> params_;
  std::vector<Tensor> velocity_;
  real momentum_, weight_decay_;
};

namespace detail {

inline std::vector<int> shuffled_indices(int64_t n, uint64_t seed) {
  std::vector<int> idx(std::size_t(n), 0);
  for (int64_t i = 0; i < n; ++i) idx[std::size_t(i)] = int(i);
  Rng rng(seed);
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(idx[std::size_t(i)], idx[std::size_t(rng.uniform_int(0, i))]);
  return idx;
}

struct BatchData {
  Tensor images;  // (n, 3, h, w)
  LabelBatch labels;
};

inline BatchData assemble_batch(const std::vector<const Sample*>& items) {
  if (items.empty()) throw ContractError("assemble_batch: empty batch");
  const int n = int(items.size());
  const int h = items[0]->h(), w = items[0]->w();
  Tensor x({n, 3, h, w});
  LabelBatch lb;
  lb.n = n;
  lb.h = h;
  lb.w = w;
  lb.v.assign(std::size_t(n) * h * w, 0);
  const int64_t plane = int64_t(3) * h * w;
  for (int i = 0; i < n; ++i) {
    const Sample& s = *items[i];
    if (s.h() != h || s.w() != w)
      throw ContractError("assemble_batch: samples have mixed sizes");
    std::copy(s.image.data(), s.image.data() + plane, x.data() + i * plane);
    for (int64_t j = 0; j < int64_t(h) * w; ++j)
      lb.v[std::size_t(i) * h * w + std::size_t(j)] = s.label.v[std::size_t(j)];
  }
  return {std::move(x), std::move(lb)};
}

/// Pulls one shuffled batch, applying augmentation draws in batch order.
inline BatchData gather_batch(const std::vector<Sample>& data, const std::vector<int>& order,
                              int64_t begin, int64_t end, const AugPolicy& pol,
                              Rng& aug_rng) {
  std::vector<const Sample*> items;
  std::vector<Sample> staged;
  items.reserve(std::size_t(end - begin));
  if (pol.enabled) {
    staged.reserve(std::size_t(end - begin));
    for (int64_t i = begin; i < end; ++i)
      staged.push_back(augment(data[std::size_t(order[std::size_t(i)])], aug_rng, pol));
    for (const Sample& s : staged) items.push_back(&s);
  } else {
    for (int64_t i = begin; i < end; ++i)
      items.push_back(&data[std::size_t(order[std::size_t(i)])]);
  }
  return assemble_batch(items);
}

inline void require_finite_loss(const Var& loss, int64_t step) {
  if (!std::isfinite(loss.value()[0]))
    throw NumericError("non-finite loss at step " + std::to_string(step));
}

}  // namespace detail

struct EvalResult {
  double miou = std::numeric_limits<double>::quiet_NaN();
  double acc = std::numeric_limits<double>::quiet_NaN();
  MiouResult per_class;
};

/// Full-resolution, un-augmented evaluation; runs off-tape so it records no
/// autodiff state.
inline EvalResult evaluate(Network& net, const std::vector<Sample>& data, int batch_size) {
  if (batch_size < 1) throw ContractError("evaluate: batch_size must be >= 1");
  ConfusionMatrix cm(net.cfg.num_classes);
  for (int64_t start = 0; start < int64_t(data.size()); start += batch_size) {
    const int64_t end = std::min<int64_t>(int64_t(data.size()), start + batch_size);
    std::vector<const Sample*> items;
    for (int64_t i = start; i < end; ++i) items.push_back(&data[std::size_t(i)]);
    detail::BatchData b = detail::assemble_batch(items);
    TapBundle out = forward_with_taps(net, nullptr, Var::constant(std::move(b.images)));
    std::vector<ByteImage> preds = predict_labels(out.logits.value());
    for (int64_t i = start; i < end; ++i)
      accumulate(cm, preds[std::size_t(i - start)], data[std::size_t(i)].label);
  }
  EvalResult r;
  r.per_class = miou(cm);
  if (r.per_class.any_defined) r.miou = double(r.per_class.miou);
  if (auto a = pixel_accuracy(cm)) r.acc = double(*a);
  return r;
}

/// One line of the training log. val columns hold NaN on epochs without an
/// evaluation pass.
struct EpochRow {
  int epoch = 0;
  real lr = 0;
  double ce = 0;
  double attn = 0;
  double total = 0;
  bool evaled = false;
  double val_miou = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
};

inline std::string epoch_log_header() {
  return "# epoch\tlr\tce\tattn_loss\ttotal\tval_miou\tval_acc";
}

inline std::string format_epoch_row(const EpochRow& r) {
  auto fmt = [](double v) {
    return std::isnan(v) ? std::string("nan") : detail::format_real(real(v));
  };
  std::string out = std::to_string(r.epoch);
  out += '\t';
  out += detail::format_real(r.lr);
  out += '\t';
  out += fmt(r.ce);
  out += '\t';
  out += fmt(r.attn);
  out += '\t';
  out += fmt(r.total);
  out += '\t';
  out += r.evaled ? fmt(r.val_miou) : std::string("nan");
  out += '\t';
  out += r.evaled ? fmt(r.val_acc) : std::string("nan");
  return out;
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRow> rows;
  EvalResult final_eval;
};

/// Fires once per completed epoch, after its val columns are final.
using RowCallback = std::function<void(const EpochRow&)>;

namespace detail {

inline const char* tap_block_name(TapId id) { return tap_name(id); }

inline void add_cbam_blocks(Checkpoint& ck, CbamParams& p, const std::string& prefix) {
  add_param_blocks(ck, cbam_named_params(p, prefix));
}

}  // namespace detail

/// Phase 1 trains the network under cross-entropy; phase 2 freezes it and
/// calibrates one CBAM block per tap by substituting the refined feature
/// in-path and continuing under the same objective. The checkpoint carries
/// the network, the three calibrated blocks and the final validation scores.
inline TrainResult train_teacher(const RunConfig& cfg, const std::vector<Sample>& train_data,
                                 const std::vector<Sample>& val_data,
                                 const RowCallback& on_row = nullptr) {
  cfg.validate();
  if (train_data.empty()) throw ConfigError("train_teacher: empty training set");

  Network net = Network::build(cfg.teacher_net(), derive_seed(cfg.seed, "net", 0));
  const int bottom = cfg.teacher_widths.back();
  std::vector<CbamParams> cbams;
  cbams.reserve(3);
  for (int i = 0; i < 3; ++i) {
    Rng rng(derive_seed(cfg.seed, "attn", uint64_t(i)));
    cbams.emplace_back(bottom, cfg.reduction, rng);
  }

  TrainResult res;
  const AugPolicy pol = cfg.aug_policy();
  const int64_t n_train = int64_t(train_data.size());
  const int64_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;

  {
    SgdOptimizer opt(net.params(), cfg.momentum, cfg.weight_decay);
    const int64_t total_steps = std::max<int64_t>(1, steps_per_epoch * cfg.epochs);
    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      EpochRow row;
      row.epoch = epoch;
      row.lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min);
      const std::vector<int> order =
          detail::shuffled_indices(n_train, cfg.seed + uint64_t(epoch));
      Rng aug_rng(derive_seed(cfg.seed, "aug", uint64_t(epoch)));
      double ce_sum = 0;
      for (int64_t b = 0; b < steps_per_epoch; ++b) {
        const int64_t lo = b * cfg.batch_size;
        const int64_t hi = std::min(n_train, lo + cfg.batch_size);
        detail::BatchData batch = detail::gather_batch(train_data, order, lo, hi, pol, aug_rng);
        Tape tape;
        TapBundle out = forward_with_taps(net, &tape, Var::constant(std::move(batch.images)));
        Var loss = softmax_cross_entropy(out.logits, batch.labels);
        detail::require_finite_loss(loss, step);
        opt.zero_grad();
        tape.backward(loss);
        opt.step(cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min));
        ce_sum += loss.value()[0];
        ++step;
      }
      row.ce = ce_sum / double(steps_per_epoch);
      row.total = row.ce;
      const bool last = epoch + 1 == cfg.epochs;
      if (!last && (epoch + 1) % cfg.eval_every == 0) {
        EvalResult ev = evaluate(net, val_data, cfg.batch_size);
        row.evaled = true;
        row.val_miou = ev.miou;
        row.val_acc = ev.acc;
      }
      res.rows.push_back(row);
      if (on_row && !last) on_row(row);
    }
  }

  res.final_eval = evaluate(net, val_data, cfg.batch_size);
  if (!res.rows.empty()) {
    EpochRow& last = res.rows.back();
    last.evaled = true;
    last.val_miou = res.final_eval.miou;
    last.val_acc = res.final_eval.acc;
    if (on_row) on_row(last);
  }

  if (cfg.calib_epochs > 0) {
    net.freeze();
    std::vector<Param*> cparams;
    for (CbamParams& cb : cbams)
      for (Param* p : cb.params()) cparams.push_back(p);
    SgdOptimizer opt(cparams, cfg.momentum, cfg.weight_decay);
    const int64_t total_steps = std::max<int64_t>(1, steps_per_epoch * cfg.calib_epochs);
    int64_t step = 0;
    for (int ce = 0; ce < cfg.calib_epochs; ++ce) {
      const int epoch = cfg.epochs + ce;
      EpochRow row;
      row.epoch = epoch;
      row.lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min);
      const std::vector<int> order =
          detail::shuffled_indices(n_train, cfg.seed + uint64_t(epoch));
      Rng aug_rng(derive_seed(cfg.seed, "aug", uint64_t(epoch)));
      double ce_sum = 0;
      for (int64_t b = 0; b < steps_per_epoch; ++b) {
        const int64_t lo = b * cfg.batch_size;
        const int64_t hi = std::min(n_train, lo + cfg.batch_size);
        detail::BatchData batch = detail::gather_batch(train_data, order, lo, hi, pol, aug_rng);
        Tape tape;
        CbamVars vb = bind_cbam(&tape, cbams[0]);
        CbamVars ve = bind_cbam(&tape, cbams[1]);
        CbamVars vd = bind_cbam(&tape, cbams[2]);
        InPathCbam hooks{&vb, &ve, &vd};
        TapBundle out =
            forward_with_taps(net, &tape, Var::constant(std::move(batch.images)), &hooks);
        Var loss = softmax_cross_entropy(out.logits, batch.labels);
        detail::require_finite_loss(loss, step);
        opt.zero_grad();
        tape.backward(loss);
        opt.step(cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min));
        ce_sum += loss.value()[0];
        ++step;
      }
      row.ce = ce_sum / double(steps_per_epoch);
      row.total = row.ce;
      if (ce + 1 == cfg.calib_epochs) {
        // network is frozen here, so the phase-1 scores still hold
        row.evaled = true;
        row.val_miou = res.final_eval.miou;
        row.val_acc = res.final_eval.acc;
      }
      res.rows.push_back(row);
      if (on_row) on_row(row);
    }
  }

  Checkpoint ck;
  ck.kind = Checkpoint::Kind::teacher;
  ck.config_text = config_to_text(cfg);
  add_param_blocks(ck, net.named_params());
  const TapId all_taps[3] = {TapId::B, TapId::E, TapId::D};
  for (int i = 0; i < 3; ++i)
    detail::add_cbam_blocks(ck, cbams[std::size_t(i)],
                            std::string("cbam.") + tap_name(all_taps[i]));
  ck.metrics.emplace_back("val_miou", res.final_eval.miou);
  ck.metrics.emplace_back("val_acc", res.final_eval.acc);
  res.checkpoint = std::move(ck);
  return res;
}

/// Rebuilds the frozen teacher (network plus calibrated CBAM blocks) from its
/// checkpoint. The architecture comes from the embedded config text.
struct TeacherModel {
  RunConfig cfg;
  Network net;
  std::vector<CbamParams> cbams;  // tap order B, E, D
};

inline TeacherModel load_teacher(const Checkpoint& ck) {
  if (ck.kind != Checkpoint::Kind::teacher)
    throw ConfigError("expected a teacher checkpoint");
  TeacherModel m;
  m.cfg = parse_config_text(ck.config_text);
  m.net = Network::build(m.cfg.teacher_net(), 0);
  restore_param_blocks(ck, m.net.named_params());
  m.net.freeze();
  const int bottom = m.cfg.teacher_widths.back();
  const TapId all_taps[3] = {TapId::B, TapId::E, TapId::D};
  for (int i = 0; i < 3; ++i) {
    Rng rng(0);
    CbamParams cb(bottom, m.cfg.reduction, rng);
    restore_param_blocks(ck, cbam_named_params(cb, std::string("cbam.") + tap_name(all_taps[i])));
    cb.set_trainable(false);
    m.cbams.push_back(std::move(cb));
  }
  return m;
}

inline const Var& tap_feature(const TapBundle& b, TapId id) {
  switch (id) {
    case TapId::B: return b.B;
    case TapId::E: return b.E;
    default: return b.D;
  }
}

/// Invoked after every epoch with the frozen teacher pieces actually used in
/// the loss, so callers can assert they never move.
using DistillObserver = std::function<void(int epoch, Network& teacher, TapSet& taps)>;

/// Trains the student against the frozen teacher. Tap shapes are registered
/// from probe passes at startup; mismatched geometry surfaces as a config
/// error before any training step runs.
inline TrainResult distill_student(const RunConfig& cfg, const Checkpoint& teacher_ckpt,
                                   const std::vector<Sample>& train_data,
                                   const std::vector<Sample>& val_data,
                                   const DistillObserver& observer = nullptr,
                                   const RowCallback& on_row = nullptr) {
  cfg.validate();
  if (train_data.empty()) throw ConfigError("distill_student: empty training set");
  TeacherModel teacher = load_teacher(teacher_ckpt);
  if (teacher.cfg.classes != cfg.classes)
    throw ConfigError("distill_student: teacher has " + std::to_string(teacher.cfg.classes) +
                      " classes, run expects " + std::to_string(cfg.classes));

  Network student = Network::build(cfg.student_net(), derive_seed(cfg.seed, "net", 0));

  const DistillConfig dcfg = cfg.distill_config();
  const bool compute_distill = dcfg.method != Method::none && dcfg.alpha != 0;
  const bool needs_taps = dcfg.method == Method::attnfd || dcfg.method == Method::at;
  const bool with_params = dcfg.method == Method::attnfd;

  TapSet taps;
  if (needs_taps) {
    Tensor probe({1, 3, cfg.canvas, cfg.canvas});
    TapBundle tp = forward_with_taps(teacher.net, nullptr, Var::constant(probe));
    TapBundle sp = forward_with_taps(student, nullptr, Var::constant(std::move(probe)));
    std::vector<FeatShape> s_shapes, t_shapes;
    for (TapId id : cfg.taps) {
      s_shapes.push_back(feat_shape(tap_feature(sp, id).value()));
      t_shapes.push_back(feat_shape(tap_feature(tp, id).value()));
    }
    taps = make_tap_set(cfg.taps, s_shapes, t_shapes, cfg.reduction, cfg.seed, with_params);
    if (with_params)
      for (TapEntry& e : taps.taps) e.teacher_cbam = teacher.cbams[std::size_t(int(e.id))];
  }

  std::vector<Param*> opt_params = student.params();
  for (Param* p : taps.trainable_params()) opt_params.push_back(p);
  SgdOptimizer opt(std::move(opt_params), cfg.momentum, cfg.weight_decay);

  TrainResult res;
  const AugPolicy pol = cfg.aug_policy();
  const int64_t n_train = int64_t(train_data.size());
  const int64_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = std::max<int64_t>(1, steps_per_epoch * cfg.distill_epochs);
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.distill_epochs; ++epoch) {
    EpochRow row;
    row.epoch = epoch;
    row.lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min);
    const std::vector<int> order =
        detail::shuffled_indices(n_train, cfg.seed + uint64_t(epoch));
    Rng aug_rng(derive_seed(cfg.seed, "aug", uint64_t(epoch)));
    double ce_sum = 0, attn_sum = 0, total_sum = 0;
    for (int64_t b = 0; b < steps_per_epoch; ++b) {
      const int64_t lo = b * cfg.batch_size;
      const int64_t hi = std::min(n_train, lo + cfg.batch_size);
      detail::BatchData batch = detail::gather_batch(train_data, order, lo, hi, pol, aug_rng);
      Var x = Var::constant(std::move(batch.images));
      Tape tape;
      TapBundle sout = forward_with_taps(student, &tape, x);
      Var ce = softmax_cross_entropy(sout.logits, batch.labels);
      Var dterm;
      if (compute_distill) {
        TapBundle tout = forward_with_taps(teacher.net, nullptr, x);
        if (dcfg.method == Method::kd) {
          dterm = kd_loss(sout.logits, tout.logits, dcfg.kd_temperature);
        } else {
          std::vector<Var> sf, tf;
          for (TapId id : cfg.taps) {
            sf.push_back(tap_feature(sout, id));
            tf.push_back(tap_feature(tout, id));
          }
          dterm = dcfg.method == Method::attnfd
                      ? attnfd_loss(sf, tf, taps, &tape, dcfg.normalize)
                      : at_loss(sf, tf, taps, dcfg.at_power);
        }
      }
      Var loss = total_loss(ce, dterm, dcfg);
      detail::require_finite_loss(loss, step);
      opt.zero_grad();
      tape.backward(loss);
      opt.step(cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min));
      ce_sum += ce.value()[0];
      if (dterm.valid()) attn_sum += dterm.value()[0];
      total_sum += loss.value()[0];
      ++step;
    }
    row.ce = ce_sum / double(steps_per_epoch);
    row.attn = attn_sum / double(steps_per_epoch);
    row.total = total_sum / double(steps_per_epoch);
    const bool last = epoch + 1 == cfg.distill_epochs;
    if (!last && (epoch + 1) % cfg.eval_every == 0) {
      EvalResult ev = evaluate(student, val_data, cfg.batch_size);
      row.evaled = true;
      row.val_miou = ev.miou;
      row.val_acc = ev.acc;
    }
    res.rows.push_back(row);
    if (on_row && !last) on_row(row);
    if (observer) observer(epoch, teacher.net, taps);
  }

  res.final_eval = evaluate(student, val_data, cfg.batch_size);
  if (!res.rows.empty()) {
    EpochRow& last = res.rows.back();
    last.evaled = true;
    last.val_miou = res.final_eval.miou;
    last.val_acc = res.final_eval.acc;
    if (on_row) on_row(last);
  }

  Checkpoint ck;
  ck.kind = Checkpoint::Kind::student;
  ck.config_text = config_to_text(cfg);
  add_param_blocks(ck, student.named_params());
  if (with_params) {
    for (TapEntry& e : taps.taps) {
      const std::string prefix = std::string("cbam.") + tap_name(e.id);
      detail::add_cbam_blocks(ck, e.student_cbam, prefix);
      if (e.has_projector()) {
        ck.blocks.emplace_back(std::string("proj.") + tap_name(e.id) + ".k", e.proj_k.value);
        ck.blocks.emplace_back(std::string("proj.") + tap_name(e.id) + ".b", e.proj_b.value);
      }
    }
  }
  ck.metrics.emplace_back("val_miou", res.final_eval.miou);
  ck.metrics.emplace_back("val_acc", res.final_eval.acc);
  res.checkpoint = std::move(ck);
  return res;
}

/// Rebuilds a student network from its checkpoint for evaluation or
/// visualization.
struct StudentModel {
  RunConfig cfg;
  Network net;
  TapSet taps;  // populated (with parameters) only for attnfd checkpoints
};

inline StudentModel load_student(const Checkpoint& ck) {
  if (ck.kind != Checkpoint::Kind::student)
    throw ConfigError("expected a student checkpoint");
  StudentModel m;
  m.cfg = parse_config_text(ck.config_text);
  m.net = Network::build(m.cfg.student_net(), 0);
  restore_param_blocks(ck, m.net.named_params());
  m.net.freeze();
  if (m.cfg.method == Method::attnfd) {
    Tensor probe({1, 3, m.cfg.canvas, m.cfg.canvas});
    Network twin = Network::build(m.cfg.teacher_net(), 0);
    TapBundle tp = forward_with_taps(twin, nullptr, Var::constant(probe));
    TapBundle sp = forward_with_taps(m.net, nullptr, Var::constant(std::move(probe)));
    std::vector<FeatShape> s_shapes, t_shapes;
    for (TapId id : m.cfg.taps) {
      s_shapes.push_back(feat_shape(tap_feature(sp, id).value()));
      t_shapes.push_back(feat_shape(tap_feature(tp, id).value()));
    }
    m.taps = make_tap_set(m.cfg.taps, s_shapes, t_shapes, m.cfg.reduction, m.cfg.seed, true);
    for (TapEntry& e : m.taps.taps) {
      const std::string prefix = std::string("cbam.") + tap_name(e.id);
      restore_param_blocks(ck, cbam_named_params(e.student_cbam, prefix));
      e.student_cbam.set_trainable(false);
      if (e.has_projector()) {
        const std::string pk = std::string("proj.") + tap_name(e.id) + ".k";
        const std::string pb = std::string("proj.") + tap_name(e.id) + ".b";
        std::vector<std::pair<std::string, Param*>> named = {{pk, &e.proj_k}, {pb, &e.proj_b}};
        restore_param_blocks(ck, named);
        e.proj_k.trainable = false;
        e.proj_b.trainable = false;
      }
    }
  }
  return m;
}

}  // namespace attnfd
