#pragma once

#include <string>
#include <utility>
#include <vector>

#include "attnfd/attention.hpp"
#include "attnfd/autodiff.hpp"
#include "attnfd/ops.hpp"
#include "attnfd/rng.hpp"
#include "attnfd/segnet.hpp"

namespace attnfd {

enum class TapId { B = 0, E = 1, D = 2 };
enum class Method { attnfd, kd, at, none };
enum class NormMode { channel_slice, pixel_vector };

inline const char* tap_name(TapId t) {
  switch (t) {
    case TapId::B: return "B";
    case TapId::E: return "E";
    default: return "D";
  }
}

struct FeatShape {
  int c = 0, h = 0, w = 0;

  bool matches(const Tensor& t) const {
    return t.rank() == 4 && t.extent(1) == c && t.extent(2) == h && t.extent(3) == w;
  }
  std::string str() const {
    return "(" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

inline FeatShape feat_shape(const Tensor& t) {
  return {t.extent(1), t.extent(2), t.extent(3)};
}

/// One distillation tap: registered shapes, the 1x1 channel projector (present
/// iff channel counts differ), the student-side CBAM (at teacher channel
/// count, since alignment runs first) and the frozen teacher-side CBAM.
struct TapEntry {
  TapId id = TapId::B;
  FeatShape student, teacher;
  Param proj_k, proj_b;
  CbamParams student_cbam;
  CbamParams teacher_cbam;

  bool has_projector() const { return student.c != teacher.c; }
};

struct TapSet {
  std::vector<TapEntry> taps;

  int count() const { return int(taps.size()); }

  /// Everything the student optimizer updates besides the student network.
  std::vector<Param*> trainable_params() {
    std::vector<Param*> out;
    for (TapEntry& t : taps) {
      if (t.student_cbam.channels == 0) continue;  // shape-only tap (at / kd)
      for (Param* p : t.student_cbam.params()) out.push_back(p);
      if (t.has_projector()) {
        out.push_back(&t.proj_k);
        out.push_back(&t.proj_b);
      }
    }
    return out;
  }
};

inline std::vector<std::pair<std::string, Param*>> cbam_named_params(CbamParams& p,
                                                                     const std::string& prefix) {
  return {{prefix + ".w0", &p.w0},
          {prefix + ".b0", &p.b0},
          {prefix + ".w1", &p.w1},
          {prefix + ".b1", &p.b1},
          {prefix + ".spatial_k", &p.spatial_kernel},
          {prefix + ".spatial_b", &p.spatial_bias}};
}

struct DistillConfig {
  real alpha = 2;
  Method method = Method::attnfd;
  std::vector<TapId> tap_ids = {TapId::B, TapId::E, TapId::D};
  real kd_temperature = 4;
  int at_power = 2;
  NormMode normalize = NormMode::channel_slice;

  void validate() const {
    if (alpha < 0) throw ConfigError("distill.alpha must be >= 0");
    if (!(kd_temperature > 0)) throw ConfigError("distill.kd_temperature must be > 0");
    if (at_power < 1) throw ConfigError("distill.at_power must be >= 1");
    if (tap_ids.empty()) throw ConfigError("taps: need at least one of B,E,D");
  }
};

/// Builds the per-tap state for a distillation run. Shapes come from probe
/// forward passes; teacher CBAMs arrive separately (loaded from the teacher
/// checkpoint) and are installed frozen.
inline TapSet make_tap_set(const std::vector<TapId>& ids,
                           const std::vector<FeatShape>& student_shapes,
                           const std::vector<FeatShape>& teacher_shapes, int reduction,
                           uint64_t run_seed, bool with_params = true) {
  if (ids.empty()) throw ConfigError("make_tap_set: empty tap list");
  if (student_shapes.size() != ids.size() || teacher_shapes.size() != ids.size())
    throw ContractError("make_tap_set: shape lists must match tap list");
  TapSet set;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    TapEntry e;
    e.id = ids[i];
    e.student = student_shapes[i];
    e.teacher = teacher_shapes[i];
    if (with_params) {
      if (reduction < 1 || e.teacher.c % reduction != 0)
        throw ConfigError(std::string("tap ") + tap_name(e.id) + ": teacher channels (" +
                          std::to_string(e.teacher.c) + ") not divisible by reduction (" +
                          std::to_string(reduction) + ")");
      const int tap_index = int(ids[i]);  // stable stream index: B=0, E=1, D=2
      Rng attn_rng(derive_seed(run_seed, "attn", uint64_t(tap_index)));
      e.student_cbam = CbamParams(e.teacher.c, reduction, attn_rng);
      if (e.has_projector()) {
        Rng proj_rng(derive_seed(run_seed, "proj", uint64_t(tap_index)));
        e.proj_k = Param(he_init(proj_rng, {e.teacher.c, e.student.c, 1, 1}, e.student.c));
        e.proj_b = Param(Tensor({e.teacher.c}));
      }
    }
    set.taps.push_back(std::move(e));
  }
  return set;
}

/// Bilinear resize to the teacher's spatial size, then (when channel counts
/// differ) a learnable 1x1 projection. Identity when shapes already agree.
inline Var align_student_feature(const Var& f_s, TapEntry& tap, Tape* tape) {
  if (!tap.student.matches(f_s.value()))
    throw ConfigError(std::string("align_student_feature: tap ") + tap_name(tap.id) +
                      " registered for student shape " + tap.student.str() + ", got " +
                      f_s.value().shape_str());
  Var h = bilinear_resize(f_s, tap.teacher.h, tap.teacher.w);
  if (tap.has_projector())
    h = conv2d(h, use_param(tape, tap.proj_k), use_param(tape, tap.proj_b), 1, 0);
  return h;
}

namespace detail {

inline void check_tap_lists(const std::vector<Var>& student_feats,
                            const std::vector<Var>& teacher_feats, const TapSet& taps,
                            const char* op) {
  if (student_feats.size() != taps.taps.size() || teacher_feats.size() != taps.taps.size())
    throw ContractError(std::string(op) + ": feature lists must have one entry per tap");
  for (std::size_t i = 0; i < teacher_feats.size(); ++i) {
    if (teacher_feats[i].tracked())
      throw ContractError(std::string(op) + ": teacher features must be detached constants");
    if (!taps.taps[i].teacher.matches(teacher_feats[i].value()))
      throw ConfigError(std::string(op) + ": tap " + tap_name(taps.taps[i].id) +
                        " registered for teacher shape " + taps.taps[i].teacher.str() +
                        ", got " + teacher_feats[i].value().shape_str());
  }
}

inline Var apply_norm(const Var& f, NormMode mode) {
  return mode == NormMode::channel_slice ? channel_normalize(f) : pixel_vector_normalize(f);
}

}  // namespace detail

/// L_Attn: per tap, align the student feature, refine both sides with their
/// CBAM blocks, normalize, take the mean squared difference; average over
/// taps. Gradient reaches the student network, student CBAMs and projectors
/// only; the teacher side is frozen by construction.
inline Var attnfd_loss(const std::vector<Var>& student_feats,
                       const std::vector<Var>& teacher_feats, TapSet& taps, Tape* tape,
                       NormMode mode = NormMode::channel_slice) {
  detail::check_tap_lists(student_feats, teacher_feats, taps, "attnfd_loss");
  Var acc;
  for (std::size_t i = 0; i < taps.taps.size(); ++i) {
    TapEntry& tap = taps.taps[i];
    Var s_aligned = align_student_feature(student_feats[i], tap, tape);
    Var s_refined = cbam_refine(s_aligned, tape, tap.student_cbam).refined;
    Var t_refined = cbam_refine(teacher_feats[i], bind_cbam_const(tap.teacher_cbam)).refined;
    Var term = mean_squared_diff(detail::apply_norm(s_refined, mode),
                                 detail::apply_norm(t_refined, mode));
    acc = acc.valid() ? add(acc, term) : term;
  }
  return scale(acc, real(1) / real(taps.taps.size()));
}

/// Attention-transfer baseline: mean squared difference between per-sample
/// normalized activation maps, averaged over taps. The maps collapse the
/// channel axis, so alignment is spatial resize only (no projector).
inline Var at_loss(const std::vector<Var>& student_feats,
                   const std::vector<Var>& teacher_feats, TapSet& taps, int power) {
  detail::check_tap_lists(student_feats, teacher_feats, taps, "at_loss");
  Var acc;
  for (std::size_t i = 0; i < taps.taps.size(); ++i) {
    TapEntry& tap = taps.taps[i];
    if (!tap.student.matches(student_feats[i].value()))
      throw ConfigError(std::string("at_loss: tap ") + tap_name(tap.id) +
                        " registered for student shape " + tap.student.str() + ", got " +
                        student_feats[i].value().shape_str());
    Var s_resized = bilinear_resize(student_feats[i], tap.teacher.h, tap.teacher.w);
    Var term =
        mean_squared_diff(at_map(s_resized, power).map, at_map(teacher_feats[i], power).map);
    acc = acc.valid() ? add(acc, term) : term;
  }
  return scale(acc, real(1) / real(taps.taps.size()));
}

/// L = L_CE + alpha * L_distill; alpha stays constant across training.
/// alpha = 0 returns the CE var untouched, so the distillation term neither
/// perturbs the value bitwise nor contributes any gradient.
inline Var total_loss(const Var& ce, const Var& distill_term, const DistillConfig& cfg) {
  if (cfg.alpha < 0) throw ConfigError("total_loss: alpha must be >= 0");
  if (cfg.alpha == 0 || cfg.method == Method::none) return ce;
  if (!distill_term.valid()) throw ContractError("total_loss: missing distillation term");
  return add(ce, scale(distill_term, cfg.alpha));
}

}  // namespace attnfd
