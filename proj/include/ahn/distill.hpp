#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ahn/checkpoint.hpp"
#include "ahn/corpus.hpp"
#include "ahn/model.hpp"
#include "ahn/tensor.hpp"

namespace ahn {

inline constexpr int kBosToken = 256;  // the spare id past the byte values

// --- losses ---

// mean over rows of KL(teacher || student) with a frozen teacher; the
// constant teacher-entropy term is kept so a perfect match reads exactly 0
template <typename S>
Var<S> kl_loss(Var<S> student_logits, const Mat<S>& teacher_logits) {
  Tape<S>& t = *student_logits.tape;
  const Eigen::Index L = student_logits.rows();
  const Eigen::Index V = student_logits.cols();
  if (teacher_logits.rows() != L || teacher_logits.cols() != V)
    throw ShapeError("kl_loss: teacher is " + std::to_string(teacher_logits.rows()) +
                     "x" + std::to_string(teacher_logits.cols()) + ", student is " +
                     std::to_string(L) + "x" + std::to_string(V));
  Mat<S> probs(L, V), prods(L, V);
  for (Eigen::Index i = 0; i < L; ++i) {
    S mx = teacher_logits(i, 0);
    for (Eigen::Index j = 1; j < V; ++j) mx = std::max(mx, teacher_logits(i, j));
    S z = S(0);
    for (Eigen::Index j = 0; j < V; ++j) z += std::exp(teacher_logits(i, j) - mx);
    const S logz = mx + std::log(z);
    for (Eigen::Index j = 0; j < V; ++j) {
      const S lp = teacher_logits(i, j) - logz;
      const S p = std::exp(lp);
      probs(i, j) = p;
      prods(i, j) = p * lp;
    }
  }
  // summed the same way the student term is, so equal logits cancel exactly
  Mat<S> plogp;
  row_sums(prods, plogp);
  auto p_t = t.constant(std::move(probs));
  auto entropy_term = t.constant(std::move(plogp));
  auto cross = row_sum(mul(p_t, log_softmax_rows(student_logits)));
  auto kl_rows = sub(entropy_term, cross);
  return scale(sum(kl_rows), S(1) / static_cast<S>(L));
}

// both distributions live on the tape; gradients flow through the teacher
// branch too (the input-sensitivity probe wants that)
template <typename S>
Var<S> kl_loss(Var<S> student_logits, Var<S> teacher_logits) {
  if (teacher_logits.rows() != student_logits.rows() ||
      teacher_logits.cols() != student_logits.cols())
    throw ShapeError("kl_loss: logit shapes differ");
  const Eigen::Index L = student_logits.rows();
  const Mask all = Mask::Constant(teacher_logits.rows(), teacher_logits.cols(), 1);
  auto p_t = softmax_rows(teacher_logits, all);
  auto gap = sub(log_softmax_rows(teacher_logits), log_softmax_rows(student_logits));
  return scale(sum(row_sum(mul(p_t, gap))), S(1) / static_cast<S>(L));
}

// next-byte cross entropy: row i predicts tokens[i+1], mean over the L-1 pairs
template <typename S>
Var<S> ce_loss(Var<S> logits, std::span<const int> tokens) {
  const Eigen::Index L = logits.rows();
  if (static_cast<Eigen::Index>(tokens.size()) != L)
    throw ShapeError("ce_loss: " + std::to_string(tokens.size()) + " tokens for " +
                     std::to_string(L) + " logit rows");
  if (L < 2) throw ShapeError("ce_loss: need at least two tokens");
  for (int id : tokens)
    if (id < 0 || id >= logits.cols())
      throw ShapeError("ce_loss: target id " + std::to_string(id) + " out of range");
  std::vector<int> targets(tokens.begin() + 1, tokens.end());
  auto lods = log_softmax_rows(logits);
  auto picked = pick_per_row(slice(lods, 0, 0, L - 1, logits.cols()), targets);
  return scale(sum(picked), S(-1) / static_cast<S>(L - 1));
}

// --- schedule + optimizer ---

// linear warmup over the first tenth, cosine decay to zero after
inline double lr_at(long step, long total_steps, double base_lr) {
  if (total_steps < 1) throw ConfigError("lr_at: total_steps must be positive");
  if (step < 0 || step >= total_steps) throw ConfigError("lr_at: step out of range");
  const long warmup = (total_steps + 9) / 10;
  if (step < warmup) return base_lr * static_cast<double>(step + 1) / warmup;
  if (total_steps == warmup) return base_lr;
  const double t = static_cast<double>(step - warmup) /
                   static_cast<double>(total_steps - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(t * M_PI));
}

// AdamW with decoupled decay; moment slots are keyed by parameter name so
// they serialize next to the model arrays
template <typename S>
class AdamW {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;

  struct Slot {
    Mat<S> m, v;
  };

  long step_count() const { return t_; }
  std::map<std::string, Slot>& slots() { return slots_; }

  void set_step_count(long t) {
    if (t < 0) throw ConfigError("adamw: negative step count");
    t_ = t;
  }

  void step(const std::vector<std::string>& names, const std::vector<Mat<S>*>& params,
            const std::vector<const Mat<S>*>& grads, double lr) {
    if (names.size() != params.size() || names.size() != grads.size())
      throw ShapeError("adamw: name/param/grad counts differ");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < names.size(); ++i) {
      Mat<S>& p = *params[i];
      const Mat<S>& g = *grads[i];
      if (g.rows() != p.rows() || g.cols() != p.cols())
        throw ShapeError("adamw: grad shape mismatch for " + names[i]);
      Slot& s = slots_[names[i]];
      if (s.m.size() == 0) {
        s.m = Mat<S>::Zero(p.rows(), p.cols());
        s.v = Mat<S>::Zero(p.rows(), p.cols());
      }
      s.m = beta1 * s.m + (1.0 - beta1) * g;
      s.v = (beta2 * s.v.array() + (1.0 - beta2) * g.array().square()).matrix();
      const Mat<S> mhat = s.m / static_cast<S>(bc1);
      const Mat<S> vhat = s.v / static_cast<S>(bc2);
      p.array() -= static_cast<S>(lr * weight_decay) * p.array();
      p.array() -= static_cast<S>(lr) * mhat.array() /
                   (vhat.array().sqrt() + static_cast<S>(eps));
    }
  }

 private:
  long t_ = 0;
  std::map<std::string, Slot> slots_;
};

// --- training ---

enum class TrainObjective { distill_kl, distill_ce, base_ce };

inline std::string to_string(TrainObjective o) {
  switch (o) {
    case TrainObjective::distill_kl: return "distill_kl";
    case TrainObjective::distill_ce: return "distill_ce";
    case TrainObjective::base_ce: return "base_ce";
  }
  throw ConfigError("unknown objective");
}

inline TrainObjective objective_from(const std::string& s) {
  if (s == "distill_kl") return TrainObjective::distill_kl;
  if (s == "distill_ce") return TrainObjective::distill_ce;
  if (s == "base_ce") return TrainObjective::base_ce;
  throw ConfigError("unknown objective '" + s + "'");
}

// per-step compression boundary draw: fixed uses the config values, range
// redraws sinks and window each step so one set of gates serves many budgets
struct WindowPolicy {
  bool randomize = false;
  int window_min = 0, window_max = 0;  // inclusive; 0 = config value
  int sinks_min = -1, sinks_max = -1;  // -1 = config value

  static WindowPolicy fixed() { return {}; }
  static WindowPolicy range(int w_min, int w_max, int s_min = -1, int s_max = -1) {
    if (w_min < 1 || w_max < w_min) throw ConfigError("window policy: bad range");
    WindowPolicy p;
    p.randomize = true;
    p.window_min = w_min;
    p.window_max = w_max;
    p.sinks_min = s_min;
    p.sinks_max = s_max;
    return p;
  }
};

struct DistillConfig {
  long steps = 2000;
  int seq_len = 256;
  int batch = 2;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  TrainObjective objective = TrainObjective::distill_kl;
  WindowPolicy windows;
  std::uint64_t seed = 1;
  long log_every = 25;
  long checkpoint_every = 500;
  std::string train_split = "train";

  void validate() const {
    if (steps < 1) throw ConfigError("train: steps must be positive");
    if (seq_len < 2) throw ConfigError("train: seq_len must be >= 2");
    if (batch < 1) throw ConfigError("train: batch must be positive");
    if (lr <= 0) throw ConfigError("train: lr must be positive");
    if (clip_norm < 0) throw ConfigError("train: clip_norm must be >= 0");
  }
};

struct StepStats {
  long step = 0;
  double loss = 0;
  double lr = 0;
  int window = 0;
  int sinks = 0;
  double grad_norm = 0;
};

template <typename S>
class Trainer {
 public:
  Trainer(Model<S>& model, const Corpus& corpus, DistillConfig cfg)
      : model_(model), corpus_(corpus), cfg_(std::move(cfg)) {
    cfg_.validate();
    opt_.weight_decay = cfg_.weight_decay;
    if (!corpus_.has_split(cfg_.train_split))
      throw CorpusError("trainer: corpus has no split '" + cfg_.train_split + "'");
    if (model_.config().vocab <= kBosToken)
      throw ConfigError("trainer: byte corpus needs vocab >= " +
                        std::to_string(kBosToken + 1));
  }

  const DistillConfig& config() const { return cfg_; }
  long step_count() const { return done_; }
  AdamW<S>& optimizer() { return opt_; }

  // one optimizer step over `batch` independent slices; returns the stats row
  StepStats step() {
    if (done_ >= cfg_.steps) throw OrderingError("trainer: all steps consumed");
    const long s = done_;
    const auto [window, sinks] = draw_boundary(s);
    ForwardOverrides ov;
    const bool distilling = cfg_.objective != TrainObjective::base_ce;
    if (distilling) {
      ov.window = window;
      ov.sinks = sinks;
    }
    const MixerMode student_mode =
        distilling ? model_.config().mode()
                   : MixerMode{MixerKind::full, model_.config().ahn_variant,
                               model_.config().ct_pool};
    const GradMode gm = distilling ? GradMode::ahn_only : GradMode::all;

    std::vector<std::string> names;
    std::vector<Mat<S>> grad_sum;
    double loss_sum = 0;
    for (int b = 0; b < cfg_.batch; ++b) {
      Rng rng = Rng::derive(cfg_.seed, "sample", static_cast<std::uint64_t>(s),
                            static_cast<std::uint64_t>(b));
      std::vector<int> tokens = corpus_.sample(cfg_.train_split, rng, cfg_.seq_len - 1);
      tokens.insert(tokens.begin(), kBosToken);

      Tape<S> tape;
      auto fwd = model_.forward(tape, tokens, student_mode, gm, ov);
      Var<S> loss;
      switch (cfg_.objective) {
        case TrainObjective::distill_kl: {
          const Mat<S> teacher = model_.logits_of(
              tokens, {MixerKind::full, student_mode.variant, student_mode.pool});
          loss = kl_loss(fwd.logits, teacher);
          break;
        }
        case TrainObjective::distill_ce:
        case TrainObjective::base_ce:
          loss = ce_loss(fwd.logits, tokens);
          break;
      }
      const double lv = static_cast<double>(tape.value(loss)(0, 0));
      if (!std::isfinite(lv)) throw NumericError("trainer: non-finite loss");
      loss_sum += lv;
      tape.backward(loss);
      if (names.empty()) {
        for (const auto& nv : fwd.trainable) {
          names.push_back(nv.name);
          grad_sum.push_back(tape.grad(nv.var));
        }
      } else {
        if (names.size() != fwd.trainable.size())
          throw OrderingError("trainer: trainable set changed between slots");
        for (std::size_t i = 0; i < names.size(); ++i)
          grad_sum[i] += tape.grad(fwd.trainable[i].var);
      }
    }
    if (names.empty()) throw OrderingError("trainer: nothing trainable");

    const S inv_b = S(1) / static_cast<S>(cfg_.batch);
    double sq = 0;
    for (auto& g : grad_sum) {
      g *= inv_b;
      sq += static_cast<double>(g.squaredNorm());
    }
    const double gnorm = std::sqrt(sq);
    if (cfg_.clip_norm > 0 && gnorm > cfg_.clip_norm) {
      const S k = static_cast<S>(cfg_.clip_norm / gnorm);
      for (auto& g : grad_sum) g *= k;
    }

    std::vector<Mat<S>*> params;
    std::vector<const Mat<S>*> gptrs;
    auto arrays = model_.arrays();
    for (const auto& name : names) {
      Mat<S>* hit = nullptr;
      for (auto& a : arrays)
        if (a.name == name) hit = a.mat;
      if (hit == nullptr) throw OrderingError("trainer: unknown array " + name);
      params.push_back(hit);
    }
    for (const auto& g : grad_sum) gptrs.push_back(&g);
    const double lr = lr_at(s, cfg_.steps, cfg_.lr);
    opt_.step(names, params, gptrs, lr);

    ++done_;
    StepStats st;
    st.step = s;
    st.loss = loss_sum / cfg_.batch;
    st.lr = lr;
    st.window = window;
    st.sinks = sinks;
    st.grad_norm = gnorm;
    return st;
  }

  void save(const std::filesystem::path& path) {
    auto data = snapshot_model(model_, trainer_extra());
    for (const auto& [name, slot] : opt_.slots()) {
      data.arrays.push_back({"opt.m." + name, slot.m, kArrOptimizer});
      data.arrays.push_back({"opt.v." + name, slot.v, kArrOptimizer});
    }
    save_checkpoint_file(path, data);
  }

  void resume(const std::filesystem::path& path) {
    const auto data = load_checkpoint_file<S>(path);
    load_model(model_, data);
    opt_.slots().clear();
    for (const auto& a : data.arrays) {
      if ((a.flags & kArrOptimizer) == 0) continue;
      if (a.name.rfind("opt.m.", 0) == 0)
        opt_.slots()[a.name.substr(6)].m = a.mat;
      else if (a.name.rfind("opt.v.", 0) == 0)
        opt_.slots()[a.name.substr(6)].v = a.mat;
      else
        throw FormatError("trainer: unknown optimizer array " + a.name);
    }
    const KvConfig kv = KvConfig::parse(data.extra_text);
    done_ = kv.get_long("trainer_step");
    opt_.set_step_count(kv.get_long("opt_step"));
  }

 private:
  std::string trainer_extra() const {
    KvConfig kv;
    kv.set("trainer_step", std::to_string(done_));
    kv.set("opt_step", std::to_string(opt_.step_count()));
    kv.set("objective", to_string(cfg_.objective));
    return kv.serialize();
  }

  std::pair<int, int> draw_boundary(long step) const {
    if (!cfg_.windows.randomize)
      return {model_.config().window, model_.config().sinks};
    Rng rng = Rng::derive(cfg_.seed, "boundary", static_cast<std::uint64_t>(step));
    const int window = static_cast<int>(
        rng.uniform_int(cfg_.windows.window_min, cfg_.windows.window_max));
    const int sinks =
        cfg_.windows.sinks_min >= 0
            ? static_cast<int>(
                  rng.uniform_int(cfg_.windows.sinks_min, cfg_.windows.sinks_max))
            : model_.config().sinks;
    return {window, sinks};
  }

  Model<S>& model_;
  const Corpus& corpus_;
  DistillConfig cfg_;
  AdamW<S> opt_;
  long done_ = 0;
};

// mean KL between the full-attention teacher and the compressing student on
// seeded held-out slices
template <typename S>
double held_out_kl(Model<S>& model, const Corpus& corpus, const std::string& split,
                   int seq_len, int n_slices, std::uint64_t seed,
                   const ForwardOverrides& ov = {}) {
  if (n_slices < 1) throw ConfigError("held_out_kl: need at least one slice");
  const MixerMode student_mode = model.config().mode();
  const MixerMode teacher_mode{MixerKind::full, student_mode.variant,
                               student_mode.pool};
  double acc = 0;
  for (int i = 0; i < n_slices; ++i) {
    Rng rng = Rng::derive(seed, "heldout", static_cast<std::uint64_t>(i));
    std::vector<int> tokens = corpus.sample(split, rng, seq_len - 1);
    tokens.insert(tokens.begin(), kBosToken);
    const Mat<S> teacher = model.logits_of(tokens, teacher_mode);
    Tape<S> tape;
    auto fwd = model.forward(tape, tokens, student_mode, GradMode::none, ov);
    auto kl = kl_loss(fwd.logits, teacher);
    acc += static_cast<double>(tape.value(kl)(0, 0));
  }
  return acc / n_slices;
}

// mean next-byte cross entropy (nats) on seeded held-out slices
template <typename S>
double held_out_ce(Model<S>& model, const Corpus& corpus, const std::string& split,
                   int seq_len, int n_slices, std::uint64_t seed,
                   const MixerMode& mode, const ForwardOverrides& ov = {}) {
  if (n_slices < 1) throw ConfigError("held_out_ce: need at least one slice");
  double acc = 0;
  for (int i = 0; i < n_slices; ++i) {
    Rng rng = Rng::derive(seed, "heldout", static_cast<std::uint64_t>(i));
    std::vector<int> tokens = corpus.sample(split, rng, seq_len - 1);
    tokens.insert(tokens.begin(), kBosToken);
    Tape<S> tape;
    auto fwd = model.forward(tape, tokens, mode, GradMode::none, ov);
    auto ce = ce_loss(fwd.logits, tokens);
    acc += static_cast<double>(tape.value(ce)(0, 0));
  }
  return acc / n_slices;
}

}  // namespace ahn
