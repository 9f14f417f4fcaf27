// Acceptance gate: one pass/fail line per criterion. Each criterion function
// is self-contained and prints its evidence; tolerances are pinned next to
// the checks they guard. Run with no arguments for the full gate or pass
// criterion numbers to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "ahn/analysis.hpp"
#include "ahn/checkpoint.hpp"
#include "ahn/complexity.hpp"
#include "ahn/corpus.hpp"
#include "ahn/ct.hpp"
#include "ahn/distill.hpp"
#include "ahn/gradcheck.hpp"
#include "ahn/model.hpp"

using namespace ahn;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool check(bool ok, const std::string& what) {
  if (!ok) std::printf("    FAILED: %s\n", what.c_str());
  return ok;
}

// ------------------------------------------------------------- criterion 1
// Closed-form cost table at the reference 3b shape: cache 25.6% / 26.0%,
// mixing FLOPs 46.6% / 46.7%, each within 0.1 percentage point; extra
// parameters about 0.4% of a 3.09e9 base; all in under a second.

bool criterion_complexity_table() {
  const auto t0 = std::chrono::steady_clock::now();
  ComplexitySpec spec;
  spec.seq_len = 128000;
  spec.window = 32768;
  spec.d_model = 2048;
  spec.head_dim = 128;
  spec.n_q_heads = 16;
  spec.n_kv_heads = 2;
  spec.n_layers = 36;
  spec.base_params = 3.09e9;

  const CostReport swa = complexity(spec, MixerKind::sinks_swa);
  const CostReport ahn = complexity(spec, MixerKind::sinks_swa_ahn);
  const double kTolPp = 0.1;  // percentage points
  bool ok = true;
  ok &= check(std::abs(100 * swa.cache_ratio - 25.6) <= kTolPp, "swa cache ratio");
  ok &= check(std::abs(100 * ahn.cache_ratio - 26.0) <= kTolPp, "ahn cache ratio");
  ok &= check(std::abs(100 * swa.flops_ratio - 46.6) <= kTolPp, "swa mixing ratio");
  ok &= check(std::abs(100 * ahn.flops_ratio - 46.7) <= kTolPp, "ahn mixing ratio");
  ok &= check(std::abs(100 * ahn.params_ratio - 0.4) <= 0.05, "extra param ratio ~0.4%");
  const double dt = seconds_since(t0);
  ok &= check(dt < 1.0, "runtime under 1 s");
  std::printf("    cache %.4f%% / %.4f%%, mixing %.4f%% / %.4f%%, params %.4f%%, %.3fs\n",
              100 * swa.cache_ratio, 100 * ahn.cache_ratio, 100 * swa.flops_ratio,
              100 * ahn.flops_ratio, 100 * ahn.params_ratio, dt);
  return ok;
}

// ------------------------------------------------------------- criterion 2
// Whenever the whole sequence fits in sinks + window the compressing path
// must be invisible: forward equals full attention within 1e-10 in f64 over
// at least 100 random toy models. Streaming must equal the batched forward
// within 1e-6 in f32 out to 512 tokens.

bool criterion_lossless_equivalence() {
  bool ok = true;
  const AhnVariant variants[] = {AhnVariant::gdn, AhnVariant::dn, AhnVariant::mamba2};
  double worst_fwd = 0;
  for (int trial = 0; trial < 102; ++trial) {
    Rng rng = Rng::derive(900, "equiv", static_cast<std::uint64_t>(trial));
    ModelConfig c;
    c.vocab = 97;
    c.head_dim = 4 + 4 * static_cast<int>(rng.uniform_int(0, 2));  // 4, 8, 12
    c.n_kv_heads = 1 + static_cast<int>(rng.uniform_int(0, 1));
    c.n_q_heads = c.n_kv_heads * (1 + static_cast<int>(rng.uniform_int(0, 2)));
    c.d_model = c.n_q_heads * c.head_dim;
    c.n_layers = 1 + static_cast<int>(rng.uniform_int(0, 1));
    c.ffn_mult = 2;
    c.sinks = static_cast<int>(rng.uniform_int(0, 3));
    c.window = 2 + static_cast<int>(rng.uniform_int(0, 12));
    c.mixer_kind = MixerKind::sinks_swa_ahn;
    c.ahn_variant = variants[trial % 3];
    Model<double> m(c);
    m.init(3000 + static_cast<std::uint64_t>(trial));

    const int L = 1 + static_cast<int>(rng.uniform_int(
                          0, static_cast<std::uint64_t>(c.sinks + c.window - 1)));
    std::vector<int> tokens(static_cast<std::size_t>(L));
    for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(0, c.vocab - 1));

    const Mat<double> lossy = m.logits_of(tokens, c.mode());
    const Mat<double> full = m.logits_of(tokens, MixerMode{MixerKind::full, c.ahn_variant, c.ct_pool});
    const double diff = (lossy - full).cwiseAbs().maxCoeff();
    worst_fwd = std::max(worst_fwd, diff);
    if (diff > 1e-10) {
      ok = check(false, "within-reach forward mismatch " + std::to_string(diff) +
                            " on trial " + std::to_string(trial));
      break;
    }
  }
  std::printf("    102 in-reach models, worst |lossy - full| = %.3g\n", worst_fwd);

  ModelConfig c;
  c.vocab = 97;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_q_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 8;
  c.ffn_mult = 2;
  c.sinks = 2;
  c.window = 16;
  double worst_stream = 0;
  for (AhnVariant v : variants) {
    c.ahn_variant = v;
    c.mixer_kind = MixerKind::sinks_swa_ahn;
    Model<float> m(c);
    m.init(41);
    Rng rng = Rng::derive(901, "stream", static_cast<std::uint64_t>(v));
    const int L = 512;
    std::vector<int> tokens(L);
    for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(0, c.vocab - 1));
    const Mat<float> batched = m.logits_of(tokens, c.mode());
    auto st = m.new_stream(c.mode());
    for (int i = 0; i < L; ++i) {
      const Mat<float> row = m.stream_step(st, tokens[i]);
      const double diff =
          (row - batched.row(i)).template cast<double>().cwiseAbs().maxCoeff();
      worst_stream = std::max(worst_stream, diff);
    }
  }
  ok &= check(worst_stream <= 1e-6, "stream/batch divergence " + std::to_string(worst_stream));
  std::printf("    streaming vs batched at L=512 (f32, all variants): worst %.3g\n",
              worst_stream);
  return ok;
}

// ------------------------------------------------------------- criterion 3
// The chunked affine-composition scan must match the one-pair-at-a-time fold
// within 1e-12 in f64 across 1000 random instances covering all variants,
// and the plain-decay step must equal the gated step with its gate forced
// fully open, bit for bit.

bool criterion_recurrence_oracle() {
  bool ok = true;
  double worst = 0;
  for (int trial = 0; trial < 1000 && ok; ++trial) {
    Rng rng = Rng::derive(77, "scan", static_cast<std::uint64_t>(trial));
    AttentionConfig cfg;
    cfg.head_dim = 2 * (1 + static_cast<int>(rng.uniform_int(0, 3)));
    cfg.n_kv_heads = 1 + static_cast<int>(rng.uniform_int(0, 1));
    cfg.n_q_heads = cfg.n_kv_heads * (1 + static_cast<int>(rng.uniform_int(0, 1)));
    cfg.sinks = 1;
    cfg.window = 4;
    const int d_model = 8;
    const AhnVariant variant = static_cast<AhnVariant>(trial % 3);

    AhnParams<double> params = AhnParams<double>::sized(d_model, cfg);
    auto fill = [&](Mat<double>& m, double s) {
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal(0.0, s);
    };
    fill(params.w_alpha, 0.6);
    fill(params.w_beta, 0.6);
    fill(params.w_gamma, 0.6);
    fill(params.w_o, 0.3);
    fill(params.a_log, 0.5);

    const int n = 1 + static_cast<int>(rng.uniform_int(0, 19));
    std::vector<EvictedPair<double>> pairs(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) {
      auto& p = pairs[static_cast<std::size_t>(t)];
      p.pos = t;
      p.k = Mat<double>(1, cfg.kv_dim());
      p.v = Mat<double>(1, cfg.kv_dim());
      p.x = Mat<double>(1, d_model);
      fill(p.k, 1.0);
      fill(p.v, 1.0);
      fill(p.x, 1.0);
    }

    auto seq = CompressedState<double>::zeros(cfg.n_q_heads, cfg.head_dim);
    for (const auto& p : pairs) ahn_update(seq, p, params, cfg, variant);
    const int chunk = 1 + static_cast<int>(rng.uniform_int(0, 6));
    const auto par =
        chunk_scan(pairs, CompressedState<double>::zeros(cfg.n_q_heads, cfg.head_dim),
                   params, cfg, variant, chunk);
    for (int h = 0; h < cfg.n_q_heads; ++h) {
      const double diff = (seq.h[static_cast<std::size_t>(h)] -
                           par.h[static_cast<std::size_t>(h)])
                              .cwiseAbs()
                              .maxCoeff();
      worst = std::max(worst, diff);
      if (diff > 1e-12)
        ok = check(false, "chunked scan drift " + std::to_string(diff) + " trial " +
                              std::to_string(trial));
    }
  }
  std::printf("    1000 chunked-vs-sequential folds, worst drift %.3g\n", worst);

  // plain-decay == gated with the retention gate pinned open, exactly
  double worst_dn = 0;
  for (int trial = 0; trial < 1000 && ok; ++trial) {
    Rng rng = Rng::derive(78, "dn", static_cast<std::uint64_t>(trial));
    const int H = 6;
    Mat<double> h(H, H), k(1, H), v(1, H);
    for (Eigen::Index i = 0; i < H; ++i)
      for (Eigen::Index j = 0; j < H; ++j) h(i, j) = rng.normal(0.0, 1.0);
    for (Eigen::Index j = 0; j < H; ++j) {
      k(0, j) = rng.normal(0.0, 1.0);
      v(0, j) = rng.normal(0.0, 1.0);
    }
    k /= std::sqrt(k.cwiseProduct(k).sum() + kKeyNormEps);
    const double beta = 1.0 / (1.0 + std::exp(-rng.normal(0.0, 1.0)));

    Tape<double> tape;
    auto hv = tape.input(h, false);
    auto kv = tape.input(k, false);
    auto vv = tape.input(v, false);
    auto bv = tape.input(Mat<double>::Constant(1, 1, beta), false);
    auto one = tape.input(Mat<double>::Constant(1, 1, 1.0), false);
    const Mat<double> via_dn = tape.value(dn_step(hv, kv, vv, bv));
    const Mat<double> via_gdn = tape.value(gdn_step(hv, kv, vv, one, bv));
    if (!(via_dn.array() == via_gdn.array()).all()) {
      worst_dn = (via_dn - via_gdn).cwiseAbs().maxCoeff();
      ok = check(false, "dn != gdn|alpha=1, diff " + std::to_string(worst_dn));
    }
  }
  if (ok) std::printf("    1000 dn vs gated-with-open-gate steps: bitwise equal\n");
  return ok;
}

// ------------------------------------------------------------- criterion 4
// Reverse-mode gradients against central differences (eps 1e-5, rel 1e-5):
// (a) masked attention, (b) four chained memory updates plus readout,
// (c) the full distillation KL as a function of the input embeddings.
// The whole suite must finish inside two minutes.

bool criterion_gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const double kEps = 1e-5, kTol = 1e-5;
  bool ok = true;
  Rng rng = Rng::derive(55, "grad");

  {  // (a) windowed attention with sinks over a packed (q|k|v) input
    AttentionConfig cfg;
    cfg.n_q_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.head_dim = 4;
    cfg.sinks = 1;
    cfg.window = 2;
    const int L = 6;
    Mat<double> x0(L, cfg.q_dim() + 2 * cfg.kv_dim());
    for (Eigen::Index i = 0; i < x0.rows(); ++i)
      for (Eigen::Index j = 0; j < x0.cols(); ++j) x0(i, j) = rng.normal(0.0, 0.8);
    const Mask mask = build_mask(L, MixerKind::sinks_swa, cfg);
    const auto f = [&](Tape<double>& tape, Var<double> x) {
      (void)tape;
      auto q = slice(x, 0, 0, L, cfg.q_dim());
      auto k = slice(x, 0, cfg.q_dim(), L, cfg.kv_dim());
      auto v = slice(x, 0, cfg.q_dim() + cfg.kv_dim(), L, cfg.kv_dim());
      auto y = attend(q, k, v, mask, cfg);
      return sum(mul(y, y));
    };
    const double rel = grad_check<double>(f, x0, kEps);
    ok &= check(rel < kTol, "attention grad rel err " + std::to_string(rel));
    std::printf("    attention grad: worst rel %.3g\n", rel);
  }

  for (AhnVariant variant : {AhnVariant::gdn, AhnVariant::dn, AhnVariant::mamba2}) {
    // (b) chain of four updates and a gated readout, all gates live
    const int H = 4;
    Mat<double> x0(5, 2 * H + 3);
    for (Eigen::Index i = 0; i < x0.rows(); ++i)
      for (Eigen::Index j = 0; j < x0.cols(); ++j) x0(i, j) = rng.normal(0.0, 0.9);
    Mat<double> wo(H, H);
    for (Eigen::Index i = 0; i < H; ++i)
      for (Eigen::Index j = 0; j < H; ++j) wo(i, j) = rng.normal(0.0, 0.5);
    const auto f = [&](Tape<double>& tape, Var<double> x) {
      auto h = tape.input(Mat<double>::Zero(H, H), false);
      auto wov = tape.input(wo, false);
      for (int t = 0; t < 4; ++t) {
        auto k = slice(x, t, 0, 1, H);
        auto v = slice(x, t, H, 1, H);
        auto g1 = sigmoid(slice(x, t, 2 * H, 1, 1));
        auto g2 = sigmoid(slice(x, t, 2 * H + 1, 1, 1));
        switch (variant) {
          case AhnVariant::gdn:
            h = gdn_step(h, l2_normalize_row(k), v, g1, g2);
            break;
          case AhnVariant::dn:
            h = dn_step(h, l2_normalize_row(k), v, g2);
            break;
          case AhnVariant::mamba2:
            h = mamba2_step(h, k, v, softplus(slice(x, t, 2 * H, 1, 1)),
                            vexp(slice(x, t, 2 * H + 2, 1, 1)));
            break;
        }
      }
      auto q = slice(x, 4, 0, 1, H);
      auto gamma = sigmoid(slice(x, 4, 2 * H, 1, 1));
      auto y = ahn_head_readout(q, h, gamma, wov);
      return sum(mul(y, y));
    };
    const double rel = grad_check<double>(f, x0, kEps);
    ok &= check(rel < kTol, std::string("memory-chain grad rel err ") +
                                std::to_string(rel) + " (" + to_string(variant) + ")");
    std::printf("    4-step %s chain grad: worst rel %.3g\n", to_string(variant), rel);
  }

  {  // (c) teacher-student KL through both forwards, compressed region live.
    // Stock init keeps residual branches near zero, which makes the two
    // forwards nearly identical and the KL degenerately small (~1e-9), far
    // below what central differences can resolve. Re-randomize at a generic
    // scale and open the readout gate so every path carries O(1) signal.
    ModelConfig c;
    c.vocab = 31;
    c.d_model = 16;
    c.n_layers = 1;
    c.n_q_heads = 2;
    c.n_kv_heads = 1;
    c.head_dim = 8;
    c.ffn_mult = 2;
    c.sinks = 1;
    c.window = 3;
    c.gamma_offset = 0.0;
    c.mixer_kind = MixerKind::sinks_swa_ahn;
    Model<double> m(c);
    m.init(19);
    for (auto& a : m.arrays()) {
      if (a.name.find("norm") != std::string::npos) continue;
      for (Eigen::Index i = 0; i < a.mat->rows(); ++i)
        for (Eigen::Index j = 0; j < a.mat->cols(); ++j)
          (*a.mat)(i, j) = rng.normal(0.0, 0.3);
    }
    Mat<double> x0(10, c.d_model);
    for (Eigen::Index i = 0; i < x0.rows(); ++i)
      for (Eigen::Index j = 0; j < x0.cols(); ++j) x0(i, j) = rng.normal(0.0, 0.7);
    const auto f = [&](Tape<double>& tape, Var<double> x) {
      auto student = m.forward_embedded(tape, x, c.mode(), GradMode::none);
      auto teacher = m.forward_embedded(
          tape, x, MixerMode{MixerKind::full, c.ahn_variant, c.ct_pool},
          GradMode::none);
      return kl_loss(student.logits, teacher.logits);
    };
    const double rel = grad_check<double>(f, x0, kEps);
    ok &= check(rel < kTol, "kl probe grad rel err " + std::to_string(rel));
    std::printf("    distillation-KL input grad: worst rel %.3g\n", rel);
  }

  const double dt = seconds_since(t0);
  ok &= check(dt < 120.0, "gradient suite runtime");
  std::printf("    total %.1fs\n", dt);
  return ok;
}

// ----------------------------------------------------- criteria 5/6 support
// Both training criteria start from the same frozen full-attention byte
// model, pretrained once on the local python standard-library sources and
// cached under the system temp dir. Training is deterministic in f64, so a
// cache hit reproduces the exact bytes a fresh run would produce.

fs::path acceptance_cache_dir() {
  const fs::path dir = fs::temp_directory_path() / "ahn_acceptance_cache";
  fs::create_directories(dir);
  return dir;
}

std::vector<fs::path> python_sources() {
  for (int minor = 8; minor <= 14; ++minor) {
    const fs::path root = "/usr/lib/python3." + std::to_string(minor);
    if (fs::exists(root)) {
      auto files = collect_files(root, ".py", {"test"});
      if (!files.empty()) return files;
    }
  }
  throw CorpusError("no python standard-library sources found for the smoke corpus");
}

Corpus acceptance_corpus() {
  const fs::path root = acceptance_cache_dir() / "corpus";
  if (!fs::exists(root / "train")) build_corpus_dir(python_sources(), root, 0.2, 77);
  return Corpus::open(root);
}

ModelConfig smoke_model_config() {
  ModelConfig mc;  // d_model 128, 4 layers, sinks 4 per the toy defaults
  // two fat heads instead of four narrow ones: the per-head state is H x H,
  // so head_dim 64 doubles the memory's capacity at equal d_model. Short
  // lossless window: the compressed memory then owns recently evicted, still
  // highly predictive bytes. Both choices move the smoke into the regime
  // where the memory has both room and signal to learn.
  mc.n_q_heads = 2;
  mc.n_kv_heads = 1;
  mc.head_dim = 64;
  mc.window = 16;
  mc.mixer_kind = MixerKind::full;
  return mc;
}

constexpr long kBaseSteps = 3000;
constexpr double kDistillLr = 3e-3;

fs::path pretrained_base(const Corpus& corpus) {
  const fs::path ckpt = acceptance_cache_dir() / "base.ckpt";
  Model<double> base(smoke_model_config());
  base.init(1);
  if (fs::exists(ckpt)) {
    try {
      load_model(base, ckpt);
      return ckpt;
    } catch (const std::exception&) {
      // stale or foreign file: retrain below and overwrite
    }
  }
  DistillConfig bc;
  bc.steps = kBaseSteps;
  bc.seq_len = 256;
  bc.batch = 2;
  bc.lr = 1e-3;
  bc.objective = TrainObjective::base_ce;
  bc.seed = 11;
  Trainer<double> tr(base, corpus, bc);
  while (tr.step_count() < bc.steps) {
    const auto st = tr.step();
    if (st.step % 500 == 0)
      std::printf("    base pretrain step %ld ce %.4f\n", st.step, st.loss);
  }
  save_model(base, ckpt);
  return ckpt;
}

double beyond_window_nll(Model<double>& m, const Corpus& corpus,
                         const MixerMode& mode, int lossless_reach) {
  const auto curve = ppl_curve(m, corpus, "heldout", mode, 256, 6, 16, 5);
  double nll = 0;
  long n = 0;
  for (const auto& p : curve)
    if (p.pos_lo >= lossless_reach) {
      nll += p.mean_nll * static_cast<double>(p.count);
      n += p.count;
    }
  return nll / static_cast<double>(n);
}

// ------------------------------------------------------------- criterion 5
// Directional training smoke on >= 5 MB of real text: distilling the
// compressing student against its own frozen full-attention teacher must cut
// the held-out teacher KL by at least half within 2000 steps, and the tuned
// student must beat plain windowed attention on perplexity restricted to
// positions past the lossless reach. Budget: under an hour of laptop CPU.

bool criterion_distillation_smoke() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  Corpus corpus = acceptance_corpus();
  const std::uint64_t bytes =
      corpus.total_bytes("train") + corpus.total_bytes("heldout");
  ok &= check(bytes >= 5'000'000, "corpus under 5 MB");
  std::printf("    corpus %.1f MB (train + heldout)\n", static_cast<double>(bytes) / 1e6);

  const fs::path base_ckpt = pretrained_base(corpus);
  std::printf("    base ready at %.0fs\n", seconds_since(t0));

  ModelConfig ac = smoke_model_config();
  ac.mixer_kind = MixerKind::sinks_swa_ahn;
  Model<double> student(ac);
  student.init(11);
  load_model(student, base_ckpt);
  const double kl0 = held_out_kl(student, corpus, "heldout", 256, 6, 5);

  DistillConfig dc;
  dc.steps = 2000;
  dc.seq_len = 256;
  dc.batch = 2;
  dc.lr = kDistillLr;
  dc.seed = 13;
  const auto t1 = std::chrono::steady_clock::now();
  Trainer<double> tr(student, corpus, dc);
  while (tr.step_count() < dc.steps) {
    const auto st = tr.step();
    if (st.step % 250 == 0) std::printf("    distill step %ld kl-loss %.6f\n", st.step, st.loss);
  }
  const double distill_s = seconds_since(t1);
  const double klT = held_out_kl(student, corpus, "heldout", 256, 6, 5);
  std::printf("    held-out KL %.6f -> %.6f (%.1f%% of start) in %.0fs\n", kl0, klT,
              100 * klT / kl0, distill_s);
  ok &= check(klT <= 0.5 * kl0, "held-out KL did not halve");
  ok &= check(distill_s < 3600.0, "distillation overran the hour budget");

  const int reach = ac.sinks + ac.window;
  const double nll_ahn = beyond_window_nll(student, corpus, ac.mode(), reach);
  ModelConfig sc = smoke_model_config();
  sc.mixer_kind = MixerKind::sinks_swa;
  Model<double> swa(sc);
  swa.init(11);
  load_model(swa, base_ckpt);
  const double nll_swa = beyond_window_nll(swa, corpus, sc.mode(), reach);
  std::printf("    beyond-window ppl: student %.4f vs windowed %.4f\n",
              std::exp(nll_ahn), std::exp(nll_swa));
  ok &= check(nll_ahn < nll_swa, "student not below windowed attention beyond the window");
  return ok;
}

// ------------------------------------------------------------- criterion 6
// Ablation directions at matched step counts: randomizing the compression
// boundary during training must lower the worst-case held-out KL across a
// sweep of windows never trained at fixed, and the KL objective must track
// the teacher better than CE training does.

bool criterion_ablation_direction() {
  bool ok = true;
  Corpus corpus = acceptance_corpus();
  const fs::path base_ckpt = pretrained_base(corpus);

  ModelConfig ac = smoke_model_config();
  ac.mixer_kind = MixerKind::sinks_swa_ahn;
  auto arm = [&](TrainObjective obj, WindowPolicy wp) {
    auto student = std::make_unique<Model<double>>(ac);
    student->init(11);
    load_model(*student, base_ckpt);
    DistillConfig dc;
    dc.steps = 500;
    dc.seq_len = 256;
    dc.batch = 2;
    dc.lr = kDistillLr;
    dc.seed = 13;
    dc.objective = obj;
    dc.windows = wp;
    Trainer<double> tr(*student, corpus, dc);
    while (tr.step_count() < dc.steps) tr.step();
    return student;
  };

  auto fixed_kl = arm(TrainObjective::distill_kl, WindowPolicy::fixed());
  // randomize around the deployment boundary (mean 16 == the fixed window) so
  // both arms see the same expected eviction load and only the variance differs
  auto ranged_kl = arm(TrainObjective::distill_kl, WindowPolicy::range(8, 24));
  auto fixed_ce = arm(TrainObjective::distill_ce, WindowPolicy::fixed());

  double worst_fixed = 0, worst_ranged = 0;
  for (int w : {8, 24, 32, 48, 64}) {
    ForwardOverrides ov;
    ov.window = w;
    const double kf = held_out_kl(*fixed_kl, corpus, "heldout", 256, 6, 5, ov);
    const double kr = held_out_kl(*ranged_kl, corpus, "heldout", 256, 6, 5, ov);
    worst_fixed = std::max(worst_fixed, kf);
    worst_ranged = std::max(worst_ranged, kr);
    std::printf("    window %3d: fixed-trained KL %.6f, range-trained KL %.6f\n", w, kf, kr);
  }
  ok &= check(worst_ranged < worst_fixed,
              "window randomization did not improve worst-case KL");

  const double kl_of_kl = held_out_kl(*fixed_kl, corpus, "heldout", 256, 6, 5);
  const double kl_of_ce = held_out_kl(*fixed_ce, corpus, "heldout", 256, 6, 5);
  std::printf("    teacher KL at the training window: kl-trained %.6f, ce-trained %.6f\n",
              kl_of_kl, kl_of_ce);
  ok &= check(kl_of_kl < kl_of_ce, "KL objective not below CE objective");
  return ok;
}

// ------------------------------------------------------------- criterion 7
// A compressing stream must hold a constant number of bytes no matter how
// long it runs; the analytical FLOP curve must be exactly linear beyond the
// window (zero second difference) while full attention stays quadratic
// (constant positive second difference).

bool criterion_constancy() {
  bool ok = true;
  ModelConfig c;
  c.vocab = 257;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_q_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 8;
  c.ffn_mult = 2;
  c.sinks = 2;
  c.window = 16;
  c.mixer_kind = MixerKind::sinks_swa_ahn;
  Model<double> m(c);
  m.init(5);
  Rng rng = Rng::derive(60, "constancy");

  std::vector<std::size_t> sizes;
  for (int mult : {2, 10, 100}) {
    auto st = m.new_stream(c.mode());
    const int L = mult * c.window;
    for (int i = 0; i < L; ++i)
      m.stream_step(st, static_cast<int>(rng.uniform_int(0, c.vocab - 1)));
    sizes.push_back(st.memory_bytes());
    std::printf("    L = %3dW: stream memory %zu bytes\n", mult, st.memory_bytes());
  }
  ok &= check(sizes[0] == sizes[1] && sizes[1] == sizes[2],
              "stream memory not constant");

  ComplexitySpec spec;
  spec.d_model = 32;
  spec.head_dim = 8;
  spec.n_q_heads = 4;
  spec.n_kv_heads = 2;
  spec.window = 16;
  const auto lin = flop_second_differences(spec, MixerKind::sinks_swa_ahn, 17, 64);
  for (long long d : lin) ok &= check(d == 0, "ahn flop curvature nonzero");
  const auto quad = flop_second_differences(spec, MixerKind::full, 17, 64);
  const long long expect = 4LL * spec.head_dim * spec.n_q_heads;
  for (long long d : quad) ok &= check(d == expect, "full flop curvature drifted");
  std::printf("    second differences: ahn 0, full %lld per step\n", expect);
  return ok;
}

// ------------------------------------------------------------- criterion 8
// Pooling-memory oracles: rate-1 pooling is the identity, averaging matches
// the arithmetic mean, max matches the elementwise maximum, and the slot
// budget leaves the pooled cache no larger than the recurrent state it
// replaces (same extra cache elements at the reference 3b shape).

bool criterion_ct_baseline() {
  bool ok = true;
  Rng rng = Rng::derive(88, "ct");
  const int dim = 12;
  auto rand_pairs = [&](int n) {
    std::vector<EvictedPair<double>> ps(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) {
      auto& p = ps[static_cast<std::size_t>(t)];
      p.pos = t;
      p.k = Mat<double>(1, dim);
      p.v = Mat<double>(1, dim);
      for (int j = 0; j < dim; ++j) {
        p.k(0, j) = rng.normal(0.0, 1.0);
        p.v(0, j) = rng.normal(0.0, 1.0);
      }
    }
    return ps;
  };

  {  // identity at rate 1
    const auto pairs = rand_pairs(7);
    const auto [pk, pv] = ct_compress(pairs, 1, CtPool::avg);
    ok &= check(pk.rows() == 7 && pv.rows() == 7, "rate-1 slot count");
    for (int t = 0; t < 7; ++t) {
      const auto& p = pairs[static_cast<std::size_t>(t)];
      ok &= check((pk.row(t).array() == p.k.array()).all() &&
                      (pv.row(t).array() == p.v.array()).all(),
                  "rate-1 pooling is not the identity");
    }
  }
  {  // mean oracle at rate 3
    const auto pairs = rand_pairs(9);
    const auto [pk, pv] = ct_compress(pairs, 3, CtPool::avg);
    ok &= check(pk.rows() == 3, "pooled slot count");
    for (int g = 0; g < 3 && ok; ++g) {
      Mat<double> mk = Mat<double>::Zero(1, dim), mv = Mat<double>::Zero(1, dim);
      for (int t = 0; t < 3; ++t) {
        mk += pairs[static_cast<std::size_t>(3 * g + t)].k;
        mv += pairs[static_cast<std::size_t>(3 * g + t)].v;
      }
      ok &= check((pk.row(g) - mk / 3.0).cwiseAbs().maxCoeff() < 1e-15 &&
                      (pv.row(g) - mv / 3.0).cwiseAbs().maxCoeff() < 1e-15,
                  "group mean mismatch");
    }
  }
  {  // max oracle at rate 4
    const auto pairs = rand_pairs(8);
    const auto [pk, pv] = ct_compress(pairs, 4, CtPool::max);
    ok &= check(pk.rows() == 2, "pooled slot count");
    for (int g = 0; g < 2; ++g)
      for (int j = 0; j < dim; ++j) {
        double xk = pairs[static_cast<std::size_t>(4 * g)].k(0, j);
        double xv = pairs[static_cast<std::size_t>(4 * g)].v(0, j);
        for (int t = 1; t < 4; ++t) {
          xk = std::max(xk, pairs[static_cast<std::size_t>(4 * g + t)].k(0, j));
          xv = std::max(xv, pairs[static_cast<std::size_t>(4 * g + t)].v(0, j));
        }
        ok &= check(pk(g, j) == xk && pv(g, j) == xv, "group max mismatch");
      }
  }

  ComplexitySpec spec;
  spec.seq_len = 128000;
  spec.window = 32768;
  spec.d_model = 2048;
  spec.head_dim = 128;
  spec.n_q_heads = 16;
  spec.n_kv_heads = 2;
  spec.n_layers = 36;
  const std::uint64_t slots = ct_budget_slots(spec);
  const std::uint64_t pooled_extra = 2 * slots * spec.head_dim * spec.n_kv_heads;
  const std::uint64_t state_elems = spec.head_dim * spec.head_dim * spec.n_q_heads;
  ok &= check(pooled_extra == state_elems, "budget rule: pooled cache != state size");
  const CostReport ct = complexity(spec, MixerKind::sinks_swa_ct);
  const CostReport ahn = complexity(spec, MixerKind::sinks_swa_ahn);
  ok &= check(ct.cache_elems == ahn.cache_elems, "ct cache != ahn cache at 3b shape");
  ok &= check(std::abs(100 * ct.cache_ratio - 26.0) <= 0.1, "ct cache ratio vs 26.0%");
  std::printf("    budget %llu slots, pooled extra %llu elems == state %llu, cache %.4f%%\n",
              static_cast<unsigned long long>(slots),
              static_cast<unsigned long long>(pooled_extra),
              static_cast<unsigned long long>(state_elems), 100 * ct.cache_ratio);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  struct Entry {
    int id;
    const char* name;
    bool (*fn)();
  };
  const Entry entries[] = {
      {1, "complexity-table", criterion_complexity_table},
      {2, "lossless-equivalence", criterion_lossless_equivalence},
      {3, "recurrence-oracle", criterion_recurrence_oracle},
      {4, "gradient-suite", criterion_gradient_suite},
      {5, "distillation-smoke", criterion_distillation_smoke},
      {6, "ablation-direction", criterion_ablation_direction},
      {7, "constancy", criterion_constancy},
      {8, "ct-baseline", criterion_ct_baseline},
  };

  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) {
    const int id = std::atoi(argv[i]);
    if (id < 1 || id > 8) {
      std::fprintf(stderr, "unknown criterion '%s' (valid: 1..8)\n", argv[i]);
      return 2;
    }
    wanted.push_back(id);
  }

  bool all_ok = true;
  for (const Entry& e : entries) {
    if (!wanted.empty() &&
        std::find(wanted.begin(), wanted.end(), e.id) == wanted.end())
      continue;
    std::printf("criterion %d (%s):\n", e.id, e.name);
    bool ok = false;
    try {
      ok = e.fn();
    } catch (const std::exception& ex) {
      std::printf("    threw: %s\n", ex.what());
    }
    std::printf("criterion %d %-22s %s\n", e.id, e.name, ok ? "PASS" : "FAIL");
    all_ok &= ok;
  }
  return all_ok ? 0 : 1;
}
