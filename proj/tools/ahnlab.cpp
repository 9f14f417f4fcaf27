// ahnlab: byte-level language-model lab around a sliding-window attention
// cache with a trainable compressing memory for evicted context.
//
// Commands: corpus, train, eval, bench, probe. stdout carries data or
// artifact paths (key=value lines and CSV), stderr carries diagnostics.
// Exit codes: 0 ok, 2 bad config/arguments/file format, 3 corpus problems,
// 4 non-finite numerics, 1 anything else.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "ahn/analysis.hpp"
#include "ahn/checkpoint.hpp"
#include "ahn/complexity.hpp"
#include "ahn/corpus.hpp"
#include "ahn/distill.hpp"
#include "ahn/io.hpp"
#include "ahn/model.hpp"

namespace fs = std::filesystem;
using namespace ahn;

namespace {

// ---------------------------------------------------------------- plumbing

// config file first, then --set key=value overrides in order
KvConfig merged_config(const std::string& config_path,
                       const std::vector<std::string>& sets) {
  KvConfig kv;
  if (!config_path.empty()) kv = KvConfig::parse_file(config_path);
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("--set expects key=value, got '" + s + "'");
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return kv;
}

DistillConfig distill_from_kv(const KvConfig& kv) {
  DistillConfig c;
  c.steps = kv.get_long_or("steps", c.steps);
  c.seq_len = static_cast<int>(kv.get_long_or("seq_len", c.seq_len));
  c.batch = static_cast<int>(kv.get_long_or("batch", c.batch));
  c.lr = kv.get_double_or("lr", c.lr);
  c.weight_decay = kv.get_double_or("weight_decay", c.weight_decay);
  c.clip_norm = kv.get_double_or("clip_norm", c.clip_norm);
  c.objective = objective_from(kv.get_or("objective", to_string(c.objective)));
  c.windows.randomize = kv.get_long_or("window_randomize", 0) != 0;
  c.windows.window_min =
      static_cast<int>(kv.get_long_or("window_min", c.windows.window_min));
  c.windows.window_max =
      static_cast<int>(kv.get_long_or("window_max", c.windows.window_max));
  c.windows.sinks_min =
      static_cast<int>(kv.get_long_or("sinks_min", c.windows.sinks_min));
  c.windows.sinks_max =
      static_cast<int>(kv.get_long_or("sinks_max", c.windows.sinks_max));
  c.seed = static_cast<std::uint64_t>(kv.get_long_or("seed", 1));
  c.log_every = kv.get_long_or("log_every", c.log_every);
  c.checkpoint_every = kv.get_long_or("checkpoint_every", c.checkpoint_every);
  c.train_split = kv.get_or("train_split", c.train_split);
  return c;
}

std::string distill_to_text(const DistillConfig& c) {
  KvConfig kv;
  kv.set("steps", std::to_string(c.steps));
  kv.set("seq_len", std::to_string(c.seq_len));
  kv.set("batch", std::to_string(c.batch));
  kv.set("lr", format_double(c.lr));
  kv.set("weight_decay", format_double(c.weight_decay));
  kv.set("clip_norm", format_double(c.clip_norm));
  kv.set("objective", to_string(c.objective));
  kv.set("window_randomize", c.windows.randomize ? "1" : "0");
  kv.set("window_min", std::to_string(c.windows.window_min));
  kv.set("window_max", std::to_string(c.windows.window_max));
  kv.set("sinks_min", std::to_string(c.windows.sinks_min));
  kv.set("sinks_max", std::to_string(c.windows.sinks_max));
  kv.set("seed", std::to_string(c.seed));
  kv.set("log_every", std::to_string(c.log_every));
  kv.set("checkpoint_every", std::to_string(c.checkpoint_every));
  kv.set("train_split", c.train_split);
  return kv.serialize();
}

void echo_config(const fs::path& out_dir, const std::string& text) {
  fs::create_directories(out_dir);
  atomic_write_file(out_dir / "config.txt", text);
}

// the lab is single-threaded, so any positive cap is already honored; the
// variable is still validated to keep misconfiguration loud
void check_thread_cap() {
  const char* t = std::getenv("AHNLAB_THREADS");
  if (t == nullptr) return;
  char* end = nullptr;
  const long v = std::strtol(t, &end, 10);
  if (end == t || *end != '\0' || v < 1)
    throw ConfigError("AHNLAB_THREADS must be a positive integer, got '" +
                      std::string(t) + "'");
}

// ------------------------------------------------------------------ corpus

struct CorpusOpts {
  std::vector<std::string> sources;
  std::vector<std::string> excludes;
  std::string ext = ".txt";
  std::string out;
  double heldout = 0.1;
  long seed = 1;
};

void run_corpus(const CorpusOpts& o) {
  std::vector<fs::path> files;
  for (const std::string& src : o.sources) {
    const fs::path p = src;
    if (fs::is_directory(p)) {
      const auto found = collect_files(p, o.ext, o.excludes);
      files.insert(files.end(), found.begin(), found.end());
    } else if (fs::is_regular_file(p)) {
      files.push_back(p);
    } else {
      throw CorpusError("corpus: source '" + src + "' does not exist");
    }
  }
  build_corpus_dir(files, o.out, o.heldout, static_cast<std::uint64_t>(o.seed));
  const Corpus corpus = Corpus::open(o.out);
  std::cout << "out=" << o.out << "\n";
  for (const char* split : {"train", "heldout"}) {
    if (!corpus.has_split(split)) continue;
    std::cout << split << "_shards=" << corpus.shards(split).size() << "\n"
              << split << "_bytes=" << corpus.total_bytes(split) << "\n";
  }
}

// ------------------------------------------------------------------- train

struct TrainOpts {
  std::string corpus_dir, config_path, out_dir, init_from, resume;
  std::vector<std::string> sets;
  long seed = -1;  // -1: keep the config value
  bool f32 = false;
};

template <typename S>
void run_train(const TrainOpts& o) {
  KvConfig kv = merged_config(o.config_path, o.sets);
  if (o.seed >= 0) kv.set("seed", std::to_string(o.seed));
  const ModelConfig mc = ModelConfig::from_kv(kv);
  const DistillConfig dc = distill_from_kv(kv);
  mc.validate();
  dc.validate();
  const fs::path out = o.out_dir;
  echo_config(out, "command=train\n" + mc.to_text() + distill_to_text(dc));

  const Corpus corpus = Corpus::open(o.corpus_dir);
  Model<S> model(mc);
  model.init(dc.seed);
  if (!o.init_from.empty()) load_model(model, fs::path(o.init_from));
  Trainer<S> trainer(model, corpus, dc);
  if (!o.resume.empty()) trainer.resume(o.resume);

  std::vector<std::vector<std::string>> rows;
  const auto flush_rows = [&] {
    atomic_write_file(out / "steps.csv",
                      csv_format({"step", "loss", "lr", "window", "sinks", "grad_norm"},
                                 rows));
  };
  while (trainer.step_count() < dc.steps) {
    StepStats st;
    try {
      st = trainer.step();
    } catch (const NumericError&) {
      save_model(model, out / "nonfinite_dump.ckpt", "dumped_at_step=" +
                                                         std::to_string(trainer.step_count()) + "\n");
      flush_rows();
      std::cerr << "non-finite loss; model state dumped to "
                << (out / "nonfinite_dump.ckpt").string() << "\n";
      throw;
    }
    rows.push_back({std::to_string(st.step), format_double(st.loss),
                    format_double(st.lr), std::to_string(st.window),
                    std::to_string(st.sinks), format_double(st.grad_norm)});
    if (dc.log_every > 0 && st.step % dc.log_every == 0)
      std::cerr << "step " << st.step << " loss " << st.loss << " lr " << st.lr
                << " window " << st.window << "\n";
    if (dc.checkpoint_every > 0 && (st.step + 1) % dc.checkpoint_every == 0) {
      trainer.save(out / ("step_" + std::to_string(st.step + 1) + ".ckpt"));
      trainer.save(out / "last.ckpt");
      flush_rows();
    }
  }
  trainer.save(out / "last.ckpt");
  flush_rows();

  // final held-out metrics; falls back to the train split for tiny corpora
  const std::string split =
      corpus.has_split("heldout") ? std::string("heldout") : dc.train_split;
  const int slices = static_cast<int>(kv.get_long_or("eval_slices", 4));
  std::vector<std::vector<std::string>> mrows;
  mrows.push_back({"final_step", std::to_string(trainer.step_count())});
  if (mc.mixer_kind != MixerKind::full) {
    const double kl =
        held_out_kl(model, corpus, split, dc.seq_len, slices, dc.seed);
    mrows.push_back({"held_out_kl", format_double(kl)});
  }
  const double ce = held_out_ce(model, corpus, split, dc.seq_len, slices,
                                dc.seed, mc.mode());
  mrows.push_back({"held_out_ce", format_double(ce)});
  atomic_write_file(out / "metrics.csv", csv_format({"metric", "value"}, mrows));

  std::cout << "checkpoint=" << (out / "last.ckpt").string() << "\n"
            << "steps_csv=" << (out / "steps.csv").string() << "\n"
            << "metrics_csv=" << (out / "metrics.csv").string() << "\n";
}

// -------------------------------------------------------------------- eval

struct EvalOpts {
  std::string checkpoint, corpus_dir, out_dir;
  std::string split = "heldout";
  std::vector<std::string> modes = {"full", "sinks_swa", "sinks_swa_ahn"};
  std::vector<int> windows;
  int seq_len = 256;
  int slices = 4;
  int bucket = 32;
  long seed = 1;
  bool f32 = false;
};

template <typename S>
void run_eval(const EvalOpts& o) {
  const CheckpointData<S> data = load_checkpoint_file<S>(o.checkpoint);
  const ModelConfig base_cfg = ModelConfig::from_text(data.config_text);
  const Corpus corpus = Corpus::open(o.corpus_dir);
  const fs::path out = o.out_dir;
  const std::uint64_t seed = static_cast<std::uint64_t>(o.seed);

  const std::vector<int> windows =
      o.windows.empty() ? std::vector<int>{base_cfg.window} : o.windows;
  {
    KvConfig kv = KvConfig::parse(base_cfg.to_text());
    kv.set("command", "eval");
    kv.set("checkpoint", o.checkpoint);
    kv.set("split", o.split);
    kv.set("eval_seq_len", std::to_string(o.seq_len));
    kv.set("eval_slices", std::to_string(o.slices));
    kv.set("eval_bucket", std::to_string(o.bucket));
    kv.set("eval_seed", std::to_string(seed));
    echo_config(out, kv.serialize());
  }

  std::vector<std::vector<std::string>> ppl_rows, metric_rows;
  for (const std::string& mode_name : o.modes) {
    const MixerKind kind = mixer_kind_from(mode_name);
    ModelConfig cfg = base_cfg;
    cfg.mixer_kind = kind;
    cfg.validate();
    Model<S> model(cfg);
    load_model(model, data);

    // window sweeps only matter for windowed mixers; 0 marks "whole context"
    const std::vector<int> sweep =
        kind == MixerKind::full ? std::vector<int>{0} : windows;
    for (int w : sweep) {
      ForwardOverrides ov;
      if (w > 0) ov.window = w;
      const auto curve = ppl_curve(model, corpus, o.split, cfg.mode(), o.seq_len,
                                   o.slices, o.bucket, seed, ov);
      for (const PplPoint& p : curve)
        ppl_rows.push_back({mode_name, std::to_string(w), std::to_string(p.pos_lo),
                            std::to_string(p.pos_hi), std::to_string(p.count),
                            format_double(p.mean_nll), format_double(p.ppl)});
      const double kl =
          held_out_kl(model, corpus, o.split, o.seq_len, o.slices, seed, ov);
      const double ce = held_out_ce(model, corpus, o.split, o.seq_len, o.slices,
                                    seed, cfg.mode(), ov);
      metric_rows.push_back({mode_name, std::to_string(w), format_double(kl),
                             format_double(ce)});
    }
  }
  atomic_write_file(
      out / "ppl.csv",
      csv_format({"mode", "window", "pos_lo", "pos_hi", "count", "mean_nll", "ppl"},
                 ppl_rows));
  atomic_write_file(out / "metrics.csv",
                    csv_format({"mode", "window", "held_out_kl", "held_out_ce"},
                               metric_rows));
  std::cout << "ppl_csv=" << (out / "ppl.csv").string() << "\n"
            << "metrics_csv=" << (out / "metrics.csv").string() << "\n";
}

// ------------------------------------------------------------------- bench

struct BenchOpts {
  std::string preset = "custom";
  long seq_len = 128000;
  long window = 32768;
  long d_model = 0, head_dim = 0, n_q = 0, n_kv = 0, layers = 1;
  double base_params = 0;
  long ct_slots = 0;
  bool no_gate_terms = false;
  std::vector<long> curve;
  std::string out_dir;
};

void run_bench(const BenchOpts& o) {
  ComplexitySpec s;
  // preset dimensions are external inputs taken from public Qwen2.5 model
  // cards (hidden size, head counts, layers, total parameters)
  if (o.preset == "qwen3b") {
    s.d_model = 2048; s.head_dim = 128; s.n_q_heads = 16; s.n_kv_heads = 2;
    s.n_layers = 36; s.base_params = 3.09e9;
  } else if (o.preset == "qwen7b") {
    s.d_model = 3584; s.head_dim = 128; s.n_q_heads = 28; s.n_kv_heads = 4;
    s.n_layers = 28; s.base_params = 7.62e9;
  } else if (o.preset == "qwen14b") {
    s.d_model = 5120; s.head_dim = 128; s.n_q_heads = 40; s.n_kv_heads = 8;
    s.n_layers = 48; s.base_params = 14.8e9;
  } else if (o.preset == "custom") {
    if (o.d_model <= 0 || o.head_dim <= 0 || o.n_q <= 0 || o.n_kv <= 0)
      throw ConfigError("bench: custom preset needs --d-model --head-dim "
                        "--n-q-heads --n-kv-heads");
    s.d_model = static_cast<std::uint64_t>(o.d_model);
    s.head_dim = static_cast<std::uint64_t>(o.head_dim);
    s.n_q_heads = static_cast<std::uint64_t>(o.n_q);
    s.n_kv_heads = static_cast<std::uint64_t>(o.n_kv);
    s.n_layers = static_cast<std::uint64_t>(o.layers);
    s.base_params = o.base_params;
  } else {
    throw ConfigError("bench: unknown preset '" + o.preset + "'");
  }
  if (o.seq_len <= 0 || o.window <= 0)
    throw ConfigError("bench: sequence length and window must be positive");
  s.seq_len = static_cast<std::uint64_t>(o.seq_len);
  s.window = static_cast<std::uint64_t>(o.window);
  s.ct_slots = static_cast<std::uint64_t>(o.ct_slots);
  const bool gate = !o.no_gate_terms;

  std::vector<std::vector<std::string>> rows;
  for (MixerKind kind : {MixerKind::full, MixerKind::sinks_swa,
                         MixerKind::sinks_swa_ahn, MixerKind::sinks_swa_ct}) {
    const CostReport r = complexity(s, kind, gate);
    rows.push_back({to_string(kind), std::to_string(r.params_extra),
                    format_double(100.0 * r.params_ratio),
                    std::to_string(r.flops_mixing),
                    format_double(100.0 * r.flops_ratio),
                    std::to_string(r.cache_elems),
                    format_double(100.0 * r.cache_ratio)});
  }
  std::cout << csv_format({"mixer", "params_extra", "params_pct", "flops_mixing",
                           "flops_pct", "cache_elems", "cache_pct"},
                          rows)
            << "\n";

  std::vector<std::vector<std::string>> vrows;
  for (AhnVariant v : {AhnVariant::gdn, AhnVariant::dn, AhnVariant::mamba2}) {
    const std::uint64_t n = ahn_trainable_params(s, v);
    const double pct =
        s.base_params > 0 ? 100.0 * static_cast<double>(n) / s.base_params : 0.0;
    vrows.push_back({to_string(v), std::to_string(n), format_double(pct)});
  }
  std::cout << csv_format({"variant", "trainable_params", "trainable_pct"}, vrows);

  if (!o.curve.empty()) {
    if (o.out_dir.empty()) throw ConfigError("bench: --curve needs --out-dir");
    std::vector<std::uint64_t> lens;
    for (long l : o.curve) {
      if (l <= 0) throw ConfigError("bench: curve lengths must be positive");
      lens.push_back(static_cast<std::uint64_t>(l));
    }
    std::vector<std::vector<std::string>> crows;
    std::vector<std::vector<FlopPoint>> per_kind;
    for (MixerKind kind : {MixerKind::full, MixerKind::sinks_swa,
                           MixerKind::sinks_swa_ahn, MixerKind::sinks_swa_ct})
      per_kind.push_back(flop_curve(s, kind, lens, gate));
    for (std::size_t i = 0; i < lens.size(); ++i)
      crows.push_back({std::to_string(lens[i]),
                       std::to_string(per_kind[0][i].flops),
                       std::to_string(per_kind[1][i].flops),
                       std::to_string(per_kind[2][i].flops),
                       std::to_string(per_kind[3][i].flops)});
    const fs::path out = o.out_dir;
    fs::create_directories(out);
    atomic_write_file(out / "flop_curve.csv",
                      csv_format({"seq_len", "full", "sinks_swa", "sinks_swa_ahn",
                                  "sinks_swa_ct"},
                                 crows));
    std::cout << "curve_csv=" << (out / "flop_curve.csv").string() << "\n";
  }
}

// ------------------------------------------------------------------- probe

struct ProbeOpts {
  std::string checkpoint, input, out_dir;
  int sinks = -1, window = -1;
  int max_len = 256;
  bool f32 = false;
};

template <typename S>
void run_probe(const ProbeOpts& o) {
  Model<S> model = load_model_new<S>(o.checkpoint);
  const std::string bytes = read_file(o.input);
  if (bytes.empty()) throw ConfigError("probe: input file is empty");
  if (o.max_len < 2) throw ConfigError("probe: --max-len must be >= 2");

  std::vector<int> tokens;
  tokens.push_back(kBosToken);
  for (std::size_t i = 0; i + 1 < static_cast<std::size_t>(o.max_len) && i < bytes.size(); ++i)
    tokens.push_back(static_cast<unsigned char>(bytes[i]));

  ForwardOverrides ov;
  ov.sinks = o.sinks;
  ov.window = o.window;
  const GradProbe probe = grad_probe(model, tokens, ov);

  double gmax = 0;
  for (double g : probe.grad_l2) gmax = std::max(gmax, g);
  std::vector<std::vector<std::string>> rows;
  long compressed = 0;
  for (std::size_t i = 0; i < probe.grad_l2.size(); ++i) {
    const bool comp = probe.compressed_at(i);
    compressed += comp ? 1 : 0;
    rows.push_back({std::to_string(i), std::to_string(tokens[i]),
                    format_double(probe.grad_l2[i]),
                    format_double(gmax > 0 ? probe.grad_l2[i] / gmax : 0.0),
                    comp ? "1" : "0"});
  }
  const fs::path out = o.out_dir;
  {
    KvConfig kv;
    kv.set("command", "probe");
    kv.set("checkpoint", o.checkpoint);
    kv.set("input", o.input);
    kv.set("sinks", std::to_string(probe.sinks));
    kv.set("window", std::to_string(probe.window));
    kv.set("positions", std::to_string(probe.grad_l2.size()));
    echo_config(out, kv.serialize());
  }
  atomic_write_file(out / "probe.csv",
                    csv_format({"index", "token", "grad_l2", "normalized",
                                "compressed"},
                               rows));
  std::cout << "kl=" << format_double(probe.kl) << "\n"
            << "positions=" << probe.grad_l2.size() << "\n"
            << "compressed_positions=" << compressed << "\n"
            << "probe_csv=" << (out / "probe.csv").string() << "\n";
}

int guarded(const std::function<void()>& body) {
  try {
    check_thread_cap();
    body();
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const CorpusError& e) {
    std::cerr << "corpus error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"byte-level LM lab: sliding-window attention with a compressing memory"};
  app.require_subcommand(1);

  CorpusOpts co;
  CLI::App* corpus = app.add_subcommand(
      "corpus", "build a train/heldout corpus directory from source files");
  corpus->add_option("--source", co.sources, "source file or directory (repeatable)")
      ->required();
  corpus->add_option("--ext", co.ext, "extension filter for directory sources");
  corpus->add_option("--exclude", co.excludes, "skip paths containing this substring");
  corpus->add_option("--out", co.out, "corpus output directory")->required();
  corpus->add_option("--heldout", co.heldout, "held-out fraction of files");
  corpus->add_option("--seed", co.seed, "shuffle seed");

  TrainOpts to;
  CLI::App* train = app.add_subcommand(
      "train", "train the compressing memory against the frozen full-attention teacher");
  train->add_option("--corpus", to.corpus_dir, "corpus directory")->required();
  train->add_option("--config", to.config_path, "key=value config file");
  train->add_option("--set", to.sets, "override a config key (key=value, repeatable)");
  train->add_option("--out-dir", to.out_dir, "artifact directory")->required();
  train->add_option("--init-from", to.init_from, "load initial weights from a checkpoint");
  train->add_option("--resume", to.resume, "resume trainer state from a checkpoint");
  train->add_option("--seed", to.seed, "override the config seed");
  train->add_flag("--f32", to.f32, "run in single precision");

  EvalOpts eo;
  CLI::App* eval = app.add_subcommand(
      "eval", "per-mode, per-window perplexity and teacher-KL tables");
  eval->add_option("--checkpoint", eo.checkpoint, "model checkpoint")->required();
  eval->add_option("--corpus", eo.corpus_dir, "corpus directory")->required();
  eval->add_option("--out-dir", eo.out_dir, "artifact directory")->required();
  eval->add_option("--split", eo.split, "corpus split to evaluate");
  eval->add_option("--modes", eo.modes, "mixer list")->delimiter(',');
  eval->add_option("--windows", eo.windows, "window sizes to sweep")->delimiter(',');
  eval->add_option("--seq-len", eo.seq_len, "tokens per slice");
  eval->add_option("--slices", eo.slices, "held-out slices to pool");
  eval->add_option("--bucket", eo.bucket, "positions per perplexity bucket");
  eval->add_option("--seed", eo.seed, "slice sampling seed");
  eval->add_flag("--f32", eo.f32, "run in single precision");

  BenchOpts bo;
  CLI::App* bench = app.add_subcommand(
      "bench", "closed-form parameter/FLOP/cache cost table for all mixers");
  bench->add_option("--preset", bo.preset,
                    "qwen3b|qwen7b|qwen14b (public model-card shapes) or custom");
  bench->add_option("--L", bo.seq_len, "sequence length");
  bench->add_option("--W", bo.window, "lossless window (sinks folded in)");
  bench->add_option("--d-model", bo.d_model, "custom: model width");
  bench->add_option("--head-dim", bo.head_dim, "custom: head dimension");
  bench->add_option("--n-q-heads", bo.n_q, "custom: query heads");
  bench->add_option("--n-kv-heads", bo.n_kv, "custom: key/value heads");
  bench->add_option("--layers", bo.layers, "custom: layer count");
  bench->add_option("--base-params", bo.base_params, "custom: base parameter count");
  bench->add_option("--ct-slots", bo.ct_slots, "pooled slots (0 = cache-budget rule)");
  bench->add_flag("--no-gate-terms", bo.no_gate_terms,
                  "count only the state update, not gates and readout");
  bench->add_option("--curve", bo.curve, "emit a FLOP curve at these lengths")
      ->delimiter(',');
  bench->add_option("--out-dir", bo.out_dir, "artifact directory for --curve");

  ProbeOpts po;
  CLI::App* probe = app.add_subcommand(
      "probe", "per-position input-gradient report for compressed context");
  probe->add_option("--checkpoint", po.checkpoint, "model checkpoint")->required();
  probe->add_option("--input", po.input, "raw byte file to probe")->required();
  probe->add_option("--out-dir", po.out_dir, "artifact directory")->required();
  probe->add_option("--sinks", po.sinks, "override sink count");
  probe->add_option("--window", po.window, "override window size");
  probe->add_option("--max-len", po.max_len, "cap on probed positions (incl. BOS)");
  probe->add_flag("--f32", po.f32, "run in single precision");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return 2;
  }

  if (*corpus) return guarded([&] { run_corpus(co); });
  if (*train)
    return guarded([&] { to.f32 ? run_train<float>(to) : run_train<double>(to); });
  if (*eval)
    return guarded([&] { eo.f32 ? run_eval<float>(eo) : run_eval<double>(eo); });
  if (*bench) return guarded([&] { run_bench(bo); });
  if (*probe)
    return guarded([&] { po.f32 ? run_probe<float>(po) : run_probe<double>(po); });
  return 2;
}
