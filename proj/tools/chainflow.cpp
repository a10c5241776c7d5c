// chainflow command-line driver: gen-data, train, ablate, gradcheck, eval.
//
// Exit codes: 0 success, 1 check failure, 2 usage, 3 numeric abort, 4 I/O or load failure.

#include "chainflow/chain.hpp"
#include "chainflow/checkpoint.hpp"
#include "chainflow/config.hpp"
#include "chainflow/gradcheck.hpp"
#include "chainflow/parallel.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace chainflow;

namespace {

constexpr const char* kToolVersion = "0.1.0";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// Hash of the corpus description and every feature file it lists.
std::string corpus_hash(const fs::path& dir) {
  std::uint64_t h = fnv1a(read_text_file(dir / "synth.cfg"));
  const std::string manifest = read_text_file(dir / "manifest.jsonl");
  h = fnv1a(manifest, h);
  std::istringstream is(manifest);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    for (const char* key : {"mel_path", "lin_path"}) {
      std::ifstream f(dir / rec.at(key).get<std::string>(), std::ios::binary);
      std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
      h = fnv1a(bytes, h);
    }
  }
  return hex64(h);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << text;
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void save_atomic(const fs::path& path, const ArrayBundle& bundle) {
  const fs::path tmp = path.string() + ".tmp";
  save_checkpoint(tmp, bundle);
  fs::rename(tmp, path);
}

struct LoadedCorpus {
  Corpus corpus;
  CorpusInfo info;
  NormStats stats;
  std::string hash;
};

LoadedCorpus load_corpus(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.jsonl")) throw UsageError("no corpus at " + dir.string());
  LoadedCorpus lc;
  lc.corpus = read_corpus(dir, &lc.info);
  lc.stats = normalize_corpus(lc.corpus);
  for (const auto& w : lc.stats.warnings) std::cerr << "warning: " << w << "\n";
  lc.hash = corpus_hash(dir);
  return lc;
}

// Same seed and n with sigma = 0, normalized with the noisy training statistics.
std::vector<Utterance> noiseless_dev(const LoadedCorpus& lc) {
  SynthSpec spec = lc.info.spec;
  spec.sigma = 0.0;
  Corpus clean = gen_corpus(lc.info.n, spec, lc.info.seed);
  apply_normalization(clean.dev, lc.stats);
  return clean.dev;
}

ChainConfig read_config(const fs::path& path, std::vector<double>* tau_grid) {
  if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
  return parse_chain_config(read_text_file(path), path.string(), tau_grid);
}

void fit_dims(ChainConfig& cfg, const CorpusInfo& info) {
  cfg.asr.input_dim = info.spec.mel_dim;
  cfg.tts.mel_dim = info.spec.mel_dim;
  cfg.tts.lin_dim = info.spec.lin_dim;
  cfg.threads = threads_from_env();
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string out;
  long long n = 0;
  std::uint64_t seed = 1;
  std::string spec;
};

int cmd_gen_data(const GenDataArgs& a) {
  if (a.n < 3) throw UsageError("--n must be at least 3 (got " + std::to_string(a.n) + ")");
  SynthSpec spec;
  if (!a.spec.empty()) {
    if (!fs::exists(a.spec)) throw UsageError("spec file not found: " + a.spec);
    spec = parse_synth_spec(read_text_file(a.spec), a.spec);
  }
  const std::size_t n = static_cast<std::size_t>(a.n);
  const Corpus corpus = gen_corpus(n, spec, a.seed);
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create " + a.out + ": " + ec.message());
  write_corpus(a.out, corpus, CorpusInfo{spec, a.seed, n});
  std::cout << "wrote " << corpus.size() << " utterances to " << a.out << "\n"
            << "train " << corpus.train.size() << " dev " << corpus.dev.size() << " test " << corpus.test.size()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  bool resume = false;
};

std::string tau_dir_name(double tau) { return "tau_" + format_double(tau); }

nlohmann::ordered_json run_manifest(const ChainConfig& cfg, const TrainArgs& a, const LoadedCorpus& lc,
                                    const std::string& status, const Trainer& trainer) {
  nlohmann::ordered_json m;
  m["tool"] = "chainflow";
  m["version"] = kToolVersion;
  m["command"] = "train";
  m["status"] = status;
  m["seed"] = cfg.seed;
  m["tau"] = cfg.tau;
  m["st_mode"] = to_string(cfg.st_mode);
  m["gen_mode"] = to_string(cfg.gen_mode);
  m["config"] = chain_config_to_text(cfg);
  m["config_file"] = fs::absolute(a.config).string();
  m["data"] = fs::absolute(a.data).string();
  m["corpus_hash"] = lc.hash;
  m["corpus"] = {{"n", lc.info.n}, {"seed", lc.info.seed}, {"synth", synth_spec_to_text(lc.info.spec)}};
  m["threads"] = cfg.threads;
  m["artifacts"] = {{"metrics", "metrics.jsonl"},
                    {"best_checkpoint", "best.ckpt"},
                    {"last_checkpoint", "last.ckpt"},
                    {"trainer_state", "state.ckpt"}};
  m["epochs_completed"] = trainer.epoch();
  m["best_epoch"] = trainer.report().best_epoch;
  if (trainer.epoch() > 0) m["best_val_cer"] = trainer.report().best_val_cer;
  return m;
}

// Keeps the first `epochs` lines of an existing metrics stream.
std::string truncated_metrics(const fs::path& path, int epochs) {
  std::ifstream is(path);
  std::string line, out;
  for (int i = 0; i < epochs && std::getline(is, line); ++i) out += line + "\n";
  return out;
}

std::string config_without_epochs(ChainConfig cfg) {
  cfg.epochs = 0;
  return chain_config_to_text(cfg);
}

int train_one(const ChainConfig& cfg, const TrainArgs& a, const LoadedCorpus& lc, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  ChainModel model(cfg);
  Trainer trainer(model, cfg, lc.corpus);
  const fs::path metrics_path = dir / "metrics.jsonl";
  std::string metrics;
  if (a.resume) {
    if (!fs::exists(dir / "state.ckpt")) throw UsageError("nothing to resume in " + dir.string());
    if (fs::exists(dir / "manifest.json")) {
      const auto old = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
      const ChainConfig prev = parse_chain_config(old.at("config").get<std::string>(), (dir / "manifest.json").string());
      ChainConfig cur = cfg;
      cur.threads = prev.threads;
      if (config_without_epochs(prev) != config_without_epochs(cur))
        throw UsageError("configuration differs from the run being resumed in " + dir.string());
      if (old.at("corpus_hash").get<std::string>() != lc.hash)
        throw UsageError("corpus differs from the run being resumed in " + dir.string());
    }
    trainer.load_state(load_checkpoint(dir / "state.ckpt"));
    metrics = truncated_metrics(metrics_path, trainer.epoch());
    std::cout << "resuming " << dir.string() << " after epoch " << trainer.epoch() << "\n";
  }
  write_text_atomic(metrics_path, metrics);

  auto write_manifest = [&](const std::string& status) {
    write_text_atomic(dir / "manifest.json", run_manifest(cfg, a, lc, status, trainer).dump(2) + "\n");
  };
  auto write_checkpoints = [&] {
    ArrayBundle state;
    trainer.save_state(state);
    save_atomic(dir / "state.ckpt", state);
    ArrayBundle last;
    save_model(last, model, cfg, lc.stats);
    save_atomic(dir / "last.ckpt", last);
    ArrayBundle best;
    save_model(best, trainer.best_params(), model, cfg, lc.stats);
    save_atomic(dir / "best.ckpt", best);
  };

  write_manifest("running");
  if (trainer.epoch() == 0) write_checkpoints();

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& rec) {
    write_checkpoints();
    const std::string line = metrics_line(rec, cfg);
    metrics += line + "\n";
    write_text_atomic(metrics_path, metrics);
    write_manifest("running");
    std::cout << line << std::endl;
  };
  auto record_divergence = [&](const std::exception& e) {
    nlohmann::ordered_json d;
    d["error"] = e.what();
    d["failed_epoch"] = trainer.epoch();
    d["last_good_epoch"] = trainer.epoch() - 1;
    d["last_good_checkpoint"] = "last.ckpt";
    d["trainer_state"] = "state.ckpt";
    write_text_atomic(dir / "divergence.json", d.dump(2) + "\n");
    write_manifest("diverged");
  };
  try {
    train(trainer, cfg, hooks);
  } catch (const DivergenceError& e) {
    record_divergence(e);
    throw;
  } catch (const NumericError& e) {
    record_divergence(e);
    throw;
  }
  write_manifest("completed");
  std::cout << "best val CER " << format_double(trainer.report().best_val_cer) << " at epoch "
            << trainer.report().best_epoch << "; artifacts in " << dir.string() << "\n";
  return 0;
}

int cmd_train(const TrainArgs& a) {
  std::vector<double> taus;
  ChainConfig base = read_config(a.config, &taus);
  const LoadedCorpus lc = load_corpus(a.data);
  if (lc.corpus.train.empty()) throw UsageError("training split is empty");
  fit_dims(base, lc.info);
  for (double tau : taus) {
    ChainConfig cfg = base;
    cfg.tau = tau;
    const fs::path dir = taus.size() > 1 ? fs::path(a.out) / tau_dir_name(tau) : fs::path(a.out);
    train_one(cfg, a, lc, dir);
  }
  return 0;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  std::string config;
  std::string data;
  int seeds = 5;
  std::string out;
};

int cmd_ablate(const AblateArgs& a) {
  if (a.seeds < 1) throw UsageError("--seeds must be at least 1");
  ChainConfig base = read_config(a.config, nullptr);
  const LoadedCorpus lc = load_corpus(a.data);
  fit_dims(base, lc.info);
  const std::vector<Utterance> clean = noiseless_dev(lc);
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < a.seeds; ++i) seeds.push_back(base.seed + static_cast<std::uint64_t>(i));

  std::ofstream jsonl;
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    jsonl.open(fs::path(a.out) / "ablation.jsonl");
    if (!jsonl) throw IoError("cannot write " + (fs::path(a.out) / "ablation.jsonl").string());
  }
  std::cout << "seed  baseline_cer  proposed_cer  delta  baseline_clean  proposed_clean\n";
  auto on_row = [&](const AblationRow& r) {
    std::cout << std::setw(4) << r.seed << "  " << std::fixed << std::setprecision(4) << std::setw(12)
              << r.baseline.val_cer << "  " << std::setw(12) << r.proposed.val_cer << "  " << std::showpos
              << std::setw(7) << r.proposed.val_cer - r.baseline.val_cer << std::noshowpos << "  " << std::setw(14)
              << r.baseline.noiseless_cer << "  " << std::setw(14) << r.proposed.noiseless_cer << std::endl;
    std::cout.unsetf(std::ios::floatfield);
    if (jsonl) {
      nlohmann::ordered_json j;
      j["seed"] = r.seed;
      j["baseline_val_cer"] = r.baseline.val_cer;
      j["proposed_val_cer"] = r.proposed.val_cer;
      j["baseline_noiseless_cer"] = r.baseline.noiseless_cer;
      j["proposed_noiseless_cer"] = r.proposed.noiseless_cer;
      jsonl << j.dump() << "\n";
    }
  };
  const AblationReport rep = ablation_compare(lc.corpus, &clean, base, seeds, on_row);
  std::cout << "mean baseline CER " << format_double(rep.mean_baseline_cer()) << "\n"
            << "mean proposed CER " << format_double(rep.mean_proposed_cer()) << "\n"
            << "proposed <= baseline on " << rep.proposed_not_worse() << "/" << rep.rows.size() << " seeds\n";
  return 0;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
  std::vector<CheckResult> results;
  if (scope == "primitives") results = check_primitives(seed);
  else if (scope == "st") results = check_straight_through(seed);
  else if (scope == "chain") results = check_chain(seed);
  else throw UsageError("unknown scope '" + scope + "'");
  std::vector<std::string> failed;
  for (const auto& r : results) {
    std::cout << (r.passed ? "ok    " : "FAIL  ") << std::left << std::setw(36) << r.name << std::right
              << " max_rel_error " << std::scientific << std::setprecision(3) << r.max_rel_error << "  tol "
              << r.tolerance << std::defaultfloat << "\n";
    if (!r.passed) failed.push_back(r.name);
  }
  if (failed.empty()) return 0;
  std::cerr << "gradcheck failed:";
  for (const auto& f : failed) std::cerr << " " << f;
  std::cerr << "\n";
  return 1;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string ckpt;
  std::string data;
  int beam = 5;
  std::string split = "test";
};

int cmd_eval(const EvalArgs& a) {
  if (a.beam < 1) throw UsageError("--beam must be at least 1");
  if (!fs::exists(a.ckpt)) throw IoError("checkpoint not found: " + a.ckpt);
  const LoadedModel lm = load_model(load_checkpoint(a.ckpt));
  if (!fs::exists(fs::path(a.data) / "manifest.jsonl")) throw UsageError("no corpus at " + a.data);
  CorpusInfo info;
  Corpus corpus = read_corpus(a.data, &info);
  if (info.spec.mel_dim != lm.cfg.asr.input_dim)
    throw CheckpointError("checkpoint expects " + std::to_string(lm.cfg.asr.input_dim) +
                          "-dimensional features, data has " + std::to_string(info.spec.mel_dim));
  std::vector<Utterance>* utts = nullptr;
  if (a.split == "train") utts = &corpus.train;
  else if (a.split == "dev") utts = &corpus.dev;
  else if (a.split == "test") utts = &corpus.test;
  else if (a.split == "all") {
    corpus.train.insert(corpus.train.end(), corpus.dev.begin(), corpus.dev.end());
    corpus.train.insert(corpus.train.end(), corpus.test.begin(), corpus.test.end());
    utts = &corpus.train;
  } else
    throw UsageError("unknown split '" + a.split + "'");
  if (utts->empty()) throw UsageError("dataset split '" + a.split + "' is empty");
  apply_normalization(*utts, lm.stats);

  const CerReport rep = evaluate_cer(lm.model->asr(), *utts, a.beam, threads_from_env());
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "CER " << format_double(rep.cer) << " (" << rep.edits << "/" << rep.ref_chars << ", " << utts->size()
            << " utterances, beam " << a.beam << ")\n";
  for (std::size_t i = 0; i < utts->size(); ++i)
    std::cout << (*utts)[i].id << "\tref: " << (*utts)[i].text << "\thyp: " << rep.hypotheses[i] << "\n";
  return 0;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const DivergenceError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "load error: " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech-chain training with straight-through gradients"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n", gen.n, "Number of utterances (at least 3)")->required();
  gen_cmd->add_option("--seed", gen.seed, "Corpus seed");
  gen_cmd->add_option("--spec", gen.spec, "Synthesis spec file (key = value)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train one chain model per tau in the config");
  train_cmd->add_option("--config", tr.config, "Config file (key = value)")->required();
  train_cmd->add_option("--data", tr.data, "Corpus directory")->required();
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_flag("--resume", tr.resume, "Continue from the trainer state in --out");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Baseline vs proposed over several seeds");
  ablate_cmd->add_option("--config", ab.config, "Config file (key = value)")->required();
  ablate_cmd->add_option("--data", ab.data, "Corpus directory")->required();
  ablate_cmd->add_option("--seeds", ab.seeds, "Number of seeds, starting at the config seed");
  ablate_cmd->add_option("--out", ab.out, "Directory for ablation.jsonl");

  std::string scope;
  std::uint64_t check_seed = 7;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference and straight-through checks");
  gc_cmd->add_option("--scope", scope, "primitives | st | chain")
      ->required()
      ->check(CLI::IsMember({"primitives", "st", "chain"}));
  gc_cmd->add_option("--seed", check_seed, "Seed for the random inputs");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Decode a split and report CER");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Model checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "Corpus directory")->required();
  eval_cmd->add_option("--beam", ev.beam, "Beam size");
  eval_cmd->add_option("--split", ev.split, "train | dev | test | all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (*gen_cmd) return guarded([&] { return cmd_gen_data(gen); });
  if (*train_cmd) return guarded([&] { return cmd_train(tr); });
  if (*ablate_cmd) return guarded([&] { return cmd_ablate(ab); });
  if (*gc_cmd) return guarded([&] { return cmd_gradcheck(scope, check_seed); });
  if (*eval_cmd) return guarded([&] { return cmd_eval(ev); });
  return 2;
}
