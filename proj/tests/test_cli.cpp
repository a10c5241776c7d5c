#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "chainflow/checkpoint.hpp"
#include "chainflow/config.hpp"

#include "json.hpp"

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / "chainflow_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run cli(const std::string& args) {
  const fs::path out = root() / "stdout.txt", err = root() / "stderr.txt";
  const std::string cmd = std::string(CHAINFLOW_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = chainflow::read_text_file(out);
  r.err = chainflow::read_text_file(err);
  return r;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> rows;
  std::ifstream is(p);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  return rows;
}

// A small corpus and a small model keep each CLI run to a second or two.
const fs::path& corpus_dir() {
  static const fs::path dir = [] {
    const fs::path d = root() / "data";
    write_file(root() / "synth.cfg", "mel_dim = 4\nlin_dim = 6\nalphabet = abc\nmin_len = 2\nmax_len = 3\n");
    const Run r = cli("gen-data --out " + d.string() + " --n 10 --seed 3 --spec " + (root() / "synth.cfg").string());
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

// Keys in `overrides` replace the defaults; config files reject repeated keys.
std::string small_config(const std::string& overrides = "") {
  const std::string base =
      "st_mode = gumbel\nepochs = 2\nbatch_size = 2\nbeam = 2\nasr_enc_hidden = 8\nasr_dec_hidden = 8\n"
      "asr_embed = 8\nasr_att_dim = 8\ntts_embed = 8\ntts_enc_hidden = 8\ntts_prenet = 8\n"
      "tts_dec_hidden = 8\ntts_att_dim = 8\ntts_speaker_dim = 4\ntts_post_hidden = 8\n";
  std::string out;
  std::istringstream is(base);
  std::string line;
  while (std::getline(is, line)) {
    const std::string key = line.substr(0, line.find(' '));
    if (overrides.find(key + " =") == std::string::npos) out += line + "\n";
  }
  return out + overrides;
}

fs::path config_file(const std::string& name, const std::string& text) {
  const fs::path p = root() / name;
  write_file(p, text);
  return p;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(cli("").code == 2);
  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("train --data x").code == 2);
  CHECK(cli("gen-data --out " + (root() / "tiny").string() + " --n 2").code == 2);
  CHECK(cli("gradcheck --scope everything").code == 2);
  CHECK(cli("train --config " + (root() / "absent.cfg").string() + " --data x --out y").code == 2);
}

TEST_CASE("gen-data writes a deterministic corpus") {
  const fs::path a = root() / "gen_a", b = root() / "gen_b";
  REQUIRE(cli("gen-data --out " + a.string() + " --n 10 --seed 4").code == 0);
  REQUIRE(cli("gen-data --out " + b.string() + " --n 10 --seed 4").code == 0);
  CHECK(chainflow::read_text_file(a / "manifest.jsonl") == chainflow::read_text_file(b / "manifest.jsonl"));
  const auto rows = read_jsonl(a / "manifest.jsonl");
  CHECK(rows.size() == 10);
  int train = 0;
  for (const auto& r : rows) train += r.at("split") == "train";
  CHECK(train == 8);
}

TEST_CASE("train writes metrics, checkpoints and a manifest") {
  const fs::path out = root() / "run";
  const Run r = cli("train --config " + config_file("run.cfg", small_config()).string() + " --data " +
                    corpus_dir().string() + " --out " + out.string());
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto rows = read_jsonl(out / "metrics.jsonl");
  REQUIRE(rows.size() == 2);
  for (const char* key : {"epoch", "l_asr", "l_rec", "l_total", "val_cer", "grad_norm_asr_from_rec", "seed",
                          "st_mode", "gen_mode", "tau"})
    CHECK(rows[0].contains(key));
  CHECK(rows[1].at("epoch") == 2);
  CHECK(rows[0].at("grad_norm_asr_from_rec").get<double>() > 0.0);
  for (const char* f : {"best.ckpt", "last.ckpt", "state.ckpt", "manifest.json"}) CHECK(fs::exists(out / f));
  const auto manifest = nlohmann::json::parse(chainflow::read_text_file(out / "manifest.json"));
  CHECK(manifest.at("status") == "completed");
  CHECK(manifest.at("epochs_completed") == 2);
  CHECK(manifest.at("corpus_hash").get<std::string>().size() == 16);
}

TEST_CASE("without straight-through the reported rec gradient is exactly zero") {
  const fs::path out = root() / "run_none";
  const Run r = cli("train --config " + config_file("none.cfg", small_config("st_mode = none\n")).string() +
                    " --data " + corpus_dir().string() + " --out " + out.string());
  REQUIRE(r.code == 0);
  for (const auto& row : read_jsonl(out / "metrics.jsonl")) CHECK(row.at("grad_norm_asr_from_rec") == 0.0);
}

TEST_CASE("resume continues the metrics stream of an interrupted run") {
  const fs::path full = root() / "full", part = root() / "part";
  const fs::path cfg4 = config_file("four.cfg", small_config("epochs = 4\n"));
  REQUIRE(cli("train --config " + cfg4.string() + " --data " + corpus_dir().string() + " --out " + full.string())
              .code == 0);
  REQUIRE(cli("train --config " + config_file("two.cfg", small_config("epochs = 2\n")).string() + " --data " +
              corpus_dir().string() + " --out " + part.string())
              .code == 0);
  const Run r =
      cli("train --config " + cfg4.string() + " --data " + corpus_dir().string() + " --out " + part.string() + " --resume");
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(chainflow::read_text_file(part / "metrics.jsonl") == chainflow::read_text_file(full / "metrics.jsonl"));

  const Run changed = cli("train --config " + config_file("lr.cfg", small_config("epochs = 4\nlr = 0.01\n")).string() +
                          " --data " + corpus_dir().string() + " --out " + part.string() + " --resume");
  CHECK(changed.code == 2);
  CHECK(cli("train --config " + cfg4.string() + " --data " + corpus_dir().string() + " --out " +
            (root() / "never").string() + " --resume")
            .code == 2);
}

TEST_CASE("a tau grid trains one run per value") {
  const fs::path out = root() / "grid";
  const Run r = cli("train --config " + config_file("grid.cfg", small_config("epochs = 1\ntau = 0.5, 1, 2, 4\n")).string() +
                    " --data " + corpus_dir().string() + " --out " + out.string());
  REQUIRE(r.code == 0);
  int manifests = 0;
  for (const char* t : {"tau_0.5", "tau_1", "tau_2", "tau_4"}) {
    INFO(t);
    CHECK(fs::exists(out / t / "manifest.json"));
    if (fs::exists(out / t / "manifest.json")) ++manifests;
  }
  CHECK(manifests == 4);
  const auto m = nlohmann::json::parse(chainflow::read_text_file(out / "tau_2" / "manifest.json"));
  CHECK(m.at("tau") == 2.0);
}

TEST_CASE("an unknown config key exits 2 and names the line") {
  const Run r = cli("train --config " + config_file("bad.cfg", "st_mode = gumbel\n\nwarmup = 10\n").string() +
                    " --data " + corpus_dir().string() + " --out " + (root() / "bad").string());
  CHECK(r.code == 2);
  CHECK(r.err.find(":3:") != std::string::npos);
  CHECK(r.err.find("warmup") != std::string::npos);
}

TEST_CASE("gradcheck scopes exit 0 when the checks pass") {
  for (const char* scope : {"primitives", "st", "chain"}) {
    const Run r = cli(std::string("gradcheck --scope ") + scope);
    INFO(scope << "\n" << r.out);
    CHECK(r.code == 0);
    CHECK(r.out.find("FAIL") == std::string::npos);
  }
}

TEST_CASE("eval decodes a split with beam 5 by default") {
  const fs::path out = root() / "run_eval";
  REQUIRE(cli("train --config " + config_file("eval.cfg", small_config("epochs = 1\n")).string() + " --data " +
              corpus_dir().string() + " --out " + out.string())
              .code == 0);
  const Run r = cli("eval --ckpt " + (out / "best.ckpt").string() + " --data " + corpus_dir().string());
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("CER ") == 0);
  CHECK(r.out.find("beam 5") != std::string::npos);
  CHECK(r.out.find("1 utterances") != std::string::npos);
  CHECK(cli("eval --ckpt " + (out / "best.ckpt").string() + " --data " + corpus_dir().string() + " --split all")
            .out.find("10 utterances") != std::string::npos);
  CHECK(cli("eval --ckpt " + (out / "best.ckpt").string() + " --data " + corpus_dir().string() + " --split nope").code ==
        2);
  CHECK(cli("eval --ckpt " + (root() / "absent.ckpt").string() + " --data " + corpus_dir().string()).code == 4);
}

TEST_CASE("eval rejects data with a different feature width") {
  const fs::path out = root() / "run_eval";
  REQUIRE(fs::exists(out / "best.ckpt"));
  const fs::path wide = root() / "wide";
  REQUIRE(cli("gen-data --out " + wide.string() + " --n 5").code == 0);
  const Run r = cli("eval --ckpt " + (out / "best.ckpt").string() + " --data " + wide.string());
  CHECK(r.code == 4);
  CHECK(r.err.find("expects 4-dimensional features, data has 8") != std::string::npos);
}

TEST_CASE("a missing corpus is a usage error") {
  const Run r = cli("train --config " + config_file("plain.cfg", small_config()).string() + " --data " +
                    (root() / "nowhere").string() + " --out " + (root() / "o").string());
  CHECK(r.code == 2);
}

TEST_CASE("non-finite features abort training with exit 3") {
  const fs::path bad = root() / "nan_data";
  fs::remove_all(bad);
  fs::copy(corpus_dir(), bad, fs::copy_options::recursive);
  const auto rows = read_jsonl(bad / "manifest.jsonl");
  const fs::path mel_path = bad / rows.front().at("mel_path").get<std::string>();
  chainflow::ArrayBundle mel = chainflow::load_checkpoint(mel_path);
  chainflow::Matrix m = mel.matrix("mel");
  m(0, 0) = std::nan("");
  mel.put("mel", m);
  chainflow::save_checkpoint(mel_path, mel);

  const fs::path out = root() / "run_nan";
  const Run r = cli("train --config " + config_file("nan.cfg", small_config()).string() + " --data " + bad.string() +
                    " --out " + out.string());
  CHECK(r.code == 3);
  CHECK(fs::exists(out / "divergence.json"));
}
