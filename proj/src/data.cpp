#include "chainflow/data.hpp"

#include "chainflow/checkpoint.hpp"
#include "chainflow/config.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace chainflow {

namespace {

constexpr int kMaxPrototypeDraws = 64;

Matrix make_expansion(Index mel_dim, Index lin_dim) {
  // Row-normalized Gaussian interpolation from mel bins onto lin bins.
  Matrix k(mel_dim, lin_dim);
  for (Index j = 0; j < lin_dim; ++j) {
    const double pos = lin_dim == 1 ? 0.0 : static_cast<double>(j) * (mel_dim - 1) / (lin_dim - 1);
    double total = 0.0;
    for (Index i = 0; i < mel_dim; ++i) {
      const double d = pos - static_cast<double>(i);
      k(i, j) = std::exp(-0.5 * d * d);
      total += k(i, j);
    }
    k.col(j) /= total;
  }
  return k;
}

double min_pairwise_distance(const Matrix& protos, const std::vector<int>& ids) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < ids.size(); ++a)
    for (std::size_t b = a + 1; b < ids.size(); ++b)
      best = std::min(best, (protos.row(ids[a]) - protos.row(ids[b])).norm());
  return best;
}

}  // namespace

Synthesizer::Synthesizer(SynthSpec spec) : spec_(std::move(spec)) {
  if (spec_.frames_per_token < 1) throw std::invalid_argument("frames_per_token must be at least 1");
  if (spec_.mel_dim < 1 || spec_.lin_dim < 1) throw std::invalid_argument("feature dimensions must be positive");
  if (spec_.sigma < 0.0) throw std::invalid_argument("sigma must be nonnegative");
  if (spec_.alphabet.empty()) throw std::invalid_argument("alphabet must not be empty");
  if (spec_.min_len < 1 || spec_.max_len < spec_.min_len) throw std::invalid_argument("invalid length range");
  const auto& vocab = Vocabulary::standard();
  std::vector<int> used;
  for (char c : spec_.alphabet) {
    if (c == ' ') throw std::invalid_argument("alphabet must not contain space");
    used.push_back(vocab.id(c));
  }
  used.push_back(vocab.id(' '));

  for (int draw = 0;; ++draw) {
    if (draw == kMaxPrototypeDraws)
      throw std::invalid_argument("could not draw prototypes separated by more than 4 sigma");
    Rng rng = Rng::derive(spec_.seed, {0x70726f746fULL, static_cast<std::uint64_t>(draw)});
    prototypes_ = Matrix::Zero(vocab.size(), spec_.mel_dim);
    for (Index r = 1; r < vocab.size(); ++r)
      for (Index c = 0; c < spec_.mel_dim; ++c) prototypes_(r, c) = rng.normal();
    if (min_pairwise_distance(prototypes_, used) > 4.0 * spec_.sigma) break;
  }
  expansion_ = make_expansion(spec_.mel_dim, spec_.lin_dim);
}

FeatureSequence Synthesizer::synth_utterance(const TokenSequence& text, Rng& rng) const {
  const auto& vocab = Vocabulary::standard();
  std::vector<int> chars;
  for (int id : text.ids) {
    if (id < 0 || id >= vocab.size()) throw VocabularyError("token id " + std::to_string(id) + " is not in the vocabulary");
    if (id == vocab.eos()) break;
    chars.push_back(id);
  }
  if (chars.empty()) throw std::invalid_argument("synth_utterance: empty text");
  const Index f = spec_.frames_per_token;
  const Index real = static_cast<Index>(chars.size()) * f;
  const Index total = (real + kReductionFactor - 1) / kReductionFactor * kReductionFactor;
  FeatureSequence fs;
  fs.mel.resize(total, spec_.mel_dim);
  Index s = 0;
  for (int id : chars) {
    for (Index k = 0; k < f; ++k, ++s) {
      fs.mel.row(s) = prototypes_.row(id);
      if (spec_.sigma > 0.0)
        for (Index c = 0; c < spec_.mel_dim; ++c) fs.mel(s, c) += spec_.sigma * rng.normal();
    }
  }
  for (; s < total; ++s) fs.mel.row(s) = fs.mel.row(real - 1);
  fs.lin = fs.mel * expansion_;
  fs.stop.assign(static_cast<std::size_t>(total), 0.0);
  fs.stop.back() = 1.0;
  return fs;
}

std::string Synthesizer::random_text(Rng& rng) const {
  const int len = rng.uniform_int(spec_.min_len, spec_.max_len);
  const int last = static_cast<int>(spec_.alphabet.size()) - 1;
  std::string s;
  for (int i = 0; i < len; ++i) {
    const bool edge = i == 0 || i == len - 1 || s.back() == ' ';
    // roughly one space per five characters
    if (!edge && rng.uniform(0.0, 1.0) < 0.2)
      s.push_back(' ');
    else
      s.push_back(spec_.alphabet[static_cast<std::size_t>(rng.uniform_int(0, last))]);
  }
  return s;
}

SplitSizes split_sizes(std::size_t n) {
  if (n < 3) throw std::invalid_argument("corpus needs at least 3 utterances, got " + std::to_string(n));
  SplitSizes s;
  s.dev = std::max<std::size_t>(1, n / 10);
  s.test = std::max<std::size_t>(1, n / 10);
  s.train = n - s.dev - s.test;
  return s;
}

Corpus gen_corpus(std::size_t n, const SynthSpec& spec, std::uint64_t seed) {
  const SplitSizes sizes = split_sizes(n);
  const Synthesizer synth(spec);
  const auto& vocab = Vocabulary::standard();
  Corpus corpus;
  for (std::size_t i = 0; i < n; ++i) {
    Rng text_rng = Rng::derive(seed, {i, 0});
    Rng noise_rng = Rng::derive(seed, {i, 1});
    Utterance u;
    std::ostringstream id;
    id << "utt" << std::setw(5) << std::setfill('0') << i;
    u.id = id.str();
    u.text = synth.random_text(text_rng);
    u.tokens = vocab.encode(u.text);
    u.feats = synth.synth_utterance(u.tokens, noise_rng);
    if (i < sizes.train)
      corpus.train.push_back(std::move(u));
    else if (i < sizes.train + sizes.dev)
      corpus.dev.push_back(std::move(u));
    else
      corpus.test.push_back(std::move(u));
  }
  return corpus;
}

NormStats fit_normalization(const std::vector<Utterance>& utts) {
  if (utts.empty()) throw std::invalid_argument("fit_normalization: no utterances");
  NormStats st;
  auto fit = [&](auto pick, Matrix& mean, Matrix& stddev, const char* stream) {
    const Index dims = pick(utts.front()).cols();
    Index count = 0;
    mean = Matrix::Zero(1, dims);
    for (const auto& u : utts) {
      mean += pick(u).colwise().sum();
      count += pick(u).rows();
    }
    if (count < 2) throw std::invalid_argument("fit_normalization: need at least 2 frames");
    mean /= static_cast<double>(count);
    Matrix var = Matrix::Zero(1, dims);
    for (const auto& u : utts) var += (pick(u).rowwise() - mean.row(0)).array().square().matrix().colwise().sum();
    var /= static_cast<double>(count);
    stddev = var.array().sqrt().matrix();
    for (Index d = 0; d < dims; ++d) {
      if (stddev(0, d) < 1e-12) {
        stddev(0, d) = 1.0;
        st.warnings.push_back(std::string(stream) + " dimension " + std::to_string(d) +
                              " has zero variance; left unscaled");
      }
    }
  };
  fit([](const Utterance& u) -> const Matrix& { return u.feats.mel; }, st.mel_mean, st.mel_std, "mel");
  fit([](const Utterance& u) -> const Matrix& { return u.feats.lin; }, st.lin_mean, st.lin_std, "lin");
  return st;
}

void apply_normalization(std::vector<Utterance>& utts, const NormStats& stats) {
  for (auto& u : utts) {
    u.feats.mel = ((u.feats.mel.rowwise() - stats.mel_mean.row(0)).array().rowwise() / stats.mel_std.row(0).array())
                      .matrix();
    u.feats.lin = ((u.feats.lin.rowwise() - stats.lin_mean.row(0)).array().rowwise() / stats.lin_std.row(0).array())
                      .matrix();
  }
}

void invert_normalization(std::vector<Utterance>& utts, const NormStats& stats) {
  for (auto& u : utts) {
    u.feats.mel = (u.feats.mel.array().rowwise() * stats.mel_std.row(0).array()).matrix().rowwise() +
                  stats.mel_mean.row(0);
    u.feats.lin = (u.feats.lin.array().rowwise() * stats.lin_std.row(0).array()).matrix().rowwise() +
                  stats.lin_mean.row(0);
  }
}

NormStats normalize_corpus(Corpus& corpus) {
  NormStats st = fit_normalization(corpus.train);
  apply_normalization(corpus.train, st);
  apply_normalization(corpus.dev, st);
  apply_normalization(corpus.test, st);
  return st;
}

std::string synth_spec_to_text(const SynthSpec& spec) {
  std::ostringstream os;
  os << "mel_dim = " << spec.mel_dim << "\n"
     << "lin_dim = " << spec.lin_dim << "\n"
     << "frames_per_token = " << spec.frames_per_token << "\n"
     << "sigma = " << format_double(spec.sigma) << "\n"
     << "proto_seed = " << spec.seed << "\n"
     << "alphabet = " << spec.alphabet << "\n"
     << "min_len = " << spec.min_len << "\n"
     << "max_len = " << spec.max_len << "\n";
  return os.str();
}

namespace {

constexpr const char* kSynthFile = "synth.cfg";
constexpr const char* kManifestFile = "manifest.jsonl";

void write_info(const std::filesystem::path& path, const CorpusInfo& info) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << synth_spec_to_text(info.spec) << "seed = " << info.seed << "\n"
     << "n = " << info.n << "\n";
}

bool apply_spec_key(SynthSpec& spec, const KeyValue& kv, const std::string& src) {
  if (kv.key == "mel_dim") spec.mel_dim = kv_int(kv, src);
  else if (kv.key == "lin_dim") spec.lin_dim = kv_int(kv, src);
  else if (kv.key == "frames_per_token") spec.frames_per_token = kv_int(kv, src);
  else if (kv.key == "sigma") spec.sigma = kv_double(kv, src);
  else if (kv.key == "proto_seed") spec.seed = kv_u64(kv, src);
  else if (kv.key == "alphabet") spec.alphabet = kv.value;
  else if (kv.key == "min_len") spec.min_len = static_cast<int>(kv_int(kv, src));
  else if (kv.key == "max_len") spec.max_len = static_cast<int>(kv_int(kv, src));
  else return false;
  return true;
}

CorpusInfo read_info(const std::filesystem::path& path) {
  const std::string src = path.string();
  CorpusInfo info;
  for (const auto& kv : parse_key_values(read_text_file(path), src)) {
    if (apply_spec_key(info.spec, kv, src)) continue;
    if (kv.key == "seed") info.seed = kv_u64(kv, src);
    else if (kv.key == "n") info.n = kv_u64(kv, src);
    else throw ParseError(src, kv.line, "unknown key '" + kv.key + "'");
  }
  return info;
}

}  // namespace

SynthSpec parse_synth_spec(std::string_view text, const std::string& source) {
  SynthSpec spec;
  for (const auto& kv : parse_key_values(text, source))
    if (!apply_spec_key(spec, kv, source)) throw ParseError(source, kv.line, "unknown key '" + kv.key + "'");
  return spec;
}

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, const CorpusInfo& info) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "feats");
  write_info(dir / kSynthFile, info);
  std::ofstream manifest(dir / kManifestFile);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / kManifestFile).string());
  auto emit = [&](const std::vector<Utterance>& utts, const char* split) {
    for (const auto& u : utts) {
      const std::string mel_rel = "feats/" + u.id + ".mel.ckpt";
      const std::string lin_rel = "feats/" + u.id + ".lin.ckpt";
      ArrayBundle mel;
      mel.put("mel", u.feats.mel);
      mel.put("stop", Eigen::Map<const Matrix>(u.feats.stop.data(), 1, static_cast<Index>(u.feats.stop.size())), 1);
      save_checkpoint(dir / mel_rel, mel);
      ArrayBundle lin;
      lin.put("lin", u.feats.lin);
      save_checkpoint(dir / lin_rel, lin);
      nlohmann::ordered_json rec;
      rec["id"] = u.id;
      rec["split"] = split;
      rec["text"] = u.text;
      rec["mel_path"] = mel_rel;
      rec["lin_path"] = lin_rel;
      rec["n_frames"] = u.feats.frames();
      manifest << rec.dump() << "\n";
    }
  };
  emit(corpus.train, "train");
  emit(corpus.dev, "dev");
  emit(corpus.test, "test");
  if (!manifest) throw std::runtime_error("write failed for manifest");
}

Corpus read_corpus(const std::filesystem::path& dir, CorpusInfo* info) {
  if (info) *info = read_info(dir / kSynthFile);
  std::ifstream is(dir / kManifestFile);
  if (!is) throw std::runtime_error("cannot read " + (dir / kManifestFile).string());
  const auto& vocab = Vocabulary::standard();
  Corpus corpus;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError((dir / kManifestFile).string(), line_no, e.what());
    }
    Utterance u;
    u.id = rec.at("id").get<std::string>();
    u.text = rec.at("text").get<std::string>();
    u.tokens = vocab.encode(u.text);
    const ArrayBundle mel = load_checkpoint(dir / rec.at("mel_path").get<std::string>());
    const ArrayBundle lin = load_checkpoint(dir / rec.at("lin_path").get<std::string>());
    u.feats.mel = mel.matrix("mel");
    u.feats.lin = lin.matrix("lin");
    const auto& stop = mel.get("stop").data;
    u.feats.stop.assign(stop.begin(), stop.end());
    if (u.feats.frames() != rec.at("n_frames").get<Index>())
      throw ParseError((dir / kManifestFile).string(), line_no, "frame count does not match features");
    const std::string split = rec.at("split").get<std::string>();
    if (split == "train") corpus.train.push_back(std::move(u));
    else if (split == "dev") corpus.dev.push_back(std::move(u));
    else if (split == "test") corpus.test.push_back(std::move(u));
    else throw ParseError((dir / kManifestFile).string(), line_no, "unknown split '" + split + "'");
  }
  return corpus;
}

}  // namespace chainflow
