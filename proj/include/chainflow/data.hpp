#pragma once

// Synthetic paired (text, feature) corpus with a known token -> frame mapping.

#include "chainflow/rng.hpp"
#include "chainflow/tensor.hpp"
#include "chainflow/vocab.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace chainflow {

inline constexpr Index kReductionFactor = 4;

/// Time-major features. `mel` is the coarse stream, `lin` the fine stream.
struct FeatureSequence {
  Matrix mel;               // S x D_M
  Matrix lin;               // S x D_R
  std::vector<double> stop; // S, 1 on the final frame

  Index frames() const { return mel.rows(); }
};

struct SynthSpec {
  Index mel_dim = 8;
  Index lin_dim = 20;
  Index frames_per_token = 4;
  double sigma = 0.1;
  std::uint64_t seed = 1234;  // prototype seed
  std::string alphabet = "abcdefghijkl";
  int min_len = 4;  // characters per utterance, spaces included
  int max_len = 8;
};

class Synthesizer {
 public:
  explicit Synthesizer(SynthSpec spec);

  const SynthSpec& spec() const { return spec_; }
  /// Vocabulary-size x D_M; row eos is unused.
  const Matrix& prototypes() const { return prototypes_; }
  /// D_M x D_R smoothing expansion applied to mel frames.
  const Matrix& expansion() const { return expansion_; }

  FeatureSequence synth_utterance(const TokenSequence& text, Rng& rng) const;
  /// Random pseudo-word text over the alphabet, single spaces between words.
  std::string random_text(Rng& rng) const;

 private:
  SynthSpec spec_;
  Matrix prototypes_;
  Matrix expansion_;
};

struct Utterance {
  std::string id;
  std::string text;
  TokenSequence tokens;
  FeatureSequence feats;
};

struct Corpus {
  std::vector<Utterance> train;
  std::vector<Utterance> dev;
  std::vector<Utterance> test;

  std::size_t size() const { return train.size() + dev.size() + test.size(); }
};

struct SplitSizes {
  std::size_t train = 0, dev = 0, test = 0;
};

/// 80/10/10 by utterance with at least one utterance in dev and test.
SplitSizes split_sizes(std::size_t n);

/// Deterministic in (n, spec, seed). Text and noise come from separate streams
/// per utterance, so the same seed with sigma = 0 yields the noiseless twin.
Corpus gen_corpus(std::size_t n, const SynthSpec& spec, std::uint64_t seed);

struct NormStats {
  Matrix mel_mean, mel_std;  // 1 x D_M
  Matrix lin_mean, lin_std;  // 1 x D_R
  std::vector<std::string> warnings;
};

/// Per-dimension population mean and standard deviation over the given
/// utterances. Zero-variance dimensions get divisor 1 and a warning.
NormStats fit_normalization(const std::vector<Utterance>& utts);
void apply_normalization(std::vector<Utterance>& utts, const NormStats& stats);
void invert_normalization(std::vector<Utterance>& utts, const NormStats& stats);
/// Fits on train and applies to every split.
NormStats normalize_corpus(Corpus& corpus);

// On-disk corpus: manifest.jsonl + feats/*.ckpt + synth.cfg.
struct CorpusInfo {
  SynthSpec spec;
  std::uint64_t seed = 0;
  std::size_t n = 0;
};

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, const CorpusInfo& info);
Corpus read_corpus(const std::filesystem::path& dir, CorpusInfo* info = nullptr);

std::string synth_spec_to_text(const SynthSpec& spec);
/// Inverse of synth_spec_to_text; unset keys keep their defaults.
SynthSpec parse_synth_spec(std::string_view text, const std::string& source);

}  // namespace chainflow
