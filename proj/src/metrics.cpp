#include "chainflow/metrics.hpp"

#include "chainflow/parallel.hpp"

#include <algorithm>
#include <numeric>

namespace chainflow {

std::size_t edit_distance(std::span<const int> ref, std::span<const int> hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

std::size_t edit_distance(const std::string& ref, const std::string& hyp) {
  std::vector<int> a(ref.begin(), ref.end()), b(hyp.begin(), hyp.end());
  return edit_distance(std::span<const int>(a), std::span<const int>(b));
}

CerReport character_error_rate(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
  if (refs.size() != hyps.size()) throw std::invalid_argument("character_error_rate: reference/hypothesis count mismatch");
  CerReport r;
  r.hypotheses = hyps;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].empty()) {
      r.warnings.push_back("utterance " + std::to_string(i) + " has an empty reference; skipped");
      continue;
    }
    r.edits += edit_distance(refs[i], hyps[i]);
    r.ref_chars += refs[i].size();
  }
  r.cer = r.ref_chars == 0 ? 0.0 : static_cast<double>(r.edits) / static_cast<double>(r.ref_chars);
  return r;
}

CerReport evaluate_cer(const AsrModel& asr, const std::vector<Utterance>& utts, int beam, int threads) {
  const auto& vocab = Vocabulary::standard();
  std::vector<std::string> refs(utts.size()), hyps(utts.size());
  parallel_for(utts.size(), threads, [&](std::size_t i) {
    const std::vector<int> ids = beam > 0 ? asr.beam_search(utts[i].feats.mel, beam).tokens
                                          : asr.greedy_decode(utts[i].feats.mel);
    refs[i] = utts[i].text;
    hyps[i] = vocab.decode(ids);
  });
  return character_error_rate(refs, hyps);
}

}  // namespace chainflow
