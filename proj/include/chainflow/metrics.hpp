#pragma once

#include "chainflow/asr.hpp"
#include "chainflow/data.hpp"

#include <span>
#include <string>
#include <vector>

namespace chainflow {

/// Levenshtein distance with unit substitution, insertion and deletion costs.
std::size_t edit_distance(std::span<const int> ref, std::span<const int> hyp);
std::size_t edit_distance(const std::string& ref, const std::string& hyp);

struct CerReport {
  double cer = 0.0;  // total edits / total reference length
  std::size_t edits = 0;
  std::size_t ref_chars = 0;
  std::vector<std::string> hypotheses;  // per input utterance
  std::vector<std::string> warnings;
};

/// Micro-averaged CER; empty references are skipped with a warning.
CerReport character_error_rate(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);

/// Decodes each utterance (beam k, or greedy when k == 0) and scores it.
CerReport evaluate_cer(const AsrModel& asr, const std::vector<Utterance>& utts, int beam, int threads = 1);

}  // namespace chainflow
