#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace chainflow {

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Character ids terminated by the end-of-sequence id.
struct TokenSequence {
  std::vector<int> ids;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  int operator[](std::size_t i) const { return ids[i]; }
};

/// 32 symbols: eos, a-z, apostrophe, period, dash, space, noise.
/// In text form noise is written '*'; eos has no printable form.
class Vocabulary {
 public:
  static constexpr int kEos = 0;
  static constexpr int kSize = 32;
  static constexpr char kNoiseChar = '*';

  static const Vocabulary& standard();

  int size() const { return kSize; }
  int eos() const { return kEos; }
  bool contains(char c) const;
  int id(char c) const;
  char symbol(int id) const;

  /// Text to ids with eos appended.
  TokenSequence encode(std::string_view text) const;
  /// Ids to text; stops at the first eos.
  std::string decode(std::span<const int> ids) const;

 private:
  Vocabulary();
  std::array<char, kSize> symbols_{};
};

}  // namespace chainflow
