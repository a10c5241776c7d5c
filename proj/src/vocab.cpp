#include "chainflow/vocab.hpp"

namespace chainflow {

Vocabulary::Vocabulary() {
  symbols_[kEos] = '\0';
  for (int i = 0; i < 26; ++i) symbols_[1 + i] = static_cast<char>('a' + i);
  symbols_[27] = '\'';
  symbols_[28] = '.';
  symbols_[29] = '-';
  symbols_[30] = ' ';
  symbols_[31] = kNoiseChar;
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v;
  return v;
}

bool Vocabulary::contains(char c) const {
  if (c == '\0') return false;
  for (char s : symbols_)
    if (s == c) return true;
  return false;
}

int Vocabulary::id(char c) const {
  if (c != '\0')
    for (int i = 0; i < kSize; ++i)
      if (symbols_[i] == c) return i;
  throw VocabularyError(std::string("symbol '") + c + "' is not in the vocabulary");
}

char Vocabulary::symbol(int id) const {
  if (id < 0 || id >= kSize || id == kEos) throw VocabularyError("id " + std::to_string(id) + " has no symbol");
  return symbols_[id];
}

TokenSequence Vocabulary::encode(std::string_view text) const {
  TokenSequence t;
  t.ids.reserve(text.size() + 1);
  for (char c : text) t.ids.push_back(id(c));
  t.ids.push_back(kEos);
  return t;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string s;
  for (int i : ids) {
    if (i == kEos) break;
    s.push_back(symbol(i));
  }
  return s;
}

}  // namespace chainflow
