#pragma once

// Word-level toy vocabulary built from a corpus by frequency. Text is
// lower-cased and split into runs of letters/digits and single punctuation
// characters; bytes >= 0x80 stay inside words so UTF-8 text survives.

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "webrec/model.hpp"

namespace webrec {

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kEos = 3;

  /// The `cap - 4` most frequent words (ties alphabetical) after the four
  /// specials. cap must be >= 4.
  static Vocab build(const std::vector<std::string>& corpus, std::size_t cap);
  /// Exactly these words after the specials, in order.
  static Vocab from_words(const std::vector<std::string>& words);

  static std::vector<std::string> split(const std::string& text);

  std::vector<TokenId> encode(const std::string& text) const;
  /// Surface form of one id; specials render as <pad>, <unk>, <bos>, <eos>.
  const std::string& word(TokenId id) const;
  /// Like word(), but ids past the end read as <unk>; models may have more
  /// output rows than the vocabulary has words.
  const std::string& surface(TokenId id) const { return id < words_.size() ? words_[id] : words_[kUnk]; }
  std::string decode(const std::vector<TokenId>& ids) const;

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  void index();
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace webrec
