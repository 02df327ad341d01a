#include "webrec/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "webrec/error.hpp"

namespace webrec {

namespace {

bool word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace

std::vector<std::string> Vocab::split(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (word_byte(c)) {
      cur += static_cast<char>(std::tolower(c));
      continue;
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
    if (!std::isspace(c)) out.emplace_back(1, static_cast<char>(c));
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocab Vocab::from_words(const std::vector<std::string>& words) {
  Vocab v;
  v.words_ = {"<pad>", "<unk>", "<bos>", "<eos>"};
  for (const auto& w : words) {
    if (std::find(v.words_.begin(), v.words_.end(), w) != v.words_.end()) {
      throw ConfigError("vocab: duplicate word '" + w + "'");
    }
    v.words_.push_back(w);
  }
  v.index();
  return v;
}

Vocab Vocab::build(const std::vector<std::string>& corpus, std::size_t cap) {
  if (cap < 4) throw ConfigError("vocab: cap must leave room for the 4 special tokens");
  std::map<std::string, std::size_t> freq;
  for (const auto& text : corpus)
    for (auto& w : split(text)) ++freq[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> keep;
  for (const auto& [w, n] : ranked) {
    if (keep.size() + 4 >= cap) break;
    if (w == "<pad>" || w == "<unk>" || w == "<bos>" || w == "<eos>") continue;
    keep.push_back(w);
  }
  return from_words(keep);
}

void Vocab::index() {
  ids_.clear();
  for (std::size_t i = 0; i < words_.size(); ++i) ids_.emplace(words_[i], static_cast<TokenId>(i));
}

std::vector<TokenId> Vocab::encode(const std::string& text) const {
  std::vector<TokenId> out;
  for (const auto& w : split(text)) {
    const auto it = ids_.find(w);
    out.push_back(it == ids_.end() ? kUnk : it->second);
  }
  return out;
}

const std::string& Vocab::word(TokenId id) const {
  if (id >= words_.size()) throw ShapeError("vocab: id " + std::to_string(id) + " out of range");
  return words_[id];
}

std::string Vocab::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

}  // namespace webrec
