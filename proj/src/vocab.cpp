#include "thermalign/vocab.hpp"

#include <cctype>

namespace thermalign {
namespace {

bool is_word_char(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) != 0;
}

}  // namespace

Vocabulary Vocabulary::default_vocab() {
  std::vector<std::string> t = {
      // specials
      "<bos>", "<eos>", "<pad>", "<image>",
      // whitespace
      " ", "\n",
      // digits
      "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
      // punctuation
      ";", ".", ":", "(", ")", ",",
      // species, both surface forms
      "deer", "rhino", "elephant", "Deer", "Rhino", "Elephant",
      // prompt words
      "Identify", "the", "species", "and", "count", "Return", "ONLY", "in",
      "format", "Species", "Count", "example", "Allowed",
      // caption filler
      "a", "an", "A", "The", "image", "photo", "of", "on", "with", "near",
      "grass", "river", "tree", "forest", "field", "herd", "group", "animals",
      "walking", "standing", "drone", "aerial", "scene"};
  return Vocabulary(std::move(t), 0, 1, 2, 3);
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, int bos, int eos, int pad, int img)
    : tokens_(std::move(tokens)), bos_(bos), eos_(eos), pad_(pad), img_(img) {
  for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
    if (tokens_[i].empty()) throw Error("vocabulary token " + std::to_string(i) + " is empty");
    if (!index_.emplace(tokens_[i], i).second)
      throw Error("duplicate vocabulary token: " + tokens_[i]);
  }
  for (int special : {bos_, eos_, pad_, img_})
    if (special < 0 || special >= size())
      throw Error("special token id out of range");
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    throw Error("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? -1 : it->second;
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::vector<int> ids;
  std::size_t i = 0;
  const std::string& img_tok = tokens_[static_cast<std::size_t>(img_)];
  while (i < text.size()) {
    // The image marker is the one multi-char symbol that can appear in text.
    if (text.compare(i, img_tok.size(), img_tok) == 0) {
      ids.push_back(img_);
      i += img_tok.size();
      continue;
    }
    const char c = text[i];
    if (is_word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_char(text[j])) ++j;
      const std::string word(text.substr(i, j - i));
      const int id = this->id(word);
      if (id < 0) throw UnknownToken("unknown word: \"" + word + "\"");
      ids.push_back(id);
      i = j;
      continue;
    }
    const int id = this->id(std::string_view(&text[i], 1));
    if (id < 0)
      throw UnknownToken("unknown character: \"" + std::string(1, c) + "\"");
    ids.push_back(id);
    ++i;
  }
  return ids;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids, bool skip_special) const {
  std::string out;
  for (int id : ids) {
    if (skip_special && (id == bos_ || id == eos_ || id == pad_)) continue;
    out += token(id);
  }
  return out;
}

}  // namespace thermalign
