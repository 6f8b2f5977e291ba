#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "thermalign/common.hpp"

namespace thermalign {

struct UnknownToken : Error {
  using Error::Error;
};

// Closed word/symbol-level vocabulary. Tokens are whole words, single digits,
// single punctuation marks, single whitespace characters, or one of the
// special markers. Detokenization is plain concatenation, which makes
// detokenize(tokenize(x)) == x for any in-vocabulary text.
class Vocabulary {
 public:
  // The stock 64-token vocabulary used by the toy model: 4 specials, space and
  // newline, 10 digits, 6 punctuation marks, the species words in both cases,
  // the prompt words, and a handful of caption filler words.
  static Vocabulary default_vocab();

  Vocabulary(std::vector<std::string> tokens, int bos, int eos, int pad, int img);

  int size() const { return static_cast<int>(tokens_.size()); }
  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int pad() const { return pad_; }
  int img() const { return img_; }

  const std::string& token(int id) const;
  // -1 when absent.
  int id(std::string_view token) const;

  // Throws UnknownToken naming the offending fragment.
  std::vector<int> tokenize(std::string_view text) const;

  // skip_special drops <bos>/<eos>/<pad>; the <image> marker always renders,
  // since it is part of conversation text.
  std::string detokenize(const std::vector<int>& ids, bool skip_special = true) const;

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int bos_, eos_, pad_, img_;
};

}  // namespace thermalign
