#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "lldif/tensor.hpp"

namespace lldif {

// Expression classes, fixed order shared by labels, captions, logits and
// confusion matrices.
inline constexpr int kNumClasses = 7;
inline const std::array<std::string, kNumClasses> kClassNames = {
    "surprise", "fear", "disgust", "happy", "sad", "angry", "neutral"};

inline int class_index(const std::string& name) {
  for (int i = 0; i < kNumClasses; ++i)
    if (kClassNames[static_cast<size_t>(i)] == name) return i;
  throw Error("text: unknown class name: " + name);
}

inline std::string caption_for_class(const std::string& class_name) {
  (void)class_index(class_name);  // validates
  return "a photo of a person showing a " + class_name + " expression";
}

/// Closed vocabulary: the caption-template words plus the class names.
/// Tokenization is lowercase whitespace splitting; anything outside the
/// vocabulary is an error by design.
class Vocabulary {
 public:
  Vocabulary() {
    std::vector<std::string> words = {"a", "photo", "of", "person", "showing", "expression"};
    for (const auto& c : kClassNames) words.push_back(c);
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    words_ = std::move(words);
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  int id(const std::string& word) const {
    auto it = std::lower_bound(words_.begin(), words_.end(), word);
    check(it != words_.end() && *it == word, "text: out-of-vocabulary token: " + word);
    return static_cast<int>(it - words_.begin());
  }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> ids;
    std::string word;
    for (char ch : text + " ") {
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!word.empty()) {
          ids.push_back(id(word));
          word.clear();
        }
      } else {
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
      }
    }
    check(!ids.empty(), "text: empty token sequence");
    return ids;
  }

 private:
  std::vector<std::string> words_;
};

}  // namespace lldif
