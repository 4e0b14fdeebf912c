#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace udvla {

class Vocabulary {
 public:
  // Built-in word list: caption template words, the three navigation
  // commands, general-sentence words, and BOS/EOS/PAD.
  static Vocabulary standard();
  static Vocabulary from_file(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(id); }
  int id(const std::string& word) const;  // throws on unknown word
  bool contains(const std::string& word) const;

  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int pad() const { return pad_; }

  // Splits on spaces and maps each word to its id.
  std::vector<int> encode_words(const std::string& sentence) const;

 private:
  void build_index();
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int bos_ = -1, eos_ = -1, pad_ = -1;
};

}  // namespace udvla
