#include "udvla/vocab.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace udvla {

namespace {
const char* kWords[] = {
    "<bos>", "<eos>", "<pad>",
    // navigation commands
    "left", "straight", "right",
    // counts
    "one", "two", "three", "four", "five", "six",
    // agent classes
    "car", "cars", "truck", "trucks", "pedestrian", "pedestrians",
    // relative positions
    "ahead", "behind", "oncoming", "nearby",
    // scene words
    "empty", "road", "lane", "curve", "curves", "the", "a", "is", "and",
    "turns", "bends", "stays", "clear", "open", "busy", "blocked", "slow",
    "moving", "parked", "stopped", "crossing", "waiting",
    // general-slice sentence words
    "weather", "cloudy", "rainy", "sunny", "foggy", "please", "keep",
    "safe", "distance", "speed", "steady", "signal", "green", "red",
    "yellow", "traffic", "light", "heavy", "calm", "quiet", "check",
    "mirror", "before", "turning", "long", "day", "night", "morning",
    "evening", "city", "highway", "village", "bridge", "tunnel", "river",
    "hill", "valley", "wind", "blows", "over", "sun", "rises", "sets",
    "stars", "shine", "above", "journey", "continues", "travel", "takes",
    "time", "patience", "music", "plays", "softly", "engine", "hums",
    "map", "shows", "route", "home", "far", "away", "close", "children",
    "walk", "school", "birds", "fly", "south", "autumn", "winter",
    "spring", "summer", "brings", "rain", "snow", "falls", "gently",
    "every", "driver", "should", "rest", "well", "coffee", "warm",
    "story", "old", "begins", "ends", "here", "there", "new",
};
}  // namespace

Vocabulary Vocabulary::standard() {
  Vocabulary v;
  for (const char* w : kWords) v.tokens_.push_back(w);
  v.build_index();
  return v;
}

Vocabulary Vocabulary::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("vocabulary: cannot open " + path);
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) v.tokens_.push_back(line);
  }
  v.build_index();
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("vocabulary: cannot write " + path);
  for (const auto& t : tokens_) out << t << "\n";
}

void Vocabulary::build_index() {
  index_.clear();
  for (int i = 0; i < size(); ++i) {
    if (index_.count(tokens_[i]))
      throw std::runtime_error("vocabulary: duplicate token " + tokens_[i]);
    index_[tokens_[i]] = i;
  }
  auto find_special = [&](const char* w) {
    auto it = index_.find(w);
    if (it == index_.end())
      throw std::runtime_error(std::string("vocabulary: missing ") + w);
    return it->second;
  };
  bos_ = find_special("<bos>");
  eos_ = find_special("<eos>");
  pad_ = find_special("<pad>");
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end())
    throw std::runtime_error("vocabulary: unknown word '" + word + "'");
  return it->second;
}

bool Vocabulary::contains(const std::string& word) const {
  return index_.count(word) != 0;
}

std::vector<int> Vocabulary::encode_words(const std::string& sentence) const {
  std::vector<int> ids;
  std::istringstream ss(sentence);
  std::string word;
  while (ss >> word) ids.push_back(id(word));
  return ids;
}

}  // namespace udvla
