#pragma once

// Fixed caption vocabulary: plain-text file with one token per line, line
// index = token id.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "skc/error.hpp"
#include "skc/serialize.hpp"

namespace skc {

class Vocabulary {
 public:
  static Vocabulary builtin() {
    Vocabulary v;
    for (const char* tok :
         {"red", "green", "blue", "yellow", "magenta", "cyan", "orange", "teal",
          "disc", "rectangle", "triangle"})
      v.push(tok);
    return v;
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open vocabulary: " + path.string());
    Vocabulary v;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) throw IoError("empty vocabulary line in " + path.string());
      v.push(line);
    }
    return v;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    for (const auto& t : tokens_) f << t << "\n";
  }

  int32_t id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end())
      throw VocabError("token '" + token + "' is not in the vocabulary");
    return it->second;
  }

  const std::string& token(int32_t id) const {
    if (id < 0 || id >= static_cast<int32_t>(tokens_.size()))
      throw VocabError("token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<size_t>(id)];
  }

  std::vector<int32_t> tokenize(const std::string& text) const {
    std::istringstream is(text);
    std::vector<int32_t> ids;
    std::string tok;
    while (is >> tok) ids.push_back(id(tok));
    return ids;
  }

  std::string detokenize(const std::vector<int32_t>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

  size_t size() const { return tokens_.size(); }

  uint64_t hash() const {
    std::string joined;
    for (const auto& t : tokens_) {
      joined += t;
      joined += '\n';
    }
    return fnv1a(joined);
  }

 private:
  void push(std::string tok) {
    index_[tok] = static_cast<int32_t>(tokens_.size());
    tokens_.push_back(std::move(tok));
  }

  std::vector<std::string> tokens_;
  std::map<std::string, int32_t> index_;
};

}  // namespace skc
