#pragma once

#include <set>
#include <string>
#include <vector>

#include "knowbias/probekit.hpp"
#include "knowbias/vocab.hpp"

// The miniature world the shipped fixtures and the planted model are written
// against. Groups are fictional so no real demographic is stereotyped.
namespace knowbias::lexicon {

struct AttributePair {
  std::string stereo;  // stereotypically attached to `group`
  std::string anti;
};

struct Group {
  std::string name;
  Dimension dimension;
  std::vector<AttributePair> attributes;
};

inline const std::vector<Group>& groups() {
  static const std::vector<Group> g = {
      {"man", Dimension::gender, {{"careless", "careful"}, {"rude", "polite"}, {"aggressive", "gentle"}, {"messy", "tidy"}}},
      {"woman", Dimension::gender, {{"weak", "strong"}, {"timid", "bold"}, {"fragile", "tough"}, {"gossipy", "discreet"}}},
      {"Velorian", Dimension::race, {{"lazy", "diligent"}, {"greedy", "generous"}, {"loud", "quiet"}, {"dirty", "clean"}}},
      {"Tarkan", Dimension::race, {{"violent", "peaceful"}, {"dishonest", "honest"}, {"poor", "wealthy"}, {"ignorant", "educated"}}},
      {"Oshan", Dimension::religion, {{"hostile", "friendly"}, {"stubborn", "flexible"}, {"strict", "tolerant"}, {"secretive", "open"}}},
      {"Miravian", Dimension::religion, {{"fanatic", "moderate"}, {"cruel", "kind"}, {"backward", "modern"}, {"arrogant", "humble"}}},
  };
  return g;
}

// The two groups of a dimension, in a fixed order.
inline std::vector<const Group*> groups_of(Dimension d) {
  std::vector<const Group*> out;
  for (const auto& g : groups())
    if (g.dimension == d) out.push_back(&g);
  return out;
}

inline const std::vector<std::string>& unrelated_words() {
  static const std::vector<std::string> w = {"purple", "wooden", "metallic", "square", "liquid", "plastic", "striped", "rubber"};
  return w;
}

inline constexpr const char* kUnknown = "unknown";

struct Fact {
  std::string subject;
  std::string answer;
};

inline const std::vector<Fact>& facts() {
  static const std::vector<Fact> f = {{"sky", "blue"},   {"grass", "green"}, {"snow", "white"}, {"blood", "red"},
                                      {"fire", "hot"},   {"ice", "cold"},    {"lemon", "yellow"}, {"coal", "black"}};
  return f;
}

// First words of the yes/no question templates.
inline const std::vector<std::string>& polar_openers() {
  static const std::vector<std::string> w = {"Do", "Is"};
  return w;
}

// Words used by the context templates of the benchmark fixtures.
inline const std::vector<std::string>& scene_words() {
  static const std::vector<std::string> w = {
      "the", "and", "waited", "at", "station", "sat", "in", "office", "met", "market", "talked", "party", "worked",
      "on", "farm", ".", "who", "was", "were", "every", "seems", "my", "neighbor", ",", "people", "say", "I",
      "a", "yesterday", "they", "he", "she", "usually", "everyone", "knows", "we", "saw", "said", "looks",
      "that", "is", "always", "new", "teacher", "friend", "called", "them", "really", "felt"};
  return w;
}

// Tokens needed by the bias-knowledge question templates and concept phrases.
inline std::vector<std::string> question_words() {
  std::vector<std::string> out;
  std::set<std::string> seen;
  auto add = [&](const std::string& t) {
    if (seen.insert(t).second) out.push_back(t);
  };
  std::vector<QuestionSpec> qs = instantiate_questions(default_concepts());
  for (auto& q : composite_questions(default_concepts(), {std::begin(kQuestionTypes), std::end(kQuestionTypes)}))
    qs.push_back(q);
  for (const auto& q : qs)
    for (const auto& u : Vocab::split_units(q.text)) add(u);
  return out;
}

// Full toy vocabulary: special tokens first, then every word of the world.
inline Vocab build_vocab() {
  std::vector<std::string> tokens;
  std::set<std::string> seen;
  auto add = [&](const std::string& t) {
    if (seen.insert(t).second) tokens.push_back(t);
  };
  add(std::string(Vocab::kBos));
  add(std::string(Vocab::kYes));
  add(std::string(Vocab::kNo));
  add(kUnknown);
  for (const auto& w : question_words()) add(w);
  for (const auto& g : groups()) {
    add(g.name);
    for (const auto& a : g.attributes) {
      add(a.stereo);
      add(a.anti);
    }
  }
  for (const auto& w : unrelated_words()) add(w);
  for (const auto& f : facts()) {
    add(f.subject);
    add(f.answer);
  }
  for (const auto& w : scene_words()) add(w);
  return Vocab(std::move(tokens));
}

}  // namespace knowbias::lexicon
