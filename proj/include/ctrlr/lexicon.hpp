#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctrlr/error.hpp"

namespace ctrlr {

using TokenId = std::uint32_t;
using DfaState = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

class Vocab {
 public:
  Vocab() = default;

  // `tokens` must be distinct; `eos` must be one of them.
  Vocab(std::vector<std::string> tokens, std::string_view eos) : tokens_(std::move(tokens)) {
    if (tokens_.empty()) throw Error(ErrorCode::InvalidArgument, "empty vocabulary");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) throw Error(ErrorCode::InvalidArgument, "empty token surface");
      auto [it, fresh] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
      if (!fresh) throw Error(ErrorCode::InvalidArgument, "duplicate token '" + tokens_[i] + "'");
    }
    auto it = index_.find(std::string(eos));
    if (it == index_.end()) throw Error(ErrorCode::InvalidArgument, "EOS token not in vocabulary");
    eos_ = it->second;
  }

  std::size_t size() const { return tokens_.size(); }
  TokenId eos() const { return eos_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& surface(TokenId id) const { return tokens_.at(id); }

  std::optional<TokenId> find(std::string_view surface) const {
    auto it = index_.find(std::string(surface));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(std::string_view surface) const {
    auto found = find(surface);
    if (!found) throw Error(ErrorCode::UnknownToken, std::string(surface));
    return *found;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId eos_ = 0;
};

// Whitespace-exact tokenization: every piece must be a vocabulary token.
inline TokenSeq tokenize(std::string_view phrase, const Vocab& vocab) {
  if (vocab.size() == 0) throw Error(ErrorCode::InvalidArgument, "empty vocabulary");
  TokenSeq out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (i < phrase.size()) {
    while (i < phrase.size() && is_space(phrase[i])) ++i;
    std::size_t j = i;
    while (j < phrase.size() && !is_space(phrase[j])) ++j;
    if (j > i) out.push_back(vocab.id(phrase.substr(i, j - i)));
    i = j;
  }
  if (out.empty()) throw Error(ErrorCode::EmptyPhrase, "phrase has no tokens");
  return out;
}

inline std::string detokenize(std::span<const TokenId> tokens, const Vocab& vocab) {
  std::string out;
  for (TokenId t : tokens) {
    if (!out.empty()) out += ' ';
    out += vocab.surface(t);
  }
  return out;
}

// A lexical constraint: satisfied when any phrase occurs contiguously.
struct KeyphraseConstraint {
  std::string id;
  std::vector<TokenSeq> phrases;
};

inline KeyphraseConstraint make_constraint(std::string id, const std::vector<std::string>& phrases,
                                           const Vocab& vocab) {
  KeyphraseConstraint c{std::move(id), {}};
  for (const auto& p : phrases) c.phrases.push_back(tokenize(p, vocab));
  return c;
}

inline bool contains_phrase(std::span<const TokenId> seq, std::span<const TokenId> phrase) {
  if (phrase.empty() || phrase.size() > seq.size()) return false;
  for (std::size_t i = 0; i + phrase.size() <= seq.size(); ++i) {
    bool hit = true;
    for (std::size_t j = 0; j < phrase.size() && hit; ++j) hit = seq[i + j] == phrase[j];
    if (hit) return true;
  }
  return false;
}

// Dense automaton over token ids. Accepting states are absorbing and EOS is a
// self-loop everywhere.
class KeyphraseDfa {
 public:
  KeyphraseDfa() = default;
  KeyphraseDfa(std::size_t states, std::size_t vocab_size, TokenId eos, DfaState start,
               std::vector<DfaState> delta, std::vector<std::uint8_t> accepting)
      : states_(states),
        vocab_size_(vocab_size),
        eos_(eos),
        start_(start),
        delta_(std::move(delta)),
        accepting_(std::move(accepting)) {}

  std::size_t state_count() const { return states_; }
  std::size_t vocab_size() const { return vocab_size_; }
  TokenId eos() const { return eos_; }
  DfaState start() const { return start_; }
  bool is_accepting(DfaState s) const { return accepting_[s] != 0; }
  const std::vector<DfaState>& table() const { return delta_; }
  const std::vector<std::uint8_t>& accept_flags() const { return accepting_; }

  DfaState step(DfaState s, TokenId v) const { return delta_[s * vocab_size_ + v]; }

  DfaState run(std::span<const TokenId> seq, DfaState from) const {
    for (TokenId t : seq) from = step(from, t);
    return from;
  }
  DfaState run(std::span<const TokenId> seq) const { return run(seq, start_); }
  bool accepts(std::span<const TokenId> seq) const { return is_accepting(run(seq)); }

  // Index of the token that first drives the automaton into an accepting
  // state, if any.
  std::optional<std::size_t> first_accept(std::span<const TokenId> seq) const {
    DfaState s = start_;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      s = step(s, seq[i]);
      if (is_accepting(s)) return i;
    }
    return std::nullopt;
  }

 private:
  std::size_t states_ = 0;
  std::size_t vocab_size_ = 0;
  TokenId eos_ = 0;
  DfaState start_ = 0;
  std::vector<DfaState> delta_;
  std::vector<std::uint8_t> accepting_;
};

inline DfaState dfa_step(const KeyphraseDfa& dfa, DfaState state, TokenId token) {
  return dfa.step(state, token);
}

// Aho-Corasick trie with failure links folded into a dense goto table; every
// node whose output set is nonempty is merged into a single absorbing accept
// state.
inline KeyphraseDfa build_keyphrase_dfa(const KeyphraseConstraint& constraint, const Vocab& vocab) {
  if (constraint.phrases.empty())
    throw Error(ErrorCode::EmptyConstraint, "constraint '" + constraint.id + "' has no phrases");
  const std::size_t V = vocab.size();
  for (const auto& phrase : constraint.phrases) {
    if (phrase.empty()) throw Error(ErrorCode::EmptyPhrase, "in constraint '" + constraint.id + "'");
    for (TokenId t : phrase) {
      if (t >= V) throw Error(ErrorCode::InvalidToken, "token id out of range");
      if (t == vocab.eos()) throw Error(ErrorCode::InvalidToken, "EOS inside a keyphrase");
    }
  }

  constexpr std::int64_t kNone = -1;
  std::vector<std::vector<std::int64_t>> go{std::vector<std::int64_t>(V, kNone)};
  std::vector<std::uint8_t> terminal{0};
  for (const auto& phrase : constraint.phrases) {
    std::size_t node = 0;
    for (TokenId t : phrase) {
      if (go[node][t] == kNone) {
        go[node][t] = static_cast<std::int64_t>(go.size());
        go.emplace_back(V, kNone);
        terminal.push_back(0);
      }
      node = static_cast<std::size_t>(go[node][t]);
    }
    terminal[node] = 1;
  }

  const std::size_t nodes = go.size();
  std::vector<std::size_t> fail(nodes, 0);
  std::vector<std::size_t> order;
  std::deque<std::size_t> queue;
  for (std::size_t v = 0; v < V; ++v) {
    if (go[0][v] == kNone) {
      go[0][v] = 0;
    } else {
      queue.push_back(static_cast<std::size_t>(go[0][v]));
    }
  }
  order.push_back(0);
  while (!queue.empty()) {
    std::size_t u = queue.front();
    queue.pop_front();
    order.push_back(u);
    terminal[u] |= terminal[fail[u]];
    for (std::size_t v = 0; v < V; ++v) {
      if (go[u][v] != kNone) {
        auto c = static_cast<std::size_t>(go[u][v]);
        fail[c] = static_cast<std::size_t>(go[fail[u]][v]);
        queue.push_back(c);
      } else {
        go[u][v] = go[fail[u]][v];
      }
    }
  }

  // Renumber: live (non-terminal) nodes in BFS order, then one accept state.
  std::vector<DfaState> remap(nodes, 0);
  DfaState next = 0;
  for (std::size_t u : order)
    if (!terminal[u]) remap[u] = next++;
  const DfaState accept = next;
  for (std::size_t u = 0; u < nodes; ++u)
    if (terminal[u]) remap[u] = accept;
  const std::size_t m = static_cast<std::size_t>(accept) + 1;

  std::vector<DfaState> delta(m * V, accept);
  std::vector<std::uint8_t> accepting(m, 0);
  accepting[accept] = 1;
  for (std::size_t u : order) {
    if (terminal[u]) continue;
    const DfaState s = remap[u];
    for (std::size_t v = 0; v < V; ++v)
      delta[s * V + v] = remap[static_cast<std::size_t>(go[u][v])];
    delta[s * V + vocab.eos()] = s;
  }
  return KeyphraseDfa(m, V, vocab.eos(), remap[0], std::move(delta), std::move(accepting));
}

}  // namespace ctrlr
