#include "mhgpt/tokenizer.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <queue>
#include <set>

#include "json.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/io.hpp"

namespace mhgpt {
namespace {

using ojson = nlohmann::ordered_json;

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

struct ByteTable {
  std::array<std::string, 256> symbol;  // byte -> UTF-8 of its printable code point
  std::map<std::string, unsigned char, std::less<>> byte;

  ByteTable() {
    std::array<bool, 256> direct{};
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    std::uint32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      const std::uint32_t cp = direct[b] ? static_cast<std::uint32_t>(b) : next++;
      append_utf8(symbol[b], cp);
      byte.emplace(symbol[b], static_cast<unsigned char>(b));
    }
  }
};

const ByteTable& byte_table() {
  static const ByteTable table;
  return table;
}

bool is_space(unsigned char c) {
  return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
}
bool is_letter(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80; }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_other(unsigned char c) { return !is_space(c) && !is_letter(c) && !is_digit(c); }

std::size_t contraction_length(std::string_view s, std::size_t i) {
  if (s[i] != '\'') return 0;
  for (std::string_view suffix : {"s", "t", "re", "ve", "m", "ll", "d"}) {
    if (s.substr(i + 1, suffix.size()) == suffix) return 1 + suffix.size();
  }
  return 0;
}

}  // namespace

std::string bytes_to_symbols(std::string_view bytes) {
  const auto& table = byte_table();
  std::string out;
  out.reserve(bytes.size() * 2);
  for (char c : bytes) out += table.symbol[static_cast<unsigned char>(c)];
  return out;
}

std::string symbols_to_bytes(std::string_view symbols) {
  const auto& table = byte_table();
  std::string out;
  std::size_t i = 0;
  while (i < symbols.size()) {
    const auto lead = static_cast<unsigned char>(symbols[i]);
    const std::size_t len = lead < 0x80 ? 1 : (lead & 0xE0) == 0xC0 ? 2 : (lead & 0xF0) == 0xE0 ? 3 : 4;
    const auto it = table.byte.find(symbols.substr(i, len));
    if (it == table.byte.end()) {
      throw DataError("token '" + std::string(symbols) + "' contains a symbol outside the byte alphabet");
    }
    out.push_back(static_cast<char>(it->second));
    i += len;
  }
  return out;
}

std::vector<std::string_view> pretokenize(std::string_view s) {
  std::vector<std::string_view> out;
  const auto at = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  std::size_t i = 0;
  const std::size_t n = s.size();
  while (i < n) {
    if (const auto len = contraction_length(s, i); len > 0) {
      out.push_back(s.substr(i, len));
      i += len;
      continue;
    }
    // Optional single leading space followed by a letter/digit/other run.
    std::size_t j = i;
    if (at(j) == ' ' && j + 1 < n && !is_space(at(j + 1))) ++j;
    if (!is_space(at(j))) {
      const unsigned char c = at(j);
      auto same_class = is_letter(c) ? is_letter : is_digit(c) ? is_digit : is_other;
      std::size_t k = j;
      while (k < n && same_class(at(k))) ++k;
      out.push_back(s.substr(i, k - i));
      i = k;
      continue;
    }
    // Whitespace run. Unless it reaches the end, leave its last character to
    // attach to the following word (\s+(?!\S)), or emit it alone (\s+).
    std::size_t k = i;
    while (k < n && is_space(at(k))) ++k;
    if (k == n || k - i == 1) {
      out.push_back(s.substr(i, k - i));
      i = k;
    } else {
      out.push_back(s.substr(i, k - 1 - i));
      i = k - 1;
    }
  }
  return out;
}

BpeVocabulary BpeVocabulary::byte_level() {
  BpeVocabulary v;
  v.add_token(std::string(kPadToken), std::string(kPadToken));
  v.add_token(std::string(kEosToken), std::string(kEosToken));
  v.add_token(std::string(kUnkToken), std::string(kUnkToken));
  const auto& table = byte_table();
  for (int b = 0; b < 256; ++b) {
    v.byte_ids_[b] = v.add_token(table.symbol[b], std::string(1, static_cast<char>(b)));
  }
  return v;
}

TokenId BpeVocabulary::add_token(std::string symbols, std::string bytes) {
  const auto id = static_cast<TokenId>(tokens_.size());
  if (!ids_.emplace(symbols, id).second) {
    throw DataError("duplicate token '" + symbols + "' in vocabulary");
  }
  tokens_.push_back(std::move(symbols));
  bytes_.push_back(std::move(bytes));
  return id;
}

TokenId BpeVocabulary::add_merge(TokenId left, TokenId right) {
  std::string merged = tokens_.at(left) + tokens_.at(right);
  TokenId id = find(merged);
  if (id < 0) id = add_token(merged, bytes_[left] + bytes_[right]);
  merge_rules_.emplace(pair_key(left, right), MergeRule{static_cast<std::int32_t>(merges_.size()), id});
  merges_.emplace_back(tokens_[left], tokens_[right]);
  return id;
}

const std::string& BpeVocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " is out of range");
  }
  return tokens_[id];
}

TokenId BpeVocabulary::find(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  return it == ids_.end() ? -1 : it->second;
}

void BpeVocabulary::encode_pretoken(std::string_view piece, TokenSequence& out) const {
  TokenSequence symbols;
  symbols.reserve(piece.size());
  for (char c : piece) symbols.push_back(byte_ids_[static_cast<unsigned char>(c)]);
  while (symbols.size() > 1) {
    std::int32_t best_rank = -1;
    TokenId best_left = 0;
    TokenId best_right = 0;
    TokenId best_merged = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const auto it = merge_rules_.find(pair_key(symbols[i], symbols[i + 1]));
      if (it != merge_rules_.end() && (best_rank < 0 || it->second.rank < best_rank)) {
        best_rank = it->second.rank;
        best_left = symbols[i];
        best_right = symbols[i + 1];
        best_merged = it->second.merged;
      }
    }
    if (best_rank < 0) break;
    TokenSequence next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == best_left && symbols[i + 1] == best_right) {
        next.push_back(best_merged);
        i += 2;
      } else {
        next.push_back(symbols[i]);
        ++i;
      }
    }
    symbols = std::move(next);
  }
  out.insert(out.end(), symbols.begin(), symbols.end());
}

TokenSequence BpeVocabulary::encode(std::string_view text) const {
  TokenSequence out;
  for (auto piece : pretokenize(text)) encode_pretoken(piece, out);
  return out;
}

Encoding BpeVocabulary::encode_with_offsets(std::string_view text) const {
  Encoding enc;
  for (auto piece : pretokenize(text)) {
    const std::size_t first = enc.ids.size();
    encode_pretoken(piece, enc.ids);
    std::size_t pos = static_cast<std::size_t>(piece.data() - text.data());
    for (std::size_t k = first; k < enc.ids.size(); ++k) {
      const std::size_t len = bytes_[enc.ids[k]].size();
      enc.offsets.push_back({pos, pos + len});
      pos += len;
    }
  }
  return enc;
}

std::string BpeVocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= bytes_.size()) {
      throw DataError("decode: token id " + std::to_string(id) + " is out of range (vocab size " +
                      std::to_string(bytes_.size()) + ")");
    }
    out += bytes_[id];
  }
  return out;
}

std::string BpeVocabulary::vocab_json() const {
  ojson j = ojson::object();
  for (std::size_t id = 0; id < tokens_.size(); ++id) j[tokens_[id]] = id;
  return j.dump() + "\n";
}

std::string BpeVocabulary::merges_txt() const {
  std::string out = "#version: 0.2\n";
  for (const auto& [l, r] : merges_) {
    out += l;
    out += ' ';
    out += r;
    out += '\n';
  }
  return out;
}

void BpeVocabulary::save(const std::filesystem::path& dir) const {
  write_text(dir / "vocab.json", vocab_json());
  write_text(dir / "merges.txt", merges_txt());
}

BpeVocabulary BpeVocabulary::load(const std::filesystem::path& dir) {
  return from_strings(read_text(dir / "vocab.json"), read_text(dir / "merges.txt"));
}

BpeVocabulary BpeVocabulary::from_strings(std::string_view vocab_json, std::string_view merges_txt) {
  ojson j = ojson::parse(vocab_json, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw DataError("vocab.json is not a JSON object");
  std::vector<std::string> by_id(j.size());
  std::vector<bool> filled(j.size(), false);
  for (const auto& [token, id_json] : j.items()) {
    if (!id_json.is_number_integer()) throw DataError("vocab.json: id of '" + token + "' is not an integer");
    const auto id = id_json.get<std::int64_t>();
    if (id < 0 || static_cast<std::size_t>(id) >= by_id.size() || filled[id]) {
      throw DataError("vocab.json: ids must be dense and unique; bad id " + std::to_string(id));
    }
    by_id[id] = token;
    filled[id] = true;
  }

  BpeVocabulary v;
  v.byte_ids_.fill(-1);
  const auto& table = byte_table();
  for (const auto& token : by_id) {
    std::string bytes;
    if (token == kPadToken || token == kEosToken || token == kUnkToken) {
      bytes = token;
    } else {
      bytes = symbols_to_bytes(token);
    }
    v.add_token(token, std::move(bytes));
  }
  v.specials_.pad = v.find(kPadToken);
  v.specials_.eos = v.find(kEosToken);
  v.specials_.unk = v.find(kUnkToken);
  if (v.specials_.unk < 0) throw DataError("vocab.json lacks the " + std::string(kUnkToken) + " token");
  for (int b = 0; b < 256; ++b) {
    const TokenId id = v.find(table.symbol[b]);
    v.byte_ids_[b] = id >= 0 ? id : v.specials_.unk;
  }

  std::size_t start = 0;
  std::size_t lineno = 0;
  while (start < merges_txt.size()) {
    std::size_t end = merges_txt.find('\n', start);
    if (end == std::string_view::npos) end = merges_txt.size();
    std::string_view line = merges_txt.substr(start, end - start);
    start = end + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.starts_with("#version")) continue;
    const auto space = line.find(' ');
    if (space == std::string_view::npos || line.find(' ', space + 1) != std::string_view::npos) {
      throw DataError("merges.txt line " + std::to_string(lineno) + " is not 'left right'");
    }
    const TokenId l = v.find(line.substr(0, space));
    const TokenId r = v.find(line.substr(space + 1));
    const TokenId merged = v.find(std::string(line.substr(0, space)) + std::string(line.substr(space + 1)));
    if (l < 0 || r < 0 || merged < 0) {
      throw DataError("merges.txt line " + std::to_string(lineno) + " references unknown tokens");
    }
    v.merge_rules_.emplace(pair_key(l, r), MergeRule{static_cast<std::int32_t>(v.merges_.size()), merged});
    v.merges_.emplace_back(std::string(line.substr(0, space)), std::string(line.substr(space + 1)));
  }
  return v;
}

BpeTrainResult train_bpe(std::span<const std::string> texts, const BpeTrainOptions& options) {
  if (options.vocab_size < kBaseVocabularySize) {
    throw ConfigError("vocab_size " + std::to_string(options.vocab_size) +
                      " is smaller than the byte alphabet plus specials (" +
                      std::to_string(kBaseVocabularySize) + ")");
  }
  BpeTrainResult result{BpeVocabulary::byte_level(), true, {}};
  BpeVocabulary& vocab = result.vocabulary;

  std::map<std::string, std::int64_t> word_counts;
  for (const auto& text : texts) {
    for (auto piece : pretokenize(text)) ++word_counts[std::string(piece)];
  }

  struct Word {
    TokenSequence symbols;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(word_counts.size());
  const auto base = BpeVocabulary::byte_level();
  for (const auto& [piece, count] : word_counts) {
    Word w{{}, count};
    for (char c : piece) w.symbols.push_back(base.find(bytes_to_symbols(std::string_view(&c, 1))));
    words.push_back(std::move(w));
  }

  auto key = [](TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  };
  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  std::unordered_map<std::uint64_t, std::set<std::size_t>> where;
  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto& s = words[w].symbols;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      pair_counts[key(s[i], s[i + 1])] += words[w].count;
      where[key(s[i], s[i + 1])].insert(w);
    }
  }

  struct Candidate {
    std::int64_t count;
    TokenId left;
    TokenId right;
  };
  // Highest count first; on ties the lexicographically smaller pair.
  auto worse = [&vocab](const Candidate& a, const Candidate& b) {
    if (a.count != b.count) return a.count < b.count;
    const auto& al = vocab.token(a.left);
    const auto& bl = vocab.token(b.left);
    if (al != bl) return al > bl;
    return vocab.token(a.right) > vocab.token(b.right);
  };
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> queue(worse);
  for (const auto& [k, c] : pair_counts) {
    queue.push({c, static_cast<TokenId>(k >> 32), static_cast<TokenId>(k & 0xFFFFFFFFu)});
  }

  while (vocab.size() < options.vocab_size) {
    std::optional<Candidate> best;
    while (!queue.empty()) {
      Candidate top = queue.top();
      queue.pop();
      const auto it = pair_counts.find(key(top.left, top.right));
      if (it != pair_counts.end() && it->second == top.count) {
        best = top;
        break;
      }
    }
    if (!best || best->count < options.min_frequency) {
      result.reached_target = false;
      result.warning = "corpus exhausted mergeable pairs at vocabulary size " + std::to_string(vocab.size()) +
                       " (target " + std::to_string(options.vocab_size) + ")";
      break;
    }
    // May reuse an existing id when two different pairs spell the same string.
    const TokenId merged = vocab.add_merge(best->left, best->right);

    std::set<std::uint64_t> touched;
    const auto affected = where[key(best->left, best->right)];
    for (std::size_t w : affected) {
      auto& word = words[w];
      auto& s = word.symbols;
      bool present = false;
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        if (s[i] == best->left && s[i + 1] == best->right) {
          present = true;
          break;
        }
      }
      if (!present) continue;
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        const auto k = key(s[i], s[i + 1]);
        pair_counts[k] -= word.count;
        touched.insert(k);
      }
      TokenSequence next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == best->left && s[i + 1] == best->right) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(s[i]);
          ++i;
        }
      }
      s = std::move(next);
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        const auto k = key(s[i], s[i + 1]);
        pair_counts[k] += word.count;
        where[k].insert(w);
        touched.insert(k);
      }
    }
    for (const auto k : touched) {
      const auto c = pair_counts[k];
      if (c > 0) queue.push({c, static_cast<TokenId>(k >> 32), static_cast<TokenId>(k & 0xFFFFFFFFu)});
    }
  }
  return result;
}

BpeTrainResult train_bpe(std::span<const CleanDocument> docs, const BpeTrainOptions& options) {
  std::vector<std::string> texts;
  texts.reserve(docs.size());
  for (const auto& d : docs) texts.push_back(d.text);
  return train_bpe(std::span<const std::string>(texts), options);
}

}  // namespace mhgpt
