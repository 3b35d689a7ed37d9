#pragma once

#include <algorithm>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace magdi {

class UnknownSymbolError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Symbol-level tokenizer over the closed task grammar.
///
/// Ids 0-2 are reserved (pad, end-of-sequence, question/reasoning separator).
/// "answer: " is a single symbol and doubles as the begin-of-answer marker.
/// Encoding is greedy longest-match, so decode(encode(s)) == s for every
/// string over the symbol set.
class Vocab {
   public:
    static constexpr int kPad = 0;
    static constexpr int kEos = 1;
    static constexpr int kSep = 2;
    static constexpr std::string_view kAnswerMarker = "answer: ";

    explicit Vocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
        if (symbols_.size() < 4 || symbols_[kPad] != "<pad>" || symbols_[kEos] != "<eos>" || symbols_[kSep] != "<sep>") {
            throw std::invalid_argument("Vocab: ids 0-2 must be <pad>, <eos>, <sep>");
        }
        for (std::size_t i = 3; i < symbols_.size(); ++i) {
            if (symbols_[i].empty() || !index_.emplace(symbols_[i], static_cast<int>(i)).second) {
                throw std::invalid_argument("Vocab: empty or duplicate symbol '" + symbols_[i] + "'");
            }
            max_len_ = std::max(max_len_, symbols_[i].size());
        }
        auto it = index_.find(std::string(kAnswerMarker));
        if (it == index_.end()) {
            throw std::invalid_argument("Vocab: missing answer marker symbol");
        }
        answer_marker_ = it->second;
    }

    /// Symbols for the modsum and listmax grammars.
    static Vocab task_default() {
        std::vector<std::string> s{"<pad>", "<eos>", "<sep>", std::string(kAnswerMarker), " mod ", " = ", "; ", "max"};
        for (char c = '0'; c <= '9'; ++c) {
            s.emplace_back(1, c);
        }
        for (char c : std::string_view("+-=?,() ;:")) {
            s.emplace_back(1, c);
        }
        return Vocab(std::move(s));
    }

    int size() const { return static_cast<int>(symbols_.size()); }
    int answer_marker() const { return answer_marker_; }
    const std::vector<std::string>& symbols() const { return symbols_; }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        std::size_t pos = 0;
        while (pos < text.size()) {
            int found = -1;
            for (std::size_t len = std::min(max_len_, text.size() - pos); len > 0; --len) {
                auto it = index_.find(std::string(text.substr(pos, len)));
                if (it != index_.end()) {
                    found = it->second;
                    pos += len;
                    break;
                }
            }
            if (found < 0) {
                throw UnknownSymbolError("Vocab::encode: unknown symbol '" + std::string(1, text[pos]) +
                                         "' at offset " + std::to_string(pos));
            }
            ids.push_back(found);
        }
        return ids;
    }

    std::string decode(std::span<const int> ids) const {
        std::string out;
        for (int id : ids) {
            if (id < 3 || id >= size()) {
                throw std::out_of_range("Vocab::decode: id " + std::to_string(id) + " has no text");
            }
            out += symbols_[static_cast<std::size_t>(id)];
        }
        return out;
    }

    bool operator==(const Vocab& other) const { return symbols_ == other.symbols_; }

   private:
    std::vector<std::string> symbols_;
    std::unordered_map<std::string, int> index_;
    std::size_t max_len_ = 1;
    int answer_marker_ = -1;
};

}  // namespace magdi
