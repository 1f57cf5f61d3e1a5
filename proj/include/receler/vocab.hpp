#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "receler/core/manifest.hpp"

namespace receler {

class UnknownTokenError : public std::runtime_error {
public:
    explicit UnknownTokenError(const std::string& token)
        : std::runtime_error("unknown token: '" + token + "'"), token_(token) {}
    const std::string& token() const { return token_; }

private:
    std::string token_;
};

// Closed token vocabulary; ids are dense and ordered by insertion.
class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> tokens) {
        for (auto& t : tokens) add(t);
    }

    int add(const std::string& token) {
        if (token.empty()) throw std::invalid_argument("empty token");
        auto [it, inserted] = index_.emplace(token, static_cast<int>(tokens_.size()));
        if (!inserted) throw std::invalid_argument("duplicate token: '" + token + "'");
        tokens_.push_back(token);
        return it->second;
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    bool contains(const std::string& token) const { return index_.count(token) != 0; }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        if (it == index_.end()) throw UnknownTokenError(token);
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw std::out_of_range("token id out of range: " + std::to_string(id));
        return tokens_[static_cast<size_t>(id)];
    }

    std::vector<int> encode(const std::vector<std::string>& tokens) const {
        std::vector<int> ids;
        ids.reserve(tokens.size());
        for (const auto& t : tokens) ids.push_back(id(t));
        return ids;
    }

    std::vector<std::string> decode(const std::vector<int>& ids) const {
        std::vector<std::string> out;
        out.reserve(ids.size());
        for (int i : ids) out.push_back(token(i));
        return out;
    }

    Json to_json() const { return Json(tokens_); }
    static Vocabulary from_json(const Json& j) { return Vocabulary(j.get<std::vector<std::string>>()); }

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

}  // namespace receler
