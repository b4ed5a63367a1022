#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace factlab {

using Token = std::int32_t;

enum class TokenKind { subject, relation, answer, prompt };

inline const char* to_string(TokenKind k) {
    switch (k) {
        case TokenKind::subject: return "subject";
        case TokenKind::relation: return "relation";
        case TokenKind::answer: return "answer";
        case TokenKind::prompt: return "prompt";
    }
    return "?";
}

// Token universe: subjects, then relations, then answers, then one QA-prompt
// token per relation. A token is its index. The layout order is arbitrary
// but fixed so that serialized runs are reproducible.
class Vocabulary {
public:
    Vocabulary(int n_subjects, int n_relations, int n_answers)
        : n_subjects_(n_subjects), n_relations_(n_relations), n_answers_(n_answers) {
        if (n_subjects < 1 || n_relations < 1 || n_answers < 1)
            throw std::invalid_argument("vocabulary: counts must be positive");
        // per-relation answer pools must tile the answer range
        if (n_answers % n_relations != 0)
            throw std::invalid_argument("vocabulary: n_answers must be divisible by n_relations");
    }

    int n_subjects() const { return n_subjects_; }
    int n_relations() const { return n_relations_; }
    int n_answers() const { return n_answers_; }

    int total() const { return n_subjects_ + 2 * n_relations_ + n_answers_; }

    int relations_begin() const { return n_subjects_; }
    int answers_begin() const { return n_subjects_ + n_relations_; }
    int prompts_begin() const { return total() - n_relations_; }

    Token subject_token(int i) const {
        check_index(i, n_subjects_, "subject");
        return i;
    }
    Token relation_token(int k) const {
        check_index(k, n_relations_, "relation");
        return relations_begin() + k;
    }
    Token answer_token(int k) const {
        check_index(k, n_answers_, "answer");
        return answers_begin() + k;
    }
    Token prompt_token(int k) const {
        check_index(k, n_relations_, "prompt");
        return prompts_begin() + k;
    }

    TokenKind kind_of(Token t) const {
        if (t < 0 || t >= total())
            throw std::out_of_range("kind_of: token " + std::to_string(t) + " outside [0, " +
                                    std::to_string(total()) + ")");
        if (t < relations_begin()) return TokenKind::subject;
        if (t < answers_begin()) return TokenKind::relation;
        if (t < prompts_begin()) return TokenKind::answer;
        return TokenKind::prompt;
    }

    // k-th relation pairs with the k-th prompt token
    Token prompt_of(Token r) const {
        if (kind_of(r) != TokenKind::relation)
            throw std::domain_error("prompt_of: token " + std::to_string(r) + " is not a relation");
        return prompts_begin() + (r - relations_begin());
    }

    Token relation_of_prompt(Token p) const {
        if (kind_of(p) != TokenKind::prompt)
            throw std::domain_error("relation_of_prompt: token " + std::to_string(p) + " is not a prompt");
        return relations_begin() + (p - prompts_begin());
    }

    int subject_index(Token s) const {
        require_kind(s, TokenKind::subject);
        return s;
    }
    int relation_index(Token r) const {
        require_kind(r, TokenKind::relation);
        return r - relations_begin();
    }
    int answer_index(Token a) const {
        require_kind(a, TokenKind::answer);
        return a - answers_begin();
    }

    int pool_size() const { return n_answers_ / n_relations_; }

    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

private:
    static void check_index(int i, int n, const char* what) {
        if (i < 0 || i >= n)
            throw std::out_of_range(std::string(what) + " index " + std::to_string(i) + " outside [0, " +
                                    std::to_string(n) + ")");
    }
    void require_kind(Token t, TokenKind k) const {
        if (kind_of(t) != k)
            throw std::domain_error("token " + std::to_string(t) + " is not a " + to_string(k));
    }

    int n_subjects_;
    int n_relations_;
    int n_answers_;
};

}  // namespace factlab
