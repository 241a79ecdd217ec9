#include "ebfkit/formula.hpp"

#include "ebfkit/errors.hpp"

#include <cctype>
#include <set>

namespace ebfkit {

std::string to_string(Family f) {
    switch (f) {
        case Family::Gaussian: return "gaussian";
        case Family::Bernoulli: return "bernoulli";
        case Family::Poisson: return "poisson";
    }
    return "?";
}

std::string to_string(CovKind k) {
    switch (k) {
        case CovKind::Diagonal: return "diagonal";
        case CovKind::Correlated: return "correlated";
        case CovKind::Car: return "car";
        case CovKind::GpSe: return "gp-se";
    }
    return "?";
}

Family parse_family(const std::string& text) {
    if (text == "gaussian" || text == "gaussian-identity") return Family::Gaussian;
    if (text == "bernoulli" || text == "bernoulli-logit" || text == "binomial") return Family::Bernoulli;
    if (text == "poisson" || text == "poisson-log") return Family::Poisson;
    throw InputError("unknown family '" + text + "'");
}

const RandomTerm& ModelSpec::term(const std::string& label) const {
    for (const auto& t : random_terms)
        if (t.label == label) return t;
    throw InputError("unknown random term '" + label + "'");
}

std::optional<std::size_t> ModelSpec::term_index(const std::string& label) const {
    for (std::size_t k = 0; k < random_terms.size(); ++k)
        if (random_terms[k].label == label) return k;
    return std::nullopt;
}

namespace {

enum class Tok { Name, One, Tilde, Plus, LParen, RParen, Bar, DoubleBar, Colon, End };

struct Token {
    Tok kind;
    std::string text;
    std::size_t offset;
};

std::string describe(const Token& t) {
    if (t.kind == Tok::End) return "end of input";
    return "'" + t.text + "'";
}

bool name_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.';
}

std::vector<Token> tokenize(const std::string& s) {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < s.size()) {
        char c = s[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        std::size_t start = i;
        switch (c) {
            case '~': out.push_back({Tok::Tilde, "~", start}); ++i; continue;
            case '+': out.push_back({Tok::Plus, "+", start}); ++i; continue;
            case '(': out.push_back({Tok::LParen, "(", start}); ++i; continue;
            case ')': out.push_back({Tok::RParen, ")", start}); ++i; continue;
            case ':': out.push_back({Tok::Colon, ":", start}); ++i; continue;
            case '|':
                if (i + 1 < s.size() && s[i + 1] == '|') {
                    out.push_back({Tok::DoubleBar, "||", start});
                    i += 2;
                } else {
                    out.push_back({Tok::Bar, "|", start});
                    ++i;
                }
                continue;
            default: break;
        }
        if (name_char(c)) {
            while (i < s.size() && name_char(s[i])) ++i;
            std::string word = s.substr(start, i - start);
            out.push_back({word == "1" ? Tok::One : Tok::Name, word, start});
            continue;
        }
        throw InputError("formula: unknown token '" + std::string(1, c) + "' at byte " +
                         std::to_string(start));
    }
    out.push_back({Tok::End, "", s.size()});
    return out;
}

class Parser {
public:
    explicit Parser(const std::string& text) : toks_(tokenize(text)) {}

    ModelSpec parse() {
        ModelSpec spec;
        spec.response = expect(Tok::Name, "response name").text;
        expect(Tok::Tilde, "'~'");
        parse_item(spec);
        while (peek().kind == Tok::Plus) {
            next();
            parse_item(spec);
        }
        if (peek().kind != Tok::End) fail("unexpected " + describe(peek()));
        std::set<std::string> labels;
        for (const auto& t : spec.random_terms) {
            if (!labels.insert(t.label).second)
                throw InputError("formula: duplicate random term label '" + t.label + "'");
        }
        return spec;
    }

private:
    const Token& peek() const { return toks_[pos_]; }
    const Token& next() { return toks_[pos_++]; }

    [[noreturn]] void fail(const std::string& msg) const {
        throw InputError("formula syntax error at byte " + std::to_string(peek().offset) + ": " + msg);
    }

    const Token& expect(Tok kind, const std::string& what) {
        if (peek().kind != kind) fail("expected " + what + ", found " + describe(peek()));
        return next();
    }

    void parse_item(ModelSpec& spec) {
        const Token& t = peek();
        if (t.kind == Tok::One) {
            next();
        } else if (t.kind == Tok::Name) {
            for (const auto& f : spec.fixed_terms)
                if (f == t.text) fail("duplicate fixed term '" + t.text + "'");
            spec.fixed_terms.push_back(next().text);
        } else if (t.kind == Tok::LParen) {
            next();
            spec.random_terms.push_back(parse_random());
        } else {
            fail("expected a term, found " + describe(t));
        }
    }

    RandomTerm parse_random() {
        RandomTerm term;
        if (peek().kind == Tok::Bar || peek().kind == Tok::DoubleBar) fail("empty random term");
        for (;;) {
            const Token& t = peek();
            if (t.kind == Tok::One || t.kind == Tok::Name) {
                for (const auto& c : term.design_columns)
                    if (c == t.text) fail("duplicate column '" + t.text + "' in random term");
                term.design_columns.push_back(next().text);
            } else {
                fail("expected '1' or a column name, found " + describe(t));
            }
            if (peek().kind != Tok::Plus) break;
            next();
        }
        bool diagonal = false;
        if (peek().kind == Tok::DoubleBar) {
            diagonal = true;
            next();
        } else {
            expect(Tok::Bar, "'|' or '||'");
        }
        std::size_t group_offset = peek().offset;
        term.group = expect(Tok::Name, "grouping factor").text;
        term.label = term.group;
        term.cov_kind = (!diagonal && term.design_columns.size() >= 2) ? CovKind::Correlated
                                                                       : CovKind::Diagonal;
        if (peek().kind == Tok::Colon) {
            next();
            if (term.group != kUnitGroup)
                throw InputError("formula syntax error at byte " + std::to_string(group_offset) +
                                 ": structured terms require the 'unit' group");
            const Token& kind = expect(Tok::Name, "structure kind (iid, car, gp)");
            if (kind.text == "iid") {
                term.label = "unit:iid";
            } else if (kind.text == "car") {
                term.cov_kind = CovKind::Car;
                term.label = "unit:car";
            } else if (kind.text == "gp") {
                expect(Tok::LParen, "'(' after gp");
                term.gp_input = expect(Tok::Name, "gp input variable").text;
                expect(Tok::RParen, "')'");
                term.cov_kind = CovKind::GpSe;
                term.label = "unit:gp(" + term.gp_input + ")";
            } else {
                throw InputError("formula: unknown token '" + kind.text + "' at byte " +
                                 std::to_string(kind.offset));
            }
            if ((term.cov_kind == CovKind::Car || term.cov_kind == CovKind::GpSe) &&
                !(term.design_columns.size() == 1 && term.design_columns[0] == kIntercept)) {
                throw InputError("formula: term '" + term.label +
                                 "' takes exactly one implicit intercept column");
            }
        }
        expect(Tok::RParen, "')'");
        return term;
    }

    std::vector<Token> toks_;
    std::size_t pos_ = 0;
};

}  // namespace

ModelSpec parse_formula(const std::string& text) { return Parser(text).parse(); }

std::string render_formula(const ModelSpec& spec) {
    std::string out = spec.response + " ~ 1";
    for (const auto& f : spec.fixed_terms) out += " + " + f;
    for (const auto& t : spec.random_terms) {
        out += " + (";
        for (std::size_t c = 0; c < t.design_columns.size(); ++c)
            out += (c ? " + " : "") + t.design_columns[c];
        bool double_bar = t.cov_kind == CovKind::Diagonal && t.design_columns.size() >= 2;
        out += double_bar ? " || " : " | ";
        out += t.label;
        out += ")";
    }
    return out;
}

std::string TermSelector::text() const {
    return column ? label + "[" + *column + "]" : label;
}

TermSelector parse_selector(const std::string& text) {
    TermSelector sel;
    auto open = text.find('[');
    if (open == std::string::npos) {
        sel.label = text;
    } else {
        if (text.back() != ']' || open == 0)
            throw InputError("malformed term selector '" + text + "'");
        sel.label = text.substr(0, open);
        sel.column = text.substr(open + 1, text.size() - open - 2);
        if (sel.column->empty()) throw InputError("malformed term selector '" + text + "'");
    }
    if (sel.label.empty()) throw InputError("empty term selector");
    return sel;
}

}  // namespace ebfkit
