#include "ebfkit/dataset.hpp"

#include "ebfkit/errors.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <unordered_map>

namespace ebfkit {

Categorical make_categorical(const std::vector<std::string>& values) {
    Categorical out;
    out.codes.reserve(values.size());
    std::unordered_map<std::string, int> index;
    for (const auto& v : values) {
        auto [it, inserted] = index.emplace(v, static_cast<int>(out.levels.size()));
        if (inserted) out.levels.push_back(v);
        out.codes.push_back(it->second);
    }
    return out;
}

void Dataset::check_length(const std::string& name, std::size_t n) {
    if (n == 0) throw InputError("column '" + name + "' is empty");
    if (columns_.empty()) {
        n_rows_ = n;
    } else if (n != n_rows_) {
        throw InputError("column '" + name + "' has " + std::to_string(n) + " rows, expected " +
                         std::to_string(n_rows_));
    }
    if (columns_.count(name)) throw InputError("duplicate column '" + name + "'");
}

void Dataset::add_numeric(const std::string& name, std::vector<double> values) {
    check_length(name, values.size());
    columns_.emplace(name, std::move(values));
    order_.push_back(name);
}

void Dataset::add_categorical(const std::string& name, const std::vector<std::string>& values) {
    add_categorical(name, make_categorical(values));
}

void Dataset::add_categorical(const std::string& name, Categorical column) {
    check_length(name, column.codes.size());
    for (int c : column.codes) {
        if (c < 0 || c >= static_cast<int>(column.levels.size()))
            throw InputError("column '" + name + "' has an out-of-range level code");
    }
    columns_.emplace(name, std::move(column));
    order_.push_back(name);
}

bool Dataset::is_numeric(const std::string& name) const {
    auto it = columns_.find(name);
    return it != columns_.end() && std::holds_alternative<std::vector<double>>(it->second);
}

bool Dataset::is_categorical(const std::string& name) const {
    auto it = columns_.find(name);
    return it != columns_.end() && std::holds_alternative<Categorical>(it->second);
}

const std::vector<double>& Dataset::numeric(const std::string& name) const {
    auto it = columns_.find(name);
    if (it == columns_.end()) throw InputError("unknown column '" + name + "'");
    if (auto* v = std::get_if<std::vector<double>>(&it->second)) return *v;
    throw InputError("column '" + name + "' is categorical, expected numeric");
}

const Categorical& Dataset::categorical(const std::string& name) const {
    auto it = columns_.find(name);
    if (it == columns_.end()) throw InputError("unknown column '" + name + "'");
    if (auto* v = std::get_if<Categorical>(&it->second)) return *v;
    throw InputError("column '" + name + "' is numeric, expected categorical");
}

std::vector<std::string> Dataset::column_names() const { return order_; }

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    for (const auto& name : order_) {
        const auto& col = columns_.at(name);
        if (auto* v = std::get_if<std::vector<double>>(&col)) {
            std::vector<double> sub;
            sub.reserve(rows.size());
            for (auto r : rows) sub.push_back(v->at(r));
            out.add_numeric(name, std::move(sub));
        } else {
            const auto& c = std::get<Categorical>(col);
            std::vector<std::string> sub;
            sub.reserve(rows.size());
            for (auto r : rows) sub.push_back(c.levels[c.codes.at(r)]);
            out.add_categorical(name, sub);
        }
    }
    return out;
}

namespace {

std::vector<std::string> split_record(const std::string& line, std::size_t line_no) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            cells.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (quoted) throw InputError("unterminated quote on line " + std::to_string(line_no));
    cells.push_back(std::move(cur));
    return cells;
}

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (*first == '+') ++first;
    auto res = std::from_chars(first, last, out);
    return res.ec == std::errc() && res.ptr == last;
}

}  // namespace

Dataset read_csv(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++line_no;
        if (!trim(line).empty()) {
            for (auto& h : split_record(line, line_no)) header.push_back(trim(h));
            break;
        }
    }
    if (header.empty()) throw InputError("CSV input has no header row");

    std::vector<std::vector<std::string>> cells(header.size());
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto rec = split_record(line, line_no);
        if (rec.size() != header.size()) {
            throw InputError("line " + std::to_string(line_no) + " has " + std::to_string(rec.size()) +
                             " fields, expected " + std::to_string(header.size()));
        }
        for (std::size_t c = 0; c < rec.size(); ++c) {
            auto v = trim(rec[c]);
            if (v.empty() || v == "NA") {
                throw InputError("missing value in column '" + header[c] + "' on line " +
                                 std::to_string(line_no));
            }
            cells[c].push_back(std::move(v));
        }
    }
    if (cells.front().empty()) throw InputError("CSV input has no data rows");

    Dataset data;
    for (std::size_t c = 0; c < header.size(); ++c) {
        std::vector<double> nums;
        nums.reserve(cells[c].size());
        bool numeric = true;
        for (const auto& s : cells[c]) {
            double v = 0.0;
            if (!parse_double(s, v)) {
                numeric = false;
                break;
            }
            nums.push_back(v);
        }
        if (numeric) {
            data.add_numeric(header[c], std::move(nums));
        } else {
            data.add_categorical(header[c], cells[c]);
        }
    }
    return data;
}

Dataset read_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open data file '" + path + "'");
    return read_csv(in);
}

void write_csv(std::ostream& out, const Dataset& data) {
    auto names = data.column_names();
    for (std::size_t c = 0; c < names.size(); ++c) out << (c ? "," : "") << names[c];
    out << '\n';
    std::ostringstream buf;
    buf.precision(std::numeric_limits<double>::max_digits10);
    for (std::size_t r = 0; r < data.n_rows(); ++r) {
        for (std::size_t c = 0; c < names.size(); ++c) {
            if (c) out << ',';
            if (data.is_numeric(names[c])) {
                buf.str("");
                buf << data.numeric(names[c])[r];
                out << buf.str();
            } else {
                const auto& cat = data.categorical(names[c]);
                out << cat.levels[cat.codes[r]];
            }
        }
        out << '\n';
    }
}

}  // namespace ebfkit
