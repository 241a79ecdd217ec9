#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace ebfkit {

// A categorical column: dense level codes plus the level names, ordered by
// first appearance in the data.
struct Categorical {
    std::vector<int> codes;
    std::vector<std::string> levels;
};

using Column = std::variant<std::vector<double>, Categorical>;

class Dataset {
public:
    Dataset() = default;

    void add_numeric(const std::string& name, std::vector<double> values);
    void add_categorical(const std::string& name, const std::vector<std::string>& values);
    void add_categorical(const std::string& name, Categorical column);

    std::size_t n_rows() const { return n_rows_; }
    bool has(const std::string& name) const { return columns_.count(name) > 0; }
    bool is_numeric(const std::string& name) const;
    bool is_categorical(const std::string& name) const;

    const std::vector<double>& numeric(const std::string& name) const;
    const Categorical& categorical(const std::string& name) const;

    std::vector<std::string> column_names() const;  // in insertion order

    // Rows in the given order; categorical levels are re-derived by first
    // appearance in the subset.
    Dataset subset(const std::vector<std::size_t>& rows) const;

private:
    void check_length(const std::string& name, std::size_t n);

    std::map<std::string, Column> columns_;
    std::vector<std::string> order_;
    std::size_t n_rows_ = 0;
};

Categorical make_categorical(const std::vector<std::string>& values);

// Header row mandatory, comma delimiter. A column is numeric when every cell
// parses as a float, otherwise categorical. Empty cells are rejected.
Dataset read_csv(std::istream& in);
Dataset read_csv_file(const std::string& path);

void write_csv(std::ostream& out, const Dataset& data);

}  // namespace ebfkit
