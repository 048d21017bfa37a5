#pragma once

// Reader for the TOML subset used by spf-lab configuration files.
//
// Supported grammar:
//   document  := { comment | blank | header | keyval }
//   header    := '[' key { '.' key } ']'
//   keyval    := key '=' value
//   key       := [A-Za-z0-9_-]+
//   value     := string | integer | float | boolean | array
//   string    := '"' { char | escape } '"'        escapes: \" \\ \n \t
//   array     := '[' [ value { ',' value } [ ',' ] ] ']'   (may span lines)
//   comment   := '#' ... end of line
// Inline tables, dotted keys, literal strings and dates are rejected.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace spf::config {

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& message, int line = 0, std::string field = {})
        : std::runtime_error(format(message, line, field)), line_(line), field_(std::move(field)) {}

    int line() const { return line_; }
    const std::string& field() const { return field_; }

private:
    static std::string format(const std::string& message, int line, const std::string& field) {
        std::string out;
        if (line > 0) out += "line " + std::to_string(line) + ": ";
        if (!field.empty()) out += "field '" + field + "': ";
        return out + message;
    }

    int line_;
    std::string field_;
};

struct Value;
using Array = std::vector<Value>;

class Table {
public:
    bool contains(const std::string& key) const { return entries_.count(key) != 0; }
    const Value* find(const std::string& key) const;
    Value& insert(const std::string& key, Value value, int line);
    Table& subtable(const std::string& key, int line);
    const std::map<std::string, std::shared_ptr<Value>>& entries() const { return entries_; }

private:
    std::map<std::string, std::shared_ptr<Value>> entries_;
};

struct Value {
    std::variant<bool, std::int64_t, double, std::string, Array, Table> data;
    int line = 0;

    bool is_number() const {
        return std::holds_alternative<std::int64_t>(data) || std::holds_alternative<double>(data);
    }
    bool is_table() const { return std::holds_alternative<Table>(data); }
};

Table parse(const std::string& text);
Table parse_file(const std::string& path);

/// Typed accessors. `path` is dotted ("mdp.gamma"); errors name the field and its line.
const Value* lookup(const Table& root, const std::string& path);
double get_number(const Table& root, const std::string& path);
double get_number(const Table& root, const std::string& path, double fallback);
std::int64_t get_int(const Table& root, const std::string& path);
std::int64_t get_int(const Table& root, const std::string& path, std::int64_t fallback);
/// Non-negative integer; negative values are a ConfigError.
std::size_t get_count(const Table& root, const std::string& path, std::size_t fallback);
bool get_bool(const Table& root, const std::string& path, bool fallback);
std::string get_string(const Table& root, const std::string& path);
std::string get_string(const Table& root, const std::string& path, const std::string& fallback);
std::vector<double> get_numbers(const Table& root, const std::string& path);
std::vector<std::int64_t> get_ints(const Table& root, const std::string& path);
const Table* get_table(const Table& root, const std::string& path);

}  // namespace spf::config
