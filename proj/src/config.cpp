#include "spf/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace spf::config {

const Value* Table::find(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : it->second.get();
}

Value& Table::insert(const std::string& key, Value value, int line) {
    if (entries_.count(key)) throw ConfigError("duplicate key", line, key);
    auto ptr = std::make_shared<Value>(std::move(value));
    ptr->line = line;
    entries_[key] = ptr;
    return *ptr;
}

Table& Table::subtable(const std::string& key, int line) {
    auto it = entries_.find(key);
    if (it == entries_.end()) {
        auto ptr = std::make_shared<Value>(Value{Table{}, line});
        entries_[key] = ptr;
        return std::get<Table>(ptr->data);
    }
    if (!it->second->is_table()) throw ConfigError("key redefined as table", line, key);
    return std::get<Table>(it->second->data);
}

namespace {

class Parser {
public:
    explicit Parser(const std::string& text) : text_(text) {}

    Table run() {
        Table root;
        Table* current = &root;
        while (true) {
            skip_space_and_comments(true);
            if (at_end()) break;
            if (peek() == '[') {
                ++pos_;
                current = &root;
                std::string full;
                while (true) {
                    skip_inline_space();
                    std::string key = parse_key();
                    full += full.empty() ? key : "." + key;
                    current = &current->subtable(key, line_);
                    skip_inline_space();
                    if (peek() == '.') {
                        ++pos_;
                        continue;
                    }
                    if (peek() != ']') fail("expected ']' after table header");
                    ++pos_;
                    break;
                }
                expect_line_end();
                continue;
            }
            std::string key = parse_key();
            const int key_line = line_;
            skip_inline_space();
            if (peek() == '.') fail("dotted keys are not supported", key);
            if (peek() != '=') fail("expected '=' after key", key);
            ++pos_;
            skip_inline_space();
            Value value = parse_value(key);
            current->insert(key, std::move(value), key_line);
            expect_line_end();
        }
        return root;
    }

private:
    bool at_end() const { return pos_ >= text_.size(); }
    char peek() const { return at_end() ? '\0' : text_[pos_]; }

    [[noreturn]] void fail(const std::string& message, const std::string& field = {}) const {
        throw ConfigError(message, line_, field);
    }

    void skip_inline_space() {
        while (!at_end() && (peek() == ' ' || peek() == '\t' || peek() == '\r')) ++pos_;
    }

    void skip_comment() {
        if (peek() == '#')
            while (!at_end() && peek() != '\n') ++pos_;
    }

    void skip_space_and_comments(bool newlines) {
        while (!at_end()) {
            skip_inline_space();
            skip_comment();
            if (newlines && peek() == '\n') {
                ++pos_;
                ++line_;
                continue;
            }
            break;
        }
    }

    void expect_line_end() {
        skip_inline_space();
        skip_comment();
        if (at_end()) return;
        if (peek() != '\n') fail("unexpected trailing characters");
        ++pos_;
        ++line_;
    }

    std::string parse_key() {
        const std::size_t start = pos_;
        while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-'))
            ++pos_;
        if (pos_ == start) fail("expected a bare key");
        return text_.substr(start, pos_ - start);
    }

    Value parse_value(const std::string& field) {
        const char c = peek();
        if (c == '"') return Value{parse_string(field), line_};
        if (c == '[') return parse_array(field);
        if (c == '{') fail("inline tables are not supported", field);
        if (text_.compare(pos_, 4, "true") == 0) {
            pos_ += 4;
            return Value{true, line_};
        }
        if (text_.compare(pos_, 5, "false") == 0) {
            pos_ += 5;
            return Value{false, line_};
        }
        return parse_number(field);
    }

    std::string parse_string(const std::string& field) {
        ++pos_;
        std::string out;
        while (true) {
            if (at_end() || peek() == '\n') fail("unterminated string", field);
            char c = text_[pos_++];
            if (c == '"') break;
            if (c == '\\') {
                if (at_end()) fail("unterminated escape", field);
                char e = text_[pos_++];
                switch (e) {
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    default: fail(std::string("unsupported escape \\") + e, field);
                }
                continue;
            }
            out += c;
        }
        return out;
    }

    Value parse_array(const std::string& field) {
        const int start_line = line_;
        ++pos_;
        Array items;
        while (true) {
            skip_space_and_comments(true);
            if (at_end()) throw ConfigError("unterminated array opened here", start_line, field);
            if (peek() == ']') {
                ++pos_;
                break;
            }
            items.push_back(parse_value(field));
            skip_space_and_comments(true);
            if (peek() == ',') {
                ++pos_;
                continue;
            }
            if (peek() == ']') {
                ++pos_;
                break;
            }
            fail("expected ',' or ']' in array", field);
        }
        return Value{std::move(items), start_line};
    }

    Value parse_number(const std::string& field) {
        const std::size_t start = pos_;
        while (!at_end()) {
            const char c = peek();
            if (std::isdigit(static_cast<unsigned char>(c)) || c == '+' || c == '-' || c == '.' || c == 'e' ||
                c == 'E' || c == '_')
                ++pos_;
            else
                break;
        }
        std::string token = text_.substr(start, pos_ - start);
        if (token.empty()) fail("expected a value", field);
        std::string cleaned;
        for (char c : token)
            if (c != '_') cleaned += c;
        if (cleaned.front() == '+') cleaned.erase(0, 1);
        const bool is_float = cleaned.find_first_of(".eE") != std::string::npos;
        const char* first = cleaned.data();
        const char* last = cleaned.data() + cleaned.size();
        if (is_float) {
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(first, last, v);
            if (ec != std::errc() || ptr != last) fail("malformed number '" + token + "'", field);
            return Value{v, line_};
        }
        std::int64_t v = 0;
        auto [ptr, ec] = std::from_chars(first, last, v);
        if (ec != std::errc() || ptr != last) fail("malformed integer '" + token + "'", field);
        return Value{v, line_};
    }

    const std::string& text_;
    std::size_t pos_ = 0;
    int line_ = 1;
};

double as_number(const Value& v, const std::string& path) {
    if (auto p = std::get_if<double>(&v.data)) return *p;
    if (auto p = std::get_if<std::int64_t>(&v.data)) return static_cast<double>(*p);
    throw ConfigError("expected a number", v.line, path);
}

}  // namespace

Table parse(const std::string& text) { return Parser(text).run(); }

Table parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
}

const Value* lookup(const Table& root, const std::string& path) {
    const Table* table = &root;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        const Value* v = table->find(key);
        if (!v) return nullptr;
        if (dot == std::string::npos) return v;
        if (!v->is_table()) return nullptr;
        table = &std::get<Table>(v->data);
        start = dot + 1;
    }
}

static const Value& require(const Table& root, const std::string& path) {
    const Value* v = lookup(root, path);
    if (!v) throw ConfigError("missing required key", 0, path);
    return *v;
}

double get_number(const Table& root, const std::string& path) { return as_number(require(root, path), path); }

double get_number(const Table& root, const std::string& path, double fallback) {
    const Value* v = lookup(root, path);
    return v ? as_number(*v, path) : fallback;
}

std::int64_t get_int(const Table& root, const std::string& path) {
    const Value& v = require(root, path);
    if (auto p = std::get_if<std::int64_t>(&v.data)) return *p;
    throw ConfigError("expected an integer", v.line, path);
}

std::int64_t get_int(const Table& root, const std::string& path, std::int64_t fallback) {
    return lookup(root, path) ? get_int(root, path) : fallback;
}

std::size_t get_count(const Table& root, const std::string& path, std::size_t fallback) {
    const Value* v = lookup(root, path);
    if (!v) return fallback;
    const std::int64_t n = get_int(root, path);
    if (n < 0) throw ConfigError("expected a non-negative integer", v->line, path);
    return static_cast<std::size_t>(n);
}

bool get_bool(const Table& root, const std::string& path, bool fallback) {
    const Value* v = lookup(root, path);
    if (!v) return fallback;
    if (auto p = std::get_if<bool>(&v->data)) return *p;
    throw ConfigError("expected a boolean", v->line, path);
}

std::string get_string(const Table& root, const std::string& path) {
    const Value& v = require(root, path);
    if (auto p = std::get_if<std::string>(&v.data)) return *p;
    throw ConfigError("expected a string", v.line, path);
}

std::string get_string(const Table& root, const std::string& path, const std::string& fallback) {
    return lookup(root, path) ? get_string(root, path) : fallback;
}

std::vector<double> get_numbers(const Table& root, const std::string& path) {
    const Value& v = require(root, path);
    const auto* arr = std::get_if<Array>(&v.data);
    if (!arr) throw ConfigError("expected an array of numbers", v.line, path);
    std::vector<double> out;
    out.reserve(arr->size());
    for (const Value& item : *arr) {
        if (const auto* nested = std::get_if<Array>(&item.data)) {
            for (const Value& inner : *nested) out.push_back(as_number(inner, path));
        } else {
            out.push_back(as_number(item, path));
        }
    }
    return out;
}

std::vector<std::int64_t> get_ints(const Table& root, const std::string& path) {
    const Value& v = require(root, path);
    const auto* arr = std::get_if<Array>(&v.data);
    if (!arr) throw ConfigError("expected an array of integers", v.line, path);
    std::vector<std::int64_t> out;
    for (const Value& item : *arr) {
        const auto* i = std::get_if<std::int64_t>(&item.data);
        if (!i) throw ConfigError("expected an integer element", item.line, path);
        out.push_back(*i);
    }
    return out;
}

const Table* get_table(const Table& root, const std::string& path) {
    const Value* v = lookup(root, path);
    if (!v) return nullptr;
    if (!v->is_table()) throw ConfigError("expected a table", v->line, path);
    return &std::get<Table>(v->data);
}

}  // namespace spf::config
