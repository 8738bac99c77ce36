#pragma once

// Minimal CSV support: comma separated, header row required, double quotes
// for fields containing commas/quotes/newlines. Missing values are errors.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "error.hpp"

namespace camm::csv {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (header[c] == name) return c;
        throw InputError("missing column '" + name + "'");
    }

    bool has(const std::string& name) const {
        for (const auto& h : header)
            if (h == name) return true;
        return false;
    }

    std::vector<std::string> text(const std::string& name) const {
        const auto c = column(name);
        std::vector<std::string> out;
        out.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r][c].empty())
                throw InputError("empty value in column '" + name + "' at data row " + std::to_string(r + 1));
            out.push_back(rows[r][c]);
        }
        return out;
    }

    std::vector<double> numeric(const std::string& name) const {
        const auto c = column(name);
        std::vector<double> out;
        out.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const std::string& s = rows[r][c];
            double v = 0.0;
            const char* first = s.data();
            const char* last = s.data() + s.size();
            while (first < last && *first == ' ') ++first;
            while (last > first && last[-1] == ' ') --last;
            if (first < last && *first == '+') ++first;
            auto [ptr, ec] = std::from_chars(first, last, v);
            if (ec != std::errc() || ptr != last || !std::isfinite(v))
                throw InputError("column '" + name + "', data row " + std::to_string(r + 1) + ": '" + s +
                                 "' is not a finite number");
            out.push_back(v);
        }
        return out;
    }
};

namespace detail {

// Reads one record; returns false at end of input.
inline bool read_record(std::istream& is, std::vector<std::string>& out, std::size_t line) {
    out.clear();
    std::string field;
    bool quoted = false, any = false, was_quoted = false;
    int ch;
    while ((ch = is.get()) != EOF) {
        any = true;
        const char c = static_cast<char>(ch);
        if (quoted) {
            if (c == '"') {
                if (is.peek() == '"') {
                    field.push_back('"');
                    is.get();
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        if (c == '"') {
            if (!field.empty()) throw InputError("stray quote on line " + std::to_string(line));
            quoted = was_quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
            was_quoted = false;
        } else if (c == '\n') {
            break;
        } else if (c == '\r') {
            if (is.peek() == '\n') is.get();
            break;
        } else {
            if (was_quoted) throw InputError("text after closing quote on line " + std::to_string(line));
            field.push_back(c);
        }
    }
    if (quoted) throw InputError("unterminated quote on line " + std::to_string(line));
    if (!any) return false;
    out.push_back(std::move(field));
    return true;
}

}  // namespace detail

inline Table read(std::istream& is) {
    Table t;
    std::vector<std::string> rec;
    std::size_t line = 1;
    if (!detail::read_record(is, t.header, line)) throw InputError("CSV input is empty (header row required)");
    if (!t.header.empty() && t.header[0].rfind("\xEF\xBB\xBF", 0) == 0) t.header[0].erase(0, 3);
    for (std::size_t i = 0; i < t.header.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (t.header[i] == t.header[j]) throw InputError("duplicate column '" + t.header[i] + "'");
    while (detail::read_record(is, rec, ++line)) {
        if (rec.size() == 1 && rec[0].empty()) continue;  // blank line
        if (rec.size() != t.header.size())
            throw InputError("line " + std::to_string(line) + " has " + std::to_string(rec.size()) +
                             " fields, header has " + std::to_string(t.header.size()));
        t.rows.push_back(rec);
    }
    return t;
}

inline Table read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    return read(in);
}

inline std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

/// Shortest representation that round-trips; "nan"/"inf" for non-finite.
inline std::string number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

/// Write via a temporary file in the same directory, then rename.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot write '" + tmp.string() + "'");
        out << content;
        out.flush();
        if (!out) throw InputError("failed writing '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw InputError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

}  // namespace camm::csv
