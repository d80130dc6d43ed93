#pragma once

#include "crmt/errors.hpp"

#include <charconv>
#include <string>
#include <string_view>
#include <vector>

namespace crmt {

// Shortest decimal that round-trips the exact double. All CSV/JSON output
// uses this so reruns are byte-identical and reloads are bit-exact.
inline std::string fmt_double(double v) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ParseError(where + ": bad number '" + std::string(s) + "'");
    return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

} // namespace crmt
