#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace unilong {

// Bad inputs, bad configs, violated preconditions. The CLI maps this
// to exit code 2; everything else that escapes maps to 3.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

} // namespace unilong
