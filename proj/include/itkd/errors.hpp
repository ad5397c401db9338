#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace itkd {

// Base error for all failures surfaced by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension violations in tensor primitives and network wiring.
struct ShapeError : Error {
    using Error::Error;
};

// Malformed or unreadable files (datasets, checkpoints).
struct IoError : Error {
    using Error::Error;
};

// Invalid run configuration.
struct ConfigError : Error {
    using Error::Error;
};

namespace detail {
inline void msg_cat(std::ostringstream&) {}

template <class T, class... Rest>
void msg_cat(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    msg_cat(os, rest...);
}
}  // namespace detail

template <class... Parts>
std::string msg(const Parts&... parts) {
    std::ostringstream os;
    detail::msg_cat(os, parts...);
    return os.str();
}

}  // namespace itkd
