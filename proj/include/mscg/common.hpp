#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mscg {

// Violated precondition on an operation (shape mismatch, bad argument).
struct contract_violation : std::runtime_error {
    explicit contract_violation(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value detected where the contract requires finite output.
struct numeric_fault : std::runtime_error {
    explicit numeric_fault(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable/inconsistent input data; message names the offending path.
struct data_error : std::runtime_error {
    explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline Shape row_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 2; i >= 0; --i) {
        strides[static_cast<std::size_t>(i)] =
            strides[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
    }
    return strides;
}

// Additive floor applied inside every log argument.
inline constexpr double kLogFloor = 1e-12;
// Small constant used by the SCG/ACW epsilon terms.
inline constexpr double kEps = 1e-5;

} // namespace mscg
