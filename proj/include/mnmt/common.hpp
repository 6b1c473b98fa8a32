#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mnmt {

// Scalar used by the model stack. The tensor core itself is templated; the
// verification paths require double, so the whole pipeline runs in double.
using Real = double;

// Logical tensor shape. Storage is a 2-d row-major matrix whose column count
// equals the last dimension.
using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

[[noreturn]] inline void throw_shape_mismatch(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace mnmt
