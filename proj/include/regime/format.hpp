#pragma once

#include <string>

namespace regime {

/// Shortest decimal text that round-trips to the same double; "nan", "inf", "-inf" otherwise.
std::string format_double(double v);

}  // namespace regime
