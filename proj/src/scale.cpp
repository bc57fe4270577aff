#include "reviewrec/scale.hpp"

#include "reviewrec/error.hpp"

namespace reviewrec {

RatingScale RatingScale::with_default_offset(int min, int max) {
    RatingScale s;
    s.min = min;
    s.max = max;
    s.token_offset = (min == 1 && max == 10) ? -1 : 0;
    return s;
}

void RatingScale::validate() const {
    if (min >= max) {
        throw ConfigError("rating scale requires min < max (got " + std::to_string(min) + ".." +
                          std::to_string(max) + ")");
    }
    if (digit_min() < 0 || digit_max() > 9) {
        throw ConfigError("rating scale " + std::to_string(min) + ".." + std::to_string(max) +
                          " with token offset " + std::to_string(token_offset) +
                          " does not map onto single digits 0..9");
    }
}

std::vector<int> RatingScale::ratings() const {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(size()));
    for (int r = min; r <= max; ++r) out.push_back(r);
    return out;
}

}  // namespace reviewrec
