#pragma once

#include <string>
#include <vector>

namespace reviewrec {

/// Integer rating scale and its mapping onto the single digit tokens the
/// predictor emits: rating r is written as digit (r + token_offset).
struct RatingScale {
    int min = 1;
    int max = 5;
    int token_offset = 0;

    /// -1 for 1..10 scales (digits 0..9), 0 otherwise.
    static RatingScale with_default_offset(int min, int max);

    void validate() const;  // throws ConfigError
    bool contains(int rating) const noexcept { return rating >= min && rating <= max; }
    int size() const noexcept { return max - min + 1; }

    int to_digit(int rating) const noexcept { return rating + token_offset; }
    int from_digit(int digit) const noexcept { return digit - token_offset; }
    int digit_min() const noexcept { return to_digit(min); }
    int digit_max() const noexcept { return to_digit(max); }
    bool digit_in_range(int digit) const noexcept {
        return digit >= digit_min() && digit <= digit_max();
    }

    std::vector<int> ratings() const;

    bool operator==(const RatingScale&) const = default;
};

}  // namespace reviewrec
