// Writes the synthetic demo corpus: make_synthetic <dir> [users items per_user seed]
#include <cstdlib>
#include <iostream>

#include "synthetic.hpp"

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: make_synthetic <dir> [users items per_user seed]\n";
        return 2;
    }
    int users = argc > 2 ? std::atoi(argv[2]) : 50;
    int items = argc > 3 ? std::atoi(argv[3]) : 40;
    int per_user = argc > 4 ? std::atoi(argv[4]) : 12;
    auto seed = argc > 5 ? std::strtoull(argv[5], nullptr, 10) : 2024ULL;
    reviewrec::testing::write_corpus(argv[1], reviewrec::testing::make_review_corpus(users, items, per_user, seed));
    return 0;
}
