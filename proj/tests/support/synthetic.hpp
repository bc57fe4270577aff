#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "reviewrec/corpus.hpp"

namespace reviewrec::testing {

struct SyntheticCorpus {
    std::vector<corpus::Review> reviews;
    std::vector<corpus::ItemMeta> items;
};

/// Review corpus with latent taste groups on a 1..10 scale. Users rate items of
/// their own group high (9-10 common) and others low; texts are templated from
/// per-genre aspects. A few reviews have empty text.
SyntheticCorpus make_review_corpus(int users = 50, int items = 40, int per_user = 12, std::uint64_t seed = 2024);

/// Writes reviews.jsonl and items.jsonl into `dir`.
void write_corpus(const std::filesystem::path& dir, const SyntheticCorpus& corpus);

}  // namespace reviewrec::testing
