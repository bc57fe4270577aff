// OpenMP kernels against their serial references.
#include <benchmark/benchmark.h>

#include <numeric>
#include <random>

#include "reviewrec/cf.hpp"
#include "reviewrec/eval.hpp"
#include "reviewrec/similarity.hpp"

using namespace reviewrec;

namespace {

std::vector<corpus::Review> random_reviews(int users, int items, double density, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution keep(density);
    std::uniform_int_distribution<int> rating(1, 10);
    std::vector<corpus::Review> out;
    for (int u = 0; u < users; ++u)
        for (int i = 0; i < items; ++i)
            if (keep(rng)) {
                corpus::Review r;
                r.id = std::to_string(out.size());
                r.user_id = "u" + std::to_string(u);
                r.item_id = "i" + std::to_string(i);
                r.rating = rating(rng);
                out.push_back(std::move(r));
            }
    return out;
}

struct SimilarityFixture {
    similarity::RatingMatrix matrix;
    similarity::CenteredMatrix centered;
    std::vector<std::uint32_t> candidates;
    std::vector<double> out;

    explicit SimilarityFixture(int users) {
        matrix = similarity::RatingMatrix::from_reviews(random_reviews(users, 2000, 0.02, 1));
        centered = similarity::mean_center(matrix);
        candidates.resize(matrix.users.size());
        std::iota(candidates.begin(), candidates.end(), 0u);
        out.resize(candidates.size());
    }
};

template <bool Parallel>
void BM_ScoreCandidates(benchmark::State& state) {
    static SimilarityFixture f(static_cast<int>(state.range(0)));
    for (auto _ : state) {
        if constexpr (Parallel) {
            similarity::score_candidates(f.centered, f.centered.rows[0], f.candidates, f.out);
        } else {
            similarity::score_candidates_serial(f.centered, f.centered.rows[0], f.candidates, f.out);
        }
        benchmark::DoNotOptimize(f.out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.candidates.size()));
}
BENCHMARK(BM_ScoreCandidates<false>)->Arg(20000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ScoreCandidates<true>)->Arg(20000)->Unit(benchmark::kMillisecond)->UseRealTime();

struct BprFixture {
    cf::BprModel model;
    std::vector<cf::Interaction> train;
    std::vector<std::string> users;

    BprFixture() {
        for (const auto& r : random_reviews(2000, 3000, 0.005, 2)) train.push_back({r.user_id, r.item_id});
        cf::TrainConfig cfg;
        cfg.dimension = 32;
        cfg.epochs = 2;
        model = cf::train_bpr(train, cfg);
        users = model.users.ids;
    }
};

template <bool Parallel>
void BM_GenerateCandidates(benchmark::State& state) {
    static BprFixture f;
    static cf::SeenItems seen(f.train);
    for (auto _ : state) {
        auto lists = Parallel ? cf::generate_candidates_batch(f.model, f.users, 20, seen)
                              : cf::generate_candidates_batch_serial(f.model, f.users, 20, seen);
        benchmark::DoNotOptimize(lists.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.users.size()));
}
BENCHMARK(BM_GenerateCandidates<false>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GenerateCandidates<true>)->Unit(benchmark::kMillisecond)->UseRealTime();

struct TopkFixture {
    eval::RankedLists lists;
    std::map<std::string, std::set<std::string>> relevant;

    TopkFixture() {
        std::mt19937_64 rng(3);
        std::uniform_int_distribution<int> item(0, 4999);
        for (int u = 0; u < 50000; ++u) {
            const auto user = "u" + std::to_string(u);
            for (int k = 0; k < 5; ++k) relevant[user].insert("i" + std::to_string(item(rng)));
            for (int k = 0; k < 20; ++k) lists[user].push_back("i" + std::to_string(item(rng)));
        }
    }
};

template <bool Parallel>
void BM_TopkUserMetrics(benchmark::State& state) {
    static TopkFixture f;
    const std::vector<int> ks{5, 10, 15, 20};
    for (auto _ : state) {
        auto rows = Parallel ? eval::topk_user_metrics(f.lists, f.relevant, ks)
                             : eval::topk_user_metrics_serial(f.lists, f.relevant, ks);
        benchmark::DoNotOptimize(rows.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.relevant.size()));
}
BENCHMARK(BM_TopkUserMetrics<false>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TopkUserMetrics<true>)->Unit(benchmark::kMillisecond)->UseRealTime();

}  // namespace

BENCHMARK_MAIN();
