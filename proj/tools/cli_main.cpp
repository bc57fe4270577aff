#include <iostream>

#include <CLI11.hpp>

#include "cli.hpp"
#include "reviewrec/eval.hpp"

namespace reviewrec::cli {

int main_entry(int argc, char** argv) {
    CLI::App app{"Review-driven LLM recommendation pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_dir, task, protocol, strategy, steps, generator, candidates, k_list;
    int workers = 0, n = 0;
    bool dry_run = false;
    app.add_option("-c,--config", config_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    app.add_option("-o,--out", out_dir, "Run directory (overrides out_dir)");
    app.add_option("-j,--workers", workers, "Worker threads (overrides workers)")->check(CLI::PositiveNumber);
    app.add_flag("--dry-run", dry_run, "Validate and print the plan; write nothing");
    app.fallthrough();

    app.add_subcommand("ingest", "Read and validate the review corpus");
    app.add_subcommand("split", "Chronological or balanced top-k split")
        ->add_option("--protocol", protocol, "temporal | balanced_topk")
        ->check(CLI::IsMember({"temporal", "balanced_topk"}));
    app.add_subcommand("extract", "Like/Dislike extraction for every train review");
    app.add_subcommand("profile", "User and item profiles")
        ->add_option("--strategy", strategy, "all | helpful:N | neighbor:K");
    app.add_subcommand("distill-export", "Teacher-annotated SFT dataset")
        ->add_option("--steps", steps, "Comma list of pe, pc, rp");
    app.add_subcommand("predict", "Rating prediction on the test split (plus MF baseline)");
    auto* rerank = app.add_subcommand("rerank", "Candidate generation and reranking");
    rerank->add_option("--generator", generator, "bpr | external")->check(CLI::IsMember({"bpr", "external"}));
    rerank->add_option("--candidates", candidates, "Candidate JSONL for the external generator");
    rerank->add_option("--n", n, "Candidates per user")->check(CLI::PositiveNumber);
    auto* evaluate = app.add_subcommand("evaluate", "Metrics for predictions or ranked lists");
    evaluate->add_option("--task", task, "rating | topk")->required()->check(CLI::IsMember({"rating", "topk"}));
    evaluate->add_option("--k", k_list, "Cutoffs, e.g. 5,10,15,20");
    app.add_subcommand("report", "Summarize evaluation output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kInvalid;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        Overrides overrides;
        if (!out_dir.empty()) overrides.emplace_back("/out_dir", fs::absolute(out_dir).string());
        if (workers > 0) overrides.emplace_back("/workers", workers);
        if (!protocol.empty()) overrides.emplace_back("/split/protocol", protocol);
        if (!strategy.empty()) overrides.emplace_back("/selection", strategy);
        if (!steps.empty()) overrides.emplace_back("/distill/steps", steps);
        if (!generator.empty()) overrides.emplace_back("/generator/kind", generator);
        if (!candidates.empty()) overrides.emplace_back("/generator/candidates", fs::absolute(candidates).string());
        if (n > 0) overrides.emplace_back("/generator/n", n);
        if (!k_list.empty()) overrides.emplace_back("/evaluate/k", parse_k_list(k_list));

        auto config = load_config(config_path, overrides);
        StageOptions options;
        options.dry_run = dry_run;
        options.task = task;
        return run_stage(command, config, options, std::cout);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    } catch (const RefusalError& e) {
        std::cerr << "refused: " << e.what() << "\n";
        return kInvalid;
    } catch (const eval::ProtocolError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << "\n";
        return kPartial;
    }
}

}  // namespace reviewrec::cli
