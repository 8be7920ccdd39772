// Command-line driver for the synthetic audio-visual captioning pipeline:
// corpus generation, staged training, checkpoint evaluation and standalone
// caption judging.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "avcap/corpus.hpp"
#include "avcap/metrics.hpp"
#include "avcap/model.hpp"
#include "avcap/prefpipe.hpp"
#include "avcap/trainer.hpp"

namespace fs = std::filesystem;
using namespace avcap;

namespace {

int exit_code_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::config: return 2;
        case ErrorKind::data: return 3;
        case ErrorKind::invariant: return 4;
        default: return 1;
    }
}

void require_writable(const std::string& path, bool force) {
    if (fs::exists(path) && !force) {
        throw ConfigError("refusing to overwrite existing " + path + " (use --force)");
    }
}

struct GenCorpusArgs {
    CorpusParams params;
    std::string out;
    bool force = false;
};

void cmd_gen_corpus(const GenCorpusArgs& args) {
    require_writable(args.out, args.force);
    const EventVocab vocab = EventVocab::standard();
    const auto corpus = gen_corpus(args.params, vocab);
    write_corpus_jsonl(args.out, corpus);
    std::fprintf(stderr, "wrote %zu videos to %s\n", corpus.size(), args.out.c_str());
}

struct EvalArgs {
    std::string checkpoint;
    std::string corpus;
    std::string out;
    TrainConfig train;
    bool force = false;
};

void cmd_eval(const EvalArgs& args) {
    const fs::path out(args.out);
    require_writable((out / "report.json").string(), args.force);
    fs::create_directories(out);
    const ModelState model = load_checkpoint(args.checkpoint);
    const auto corpus = read_corpus_jsonl(args.corpus);
    Trainer trainer(EventVocab::standard(), args.train);
    const EvalSummary eval = trainer.evaluate(model, corpus);
    const std::map<std::string, double> extra = {{"qa_accuracy", eval.qa_accuracy},
                                                 {"unnatural_global", eval.unnatural_global}};
    {
        std::ofstream f(out / "report.json");
        f << eval_report_json(eval.rows, extra);
    }
    const std::string table = eval_report_table(eval.rows);
    {
        std::ofstream f(out / "report.txt");
        f << table;
    }
    std::cout << table;
    std::printf("qa_accuracy %.3f  unnatural %.3f\n", eval.qa_accuracy, eval.unnatural_global);
}

struct JudgeArgs {
    std::string captions;
    std::string corpus;
    std::string out;
    std::string endpoint;  // host:port for a remote judge
    int runs = 1;
    bool force = false;
};

void cmd_judge(const JudgeArgs& args) {
    require_writable(args.out, args.force);
    const auto corpus = read_corpus_jsonl(args.corpus);
    std::map<std::string, const SyntheticVideo*> by_id;
    for (const auto& v : corpus) by_id[v.id] = &v;

    const EventVocab vocab = EventVocab::standard();
    DeterministicJudge local(vocab);
    std::unique_ptr<HttpJudge> remote;
    if (!args.endpoint.empty()) {
        const auto colon = args.endpoint.rfind(':');
        if (colon == std::string::npos) throw ConfigError("judge endpoint must be host:port");
        remote = std::make_unique<HttpJudge>(args.endpoint.substr(0, colon),
                                             std::stoi(args.endpoint.substr(colon + 1)));
    }
    const CaptionJudge& judge = remote ? static_cast<const CaptionJudge&>(*remote)
                                       : static_cast<const CaptionJudge&>(local);

    std::ifstream in(args.captions);
    if (!in) throw DataError("cannot open captions file: " + args.captions);
    std::ofstream outf(args.out);
    if (!outf) throw DataError("cannot open output file: " + args.out);

    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(args.captions + ":" + std::to_string(lineno) + ": " + e.what());
        }
        const std::string video_id = j.at("video_id").get<std::string>();
        const auto it = by_id.find(video_id);
        if (it == by_id.end()) throw DataError("unknown video id: " + video_id);
        const TaskKind task = task_from_name(j.value("task", "global"));
        std::optional<Interval> interval;
        if (j.contains("interval")) {
            interval = Interval{j["interval"][0].get<double>(), j["interval"][1].get<double>()};
        }
        const std::string caption = j.at("caption").get<std::string>();
        const JudgeVerdict v = args.runs > 1
                                   ? judge_median(judge, caption, *it->second, task, interval,
                                                  args.runs)
                                   : judge.judge(caption, *it->second, task, interval);
        nlohmann::json rec = {{"video_id", video_id}, {"task", task_name(task)},
                              {"caption", caption},   {"miss", v.miss},
                              {"hall", v.hall},       {"total", v.total},
                              {"repetition", v.repetition}};
        if (interval.has_value()) rec["interval"] = {interval->t0, interval->t1};
        outf << rec.dump() << "\n";
    }
    std::fprintf(stderr, "verdicts written to %s\n", args.out.c_str());
}

void add_train_options(CLI::App* cmd, PipelineOptions& opts) {
    auto& t = opts.train;
    cmd->add_option("--train-corpus", opts.train_corpus_path, "training corpus (JSONL)");
    cmd->add_option("--eval-corpus", opts.eval_corpus_path, "held-out corpus (JSONL)");
    cmd->add_option("--out", opts.out_dir, "run directory");
    cmd->add_option("--stages", opts.stages,
                    "stages to run: pretrain,align,sft,mrdpo,rebirth,gdpo")
        ->delimiter(',');
    cmd->add_option("--resume", opts.resume_checkpoint, "checkpoint to resume from");
    cmd->add_option("--thresholds", opts.threshold_schedule_path,
                    "pair-selection threshold schedule (JSON)");
    cmd->add_flag("--force", opts.force, "redo stages even if checkpoints exist");

    cmd->add_option("--seed", t.seed, "root seed")->capture_default_str();
    cmd->add_option("--threads", t.threads, "worker threads for sampling/eval")
        ->capture_default_str();
    cmd->add_option("--pretrain-steps", t.pretrain_steps)->capture_default_str();
    cmd->add_option("--pretrain-lr", t.pretrain_lr)->capture_default_str();
    cmd->add_option("--pretrain-batch", t.pretrain_batch)->capture_default_str();
    cmd->add_option("--align-steps", t.align_steps)->capture_default_str();
    cmd->add_option("--align-lr", t.align_lr)->capture_default_str();
    cmd->add_option("--align-batch", t.align_batch)->capture_default_str();
    cmd->add_option("--sft-epochs", t.sft_epochs)->capture_default_str();
    cmd->add_option("--sft-lr", t.sft_lr)->capture_default_str();
    cmd->add_option("--sft-batch", t.sft_batch)->capture_default_str();
    cmd->add_option("--rounds", t.rounds, "preference rounds")->capture_default_str();
    cmd->add_option("--round-steps", t.round_steps)->capture_default_str();
    cmd->add_option("--round-lr", t.round_lr)->capture_default_str();
    cmd->add_option("--round-batch", t.round_batch)->capture_default_str();
    cmd->add_option("--beta", t.beta, "preference temperature")->capture_default_str();
    cmd->add_option("--lambda", t.lambda, "ground-truth regularizer weight")
        ->capture_default_str();
    cmd->add_option("--loss", [&t](const std::vector<std::string>& v) {
            t.round_loss = loss_from_name(v.front());
            return true;
        }, "round loss: dpo|gdpo|cdpo")->expected(1);
    cmd->add_option("--proxy", [&t](const std::vector<std::string>& v) {
            t.proxy = proxy_from_name(v.front());
            return true;
        }, "adapter mode: lora-proxy|direct")->expected(1);
    cmd->add_option("--pair-temperature", t.pair_temperature)->capture_default_str();
    cmd->add_option("--halt-unnatural", t.halt_unnatural_rate,
                    "stop rounds when the unnatural rate exceeds this")
        ->capture_default_str();
    cmd->add_option("--rebirth-epochs", t.rebirth_epochs)->capture_default_str();
    cmd->add_option("--rebirth-lr", t.rebirth_lr)->capture_default_str();
    cmd->add_option("--rebirth-batch", t.rebirth_batch)->capture_default_str();
    cmd->add_option("--eval-locals", t.eval_locals_per_video)->capture_default_str();
    cmd->add_option("--eval-qa", t.eval_qa_per_video)->capture_default_str();

    auto& m = opts.model;
    cmd->add_option("--model-dim", m.model_dim)->capture_default_str();
    cmd->add_option("--model-layers", m.n_layers)->capture_default_str();
    cmd->add_option("--model-heads", m.n_heads)->capture_default_str();
    cmd->add_option("--max-frames", m.max_frames)->capture_default_str();
    cmd->add_option("--frame-rate", m.frame_rate)->capture_default_str();
    cmd->add_option("--lora-rank", m.lora_rank)->capture_default_str();
    cmd->add_option("--lora-scale", m.lora_scale)->capture_default_str();
    cmd->add_option("--max-new-tokens", m.max_new_tokens)->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic audio-visual captioning pipeline"};
    app.require_subcommand(1);

    GenCorpusArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-corpus", "generate a synthetic video corpus");
    gen_cmd->add_option("--n", gen.params.n_videos, "number of videos")->required();
    gen_cmd->add_option("--seed", gen.params.seed, "corpus seed")->capture_default_str();
    gen_cmd->add_option("--out", gen.out, "output JSONL path")->required();
    gen_cmd->add_option("--duration-min", gen.params.duration_min)->capture_default_str();
    gen_cmd->add_option("--duration-max", gen.params.duration_max)->capture_default_str();
    gen_cmd->add_option("--events-min", gen.params.events_min)->capture_default_str();
    gen_cmd->add_option("--events-max", gen.params.events_max)->capture_default_str();
    gen_cmd->add_flag("--force", gen.force, "overwrite an existing file");

    PipelineOptions train_opts;
    auto* train_cmd = app.add_subcommand("train", "run the staged training pipeline");
    train_cmd->set_config("--config", "", "flat key=value config file");
    add_train_options(train_cmd, train_opts);

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required();
    eval_cmd->add_option("--corpus", eval_args.corpus)->required();
    eval_cmd->add_option("--out", eval_args.out, "report directory")->required();
    eval_cmd->add_option("--seed", eval_args.train.seed)->capture_default_str();
    eval_cmd->add_option("--threads", eval_args.train.threads)->capture_default_str();
    eval_cmd->add_option("--locals-per-video", eval_args.train.eval_locals_per_video)
        ->capture_default_str();
    eval_cmd->add_option("--qa-per-video", eval_args.train.eval_qa_per_video)
        ->capture_default_str();
    eval_cmd->add_flag("--force", eval_args.force);

    JudgeArgs judge_args;
    auto* judge_cmd = app.add_subcommand("judge", "judge a caption file against a corpus");
    judge_cmd->add_option("--captions", judge_args.captions, "JSONL of captions")->required();
    judge_cmd->add_option("--corpus", judge_args.corpus)->required();
    judge_cmd->add_option("--out", judge_args.out, "verdict JSONL path")->required();
    judge_cmd->add_option("--endpoint", judge_args.endpoint,
                          "host:port of a remote judge service (optional)");
    judge_cmd->add_option("--runs", judge_args.runs,
                          "judge runs per caption, median-aggregated")
        ->capture_default_str();
    judge_cmd->add_flag("--force", judge_args.force);

    auto* defaults_cmd =
        app.add_subcommand("print-defaults", "print all train keys with default values");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen_cmd->parsed()) cmd_gen_corpus(gen);
        if (train_cmd->parsed()) {
            if (train_opts.train_corpus_path.empty() || train_opts.eval_corpus_path.empty() ||
                train_opts.out_dir.empty()) {
                throw ConfigError("train requires --train-corpus, --eval-corpus and --out");
            }
            const std::string final_path = run_pipeline(train_opts);
            std::fprintf(stderr, "final checkpoint: %s\n", final_path.c_str());
        }
        if (eval_cmd->parsed()) cmd_eval(eval_args);
        if (judge_cmd->parsed()) cmd_judge(judge_args);
        if (defaults_cmd->parsed()) std::cout << train_cmd->config_to_str(true, true);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
