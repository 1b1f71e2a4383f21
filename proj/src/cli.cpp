#include "desklm/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "desklm/chatml.hpp"
#include "desklm/checkpoint.hpp"
#include "desklm/config.hpp"
#include "desklm/eval.hpp"
#include "desklm/kernels.hpp"
#include "desklm/model.hpp"
#include "desklm/tokenizer.hpp"
#include "desklm/training.hpp"

namespace desklm::cli {

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Plain-text corpora split into documents at blank lines.
std::vector<std::string> split_documents(const std::string& text) {
    std::vector<std::string> docs;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t end = text.find("\n\n", pos);
        if (end == std::string::npos) end = text.size();
        while (end < text.size() && text[end] == '\n') ++end;
        std::string doc = text.substr(pos, end - pos);
        if (doc.find_first_not_of(" \t\n\r") != std::string::npos) docs.push_back(std::move(doc));
        pos = end;
    }
    return docs;
}

std::vector<size_t> parse_lengths(const std::string& text) {
    std::vector<size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(size_t(std::stoull(item)));
    if (out.empty()) throw ParseError("--lengths got an empty list");
    return out;
}

struct CommonModelArgs {
    std::string checkpoint;
    std::string vocab;
    std::string config;
    std::vector<std::string> overrides;
    std::string ntk;
    bool logn = false;
    std::string windows;
};

EngineConfig resolve_config(const CommonModelArgs& a) {
    EngineConfig cfg;
    if (!a.config.empty()) cfg = load_engine_config(a.config);
    for (const auto& kv : a.overrides) apply_override(cfg, kv);
    if (!a.checkpoint.empty()) cfg.paths.checkpoint = a.checkpoint;
    if (!a.vocab.empty()) cfg.paths.vocab = a.vocab;
    if (!a.ntk.empty()) cfg.extension.ntk_mode = parse_ntk_mode(a.ntk);
    if (a.logn) cfg.extension.logn = true;
    if (!a.windows.empty()) cfg.extension.window_schedule = parse_window_schedule(a.windows);
    return cfg;
}

void require_path(const std::string& path, const std::string& what) {
    if (path.empty()) throw DomainError(what + " path not set (flag or config)");
    if (!std::filesystem::exists(path)) throw IoError(what + " path does not exist: " + path);
}

struct LoadedEngine {
    EngineConfig cfg;
    tok::Vocabulary vocab;
    core::LoadedModel model;
};

LoadedEngine load_engine(const CommonModelArgs& args) {
    LoadedEngine eng{resolve_config(args), {}, {}};
    require_path(eng.cfg.paths.vocab, "vocabulary");
    require_path(eng.cfg.paths.checkpoint, "checkpoint");
    eng.vocab = tok::load_vocabulary(eng.cfg.paths.vocab, eng.cfg.special_tokens);
    eng.model = core::load_checkpoint(eng.cfg.paths.checkpoint);
    eng.cfg.model = eng.model.cfg;
    eng.cfg.extension.train_context = eng.model.cfg.train_context;
    if (eng.vocab.total_size() > eng.cfg.model.vocab_size)
        throw IntegrityError("vocabulary has " + std::to_string(eng.vocab.total_size()) +
                             " tokens but the model covers only " +
                             std::to_string(eng.cfg.model.vocab_size));
    return eng;
}

// ---- train ---------------------------------------------------------------

struct SftStream {
    std::vector<int> ids;
    std::vector<uint8_t> mask;
};

// Slices one long masked stream into fixed-context rows. The loss mask of a
// position is the mask of its *target* token, so system/user tokens never
// contribute to the loss even when they sit to the right of a row boundary.
std::vector<train::Batch> pack_masked_stream(const SftStream& s, size_t context,
                                             size_t batch_size, int pad_id) {
    // Rows whose loss mask is entirely zero carry no signal; drop them.
    std::vector<size_t> starts;
    for (size_t start = 0; start + context <= s.ids.size(); start += context) {
        bool live = false;
        for (size_t t = 0; t < context && !live; ++t) {
            const size_t tgt = start + t + 1;
            live = tgt < s.ids.size() && s.mask[tgt] != 0;
        }
        if (live) starts.push_back(start);
    }
    std::vector<train::Batch> batches;
    for (size_t r = 0; r < starts.size(); r += batch_size) {
        train::Batch b;
        b.context = context;
        b.rows = std::min(batch_size, starts.size() - r);
        for (size_t row = r; row < r + b.rows; ++row) {
            const size_t start = starts[row];
            for (size_t t = 0; t < context; ++t) {
                b.inputs.push_back(s.ids[start + t]);
                const size_t tgt = start + t + 1;
                if (tgt < s.ids.size()) {
                    b.targets.push_back(s.ids[tgt]);
                    b.mask.push_back(s.mask[tgt]);
                } else {
                    b.targets.push_back(pad_id);
                    b.mask.push_back(0);
                }
            }
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

struct TrainArgs {
    CommonModelArgs common;
    std::string out;
    std::string metrics;
    std::string sft;
    size_t steps = 0;
    size_t save_every = 0;
};

template <typename T>
int run_train(const TrainArgs& args, EngineConfig cfg, std::ostream& out, std::ostream& err) {
    require_path(cfg.paths.vocab, "vocabulary");
    require_path(cfg.paths.corpus, "corpus");
    const std::string out_path = !args.out.empty() ? args.out : cfg.paths.checkpoint;
    if (out_path.empty()) throw DomainError("no checkpoint output path (--out or paths.checkpoint)");

    const auto vocab = tok::load_vocabulary(cfg.paths.vocab, cfg.special_tokens);
    if (vocab.total_size() > cfg.model.vocab_size)
        throw IntegrityError("vocabulary has " + std::to_string(vocab.total_size()) +
                             " tokens but model.vocab_size is " +
                             std::to_string(cfg.model.vocab_size));
    cfg.model.finalize();
    cfg.model.validate();
    cfg.train.validate();
    const size_t context = cfg.train.context ? cfg.train.context : cfg.model.train_context;
    const int eod = vocab.special_id("<|endoftext|>");

    // Tokenize the corpus.
    std::vector<train::Batch> batches;
    if (!args.sft.empty()) {
        SftStream stream;
        std::ifstream f(args.sft);
        if (!f) throw IoError("cannot open SFT data " + args.sft);
        std::string line;
        size_t line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            chatml::Conversation conv;
            try {
                conv = chatml::conversation_from_json(line, vocab.special_list);
            } catch (const EngineError& e) {
                throw ParseError(args.sft + ":" + std::to_string(line_no) + ": " + e.what());
            }
            const auto rendered = chatml::render(conv, vocab);
            stream.ids.insert(stream.ids.end(), rendered.ids.begin(), rendered.ids.end());
            stream.mask.insert(stream.mask.end(), rendered.mask.begin(), rendered.mask.end());
        }
        batches = pack_masked_stream(stream, context, cfg.train.batch_size, eod);
    } else {
        const auto docs_text = split_documents(read_file(cfg.paths.corpus));
        std::vector<std::vector<int>> docs;
        docs.reserve(docs_text.size());
        for (const auto& d : docs_text) docs.push_back(tok::encode(vocab, d).ids);
        batches = train::pack_documents(docs, context, cfg.train.batch_size, eod, cfg.seed);
    }
    if (batches.empty()) throw DomainError("corpus too small: no full training row");

    if (args.steps > 0) cfg.train.total_steps = args.steps;
    auto weights = core::init_weights<T>(cfg.model, cfg.seed);
    auto opt = train::AdamWState<T>::init(cfg.model);
    Rng dropout_rng(sub_seed(cfg.seed, 0xd201));

    std::ofstream metrics_file;
    std::ostream* metrics = &out;
    if (!args.metrics.empty()) {
        metrics_file.open(args.metrics, std::ios::trunc);
        if (!metrics_file) throw IoError("cannot write metrics file " + args.metrics);
        metrics = &metrics_file;
    }
    *metrics << "step,loss,lr,grad_norm\n";

    for (size_t step = 0; step < cfg.train.total_steps; ++step) {
        const auto& batch = batches[step % batches.size()];
        const auto m = train::train_step(cfg.model, weights, batch, opt, cfg.train, step,
                                         &dropout_rng);
        *metrics << step << "," << m.loss << "," << m.lr << "," << m.grad_norm << "\n";
        if (args.save_every && (step + 1) % args.save_every == 0)
            core::save_checkpoint(weights, cfg.model, out_path);
    }
    core::save_checkpoint(weights, cfg.model, out_path);
    err << "saved checkpoint to " << out_path << "\n";
    return 0;
}

// ---- subcommand bodies ----------------------------------------------------

int cmd_tokenize(const std::string& vocab_path, const std::string& text,
                 const std::string& file, bool allow_specials, const std::string& decode_csv,
                 std::ostream& out) {
    require_path(vocab_path, "vocabulary");
    const auto vocab = tok::load_vocabulary(
        vocab_path, {"<|endoftext|>", "<|im_start|>", "<|im_end|>"});
    if (!decode_csv.empty()) {
        std::vector<int> ids;
        std::stringstream ss(decode_csv);
        std::string item;
        while (std::getline(ss, item, ',')) ids.push_back(std::stoi(item));
        out << tok::decode(vocab, ids) << "\n";
        return 0;
    }
    std::string input = text;
    if (!file.empty()) input = read_file(file);
    const auto stream = tok::encode(vocab, input, allow_specials);
    for (size_t i = 0; i < stream.ids.size(); ++i)
        out << stream.ids[i] << (i + 1 < stream.ids.size() ? " " : "");
    out << "\n";
    return 0;
}

int cmd_train_vocab(const std::string& corpus, size_t size, const std::string& out_path,
                    std::ostream& err) {
    require_path(corpus, "corpus");
    const auto docs = split_documents(read_file(corpus));
    const auto vocab = tok::train_vocabulary(docs, size);
    tok::save_vocabulary(vocab, out_path);
    err << "trained " << vocab.base_vocab_size() << "-token vocabulary -> " << out_path << "\n";
    return 0;
}

int cmd_bench_compression(const std::string& vocab_path, const std::string& baseline_path,
                          const std::string& corpus, std::ostream& out) {
    require_path(vocab_path, "vocabulary");
    require_path(corpus, "corpus");
    const auto vocab = tok::load_vocabulary(vocab_path, {});
    const auto baseline =
        baseline_path.empty() ? tok::byte_vocabulary() : tok::load_vocabulary(baseline_path, {});
    const auto docs = split_documents(read_file(corpus));
    out << tok::compression_rate(vocab, docs, baseline) << "\n";
    return 0;
}

template <typename T>
int run_eval_ppl(LoadedEngine& eng, const std::string& corpus_path,
                 const std::string& lengths_csv, const std::string& techniques_csv,
                 const std::string& out_path, const std::string& plot_path, std::ostream& out) {
    const auto lengths = parse_lengths(lengths_csv);
    const size_t max_len = *std::max_element(lengths.begin(), lengths.end());

    const auto text = read_file(corpus_path);
    const auto tokens = tok::encode(eng.vocab, text).ids;
    std::vector<std::vector<int>> sequences;
    for (size_t pos = 0; pos + max_len <= tokens.size(); pos += max_len)
        sequences.emplace_back(tokens.begin() + ptrdiff_t(pos),
                               tokens.begin() + ptrdiff_t(pos + max_len));
    if (sequences.empty())
        throw DomainError("corpus yields no sequence of " + std::to_string(max_len) + " tokens");

    std::vector<std::pair<std::string, ext::ExtensionConfig>> sets;
    std::stringstream ss(techniques_csv);
    std::string label;
    while (std::getline(ss, label, ','))
        sets.emplace_back(label, parse_technique_set(label, eng.cfg.model.train_context));

    auto report = eval::length_sweep<T>(eng.cfg.model, core::weights_as<T>(eng.model), sets,
                                        lengths, sequences);
    report.model_id = std::filesystem::path(eng.cfg.paths.checkpoint).filename().string();
    report.corpus_id = std::filesystem::path(corpus_path).filename().string();

    const std::string csv = eval::to_csv(report);
    if (out_path.empty()) {
        out << csv;
    } else {
        std::ofstream f(out_path, std::ios::trunc);
        if (!f) throw IoError("cannot write report " + out_path);
        f << csv;
    }
    if (!plot_path.empty()) eval::write_svg_plot(report, plot_path);
    return 0;
}

template <typename T>
int run_generate(LoadedEngine& eng, const std::string& prompt, const std::string& policy_name,
                 double top_p, uint64_t seed, size_t max_new, std::ostream& out) {
    eval::SamplePolicy policy;
    if (policy_name == "greedy") {
        policy.kind = eval::SamplePolicy::Kind::greedy;
    } else if (policy_name == "top-p" || policy_name == "topp") {
        policy.kind = eval::SamplePolicy::Kind::top_p;
        policy.p = top_p;
        policy.seed = seed;
    } else {
        throw ParseError("--policy expects greedy or top-p");
    }
    const auto prompt_ids = tok::encode(eng.vocab, prompt).ids;
    if (prompt_ids.empty()) throw DomainError("empty prompt");
    std::vector<int> stops;
    if (eng.vocab.specials.count("<|endoftext|>"))
        stops.push_back(eng.vocab.special_id("<|endoftext|>"));
    if (eng.vocab.specials.count(chatml::kImEnd))
        stops.push_back(eng.vocab.special_id(chatml::kImEnd));
    const auto generated =
        eval::generate<T>(eng.cfg.model, core::weights_as<T>(eng.model), eng.cfg.extension,
                          prompt_ids, policy, max_new, stops);
    // An untrained model may emit ids the tokenizer does not cover (the
    // model vocabulary is allowed to be padded past it); print what decodes.
    std::vector<int> printable;
    for (int id : generated)
        if (size_t(id) < eng.vocab.base_vocab_size()) printable.push_back(id);
    out << tok::decode(eng.vocab, printable) << "\n";
    return 0;
}

template <typename T>
int run_chat(LoadedEngine& eng, const std::string& system_prompt, size_t max_new,
             std::istream& in, std::ostream& out) {
    chatml::Conversation conv;
    if (!system_prompt.empty())
        conv.add_turn(chatml::Role::system, system_prompt, eng.vocab.special_list);
    const int im_end = eng.vocab.special_id(chatml::kImEnd);
    out << "(interactive chat; empty line or EOF quits)\n";
    std::string line;
    while (true) {
        out << "user> " << std::flush;
        if (!std::getline(in, line) || line.empty()) break;
        conv.add_turn(chatml::Role::user, line, eng.vocab.special_list);
        const auto prompt = chatml::generation_prompt(conv, eng.vocab);
        eval::SamplePolicy policy; // greedy keeps the loop reproducible
        const auto generated =
            eval::generate<T>(eng.cfg.model, core::weights_as<T>(eng.model), eng.cfg.extension,
                              prompt, policy, max_new, {im_end});
        std::vector<int> content;
        for (int id : generated)
            if (size_t(id) < eng.vocab.base_vocab_size()) content.push_back(id);
        std::string reply = tok::decode(eng.vocab, content);
        // An untrained model can spell out special-token text byte by byte;
        // scrub it so the transcript stays renderable.
        for (const auto& sp : eng.vocab.special_list) {
            size_t at;
            while ((at = reply.find(sp)) != std::string::npos) reply.erase(at, sp.size());
        }
        out << "assistant> " << reply << "\n";
        conv.add_turn(chatml::Role::assistant, reply, eng.vocab.special_list);
    }
    return 0;
}

} // namespace

int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    kern::configure_threads();

    CLI::App app{"desk-scale decoder-only transformer engine"};
    app.require_subcommand(1);

    // tokenize
    auto* tokenize = app.add_subcommand("tokenize", "encode text to token ids");
    std::string tk_vocab, tk_text, tk_file, tk_decode;
    bool tk_specials = false;
    tokenize->add_option("--vocab", tk_vocab, "rank file")->required();
    tokenize->add_option("--text", tk_text, "text to encode");
    tokenize->add_option("--file", tk_file, "file to encode");
    tokenize->add_option("--decode", tk_decode, "comma-separated ids to decode instead");
    tokenize->add_flag("--allow-specials", tk_specials, "map special-token text to ids");

    // train-vocab
    auto* train_vocab = app.add_subcommand("train-vocab", "learn a BPE vocabulary from text");
    std::string tv_corpus, tv_out;
    size_t tv_size = 0;
    train_vocab->add_option("--corpus", tv_corpus, "plain-text corpus")->required();
    train_vocab->add_option("--size", tv_size, "target non-special vocabulary size")->required();
    train_vocab->add_option("--out", tv_out, "rank file to write")->required();

    // bench-compression
    auto* bench = app.add_subcommand("bench-compression",
                                     "tokens-under-baseline / tokens-under-vocab on a corpus");
    std::string bc_vocab, bc_baseline, bc_corpus;
    bench->add_option("--vocab", bc_vocab, "rank file under test")->required();
    bench->add_option("--baseline", bc_baseline, "baseline rank file (default: raw bytes)");
    bench->add_option("--corpus", bc_corpus, "plain-text corpus")->required();

    // shared model flags
    auto add_common = [](CLI::App* sub, CommonModelArgs& a) {
        sub->add_option("--config", a.config, "engine config JSON");
        sub->add_option("--set", a.overrides, "config override key=value (repeatable)");
        sub->add_option("--model", a.checkpoint, "checkpoint path");
        sub->add_option("--vocab", a.vocab, "rank file");
        sub->add_option("--ntk", a.ntk, "off|static:S|dynamic:CHUNK");
        sub->add_flag("--logn", a.logn, "enable LogN attention scaling");
        sub->add_option("--windows", a.windows, "w0,w1,... or auto:MIN:MAX");
    };

    // train
    auto* train_cmd = app.add_subcommand("train", "pretrain or SFT a model");
    TrainArgs ta;
    add_common(train_cmd, ta.common);
    std::string tr_corpus;
    train_cmd->add_option("--corpus", tr_corpus, "plain-text training corpus");
    train_cmd->add_option("--steps", ta.steps, "override train.total_steps");
    train_cmd->add_option("--out", ta.out, "checkpoint output path");
    train_cmd->add_option("--metrics", ta.metrics, "per-step CSV file (default stdout)");
    train_cmd->add_option("--save-every", ta.save_every, "checkpoint every K steps");
    train_cmd->add_option("--sft", ta.sft, "JSON-lines chat data; trains with loss masks");

    // eval-ppl
    auto* eval_cmd = app.add_subcommand("eval-ppl", "perplexity across lengths and techniques");
    CommonModelArgs ea;
    add_common(eval_cmd, ea);
    std::string ep_corpus, ep_lengths = "256,512,1024";
    std::string ep_techniques = "off,ntk,ntk+logn,ntk+logn+window";
    std::string ep_out, ep_plot;
    eval_cmd->add_option("--corpus", ep_corpus, "plain-text eval corpus")->required();
    eval_cmd->add_option("--lengths", ep_lengths, "comma-separated sequence lengths");
    eval_cmd->add_option("--techniques", ep_techniques, "comma-separated technique sets");
    eval_cmd->add_option("--out", ep_out, "write the CSV report here instead of stdout");
    eval_cmd->add_option("--plot", ep_plot, "write an SVG plot");

    // generate
    auto* gen_cmd = app.add_subcommand("generate", "sample a continuation of a prompt");
    CommonModelArgs ga;
    add_common(gen_cmd, ga);
    std::string g_prompt, g_policy = "greedy";
    double g_p = 0.9;
    uint64_t g_seed = 0;
    size_t g_max_new = 128;
    gen_cmd->add_option("--prompt", g_prompt, "prompt text")->required();
    gen_cmd->add_option("--policy", g_policy, "greedy or top-p");
    gen_cmd->add_option("--p", g_p, "nucleus mass for top-p");
    gen_cmd->add_option("--seed", g_seed, "sampling seed");
    gen_cmd->add_option("--max-new", g_max_new, "maximum new tokens");

    // chat
    auto* chat_cmd = app.add_subcommand("chat", "interactive terminal chat loop");
    CommonModelArgs ca;
    add_common(chat_cmd, ca);
    std::string c_system;
    size_t c_max_new = 256;
    chat_cmd->add_option("--system", c_system, "system prompt");
    chat_cmd->add_option("--max-new", c_max_new, "maximum new tokens per reply");

    // inspect-checkpoint
    auto* inspect_cmd = app.add_subcommand("inspect-checkpoint", "show checkpoint contents");
    std::string ic_path;
    inspect_cmd->add_option("path", ic_path, "checkpoint file")->required();

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (tokenize->parsed())
            return cmd_tokenize(tk_vocab, tk_text, tk_file, tk_specials, tk_decode, out);
        if (train_vocab->parsed()) return cmd_train_vocab(tv_corpus, tv_size, tv_out, err);
        if (bench->parsed()) return cmd_bench_compression(bc_vocab, bc_baseline, bc_corpus, out);
        if (train_cmd->parsed()) {
            EngineConfig cfg = resolve_config(ta.common);
            if (!tr_corpus.empty()) cfg.paths.corpus = tr_corpus;
            return cfg.model.precision == core::Precision::f32
                       ? run_train<float>(ta, cfg, out, err)
                       : run_train<double>(ta, cfg, out, err);
        }
        if (eval_cmd->parsed()) {
            auto eng = load_engine(ea);
            require_path(ep_corpus, "corpus");
            return eng.model.precision() == core::Precision::f32
                       ? run_eval_ppl<float>(eng, ep_corpus, ep_lengths, ep_techniques, ep_out,
                                             ep_plot, out)
                       : run_eval_ppl<double>(eng, ep_corpus, ep_lengths, ep_techniques, ep_out,
                                              ep_plot, out);
        }
        if (gen_cmd->parsed()) {
            auto eng = load_engine(ga);
            return eng.model.precision() == core::Precision::f32
                       ? run_generate<float>(eng, g_prompt, g_policy, g_p, g_seed, g_max_new, out)
                       : run_generate<double>(eng, g_prompt, g_policy, g_p, g_seed, g_max_new,
                                              out);
        }
        if (chat_cmd->parsed()) {
            auto eng = load_engine(ca);
            return eng.model.precision() == core::Precision::f32
                       ? run_chat<float>(eng, c_system, c_max_new, std::cin, out)
                       : run_chat<double>(eng, c_system, c_max_new, std::cin, out);
        }
        if (inspect_cmd->parsed()) {
            out << core::describe_checkpoint(ic_path);
            return 0;
        }
    } catch (const EngineError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "unexpected error: " << e.what() << "\n";
        return 2;
    }
    err << "no subcommand\n";
    return 1;
}

} // namespace desklm::cli
