#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "relectra/cli.hpp"
#include "relectra/config.hpp"

using namespace relectra;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

std::string read_file_str(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int run_cli(std::initializer_list<const char*> args) {
    std::vector<const char*> argv{"relectra"};
    argv.insert(argv.end(), args.begin(), args.end());
    return cli::run(static_cast<int>(argv.size()), argv.data());
}

const char* kTinyConfig =
    "seed = 11\n"
    "precision = f32\n"
    "d_model = 8\n"
    "n_heads = 1\n"
    "n_layers = 1\n"
    "d_ffn = 16\n"
    "max_seq_len = 64\n"
    "chunk_size = 8\n"
    "n_hash_rounds = 1\n"
    "attention_dropout = 0\n"
    "hidden_dropout = 0\n"
    "total_steps = 6\n"
    "warmup_steps = 2\n"
    "phase_switch_step = 4\n"
    "batch_size = 2\n"
    "ner_max_len = 64\n"
    "ner_epochs = 1\n";

}  // namespace

TEST_CASE("empty config file yields all documented defaults") {
    RunConfig cfg = parse_config_text("");
    CHECK(cfg.mask_prob == 0.15);
    CHECK(cfg.vocab_size == 30522);
    CHECK(cfg.total_steps == 120000);
    CHECK(cfg.warmup_steps == 20000);
    CHECK(cfg.phase_switch_step == 80000);
    CHECK(cfg.lr_phase1 == 1e-5);
    CHECK(cfg.lr_phase2 == 1e-6);
    CHECK(cfg.batch_size == 4);
    CHECK(cfg.disc_weight == 50.0);
    CHECK(cfg.max_seq_len == 8192);
    CHECK(cfg.tie_embeddings);
    CHECK(cfg.ner_max_len == 1536);
    CHECK(cfg.ner_epochs == 10);
    CHECK(cfg.ner_lr == 3e-5);
}

TEST_CASE("config errors name the offending key") {
    try {
        parse_config_text("mask_prob = 1.5\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("mask_prob") != std::string::npos);
    }
    try {
        parse_config_text("warmup_steps = 200000\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("warmup_steps") != std::string::npos);
    }
    try {
        parse_config_text("not_a_key = 3\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("not_a_key") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config_text("d_model\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("d_model = seven\n"), ConfigError);
}

TEST_CASE("comments and whitespace are tolerated") {
    RunConfig cfg = parse_config_text("# a comment\n  mask_prob = 0.2  # trailing\n\nseed = 42\n");
    CHECK(cfg.mask_prob == 0.2);
    CHECK(cfg.seed == 42);
}

TEST_CASE("snapshot round trip reproduces every value") {
    RunConfig cfg = parse_config_text(kTinyConfig);
    std::string snap = config_snapshot_text(cfg);
    RunConfig cfg2 = parse_config_text(snap);
    CHECK(config_snapshot_text(cfg2) == snap);
    CHECK(cfg2.seed == cfg.seed);
    CHECK(cfg2.lr_phase1 == cfg.lr_phase1);
    CHECK(cfg2.total_steps == cfg.total_steps);
}

TEST_CASE("generator derivation follows the quarter-width convention") {
    RunConfig cfg = parse_config_text("");
    CHECK(cfg.gen_d_model_eff() == cfg.d_model / 4);
    CHECK(cfg.gen_n_heads_eff() == 1);
    auto gcfg = cfg.generator_config();
    CHECK(gcfg.d_model == 64);
    CHECK(gcfg.embed_dim() == 256);  // tied to the discriminator width
    auto dcfg = cfg.discriminator_config();
    CHECK(dcfg.embed_dim() == 256);
}

TEST_CASE("cli: unknown subcommand exits 1") {
    CHECK(run_cli({"frobnicate"}) == 1);
    CHECK(run_cli({}) == 1);
}

TEST_CASE("cli: missing files exit 2") {
    CHECK(run_cli({"inspect-checkpoint", "--checkpoint", "/nonexistent/x.rlct"}) == 2);
    TempDir tmp("relectra_cli_missing");
    write_file(tmp.file("manifest.txt"), "name = a\ndomain = legal\npath = missing.txt\nweight = 1\n");
    write_file(tmp.file("config.cfg"), kTinyConfig);
    write_file(tmp.file("corpus.txt"), "aa bb cc dd ee ff gg hh");
    REQUIRE(run_cli({"train-tokenizer", "--corpus", tmp.file("corpus.txt").c_str(), "--vocab-size", "40",
                     "--out", tmp.file("vocab.txt").c_str()}) == 0);
    CHECK(run_cli({"pretrain", "--config", tmp.file("config.cfg").c_str(), "--corpus-dir",
                   tmp.path.string().c_str(), "--out", tmp.file("out").c_str(), "--vocab",
                   tmp.file("vocab.txt").c_str()}) == 2);
}

TEST_CASE("cli: tokenizer train + eval round trip") {
    TempDir tmp("relectra_cli_tok");
    write_file(tmp.file("corpus.txt"), "the court ruled the court ruled the court ruled gastroscopy");
    REQUIRE(run_cli({"train-tokenizer", "--corpus", tmp.file("corpus.txt").c_str(), "--vocab-size", "64",
                     "--out", tmp.file("vocab.txt").c_str()}) == 0);
    CHECK(fs::exists(tmp.file("vocab.txt")));
    write_file(tmp.file("text.txt"), "the court ruled on gastroscopy");
    CHECK(run_cli({"eval-tokenizer", "--vocab", tmp.file("vocab.txt").c_str(), "--text",
                   tmp.file("text.txt").c_str()}) == 0);
}

TEST_CASE("cli: pretrain happy path writes metrics, checkpoint, snapshot deterministically") {
    TempDir tmp("relectra_cli_pretrain");
    std::string corpus;
    for (int i = 0; i < 60; ++i) corpus += "the plaintiff sued the defendant over a fall ";
    write_file(tmp.file("docs.txt"), corpus);
    write_file(tmp.file("manifest.txt"), "name = a\ndomain = legal\npath = docs.txt\nweight = 1\n");
    write_file(tmp.file("config.cfg"), kTinyConfig);
    REQUIRE(run_cli({"train-tokenizer", "--corpus", tmp.file("docs.txt").c_str(), "--vocab-size", "64",
                     "--out", tmp.file("vocab.txt").c_str()}) == 0);

    REQUIRE(run_cli({"pretrain", "--config", tmp.file("config.cfg").c_str(), "--corpus-dir",
                     tmp.path.string().c_str(), "--out", tmp.file("run1").c_str(), "--vocab",
                     tmp.file("vocab.txt").c_str()}) == 0);
    CHECK(fs::exists(tmp.file("run1") + "/metrics.csv"));
    CHECK(fs::exists(tmp.file("run1") + "/checkpoint.rlct"));
    CHECK(fs::exists(tmp.file("run1") + "/effective_config.txt"));

    // Re-running from the effective-config snapshot reproduces results
    // bitwise (same seed, same data).
    REQUIRE(run_cli({"pretrain", "--config", (tmp.file("run1") + "/effective_config.txt").c_str(),
                     "--corpus-dir", tmp.path.string().c_str(), "--out", tmp.file("run2").c_str(), "--vocab",
                     tmp.file("vocab.txt").c_str()}) == 0);
    CHECK(read_file_str(tmp.file("run1") + "/metrics.csv") == read_file_str(tmp.file("run2") + "/metrics.csv"));
    CHECK(read_file_str(tmp.file("run1") + "/checkpoint.rlct") ==
          read_file_str(tmp.file("run2") + "/checkpoint.rlct"));

    CHECK(run_cli({"inspect-checkpoint", "--checkpoint", (tmp.file("run1") + "/checkpoint.rlct").c_str()}) ==
          0);

    // Metrics file: header + one line per step.
    std::istringstream metrics(read_file_str(tmp.file("run1") + "/metrics.csv"));
    std::string line;
    std::size_t lines = 0;
    while (std::getline(metrics, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 7);  // header + 6 steps
}

TEST_CASE("cli: diverging training exits 3") {
    TempDir tmp("relectra_cli_nan");
    std::string corpus;
    for (int i = 0; i < 40; ++i) corpus += "aa bb cc dd ee ff gg hh ";
    write_file(tmp.file("docs.txt"), corpus);
    write_file(tmp.file("manifest.txt"), "name = a\ndomain = legal\npath = docs.txt\nweight = 1\n");
    std::string cfg = kTinyConfig;
    cfg += "lr_phase1 = 1e18\nlr_phase2 = 1e18\n";
    write_file(tmp.file("config.cfg"), cfg);
    REQUIRE(run_cli({"train-tokenizer", "--corpus", tmp.file("docs.txt").c_str(), "--vocab-size", "40",
                     "--out", tmp.file("vocab.txt").c_str()}) == 0);
    CHECK(run_cli({"pretrain", "--config", tmp.file("config.cfg").c_str(), "--corpus-dir",
                   tmp.path.string().c_str(), "--out", tmp.file("out").c_str(), "--vocab",
                   tmp.file("vocab.txt").c_str()}) == 3);
}

TEST_CASE("cli: auto-annotate writes a loadable ner file") {
    TempDir tmp("relectra_cli_annot");
    write_file(tmp.file("text.txt"), "plaintiff John Smith slipped and sued Acme Corp over a slip and fall");
    write_file(tmp.file("parties.txt"), "PLT\tJohn Smith\nDEF\tAcme Corp\n");
    write_file(tmp.file("lists.txt"), "#TYPE slipfall\nslip and fall\n");
    REQUIRE(run_cli({"auto-annotate", "--input", tmp.file("text.txt").c_str(), "--parties",
                     tmp.file("parties.txt").c_str(), "--wordlists", tmp.file("lists.txt").c_str(), "--out",
                     tmp.file("annot.tsv").c_str()}) == 0);
    auto examples = ner::read_ner_file(tmp.file("annot.tsv"), ner::TagSet::legal());
    REQUIRE(examples.size() == 1);
    auto spans = ner::bio_decode(examples[0].tags, ner::TagSet::legal());
    REQUIRE(spans.size() == 3);
}
