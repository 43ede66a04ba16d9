#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "canary_audit/textgen.hpp"

namespace canary_audit {
namespace {

namespace fs = std::filesystem;

struct CliResult {
  int status = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(CANARY_AUDIT_CLI) + " " + args + " 2>&1";
  CliResult r;
  std::FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) r.output += buf.data();
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("canary_cli_test_" + name);
  fs::remove_all(dir);
  return dir;
}

TEST(Cli, MissingSubcommandIsUsageError) {
  const CliResult r = run_cli("");
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("subcommand"), std::string::npos) << r.output;
  const CliResult help = run_cli("--help");
  EXPECT_EQ(help.status, 0);
  for (const char* cmd : {"gen-canaries", "train-lm", "audit-mia", "report"}) {
    EXPECT_NE(help.output.find(cmd), std::string::npos) << cmd;
  }
}

TEST(Cli, UnknownFlagAndBadConfigAreUsageErrors) {
  EXPECT_EQ(run_cli("gen-canaries --bogus").status, 1);
  const fs::path dir = fresh_dir("badcfg");
  EXPECT_EQ(run_cli("gen-canaries --set train.nonsense=1 --out " + dir.string()).status, 1);
}

TEST(Cli, GenCanariesWritesScaledSets) {
  const fs::path dir = fresh_dir("gen");
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "c.cfg");
    cfg << "canary.scale_divisor = 64\n";
  }
  const CliResult r = run_cli("gen-canaries --config " + (dir / "c.cfg").string() + " --seed 3 --out " + (dir / "d").string());
  ASSERT_EQ(r.status, 0) << r.output;
  const SequenceSet can = read_sequence_set((dir / "d" / "canaries.tsv").string(), SetKind::kCanary);
  const SequenceSet ext = read_sequence_set((dir / "d" / "extraneous.tsv").string(), SetKind::kExtraneous);
  const std::vector<std::pair<int, std::size_t>> sizes{{0, 256}, {1, 256}, {2, 128}, {4, 64}, {8, 32}, {16, 16}, {32, 8}};
  for (const auto& [f, n] : sizes) {
    EXPECT_EQ(can.with_frequency(f).size(), n);
    EXPECT_EQ(ext.with_frequency(f).size(), n);
  }
  const SequenceSet format = read_sequence_set((dir / "d" / "format.tsv").string(), SetKind::kFormat);
  EXPECT_EQ(format.entries.size(), can.entries.size());
  std::ifstream manifest(dir / "d" / "manifest.cfg");
  std::string text((std::istreambuf_iterator<char>(manifest)), {});
  EXPECT_NE(text.find("audit.seed = 3"), std::string::npos);
  EXPECT_NE(text.find("canary.scale_divisor = 64"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "d" / ".lock"));
}

TEST(Cli, AuditMiaWithoutBaselineNamesArtifact) {
  const fs::path dir = fresh_dir("mia");
  const CliResult r = run_cli("audit-mia --set corpus.sentence_count=50 --out " + dir.string());
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("baseline-m1-off.nlm"), std::string::npos) << r.output;
}

TEST(Cli, ReportOnEmptyDirectoryFails) {
  const fs::path dir = fresh_dir("report");
  fs::create_directories(dir);
  EXPECT_EQ(run_cli("report --out " + dir.string()).status, 2);
  EXPECT_EQ(run_cli("report --out " + (dir / "absent").string()).status, 2);
}

TEST(Cli, LockedDirectoryIsRefused) {
  const fs::path dir = fresh_dir("locked");
  fs::create_directories(dir);
  std::ofstream(dir / ".lock").close();
  const CliResult r = run_cli("gen-canaries --out " + dir.string());
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("locked"), std::string::npos);
}

TEST(Cli, TrainDecodeAndTuneTinyModel) {
  const fs::path dir = fresh_dir("train");
  const std::string cfg =
      " --set corpus.sentence_count=100 --set corpus.word_vocab_size=20 --set corpus.dev_sentences=5"
      " --set lm.hidden_dim=8 --set lm.embed_dim=4 --set train.steps=20 --set fusion.lambda1_grid=0,1"
      " --set fusion.lambda2_grid=0 --set canary.scale_divisor=512 --out " + dir.string();
  ASSERT_EQ(run_cli("train-lm --model CAN" + cfg).status, 0);
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "CAN-m1-off.nlm"));
  const CliResult d = run_cli("decode --model CAN --text \"hello world\"" + cfg);
  EXPECT_EQ(d.status, 0) << d.output;
  EXPECT_TRUE(fs::exists(dir / "decodes" / "cli" / "CAN-m1-off__decode.csv"));
  EXPECT_EQ(run_cli("tune-fusion --model CAN" + cfg).status, 0);
  EXPECT_TRUE(fs::exists(dir / "fusion" / "CAN-m1-off.csv"));
  EXPECT_EQ(run_cli("decode --model EXT --text \"hi\"" + cfg).status, 2);
}

}  // namespace
}  // namespace canary_audit
