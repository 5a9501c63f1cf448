#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "flowdistill/config.hpp"

namespace fd {

// An upstream artifact is absent or no longer matches the manifest.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

// A command's output directory is non-empty and --force was not given.
class OutputExistsError : public Error {
 public:
  using Error::Error;
};

std::string tool_version();

struct Artifact {
  std::string path;  // relative to the run directory
  std::string sha1;  // file digest, or tree digest for directories
  std::uintmax_t bytes = 0;
  bool timing = false;  // wall-clock dependent, exempt from determinism
};

struct ManifestRecord {
  std::string command;
  std::string tool_version;
  std::string config_sha1;
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  std::vector<Artifact> artifacts;
};

// Digest of the canonical config with the output path left out.
std::string config_sha1(const ExperimentConfig& cfg);

// Digest of a directory: SHA-1 over "sha1  relative/path" lines in path order.
std::string tree_sha1(const std::filesystem::path& dir);

// One JSON object per line in <run>/manifest.jsonl.
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& run_dir);
void append_manifest(const std::filesystem::path& run_dir, const ManifestRecord& record);

// Digest over the latest hash of every non-timing artifact, in path order.
std::string manifest_digest(const std::filesystem::path& run_dir);

struct RunOptions {
  bool force = false;
  std::ostream* log = nullptr;
};

// The experiment commands. Each writes into its own subdirectory of
// cfg.output and appends one manifest record.
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, RunOptions options = {});

  static const std::vector<std::string>& commands();
  ManifestRecord run(const std::string& command);

  ManifestRecord gen_data();        // demos/
  ManifestRecord train_teacher();   // teacher/
  ManifestRecord sample_teacher();  // teacher_sets/
  ManifestRecord distill();         // student/
  ManifestRecord eval();            // eval/
  ManifestRecord simulate();        // sim/
  ManifestRecord speed();           // speed/
  ManifestRecord ablate();          // ablate/

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& run_dir() const { return cfg_.output; }

 private:
  struct Context;

  ExperimentConfig cfg_;
  RunOptions opt_;
};

}  // namespace fd
