#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowdistill/tasks.hpp"

namespace fd {

// "ROBS": magic, version, then appearance, geometry, points and proprio, each
// as rank u8, dims u32, f32 payload.
std::vector<std::uint8_t> encode_observation(const RawObservation& obs);
RawObservation decode_observation(std::vector<std::uint8_t> bytes, const std::string& what = "ROBS");

struct CorpusMeta {
  TaskKind task = TaskKind::kFork2d;
  std::uint64_t seed = 0;
  std::size_t horizon = 0;
  std::size_t action_dim = 2;
  std::vector<std::size_t> modes;  // per demo
};

// Demos keep only what training needs: observation, trajectory and mode.
struct DemoCorpus {
  CorpusMeta meta;
  std::vector<Demo> demos;
};

// Directory layout: demos.meta.json plus demo_NNNNN.tset (K = 1) and
// demo_NNNNN.obs per demo.
void write_demo_corpus(const std::filesystem::path& dir, TaskKind task, std::uint64_t seed,
                       std::span<const Demo> demos);
// Reads the first `limit` demos; 0 reads all.
DemoCorpus read_demo_corpus(const std::filesystem::path& dir, std::size_t limit = 0);

}  // namespace fd
