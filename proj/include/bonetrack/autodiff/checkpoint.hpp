#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "bonetrack/autodiff/tensor.hpp"

namespace bonetrack::ad {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Versioned container: magic "BTCK", version, an opaque architecture
/// configuration record, then named arrays stored as little-endian f32.
/// The byte layout depends only on the contents.
struct Checkpoint {
  std::string config_record;
  std::vector<NamedArray> arrays;

  const NamedArray& find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace bonetrack::ad
