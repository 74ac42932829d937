// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "occfit/common.hpp"
#include "occfit/field.hpp"

namespace occfit {

// Voxel occupancy labels: 0 = free, 1..num_classes = occupied semantic class.
// The optional mask marks voxels that evaluation may count (1 = evaluate);
// an empty mask means everything counts.
struct OccGrid {
  GridSpec spec;
  int num_classes = 1;
  std::vector<uint8_t> labels;
  std::vector<uint8_t> mask;

  bool occupied(size_t cell) const { return labels[cell] != 0; }
};

inline void write_socg(const std::filesystem::path& path, const OccGrid& grid) {
  if (grid.labels.size() != grid.spec.cells())
    throw DomainError("occupancy grid labels do not match the spec");
  if (!grid.mask.empty() && grid.mask.size() != grid.spec.cells())
    throw DomainError("occupancy grid mask does not match the spec");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path.string());
  out.write("SOCG", 4);
  detail::write_raw(out, uint32_t(1));  // version
  detail::write_spec(out, grid.spec);
  detail::write_raw(out, uint32_t(grid.num_classes));
  detail::write_raw(out, uint8_t(grid.mask.empty() ? 0 : 1));
  out.write(reinterpret_cast<const char*>(grid.labels.data()),
            std::streamsize(grid.labels.size()));
  if (!grid.mask.empty())
    out.write(reinterpret_cast<const char*>(grid.mask.data()),
              std::streamsize(grid.mask.size()));
  if (!out) throw ConfigError("short write: " + path.string());
}

inline OccGrid read_socg(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open for reading: " + path.string());
  char magic[4];
  in.read(magic, 4);
  size_t off = 4;
  if (in.gcount() != 4 || std::memcmp(magic, "SOCG", 4) != 0)
    throw ParseError("bad occupancy grid magic", 0);
  uint32_t version = detail::read_raw<uint32_t>(in, off);
  if (version != 1) throw ParseError("unsupported occupancy grid version", off);
  OccGrid grid;
  grid.spec = detail::read_spec(in, off);
  grid.num_classes = int(detail::read_raw<uint32_t>(in, off));
  uint8_t has_mask = detail::read_raw<uint8_t>(in, off);
  grid.labels.resize(grid.spec.cells());
  in.read(reinterpret_cast<char*>(grid.labels.data()),
          std::streamsize(grid.labels.size()));
  if (size_t(in.gcount()) != grid.labels.size())
    throw ParseError("truncated occupancy labels", off);
  off += grid.labels.size();
  if (has_mask) {
    grid.mask.resize(grid.spec.cells());
    in.read(reinterpret_cast<char*>(grid.mask.data()),
            std::streamsize(grid.mask.size()));
    if (size_t(in.gcount()) != grid.mask.size())
      throw ParseError("truncated occupancy mask", off);
  }
  return grid;
}

}  // namespace occfit
