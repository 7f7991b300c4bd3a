#pragma once

#include <cstdint>
#include <string>

#include "pmf/params.hpp"

namespace pmf {

uint32_t crc32(const void* data, size_t len);

// Binary container: magic "PMFCKPT1", step counter, config snapshot, then
// named little-endian float64 blobs (params + optimizer moments), each with a
// CRC32 integrity checksum. Writes are atomic (temp file + rename).
struct Checkpoint {
    std::string config_text;
    ParamStore params;
    bool has_optimizer = false;
    ParamStore opt_m;
    ParamStore opt_v;
    int64_t step = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// human-readable summary (config, parameter count, step, per-blob checksums)
std::string inspect_checkpoint(const std::string& path);

}  // namespace pmf
