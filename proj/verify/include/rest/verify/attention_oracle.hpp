#pragma once

#include <cstdint>

#include "rest/dit.hpp"

namespace rest::verify {

struct OracleReport {
  double max_abs_diff = 0.0;
  std::int64_t records = 0;        // self-attention calls checked
  std::int64_t cached_records = 0; // of which used cached keys
};

/// Rebuilds every traced self-attention call in double precision from the
/// normalized inputs alone: the key sequence is materialized as
/// [reference rows of chunk 0 | frame rows of chunk i-1 | chunk i] at the same
/// (block, step), honouring the ablation flags, and only the current chunk's
/// queries are evaluated. Never reads the cache.
OracleReport check_attention_trace(const ParamStore& p, const ModelConfig& cfg, const AttentionTrace& trace);

}  // namespace rest::verify
