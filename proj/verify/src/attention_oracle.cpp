#include "rest/verify/attention_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "rest/error.hpp"

namespace rest::verify {

namespace {

using Rows = std::vector<std::vector<double>>;

Rows rows_of(const Tensor& t, std::int64_t begin, std::int64_t end) {
  const std::int64_t d = t.dim(1);
  Rows r;
  for (std::int64_t i = begin; i < end; ++i) {
    std::vector<double> row(static_cast<std::size_t>(d));
    for (std::int64_t c = 0; c < d; ++c) row[static_cast<std::size_t>(c)] = t.at(i * d + c);
    r.push_back(std::move(row));
  }
  return r;
}

Rows project(const Rows& x, const Tensor& w) {
  const std::int64_t in = w.dim(0), out = w.dim(1);
  Rows y(x.size(), std::vector<double>(static_cast<std::size_t>(out), 0.0));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::int64_t i = 0; i < in; ++i)
      for (std::int64_t o = 0; o < out; ++o) y[r][static_cast<std::size_t>(o)] += x[r][static_cast<std::size_t>(i)] * w.at(i * out + o);
  return y;
}

const AttentionRecord* find(const AttentionTrace& t, std::int64_t chunk, int step, std::int64_t block) {
  for (const auto& r : t.records)
    if (r.chunk == chunk && r.step == step && r.block == block) return &r;
  return nullptr;
}

}  // namespace

OracleReport check_attention_trace(const ParamStore& p, const ModelConfig& c, const AttentionTrace& trace) {
  OracleReport rep;
  const std::int64_t S = c.tokens_per_frame(), d = c.d_model, H = c.heads, dh = d / H;
  for (const auto& rec : trace.records) {
    const BlockParams b = block_params(p, rec.block);
    const std::int64_t n_cur = rec.normed.dim(0);

    Rows seq;
    if (rec.chunk > 0) {
      if (!c.no_id_sink) {
        const AttentionRecord* first = find(trace, 0, rec.step, rec.block);
        if (!first) throw UsageError("oracle: trace lacks chunk 0 for block " + std::to_string(rec.block));
        for (auto& r : rows_of(first->normed, 0, S)) seq.push_back(std::move(r));
      }
      if (!c.no_context_cache) {
        const AttentionRecord* prev = find(trace, rec.chunk - 1, rec.step, rec.block);
        if (!prev) throw UsageError("oracle: trace lacks chunk " + std::to_string(rec.chunk - 1));
        for (auto& r : rows_of(prev->normed, prev->has_ref ? S : 0, prev->normed.dim(0))) seq.push_back(std::move(r));
      }
      ++rep.cached_records;
    }
    const Rows cur = rows_of(rec.normed, 0, n_cur);
    seq.insert(seq.end(), cur.begin(), cur.end());

    const Rows q = project(cur, b.wq);
    const Rows k = project(seq, b.wk);
    const Rows v = project(seq, b.wv);
    Rows attn(cur.size(), std::vector<double>(static_cast<std::size_t>(d), 0.0));
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t r = 0; r < cur.size(); ++r)
      for (std::int64_t h = 0; h < H; ++h) {
        std::vector<double> s(seq.size());
        for (std::size_t key = 0; key < seq.size(); ++key) {
          double dot = 0.0;
          for (std::int64_t e = h * dh; e < (h + 1) * dh; ++e) dot += q[r][static_cast<std::size_t>(e)] * k[key][static_cast<std::size_t>(e)];
          s[key] = dot * scale;
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double& x : s) z += (x = std::exp(x - mx));
        for (std::size_t key = 0; key < seq.size(); ++key)
          for (std::int64_t e = h * dh; e < (h + 1) * dh; ++e)
            attn[r][static_cast<std::size_t>(e)] += s[key] / z * v[key][static_cast<std::size_t>(e)];
      }
    const Rows out = project(attn, b.wo);
    for (std::int64_t r = 0; r < n_cur; ++r)
      for (std::int64_t e = 0; e < d; ++e) {
        const double expect = rec.before.at(r * d + e) + out[static_cast<std::size_t>(r)][static_cast<std::size_t>(e)] + b.bo.at(e);
        rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(expect - rec.after.at(r * d + e)));
      }
    ++rep.records;
  }
  return rep;
}

}  // namespace rest::verify
