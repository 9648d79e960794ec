#include "stsep/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

namespace stsep {

double topk_accuracy(const std::vector<float>& logits, int64_t n, int64_t c,
                     const std::vector<int>& labels, int64_t k) {
  if (k < 1 || k > c) throw ConfigError("topk_accuracy: k must be in 1..C");
  if (static_cast<int64_t>(labels.size()) != n) throw UsageError("topk_accuracy: label count");
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    const float* row = logits.data() + i * c;
    const int lbl = labels[static_cast<size_t>(i)];
    const float lv = row[lbl];
    int64_t rank = 0;  // entries strictly better, or equal with lower index
    for (int64_t j = 0; j < c; ++j)
      if (row[j] > lv || (row[j] == lv && j < lbl)) ++rank;
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

std::vector<double> per_class_accuracy(const std::vector<float>& logits, int64_t n, int64_t c,
                                       const std::vector<int>& labels) {
  std::vector<int64_t> hit(static_cast<size_t>(c), 0), tot(static_cast<size_t>(c), 0);
  for (int64_t i = 0; i < n; ++i) {
    const float* row = logits.data() + i * c;
    int best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    const int lbl = labels[static_cast<size_t>(i)];
    tot[static_cast<size_t>(lbl)] += 1;
    if (best == lbl) hit[static_cast<size_t>(lbl)] += 1;
  }
  std::vector<double> out(static_cast<size_t>(c), 0.0);
  for (int64_t j = 0; j < c; ++j)
    if (tot[static_cast<size_t>(j)] > 0)
      out[static_cast<size_t>(j)] =
          static_cast<double>(hit[static_cast<size_t>(j)]) / static_cast<double>(tot[static_cast<size_t>(j)]);
  return out;
}

RetrievalResult knn_recall(const std::vector<std::vector<float>>& query_feats,
                           const std::vector<std::vector<float>>& gallery_feats,
                           const std::vector<int>& query_labels,
                           const std::vector<int>& gallery_labels, const std::vector<int>& ks,
                           bool same_set, int* excluded_out) {
  if (gallery_feats.empty()) throw UsageError("knn_recall: empty gallery");
  if (query_feats.size() != query_labels.size() || gallery_feats.size() != gallery_labels.size())
    throw UsageError("knn_recall: label count mismatch");
  const size_t dim = gallery_feats[0].size();
  for (const auto& f : query_feats)
    if (f.size() != dim) throw UsageError("knn_recall: feature dims disagree");

  auto norm = [](const std::vector<float>& f) {
    double s = 0;
    for (float v : f) s += static_cast<double>(v) * v;
    return std::sqrt(s);
  };
  std::vector<double> gnorm(gallery_feats.size());
  std::vector<bool> gvalid(gallery_feats.size());
  int excluded = 0;
  for (size_t j = 0; j < gallery_feats.size(); ++j) {
    gnorm[j] = norm(gallery_feats[j]);
    gvalid[j] = gnorm[j] > 0;
    if (!gvalid[j] && !same_set) {  // same-set features are counted on the query side
      ++excluded;
      std::cerr << "knn_recall: warning: zero-norm gallery feature " << j << " excluded\n";
    }
  }

  std::vector<int> sorted_ks = ks;
  std::sort(sorted_ks.begin(), sorted_ks.end());
  RetrievalResult result;
  std::vector<int64_t> hits(sorted_ks.size(), 0);
  int64_t used_queries = 0;

  std::vector<std::pair<double, size_t>> sims;
  for (size_t i = 0; i < query_feats.size(); ++i) {
    const double qn = norm(query_feats[i]);
    if (qn == 0) {
      ++excluded;
      std::cerr << "knn_recall: warning: zero-norm query feature " << i << " excluded\n";
      continue;
    }
    ++used_queries;
    sims.clear();
    for (size_t j = 0; j < gallery_feats.size(); ++j) {
      if (!gvalid[j]) continue;
      if (same_set && i == j) continue;
      double dot = 0;
      for (size_t d = 0; d < dim; ++d)
        dot += static_cast<double>(query_feats[i][d]) * gallery_feats[j][d];
      sims.emplace_back(dot / (qn * gnorm[j]), j);
    }
    std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;  // deterministic tie order
    });
    size_t ki = 0;
    bool found = false;
    for (size_t rank = 0; rank < sims.size() && ki < sorted_ks.size(); ++rank) {
      if (gallery_labels[sims[rank].second] == query_labels[i]) found = true;
      while (ki < sorted_ks.size() && static_cast<int64_t>(rank + 1) == sorted_ks[ki]) {
        if (found) hits[ki] += 1;
        ++ki;
      }
    }
    // ks beyond the gallery size: same answer as the full list
    for (; ki < sorted_ks.size(); ++ki)
      if (found) hits[ki] += 1;
  }
  for (size_t ki = 0; ki < sorted_ks.size(); ++ki)
    result.recall_at[sorted_ks[ki]] =
        used_queries > 0 ? static_cast<double>(hits[ki]) / static_cast<double>(used_queries) : 0.0;
  if (excluded_out) *excluded_out = excluded;
  return result;
}

std::vector<double> multiclip_predict(Model& model, const VideoRecord& video, int64_t m,
                                      const SamplerSpec& spec) {
  if (m < 1) throw ConfigError("multiclip_predict: M must be >= 1");
  spec.validate();
  const int64_t len = video.length();
  const int64_t stride = spec.kind == SamplerKind::dense ? spec.stride : 1;
  const int64_t span = (spec.T - 1) * stride;
  const int64_t valid = std::max<int64_t>(0, len - 1 - span);
  const int64_t res = model.config().resolution;
  const int64_t c = model.config().num_classes;

  // all M clips in one packed forward
  Tensor packed(Shape{spec.T * m, 3, res, res});
  Rng rng(0);  // eval path draws nothing
  for (int64_t ci = 0; ci < m; ++ci) {
    const int64_t start = m == 1 ? valid / 2 : (ci * valid) / (m - 1);
    ClipF clip = decode_frames(video, dense_indices(len, start, spec.T, stride));
    clip = augment(clip, res, Phase::eval, 0.0, rng);
    for (int64_t t = 0; t < spec.T; ++t)
      std::copy(clip.frame(t), clip.frame(t) + 3 * res * res,
                packed.data() + ((t * m + ci) * 3 * res * res));
  }
  Tensor logits = model.forward_packed(packed, spec.T, false);
  Tensor avg = mean_over_time(logits, spec.T);  // [M, C]
  std::vector<double> probs = softmax_rows(avg);
  std::vector<double> out(static_cast<size_t>(c), 0.0);
  for (int64_t ci = 0; ci < m; ++ci)
    for (int64_t j = 0; j < c; ++j)
      out[static_cast<size_t>(j)] += probs[static_cast<size_t>(ci * c + j)] / static_cast<double>(m);
  return out;
}

std::vector<uint8_t> minmax_to_bytes(const std::vector<float>& values) {
  float lo = values[0], hi = values[0];
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<uint8_t> out(values.size());
  if (hi <= lo) return out;  // degenerate range maps to 0
  const double sc = 255.0 / (static_cast<double>(hi) - lo);
  for (size_t i = 0; i < values.size(); ++i)
    out[i] = static_cast<uint8_t>(std::lround((static_cast<double>(values[i]) - lo) * sc));
  return out;
}

void write_pgm(const std::string& path, int64_t h, int64_t w, const std::vector<uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_pgm: cannot open " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write_pgm: write failed for " + path);
}

std::vector<std::string> export_activation_maps(Model& model, const TimeTensor& clip, int stage,
                                                const std::string& dir_prefix) {
  if (stage < 1 || stage > 5) throw ConfigError("export_activation_maps: stage must be in 1..5");
  clip.validate();
  const int64_t t_steps = clip.T();
  Tensor captured;
  model.forward_packed(clip.pack(), t_steps, false, stage, &captured);
  const Shape& cs = captured.shape();
  const int64_t n = cs[0] / t_steps, c = cs[1], h = cs[2], w = cs[3];
  if (n != 1) throw UsageError("export_activation_maps: expects a single-video clip");
  std::vector<std::string> paths;
  for (int64_t t = 0; t < t_steps; ++t) {
    std::vector<float> mean(static_cast<size_t>(h * w), 0.0f);
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* p = captured.data() + ((t * n) * c + ch) * h * w;
      for (int64_t i = 0; i < h * w; ++i) mean[static_cast<size_t>(i)] += std::abs(p[i]);
    }
    for (auto& v : mean) v /= static_cast<float>(c);
    std::string path = dir_prefix + "_t" + std::to_string(t) + ".pgm";
    write_pgm(path, h, w, minmax_to_bytes(mean));
    paths.push_back(path);
  }
  return paths;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& history) {
  std::ofstream os(path);
  if (!os) throw IoError("write_metrics_csv: cannot open " + path);
  os << "epoch,top1,top5,loss\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%lld,%.6f,%.6f,%.6f\n", static_cast<long long>(r.epoch),
                  r.top1, r.top5, r.loss);
    os << buf;
  }
}

}  // namespace stsep
