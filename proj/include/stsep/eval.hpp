#pragma once

#include <map>
#include <string>
#include <vector>

#include "stsep/data.hpp"
#include "stsep/model.hpp"

namespace stsep {

struct MetricsRecord {
  int64_t epoch = 0;
  double top1 = 0;
  double top5 = 0;
  double loss = 0;
  double lr = 0;
  double seconds = 0;
  std::vector<double> per_class;
};

struct RetrievalResult {
  std::map<int, double> recall_at;
};

// fraction of rows whose label ranks among the k largest logits; ties broken
// toward the lower class index
double topk_accuracy(const std::vector<float>& logits, int64_t n, int64_t c,
                     const std::vector<int>& labels, int64_t k);

inline double topk_accuracy(const Tensor& logits, const std::vector<int>& labels, int64_t k) {
  return topk_accuracy(logits.values(), logits.shape()[0], logits.shape()[1], labels, k);
}

std::vector<double> per_class_accuracy(const std::vector<float>& logits, int64_t n, int64_t c,
                                       const std::vector<int>& labels);

// cosine-similarity KNN retrieval; query i is excluded from gallery entry i
// when `same_set`. Zero-norm features are excluded (counted in the result).
RetrievalResult knn_recall(const std::vector<std::vector<float>>& query_feats,
                           const std::vector<std::vector<float>>& gallery_feats,
                           const std::vector<int>& query_labels,
                           const std::vector<int>& gallery_labels, const std::vector<int>& ks,
                           bool same_set, int* excluded_out = nullptr);

// M uniformly spaced dense clips, averaged softmax scores (one row per class)
std::vector<double> multiclip_predict(Model& model, const VideoRecord& video, int64_t m,
                                      const SamplerSpec& spec);

// per-step channel-mean |activation| maps of one stage, min-max scaled,
// written as binary PGM (P5), one file per time step; returns paths
std::vector<std::string> export_activation_maps(Model& model, const TimeTensor& clip, int stage,
                                                const std::string& dir_prefix);

// PGM helper shared with tests
void write_pgm(const std::string& path, int64_t h, int64_t w, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> minmax_to_bytes(const std::vector<float>& values);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& history);

}  // namespace stsep
