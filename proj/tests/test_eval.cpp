#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "stsep/eval.hpp"
#include "stsep/train.hpp"

using namespace stsep;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// brute-force oracle: sort (value desc, index asc), check label membership
double topk_oracle(const std::vector<float>& logits, int64_t n, int64_t c,
                   const std::vector<int>& labels, int64_t k) {
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    std::vector<int> order(static_cast<size_t>(c));
    for (int64_t j = 0; j < c; ++j) order[static_cast<size_t>(j)] = static_cast<int>(j);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      const float va = logits[static_cast<size_t>(i * c + a)];
      const float vb = logits[static_cast<size_t>(i * c + b)];
      if (va != vb) return va > vb;
      return a < b;
    });
    for (int64_t j = 0; j < k; ++j)
      if (order[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// exhaustive pairwise cosine retrieval oracle
RetrievalResult knn_oracle(const std::vector<std::vector<float>>& feats,
                           const std::vector<int>& labels, const std::vector<int>& ks) {
  RetrievalResult out;
  const size_t n = feats.size();
  for (int k : ks) {
    int64_t hits = 0;
    for (size_t i = 0; i < n; ++i) {
      std::vector<std::pair<double, size_t>> sims;
      for (size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        double dot = 0, ni = 0, nj = 0;
        for (size_t d = 0; d < feats[i].size(); ++d) {
          dot += static_cast<double>(feats[i][d]) * feats[j][d];
          ni += static_cast<double>(feats[i][d]) * feats[i][d];
          nj += static_cast<double>(feats[j][d]) * feats[j][d];
        }
        sims.emplace_back(dot / std::sqrt(ni * nj), j);
      }
      std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      for (size_t r = 0; r < std::min<size_t>(static_cast<size_t>(k), sims.size()); ++r)
        if (labels[sims[r].second] == labels[i]) {
          ++hits;
          break;
        }
    }
    out.recall_at[k] = static_cast<double>(hits) / static_cast<double>(n);
  }
  return out;
}

}  // namespace

TEST_CASE("topk: one-hot logits at the label give top1 = 1") {
  std::vector<float> logits{0, 1, 0, 0, 0, 0, 0, 1};  // two rows, C=4
  CHECK(topk_accuracy(logits, 2, 4, {1, 3}, 1) == 1.0);
}

TEST_CASE("topk: uniform logits break ties toward class 0") {
  std::vector<float> logits(8, 0.5f);  // two rows, C=4
  CHECK(topk_accuracy(logits, 2, 4, {0, 0}, 1) == 1.0);
  CHECK(topk_accuracy(logits, 2, 4, {1, 2}, 1) == 0.0);
  CHECK(topk_accuracy(logits, 2, 4, {1, 2}, 3) == 1.0);  // indices 0,1,2 fill top-3
}

TEST_CASE("topk: N=4 mixed-rank hand case matches the sort oracle") {
  std::vector<float> logits{
      0.1f, 0.9f, 0.5f, 0.2f,  // label 2: rank 2
      0.7f, 0.7f, 0.1f, 0.0f,  // label 1: tie with index 0, rank 2
      -1.f, -2.f, -3.f, 4.0f,  // label 3: rank 1
      0.0f, 0.0f, 0.0f, 0.0f,  // label 0: tie rule keeps rank 1
  };
  const std::vector<int> labels{2, 1, 3, 0};
  for (int64_t k = 1; k <= 4; ++k)
    CHECK(topk_accuracy(logits, 4, 4, labels, k) == topk_oracle(logits, 4, 4, labels, k));
  CHECK(topk_accuracy(logits, 4, 4, labels, 1) == doctest::Approx(0.5));
  CHECK(topk_accuracy(logits, 4, 4, labels, 2) == doctest::Approx(1.0));
  CHECK_THROWS_AS(topk_accuracy(logits, 4, 4, labels, 5), ConfigError);
}

TEST_CASE("knn: self-exclusion makes unique classes unretrievable") {
  std::vector<std::vector<float>> feats{{1, 0}, {0, 1}, {-1, 0}};
  std::vector<int> labels{0, 1, 2};
  auto res = knn_recall(feats, feats, labels, labels, {1}, true);
  CHECK(res.recall_at[1] == 0.0);
}

TEST_CASE("knn: two identical same-class vectors retrieve each other") {
  std::vector<std::vector<float>> feats{{0.5f, 0.5f}, {0.5f, 0.5f}, {-1, 0}};
  std::vector<int> labels{0, 0, 1};
  auto res = knn_recall(feats, feats, labels, labels, {1}, true);
  CHECK(res.recall_at[1] == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("knn: 5-point 2-D hand configuration matches exhaustive enumeration") {
  std::vector<std::vector<float>> feats{{1, 0}, {0.9f, 0.1f}, {0, 1}, {-1, 0.2f}, {0.1f, 0.95f}};
  std::vector<int> labels{0, 0, 1, 0, 1};
  auto got = knn_recall(feats, feats, labels, labels, {1, 2, 3}, true);
  auto want = knn_oracle(feats, labels, {1, 2, 3});
  for (int k : {1, 2, 3}) CHECK(got.recall_at[k] == doctest::Approx(want.recall_at[k]));
}

TEST_CASE("knn: recall is monotone nondecreasing in k") {
  Rng rng(71);
  std::vector<std::vector<float>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    std::vector<float> f(8);
    for (auto& v : f) v = static_cast<float>(rng.uniform(-1, 1));
    feats.push_back(f);
    labels.push_back(static_cast<int>(rng.uniform_int(0, 3)));
  }
  auto res = knn_recall(feats, feats, labels, labels, {1, 3, 5, 10, 20}, true);
  double prev = 0;
  for (const auto& [k, r] : res.recall_at) {
    CHECK(r >= prev);
    prev = r;
  }
}

TEST_CASE("knn: zero-norm features are excluded with a warning count") {
  std::vector<std::vector<float>> feats{{1, 0}, {0, 0}, {1, 0.1f}};
  std::vector<int> labels{0, 0, 0};
  int excluded = 0;
  auto res = knn_recall(feats, feats, labels, labels, {1}, true, &excluded);
  CHECK(excluded == 1);
  CHECK(res.recall_at[1] == doctest::Approx(1.0));
}

TEST_CASE("knn: random 200-strong feature sets match the oracle exactly") {
  Rng rng(72);
  std::vector<std::vector<float>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 200; ++i) {
    std::vector<float> f(16);
    for (auto& v : f) v = static_cast<float>(rng.uniform(-1, 1));
    feats.push_back(f);
    labels.push_back(static_cast<int>(rng.uniform_int(0, 9)));
  }
  const std::vector<int> ks{1, 3, 5, 10, 20, 50};
  auto got = knn_recall(feats, feats, labels, labels, ks, true);
  auto want = knn_oracle(feats, labels, ks);
  for (int k : ks) CHECK(got.recall_at[k] == want.recall_at[k]);
}

TEST_CASE("multiclip: M=1 equals the single-clip softmax; rows sum to 1") {
  BackboneConfig mc;
  mc.num_classes = 4;
  mc.T = 4;
  mc.resolution = 32;
  mc.width_multiplier = 0.125;
  Model model(mc, 81);
  SyntheticTask task;
  task.T = 12;  // longer than the clip span
  task.seed = 3;
  auto videos = generate(task, 2);
  SamplerSpec spec;
  spec.kind = SamplerKind::dense;
  spec.T = 4;
  spec.stride = 2;

  auto p1 = multiclip_predict(model, videos[0], 1, spec);
  double total = 0;
  for (double v : p1) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-5));

  // oracle: center start, one forward pass, softmax
  const int64_t len = videos[0].length();
  const int64_t span = (spec.T - 1) * spec.stride;
  const int64_t start = (len - 1 - span) / 2;
  Rng rng(0);
  ClipF clip = decode_frames(videos[0], dense_indices(len, start, spec.T, spec.stride));
  clip = augment(clip, 32, Phase::eval, 0.0, rng);
  auto out = model.forward_clip_packed(to_time_tensor(clip).pack(), spec.T, false);
  auto probs = softmax_rows(out.avg_logits);
  for (size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == doctest::Approx(probs[i]).epsilon(1e-6));
}

TEST_CASE("multiclip: M=3 matches an independent per-clip recomputation") {
  BackboneConfig mc;
  mc.num_classes = 2;
  mc.T = 4;
  mc.resolution = 32;
  mc.width_multiplier = 0.125;
  Model model(mc, 83);
  SyntheticTask task;
  task.kind = TaskKind::playback2;
  task.T = 16;
  task.seed = 5;
  auto videos = generate(task, 2);
  SamplerSpec spec;
  spec.kind = SamplerKind::dense;
  spec.T = 4;
  spec.stride = 2;

  auto got = multiclip_predict(model, videos[0], 3, spec);

  const int64_t len = videos[0].length();
  const int64_t span = (spec.T - 1) * spec.stride;
  const int64_t valid = len - 1 - span;
  std::vector<double> want(2, 0.0);
  for (int64_t ci = 0; ci < 3; ++ci) {
    const int64_t start = ci * valid / 2;
    Rng rng(0);
    ClipF clip = decode_frames(videos[0], dense_indices(len, start, spec.T, spec.stride));
    clip = augment(clip, 32, Phase::eval, 0.0, rng);
    auto out = model.forward_clip_packed(to_time_tensor(clip).pack(), spec.T, false);
    auto probs = softmax_rows(out.avg_logits);
    for (size_t j = 0; j < 2; ++j) want[j] += probs[j] / 3.0;
  }
  for (size_t j = 0; j < 2; ++j) CHECK(got[j] == doctest::Approx(want[j]).epsilon(1e-6));
}

TEST_CASE("multiclip: a temporally constant video makes M=3 equal M=1") {
  BackboneConfig mc;
  mc.num_classes = 4;
  mc.T = 4;
  mc.resolution = 32;
  mc.width_multiplier = 0.125;
  Model model(mc, 85);
  SyntheticTask task;
  task.kind = TaskKind::shape_static;
  task.noise_sigma = 0.0;  // every frame identical
  task.T = 16;
  task.seed = 7;
  auto videos = generate(task, 1);
  SamplerSpec spec;
  spec.kind = SamplerKind::dense;
  spec.T = 4;
  spec.stride = 2;
  auto m1 = multiclip_predict(model, videos[0], 1, spec);
  auto m3 = multiclip_predict(model, videos[0], 3, spec);
  for (size_t j = 0; j < m1.size(); ++j) CHECK(m3[j] == doctest::Approx(m1[j]).epsilon(1e-6));
}

TEST_CASE("minmax byte mapping: hand case [0,1;2,4] -> [0,64,128,255]") {
  auto bytes = minmax_to_bytes({0.0f, 1.0f, 2.0f, 4.0f});
  CHECK(bytes == std::vector<uint8_t>{0, 64, 128, 255});
}

TEST_CASE("minmax byte mapping: degenerate range maps to zero") {
  auto bytes = minmax_to_bytes({3.0f, 3.0f, 3.0f});
  CHECK(bytes == std::vector<uint8_t>{0, 0, 0});
}

TEST_CASE("activation export writes one P5 file per time step") {
  BackboneConfig mc;
  mc.num_classes = 4;
  mc.T = 3;
  mc.resolution = 32;
  mc.width_multiplier = 0.125;
  Model model(mc, 87);
  SyntheticTask task;
  task.T = 3;
  task.seed = 9;
  auto videos = generate(task, 1);
  SamplerSpec spec;
  spec.kind = SamplerKind::tsn;
  spec.T = 3;
  spec.mode = Phase::eval;
  Rng rng(0);
  TimeTensor clip = sample_clip(videos[0], spec, rng);
  const std::string prefix = temp_path("act");
  auto paths = export_activation_maps(model, clip, 2, prefix);
  REQUIRE(paths.size() == 3);
  std::ifstream is(paths[0], std::ios::binary);
  REQUIRE(is.good());
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  CHECK(magic == "P5");
  CHECK_THROWS_AS(export_activation_maps(model, clip, 0, prefix), ConfigError);
  CHECK_THROWS_AS(export_activation_maps(model, clip, 6, prefix), ConfigError);
}

TEST_CASE("single hot pixel maps to 255 with zeros elsewhere") {
  std::vector<float> img(16, 0.0f);
  img[5] = 2.0f;
  auto bytes = minmax_to_bytes(img);
  for (size_t i = 0; i < bytes.size(); ++i) CHECK(bytes[i] == (i == 5 ? 255 : 0));
}

TEST_CASE("metrics CSV uses the pinned header") {
  const std::string path = temp_path("metrics.csv");
  MetricsRecord rec;
  rec.epoch = 0;
  rec.top1 = 0.5;
  rec.top5 = 1.0;
  rec.loss = 0.25;
  write_metrics_csv(path, {rec});
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "epoch,top1,top5,loss");
}
