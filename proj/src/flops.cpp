#include "stsep/model.hpp"

namespace stsep {

namespace {

struct BranchCost {
  int64_t flops = 0;
};

// Branch cost for one block input [cin, h, w] producing [cout, h/stride, ...].
BranchCost branch_flops(const BackboneConfig& cfg, int64_t cin, int64_t cout, int64_t h, int64_t w,
                        int64_t stride, bool stem) {
  BranchCost c;
  c.flops += cin * h * w;  // temporal difference on the block input
  if (!cfg.temporal_conv) {
    const bool ds = stem || stride != 1 || cin != cout;
    if (ds) c.flops += flops::conv(1, cout, h / stride, w / stride, cin, 1);
    return c;
  }
  auto g = temporal_branch_geometry(cin, cout, h, w, cfg.r, cfg.s, stride, stem ? 7 : 3, stem);
  int64_t bh = h, bw = w, bc = cin;
  if (g.entry_proj) {
    c.flops += flops::conv(1, g.core_c, bh, bw, cin, 1);
    bc = g.core_c;
  } else if (!stem) {
    c.flops += bc * bh * bw;  // group-average: r per output element
    bc = g.core_c;
  }
  if (g.pool > 1) c.flops += bc * (bh / g.pool) * (bw / g.pool) * g.pool * g.pool;
  c.flops += flops::conv(1, g.core_c, g.core_out_h, g.core_out_w, g.core_in_c, stem ? 7 : 3);
  c.flops += 2 * g.core_c * g.core_out_h * g.core_out_w;  // NSN
  // tile + nearest upsample are copies: 0
  return c;
}

}  // namespace

int64_t count_flops(const BackboneConfig& cfg, int64_t t_steps, int64_t resolution) {
  if (resolution < 16 || resolution % 16 != 0)
    throw ConfigError("count_flops: resolution must be a positive multiple of 16");
  int64_t per_frame = 0;
  const int64_t w1 = cfg.stage_width(1);
  const int64_t r2 = resolution / 2;

  // stem
  per_frame += flops::conv(1, w1, r2, r2, cfg.input_channels, 7);
  per_frame += 2 * w1 * r2 * r2;  // bn
  per_frame += 2 * w1 * r2 * r2;  // neuron (LIF and NSN both cost 2/elem)
  if (cfg.policy.stage_stsep(1)) {
    per_frame += branch_flops(cfg, cfg.input_channels, w1, resolution, resolution, 2, true).flops;
    per_frame += 3 * w1 * r2 * r2;  // stem fusion: (1-a)Fs + aFt
  }
  // maxpool 3x3 stride 2
  const int64_t r4 = resolution / 4;
  per_frame += 9 * w1 * r4 * r4;

  int64_t cin = w1;
  int64_t h = r4;
  for (int st = 2; st <= 5; ++st) {
    const int64_t cout = cfg.stage_width(st);
    const int64_t stride = st == 2 ? 1 : 2;
    const bool sep = cfg.policy.stage_stsep(st);
    for (int b = 0; b < cfg.blocks_per_stage[static_cast<size_t>(st - 1)]; ++b) {
      const int64_t bci = b == 0 ? cin : cout;
      const int64_t bst = b == 0 ? stride : 1;
      const int64_t ho = detail::conv_out_dim(h, 3, bst, 1);
      const bool ds = bst != 1 || bci != cout;
      const bool body = !(sep && !cfg.spatial_branch);
      if (body) {
        per_frame += flops::conv(1, cout, ho, ho, bci, 3) + 2 * cout * ho * ho;  // conv1+bn1
        per_frame += 2 * cout * ho * ho;                                         // neuron
        per_frame += flops::conv(1, cout, ho, ho, cout, 3) + 2 * cout * ho * ho;  // conv2+bn2
        per_frame += 2 * cout * ho * ho;                                          // neuron
      }
      if (ds) per_frame += flops::conv(1, cout, ho, ho, bci, 1) + 2 * cout * ho * ho;
      if (sep) {
        per_frame += branch_flops(cfg, bci, cout, h, h, bst, false).flops;
        per_frame += (body ? 4 : 2) * cout * ho * ho;  // fusion
      } else {
        per_frame += cout * ho * ho;  // residual add
      }
      h = ho;
    }
    cin = cout;
  }

  // head: global pool, fc, temporal average
  const int64_t w5 = cfg.stage_width(5);
  per_frame += w5 * h * h;                                // global pool reads
  per_frame += w5 * cfg.num_classes + cfg.num_classes;    // fc + bias
  per_frame += cfg.num_classes;                           // temporal average
  return per_frame * t_steps;
}

}  // namespace stsep
