"""Analytic cost counters: where the 8x parameter gap comes from.

Prints the parameter and FLOP comparison at the published operating point
(2048 points, 128 patches) and the token-mixing scaling fits that separate
the quadratic attention growth from the linear local aggregation.
"""

import numpy as np

from lcm import costs

t_cfg = costs.paper_transformer_classifier()
l_cfg = costs.paper_lcm_classifier()

p_t, p_l = costs.count_params(t_cfg), costs.count_params(l_cfg)
print(f"parameters: transformer {p_t/1e6:.2f}M vs compact {p_l/1e6:.2f}M "
      f"({100*(1-p_l/p_t):.1f}% fewer)")

f_t = costs.count_flops(t_cfg, 2048, 128)
f_l = costs.count_flops(l_cfg, 2048, 128)
print(f"forward FLOPs @ 2048 pts / 128 patches: {f_t/1e9:.2f}G vs {f_l/1e9:.2f}G "
      f"(ratio {f_l/f_t:.3f})")

detail = costs.count_flops_detail(t_cfg, 2048, 128)
print("transformer breakdown (G):",
      {k: round(v / 1e9, 3) for k, v in detail.items() if k != "total"})

ns = [64, 128, 256, 512, 1024]
mix_t = [costs.mixing_flops(t_cfg, n) for n in ns]
mix_l = [costs.mixing_flops(l_cfg, n) for n in ns]
st, rt = costs.fit_loglog(ns, mix_t)
sl, rl = costs.fit_loglog(ns, mix_l)
print(f"token-mixing scaling: attention slope {st:.3f} (R2={rt:.4f}), "
      f"local aggregation slope {sl:.3f} (R2={rl:.4f})")
for n, a, b in zip(ns, mix_t, mix_l):
    print(f"  N={n:>4}: attention {a/1e9:8.3f}G   local {b/1e9:8.3f}G")

cal = costs.calibrate_lcm_widths()
print(f"width calibration for the compact encoder: d_h={cal['best'][0]}, "
      f"d_ffn={cal['best'][1]} -> {cal['best'][2]/1e6:.3f}M params")
