"""Reproduce the cache-ratio arithmetic for a 32x32x128 attention stack.

For each target ratio, enumerate hardware-aligned (r, d_ckv) settings of the
joint decomposition that do not add parameters, and print the extremes of
the feasible set. Run: python scripts/cost_table.py
"""

from fractions import Fraction

from rotkv import ModelConfig
from rotkv.lowrank import allocate_configs

CFG = ModelConfig.create(32, 32, 128)
TARGETS = ["50.0", "34.4", "28.1", "25.0", "21.9", "12.5"]


def main() -> None:
    print(f"shape: l={CFG.n_layers} heads={CFG.n_heads} head_dim={CFG.head_dim} "
          f"d={CFG.embed_dim}; full cache width {CFG.full_cache_width}")
    header = f"{'target':>7} {'ratio':>8} {'configs':>8}  span of (r, d_ckv)"
    print(header)
    print("-" * len(header))
    for pct in TARGETS:
        target = Fraction(pct) / 100
        configs = allocate_configs(CFG, float(target), alignment=128,
                                   tolerance=0.0005)
        lo, hi = configs[0], configs[-1]
        print(f"{pct:>6}% {str(configs[0].cache_ratio):>8} {len(configs):>8}  "
              f"(r={lo.r}, d_ckv={lo.d_ckv}) ... (r={hi.r}, d_ckv={hi.d_ckv})")
    print("\nevery config keeps params_after <= params_original "
          f"(= {2 * CFG.embed_dim * CFG.kv_width:,})")


if __name__ == "__main__":
    main()
