"""End-to-end demo on a seeded toy stack: generate, search, compress, decode.

Writes artifacts under ./demo_run/ and prints the stage reports plus the
per-iteration greedy picks. Run: python scripts/toy_pipeline.py
"""

import json
from pathlib import Path

from rotkv import ModelConfig
from rotkv.pipeline import RunManifest, gen_model, run_pipeline

OUT = Path("demo_run")


def main() -> None:
    OUT.mkdir(exist_ok=True)
    cfg = ModelConfig.create(2, 2, 8)
    manifest = RunManifest(
        seed=42, cfg=cfg, method="ropelite", r=2, mode="jlrd", target_ratio=0.5,
        calib_sequences=4, calib_length=16, decode_steps=24,
        paths={
            "model": str(OUT / "model.ekv"),
            "elite": str(OUT / "elite.json"),
            "factors": str(OUT / "factors.ekf"),
            "cost_report": str(OUT / "cost.jsonl"),
            "equivalence_report": str(OUT / "equiv.jsonl"),
        },
    )
    gen_model(manifest.paths["model"], cfg, manifest.seed)
    result = run_pipeline(manifest)
    for row in result.cost_rows + result.equivalence_rows:
        print(json.dumps(row))
    elite = json.loads(Path(manifest.paths["elite"]).read_text())
    print(f"\nelite chunks per (layer, head), method={elite['method']} r={elite['r']}:")
    for li, layer in enumerate(elite["layers"]):
        for hi, chunks in enumerate(layer):
            print(f"  layer {li} head {hi}: {chunks}")
    print(f"\nall checks passed: {result.passed}; artifacts in {OUT}/")


if __name__ == "__main__":
    main()
