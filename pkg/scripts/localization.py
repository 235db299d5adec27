"""Mean anomaly score inside vs. outside the lesion for freshly seeded diseased cases.

    python scripts/localization.py scripts/configs/smoke.json --backend fpgan --cases 10
"""

import argparse
from pathlib import Path

import numpy as np

from adunet.anomaly import generate_case_anomalies
from adunet.config import load_config
from adunet.layout import recon_ckpt_path
from adunet.phantom import generate_dataset
from adunet.recon import load_reconstructor

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--backend", default="fpgan")
    ap.add_argument("--cases", type=int, default=10)
    ap.add_argument("--seed", type=int, default=90_000)
    args = ap.parse_args()

    config = load_config(args.config)
    root = Path(config.output_dir)
    recs = {m: load_reconstructor(recon_ckpt_path(root, args.backend, m)) for m in config.modalities}
    cases = generate_dataset(0, args.cases, args.seed, config.phantom)
    print(f"{'case':<12}" + "".join(f"{m:>10}" for m in config.modalities))
    hits = dict.fromkeys(config.modalities, 0)
    for case in cases:
        maps = generate_case_anomalies(case, recs, config.modalities, config.metrics.kernel_size, config.canvas)
        les = case.lesion_mask.data > 0
        out = (case.zone_mask.data > 0) & ~les
        row = []
        for m in config.modalities:
            d = maps[m].volume.data
            ratio = d[les].mean() / max(d[out].mean(), 1e-12)
            hits[m] += int(ratio > 1)
            row.append(f"{ratio:>10.2f}")
        print(f"{case.case_id:<12}" + "".join(row))
    print(f"{'hits':<12}" + "".join(f"{hits[m]:>7}/{args.cases}" for m in config.modalities))
