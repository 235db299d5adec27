"""Run every stage for a config, then print the report tables.

    python scripts/run_pipeline.py scripts/configs/smoke.json [--force]
"""

import argparse
import sys
from pathlib import Path

from adunet.cli import main
from adunet.config import load_config


def show(path: Path) -> None:
    if path.exists():
        print(f"\n## {path.name}\n")
        print(path.read_text())


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()
    code = main(["all", "--config", args.config] + (["--force"] if args.force else []))
    if code:
        sys.exit(code)
    reports = Path(load_config(args.config).output_dir) / "reports"
    show(reports / "recon_metrics.md")
    show(reports / "seg_report.md")
