"""Run every stage on the bundled mini fixture and print the stage manifests.

    python scripts/run_mini_pipeline.py [--stage-dir DIR] [--workers N]
"""
import argparse
import json
import sys
from pathlib import Path

from facadescope import cli

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixture", default=str(ROOT / "fixtures" / "mini"))
    ap.add_argument("--stage-dir", default=None)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)
    cfg = Path(args.fixture) / "config.yaml"
    stage_dir = Path(args.stage_dir) if args.stage_dir else Path(args.fixture) / "out"
    code = cli.main(["run-all", "--config", str(cfg), "--stage-dir", str(stage_dir), "--workers", str(args.workers)])
    if code:
        return code
    metrics = json.loads((stage_dir / "evaluate" / "metrics.json").read_text())
    print(json.dumps(metrics["teacher"], indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
