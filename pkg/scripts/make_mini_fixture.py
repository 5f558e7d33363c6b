"""Regenerate the bundled mini fixture under fixtures/mini.

    python scripts/make_mini_fixture.py [--out fixtures/mini]
"""
import argparse
import shutil
from pathlib import Path

from facadescope.fixtures import build_mini_fixture


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "fixtures" / "mini"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    if out.exists():
        shutil.rmtree(out)
    build_mini_fixture(out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
