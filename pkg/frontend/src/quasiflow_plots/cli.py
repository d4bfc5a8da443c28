"""Render a figure from a quasiflow run directory.

    quasiflow-plot --in DIR --fig KIND --out PATH
"""

from __future__ import annotations

import argparse
import sys

from .artifacts import SchemaError
from .figures import KINDS, FigureSpec, render


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quasiflow-plot",
                                 description=__doc__.strip().splitlines()[0])
    ap.add_argument("--in", dest="run_dir", required=True,
                    help="run directory with the stage artifacts")
    ap.add_argument("--fig", dest="kind", required=True, choices=KINDS)
    ap.add_argument("--out", dest="out_path", required=True,
                    help="output image path (.png, .pdf, .svg)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = render(FigureSpec(run_dir=args.run_dir, kind=args.kind,
                                   out_path=args.out_path))
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {result.path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
