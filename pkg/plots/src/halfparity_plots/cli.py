"""Command line: render_fig <id> <csv...> <out.png>.

Figure ids and their expected inputs, in order:

  1  histogram.csv
  2  semiclassical.csv
  3  quantum_discrete_curves.csv quantum_discrete_theta.csv
  4  hybrid_schedule.csv hybrid_curves.csv hybrid_trace.csv
  5  experiment_feedback.csv experiment_feedback_ps.csv
     experiment_nofeedback_ps.csv

Exit code 0 on success, 2 for any input problem (wrong argument count,
missing file, empty or malformed CSV, missing column, bad overlay
expression).
"""

import argparse
import sys

from .figures import RENDERERS, FigureSpec, render
from .overlays import OverlayError
from .tables import TableError


def build_parser() -> argparse.ArgumentParser:
    lines = [
        f"  {fig_id}: {' '.join(inputs)}"
        for fig_id, (inputs, _) in sorted(RENDERERS.items())
    ]
    parser = argparse.ArgumentParser(
        prog="render_fig",
        description="Render one figure from the simulation CLI's CSV output.",
        epilog="expected CSV inputs per figure id:\n" + "\n".join(lines),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("fig_id", type=int, choices=sorted(RENDERERS),
                        help="figure id")
    parser.add_argument("paths", nargs="+", metavar="PATH",
                        help="input CSVs in the documented order, then the "
                             "output .png path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    *csv_paths, out_path = args.paths
    if not out_path.endswith(".png"):
        print(f"render_fig: output path must end in .png, got {out_path!r}",
              file=sys.stderr)
        return 2
    spec = FigureSpec(fig_id=args.fig_id, csv_paths=tuple(csv_paths),
                      out_path=out_path)
    try:
        written = render(spec)
    except (TableError, OverlayError) as exc:
        print(f"render_fig: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {written}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
