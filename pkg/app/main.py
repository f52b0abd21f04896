import argparse
import logging
import sys
from typing import List, Optional

from app.cli import commands
from app.config import settings
from app.models import MisfitKind


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="w2eit",
        description="Circle W2 distance and W2-based EIT reconstruction",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    w2 = subparsers.add_parser("w2", help="squared W2 distance between two density CSV files")
    w2.add_argument("--f", required=True, help="source density, one sample per line")
    w2.add_argument("--g", required=True, help="target density, one sample per line")
    w2.add_argument("--eps", type=float, default=1e-12, help="Newton step tolerance")
    w2.add_argument("--json-out", help="write the solution as JSON")
    w2.set_defaults(handler=commands.cmd_w2)

    gradcheck = subparsers.add_parser("gradcheck", help="finite-difference check of the potential")
    gradcheck.add_argument("--f", required=True)
    gradcheck.add_argument("--g", required=True)
    gradcheck.add_argument("--samples", type=int, default=20)
    gradcheck.add_argument("--epsilon", type=float, default=1e-5)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.set_defaults(handler=commands.cmd_gradcheck)

    mesh = subparsers.add_parser("mesh", help="write the disk mesh as CSV")
    mesh.add_argument("--refinement", type=int, default=settings.mesh_refinement)
    mesh.add_argument("--out", required=True)
    mesh.set_defaults(handler=commands.cmd_mesh)

    synth = subparsers.add_parser("synth", help="synthesize boundary measurements")
    synth.add_argument("--config", required=True)
    source = synth.add_mutually_exclusive_group()
    source.add_argument("--phantom", help="named phantom (default from config)")
    source.add_argument("--truth", help="nodal conductivity CSV")
    synth.add_argument("--eps", type=float)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--out", required=True)
    synth.set_defaults(handler=commands.cmd_synth)

    invert = subparsers.add_parser("invert", help="reconstruct a conductivity")
    invert.add_argument("--config", required=True)
    data = invert.add_mutually_exclusive_group()
    data.add_argument("--phantom")
    data.add_argument("--truth")
    data.add_argument("--data", help="directory written by synth")
    invert.add_argument("--misfit", choices=[kind.value for kind in MisfitKind])
    invert.add_argument("--eps", type=float)
    invert.add_argument("--seed", type=int)
    invert.add_argument("--out", required=True)
    invert.set_defaults(handler=commands.cmd_invert)

    landscape = subparsers.add_parser("landscape", help="misfit landscape over inclusion centres")
    landscape.add_argument("--config", required=True)
    landscape.add_argument("--phantom", default="polar_disk")
    landscape.add_argument("--eps", type=float)
    landscape.add_argument("--seed", type=int)
    landscape.add_argument("--workers", type=int)
    landscape.add_argument("--slice-radius", type=float, default=0.5)
    landscape.add_argument("--out", required=True)
    landscape.set_defaults(handler=commands.cmd_landscape)

    bench = subparsers.add_parser("bench", help="time w2 for increasing grid sizes")
    bench.add_argument("--sizes", default="16384,32768,65536,131072,262144,524288,1048576")
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--csv-out")
    bench.set_defaults(handler=commands.cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
