"""Command-line entry point: run experiments, preflight checks, mesh tools."""

from __future__ import annotations

import argparse
import sys

from . import experiments
from .config import ScenarioConfig
from .errors import (InvalidDomainError, MeshFormatError, MeshValidationError,
                     ParameterError)
from .mesh import generate_rectangle, load_mesh, save_mesh


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="qvhi",
        description="Quasi variational-hemivariational flow solver and experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the experiment described by a scenario file")
    p_run.add_argument("config", help="scenario JSON file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--force-run", action="store_true",
                       help="run even when a smallness condition fails")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    p_pre = sub.add_parser("preflight", help="verify hypotheses and print all constants")
    p_pre.add_argument("config", help="scenario JSON file")

    p_mesh = sub.add_parser("mesh", help="mesh generation and validation tools")
    mesh_sub = p_mesh.add_subparsers(dest="mesh_command", required=True)

    p_gen = mesh_sub.add_parser("gen", help="generate a crossed rectangle mesh")
    p_gen.add_argument("--lx", type=float, default=1.0)
    p_gen.add_argument("--ly", type=float, default=1.0)
    p_gen.add_argument("--nx", type=int, default=8)
    p_gen.add_argument("--ny", type=int, default=8)
    p_gen.add_argument("--gamma1", default="",
                       help="comma-separated slip sides (bottom,right,top,left)")
    p_gen.add_argument("--out", required=True, help="mesh file to write")

    p_chk = mesh_sub.add_parser("check", help="validate a mesh file and print stats")
    p_chk.add_argument("path")
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            config = ScenarioConfig.from_json(args.config)
        except (ParameterError, OSError, ValueError) as exc:
            print(f"bad scenario file: {exc}", file=sys.stderr)
            return 1
        return experiments.run(config, args.out, force_run=args.force_run, seed=args.seed)

    if args.command == "preflight":
        try:
            config = ScenarioConfig.from_json(args.config)
            table, _, _ = experiments.preflight(config)
        except (ParameterError, OSError, ValueError,
                InvalidDomainError, MeshValidationError) as exc:
            print(f"preflight failed: {exc}", file=sys.stderr)
            return 1
        print(experiments.format_preflight(table))
        return 0

    if args.command == "mesh":
        if args.mesh_command == "gen":
            sides = frozenset(s for s in args.gamma1.split(",") if s)
            try:
                mesh = generate_rectangle(args.lx, args.ly, args.nx, args.ny, sides)
            except InvalidDomainError as exc:
                print(f"cannot generate mesh: {exc}", file=sys.stderr)
                return 1
            save_mesh(mesh, args.out)
            print(f"wrote {args.out}: {mesh.n_nodes} nodes, {mesh.n_triangles} "
                  f"triangles, area {mesh.total_area():.12g}")
            return 0
        if args.mesh_command == "check":
            try:
                mesh = load_mesh(args.path)
            except (MeshFormatError, MeshValidationError, InvalidDomainError, OSError) as exc:
                print(f"invalid mesh: {exc}", file=sys.stderr)
                return 1
            print(f"{args.path}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles, "
                  f"area {mesh.total_area():.12g}, "
                  f"|Gamma0| {mesh.gamma_length(0):.12g}, |Gamma1| {mesh.gamma_length(1):.12g}")
            return 0

    parser.error("unknown command")


if __name__ == "__main__":
    sys.exit(main())
