"""Command line interface: ``udgeeg <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .dg import assemble_system
from .harness import (BOX_EDGE, StudyConfig, build_model, generate_electrodes,
                      mean_referenced, rdm_mag, run_study)
from .solver import SolverLog, build_preconditioner, cg_solve
from .source import DipoleSource, assemble_dipole_rhs, read_dipoles_csv
from .sphere import analytic_potential, four_sphere_model
from .transfer import build_restriction, compute_transfer, write_transfer

log = logging.getLogger("udgeeg")

# reference cut-cell counts of the four-sphere model, compared by mesh-info
REFERENCE_CUT_CELLS = {16: 4840, 32: 27264, 64: 166848}
EXTENDED_CELLS = {"udg": 64, "voxel-dg": 97}


def _config(args) -> StudyConfig:
    cfg = StudyConfig.load(args.config) if getattr(args, "config", None) else StudyConfig()
    changes = {}
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "extended", False):
        changes["cells_per_dim"] = EXTENDED_CELLS[changes.get("mode", cfg.mode)]
    if getattr(args, "cells", None):
        changes["cells_per_dim"] = args.cells
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "output", None):
        changes["output_dir"] = args.output
    if getattr(args, "dipoles", None):
        changes["dipoles_per_ecc"] = args.dipoles
    if getattr(args, "electrodes", None):
        changes["electrode_count"] = args.electrodes
    if getattr(args, "eta", None):
        changes["assembly"] = {"eta": args.eta}
    return cfg.updated(**changes) if changes else cfg


def _dipole(args) -> DipoleSource:
    if args.dipole is None:
        raise SystemExit("--dipole x y z mx my mz is required")
    v = [float(x) for x in args.dipole]
    return DipoleSource(v[:3], v[3:])


def cmd_mesh_info(args) -> int:
    cfg = _config(args)
    model = build_model(cfg)
    c = model.cm.census()
    c["mode"] = cfg.mode
    c["build_seconds"] = round(model.build_seconds, 3)
    ref = REFERENCE_CUT_CELLS.get(cfg.cells_per_dim)
    if ref is not None and cfg.mode == "udg":
        c["reference_cut_cells"] = ref
        c["relative_difference"] = (c["cut_cells"] - ref) / ref
    vol = model.cm.volume
    c["domain_volumes_mm3"] = {n: float(vol[model.cm.domain == i].sum())
                              for i, n in enumerate(model.spec.names)}
    print(json.dumps(c, indent=2))
    return 0


def cmd_solve(args) -> int:
    cfg = _config(args)
    model = build_model(cfg)
    cm = model.cm
    d = _dipole(args)
    M = assemble_system(cm, cfg.assembly)
    f = assemble_dipole_rhs(cm, d, domain=model.spec.index("brain"),
                            allow_nearest=cfg.mode == "voxel-dg")
    res = cg_solve(M, f.dense(), cfg.solver)
    es = generate_electrodes(cfg.electrode_count, cfg.electrode_radius, cfg.center)
    R = build_restriction(cm, es, model.spec.index("skin"))
    # rows phi(p0) - phi(p_k); with the partial-integration right-hand side this
    # is the physical potential difference u(p_k) - u(p0), as in the transfer path
    diff = R.matrix @ res.x
    out = Path(args.output or "potential.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("x,y,z,potential\n")
        for p, v in zip(es.electrodes, diff):
            fh.write(",".join(repr(float(t)) for t in (*p, v)) + "\n")
    if args.coefficients:
        np.save(args.coefficients, res.x)
    ana = analytic_potential(model.sphere, d, es)
    rdm, mag = rdm_mag(mean_referenced(ana), mean_referenced(diff))
    print(json.dumps({"iterations": int(res.iterations), "relative_residual": float(res.residual),
                      "converged": bool(res.converged), "relocated": f.relocated,
                      "rdm_vs_sphere": rdm, "mag_vs_sphere": mag, "output": str(out)}, indent=2))
    return 0 if res.converged else 2


def cmd_transfer(args) -> int:
    cfg = _config(args)
    model = build_model(cfg)
    M = assemble_system(model.cm, cfg.assembly)
    es = generate_electrodes(cfg.electrode_count, cfg.electrode_radius, cfg.center)
    R = build_restriction(model.cm, es, model.spec.index("skin"))
    slog = SolverLog()
    t0 = time.perf_counter()
    T = compute_transfer(M, R, cfg.solver, build_preconditioner(M, cfg.solver.preconditioner), log=slog)
    out = Path(args.output or "transfer.udgtm")
    write_transfer(out, T)
    if args.log:
        slog.write_csv(args.log)
    print(json.dumps({"electrodes": T.n_electrodes, "dofs": T.n_dofs,
                      "iterations_max": int(T.iterations.max()),
                      "seconds": round(time.perf_counter() - t0, 2), "output": str(out)}, indent=2))
    return 0


def cmd_study(args) -> int:
    cfg = _config(args)
    res = run_study(cfg)
    lines = []
    for g in res.summary["groups"]:
        lines.append(f"ecc {g['eccentricity']:.4f} {g['orientation']:<10s} "
                     f"RDM median {g['rdm']['median']:7.3f} IQR {g['rdm']['iqr']:7.3f}   "
                     f"MAG median {g['mag']['median']:8.3f} IQR {g['mag']['iqr']:7.3f}")
    print("\n".join(lines))
    print(f"outputs written to {cfg.output_dir} (config hash {res.summary['config_hash']})")
    return 0


def cmd_analytic(args) -> int:
    cfg = _config(args)
    sphere = four_sphere_model(cfg.center)
    es = generate_electrodes(cfg.electrode_count, cfg.electrode_radius, cfg.center)
    dips = read_dipoles_csv(args.dipoles_file) if args.dipoles_file else [_dipole(args)]
    out = Path(args.output) if args.output else None
    rows = [analytic_potential(sphere, d, es) for d in dips]
    if out is None:
        for u in rows:
            print(" ".join(f"{v:.9e}" for v in u))
    else:
        with open(out, "w") as fh:
            fh.write("dipole,electrode,potential\n")
            for i, u in enumerate(rows):
                for k, v in enumerate(u, start=1):
                    fh.write(f"{i},{k},{float(v)!r}\n")
        print(f"{len(rows)} potential vectors written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udgeeg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML study configuration")
        sp.add_argument("--mode", choices=("udg", "voxel-dg"))
        sp.add_argument("--cells", type=int, help=f"cells per dimension over the {BOX_EDGE} mm box")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--extended", action="store_true",
                        help="fine mesh (N_d=64 unfitted, 2 mm voxels)")
        sp.add_argument("--electrodes", type=int, help="electrode count including the reference")
        sp.add_argument("--eta", type=float, help="penalty parameter")
        sp.add_argument("-o", "--output")

    sp = sub.add_parser("mesh-info", help="cut-cell census of the four-sphere model")
    common(sp)
    sp.set_defaults(func=cmd_mesh_info)

    sp = sub.add_parser("solve", help="full solve for one dipole, electrode potentials to CSV")
    common(sp)
    sp.add_argument("--dipole", nargs=6, metavar=("X", "Y", "Z", "MX", "MY", "MZ"))
    sp.add_argument("--coefficients", help="save the DG coefficient vector (.npy, sign convention of the solver)")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("transfer", help="compute and store the transfer matrix")
    common(sp)
    sp.add_argument("--log", help="solver statistics CSV")
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("study", help="sphere-model verification study")
    common(sp)
    sp.add_argument("--dipoles", type=int, help="dipoles per eccentricity and orientation")
    sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("analytic", help="multilayer-sphere electrode potentials")
    common(sp)
    sp.add_argument("--dipole", nargs=6, metavar=("X", "Y", "Z", "MX", "MY", "MZ"))
    sp.add_argument("--dipoles-file", help="CSV with x,y,z,mx,my,mz per line")
    sp.set_defaults(func=cmd_analytic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
