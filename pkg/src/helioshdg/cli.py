"""Command line driver: ``mesh``, ``solve``, ``compare`` and ``stats``.

A run is described by a TOML file; ``--set section.key=value`` overrides
any key and a few common keys have their own flags.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib

from . import postproc
from .background import (DEFAULT_SOURCE_VARIANCES, GaussianSource, PerturbationField,
                         SolverConfig, constant_background, gaussian_spot_map, load_radial_profile, load_surface_map,
                         load_volume_table, toy_star)
from .blr import analyze, backward_error, condition_estimate, factorize, solve
from .blr.io import write_matrix_market, write_stats_json
from .hdg.assembly import HdgOptions, assemble_global
from .hdg.field import WaveField, reconstruct_volume
from .mesh import LayerSpec, build_cube, build_layered_ball, export_msh, from_cells, import_msh

log = logging.getLogger("helioshdg")

DEFAULTS = {
    "mesh": {"generator": "ball", "interior_radii": [0.5], "surface_radii": [0.8, 1.0],
             "angular_resolution": 2, "n": 4, "length": 1.0},
    "background": {"kind": "toy_star", "length_scale": 1.0, "density_decay": 20.0,
                   "c_center": 1.0, "c_surface": 0.5, "gravity": 1.0},
    "perturbation": {"kind": "none", "alpha": 1.0, "r_c": 0.995, "variance": 8.5e-4,
                     "r_lo": 0.70, "r_hi": 0.99},
    "physics": {"formulation": "liouville", "attenuation_uhz": 10.0, "tau_scale": 1e6,
                "order": "auto", "p_min": 1, "p_max": 8},
    "sources": [{"r": 0.9, "lat_deg": 90.0, "lon_deg": 0.0}],
    "solver": {"eps_blr": "full-rank", "mixed_precision": False, "ordering": "amd",
               "with_cond": True, "eps_sweep": [1e-5, 1e-7, 1e-9]},
    "output": {"dir": "helioshdg-out", "formats": ["vtk", "npz"], "matrix_market": False,
               "sphere_radius": 0.95, "plane_extent": 1.0, "plane_n": 101, "arc_radius": 0.95,
               "n_lat": 181, "n_lon": 361},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with path.open("rb") as fh:
            cfg = _merge(cfg, tomllib.load(fh))
        base_dir = path.parent
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(val.strip())
    cfg["_base_dir"] = str(base_dir)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    phys = cfg["physics"]
    if "frequencies_mhz" not in phys and "omegas" not in phys:
        raise ConfigError("physics needs 'frequencies_mhz' or 'omegas'")
    freqs = phys.get("frequencies_mhz", phys.get("omegas"))
    if not isinstance(freqs, list) or not freqs or any(f <= 0 for f in freqs):
        raise ConfigError("frequencies must be a non-empty list of positive numbers")
    if not cfg["sources"]:
        raise ConfigError("at least one source is required")


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_") and k != "output"}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()[:16]


def _resolve(cfg, p):
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_base_dir"]) / p


def build_mesh(cfg: dict):
    m = cfg["mesh"]
    if "file" in m:
        return import_msh(_resolve(cfg, m["file"]))
    gen = m["generator"]
    if gen == "ball":
        return build_layered_ball(LayerSpec(m["interior_radii"], m["surface_radii"],
                                            int(m["angular_resolution"])))
    if gen == "cube":
        L = float(m["length"])
        return build_cube(int(m["n"]), L, origin=(-L / 2, -L / 2, -L / 2))
    raise ConfigError(f"unknown mesh generator {gen!r}")


def build_background(cfg: dict, r_max: float):
    b = cfg["background"]
    if "file" in b:
        return load_radial_profile(_resolve(cfg, b["file"]), float(b["length_scale"]), r_max)
    if b["kind"] == "toy_star":
        return toy_star(r_max, b["density_decay"], b["c_center"], b["c_surface"], b["gravity"])
    if b["kind"] == "constant":
        return constant_background(r_max)
    raise ConfigError(f"unknown background kind {b['kind']!r}")


def build_perturbation(cfg: dict):
    p = cfg["perturbation"]
    kind = p["kind"]
    if kind == "none":
        return None
    common = dict(alpha=float(p["alpha"]))
    if kind == "active_region":
        if "surface_map" in p:
            smap = load_surface_map(_resolve(cfg, p["surface_map"]))
        elif "spot" in p:
            s = p["spot"]
            smap = gaussian_spot_map(s["lat_deg"], s["lon_deg"], s["width_deg"],
                                     s.get("depth", 0.9))
        else:
            raise ConfigError("active_region needs 'surface_map' or 'spot'")
        return PerturbationField("active_region", surface_map=smap, r_c=p["r_c"],
                                 variance=p["variance"], **common)
    if kind == "volumetric":
        table = load_volume_table(_resolve(cfg, p["volume_table"]))
        return PerturbationField("volumetric", volume_table=table, r_lo=p["r_lo"],
                                 r_hi=p["r_hi"], **common)
    raise ConfigError(f"unknown perturbation kind {kind!r}")


def build_sources(cfg: dict):
    out = []
    for s in cfg["sources"]:
        dv = DEFAULT_SOURCE_VARIANCES
        var = (s.get("var_r", dv[0]), s.get("var_theta", dv[1]), s.get("var_phi", dv[2]))
        out.append(GaussianSource((s["r"], math.radians(s["lat_deg"]), math.radians(s["lon_deg"])),
                                  var))
    return out


def solver_configs(cfg: dict):
    """(label, SolverConfig) per frequency."""
    phys, sol = cfg["physics"], cfg["solver"]
    eps = sol["eps_blr"]
    eps = None if eps in ("full-rank", None, 0) else float(eps)
    kw = dict(formulation=phys["formulation"], eps_blr=eps,
              mixed_precision=bool(sol["mixed_precision"]), tau_scale=float(phys["tau_scale"]))
    out = []
    if "frequencies_mhz" in phys:
        for f in phys["frequencies_mhz"]:
            out.append((f"{f:g}mHz", SolverConfig.from_frequency(f, phys["attenuation_uhz"], **kw)))
    else:
        gamma = phys.get("gamma_att", 0.0)
        for om in phys["omegas"]:
            out.append((f"omega{om:g}", SolverConfig(omega=float(om), gamma_att=float(gamma), **kw)))
    return out


def _orders(cfg):
    o = cfg["physics"]["order"]
    return None if o == "auto" else int(o)


# ---------------------------------------------------------------------------
# pipeline


def run_frequency(mesh, bg, pert, scfg: SolverConfig, sources, cfg: dict):
    """assemble -> analyze -> factorize once -> solve every source -> reconstruct."""
    phys, sol = cfg["physics"], cfg["solver"]
    orders = _orders(cfg)
    if orders is None:
        from .hdg.assembly import assign_orders
        orders = assign_orders(mesh, bg, scfg, pert, p_min=int(phys["p_min"]),
                               p_max=int(phys["p_max"]))
    t0 = time.perf_counter()
    system = assemble_global(mesh, bg, pert, scfg, sources, orders, HdgOptions())
    t_asm = time.perf_counter() - t0
    plan, t_an = analyze(system.K, system.face_offsets, sol["ordering"])
    fac = factorize(system.K, plan, scfg.eps_blr, scfg.mixed_precision)
    lam = solve(fac, system.S)
    st = fac.stats
    st.analysis_time = t_an
    st.bwd = backward_error(system.K, lam, system.S)
    if sol["with_cond"]:
        st.cond = condition_estimate(fac)
    fld = reconstruct_volume(system, lam)
    stats = st.as_dict()
    stats.update({
        "n_trace": system.n_trace, "n_volume": system.n_volume, "n_cells": mesh.n_cells,
        "n_faces": mesh.n_faces, "n_sources": len(sources), "omega": scfg.omega,
        "formulation": scfg.formulation, "eps_blr": scfg.eps_blr,
        "mixed_precision": scfg.mixed_precision, "ordering": sol["ordering"],
        "fronts": plan.n_fronts, "max_front": plan.summary()["max_front"],
        "orders": {str(int(p)): int(c) for p, c in zip(*np.unique(system.cell_orders,
                                                                  return_counts=True))},
    })
    stats["timings"]["assembly"] = t_asm
    return system, fld, stats


def save_field(fld: WaveField, directory: Path, formats, cfg_hash: str, label: str, stats: dict):
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    # the npz copy is always written since the cache reloads it
    lengths = np.array([v.shape[0] for v in fld.volume])
    np.savez_compressed(directory / "field.npz", vertices=fld.mesh.vertices,
                        cells=fld.mesh.cells, cell_orders=fld.cell_orders,
                        face_offsets=fld.face_offsets, trace=fld.trace,
                        volume=np.concatenate(fld.volume, axis=0), lengths=lengths)
    files["npz"] = "field.npz"
    if "vtk" in formats:
        files["vtk"] = []
        for s in range(fld.n_sources):
            name = f"field_s{s}.vtk"
            postproc.write_vtk(fld, directory / name, source=s, title=f"{label} source {s}")
            files["vtk"].append(name)
    write_stats_json(stats, directory / "stats.json")
    manifest = {"config_hash": cfg_hash, "label": label, "files": files, "stats": "stats.json"}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_field(directory: Path) -> WaveField:
    data = np.load(Path(directory) / "field.npz")
    mesh = from_cells(data["vertices"], data["cells"], reorient=False)
    vol = np.split(data["volume"], np.cumsum(data["lengths"])[:-1], axis=0)
    return WaveField(mesh, data["cell_orders"], data["face_offsets"], data["trace"], list(vol))


def run_solve(cfg: dict, use_cache: bool = False):
    """Run every frequency of ``cfg``; returns {label: (field, stats)}."""
    out_dir = Path(cfg["output"]["dir"])
    h = config_hash(cfg)
    results = {}
    mesh = None
    for label, scfg in solver_configs(cfg):
        fdir = out_dir / label
        man = fdir / "manifest.json"
        if use_cache and man.exists() and json.loads(man.read_text())["config_hash"] == h:
            log.info("using cached field in %s", fdir)
            results[label] = (load_field(fdir), json.loads((fdir / "stats.json").read_text()))
            continue
        if mesh is None:
            mesh = build_mesh(cfg)
            r_max = float(np.linalg.norm(mesh.vertices, axis=1).max()) * (1 + 1e-9)
            bg = build_background(cfg, r_max)
            pert = build_perturbation(cfg)
            sources = build_sources(cfg)
        system, fld, stats = run_frequency(mesh, bg, pert, scfg, sources, cfg)
        stats["config_hash"] = h
        save_field(fld, fdir, cfg["output"]["formats"], h, label, stats)
        if cfg["output"].get("matrix_market"):
            write_matrix_market(system.K, fdir / "K.mtx")
        log.info("%s: %d trace dofs, bwd %.2e, n_op_pct %.1f", label, system.n_trace,
                 stats["bwd"], stats["n_op_pct"])
        results[label] = (fld, stats)
    return results


def _locus(cfg, metric):
    o = cfg["output"]
    if metric == "sphere":
        return postproc.SphereLocus(o["sphere_radius"], o["n_lat"], o["n_lon"])
    if metric == "plane":
        return postproc.PlaneLocus(o["plane_extent"], o["plane_n"])
    if metric == "arc":
        return postproc.ArcLocus(o["arc_radius"])
    raise ConfigError(f"unknown metric {metric!r}")


def run_compare(cfg_a: dict, cfg_b: dict, metric: str, out_dir: Path, source: int = 0):
    """Difference maps of b against the reference a, one CSV per frequency."""
    ra = run_solve(cfg_a, use_cache=True)
    rb = run_solve(cfg_b, use_cache=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for label in ra:
        if label not in rb:
            raise ConfigError(f"frequency {label} missing from the second configuration")
        loc = _locus(cfg_a, metric)
        sa = postproc.sample_field(ra[label][0], loc, source)
        sb = postproc.sample_field(rb[label][0], loc, source)
        path = out_dir / f"diff_{metric}_{label}.csv"
        if metric == "sphere":
            lat, lon, e = postproc.relative_difference_sphere(sa, sb)
            postproc.write_map_csv(path, postproc.sphere_map_columns(lat, lon, e))
            summary[label] = {"max_e": float(np.nanmax(e)),
                              "argmax_lat_lon": postproc.max_location(lat, lon, e)}
        elif metric == "arc":
            t, e = postproc.relative_difference_arc(sa, sb)
            postproc.write_map_csv(path, postproc.arc_columns(t, e))
            summary[label] = {"max_e": float(np.nanmax(e))}
        else:
            e = postproc.relative_difference_plane(sa, sb)
            x = sa.coords
            postproc.write_map_csv(path, {"x": x[:, 0], "y": x[:, 1], "z": x[:, 2], "e": e})
            summary[label] = {"max_e": float(np.nanmax(e))}
        summary[label]["file"] = path.name
    (out_dir / f"compare_{metric}.json").write_text(json.dumps(summary, indent=2))
    return summary


STATS_COLUMNS = ("label", "eps_blr", "mixed_precision", "n_op_pct", "n_entries_pct",
                 "n_entries_pct_mp", "n_entries_pct_mp_alt", "bwd", "cond", "factorize_s",
                 "solve_s", "factor_memory")


def run_stats(cfg: dict, eps_list, out_path: Path):
    """Sweep eps_blr (plus full rank), with and without mixed precision."""
    mesh = build_mesh(cfg)
    r_max = float(np.linalg.norm(mesh.vertices, axis=1).max()) * (1 + 1e-9)
    bg = build_background(cfg, r_max)
    pert = build_perturbation(cfg)
    sources = build_sources(cfg)
    rows = []
    for label, scfg in solver_configs(cfg):
        orders = _orders(cfg)
        if orders is None:
            from .hdg.assembly import assign_orders
            orders = assign_orders(mesh, bg, scfg, pert, p_min=int(cfg["physics"]["p_min"]),
                                   p_max=int(cfg["physics"]["p_max"]))
        system = assemble_global(mesh, bg, pert, scfg, sources, orders)
        plan, _ = analyze(system.K, system.face_offsets, cfg["solver"]["ordering"])
        for eps in [None] + list(eps_list):
            for mixed in ([False] if eps is None else [False, True]):
                fac = factorize(system.K, plan, eps, mixed)
                lam = solve(fac, system.S)
                st = fac.stats
                st.bwd = backward_error(system.K, lam, system.S)
                if cfg["solver"]["with_cond"]:
                    st.cond = condition_estimate(fac)
                rows.append({"label": label, "eps_blr": "full-rank" if eps is None else eps,
                             "mixed_precision": mixed, "n_op_pct": st.n_op_pct,
                             "n_entries_pct": st.n_entries_pct,
                             "n_entries_pct_mp": st.n_entries_pct_mp,
                             "n_entries_pct_mp_alt": st.n_entries_pct_mp_alt, "bwd": st.bwd,
                             "cond": st.cond, "factorize_s": st.factorize_time,
                             "solve_s": st.solve_time, "factor_memory": st.factor_memory})
    out_path.parent.mkdir(parents=True, exist_ok=True)
    postproc.write_map_csv(out_path, {k: [r[k] for r in rows] for k in STATS_COLUMNS})
    return rows


# ---------------------------------------------------------------------------
# entry point


def _add_common(p):
    p.add_argument("config", nargs="?", help="TOML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a configuration key")
    p.add_argument("--out", help="output directory")
    p.add_argument("--eps-blr", help="BLR threshold or 'full-rank'")
    p.add_argument("--mixed-precision", action="store_true", default=None)
    p.add_argument("--ordering", choices=["amd", "nested_dissection", "natural"])
    p.add_argument("-v", "--verbose", action="store_true")


def _config_from_args(args, path=None):
    ov = list(args.overrides)
    if args.out:
        ov.append(f"output.dir={json.dumps(args.out)}")
    if args.eps_blr:
        ov.append(f"solver.eps_blr={json.dumps(args.eps_blr) if args.eps_blr == 'full-rank' else args.eps_blr}")
    if args.mixed_precision:
        ov.append("solver.mixed_precision=true")
    if args.ordering:
        ov.append(f"solver.ordering={json.dumps(args.ordering)}")
    return load_config(path if path is not None else args.config, ov)


def build_parser():
    ap = argparse.ArgumentParser(prog="helioshdg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("mesh", help="generate or import the mesh and write it as Gmsh 2.2")
    _add_common(p)
    p.add_argument("--msh", help="output .msh path (default: <out>/mesh.msh)")
    p = sub.add_parser("solve", help="solve every frequency and source of a configuration")
    _add_common(p)
    p = sub.add_parser("compare", help="difference maps between two configurations")
    _add_common(p)
    p.add_argument("other", help="TOML configuration of the compared run")
    p.add_argument("--metric", choices=["sphere", "plane", "arc"], default="sphere")
    p.add_argument("--source", type=int, default=0)
    p = sub.add_parser("stats", help="sweep eps_blr and write a CSV table")
    _add_common(p)
    p.add_argument("--eps", help="comma-separated thresholds (default from config)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
        out = Path(cfg["output"]["dir"])
        if args.command == "mesh":
            mesh = build_mesh(cfg)
            path = Path(args.msh) if args.msh else out / "mesh.msh"
            path.parent.mkdir(parents=True, exist_ok=True)
            export_msh(mesh, path)
            from .mesh import mesh_stats
            print(json.dumps({"file": str(path), **mesh_stats(mesh)}, default=float))
        elif args.command == "solve":
            res = run_solve(cfg)
            for label, (_, st) in res.items():
                print(f"{label}: n_trace={st['n_trace']} bwd={st['bwd']:.3e} "
                      f"n_op_pct={st['n_op_pct']:.1f} n_entries_pct={st['n_entries_pct']:.1f}")
        elif args.command == "compare":
            cfg_b = _config_from_args(args, args.other)
            cfg_b["output"]["dir"] = str(out / "other")
            cfg["output"]["dir"] = str(out / "reference")
            summary = run_compare(cfg, cfg_b, args.metric, out, args.source)
            print(json.dumps(summary, indent=2))
        elif args.command == "stats":
            eps = ([float(e) for e in args.eps.split(",")] if args.eps
                   else [float(e) for e in cfg["solver"]["eps_sweep"]])
            rows = run_stats(cfg, eps, out / "stats.csv")
            for r in rows:
                print(f"{r['label']} eps={r['eps_blr']} mp={r['mixed_precision']} "
                      f"op={r['n_op_pct']:.1f}% entries={r['n_entries_pct']:.1f}% "
                      f"mp={r['n_entries_pct_mp']:.1f}% bwd={r['bwd']:.2e}")
    except Exception as exc:          # every failure becomes a one-line diagnostic
        if args.verbose:
            log.exception("run failed")
        print(f"helioshdg: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
