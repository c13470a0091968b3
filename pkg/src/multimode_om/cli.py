"""Command-line front end.

    mmom coeffs    --config params.json
    mmom sweep     --config sweep.json --out grid.csv
    mmom evolve    --config run.json --out traj.csv
    mmom resonance --config sweep.json --mode BS --out corr.csv
    mmom wigner    --snapshot rho.txt --keep 1 --out w.csv --pgm w.pgm

Parameter files are either flat ``SystemParams`` fields or
``{"scales": {...}, "resonance": "BS" | "PA"}`` in mean/difference form.
Exit codes: 0 ok, 1 invalid input, 2 numerical diagnostics, 3 I/O.
"""
from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from . import __version__
from . import coeffs as C
from .dynamics import DiagnosticsError, ModelTier, SpaceError, TierError, compare_tiers, evolve
from .fock import FockSpace, fock_state, mode_rotate, partial_trace, read_snapshot, thermal, write_snapshot
from .model import ParameterError, SystemParams, derived_scales, from_scales, validate
from .observables import GridError, wigner

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
OUTPUT_ENV = "MMOM_OUTPUT_DIR"

SCALE_KEYS = ("OmegaBar", "deltaOmega", "DeltaBar", "kappa", "G1", "G2", "alpha")
EXTRA_KEYS = ("zHO1", "zHO2", "gamma1", "gamma2", "nth1", "nth2")
TARGETS = ("JBS", "GammaTotal", "JPA", "xiPA", "resonance-correction-BS",
           "resonance-correction-PA", "jbs-zeros")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling

def read_json(path):
    """Parse a JSON file; a bare name like ``fig3`` falls back to the bundled configs."""
    if not os.path.exists(path) and os.sep not in str(path):
        bundled = bundled_config(str(path).removesuffix(".json"))
        if os.path.exists(bundled):
            path = bundled
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def bundled_config(name: str) -> str:
    return str(resources.files("multimode_om") / "configs" / f"{name}.json")


def scales_to_params(scales: dict) -> SystemParams:
    unknown = sorted(set(scales) - set(SCALE_KEYS) - set(EXTRA_KEYS) - {"G", "split"})
    if unknown:
        raise ConfigError(f"unknown scale keys: {', '.join(unknown)}")
    s = dict(scales)
    if "G" in s:
        g = float(s.pop("G"))
        s.setdefault("G1", g)
        s.setdefault("G2", g)
    return from_scales(**{k: float(v) for k, v in s.items()})


def params_from_config(data: dict, bare=False):
    """Resolve a parameter block into ``SystemParams``.

    Returns ``(params, resonance_mode)``; with a resonance mode the pump
    detunings are placed on that resonance (light-shift corrected unless
    ``bare``).
    """
    if not isinstance(data, dict):
        raise ConfigError("parameter block must be a JSON object")
    mode = data.get("resonance")
    if mode not in (None, "BS", "PA"):
        raise ConfigError(f"resonance must be 'BS' or 'PA', got {mode!r}")
    if "scales" in data:
        extra = sorted(set(data) - {"scales", "resonance", "name", "note"})
        if extra:
            raise ConfigError(f"unexpected keys next to 'scales': {', '.join(extra)}")
        p = scales_to_params(data["scales"])
        DeltaBar = float(data["scales"].get("DeltaBar", 0.0))
    else:
        p = SystemParams.from_dict({k: v for k, v in data.items()
                                    if k not in ("resonance", "name", "note")})
        DeltaBar = 0.5 * (p.Delta1 + p.Delta2)
    validate(p)
    if mode is not None:
        p = C.resonant_params(p, mode, DeltaBar, bare=bare)
    return p, mode


def header_lines(command: str, params=None, extra=None) -> list[str]:
    lines = [f"multimode-om {__version__}", f"command: {command}"]
    if params is not None:
        lines.append("params: " + json.dumps(params.to_dict(), sort_keys=True))
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {json.dumps(v, sort_keys=True)}")
    return lines


def _resolve_out(path, default_name):
    if path:
        return path
    d = os.environ.get(OUTPUT_ENV)
    if d:
        return os.path.join(d, default_name)
    return None


def _emit(text: str, path):
    """Write atomically, or to stdout when no destination is configured."""
    if path is None:
        sys.stdout.write(text)
        return
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".mmom-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.17g}"


def csv_text(header, columns, rows) -> str:
    out = [f"# {h}" for h in header]
    out.append(",".join(columns))
    for r in rows:
        out.append(",".join(fmt(v) for v in r))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# coeffs

def _floatify(d):
    return {k: (None if v is None else float(v)) for k, v in d.items()}


def coeffs_report(p: SystemParams, mode=None, resonance="auto") -> dict:
    sc = derived_scales(p)
    report = {
        "version": __version__,
        "params": p.to_dict(),
        "derived": asdict(sc),
        "spring_shifts": list(C.spring_shifts(p)),
        "weak_coupling_ratio": validate(p, raise_on_error=False).weak_coupling_ratio,
    }
    for kind, fn in (("BS", C.bs_coefficients), ("PA", C.pa_coefficients)):
        if mode not in (None, kind):
            continue
        try:
            c = fn(p, resonance)
        except C.CoefficientError as exc:
            if mode == kind:
                raise
            report[kind] = {"error": str(exc)}
            continue
        report[kind] = {"rates": _floatify(c.rates), "frequencies": list(c.frequencies),
                        "anti_damped": list(c.anti_damped)}
    return report


def cmd_coeffs(args) -> int:
    data = read_json(args.config)
    p, mode = params_from_config(data, bare=args.bare_resonance)
    rep = coeffs_report(p, mode, "bare" if args.bare_resonance else "auto")
    text = json.dumps(rep, indent=2, sort_keys=True, allow_nan=True) + "\n"
    _emit(text, _resolve_out(args.out, "coeffs.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class Axis:
    name: str
    min: float
    max: float
    points: int
    scale: str = "linear"

    def values(self) -> np.ndarray:
        if self.points < 2:
            raise ConfigError(f"axis {self.name}: points must be >= 2")
        if self.scale == "linear":
            return np.linspace(self.min, self.max, self.points)
        if self.scale == "log":
            if self.min <= 0 or self.max <= 0:
                raise ConfigError(f"axis {self.name}: log scale needs positive bounds")
            return np.geomspace(self.min, self.max, self.points)
        raise ConfigError(f"axis {self.name}: scale must be linear or log")


@dataclass
class SweepSpec:
    axes: list
    fixed: dict
    target: str
    out: str | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        if not isinstance(data, dict):
            raise ConfigError("sweep spec must be a JSON object")
        unknown = sorted(set(data) - {"axes", "fixed", "target", "out", "name", "note"})
        if unknown:
            raise ConfigError(f"unknown sweep keys: {', '.join(unknown)}")
        try:
            axes = [Axis(**a) for a in data["axes"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad axis definition: {exc}") from None
        target = data.get("target")
        if target not in TARGETS:
            raise ConfigError(f"target must be one of {', '.join(TARGETS)}")
        allowed = set(SCALE_KEYS) | set(EXTRA_KEYS) | {"G"}
        names = [a.name for a in axes]
        for n in names:
            if n not in allowed:
                raise ConfigError(f"axis {n!r} is not a parameter name")
        if len(set(names)) != len(names):
            raise ConfigError("duplicate axis names")
        fixed = dict(data.get("fixed", {}))
        bad = sorted(set(fixed) - allowed)
        if bad:
            raise ConfigError(f"unknown fixed parameters: {', '.join(bad)}")
        for a in axes:
            a.values()
        return cls(axes, fixed, target, data.get("out"),
                   {k: data[k] for k in ("name", "note") if k in data})

    def grid(self):
        vals = [a.values() for a in self.axes]
        return [dict(zip([a.name for a in self.axes], combo))
                for combo in itertools.product(*vals)]


def _point_params(fixed, point, mode, bare):
    s = dict(fixed)
    s.update(point)
    p = scales_to_params(s)
    validate(p)
    if mode is not None:
        p = C.resonant_params(p, mode, float(s.get("DeltaBar", 0.0)), bare=bare)
    return p


def _eval_point(job):
    """Evaluate one grid point; never raises, errors go to the flag column."""
    target, fixed, point, bare = job
    try:
        if target in ("JBS", "GammaTotal"):
            p = _point_params(fixed, point, "BS", bare)
            c = C.bs_coefficients(p, "bare" if bare else "auto")
            return {"value": c.rates[target], "JBS": c.JBS, "GammaTotal": c.GammaTotal}, ""
        if target in ("JPA", "xiPA"):
            p = _point_params(fixed, point, "PA", bare)
            c = C.pa_coefficients(p, "bare" if bare else "auto")
            return {"value": c.rates[target], "JPA": c.JPA, "GammaTotal": c.rates["GammaTotal"]}, ""
        if target.startswith("resonance-correction"):
            mode = target.rsplit("-", 1)[1]
            p = _point_params(fixed, point, None, True)
            sol = C.resonance_detunings(mode, float({**fixed, **point}.get("DeltaBar", 0.0)), p)
            return {"value": sol.correction, "Delta1": sol.Delta1, "Delta2": sol.Delta2,
                    "iterations": sol.iterations, "residual": sol.residual}, ""
        if target == "jbs-zeros":
            p = _point_params(fixed, point, None, True)
            roots = C.jbs_zeros(p)
            lo = roots[0] if roots else float("nan")
            hi = roots[-1] if roots else float("nan")
            return {"value": len(roots), "root_lo": lo, "root_hi": hi}, ""
    except C.ConvergenceError as exc:
        return {"value": float("nan"), "residual": exc.residual}, f"not-converged: {exc}"
    except (ParameterError, C.CoefficientError, ConfigError, ValueError) as exc:
        return {"value": float("nan")}, str(exc)
    raise AssertionError(target)


EXTRA_COLUMNS = {
    "JBS": ("GammaTotal",), "GammaTotal": ("JBS",),
    "JPA": ("GammaTotal",), "xiPA": ("JPA", "GammaTotal"),
    "resonance-correction-BS": ("Delta1", "Delta2", "iterations", "residual"),
    "resonance-correction-PA": ("Delta1", "Delta2", "iterations", "residual"),
    "jbs-zeros": ("root_lo", "root_hi"),
}


def run_sweep(spec: SweepSpec, workers=1, bare=False):
    """Returns ``(columns, rows)`` in grid order."""
    grid = spec.grid()
    jobs = [(spec.target, spec.fixed, pt, bare) for pt in grid]
    if workers > 1 and len(jobs) > 1:
        chunk = max(1, len(jobs) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_eval_point, jobs, chunksize=chunk))
    else:
        results = [_eval_point(j) for j in jobs]
    values = np.array([r[0]["value"] for r in results], dtype=float)
    finite = values[np.isfinite(values)]
    vmax = np.max(np.abs(finite)) if finite.size else np.nan
    extras = EXTRA_COLUMNS[spec.target]
    names = [a.name for a in spec.axes]
    columns = names + [spec.target, f"{spec.target}_norm", *extras, "error"]
    rows = []
    for pt, (res, err), v in zip(grid, results, values):
        norm = v / vmax if vmax and np.isfinite(vmax) else float("nan")
        rows.append([pt[n] for n in names] + [v, norm]
                    + [res.get(e, float("nan")) for e in extras]
                    + [err.replace(",", ";").replace("\n", " ")])
    return columns, rows


def _workers(n):
    return n if n else (os.cpu_count() or 1)


def cmd_sweep(args, force_target=None) -> int:
    data = read_json(args.config)
    if force_target:
        data = dict(data)
        data["target"] = force_target
    spec = SweepSpec.from_dict(data)
    columns, rows = run_sweep(spec, _workers(args.workers), args.bare_resonance)
    head = header_lines("sweep" if not force_target else "resonance", extra={
        "target": spec.target, "fixed": spec.fixed,
        "axes": [asdict(a) for a in spec.axes], "bare_resonance": bool(args.bare_resonance),
        **spec.meta})
    _emit(csv_text(head, columns, rows), _resolve_out(args.out or spec.out, "sweep.csv"))
    failed = sum(1 for r in rows if r[-1])
    if failed:
        print(f"{failed} of {len(rows)} grid points flagged", file=sys.stderr)
    return EXIT_OK


def cmd_resonance(args) -> int:
    return cmd_sweep(args, force_target=f"resonance-correction-{args.mode}")


# ---------------------------------------------------------------------------
# evolve

def initial_state(spec, space: FockSpace):
    if spec in (None, "vacuum") or (isinstance(spec, dict) and spec.get("vacuum")):
        return fock_state(space, [0] * space.nmodes)
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ConfigError("initial state must be 'vacuum', {'fock': [...]} or {'thermal': [...]}")
    (kind, vals), = spec.items()
    vals = list(vals)
    if len(vals) != space.nmodes:
        raise ConfigError(f"initial {kind} list needs {space.nmodes} entries")
    if kind == "fock":
        if any(v < 0 or v >= c for v, c in zip(vals, space.cutoffs)):
            raise ConfigError(f"Fock occupations {vals} exceed cutoffs {space.cutoffs}")
        return fock_state(space, vals)
    if kind == "thermal":
        return thermal(space, vals)
    raise ConfigError(f"unknown initial state kind {kind!r}")


RUN_KEYS = {"params", "params_file", "tier", "compare", "initial", "t_end", "t_end_units",
            "dt", "samples", "observables", "snapshot_times", "cutoffs", "dissipators",
            "thermal", "drive_term", "name", "note"}


def _time_unit(units, p):
    if units in (None, "1"):
        return 1.0
    if units == "1/JBS":
        return 1.0 / abs(C.bs_coefficients(p).JBS)
    if units == "1/JPA":
        return 1.0 / abs(C.pa_coefficients(p).JPA)
    if units == "1/GammaPlus":
        return 1.0 / C.pa_coefficients(p).GammaPlus
    raise ConfigError(f"unknown t_end_units {units!r}")


def cmd_evolve(args) -> int:
    cfg = read_json(args.config)
    if not isinstance(cfg, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(cfg) - RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown run keys: {', '.join(unknown)}")
    if "params_file" in cfg:
        pdata = read_json(os.path.join(os.path.dirname(os.path.abspath(args.config)),
                                       cfg["params_file"]))
    else:
        pdata = cfg.get("params")
    p, _ = params_from_config(pdata, bare=args.bare_resonance)
    if "t_end" not in cfg:
        raise ConfigError("run config needs t_end")
    t_end = float(cfg["t_end"]) * _time_unit(cfg.get("t_end_units"), p)
    samples = int(cfg.get("samples", 101))
    observables = tuple(cfg.get("observables", ("n1", "n2")))
    opts = {k: cfg[k] for k in ("dissipators", "thermal", "drive_term") if k in cfg}
    if args.bare_resonance:
        opts["resonance"] = "bare"
    out = _resolve_out(args.out, "trajectory.csv")
    head = header_lines("evolve", p, extra={k: cfg[k] for k in sorted(cfg)
                                            if k not in ("params", "params_file")})
    if "compare" in cfg:
        try:
            tiers = [ModelTier.parse(t) for t in cfg["compare"]]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        mech = tuple(cfg.get("cutoffs", (6, 6)))[-2:]
        rho0 = initial_state(cfg.get("initial"), FockSpace(mech))
        rep = compare_tiers(p, rho0, t_end, tiers=tiers, mech_cutoffs=mech, samples=samples,
                            workers=_workers(args.workers), strict=False, **opts)
        columns, cols = ["time"], [rep.times]
        for t in tiers:
            columns += [f"n1_{t.value}", f"n2_{t.value}"]
            cols += [rep.occupations[t][:, 0], rep.occupations[t][:, 1]]
        for (a, b), dev in rep.max_relative_deviation.items():
            head.append(f"max_relative_deviation {a.value}/{b.value}: "
                        f"{fmt(dev[0])} {fmt(dev[1])}")
        _emit(csv_text(head, columns, zip(*cols)), out)
        bad = [t.value for t, d in rep.diagnostics.items() if not d.valid]
        if bad:
            print(f"diagnostics failed for tiers: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC if bad else EXIT_OK
    try:
        tier = ModelTier.parse(cfg.get("tier", "bs"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cut = tuple(cfg["cutoffs"]) if "cutoffs" in cfg else None
    from .dynamics import default_cutoffs
    space = FockSpace(cut or default_cutoffs(tier))
    rho0 = initial_state(cfg.get("initial"), space)
    times = np.linspace(0.0, t_end, samples)
    snaps = sorted(float(s) * _time_unit(cfg.get("t_end_units"), p)
                   for s in cfg.get("snapshot_times", []))
    if snaps:
        times = np.unique(np.concatenate([times, snaps]))
    try:
        traj = evolve(tier, p, rho0, t_end, cfg.get("dt"), times=times,
                      cutoffs=space.cutoffs, strict=True, **opts)
        status = EXIT_OK
    except DiagnosticsError as exc:
        traj, status = exc.trajectory, EXIT_NUMERIC
        print(f"diagnostics failed: {exc}", file=sys.stderr)
    d = traj.diagnostics
    head.append("diagnostics: " + json.dumps(asdict(d), sort_keys=True))
    cols = [traj.observable(o) for o in observables]
    _emit(csv_text(head, ["time", *observables], zip(traj.times, *cols)), out)
    if snaps:
        base = out if out else os.path.join(os.environ.get(OUTPUT_ENV, "."), "trajectory.csv")
        for i, ts in enumerate(snaps):
            k = int(np.argmin(np.abs(traj.times - ts)))
            write_snapshot(f"{base}.snap{i}.txt", traj.states[k], space, traj.times[k])
    return status


# ---------------------------------------------------------------------------
# wigner

def cmd_wigner(args) -> int:
    rho, space, head = read_snapshot(args.snapshot)
    if args.rotate is not None:
        if space.nmodes < 2:
            raise ConfigError("rotation needs two modes")
        rho = mode_rotate(rho, space, (space.nmodes - 2, space.nmodes - 1), args.rotate)
    keep = args.keep if args.keep is not None else space.nmodes - 1
    single = partial_trace(rho, space, [keep]) if space.nmodes > 1 else rho
    lim = args.extent
    grid = wigner(single, (-lim, lim), (-lim, lim), args.step)
    out = _resolve_out(args.out, "wigner.csv")
    rows = [(x, q, grid.W[i, j]) for i, x in enumerate(grid.x) for j, q in enumerate(grid.p)]
    lines = header_lines("wigner", extra={"snapshot": head, "keep": keep,
                                          "rotate": args.rotate, "step": args.step})
    _emit(csv_text(lines, ["x", "p", "W"], rows), out)
    if args.pgm:
        grid.to_pgm(args.pgm)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmom", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"multimode-om {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int, default=0, help="0 means all cores")
        sp.add_argument("--bare-resonance", action="store_true")

    common(sub.add_parser("coeffs", help="closed-form coefficients for one parameter set"))
    common(sub.add_parser("sweep", help="evaluate a target over a parameter grid"))
    common(sub.add_parser("evolve", help="integrate a master-equation tier"))
    r = sub.add_parser("resonance", help="light-shift corrected pump detunings")
    common(r)
    r.add_argument("--mode", choices=("BS", "PA"), default="BS")
    w = sub.add_parser("wigner", help="Wigner grid of one mode of a snapshot")
    common(w, config_required=False)
    w.add_argument("--snapshot", required=True)
    w.add_argument("--keep", type=int)
    w.add_argument("--rotate", type=float, help="two-mode rotation angle before tracing")
    w.add_argument("--extent", type=float, default=3.0)
    w.add_argument("--step", type=float, default=0.1)
    w.add_argument("--pgm")
    return ap


COMMANDS = {"coeffs": cmd_coeffs, "sweep": cmd_sweep, "evolve": cmd_evolve,
            "resonance": cmd_resonance, "wigner": cmd_wigner}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParameterError, C.CoefficientError, TierError, SpaceError,
            GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DiagnosticsError, C.ConvergenceError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
