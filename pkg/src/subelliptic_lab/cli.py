"""Config-driven experiment runner.

    subelliptic-lab run <command> --config cfg.json [--seed S] [--threads T] [--out DIR]
    subelliptic-lab schema

Commands: check-estimates, sample, verify:<ineq>, spi-scan, spi-probe,
isoperimetry, cheeger, report. Every run writes ``manifest.json`` first and
then its reports; reports carry the manifest hash (a digest of the command,
the resolved config and the package version) and never wall-clock data, so
reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import jsonschema
import numpy as np

from . import __version__
from . import calculus as calc
from . import geometry as geo
from . import inequalities as ineq
from . import isoperimetry as iso
from . import measures as ms
from .rng import stream, tag

SCHEMA_VERSION = 1
THREADS_ENV = "SUBELLIPTIC_LAB_THREADS"
INEQUALITIES = ("ubound", "merged_ubound", "hardy", "almost_hardy", "ckn", "fsobolev", "spi_required_beta")
COMMANDS = ("check-estimates", "sample", "spi-scan", "spi-probe", "isoperimetry", "cheeger", "report") + tuple(
    f"verify:{name}" for name in INEQUALITIES)

_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}}
_pos_int = {"type": "integer", "minimum": 1}
_num_list = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1}

SPACE_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "oneOf": [
        {"properties": {"kind": {"const": "Heisenberg"}, "k": _pos_int, "kappa": {"type": "number"}},
         "additionalProperties": False},
        {"properties": {"kind": {"const": "StepTwo"}, "n": _pos_int, "m": _pos_int, "B": _matrix,
                        "kappa": {"type": "number"}, "htype": {"type": "boolean"}},
         "required": ["n", "m", "B"], "additionalProperties": False},
        {"properties": {"kind": {"const": "Grushin"}, "n": _pos_int, "m": _pos_int,
                        "eta": {"type": "number", "exclusiveMinimum": 0}},
         "required": ["n", "m", "eta"], "additionalProperties": False},
        {"properties": {"kind": {"const": "Greiner"}, "n": _pos_int, "zeta": _pos_int},
         "required": ["n", "zeta"], "additionalProperties": False},
        {"properties": {"kind": {"const": "Filiform"}, "n": {"type": "integer", "minimum": 2}},
         "required": ["n"], "additionalProperties": False},
    ],
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "subelliptic-lab run config",
    "type": "object",
    "required": ["space", "p"],
    "additionalProperties": False,
    "properties": {
        "space": SPACE_SCHEMA,
        "p": {"type": "number", "minimum": 1},
        "q": {"type": "number", "minimum": 1, "maximum": 2},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "budgets": {
            "type": "object", "additionalProperties": False,
            "properties": {"z_budget": {"type": "integer", "minimum": 10_000}, "n_samples": _pos_int,
                           "cloud_size": _pos_int, "n_region": _pos_int, "n_chains": _pos_int},
        },
        "samples_file": {"type": "string"},
        "estimates": {
            "type": "object", "additionalProperties": False,
            "properties": {"exclusion_radius": {"type": "number", "exclusiveMinimum": 0},
                           "radii": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                     "minItems": 2, "maxItems": 2},
                           "mode": {"enum": ["auto", "fd"]},
                           "exact_gradient_tol": {"type": "number", "exclusiveMinimum": 0}},
        },
        "verify": {
            "type": "object", "additionalProperties": False,
            "properties": {"family": {"enum": ["standard", "global", "bumps", "tubes"]},
                           "method": {"enum": ["mc", "quadrature"]},
                           "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                           "R0": {"type": "number", "exclusiveMinimum": 0},
                           "theta": {"type": "number", "exclusiveMinimum": 0},
                           "epsilon": {"type": "number", "exclusiveMinimum": 0}},
        },
        "spi": {
            "type": "object", "additionalProperties": False,
            "properties": {"epsilons": _num_list, "t_grid": _num_list,
                           "C": {"type": "number", "exclusiveMinimum": 0},
                           "min_sigma": {"type": "number"}},
        },
        "isoperimetry": {
            "type": "object", "additionalProperties": False,
            "properties": {"eps_grid": _num_list, "variant": {"enum": ["main", "almost", "filiform"]},
                           "delta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        },
        "outputs": {
            "type": "object", "additionalProperties": False,
            "properties": {"prefix": {"type": "string"}},
        },
    },
}

DEFAULTS = {
    "q": 1.0,
    "seed": 0,
    "budgets": {"z_budget": 200_000, "n_samples": 100_000, "cloud_size": 10_000, "n_region": ineq.REGION_POINTS,
                "n_chains": ms.DEFAULT_CHAINS},
    "estimates": {"exclusion_radius": 1e-3, "radii": [0.1, 10.0], "mode": "auto"},
    "verify": {"family": "standard", "method": "mc", "delta": 0.5, "R0": 4.0, "epsilon": 0.1},
    "spi": {"epsilons": [0.5, 0.25, 0.1, 0.05, 0.025], "t_grid": [2.0, 3.0, 4.0, 6.0]},
    "isoperimetry": {"eps_grid": list(iso.DEFAULT_EPS), "variant": "main"},
    "outputs": {"prefix": ""},
}


class ConfigError(ValueError):
    pass


class InvariantFailure(RuntimeError):
    pass


# -- config --------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def validate_config(doc: dict, command: str) -> dict:
    """Schema plus command-specific checks; returns the config with defaults filled in."""
    v = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            path = ".".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{path}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    cfg = _merge(DEFAULTS, doc)
    try:
        space = geo.space_from_dict(cfg["space"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"space: {exc}") from exc
    a, p, q = space.alpha, cfg["p"], cfg["q"]
    name = command.split(":", 1)[1] if command.startswith("verify:") else command
    needs_ge = {"ubound", "ckn", "hardy", "isoperimetry", "fsobolev"}
    needs_gt = {"merged_ubound", "spi-scan", "spi-probe", "spi_required_beta"}
    if name in needs_ge and p < a + 1 - 1e-12:
        raise ConfigError(f"p: {command} needs p >= alpha + 1 = {a + 1}, got {p}")
    if name in needs_gt and p <= a + 1:
        raise ConfigError(f"p: {command} needs p > alpha + 1 = {a + 1}, got {p}")
    if name == "cheeger" and abs(p - (a + 1)) > 1e-12:
        raise ConfigError(f"p: cheeger runs at the endpoint p = alpha + 1 = {a + 1}, got {p}")
    if name in ("merged_ubound",) and q >= 2:
        raise ConfigError("q: merged_ubound needs q in [1, 2)")
    if name == "hardy" and (space.n1 < 2 or (space.n1 == 2 and q >= 2)):
        raise ConfigError("q: hardy needs n1 >= 2 and q < 2 when n1 = 2")
    if name == "almost_hardy" and space.n1 != 1:
        raise ConfigError("space: almost_hardy needs n1 = 1")
    if name == "spi-probe" and len(cfg["spi"]["t_grid"]) < 4:
        raise ConfigError("spi.t_grid: needs at least 4 points")
    return cfg


def config_hash(command: str, cfg: dict) -> str:
    blob = json.dumps({"command": command, "config": cfg, "version": __version__}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# -- output ------------------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_atomic(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


class Run:
    """State shared by one command: config, seed, parallel map, timings, outputs."""

    def __init__(self, command: str, cfg: dict, out: Path, threads: int):
        self.command = command
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.out = out
        self.threads = max(1, threads)
        self.space = geo.space_from_dict(cfg["space"])
        self.spec = ms.MeasureSpec(self.space, float(cfg["p"]))
        self.hash = config_hash(command, cfg)
        self.timings: dict = {}
        self.warnings: list = []
        self.failures: list = []
        self.reports: dict = {}

    def stage(self, name: str, fn: Callable):
        t0 = time.perf_counter()
        try:
            return fn()
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)

    def pmap(self, fn: Callable, items: list) -> list:
        """Ordered parallel map; results do not depend on the thread count."""
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(fn, items))

    def exponents(self, r: Optional[float] = None) -> dict:
        return {"alpha": self.space.alpha, "p": self.spec.p, "q": self.cfg["q"], "Q": self.space.Q, "r": r}

    def header(self, r: Optional[float] = None) -> dict:
        return {"schema_version": SCHEMA_VERSION, "command": self.command, "manifest_hash": self.hash,
                "seed": self.seed, "space": geo.space_to_dict(self.space), "exponents": self.exponents(r)}

    def add(self, name: str, content) -> None:
        self.reports[self.cfg["outputs"]["prefix"] + name] = content

    def fail(self, msg: str) -> None:
        self.failures.append(msg)

    def samples(self) -> ms.SampleSet:
        path = self.cfg.get("samples_file")
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"samples_file: {path} does not exist")
            s, sspec = ms.load_samples(p)
            if sspec.key != self.spec.key:
                raise ConfigError("samples_file: samples were drawn from a different measure")
            return s
        b = self.cfg["budgets"]
        return self.stage("sample", lambda: ms.sample(self.spec, b["n_samples"], self.seed, b["n_chains"]))

    def finish(self) -> int:
        manifest = {"schema_version": SCHEMA_VERSION, "manifest_hash": self.hash, "command": self.command,
                    "code_version": __version__, "config": self.cfg, "z_cache": self.spec.Z,
                    "wall_time": self.timings, "warnings": self.warnings, "failures": self.failures,
                    "threads": self.threads, "reports": sorted(self.reports)}
        write_atomic(self.out / "manifest.json", dump_json(manifest))
        for name, content in self.reports.items():
            write_atomic(self.out / name, content if isinstance(content, (str, bytes)) else dump_json(content))
        for msg in self.failures:
            print(f"FAILED: {msg}", file=sys.stderr)
        return 1 if self.failures else 0


# -- commands --------------------------------------------------------------------------

def cmd_check_estimates(run: Run) -> None:
    c = run.cfg["estimates"]
    rng = stream(run.seed, tag("cloud"))
    cloud = geo.sample_cloud(run.space, rng, run.cfg["budgets"]["cloud_size"], tuple(c["radii"]),
                             c["exclusion_radius"])
    rep = run.stage("estimates", lambda: calc.check_estimates(run.space, run.space.alpha, cloud,
                                                               c["exclusion_radius"], c["mode"]))
    for chk in rep.checks:
        if not (math.isfinite(chk.max_ratio) and math.isfinite(chk.min_ratio)):
            run.fail(f"{chk.name}: non-finite ratio")
    if rep.by_name("grad_lower").min_ratio <= 0:
        run.fail("grad_lower: lower bound ratio is not positive")
    tol = c.get("exact_gradient_tol")
    if tol is not None:
        g = rep.by_name("grad_upper")
        dev = max(abs(g.max_ratio - 1.0), abs(rep.by_name("grad_lower").min_ratio - 1.0))
        if dev >= tol:
            run.fail(f"exact gradient identity: deviation {dev:.3e} >= {tol:.1e}")
    run.add("estimates.json", {**run.header(), "report": rep.to_dict()})
    run.add("estimates.csv", rep.to_csv())


def cmd_sample(run: Run) -> None:
    s = run.samples()
    meta = s.chain_meta
    if min(meta["ess_per_coordinate"]) <= 100:
        run.fail(f"ESS per coordinate {min(meta['ess_per_coordinate']):.1f} <= 100")
    path = run.out / (run.cfg["outputs"]["prefix"] + "samples.slab")
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=path.parent, delete=False, suffix=".slab") as fh:
        tmp = fh.name
    ms.save_samples(tmp, s, run.spec)
    run.add("samples.slab", Path(tmp).read_bytes())
    os.unlink(tmp)
    Np = geo.hom_norm(run.space, s.points) ** run.spec.p
    m, cov = ms.batch_means(Np)
    run.add("sample.json", {**run.header(), "n": len(s), "chain_meta": meta,
                            "mean_N_p": {"value": float(m[0]), "stderr": float(math.sqrt(cov[0, 0])),
                                         "exact": run.space.Q / run.spec.p}})


def _family(run: Run) -> list:
    name = run.cfg["verify"]["family"]
    sp, p = run.space, run.spec.p
    if name == "standard":
        return ineq.standard_family(sp, p)
    if name == "global":
        return ineq.global_family(sp, p)
    if name == "bumps":
        return ineq.bump_family(sp, p)
    return [ineq.tube(sp, 2.0 ** -k) for k in range(1, 7)]


def cmd_verify(run: Run, name: str) -> None:
    v, q = run.cfg["verify"], float(run.cfg["q"])
    fam = _family(run)
    needs_samples = any(f.region is None for f in fam) and v["method"] == "mc"
    samples = run.samples() if needs_samples else None
    if v["method"] == "mc" and any(f.region is not None for f in fam):
        run.spec.require_z(run.cfg["budgets"]["z_budget"], run.seed)
    kw = {"method": v["method"], "samples": samples, "n_region": run.cfg["budgets"]["n_region"], "seed": run.seed}
    ops = {
        "ubound": lambda f: ineq.ubound_ratio(run.spec, q, f, **kw),
        "merged_ubound": lambda f: ineq.merged_ubound_ratio(run.spec, q, f, **kw),
        "hardy": lambda f: ineq.hardy_ratio(run.spec, q, f, **kw),
        "almost_hardy": lambda f: ineq.almost_hardy_ratio(run.spec, v["delta"], v["R0"], f, **kw),
        "ckn": lambda f: ineq.ckn_ratio(run.spec, q, f, **kw),
        "fsobolev": lambda f: ineq.fsobolev_ratio(run.spec, f, v.get("theta"), samples, kw["n_region"], run.seed),
    }
    if name == "spi_required_beta":
        eps = v["epsilon"]

        def one(f):
            terms, ls = ineq.spi_log_terms(run.spec, q, f, **kw)
            return {"function": f.label, "epsilon": eps, "log_beta": float(ineq.required_log_beta(terms, ls, eps))}
        rows = run.stage("verify", lambda: run.pmap(one, fam))
        run.add(f"verify_{name}.json", {**run.header(), "inequality": name, "results": rows})
        run.add(f"verify_{name}.csv", "function,epsilon,log_beta\n" + "".join(
            f"{r['function']},{r['epsilon']!r},{r['log_beta']!r}\n" for r in rows))
        return
    reports = run.stage("verify", lambda: run.pmap(ops[name], fam))
    ratios = [r.ratio for r in reports]
    if not all(math.isfinite(x) for x in ratios):
        run.fail(f"{name}: non-finite ratio")
    worst = int(np.argmax(ratios))
    summary = {"max_ratio": ratios[worst], "argmax": reports[worst].function, "members": len(reports)}
    if name == "fsobolev":
        c1, c2 = ineq.fsobolev_majorant(reports)
        summary.update({"c1": c1, "c2": c2})
        if not (math.isfinite(c1) and math.isfinite(c2)):
            run.fail("fsobolev: no finite affine majorant")
    run.add(f"verify_{name}.json", {**run.header(), "inequality": name, "summary": summary,
                                    "results": [r.to_dict() for r in reports]})
    run.add(f"verify_{name}.csv", "function,ratio,stderr\n" + "".join(
        f"\"{r.function}\",{r.ratio!r},{r.stderr!r}\n" for r in reports))


def cmd_spi_scan(run: Run) -> None:
    s, q = run.cfg["spi"], float(run.cfg["q"])
    fit = run.stage("curve", lambda: ineq.constructive_beta_curve(run.spec, q, s["epsilons"], s.get("C"), run.seed))
    target = fit.extras["target_sigma"]
    if abs(fit.fitted_sigma - target) > 1e-9:
        run.fail(f"constructive sigma {fit.fitted_sigma!r} != {target!r}")
    run.add("spi_scan.json", {**run.header(), "fit": fit.to_dict()})
    run.add("spi_scan.csv", fit.to_csv())


def cmd_spi_probe(run: Run) -> None:
    s, q = run.cfg["spi"], float(run.cfg["q"])
    run.spec.require_z(run.cfg["budgets"]["z_budget"], run.seed)
    fit = run.stage("probe", lambda: ineq.spi_optimality_probe(run.spec, s["t_grid"], q,
                                                               n_region=run.cfg["budgets"]["n_region"],
                                                               seed=run.seed))
    lb = fit.log_betas
    if any(b2 < b1 for b1, b2 in zip(lb, lb[1:])):
        run.fail("probe betas are not monotone along the schedule")
    if "min_sigma" in s and fit.fitted_sigma < s["min_sigma"]:
        run.fail(f"probe sigma {fit.fitted_sigma:.4f} < {s['min_sigma']}")
    run.add("spi_probe.json", {**run.header(), "fit": fit.to_dict()})
    run.add("spi_probe.csv", fit.to_csv())


def cmd_isoperimetry(run: Run) -> None:
    c = run.cfg["isoperimetry"]
    r = iso.r_exponent(run.space, run.spec.p, c["variant"], c.get("delta"))
    r = min(max(r, 1.0), 2.0)
    samples = run.samples()
    zoo = iso.default_zoo(run.spec, samples)
    scan = run.stage("scan", lambda: iso.profile_scan(run.spec, zoo, r, samples, c["eps_grid"]))
    if not scan.reliable:
        run.fail("isoperimetry: a surface-measure estimate was flagged unreliable")
    if not scan.c_min > 0:
        run.fail(f"isoperimetry: c_min = {scan.c_min} is not positive")
    run.add("isoperimetry.json", {**run.header(r), "r": r, "c_min": scan.c_min, "worst_set": scan.worst_set,
                                  "reliable": scan.reliable, "points": [p.__dict__ for p in scan.points]})
    run.add("isoperimetry.csv", scan.to_csv())


def cmd_cheeger(run: Run) -> None:
    samples = run.samples()
    fam = ineq.global_family(run.space, run.spec.p)
    reports = run.stage("cheeger", lambda: run.pmap(lambda f: ineq.cheeger_ratio(run.spec, f, samples), fam))
    ratios = [r.ratio for r in reports]
    if not all(math.isfinite(x) for x in ratios):
        run.fail("cheeger: non-finite ratio")
    worst = int(np.argmax(ratios))
    run.add("cheeger.json", {**run.header(), "summary": {"max_ratio": ratios[worst],
                                                          "argmax": reports[worst].function},
                             "results": [r.to_dict() for r in reports]})
    run.add("cheeger.csv", "function,ratio,stderr\n" + "".join(
        f"\"{r.function}\",{r.ratio!r},{r.stderr!r}\n" for r in reports))


def cmd_report(run: Run) -> None:
    """Collect the headline numbers of every JSON report already in the output directory."""
    rows = []
    for path in sorted(run.out.glob("*.json")):
        if path.name in ("manifest.json", run.cfg["outputs"]["prefix"] + "report.json"):
            continue
        doc = json.loads(path.read_text())
        entry = {"file": path.name, "command": doc.get("command"), "manifest_hash": doc.get("manifest_hash")}
        for key in ("summary", "c_min", "worst_set", "r"):
            if key in doc:
                entry[key] = doc[key]
        if "fit" in doc:
            entry["fitted_sigma"] = doc["fit"]["fitted_sigma"]
        rows.append(entry)
    run.add("report.json", {**run.header(), "reports": rows})


def run_command(command: str, doc: dict, out: Path, seed: Optional[int] = None, threads: int = 1) -> int:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    if seed is not None:
        doc = {**doc, "seed": int(seed)}
    cfg = validate_config(doc, command)
    run = Run(command, cfg, Path(out), threads)
    if command.startswith("verify:"):
        cmd_verify(run, command.split(":", 1)[1])
    else:
        {"check-estimates": cmd_check_estimates, "sample": cmd_sample, "spi-scan": cmd_spi_scan,
         "spi-probe": cmd_spi_probe, "isoperimetry": cmd_isoperimetry, "cheeger": cmd_cheeger,
         "report": cmd_report}[command](run)
    return run.finish()


def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env:
        return int(env)
    return os.cpu_count() or 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="subelliptic-lab", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="action", required=True)
    r = sub.add_parser("run", help="run one command")
    r.add_argument("command", help=", ".join(COMMANDS))
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    r.add_argument("--out", type=Path, default=Path("out"))
    sub.add_parser("schema", help="print the config JSON schema")
    args = ap.parse_args(argv)
    if args.action == "schema":
        print(json.dumps(CONFIG_SCHEMA, indent=2))
        return 0
    try:
        doc = json.loads(args.config.read_text())
        return run_command(args.command, doc, args.out, args.seed, _threads(args.threads))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
