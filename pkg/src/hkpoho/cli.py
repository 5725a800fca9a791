"""Command-line front end: ``hkpoho run <config>``, ``list-presets``, ``explain <check>``.

Configs are TOML.  Expressions use the prefix grammar of :mod:`hkpoho.symbolic`.
Example::

    sigma = [1, 2]
    u = "(+ (^ x1 2) x2)"
    checks = ["h1", "h2", "star-shaped", "poho1"]

    [family]
    preset = "grushin(1,1,1)"

    [functional]
    expr = "(+ (* 1/2 (^ p1 2)) (* 1/2 (^ p2 2)))"

    [domain]
    preset = "disk((0,0),1)"
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import tomli

from . import fields as fl
from . import geometry as geo
from . import identities as ident
from .calculus import Functional1, Functional2, dirichlet_k_laplacian, horizontal_biharmonic
from .symbolic import EvaluationSingularity, Expr, ParseError, parse

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where = f" [key {key!r}" + (f", line {line}" if line else "") + "]"
        super().__init__(message + where)
        self.key = key
        self.line = line


FAMILY_PRESETS: dict[str, Callable[..., fl.Family]] = {
    "euclidean": fl.euclidean,
    "grushin": fl.grushin,
    "bony": fl.bony,
}

FUNCTIONAL_PRESETS = {
    "dirichlet-k-laplacian": "F = |p|^k/k - G(z); keys k, G",
    "horizontal-biharmonic": "F = (sum_i r_ii)^2/2 - G(z); key G",
}

CHECKS: dict[str, tuple[str, set[str]]] = {
    "h1": ("Every field is homogeneous of degree 1 for the dilation, and the fields are linearly independent.", set()),
    "h2": ("Hormander rank condition: iterated brackets span R^n at the origin (option: max_step).", {"max_step"}),
    "star-shaped": ("Sampled test of <T(x), nu> >= 0 on the boundary (options: samples, tol).", {"samples", "tol"}),
    "poho1": ("First-order integral identity for arbitrary u, term by term.", set()),
    "poho-pde": (
        "Identity for solutions of the Euler-Lagrange equation; with dirichlet = true also the "
        "zero-boundary identity for each a, the auxiliary integral identity and the boundary reduction "
        "(options: a, dirichlet).",
        {"a", "dirichlet"},
    ),
    "poho2": ("Second-order integral identity for C^4 u, with the specialised form for the biharmonic preset.", set()),
    "boundary-id2": (
        "Nodewise X_i(Tu)<X_j,nu> = <T,nu> X_j(X_i u) when u and grad u vanish on the boundary, "
        "plus the defect of the induced boundary function.",
        set(),
    ),
    "audit1": (
        "Hypotheses (i)-(iii) of the first-order non-existence result on sampled boxes, plus growth audits for "
        "power-law presets (options: z_max, p_max, per_axis, x_points, a0, seed).",
        {"z_max", "p_max", "per_axis", "x_points", "a0", "seed", "max_points"},
    ),
    "audit2": (
        "Hypotheses (i)-(iii) of the second-order non-existence result on sampled boxes "
        "(options: z_max, p_max, r_max, per_axis, x_points, seed, max_points).",
        {"z_max", "p_max", "r_max", "per_axis", "x_points", "seed", "max_points"},
    ),
}

TOP_KEYS = {"sigma", "u", "family", "functional", "domain", "quadrature", "checks"}
SECTION_KEYS = {
    "family": {"preset", "fields"},
    "functional": {"preset", "k", "G", "expr", "order"},
    "domain": {"preset"},
    "quadrature": {"level", "tol"},
}


def _line_of(text: str, key: str, section: str | None = None) -> int | None:
    lines = text.splitlines()
    start = 0
    if section is not None:
        for i, ln in enumerate(lines):
            if re.match(rf"^\s*\[\s*{re.escape(section)}\s*\]", ln):
                start = i + 1
                break
    for i in range(start, len(lines)):
        if re.match(rf"^\s*\"?{re.escape(key)}\"?\s*=", lines[i]) or re.match(
            rf"^\s*\[+\s*{re.escape(key)}\s*\]+", lines[i]
        ):
            return i + 1
    return None


@dataclass
class CheckSpec:
    name: str
    options: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    path: Path
    family: fl.Family
    dilation: fl.DilationFamily
    functional: Functional1 | None
    u: Expr | None
    domain: geo.Domain | None
    quadrature: geo.QuadratureSpec
    tol: float
    checks: list[CheckSpec]


def _expr(value, key: str, text: str, section: str | None = None) -> Expr:
    if not isinstance(value, (str, int, float)):
        raise ConfigError("expected an expression string", key, _line_of(text, key, section))
    try:
        return parse(str(value))
    except (ParseError, ValueError) as exc:
        raise ConfigError(f"bad expression: {exc}", key, _line_of(text, key, section)) from exc


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a config; nothing is computed until every field checks out."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    for key in raw:
        if key not in TOP_KEYS:
            raise ConfigError("unknown key", key, _line_of(text, key))
    for section, allowed in SECTION_KEYS.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError("expected a table", section, _line_of(text, section))
        for key in body:
            if key not in allowed:
                raise ConfigError(f"unknown key in [{section}]", key, _line_of(text, key, section))

    fam_cfg = raw.get("family", {})
    if "preset" in fam_cfg:
        try:
            name, args = geo.parse_preset_call(fam_cfg["preset"])
            family = FAMILY_PRESETS[name](*args)
        except KeyError:
            raise ConfigError(
                f"unknown family preset; known: {', '.join(FAMILY_PRESETS)}", "preset", _line_of(text, "preset", "family")
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad family preset: {exc}", "preset", _line_of(text, "preset", "family")) from exc
    elif "fields" in fam_cfg:
        rows = fam_cfg["fields"]
        if "sigma" not in raw:
            raise ConfigError("explicit fields need sigma", "sigma")
        try:
            coeffs = [[parse(str(c)) for c in row] for row in rows]
            family = fl.Family("explicit", tuple(fl.field_from(r, f"X{i + 1}") for i, r in enumerate(coeffs)),
                               fl.DilationFamily(tuple(raw["sigma"])))
        except (ParseError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad explicit fields: {exc}", "fields", _line_of(text, "fields", "family")) from exc
    else:
        raise ConfigError("[family] needs preset or fields", "family", _line_of(text, "family"))

    if "sigma" in raw:
        sigma = raw["sigma"]
        if not isinstance(sigma, list) or not all(isinstance(s, int) for s in sigma):
            raise ConfigError("sigma must be a list of integers", "sigma", _line_of(text, "sigma"))
        try:
            dilation = fl.DilationFamily(tuple(sigma))
        except ValueError as exc:
            raise ConfigError(str(exc), "sigma", _line_of(text, "sigma")) from exc
    else:
        dilation = family.dilation
    n, m = dilation.n, family.m
    if any(Y.dim != n for Y in family.fields):
        raise ConfigError(f"sigma has {n} entries but the fields live in R^{family.n}", "sigma", _line_of(text, "sigma"))

    u = None
    if "u" in raw:
        u = _expr(raw["u"], "u", text)
        extra = u.free_symbols - set(fl.coords(n))
        if extra:
            raise ConfigError(f"u uses variables {sorted(extra)} outside x1..x{n}", "u", _line_of(text, "u"))

    functional = None
    fcfg = raw.get("functional")
    if fcfg:
        line = _line_of(text, "functional")
        try:
            if "preset" in fcfg:
                preset = fcfg["preset"]
                G = _expr(fcfg.get("G", 0), "G", text, "functional")
                if preset == "dirichlet-k-laplacian":
                    k = Fraction(str(fcfg.get("k", 2)))
                    functional = dirichlet_k_laplacian(n, m, k, G)
                elif preset == "horizontal-biharmonic":
                    functional = horizontal_biharmonic(n, m, G)
                else:
                    raise ConfigError(
                        f"unknown functional preset; known: {', '.join(FUNCTIONAL_PRESETS)}",
                        "preset", _line_of(text, "preset", "functional"),
                    )
            elif "expr" in fcfg:
                e = _expr(fcfg["expr"], "expr", text, "functional")
                order = fcfg.get("order", 1)
                if order not in (1, 2):
                    raise ConfigError("order must be 1 or 2", "order", _line_of(text, "order", "functional"))
                functional = (Functional1 if order == 1 else Functional2)(e, n, m)
            else:
                raise ConfigError("[functional] needs preset or expr", "functional", line)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad functional: {exc}", "functional", line) from exc

    domain = None
    if "domain" in raw:
        try:
            domain = geo.domain_from_preset(raw["domain"].get("preset", ""))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad domain: {exc}", "preset", _line_of(text, "preset", "domain")) from exc
        if domain.n != n:
            raise ConfigError(f"domain lives in R^{domain.n}, sigma in R^{n}", "domain", _line_of(text, "domain"))

    qcfg = raw.get("quadrature", {})
    try:
        quad = geo.QuadratureSpec(int(qcfg.get("level", 3)))
    except ValueError as exc:
        raise ConfigError(str(exc), "level", _line_of(text, "level", "quadrature")) from exc
    tol = qcfg.get("tol", ident.TOL_IDENTITY)
    if isinstance(tol, bool) or not isinstance(tol, (int, float)) or not tol > 0:
        raise ConfigError("tol must be a positive number", "tol", _line_of(text, "tol", "quadrature"))
    tol = float(tol)

    checks = []
    for item in raw.get("checks", []):
        if isinstance(item, str):
            spec = CheckSpec(item)
        elif isinstance(item, dict) and "name" in item:
            spec = CheckSpec(item["name"], {k: v for k, v in item.items() if k != "name"})
        else:
            raise ConfigError("each check is a name or a table with 'name'", "checks", _line_of(text, "checks"))
        if spec.name not in CHECKS:
            raise ConfigError(f"unknown check {spec.name!r}; known: {', '.join(CHECKS)}", "checks", _line_of(text, "checks"))
        unknown = set(spec.options) - CHECKS[spec.name][1]
        if unknown:
            raise ConfigError(f"unknown option(s) {sorted(unknown)} for {spec.name}", "checks", _line_of(text, "checks"))
        checks.append(spec)

    needs = {
        "star-shaped": ("domain",),
        "poho1": ("functional", "u", "domain"),
        "poho-pde": ("functional", "u", "domain"),
        "poho2": ("functional", "u", "domain"),
        "boundary-id2": ("u", "domain"),
        "audit1": ("functional", "domain"),
        "audit2": ("functional", "domain"),
    }
    have = {"functional": functional, "u": u, "domain": domain}
    for spec in checks:
        for req in needs.get(spec.name, ()):
            if have[req] is None:
                raise ConfigError(f"check {spec.name} needs {req}", req)
    return RunConfig(path, family, dilation, functional, u, domain, quad, tol, checks)


# -- running ------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    headline: str
    report: dict


def _poho_line(rel: float) -> str:
    return f"rel residual {rel:.1e}"


def run_check(cfg: RunConfig, spec: CheckSpec) -> CheckResult:
    X, d, F, u, dom, q = cfg.family.fields, cfg.dilation, cfg.functional, cfg.u, cfg.domain, cfg.quadrature
    opts = spec.options
    name = spec.name
    if name == "h1":
        r = fl.check_H1(X, d)
        return CheckResult(name, r.passed, "", r.to_dict())
    if name == "h2":
        r = fl.check_H2(X, d, max_step=opts.get("max_step"))
        return CheckResult(name, r.passed, f"rank {r.rank}/{r.n}", r.to_dict())
    if name == "star-shaped":
        r = geo.check_star_shaped(dom, d, int(opts.get("samples", 2048)), float(opts.get("tol", geo.TOL_GEOM)))
        return CheckResult(name, r.passed, f"min <T,nu> {r.min_value:.3e}", r.to_dict())
    try:
        if name == "poho1":
            r = ident.verify_poho_order1(X, d, F, u, dom, q, cfg.tol)
            return CheckResult(name, r.passed, _poho_line(r.rel_residual), r.to_dict())
        if name == "poho-pde":
            a = opts.get("a", [0])
            r = ident.verify_poho_pde(X, d, F, u, dom, q, a=a, dirichlet=bool(opts.get("dirichlet", False)), tol=cfg.tol)
            return CheckResult(name, r.passed, _poho_line(r.rel_residual), r.to_dict())
        if name == "poho2":
            r = ident.verify_poho_order2(X, d, F, u, dom, q, cfg.tol)
            ok = r.passed and (r.specialized is None or r.specialized.passed)
            return CheckResult(name, ok, _poho_line(r.rel_residual), r.to_dict())
        if name == "boundary-id2":
            F2 = F if isinstance(F, Functional2) else None
            r = ident.check_boundary_identity_order2(X, d, u, dom, q, F2)
            return CheckResult(name, r.passed, f"max defect {r.defect:.1e}", r.to_dict())
    except (ident.NotASolution, ident.NotDirichlet, ident.PreconditionViolated) as exc:
        return CheckResult(name, False, f"precondition failed: {exc}", {"error": type(exc).__name__, "message": str(exc)})
    if name in ("audit1", "audit2"):
        sampler = ident.AuditSampler(
            z_max=float(opts.get("z_max", 4.0)),
            p_max=float(opts.get("p_max", 4.0)),
            r_max=float(opts.get("r_max", 4.0)),
            per_axis=int(opts.get("per_axis", 17)),
            x_points=int(opts.get("x_points", 8)),
            max_points=int(opts.get("max_points", 120_000)),
            a0_candidates=tuple(Fraction(str(a)) for a in opts.get("a0", [])),
            seed=int(opts.get("seed", 0)),
        )
        fn = ident.audit_nonexistence_order1 if name == "audit1" else ident.audit_nonexistence_order2
        audits = fn(F, d, dom, sampler)
        ok = all(a.passed for a in audits)
        head = ", ".join(f"{a.condition} {a.verdict}" for a in audits)
        return CheckResult(name, ok, head, {"audits": [a.to_dict() for a in audits]})
    raise ConfigError(f"unknown check {name!r}")


def _jsonable(obj: Any):
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, float) and obj != obj:
        return "nan"
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def run(config_path: str | Path, out_dir: str | Path | None = None, stream=None) -> int:
    stream = stream or sys.stdout
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not cfg.checks:
        print("no checks requested", file=stream)
        return EXIT_PASS
    out = Path(out_dir) if out_dir is not None else cfg.path.parent
    out.mkdir(parents=True, exist_ok=True)
    stem = cfg.path.stem
    results: list[CheckResult] = []
    code = EXIT_PASS
    for i, spec in enumerate(cfg.checks, start=1):
        try:
            res = run_check(cfg, spec)
        except (EvaluationSingularity, geo.DegenerateTangent, fl.StepCapExceeded, FloatingPointError) as exc:
            node = getattr(exc, "node", None)
            msg = f"{spec.name}: numeric error: {type(exc).__name__}: {exc}" + (f" (node {node})" if node else "")
            print(msg, file=sys.stderr)
            res = CheckResult(spec.name, False, f"ERROR {type(exc).__name__}", {"error": type(exc).__name__, "message": str(exc)})
            code = EXIT_NUMERIC
        results.append(res)
        body = {"check": res.name, "passed": res.passed, "options": spec.options, "report": res.report}
        report_path = out / f"{stem}.{i:02d}-{res.name}.json"
        report_path.write_text(json.dumps(_jsonable(body), indent=2, ensure_ascii=False) + "\n")
        if not res.passed and code == EXIT_PASS:
            code = EXIT_FAIL
    lines = [f"# hkpoho run of {cfg.path.name} at {datetime.now(timezone.utc).isoformat(timespec='seconds')}"]
    for res in results:
        verdict = "PASS" if res.passed else "FAIL"
        lines.append(f"{res.name}: {verdict}" + (f" ({res.headline})" if res.headline else ""))
    (out / f"{stem}.summary.txt").write_text("\n".join(lines) + "\n")
    for ln in lines[1:]:
        print(ln, file=stream)
    return code


def list_presets() -> str:
    lines = ["families:"]
    lines += [
        "  euclidean(n)        coordinate fields d/dx_1..d/dx_n, sigma = (1,...,1)",
        "  grushin(n1,n2,k)    d/dy_i and y_i^k d/dt_j, sigma = (1,..,1,k+1,..,k+1)",
        "  bony(n)             d/dx_1 and sum_j x_1^{j-1}/(j-1)! d/dx_j, sigma = (1,2,...,n)",
        "functionals:",
    ]
    lines += [f"  {k:<22}{v}" for k, v in FUNCTIONAL_PRESETS.items()]
    lines += [
        "domains:",
        "  disk(center,R)  box(bounds)  ellipse(a,b,center)  ball3(center,R)  radial2d(expr)",
        "checks:",
        "  " + "  ".join(CHECKS),
    ]
    return "\n".join(lines)


def explain(check: str) -> str:
    if check not in CHECKS:
        raise KeyError(check)
    text, opts = CHECKS[check]
    return f"{check}: {text}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hkpoho", description="Verify Pohozaev-type identities for Hormander vector fields.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the checks of a config file")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="report directory (default: beside the config)")
    sub.add_parser("list-presets", help="list family, functional and domain presets")
    e = sub.add_parser("explain", help="describe a check")
    e.add_argument("check")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_PASS
    if args.command == "run":
        return run(args.config, args.out)
    if args.command == "list-presets":
        print(list_presets())
        return EXIT_PASS
    try:
        print(explain(args.check))
    except KeyError:
        print(f"unknown check {args.check!r}; known: {', '.join(CHECKS)}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_PASS


if __name__ == "__main__":
    sys.exit(main())
