"""Run manifests: YAML scenario sets with cross-product sweeps.

A manifest has a base ``scenario`` mapping and an optional ``sweep``
mapping from scenario keys to lists of values. The sweep expands as a
cross product with the first key outermost, so expansion order follows
the file. Unknown keys are errors.

Example::

    schema: 1
    name: tds1
    replicates: 10000
    seed: 20190415
    scenario:
      tds: TDS1
      design: {C: 4, T: 5, switches: [0, 1, 1, 1, 1]}
      truth: {sigma_c_sq: 0.02, sigma_e_sq: 0.51}
      test: {alpha: 0.05, beta: 0.1, delta: 0.2}
      t: 3
      n_init: derive
      n_min: {fraction: 1.0}
      n_max: 200
    sweep:
      assumed_multiplier: [[0.5, 0.5], [1, 1]]
      tau: [0, delta]
      method: [blinded, unblinded, fixed]
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from swssre.design import AllocationMatrix, VarianceComponents, build_standard_allocation
from swssre.power import TestSpec
from swssre.simulation import METHODS, ScenarioSpec
from swssre.ssre import WITHIN_DIVISORS

SCHEMA_VERSION = 1

TOP_KEYS = {"schema", "name", "replicates", "seed", "workers", "out", "scenario", "sweep"}
SCENARIO_KEYS = {
    "tds",
    "label",
    "design",
    "truth",
    "assumed",
    "assumed_multiplier",
    "test",
    "t",
    "mu",
    "pi",
    "sigma_pi_sq",
    "tau",
    "method",
    "n_init",
    "n_min",
    "n_max",
    "tau_star",
    "within_divisor",
}
SWEEP_KEYS = SCENARIO_KEYS - {"design", "truth", "test", "tds", "label"}
DESIGN_KEYS = {"C", "T", "switches", "allocation", "rollout"}
TRUTH_KEYS = {"sigma_c_sq", "sigma_e_sq"}
TEST_KEYS = {"alpha", "beta", "delta"}
NAMED_DESIGNS = {
    "tds1": (4, 5, (0, 1, 1, 1, 1)),
    "tds2": (20, 9, (0, 3, 3, 3, 3, 2, 2, 2, 2)),
}


class ManifestError(ValueError):
    """Invalid manifest; the message names the file, line and field."""


@dataclass(frozen=True)
class ExpandedScenario:
    index: int
    spec: ScenarioSpec  # resolved
    meta: dict


@dataclass
class RunManifest:
    name: str
    replicates: int
    seed: int
    scenario: dict
    sweep: list[tuple[str, list]] = field(default_factory=list)
    workers: int = 1
    out: str | None = None
    source: str | None = field(default=None, compare=False)
    _expanded: list | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "replicates": self.replicates,
            "seed": self.seed,
            "workers": self.workers,
        }
        if self.out is not None:
            doc["out"] = self.out
        doc["scenario"] = copy.deepcopy(self.scenario)
        if self.sweep:
            doc["sweep"] = {k: copy.deepcopy(v) for k, v in self.sweep}
        return doc

    @property
    def scenarios(self) -> list[ExpandedScenario]:
        if self._expanded is None:
            self._expanded = expand(self)
        return self._expanded


# ----------------------------------------------------------------------------
# parsing


def _key_lines(text: str) -> dict[tuple, int]:
    """1-based line of every mapping key, addressed by its path."""
    lines: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                lines[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                lines[path + (i,)] = v.start_mark.line + 1
                walk(v, path + (i,))

    try:
        walk(yaml.compose(text, Loader=yaml.SafeLoader), ())
    except yaml.YAMLError:
        pass
    return lines


class _Ctx:
    def __init__(self, source: str, lines: dict[tuple, int]):
        self.source = source
        self.lines = lines

    def error(self, path: tuple, msg: str) -> ManifestError:
        where = self.source
        # nearest enclosing key with a known line
        for k in range(len(path), -1, -1):
            if path[:k] in self.lines:
                where += f":{self.lines[path[:k]]}"
                break
        dotted = ".".join(str(p) for p in path) or "<root>"
        return ManifestError(f"{where}: {dotted}: {msg}")

    def check_keys(self, obj, allowed: set, path: tuple) -> None:
        if not isinstance(obj, dict):
            raise self.error(path, f"expected a mapping, got {type(obj).__name__}")
        for key in obj:
            if key not in allowed:
                raise self.error(path + (key,), f"unknown key {key!r} (allowed: {', '.join(sorted(allowed))})")


def parse_manifest(text: str, source: str = "<string>") -> RunManifest:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ManifestError(f"{source}{line}: parse error: {getattr(exc, 'problem', exc)}") from None
    ctx = _Ctx(source, _key_lines(text))
    if doc is None:
        raise ctx.error((), "empty manifest")
    ctx.check_keys(doc, TOP_KEYS, ())
    for key in ("name", "replicates", "seed", "scenario"):
        if key not in doc:
            raise ctx.error((key,), "required key missing")
    if doc.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ctx.error(("schema",), f"unsupported schema {doc['schema']!r}; expected {SCHEMA_VERSION}")
    for key in ("replicates", "seed", "workers"):
        if key in doc and (not isinstance(doc[key], int) or isinstance(doc[key], bool)):
            raise ctx.error((key,), "must be an integer")
    if doc["replicates"] < 1:
        raise ctx.error(("replicates",), "must be >= 1")
    if doc.get("workers", 1) < 1:
        raise ctx.error(("workers",), "must be >= 1")
    ctx.check_keys(doc["scenario"], SCENARIO_KEYS, ("scenario",))
    sweep = doc.get("sweep") or {}
    ctx.check_keys(sweep, SWEEP_KEYS, ("sweep",))
    for key, values in sweep.items():
        if not isinstance(values, list):
            raise ctx.error(("sweep", key), "sweep values must be a list")
    m = RunManifest(
        name=str(doc["name"]),
        replicates=doc["replicates"],
        seed=doc["seed"],
        scenario=doc["scenario"],
        sweep=list(sweep.items()),
        workers=doc.get("workers", 1),
        out=doc.get("out"),
        source=source,
    )
    m._expanded = expand(m, ctx)
    return m


def bundled_config(name: str) -> Path | None:
    """Path of a config shipped with the package, by file name or stem."""
    root = resources.files("swssre") / "configs"
    for candidate in (name, f"{name}.config"):
        p = root / candidate
        if p.is_file():
            return Path(str(p))
    return None


def bundled_config_names() -> list[str]:
    root = resources.files("swssre") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".config"))


def load_manifest(path: str | Path) -> RunManifest:
    """Read, validate and expand a manifest file (or bundled config name)."""
    p = Path(path)
    if not p.is_file():
        found = bundled_config(str(path))
        if found is None:
            raise ManifestError(f"{path}: no such file or bundled config")
        p = found
    return parse_manifest(p.read_text(), str(p))


def dump_manifest(m: RunManifest) -> str:
    return yaml.safe_dump(m.to_dict(), sort_keys=False, default_flow_style=None)


def write_manifest(m: RunManifest, path: str | Path) -> None:
    Path(path).write_text(dump_manifest(m))


# ----------------------------------------------------------------------------
# expansion


def _number(ctx: _Ctx, value, path, positive=False, nonneg=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ctx.error(path, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ctx.error(path, f"expected an integer, got {value!r}")
    if positive and not value > 0:
        raise ctx.error(path, "must be positive")
    if nonneg and value < 0:
        raise ctx.error(path, "must be non-negative")
    return int(value) if integer else float(value)


def _design(ctx: _Ctx, d, path) -> AllocationMatrix:
    if isinstance(d, str):
        if d.lower() not in NAMED_DESIGNS:
            raise ctx.error(path, f"unknown named design {d!r} (known: {', '.join(NAMED_DESIGNS)})")
        C, T, sw = NAMED_DESIGNS[d.lower()]
        return build_standard_allocation(C, T, sw)
    ctx.check_keys(d, DESIGN_KEYS, path)
    try:
        if "allocation" in d:
            if {"C", "T", "switches"} & d.keys():
                raise ctx.error(path, "give either allocation or C/T/switches")
            return AllocationMatrix(d["allocation"], rollout=bool(d.get("rollout", True)))
        for key in ("C", "T", "switches"):
            if key not in d:
                raise ctx.error(path + (key,), "required key missing")
        return build_standard_allocation(int(d["C"]), int(d["T"]), list(d["switches"]))
    except ManifestError:
        raise
    except (ValueError, TypeError) as exc:
        raise ctx.error(path, str(exc)) from None


def _variance(ctx: _Ctx, v, path) -> VarianceComponents:
    ctx.check_keys(v, TRUTH_KEYS, path)
    for key in TRUTH_KEYS:
        if key not in v:
            raise ctx.error(path + (key,), "required key missing")
    try:
        return VarianceComponents(
            _number(ctx, v["sigma_c_sq"], path + ("sigma_c_sq",), nonneg=True),
            _number(ctx, v["sigma_e_sq"], path + ("sigma_e_sq",), positive=True),
        )
    except ValueError as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ctx.error(path, str(exc)) from None


def _test(ctx: _Ctx, v, path) -> TestSpec:
    ctx.check_keys(v, TEST_KEYS, path)
    for key in TEST_KEYS:
        if key not in v:
            raise ctx.error(path + (key,), "required key missing")
    try:
        return TestSpec(*(_number(ctx, v[k], path + (k,)) for k in ("alpha", "beta", "delta")))
    except ManifestError:
        raise
    except ValueError as exc:
        raise ctx.error(path, str(exc)) from None


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _build(ctx: _Ctx, s: dict, path_of) -> tuple[ScenarioSpec, dict]:
    """Turn one fully merged scenario mapping into a resolved spec and metadata."""
    for key in ("design", "truth", "test", "t", "method", "n_max", "n_min"):
        if key not in s:
            raise ctx.error(path_of(key), "required key missing")
    X = _design(ctx, s["design"], path_of("design"))
    truth = _variance(ctx, s["truth"], path_of("truth"))
    test = _test(ctx, s["test"], path_of("test"))
    if "assumed" in s and "assumed_multiplier" in s:
        raise ctx.error(path_of("assumed"), "give either assumed or assumed_multiplier")
    if "assumed_multiplier" in s:
        mult = s["assumed_multiplier"]
        if not (isinstance(mult, list) and len(mult) == 2):
            raise ctx.error(path_of("assumed_multiplier"), "expected [c_multiplier, e_multiplier]")
        cm = _number(ctx, mult[0], path_of("assumed_multiplier"), nonneg=True)
        em = _number(ctx, mult[1], path_of("assumed_multiplier"), positive=True)
        assumed = truth.scaled(cm, em)
    elif "assumed" in s:
        assumed = _variance(ctx, s["assumed"], path_of("assumed"))
        cm = assumed.sigma_c_sq / truth.sigma_c_sq if truth.sigma_c_sq > 0 else float("nan")
        em = assumed.sigma_e_sq / truth.sigma_e_sq
    else:
        assumed, cm, em = truth, 1.0, 1.0

    tau = s.get("tau", 0.0)
    if tau == "delta":
        tau = test.delta
    tau = _number(ctx, tau, path_of("tau"))

    n_init = s.get("n_init", "derive")
    if n_init == "derive":
        n_init = None
    else:
        n_init = _number(ctx, n_init, path_of("n_init"), positive=True, integer=True)
    n_min_raw = s["n_min"]
    n_min = frac = None
    if isinstance(n_min_raw, dict):
        ctx.check_keys(n_min_raw, {"fraction"}, path_of("n_min"))
        if "fraction" not in n_min_raw:
            raise ctx.error(path_of("n_min"), "expected {fraction: value}")
        frac = _number(ctx, n_min_raw["fraction"], path_of("n_min"), positive=True)
    else:
        n_min = _number(ctx, n_min_raw, path_of("n_min"), positive=True, integer=True)
    pi = s.get("pi")
    if pi is not None:
        if not isinstance(pi, list):
            raise ctx.error(path_of("pi"), "expected a list of period effects for periods 2..T")
        pi = tuple(_number(ctx, v, path_of("pi")) for v in pi)
    method = s["method"]
    if method not in METHODS:
        raise ctx.error(path_of("method"), f"expected one of {', '.join(METHODS)}, got {method!r}")
    divisor = s.get("within_divisor", "cells")
    if divisor not in WITHIN_DIVISORS:
        raise ctx.error(path_of("within_divisor"), f"expected one of {', '.join(WITHIN_DIVISORS)}, got {divisor!r}")
    try:
        spec = ScenarioSpec(
            X=X,
            t=_number(ctx, s["t"], path_of("t"), integer=True),
            truth=truth,
            assumed=assumed,
            test=test,
            method=str(method),
            n_max=_number(ctx, s["n_max"], path_of("n_max"), integer=True),
            tau=tau,
            mu=_number(ctx, s.get("mu", 0.0), path_of("mu")),
            pi=pi,
            sigma_pi_sq=_number(ctx, s.get("sigma_pi_sq", 0.0), path_of("sigma_pi_sq")),
            n_init=n_init,
            n_min=n_min,
            n_min_fraction=frac,
            tau_star=_number(ctx, s.get("tau_star", 0.0), path_of("tau_star")),
            within_divisor=divisor,
            label=str(s.get("label", "")),
        ).resolve()
    except ManifestError:
        raise
    except ValueError as exc:
        raise ctx.error(path_of(None), str(exc)) from None
    if tau == 0:
        rate = "ETI"
    elif tau == test.delta:
        rate = "EP"
    else:
        rate = "ERR"
    meta = {
        "tds": str(s.get("tds", "")),
        "method": spec.method,
        "rate": rate,
        "variance_scenario": f"{_fmt(cm)}x,{_fmt(em)}x",
        "assumed_c_mult": cm,
        "assumed_e_mult": em,
    }
    return spec, meta


def expand(m: RunManifest, ctx: _Ctx | None = None) -> list[ExpandedScenario]:
    ctx = ctx or _Ctx(m.source or "<manifest>", {})
    keys = [k for k, _ in m.sweep]
    value_lists = [v for _, v in m.sweep]
    out = []
    for idx, combo in enumerate(itertools.product(*value_lists)):
        merged = copy.deepcopy(m.scenario)
        merged.update(dict(zip(keys, combo)))
        point = dict(zip(keys, combo))

        def path_of(key, point=point, combo=combo):
            if key in point:
                return ("sweep", key, value_lists[keys.index(key)].index(point[key]))
            return ("scenario",) if key is None else ("scenario", key)

        try:
            spec, meta = _build(ctx, merged, path_of)
        except ManifestError as exc:
            if point:
                raise ManifestError(f"{exc} [sweep point {point}]") from None
            raise
        out.append(ExpandedScenario(idx, spec, meta))
    return out


__all__ = [
    "ExpandedScenario",
    "ManifestError",
    "RunManifest",
    "bundled_config",
    "bundled_config_names",
    "dump_manifest",
    "expand",
    "load_manifest",
    "parse_manifest",
    "write_manifest",
]
