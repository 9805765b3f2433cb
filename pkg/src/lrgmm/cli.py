"""JSON-configured command line runs with rerun manifests.

Each command reads one JSON config, runs the matching estimator or
checker, and writes result files plus a manifest into the output
directory. The manifest echoes the effective config and the seed, so
passing it back as ``--config`` reproduces the result files byte for
byte. Config problems exit with status 2 before anything is written;
estimator errors exit with status 1 and the module's message verbatim.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

from . import __version__
from ._backend import BACKEND
from .catalog import (
    ALL_DESIGNS,
    DensityWeightedDerivative,
    IntegratedSquaredDensity,
    SurplusBound,
)
from .data import DataError, Dataset, ROLES
from .ddc import (
    DdcConfig,
    DdcError,
    DdcCheckDesign,
    DdcPanel,
    LEARNER_MENU,
    ddc_estimate,
    ddc_monte_carlo,
    make_ddc_model,
    solve_and_simulate,
)
from .estimators import (
    LinearFunctionalSpec,
    estimate_dr_linear,
    estimate_dwad,
    estimate_integrated_squared_density,
    estimate_surplus_bound,
    partial_robustness_experiment,
)
from .folds import make_blocked_fold_plan, make_fold_plan
from .gmm import (
    EstimationError,
    FoldNuisances,
    crossfit_nuisances,
    remainder_diagnostics,
)
from .influence import blend_handles, dr_check, lr_check
from .learners import KINDS, LearnerSpec

COMMANDS = (
    "ddc-mc",
    "estimate",
    "dr-check",
    "lr-check",
    "diagnose-remainders",
    "surplus",
    "dwad",
    "isd",
    "partial-robustness",
)

_COMMON_KEYS = ("command", "seed", "out")

_MODULE_ERRORS = (
    EstimationError,
    DdcError,
    DataError,
    ValueError,
    ArithmeticError,
    np.linalg.LinAlgError,
)


class ConfigError(ValueError):
    """Invalid run configuration; maps to exit status 2."""


# ---------------------------------------------------------------------------
# config plumbing


class _Cfg:
    """One config dict plus enough source info for pointed messages."""

    def __init__(self, mapping: dict, path: str, raw: str):
        self.map = dict(mapping)
        self.path = path
        self.raw = raw
        self.seen = set()

    def _where(self, key: str) -> str:
        # best-effort line hint: first literal occurrence of the key
        needle = f'"{key}"'
        for i, line in enumerate(self.raw.splitlines(), start=1):
            if needle in line:
                return f"{self.path} line {i}"
        return self.path

    def fail(self, key: str, why: str):
        raise ConfigError(f'{self._where(key)}: "{key}" {why}')

    def opt(self, key: str, default=None):
        self.seen.add(key)
        return self.map.get(key, default)

    def req(self, key: str):
        self.seen.add(key)
        if key not in self.map:
            raise ConfigError(f'{self.path}: missing required key "{key}"')
        return self.map[key]

    def int_(self, key: str, default=None, *, lo=None, hi=None, required=False):
        val = self.req(key) if required else self.opt(key, default)
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, int):
            self.fail(key, f"must be an integer (got {val!r})")
        if lo is not None and val < lo:
            self.fail(key, f"must be >= {lo} (got {val})")
        if hi is not None and val > hi:
            self.fail(key, f"must be <= {hi} (got {val})")
        return int(val)

    def num(self, key: str, default=None, *, required=False):
        val = self.req(key) if required else self.opt(key, default)
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.fail(key, f"must be a number (got {val!r})")
        return float(val)

    def str_(self, key: str, default=None, *, choices=None, required=False):
        val = self.req(key) if required else self.opt(key, default)
        if val is None:
            return None
        if not isinstance(val, str):
            self.fail(key, f"must be a string (got {val!r})")
        if choices is not None and val not in choices:
            self.fail(key, f"must be one of {sorted(choices)} (got {val!r})")
        return val

    def bool_(self, key: str, default=None):
        val = self.opt(key, default)
        if val is None:
            return None
        if not isinstance(val, bool):
            self.fail(key, f"must be true or false (got {val!r})")
        return val

    def list_(self, key: str, default=None, *, required=False, nonempty=False):
        val = self.req(key) if required else self.opt(key, default)
        if val is None:
            return None
        if not isinstance(val, list):
            self.fail(key, f"must be a list (got {val!r})")
        if nonempty and not val:
            self.fail(key, "must not be empty")
        return list(val)

    def dict_(self, key: str, default=None, *, required=False):
        val = self.req(key) if required else self.opt(key, default)
        if val is None:
            return None
        if not isinstance(val, dict):
            self.fail(key, f"must be an object (got {val!r})")
        return dict(val)

    def reject_unknown(self, allowed):
        allowed = set(allowed) | set(_COMMON_KEYS)
        for key in self.map:
            if key not in allowed:
                raise ConfigError(
                    f'{self._where(key)}: unknown key "{key}" for this command '
                    f"(allowed: {sorted(allowed)})"
                )


def _read_config(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path} line {exc.lineno}, column {exc.colno}: invalid JSON ({exc.msg})"
        ) from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return obj, raw


def _resolve_seed(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f'{path}: "seed" must be an integer (got {value!r})')
    if not (0 <= value < 2**64):
        raise ConfigError(f'{path}: "seed" must be an unsigned 64-bit integer')
    return int(value)


def _learner_from_json(obj, cfg: _Cfg, key: str) -> LearnerSpec:
    """A learner is a menu name or {"kind": ..., hyperparameters...}."""
    if isinstance(obj, str):
        if obj not in LEARNER_MENU:
            cfg.fail(key, f"names unknown learner {obj!r}; menu: {sorted(LEARNER_MENU)}")
        return LEARNER_MENU[obj]()
    if not isinstance(obj, dict):
        cfg.fail(key, f"entries must be a learner name or an object (got {obj!r})")
    body = dict(obj)
    kind = body.pop("kind", None)
    if kind not in KINDS:
        cfg.fail(key, f'needs "kind" from {list(KINDS)} (got {kind!r})')
    try:
        return LearnerSpec(kind, body).validate()
    except ValueError as exc:
        cfg.fail(key, f"is not a valid learner spec: {exc}")


_DDC_FIELDS = {
    "alpha": float, "RC": float, "delta": float, "T": int,
    "shock_mean": float, "shock_sd": float, "grid_size": int,
    "n_quad": int, "vi_tol": float, "max_sweeps": int,
    "clip_p": float, "x_init": float,
}


def _ddc_config(cfg: _Cfg, seed: int, source: dict | None = None, where="config") -> DdcConfig:
    fields = {}
    src = cfg.map if source is None else source
    for name, kind in _DDC_FIELDS.items():
        if name not in src:
            continue
        val = src[name]
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            cfg.fail(name, f"must be a number (got {val!r})")
        if kind is int and not isinstance(val, int):
            cfg.fail(name, f"must be an integer (got {val!r})")
        fields[name] = kind(val)
        cfg.seen.add(name)
    try:
        return DdcConfig(seed=seed, **fields)
    except ValueError as exc:
        raise ConfigError(f"{where}: invalid simulator settings: {exc}") from None


# ---------------------------------------------------------------------------
# dataset loading


def load_csv(path: str, schema) -> Dataset:
    """Strictly parse a CSV into a Dataset.

    ``schema`` is an ordered sequence of (column, role) pairs; the file's
    header must contain exactly those columns. Every cell must parse as
    a finite number; offenders are reported with their line and column.
    """
    pairs = [(str(n), str(r)) for n, r in schema]
    for name, role in pairs:
        if role not in ROLES:
            raise DataError(f"schema role for {name!r} must be one of {ROLES}")
    try:
        fh = open(path, "r", newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        names = [n for n, _ in pairs]
        for n in names:
            if n not in header:
                raise DataError(f"{path}: missing column {n!r}")
        for h in header:
            if h not in names:
                raise DataError(f"{path}: unexpected column {h!r}")
        pos = {n: header.index(n) for n in names}
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path} line {line_no}: expected {len(header)} cells, got {len(row)}"
                )
            rows.append((line_no, row))
    if not rows:
        raise DataError(f"{path}: no data rows")
    cols = {}
    for name, _ in pairs:
        j = pos[name]
        vals = np.empty(len(rows))
        for i, (line_no, row) in enumerate(rows):
            cell = row[j].strip()
            try:
                vals[i] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path} line {line_no}, column {name!r}: "
                    f"could not parse {cell!r} as a number"
                ) from None
            if not np.isfinite(vals[i]):
                raise DataError(
                    f"{path} line {line_no}, column {name!r}: non-finite value {cell!r}"
                )
        cols[name] = vals
    return Dataset.from_columns(cols, dict(pairs))


def _schema_from_json(obj, cfg: _Cfg):
    if isinstance(obj, dict):
        items = list(obj.items())
    elif isinstance(obj, list):
        items = []
        for entry in obj:
            if not (isinstance(entry, list) and len(entry) == 2):
                cfg.fail("schema", f"entries must be [column, role] pairs (got {entry!r})")
            items.append((entry[0], entry[1]))
    else:
        cfg.fail("schema", "must be an object {column: role} or a list of pairs")
    for name, role in items:
        if not isinstance(name, str) or not isinstance(role, str):
            cfg.fail("schema", f"column names and roles must be strings (got {name!r}: {role!r})")
        if role not in ROLES:
            cfg.fail("schema", f"role for {name!r} must be one of {ROLES}")
    return items


def _load_dataset(cfg: _Cfg, require_names=None) -> Dataset:
    path = cfg.str_("dataset", required=True)
    schema = cfg.req("schema")
    items = _schema_from_json(schema, cfg)
    if require_names is not None:
        have = {n for n, _ in items}
        for n in require_names:
            if n not in have:
                cfg.fail("schema", f"must include a column named {n!r} for this command")
    if not os.path.exists(path):
        raise ConfigError(f'{cfg.path}: dataset file does not exist: "{path}"')
    try:
        return load_csv(path, items)
    except DataError as exc:
        # dataset problems found while validating the run are config errors
        raise ConfigError(str(exc)) from None


def _ddc_panel_from_dataset(ds: Dataset, cfg: _Cfg, seed: int) -> DdcPanel:
    by_role = {}
    for name, role in zip(ds.names, ds.roles):
        by_role.setdefault(role, []).append(name)
    for role in ("regressor", "indicator", "next-state"):
        if len(by_role.get(role, [])) != 1:
            cfg.fail("schema", f"needs exactly one {role!r} column for the ddc moment")
    x = ds.col(by_role["regressor"][0])
    y1 = ds.col(by_role["indicator"][0])
    w = ds.col(by_role["next-state"][0])
    bad = np.nonzero((y1 != 0.0) & (y1 != 1.0))[0]
    if bad.size:
        raise ConfigError(
            f"{cfg.path}: indicator column {by_role['indicator'][0]!r} "
            f"must be 0/1 (row {int(bad[0]) + 1} is {y1[bad[0]]!r})"
        )
    delta = cfg.num("delta", required=True)
    if not (0.0 < delta < 1.0):
        cfg.fail("delta", "must lie strictly between 0 and 1")
    dcfg = _ddc_config(cfg, seed, source={**cfg.map, "T": max(int(ds.n), 2)})
    data = Dataset.from_columns(
        {"x": x, "y1": y1, "xnext": w},
        {"x": "regressor", "y1": "indicator", "xnext": "next-state"},
    )
    return DdcPanel(
        data=data, replacement_freq=float(y1.mean()), solution=None,
        config=dcfg, shocks=None,
    )


# ---------------------------------------------------------------------------
# serialization


def _np_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_np_default) + "\n"


def _write_atomic(out_dir: str, fname: str, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{fname}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, os.path.join(out_dir, fname))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _gmm_result_json(res, extra=None) -> dict:
    out = {
        "beta_hat": res.beta_hat,
        "se": res.se,
        "ci": res.ci,
        "vcov": res.vcov,
        "objective": res.objective,
        "n": res.n,
        "L": res.L,
        "converged": res.converged,
        "n_iter": res.n_iter,
        "fit_flags": res.fit_flags,
    }
    if res.remainders:
        out["remainders"] = res.remainders
    if extra:
        out.update(extra)
    return out


def _git_describe() -> str | None:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        proc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        return None
    if proc.returncode != 0:
        return None
    return proc.stdout.strip() or None


# ---------------------------------------------------------------------------
# command implementations (each returns {filename: text})


def _cmd_ddc_mc(cfg: _Cfg, seed: int) -> dict:
    R = cfg.int_("R", lo=2, required=True)
    raw_learners = cfg.list_("learners", required=True, nonempty=True)
    learners = []
    for entry in raw_learners:
        if isinstance(entry, str):
            if entry not in LEARNER_MENU:
                cfg.fail("learners", f"names unknown learner {entry!r}; menu: {sorted(LEARNER_MENU)}")
            learners.append(entry)
        elif isinstance(entry, dict) and "name" in entry and "spec" in entry:
            learners.append(
                (str(entry["name"]), _learner_from_json(entry["spec"], cfg, "learners"))
            )
        else:
            cfg.fail(
                "learners",
                f'entries must be menu names or {{"name", "spec"}} objects (got {entry!r})',
            )
    variants = cfg.list_("variants", ["two-step", "lr"])
    for v in variants:
        if v not in ("two-step", "lr"):
            cfg.fail("variants", f"entries must be 'two-step' or 'lr' (got {v!r})")
    L = cfg.int_("L", 5, lo=2)
    dcfg = _ddc_config(cfg, seed)
    plan = None if L == 5 else make_blocked_fold_plan(dcfg.T, L)
    summary = ddc_monte_carlo(dcfg, R, learners, plan=plan, variants=tuple(variants))
    result = {
        "table": summary.table,
        "failures": summary.failures,
        "R": summary.R,
        "replications_completed": len(summary.rows),
    }
    return {
        "replications.csv": summary.rows_csv(),
        "summary.csv": summary.summary_csv(),
        "result.json": _dump_json(result),
    }


def _cmd_estimate(cfg: _Cfg, seed: int) -> dict:
    moment = cfg.str_("moment", choices=("ddc", "dr-linear"), required=True)
    if moment == "ddc":
        return _estimate_ddc(cfg, seed)
    return _estimate_dr_linear(cfg, seed)


def _estimate_ddc(cfg: _Cfg, seed: int) -> dict:
    L = cfg.int_("L", 5, lo=2)
    variant = cfg.str_("variant", "lr", choices=("lr", "two-step"))
    learner = _learner_from_json(cfg.opt("learner", "quad"), cfg, "learner")
    design = cfg.dict_("design")
    has_dataset = "dataset" in cfg.map
    if design is not None and has_dataset:
        cfg.fail("design", 'and "dataset" are mutually exclusive')
    beta0 = cfg.list_("beta0")
    if beta0 is not None:
        if len(beta0) != 2 or any(
            isinstance(b, bool) or not isinstance(b, (int, float)) for b in beta0
        ):
            cfg.fail("beta0", f"must be two numbers (got {beta0!r})")
        beta0 = np.asarray(beta0, dtype=np.float64)
    if design is not None:
        for key in design:
            if key not in _DDC_FIELDS:
                cfg.fail("design", f"has unknown simulator field {key!r}")
        dcfg = _ddc_config(cfg, seed, source=design, where=f"{cfg.path} design")
        panel = solve_and_simulate(dcfg)
    elif has_dataset:
        ds = _load_dataset(cfg)
        panel = _ddc_panel_from_dataset(ds, cfg, seed)
    else:
        raise ConfigError(f'{cfg.path}: ddc estimate needs "design" or "dataset"')
    plan = make_blocked_fold_plan(panel.data.n, L)
    res = ddc_estimate(panel, learner, plan=plan, variant=variant, seed=seed, beta0=beta0)
    extra = {
        "moment": "ddc",
        "variant": variant,
        "replacement_freq": panel.replacement_freq,
        "parameters": ["alpha", "RC"],
    }
    return {"result.json": _dump_json(_gmm_result_json(res, extra))}


def _estimate_dr_linear(cfg: _Cfg, seed: int) -> dict:
    ds = _load_dataset(cfg)
    fun = cfg.dict_("functional", required=True)
    allowed = {"name", "outcome", "x_cols", "train_indicator"}
    for key in fun:
        if key not in allowed:
            cfg.fail("functional", f"has unknown field {key!r} (allowed: {sorted(allowed)})")
    outcome = fun.get("outcome")
    x_cols = fun.get("x_cols")
    if not isinstance(outcome, str) or outcome not in ds.names:
        cfg.fail("functional", f'"outcome" must name a dataset column (got {outcome!r})')
    if (
        not isinstance(x_cols, list)
        or not x_cols
        or any(not isinstance(c, str) or c not in ds.names for c in x_cols)
    ):
        cfg.fail("functional", f'"x_cols" must list dataset columns (got {x_cols!r})')
    train_ind = fun.get("train_indicator")
    if train_ind is not None and (not isinstance(train_ind, str) or train_ind not in ds.names):
        cfg.fail("functional", f'"train_indicator" must name a dataset column (got {train_ind!r})')
    name = str(fun.get("name", "mean-regression"))
    cols = tuple(x_cols)

    def g(data, gamma, _cols=cols):
        X = np.column_stack([data.col(c) for c in _cols])
        return np.asarray(gamma(X), dtype=np.float64)

    spec = LinearFunctionalSpec(
        name, "point-eval", g, outcome, cols, train_indicator=train_ind,
    )
    gamma_learner = _learner_from_json(
        cfg.opt("gamma_learner", {"kind": "series", "degree": 2}), cfg, "gamma_learner"
    )
    lam = cfg.str_("lambda_learner", "series-auto", choices=("series-auto",))
    L = cfg.int_("L", 5, lo=2)
    aux = bool(cfg.bool_("aux_split", False))
    trim = cfg.num("trim_warn_frac", 0.05)
    plan = make_fold_plan(ds.n, L, seed=seed, aux_split=aux)
    res = estimate_dr_linear(
        ds, spec, gamma_learner, lam, plan, seed=seed, trim_warn_frac=trim
    )
    extra = {"moment": "dr-linear", "functional": name}
    return {"result.json": _dump_json(_gmm_result_json(res, extra))}


def _cmd_dr_check(cfg: _Cfg, seed: int) -> dict:
    designs = cfg.list_("designs", sorted(ALL_DESIGNS))
    for d in designs:
        if d not in ALL_DESIGNS:
            cfg.fail("designs", f"entries must be in {sorted(ALL_DESIGNS)} (got {d!r})")
    n_eval = cfg.int_("n_eval", 100_000, lo=100)
    seeds = cfg.list_("seeds", [seed])
    for s in seeds:
        if isinstance(s, bool) or not isinstance(s, int):
            cfg.fail("seeds", f"entries must be integers (got {s!r})")
    results = {}
    ok = True
    for dname in designs:
        design = ALL_DESIGNS[dname]()
        model = design.model()
        per_seed = {}
        for s in seeds:
            rep = dr_check(
                model, design, design.wrong_gamma(), design.wrong_lambda(),
                n_eval=n_eval, seed=int(s),
            )
            per_seed[str(s)] = rep
            ok = ok and rep["passed"]
        results[dname] = per_seed
    return {"result.json": _dump_json({"designs": results, "passed": ok})}


def _check_designs(cfg: _Cfg, include_ddc: bool):
    menu = sorted(ALL_DESIGNS) + (["ddc"] if include_ddc else [])
    designs = cfg.list_("designs", menu)
    for d in designs:
        if d not in menu:
            cfg.fail("designs", f"entries must be in {menu} (got {d!r})")
    return designs


def _cmd_lr_check(cfg: _Cfg, seed: int) -> dict:
    designs = _check_designs(cfg, include_ddc=True)
    n_eval = cfg.int_("n_eval", 100_000, lo=100)
    taus = cfg.list_("tau_grid")
    if taus is not None:
        if len(taus) < 3 or any(
            isinstance(t, bool) or not isinstance(t, (int, float)) for t in taus
        ):
            cfg.fail("tau_grid", "must be a list of at least 3 numbers")
        taus = tuple(float(t) for t in taus)
    results = {}
    ok = True
    for dname in designs:
        if dname == "ddc":
            dcfg = DdcConfig(seed=seed)
            design = DdcCheckDesign(dcfg)
            model = make_ddc_model(
                dcfg.delta, LearnerSpec.series(degree=2), clip=dcfg.clip_p
            )
        else:
            design = ALL_DESIGNS[dname]()
            model = design.model()
        kw = {"n_eval": n_eval, "seed": seed}
        if taus is not None:
            kw["tau_grid"] = taus
        rep = lr_check(model, design, **kw)
        results[dname] = rep
        ok = ok and rep["passed"]
    return {"result.json": _dump_json({"designs": results, "passed": ok})}


def _cmd_diagnose_remainders(cfg: _Cfg, seed: int) -> dict:
    dname = cfg.str_("design", choices=tuple(sorted(ALL_DESIGNS)), required=True)
    n = cfg.int_("n", required=True, lo=50)
    L = cfg.int_("L", 5, lo=2)
    n_eval = cfg.int_("n_eval", 100_000, lo=100)
    aux_default = dname == "integrated-squared-density"
    aux = bool(cfg.bool_("aux_split", aux_default))
    c_scales = cfg.list_("c_scales")
    if c_scales is not None:
        for c in c_scales:
            if isinstance(c, bool) or not isinstance(c, (int, float)) or not 0 <= c <= 1:
                cfg.fail("c_scales", f"entries must be numbers in [0, 1] (got {c!r})")
    design = ALL_DESIGNS[dname]()
    model = design.model()
    from .seeds import STREAM_MC, child_rng

    data = design.sample(n, child_rng(seed, STREAM_MC, 0))
    plan = make_fold_plan(n, L, seed=seed, aux_split=aux)
    nuis = crossfit_nuisances(data, plan, model, seed=seed, beta=design.beta0)
    out = {
        "design": dname,
        "n": n,
        "fitted": remainder_diagnostics(
            data, plan, nuis, model, design, n_eval=n_eval, seed=seed
        ),
    }
    if c_scales:
        truth = design.true_nuisances()
        scaled = {}
        for c in c_scales:
            per_fold = [
                blend_handles(truth, nuis[ell], float(c)) for ell in range(plan.L)
            ]
            nuis_c = FoldNuisances(model, plan, seed, per_fold, nuis.beta_anchor)
            scaled[repr(float(c))] = remainder_diagnostics(
                data, plan, nuis_c, model, design, n_eval=n_eval, seed=seed
            )
        out["scaled"] = scaled
    return {"result.json": _dump_json(out)}


def _design_or_dataset(cfg: _Cfg, seed: int, make_design, require_names=None):
    """Shared sampling logic for the scalar estimator commands."""
    has_dataset = "dataset" in cfg.map
    n = cfg.int_("n", lo=50)
    if has_dataset and n is not None:
        cfg.fail("n", 'and "dataset" are mutually exclusive')
    if has_dataset:
        return _load_dataset(cfg, require_names=require_names), None
    if n is None:
        raise ConfigError(f'{cfg.path}: needs "dataset" or a sample size "n"')
    design = make_design()
    from .seeds import STREAM_MC, child_rng

    return design.sample(n, child_rng(seed, STREAM_MC, 0)), design


def _cmd_surplus(cfg: _Cfg, seed: int) -> dict:
    B = cfg.num("B", 1.0)
    p_lo = cfg.num("p_lo", 1.2)
    p_hi = cfg.num("p_hi", 1.8)
    if not p_lo < p_hi:
        cfg.fail("p_lo", f"must be below p_hi (got [{p_lo}, {p_hi}])")
    floor = cfg.num("floor", 1e-4)
    L = cfg.int_("L", 5, lo=2)
    gamma_learner = _learner_from_json(
        cfg.opt("gamma_learner", {"kind": "series", "degree": 2}), cfg, "gamma_learner"
    )
    data, design = _design_or_dataset(
        cfg, seed, lambda: SurplusBound(B=B, p_lo=p_lo, p_hi=p_hi),
        require_names=("q", "p1", "p2", "y"),
    )
    plan = make_fold_plan(data.n, L, seed=seed, aux_split=True)
    res = estimate_surplus_bound(
        data, plan, B=B, p_lo=p_lo, p_hi=p_hi,
        gamma_learner=gamma_learner, floor=floor, seed=seed,
    )
    extra = {"estimand": "surplus-bound", "B": B, "p_lo": p_lo, "p_hi": p_hi}
    if design is not None:
        extra["design_beta0"] = design.beta0
    return {"result.json": _dump_json(_gmm_result_json(res, extra))}


def _cmd_dwad(cfg: _Cfg, seed: int) -> dict:
    L = cfg.int_("L", 5, lo=2)
    include_adj = bool(cfg.bool_("include_adjustment", True))
    learner = _learner_from_json(
        cfg.opt("learner", {"kind": "cond-density"}), cfg, "learner"
    )
    grid_points = cfg.int_("grid_points", None, lo=16)
    data, design = _design_or_dataset(
        cfg, seed, DensityWeightedDerivative, require_names=("y",)
    )
    plan = make_fold_plan(data.n, L, seed=seed, aux_split=True)
    res = estimate_dwad(
        data, plan, learner=learner, seed=seed,
        grid_points=grid_points, include_adjustment=include_adj,
    )
    extra = {"estimand": "density-weighted-average-derivative",
             "include_adjustment": include_adj}
    if design is not None:
        extra["design_beta0"] = design.beta0
    return {"result.json": _dump_json(_gmm_result_json(res, extra))}


def _cmd_isd(cfg: _Cfg, seed: int) -> dict:
    L = cfg.int_("L", 5, lo=2)
    learner = _learner_from_json(
        cfg.opt("learner", {"kind": "cond-density"}), cfg, "learner"
    )
    grid_points = cfg.int_("grid_points", None, lo=16)
    data, design = _design_or_dataset(cfg, seed, IntegratedSquaredDensity)
    plan = make_fold_plan(data.n, L, seed=seed, aux_split=True)
    res = estimate_integrated_squared_density(
        data, plan, learner=learner, seed=seed, grid_points=grid_points
    )
    extra = {"estimand": "integrated-squared-density"}
    if design is not None:
        extra["design_beta0"] = design.beta0
    return {"result.json": _dump_json(_gmm_result_json(res, extra))}


def _cmd_partial_robustness(cfg: _Cfg, seed: int) -> dict:
    designs = cfg.list_("designs", ["gaussian", "uniform"])
    for d in designs:
        if d not in ("gaussian", "uniform"):
            cfg.fail("designs", f"entries must be 'gaussian' or 'uniform' (got {d!r})")
    n = cfg.int_("n", 100_000, lo=100)
    noise_sd = cfg.num("noise_sd", 1.0)
    results = {
        d: partial_robustness_experiment(n=n, seed=seed, design=d, noise_sd=noise_sd)
        for d in designs
    }
    return {"result.json": _dump_json({"designs": results})}


_RUNNERS = {
    "ddc-mc": _cmd_ddc_mc,
    "estimate": _cmd_estimate,
    "dr-check": _cmd_dr_check,
    "lr-check": _cmd_lr_check,
    "diagnose-remainders": _cmd_diagnose_remainders,
    "surplus": _cmd_surplus,
    "dwad": _cmd_dwad,
    "isd": _cmd_isd,
    "partial-robustness": _cmd_partial_robustness,
}

_ALLOWED_KEYS = {
    "ddc-mc": {"R", "learners", "variants", "L", *_DDC_FIELDS},
    "estimate": {
        "moment", "design", "dataset", "schema", "learner", "variant", "L",
        "beta0", "functional", "gamma_learner", "lambda_learner",
        "aux_split", "trim_warn_frac", *_DDC_FIELDS,
    },
    "dr-check": {"designs", "n_eval", "seeds"},
    "lr-check": {"designs", "n_eval", "tau_grid"},
    "diagnose-remainders": {"design", "n", "L", "n_eval", "aux_split", "c_scales"},
    "surplus": {"dataset", "schema", "n", "B", "p_lo", "p_hi", "floor", "L",
                "gamma_learner"},
    "dwad": {"dataset", "schema", "n", "L", "learner", "include_adjustment",
             "grid_points"},
    "isd": {"dataset", "schema", "n", "L", "learner", "grid_points"},
    "partial-robustness": {"designs", "n", "noise_sd"},
}


# ---------------------------------------------------------------------------
# orchestration


def _apply_threads(threads: int | None):
    if threads is None:
        return None
    import numba

    n = max(1, min(int(threads), int(numba.config.NUMBA_NUM_THREADS)))
    numba.set_num_threads(n)
    return n


def run(command: str, config_path: str, *, seed_flag=None, out_flag=None,
        threads=None) -> int:
    """Validate, compute, then write artifacts. Nothing is written until
    the computation finished, so failed runs leave no partial output."""
    obj, raw = _read_config(config_path)

    # a manifest passed back as the config reruns its embedded config
    out_hint = None
    manifest_seed = None
    if "config" in obj and isinstance(obj.get("config"), dict):
        inner_cmd = obj.get("command")
        if inner_cmd != command:
            raise ConfigError(
                f"{config_path}: manifest is for command {inner_cmd!r}, "
                f"not {command!r}"
            )
        if "seed" in obj:
            manifest_seed = _resolve_seed(obj["seed"], config_path)
        out_hint = obj.get("out")
        obj = dict(obj["config"])

    if "command" in obj:
        if not isinstance(obj["command"], str) or obj["command"] != command:
            raise ConfigError(
                f'{config_path}: config "command" is {obj.get("command")!r}, '
                f"but the command line says {command!r}"
            )

    cfg = _Cfg(obj, config_path, raw)
    if seed_flag is not None:
        seed = _resolve_seed(seed_flag, "--seed")
    elif "seed" in obj:
        seed = _resolve_seed(obj["seed"], config_path)
    elif manifest_seed is not None:
        seed = manifest_seed
    else:
        seed = 0
    cfg.seen.add("seed")

    out_dir = out_flag or cfg.str_("out") or out_hint
    if out_dir is None:
        raise ConfigError(
            f'{config_path}: no output directory (set "out" in the config '
            f"or pass --out)"
        )
    if os.path.exists(out_dir) and not os.path.isdir(out_dir):
        raise ConfigError(f"output path exists and is not a directory: {out_dir}")

    cfg.reject_unknown(_ALLOWED_KEYS[command])
    runner = _RUNNERS[command]
    threads_set = _apply_threads(threads)

    started = time.time()
    files = runner(cfg, seed)
    wall = time.time() - started

    echo = {k: v for k, v in cfg.map.items() if k not in ("command", "out")}
    echo["seed"] = seed
    manifest = {
        "command": command,
        "config": echo,
        "seed": seed,
        "out": out_dir,
        "outputs": sorted(files),
        "git_describe": _git_describe(),
        "wall_time_s": round(wall, 3),
        "threads": threads_set,
        "backend": BACKEND,
        "versions": {
            "package": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
    }
    os.makedirs(out_dir, exist_ok=True)
    for fname, text in files.items():
        _write_atomic(out_dir, fname, text)
    _write_atomic(out_dir, "manifest.json", _dump_json(manifest))
    print(f"{command}: wrote {', '.join(sorted(files))} and manifest.json to {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lrgmm",
        description="Locally robust GMM runs driven by JSON configs.",
    )
    parser.add_argument("command", choices=COMMANDS, help="operation to run")
    parser.add_argument("--config", required=True, help="JSON config (or a manifest)")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed, overriding the config")
    parser.add_argument("--out", default=None,
                        help="output directory, overriding the config")
    parser.add_argument("--threads", type=int, default=None,
                        help="compute thread cap (never affects results)")
    args = parser.parse_args(argv)
    try:
        return run(
            args.command, args.config,
            seed_flag=args.seed, out_flag=args.out, threads=args.threads,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _MODULE_ERRORS as exc:
        print(f"{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
