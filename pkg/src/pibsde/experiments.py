"""Experiment configuration, orchestration and CSV output."""
from __future__ import annotations

import csv
import io
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .bsde import estimate_xi_nested, xi_closed_form_linear, alpha_over_xi_linear
from .closed_form import (Kind, UnstableRegimeError, g_eval, integrate_riccati_rk4, make_AH,
                          nirvana_blowup_time, riccati_spec, stability_full, stability_partial)
from .filtering import (GridFilter, KalmanState, grid_build, grid_run, kalman_run,
                        steady_state_variance)
from .model import CirModel, InvalidModelError, LinearOuModel, check_mgf_cir, check_novikov_cir
from .sim import RngSpec, TimeGrid, simulate_market


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class ConditionAbort(RuntimeError):
    """A required integrability or stability check failed."""


REQUIRED = ("model",)

# per-kind parameter defaults (the two calibrations used throughout)
MODEL_DEFAULTS = {
    "linear": {"kappa": 8.0, "a": 0.3, "rho": -0.8, "sigma": 0.15, "mu": 0.0},
    "cir": {"kappa": 8.0, "a": 0.4, "rho": 0.0, "sigma": 0.15, "c": 0.25, "ybar": 0.05},
}
# quantities no calibration pins down; echoed with an "assumed" marker
ASSUMED = ("y0", "s0", "x0", "prior")


@dataclass
class ExperimentConfig:
    model: str = "linear"
    gamma: float = 1.2
    T: float = 1.0
    r: float = 0.0
    mu: float | None = None
    kappa: float | None = None
    a: float | None = None
    rho: float | None = None
    sigma: float | None = None
    c: float | None = None
    ybar: float | None = None
    sigmas: tuple[float, ...] = (0.026, 0.15)
    seed: int = 0
    n_steps: int = 1000
    n_paths: int = 1
    n_inner: int = 10
    n_checkpoints: int = 50
    xi_method: str = "innovations"
    grid_n: int = 400
    grid_lo: float | None = None
    grid_hi: float | None = None
    steady: bool = True
    y0: float | None = None
    s0: float = 1.0
    x0: float = 1.0
    prior: str | None = None
    workers: int = 1
    out: str = "results"
    assumed: tuple[str, ...] = field(default=(), repr=False)

    def build_model(self, sigma: float | None = None):
        s = self.sigma if sigma is None else sigma
        if self.model == "linear":
            return LinearOuModel(mu=self.mu, kappa=self.kappa, a=self.a, rho=self.rho, sigma=s, r=self.r)
        return CirModel(c=self.c, kappa=self.kappa, ybar=self.ybar, a=self.a, sigma=s, rho=self.rho, r=self.r)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(0.0, self.T, self.n_steps)

    def echo(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "assumed" or _KIND_ONLY.get(f.name, self.model) != self.model:
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            mark = "  # assumed" if f.name in self.assumed else ""
            lines.append(f"{f.name} = {v}{mark}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {
    "model": str, "gamma": float, "T": float, "r": float, "mu": float, "kappa": float, "a": float,
    "rho": float, "sigma": float, "c": float, "ybar": float, "sigmas": "floats", "seed": int,
    "n_steps": int, "n_paths": int, "n_inner": int, "n_checkpoints": int, "xi_method": str,
    "grid_n": int, "grid_lo": float, "grid_hi": float, "steady": bool, "y0": float, "s0": float,
    "x0": float, "prior": str, "workers": int, "out": str,
}
_KIND_ONLY = {"mu": "linear", "c": "cir", "ybar": "cir", "sigmas": "cir"}


def _convert(key: str, raw: str, line: int):
    kind = _FIELD_TYPES[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind is int:
            return int(raw, 0)
        return kind(raw)
    except ValueError:
        name = "list of reals" if kind == "floats" else kind.__name__
        raise ConfigError(f"{key}: expected {name}, got {raw!r}", line) from None


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a validated config."""
    values: dict[str, object] = {}
    where: dict[str, int] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", no)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", no)
        values[key] = _convert(key, val, no)
        where[key] = no
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    kind = values["model"]
    if kind not in MODEL_DEFAULTS:
        raise ConfigError(f"model must be one of {sorted(MODEL_DEFAULTS)}", where.get("model"))
    for key, owner in _KIND_ONLY.items():
        if key in values and owner != kind:
            raise ConfigError(f"key {key!r} does not apply to model {kind!r}", where.get(key))
    for key, default in MODEL_DEFAULTS[kind].items():
        values.setdefault(key, default)
    assumed = []
    if "y0" not in values:
        values["y0"] = 0.0 if kind == "linear" else values["ybar"]
        assumed.append("y0")
    if "prior" not in values:
        values["prior"] = "kalman-steady" if kind == "linear" else "point"
        assumed.append("prior")
    for key in ("s0", "x0"):
        if key not in values:
            assumed.append(key)
    cfg = ExperimentConfig(**values, assumed=tuple(assumed))
    _validate(cfg, where)
    return cfg


def _validate(cfg: ExperimentConfig, where: dict[str, int]):
    def bad(key, msg):
        raise ConfigError(f"{key}: {msg}", where.get(key))

    if not cfg.gamma > 0 or cfg.gamma == 1:
        bad("gamma", "must be positive and != 1")
    if not cfg.T > 0:
        bad("T", "must be positive")
    for key in ("n_steps", "n_paths", "n_checkpoints", "grid_n", "workers"):
        if getattr(cfg, key) < 1:
            bad(key, "must be >= 1")
    if cfg.n_inner < 2:
        bad("n_inner", "must be >= 2")
    if cfg.grid_n < 3:
        bad("grid_n", "must be >= 3")
    if cfg.n_checkpoints > cfg.n_steps:
        bad("n_checkpoints", "cannot exceed n_steps")
    if cfg.xi_method not in ("innovations", "girsanov", "naive"):
        bad("xi_method", "must be innovations, girsanov or naive")
    if cfg.prior not in ("kalman-steady", "stationary", "point"):
        bad("prior", "must be kalman-steady, stationary or point")
    if cfg.s0 <= 0 or cfg.x0 <= 0:
        bad("s0" if cfg.s0 <= 0 else "x0", "must be positive")
    if (cfg.grid_lo is None) != (cfg.grid_hi is None):
        bad("grid_lo", "grid_lo and grid_hi must be given together")
    if cfg.model == "cir" and not cfg.sigmas:
        bad("sigmas", "needs at least one value")
    positive = ("kappa", "a", "sigma") + (("ybar",) if cfg.model == "cir" else ())
    for key in positive:
        if not getattr(cfg, key) > 0:
            bad(key, "must be positive")
    if not abs(cfg.rho) < 1:
        bad("rho", "must lie in (-1, 1)")
    if cfg.r < 0:
        bad("r", "must be nonnegative")
    if cfg.model == "cir" and any(not s > 0 for s in cfg.sigmas):
        bad("sigmas", "must be positive")
    for s in (cfg.sigma, *(cfg.sigmas if cfg.model == "cir" else ())):
        try:
            cfg.build_model(s)
        except InvalidModelError as exc:
            raise ConfigError(f"invalid model parameters: {exc}", where.get("a")) from None


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------

RESULT_COLUMNS = ("t", "S", "Y", "yhat", "G_partial", "G_full", "G_diff", "pi_myopic", "pi_hedge",
                  "xi", "xi_stderr", "G_partial_stderr")


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if not np.isfinite(v):
        return ""
    return f"{v:.17g}"


def write_csv(path: Path, columns, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    return path


def write_echo(cfg: ExperimentConfig, out: Path, extra: str = "") -> Path:
    out.mkdir(parents=True, exist_ok=True)
    p = out / "config_echo.txt"
    with open(p, "w", encoding="utf-8", newline="") as fh:
        fh.write(cfg.echo() + extra)
    return p


def checkpoint_indices(n_steps: int, n_checkpoints: int) -> np.ndarray:
    return np.unique(np.round(np.linspace(0, n_steps, n_checkpoints + 1)).astype(int))


# --------------------------------------------------------------------------
# linear example
# --------------------------------------------------------------------------

def run_fig1(cfg: ExperimentConfig, out: str | Path | None = None) -> dict[str, Path]:
    """One simulated path of the linear model: filter, partial and full G, strategy split."""
    if cfg.model != "linear":
        raise ConfigError("fig1 needs model = linear")
    out = Path(out or cfg.out)
    model = cfg.build_model()
    g = cfg.gamma
    report = run_checks(cfg)
    if not (stability_full(model, g) and stability_partial(model, g)):
        raise ConditionAbort("unstable Riccati regime\n" + report)
    grid = cfg.grid
    path = simulate_market(model, grid, RngSpec(cfg.seed), y0=cfg.y0, s0=cfg.s0)
    sbar = steady_state_variance(model)
    track = kalman_run(model, path, use_steady=cfg.steady, yhat0=0.0, var0=sbar)
    t = grid.times
    yhat = track.yhat[0]
    Y = path.Y[0, :, 0]
    S = np.exp(path.logS[0, :, 0])
    AHp = make_AH(Kind.LINEAR_PARTIAL, model, g, cfg.T)
    AHf = make_AH(Kind.LINEAR_FULL, model, g, cfg.T)
    xi = xi_closed_form_linear(model, g, cfg.T, t, yhat)
    Gp = xi ** g
    Gf = g_eval(AHf, t, Y)
    aox = alpha_over_xi_linear(model, g, t, yhat, T=cfg.T)
    myopic = (model.mu + yhat - model.r) / (g * model.sigma ** 2)
    hedge = aox / model.sigma
    rows = [dict(t=t[i], S=S[i], Y=Y[i], yhat=yhat[i], G_partial=Gp[i], G_full=Gf[i],
                 G_diff=Gp[i] - Gf[i], pi_myopic=myopic[i], pi_hedge=hedge[i], xi=xi[i])
            for i in range(t.size)]
    below = float(np.mean(Gp[:-1] < Gf[:-1]))
    files = {"fig1": write_csv(out / "fig1.csv", RESULT_COLUMNS, rows)}
    summary = [dict(key="fraction_G_partial_below_G_full", value=below),
               dict(key="sign_changes_G_diff", value=int(np.sum(np.diff(np.sign(Gp[:-1] - Gf[:-1])) != 0))),
               dict(key="A_partial_0", value=float(AHp.A(0.0))), dict(key="H_partial_0", value=float(AHp.H(0.0))),
               dict(key="A_full_0", value=float(AHf.A(0.0))), dict(key="H_full_0", value=float(AHf.H(0.0)))]
    files["summary"] = write_csv(out / "fig1_summary.csv", ("key", "value"), summary)
    files["echo"] = write_echo(cfg, out, "\n# checks\n" + _comment(report))
    return files


# --------------------------------------------------------------------------
# CIR example
# --------------------------------------------------------------------------

def _xi_job(args):
    model, state, g, T, n_inner, t0, n_rest, seed, sigma_idx, ck, method = args
    grid = TimeGrid(t0, T, n_rest) if n_rest > 0 else None
    # failed sufficient conditions are reported once in the config echo
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        est = estimate_xi_nested(model, state, g, T, n_inner, grid, RngSpec(seed, sigma_idx, branch=ck + 1),
                                 t=t0, method=method, enforce_conditions=False)
    return est.mean, est.stderr


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _grid_filter(cfg: ExperimentConfig, model) -> GridFilter:
    prior = cfg.prior if cfg.prior != "kalman-steady" else "stationary"
    return grid_build(model, n=cfg.grid_n, y_lo=cfg.grid_lo, y_hi=cfg.grid_hi, dt=cfg.grid.dt,
                      prior=prior, y0=cfg.y0)


def run_fig2(cfg: ExperimentConfig, out: str | Path | None = None,
             sigmas: tuple[float, ...] | None = None) -> dict[str, Path]:
    """CIR example: grid filter, nested-MC partial G and closed-form full G for each noise level."""
    if cfg.model != "cir":
        raise ConfigError("fig2 needs model = cir")
    out = Path(out or cfg.out)
    sigmas = tuple(sigmas or cfg.sigmas)
    g, T = cfg.gamma, cfg.T
    notes = []
    for s in sigmas:
        m = cfg.build_model(s)
        nov = check_novikov_cir(m, T)
        if not nov.ok:
            raise ConditionAbort(f"sigma={s}: {nov}")
        mgf = check_mgf_cir(m, g, T)
        notes.append(f"sigma={s}: {nov}")
        notes.append(f"sigma={s}: {mgf}" + ("" if mgf.ok else " (sufficient only; run continues)"))
    files = {}
    grid = cfg.grid
    ck = checkpoint_indices(grid.n_steps, cfg.n_checkpoints)
    for si, s in enumerate(sigmas):
        model = cfg.build_model(s)
        path = simulate_market(model, grid, RngSpec(cfg.seed, si), y0=cfg.y0, s0=cfg.s0)
        filt = _grid_filter(cfg, model)
        track = grid_run(model, filt, path.dlogS[0, :, 0])
        t = grid.times
        Y = path.Y[0, :, 0]
        S = np.exp(path.logS[0, :, 0])
        yhat = track @ filt.nodes
        hhat = track @ model.h(filt.nodes)
        AHf = make_AH(Kind.CIR_FULL, model, g, T)
        Gf = g_eval(AHf, t, Y)
        jobs = [(model, GridFilter(filt.nodes, track[i], filt.transition, filt.dt), g, T, cfg.n_inner,
                 float(t[i]), grid.n_steps - int(i), cfg.seed, si, j, cfg.xi_method)
                for j, i in enumerate(ck)]
        res = _map(_xi_job, jobs, cfg.workers)
        rows = []
        for (xi, se), i in zip(res, ck):
            Gp = xi ** g
            rows.append(dict(t=t[i], S=S[i], Y=Y[i], yhat=yhat[i], G_partial=Gp, G_full=Gf[i],
                             G_diff=Gp - Gf[i], pi_myopic=(hhat[i] - model.r) / (g * s * s), pi_hedge=None,
                             xi=xi, xi_stderr=se, G_partial_stderr=g * xi ** (g - 1.0) * se))
        files[f"sigma={s}"] = write_csv(out / f"fig2_sigma{s:g}.csv", RESULT_COLUMNS, rows)
    files["echo"] = write_echo(cfg, out, "\n# checks\n" + "\n".join(f"# {n}" for n in notes) + "\n")
    return files


# --------------------------------------------------------------------------
# condition report
# --------------------------------------------------------------------------

def _comment(text: str) -> str:
    return "".join(f"# {ln}\n" for ln in text.splitlines())


def run_checks(cfg: ExperimentConfig) -> str:
    """Stability, blow-up and integrability report for the configured model."""
    g, T = cfg.gamma, cfg.T
    lines = [f"model = {cfg.model}, gamma = {g}, T = {T}"]
    if cfg.model == "linear":
        m = cfg.build_model()
        full, part = stability_full(m, g), stability_partial(m, g)
        lines.append(f"stability_full = {str(full).lower()}")
        lines.append(f"stability_partial = {str(part).lower()}")
        for ok, kind in ((full, Kind.LINEAR_FULL), (part, Kind.LINEAR_PARTIAL)):
            if not ok:
                bt = nirvana_blowup_time(m, g, T, kind)
                lines.append(f"blowup_time[{kind.value}] = "
                             + ("none within horizon" if bt is None else f"{bt:.12g}"))
        return "\n".join(lines) + "\n"
    for s in (cfg.sigma, *[x for x in cfg.sigmas if x != cfg.sigma]):
        m = cfg.build_model(s)
        lines.append(f"sigma = {s}: feller = true")
        lines.append(f"sigma = {s}: {check_novikov_cir(m, T)}")
        lines.append(f"sigma = {s}: {check_mgf_cir(m, g, T)}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# smaller subcommands
# --------------------------------------------------------------------------

def run_simulate(cfg: ExperimentConfig, out: str | Path | None = None) -> dict[str, Path]:
    out = Path(out or cfg.out)
    model = cfg.build_model()
    path = simulate_market(model, cfg.grid, RngSpec(cfg.seed), y0=cfg.y0, s0=cfg.s0, n_paths=cfg.n_paths)
    t = cfg.grid.times
    rows = [dict(path=p, t=t[i], S=np.exp(path.logS[p, i, 0]), Y=path.Y[p, i, 0])
            for p in range(cfg.n_paths) for i in range(t.size)]
    return {"simulate": write_csv(out / "simulate.csv", ("path", "t", "S", "Y"), rows),
            "echo": write_echo(cfg, out)}


def run_filter(cfg: ExperimentConfig, out: str | Path | None = None) -> dict[str, Path]:
    out = Path(out or cfg.out)
    model = cfg.build_model()
    path = simulate_market(model, cfg.grid, RngSpec(cfg.seed), y0=cfg.y0, s0=cfg.s0)
    t = cfg.grid.times
    rows = []
    if cfg.model == "linear" and cfg.prior == "kalman-steady":
        tr = kalman_run(model, path, use_steady=cfg.steady)
        yhat, var = tr.yhat[0], tr.var[0]
    else:
        filt = _grid_filter(cfg, model)
        track = grid_run(model, filt, path.dlogS[0, :, 0])
        yhat = track @ filt.nodes
        var = track @ filt.nodes ** 2 - yhat ** 2
    for i in range(t.size):
        rows.append(dict(t=t[i], S=np.exp(path.logS[0, i, 0]), Y=path.Y[0, i, 0], yhat=yhat[i], var=var[i]))
    return {"filter": write_csv(out / "filter.csv", ("t", "S", "Y", "yhat", "var"), rows),
            "echo": write_echo(cfg, out)}


def run_riccati(cfg: ExperimentConfig, out: str | Path | None = None) -> dict[str, Path]:
    out = Path(out or cfg.out)
    model = cfg.build_model()
    kinds = (Kind.LINEAR_FULL, Kind.LINEAR_PARTIAL) if cfg.model == "linear" else (Kind.CIR_FULL,)
    files = {}
    for kind in kinds:
        spec = riccati_spec(kind, model, cfg.gamma)
        num = integrate_riccati_rk4(spec, cfg.T, max(cfg.n_steps, 10))
        try:
            AH = make_AH(kind, model, cfg.gamma, cfg.T)
            A, H = AH.A(num.t), AH.H(num.t)
        except UnstableRegimeError:
            A = H = np.full(num.t.size, np.nan)
        rows = [dict(t=num.t[i], A=A[i], H=H[i], A_rk4=num.A[i], H_rk4=num.H[i]) for i in range(num.t.size)]
        files[kind.value] = write_csv(out / f"riccati_{kind.value}.csv", ("t", "A", "H", "A_rk4", "H_rk4"), rows)
    files["echo"] = write_echo(cfg, out, "\n# checks\n" + _comment(run_checks(cfg)))
    return files


def run_xi(cfg: ExperimentConfig) -> str:
    """``xi(0)`` by nested Monte Carlo from the prior, with the linear closed form when available."""
    model = cfg.build_model()
    grid = cfg.grid
    if cfg.model == "linear":
        state = KalmanState(0.0, steady_state_variance(model), True)
    else:
        state = _grid_filter(cfg, model)
    est = estimate_xi_nested(model, state, cfg.gamma, cfg.T, cfg.n_inner, grid, RngSpec(cfg.seed),
                             method=cfg.xi_method, enforce_conditions=False)
    lines = [f"xi(0) = {est.mean:.12g} +- {est.stderr:.3g} (n_inner = {est.n_inner}, method = {est.method})"]
    if cfg.model == "linear":
        lines.append(f"closed form = {xi_closed_form_linear(model, cfg.gamma, cfg.T, 0.0, 0.0):.12g}")
    lines += [f"warning: {w}" for w in est.warnings]
    return "\n".join(lines) + "\n"
