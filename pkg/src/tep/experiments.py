"""Experiment runners behind the ``tep`` command.

Each runner takes an :class:`ExperimentConfig`, writes CSV artifacts into
``cfg.output_dir`` and returns a JSON-serializable report that embeds the
resolved config.  Per-run fit errors are recorded in the report rather than
raised; non-convergence is flagged so the CLI can set its exit code.
"""

from __future__ import annotations

import csv
import dataclasses
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import bpm, datasets, ep_core, gp_baseline, stp
from .student_t import StudentT

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

EXPERIMENTS = ("bpm-permutation", "stp-robustness", "limits-check")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass
class ExperimentConfig:
    experiment: str = "bpm-permutation"
    seed: int = 0
    v: float = 10.0
    epsilon: float = 0.1
    # bpm-permutation
    n_points: int = 1000
    n_permutations: int = 10
    prior_scale: float = 1.0
    # stp-robustness
    n_clean: int = 200
    n_outliers: int = 3
    outlier_distance: float = 1.0
    n_seeds: int = 5
    lengthscale: float = 1.0
    amplitude: float = 1.0
    jitter: Optional[float] = 0.1
    # limits-check
    n_limit: int = 20
    v_sweep: list = field(default_factory=lambda: [10.0, 100.0, 1e4])
    mean_tol: float = 1e-2
    evidence_tol: float = 1e-3
    # EP controls
    max_sweeps: int = 200
    tol: float = 1e-6
    damping: float = 1.0
    # output
    grid_size: int = 200
    grid_extent: float = 3.0
    output_dir: str = "out"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if not self.v > 0:
            raise ConfigError("v must be positive")
        if not 0 <= self.epsilon <= 0.5:
            raise ConfigError("epsilon must lie in [0, 1/2]")
        for name in ("n_points", "n_permutations", "n_clean", "n_seeds", "n_limit", "max_sweeps", "grid_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_outliers < 0:
            raise ConfigError("n_outliers must be >= 0")
        if not 0 < self.damping <= 1:
            raise ConfigError("damping must lie in (0, 1]")
        if self.jitter is not None and self.jitter < 0:
            raise ConfigError("jitter must be non-negative")
        self.v_sweep = [float(x) for x in self.v_sweep]

    @property
    def kernel(self) -> stp.Kernel:
        return stp.Kernel(self.lengthscale, self.amplitude, self.jitter)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["jitter"] is None:
            d.pop("jitter")  # TOML has no null; absence means the kernel default
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        d.setdefault("jitter", None)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(cfg.to_dict(), fh)


def max_workers() -> int:
    """Worker cap from ``TEP_THREADS`` (default: CPU count)."""
    env = os.environ.get("TEP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"TEP_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _map(fn: Callable, args: list) -> list:
    """Ordered map, in worker processes when more than one worker is allowed."""
    workers = min(max_workers(), len(args))
    if workers <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, args))


# Boundary geometry


def grid(size: int, extent: float) -> tuple[np.ndarray, np.ndarray]:
    g = np.linspace(-extent, extent, size)
    G1, G2 = np.meshgrid(g, g, indexing="xy")
    return g, np.column_stack([G1.ravel(), G2.ravel()])


def zero_crossings(values: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Linear-interpolated sign changes of a ``(size, size)`` grid (rows index x2)."""
    V = values
    pts = []
    # along x1 (within rows)
    a, b = V[:, :-1], V[:, 1:]
    r, c = np.nonzero(np.signbit(a) != np.signbit(b))
    w = a[r, c] / (a[r, c] - b[r, c])
    pts.append(np.column_stack([g[c] + w * (g[c + 1] - g[c]), g[r]]))
    # along x2 (within columns)
    a, b = V[:-1, :], V[1:, :]
    r, c = np.nonzero(np.signbit(a) != np.signbit(b))
    w = a[r, c] / (a[r, c] - b[r, c])
    pts.append(np.column_stack([g[c], g[r] + w * (g[r + 1] - g[r])]))
    return np.vstack(pts)


def boundary_line_angle(points: np.ndarray) -> float:
    """Direction (radians, in [0, pi)) of the total-least-squares line through ``points``."""
    if len(points) < 2:
        return float("nan")
    P = points - points.mean(0)
    _, _, vt = np.linalg.svd(P, full_matrices=False)
    d = vt[0]
    return float(np.arctan2(d[1], d[0]) % np.pi)


def line_rotation(a: float, b: float) -> float:
    """Smallest angle between two undirected lines."""
    d = abs(a - b) % np.pi
    return float(min(d, np.pi - d))


def _write_grid(path: Path, g_pts: np.ndarray, columns: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        names = list(columns)
        w.writerow(["x1", "x2"] + names)
        for i, p in enumerate(g_pts):
            w.writerow([f"{p[0]:.6g}", f"{p[1]:.6g}"] + [repr(float(columns[k][i])) for k in names])


# bpm-permutation


def _bpm_run(args):
    cfg, X, y, perm = args
    prior = StudentT(np.zeros(X.shape[1]), cfg.prior_scale * np.eye(X.shape[1]), cfg.v)
    data = bpm.make_data(X, y, cfg.epsilon)
    out: dict[str, Any] = {}
    try:
        adf = bpm.adf_fit(prior, [data[j] for j in perm])
        out["adf_normal"] = adf.mu.tolist()
    except Exception as exc:  # recorded, not fatal
        out["adf_error"] = f"{type(exc).__name__}: {exc}"
    try:
        state, post = bpm.ep_fit(prior, data, schedule=perm, max_sweeps=cfg.max_sweeps,
                                 tol=cfg.tol, damping=cfg.damping)
        out["ep_normal"] = post.mu.tolist()
        out["ep_converged"] = bool(state.status.converged)
        out["ep_sweeps"] = state.status.sweeps
    except Exception as exc:
        out["ep_error"] = f"{type(exc).__name__}: {exc}"
        out["ep_converged"] = False
    return out


def run_bpm_permutation(cfg: ExperimentConfig) -> dict[str, Any]:
    ds = datasets.gen_bpm_mixture(cfg.n_points, cfg.seed)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    perms = [rng.permutation(len(ds)) for _ in range(cfg.n_permutations)]
    runs = _map(_bpm_run, [(cfg, ds.X, ds.y, p) for p in perms])
    adf = [r["adf_normal"] for r in runs if "adf_normal" in r]
    ep = [r["ep_normal"] for r in runs if "ep_normal" in r]
    spread_adf = bpm.angular_spread(adf)
    spread_ep = bpm.angular_spread(ep)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.to_csv(out / "bpm_data.csv")
    with open(out / "bpm_normals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "method", "w1", "w2"])
        for i, r in enumerate(runs):
            for m in ("adf", "ep"):
                if f"{m}_normal" in r:
                    w.writerow([i, m] + [repr(x) for x in r[f"{m}_normal"]])
    g, pts = grid(cfg.grid_size, cfg.grid_extent)
    cols = {}
    for i, r in enumerate(runs):
        for m in ("adf", "ep"):
            if f"{m}_normal" in r:
                cols[f"{m}_{i}"] = pts @ np.asarray(r[f"{m}_normal"])
    _write_grid(out / "bpm_grid.csv", pts, cols)
    return {
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "runs": runs,
        "spread_adf": spread_adf,
        "spread_ep": spread_ep,
        "all_converged": all(r.get("ep_converged", False) for r in runs),
    }


# stp-robustness


def _fit_pair(cfg: ExperimentConfig, X, y):
    kern = cfg.kernel
    res: dict[str, Any] = {}
    try:
        s = stp.fit(X, y, kern, cfg.v, cfg.epsilon, max_sweeps=cfg.max_sweeps, tol=cfg.tol, damping=cfg.damping)
        res["stp"] = s
        res["stp_converged"] = bool(s.converged)
    except Exception as exc:
        res["stp_error"] = f"{type(exc).__name__}: {exc}"
        res["stp_converged"] = False
    try:
        gfit = gp_baseline.gp_ep_fit(X, y, kern, cfg.epsilon, max_sweeps=cfg.max_sweeps,
                                     tol=cfg.tol, damping=cfg.damping)
        res["gp"] = gfit
        res["gp_converged"] = bool(gfit.converged)
    except Exception as exc:
        res["gp_error"] = f"{type(exc).__name__}: {exc}"
        res["gp_converged"] = False
    return res


def _robust_run(args):
    cfg, seed = args
    ds = datasets.gen_stp_clusters(cfg.n_clean, cfg.n_outliers, seed, outlier_distance=cfg.outlier_distance)
    clean = ds.clean
    g, pts = grid(cfg.grid_size, cfg.grid_extent)
    fits = {"clean": _fit_pair(cfg, clean.X, clean.y), "contaminated": _fit_pair(cfg, ds.X, ds.y)}
    out: dict[str, Any] = {"seed": seed, "grids": {}}
    angles = {}
    for cond, fp in fits.items():
        for model in ("stp", "gp"):
            out[f"{model}_{cond}_converged"] = fp[f"{model}_converged"]
            if model not in fp:
                out[f"{model}_{cond}_error"] = fp[f"{model}_error"]
                continue
            f = fp[model]
            vals = f.decision_function(pts)
            out["grids"][f"{model}_{cond}"] = vals
            angles[(model, cond)] = boundary_line_angle(zero_crossings(vals.reshape(len(g), len(g)), g))
            out[f"{model}_{cond}_accuracy"] = float(np.mean(f.predict(clean.X) == clean.y))
    for model in ("stp", "gp"):
        a, b = angles.get((model, "clean")), angles.get((model, "contaminated"))
        out[f"{model}_rotation"] = line_rotation(a, b) if a is not None and b is not None else float("nan")
        out[f"{model}_angle_clean"] = a
        out[f"{model}_angle_contaminated"] = b
    out["dataset"] = ds
    return out


def run_stp_robustness(cfg: ExperimentConfig) -> dict[str, Any]:
    seeds = [cfg.seed + i for i in range(cfg.n_seeds)]
    runs = _map(_robust_run, [(cfg, s) for s in seeds])
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    g, pts = grid(cfg.grid_size, cfg.grid_extent)
    for r in runs:
        r.pop("dataset").to_csv(out / f"stp_data_seed{r['seed']}.csv")
        _write_grid(out / f"stp_grid_seed{r['seed']}.csv", pts, r.pop("grids"))
    wins = [r["stp_rotation"] < r["gp_rotation"] for r in runs]
    conv = all(r.get(f"{m}_{c}_converged", False) for r in runs for m in ("stp", "gp")
               for c in ("clean", "contaminated"))
    return {
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "runs": runs,
        "stp_wins": int(sum(wins)),
        "majority": bool(sum(wins) > len(wins) / 2),
        "all_converged": conv,
    }


# limits-check


def limits_at(v: float, cfg: ExperimentConfig) -> dict[str, Any]:
    """Deviations of the t-EP fixed points from the Gaussian baselines at dof ``v``."""
    bd = datasets.gen_bpm_mixture(cfg.n_limit, cfg.seed)
    k = bd.X.shape[1]
    S0 = cfg.prior_scale * np.eye(k)
    state, post = bpm.ep_fit(StudentT(np.zeros(k), S0, v), bpm.make_data(bd.X, bd.y, cfg.epsilon),
                             max_sweeps=cfg.max_sweeps, tol=1e-10)
    lin = gp_baseline.linear_ep_fit(bd.X, bd.y, S0, cfg.epsilon, max_sweeps=cfg.max_sweeps, tol=1e-10)
    z_t = ep_core.marginal_likelihood(state)
    sd = datasets.gen_stp_clusters(cfg.n_limit, 0, cfg.seed)
    s = stp.fit(sd.X, sd.y, cfg.kernel, v, cfg.epsilon, max_sweeps=cfg.max_sweeps, tol=1e-10)
    gaussian = gp_baseline.gp_ep_fit(sd.X, sd.y, cfg.kernel, cfg.epsilon, max_sweeps=cfg.max_sweeps, tol=1e-10)
    return {
        "v": v,
        "bpm_mean_dev": float(np.abs(post.mu - lin.mu).max()),
        "bpm_evidence_rel_dev": float(abs(z_t / lin.Z_EP - 1.0)),
        "stp_mean_dev": float(np.abs(s.posterior.mu - gaussian.mu).max()),
        "stp_evidence_rel_dev": float(abs(s.Z_EP / gaussian.Z_EP - 1.0)),
        "converged": bool(state.status.converged and lin.converged and s.converged and gaussian.converged),
    }


def run_limits_check(cfg: ExperimentConfig) -> dict[str, Any]:
    rows = _map(_limits_run, [(v, cfg) for v in cfg.v_sweep])
    last = rows[-1]
    keys = ("bpm_mean_dev", "bpm_evidence_rel_dev", "stp_mean_dev", "stp_evidence_rel_dev")
    monotone = {key: all(a[key] > b[key] for a, b in zip(rows, rows[1:])) for key in keys}
    checks = {
        "bpm_mean": last["bpm_mean_dev"] < cfg.mean_tol,
        "stp_mean": last["stp_mean_dev"] < cfg.mean_tol,
        "bpm_evidence": last["bpm_evidence_rel_dev"] < cfg.evidence_tol,
        "stp_evidence": last["stp_evidence_rel_dev"] < cfg.evidence_tol,
        **{f"monotone_{k}": m for k, m in monotone.items()},
    }
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "limits.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["v", *keys])
        for r in rows:
            w.writerow([r["v"]] + [repr(r[k]) for k in keys])
    return {
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "rows": rows,
        "checks": {k: ("PASS" if ok else "FAIL") for k, ok in checks.items()},
        "all_converged": all(r["converged"] for r in rows),
    }


def _limits_run(args):
    v, cfg = args
    return limits_at(v, cfg)


RUNNERS = {
    "bpm-permutation": run_bpm_permutation,
    "stp-robustness": run_stp_robustness,
    "limits-check": run_limits_check,
}
