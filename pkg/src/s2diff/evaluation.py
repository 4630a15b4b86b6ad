"""Evaluation metrics: receding-horizon rollouts, dissipation-violation
volume estimation, descent monotonicity, and value-contour export.
"""

from __future__ import annotations

import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng as rnglib
from .certificate import forward_many, grad_many
from .diffusion import TrajectorySample, sample_trajectory
from .dynamics import UNSAFE, SystemSpec, classify_many
from .errors import ContractError

MONOTONICITY_TOL = 1e-9


@dataclass
class MetricsReport:
    safety_rate: float
    terminal_error_mean: float
    terminal_error_std: float
    violation_rate: float
    monotonicity_fraction: float
    eval_time_ms_mean: float
    eval_time_ms_std: float

    def to_json(self) -> str:
        # Fixed key order and plain floats keep re-runs byte-identical
        # except for the wall-time (*_ms) fields.
        payload = {
            "safety_rate": self.safety_rate,
            "terminal_error_mean": self.terminal_error_mean,
            "terminal_error_std": self.terminal_error_std,
            "violation_rate": self.violation_rate,
            "monotonicity_fraction": self.monotonicity_fraction,
            "wall_ms": {"eval_time_ms_mean": self.eval_time_ms_mean,
                        "eval_time_ms_std": self.eval_time_ms_std},
        }
        return json.dumps(payload, indent=2) + "\n"


@dataclass
class EvalConfig:
    num_rollouts: int = 20
    episode_steps: int = 50          # total executed steps per episode
    violation_states: int = 2000     # 0 disables the violation estimate
    controls_per_state: int = 64
    init_lo: np.ndarray | None = None  # defaults to the system's init box
    init_hi: np.ndarray | None = None

    def init_region(self, sys: SystemSpec):
        lo = sys.init_lo if self.init_lo is None else np.asarray(self.init_lo, dtype=float)
        hi = sys.init_hi if self.init_hi is None else np.asarray(self.init_hi, dtype=float)
        return lo, hi


def run_episode(sys, cert, ccfg, gcfg, scfg, x0, episode_steps, cost_fn=None,
                stream: int = 0, planner=None):
    """Receding-horizon execution: plan a horizon, execute it fully, replan.

    Returns a TrajectorySample spanning the whole episode. `planner`
    overrides the guided sampler (same call signature) when given.
    """
    plan = planner or (lambda x, t, substream: sample_trajectory(
        sys, cert, ccfg, gcfg, scfg, x, cost_fn, stream=substream, t0=t)[0])
    x = np.asarray(x0, dtype=float)
    t = 0.0
    all_states, all_controls = [], []
    executed = 0
    replan = 0
    while executed < episode_steps:
        sample = plan(x, t, stream * 1009 + replan)
        take = min(sample.horizon, episode_steps - executed)
        # rollouts are sequential, so the first `take` states are exactly
        # the execution of the first `take` controls
        states, controls = sample.states[:take], sample.controls[:take]
        all_states.append(states)
        all_controls.append(controls)
        x = states[-1]
        t += take * scfg.integrator.dt
        executed += take
        replan += 1
    return TrajectorySample(controls=np.vstack(all_controls),
                            x0=np.asarray(x0, dtype=float),
                            states=np.vstack(all_states))


def evaluate_policy(sys, cert, ccfg, gcfg, scfg, ecfg: EvalConfig,
                    seed: int = 0, cost_fn=None, workers: int = 1,
                    planner=None):
    """Run receding-horizon evaluation episodes and aggregate metrics.

    Returns (MetricsReport, episodes). Safety counts episodes that never
    enter the unsafe set; terminal error is the distance of the final state
    from the goal.
    """
    if ecfg.num_rollouts < 1:
        raise ContractError("need at least one evaluation rollout")
    lo, hi = ecfg.init_region(sys)
    gen = rnglib.substream(seed, rnglib.EVAL_ROLLOUT)
    x0s = gen.uniform(lo, hi, size=(ecfg.num_rollouts, sys.n))

    def one(r):
        start = time.perf_counter()
        episode = run_episode(sys, cert, ccfg, gcfg, scfg, x0s[r],
                              ecfg.episode_steps, cost_fn, stream=seed * 7919 + r,
                              planner=planner)
        return episode, (time.perf_counter() - start) * 1e3

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(ecfg.num_rollouts)))
    else:
        results = [one(r) for r in range(ecfg.num_rollouts)]

    episodes = [ep for ep, _ in results]
    walls = np.array([w for _, w in results])
    safe_flags, terminal, mono = [], [], []
    for ep in episodes:
        visited = np.vstack([ep.x0[None, :], ep.states])
        safe_flags.append(not np.any(classify_many(sys, visited) == UNSAFE))
        terminal.append(float(np.linalg.norm(ep.states[-1] - sys.goal)))
        mono.append(monotonicity_fraction(cert, ep))

    rate = 0.0
    if ecfg.violation_states > 0:
        rate, _ = violation_rate_estimate(
            sys, cert, ccfg, ecfg.violation_states, ecfg.controls_per_state,
            rng_seed=(seed, rnglib.VIOLATION))
    terminal = np.asarray(terminal)
    report = MetricsReport(
        safety_rate=float(np.mean(safe_flags)),
        terminal_error_mean=float(terminal.mean()),
        terminal_error_std=float(terminal.std()),
        violation_rate=rate,
        monotonicity_fraction=float(np.mean(mono)),
        eval_time_ms_mean=float(walls.mean()),
        eval_time_ms_std=float(walls.std()),
    )
    return report, episodes


def _candidate_controls(sys, num_controls, gen):
    """Uniform control samples plus the bound-box corners."""
    uniform = gen.uniform(sys.control_lo, sys.control_hi,
                          size=(num_controls, sys.m))
    if sys.m <= 6:
        corners = np.array(list(itertools.product(
            *zip(sys.control_lo, sys.control_hi))))
    else:
        corners = np.vstack([np.diag(sys.control_hi), np.diag(sys.control_lo)])
    return np.vstack([uniform, corners])


def violation_rate_estimate(sys, cert, ccfg, num_states: int,
                            num_controls_per_state: int = 64, rng_seed=(0,)):
    """Estimate the fraction of the state box where no sampled control makes
    the dissipation inequality hold.

    A state violates iff min over candidate controls of grad(V).f + lam*V is
    strictly positive. Returns (rate, 95% binomial half-width).
    """
    if num_states < 1:
        raise ContractError("need at least one state sample")
    gen = rnglib.substream(*rng_seed)
    X = gen.uniform(sys.domain_lo, sys.domain_hi, size=(num_states, sys.n))
    V = forward_many(cert, X)
    G = grad_many(cert, X)

    best = np.full(num_states, np.inf)
    controls = _candidate_controls(sys, num_controls_per_state, gen)
    for u in controls:
        F = sys.dynamics_fn(X, np.broadcast_to(u, (num_states, sys.m)), 0.0)
        lie = np.einsum("bi,bi->b", G, F)
        best = np.minimum(best, lie)
    violating = best + ccfg.lam * V > 0.0
    rate = float(np.mean(violating))
    half_width = 1.96 * np.sqrt(max(rate * (1.0 - rate), 0.0) / num_states)
    return rate, float(half_width)


def monotonicity_fraction(cert, trajectory: TrajectorySample) -> float:
    """Fraction of consecutive steps along which the certificate increases."""
    if trajectory.horizon < 2 and trajectory.states.shape[0] < 2:
        raise ContractError("monotonicity needs at least two states")
    seq = np.vstack([trajectory.x0[None, :], trajectory.states])
    vals = forward_many(cert, seq)
    return float(np.mean(vals[1:] > vals[:-1] + MONOTONICITY_TOL))


@dataclass
class ContourSlice:
    axes: tuple
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray      # shape (len(xs), len(ys))
    base_state: np.ndarray  # off-slice coordinates held at these values

    def write_csv(self, path) -> None:
        lines = ["x,y,V"]
        for i, xv in enumerate(self.xs):
            for j, yv in enumerate(self.ys):
                lines.append("%.17g,%.17g,%.17g" % (xv, yv, self.values[i, j]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def contour_slice(cert, sys: SystemSpec, axes, resolution=41, bounds=None,
                  fixed_values=None) -> ContourSlice:
    """Evaluate the certificate on a 2-D grid slice of the state space.

    `axes` picks the two state coordinates to sweep; all other coordinates
    are pinned to `fixed_values` (default: the goal state). Default bounds
    come from the system's domain box.
    """
    ax, ay = axes
    if ax == ay or not (0 <= ax < sys.n and 0 <= ay < sys.n):
        raise ContractError(f"invalid slice axes {axes} for state dim {sys.n}")
    if resolution < 2:
        raise ContractError("grid resolution must be at least 2 per axis")
    base = np.array(sys.goal if fixed_values is None else fixed_values, dtype=float)
    if bounds is None:
        bounds = (sys.domain_lo[ax], sys.domain_hi[ax],
                  sys.domain_lo[ay], sys.domain_hi[ay])
    xs = np.linspace(bounds[0], bounds[1], resolution)
    ys = np.linspace(bounds[2], bounds[3], resolution)
    grid = np.tile(base, (resolution * resolution, 1))
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    grid[:, ax] = xx.ravel()
    grid[:, ay] = yy.ravel()
    values = forward_many(cert, grid).reshape(resolution, resolution)
    return ContourSlice(axes=(ax, ay), xs=xs, ys=ys, values=values,
                        base_state=base)
