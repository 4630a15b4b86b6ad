"""Certificate-guided Gibbs density over control trajectories and the
model-based reverse diffusion sampler with Monte-Carlo score estimation.

The diffusion variable is the control sequence (T, m); states are always
re-derived from (x0, controls) by rollout before any density evaluation.
The reverse chain is fully algorithmic: at every step the score of the
corrupted density is estimated from the posterior mean of clean candidates
weighted by the target density.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rnglib
from .certificate import forward_many, grad_many
from .dynamics import IntegratorConfig, SystemSpec, rollout, rollout_batch
from .errors import ContractError, EvaluationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step scale factors; alpha_bar[i] is the cumulative product."""

    alpha_bar: np.ndarray  # shape (N+1,), alpha_bar[0] == 1

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("schedule needs at least one step")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0:
            raise ValueError("alpha_bar[N] must be positive")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def num_steps(self) -> int:
        return self.alpha_bar.size - 1

    @property
    def alphas(self) -> np.ndarray:
        """alphas[i] = alpha_bar[i] / alpha_bar[i-1] for steps 1..N."""
        return self.alpha_bar[1:] / self.alpha_bar[:-1]


def sigmoid_schedule(num_steps: int = 50, alpha_bar_final: float = 5e-3,
                     sharpness: float = 10.0) -> NoiseSchedule:
    """Logistic decay of alpha_bar from exactly 1 down to alpha_bar_final."""
    i = np.arange(num_steps + 1, dtype=float)
    raw = 1.0 / (1.0 + np.exp(sharpness * (i / num_steps - 0.5)))
    ab = alpha_bar_final + (1.0 - alpha_bar_final) * (raw - raw[-1]) / (raw[0] - raw[-1])
    ab[0] = 1.0
    return NoiseSchedule(ab)


@dataclass
class TrajectorySample:
    """Control sequence plus the state rollout it induces from x0 at t0."""

    controls: np.ndarray            # (T, m)
    x0: np.ndarray                  # (n,)
    states: np.ndarray | None = None  # (T, n); None until derived
    t0: float = 0.0

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]


def derive_states(sys: SystemSpec, sample: TrajectorySample,
                  icfg: IntegratorConfig) -> TrajectorySample:
    """Clamp controls, roll them out, and return a fresh sample."""
    states, clamped = rollout(sys, sample.x0, sample.controls, icfg, sample.t0)
    return replace(sample, controls=clamped, states=states)


@dataclass
class GuidanceConfig:
    gamma: float = 0.1              # temperature of the running-cost factor
    gamma1: float = 1.0             # temperature of the nominal-tracking factor
    gamma2: float = 0.1             # temperature of the dissipation energy
    safety_mode: str = "soft"       # soft | indicator
    safety_temp: float | None = None  # defaults to gamma2
    nominal: np.ndarray | None = None  # (T, m); replaces the running cost
    use_clbf_guidance: bool = True  # off = cost-only baseline sampler

    def __post_init__(self):
        if min(self.gamma, self.gamma1, self.gamma2) <= 0:
            raise ValueError("temperatures must be positive")
        if self.safety_temp is not None and self.safety_temp <= 0:
            raise ValueError("safety_temp must be positive")
        if self.safety_mode not in ("soft", "indicator"):
            raise ValueError(f"unknown safety_mode {self.safety_mode!r}")

    @property
    def effective_safety_temp(self) -> float:
        return self.gamma2 if self.safety_temp is None else self.safety_temp


@dataclass
class SamplerConfig:
    num_candidates: int = 256
    seed: int = 0
    schedule: NoiseSchedule = field(default_factory=sigmoid_schedule)
    horizon: int = 5
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)

    def __post_init__(self):
        if self.num_candidates < 1:
            raise ContractError("need at least one Monte-Carlo candidate")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")


def default_cost(sys: SystemSpec):
    """Quadratic tracking cost: |x - goal|^2 + 0.01 |u|^2 per step."""
    goal = sys.goal

    def cost(states, controls):
        err = states - goal
        return np.sum(err * err, axis=-1) + 0.01 * np.sum(controls * controls, axis=-1)

    return cost


def _state_times(T: int, dt: float, t0: float) -> np.ndarray:
    """Time stamps of the rolled-out states x_1..x_T."""
    return t0 + dt * np.arange(1, T + 1)


def _batched_log_density(sys, cert, ccfg, gcfg, states, controls, ok, cost_fn,
                         dt: float, t0: float):
    """Log target density for a batch of trajectories; -inf where infeasible.

    states: (B, T, n), controls: (B, T, m), ok: (B,) finite-rollout mask.
    Returns (B,) log densities up to a shared additive constant.
    """
    B, T, n = states.shape
    cost_fn = cost_fn or default_cost(sys)
    with np.errstate(all="ignore"):
        if gcfg.nominal is not None:
            diff = controls - gcfg.nominal
            energy = np.sum(diff * diff, axis=(1, 2)) / gcfg.gamma1
        else:
            energy = np.sum(cost_fn(states, controls), axis=-1) / gcfg.gamma

        if gcfg.use_clbf_guidance:
            flat = states.reshape(B * T, n)
            V = forward_many(cert, flat)
            G = grad_many(cert, flat)
            times = np.tile(_state_times(T, dt, t0), B)
            F = sys.dynamics_fn(flat, controls.reshape(B * T, -1), times)
            lie = np.einsum("bi,bi->b", G, F)
            hinge = np.maximum(lie + ccfg.lam * V, 0.0).reshape(B, T)
            energy = energy + np.sum(hinge * hinge, axis=-1) / gcfg.gamma2

            Vmat = V.reshape(B, T)
            if gcfg.safety_mode == "indicator":
                violates = np.any(Vmat > ccfg.c, axis=-1)
            else:
                over = np.maximum(Vmat - ccfg.c, 0.0)
                energy = energy + np.sum(over * over, axis=-1) / gcfg.effective_safety_temp
                violates = np.zeros(B, dtype=bool)
        else:
            violates = np.zeros(B, dtype=bool)

    logp = -energy
    logp[~ok | violates] = -np.inf
    logp[np.isnan(logp)] = -np.inf
    return logp


def log_target_density(sys, cert, ccfg, gcfg, sample: TrajectorySample,
                       cost_fn=None, dt: float = 0.1) -> float:
    """Log of the unnormalized trajectory density (may be -inf).

    Requires `sample.states` freshly derived from its controls. Raises
    EvaluationError on non-finite inputs, which is distinct from the
    legitimate -inf of an indicator-infeasible trajectory.
    """
    if sample.states is None:
        raise ContractError("derive states from controls before evaluating")
    states = np.asarray(sample.states, dtype=float)[None]
    controls = np.asarray(sample.controls, dtype=float)[None]
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(controls))):
        raise EvaluationError("trajectory contains non-finite values")
    flat_v = forward_many(cert, states[0])
    if not np.all(np.isfinite(flat_v)):
        raise EvaluationError("certificate returned non-finite values")
    ok = np.ones(1, dtype=bool)
    logp = _batched_log_density(sys, cert, ccfg, gcfg, states, controls, ok,
                                cost_fn, dt, sample.t0)
    return float(logp[0])


def forward_corrupt(sample: TrajectorySample, i: int, schedule: NoiseSchedule,
                    gen) -> TrajectorySample:
    """Corrupt clean controls to diffusion level i (controls only)."""
    if not 0 <= i <= schedule.num_steps:
        raise ContractError(f"diffusion level {i} outside [0, {schedule.num_steps}]")
    ab = schedule.alpha_bar[i]
    noise = gen.standard_normal(sample.controls.shape)
    corrupted = np.sqrt(ab) * sample.controls + np.sqrt(1.0 - ab) * noise
    return replace(sample, controls=corrupted, states=None)


def estimate_posterior_mean(sys, cert, ccfg, gcfg, scfg: SamplerConfig,
                            U_i: np.ndarray, i: int, x0, gen, cost_fn=None,
                            t0: float = 0.0):
    """Monte-Carlo estimate of E[clean controls | corrupted controls at level i].

    Draws Q candidates from the inverted forward kernel, clamps them to the
    control bounds, weights by the target density via log-sum-exp, and
    returns (mean, diagnostics). If every candidate is infeasible the
    unweighted candidate mean is returned and the step is flagged.
    """
    Q = scfg.num_candidates
    if Q < 1:
        raise ContractError("need at least one candidate")
    ab = scfg.schedule.alpha_bar[i]
    center = U_i / np.sqrt(ab)
    std = np.sqrt((1.0 - ab) / ab)
    cands = center + std * gen.standard_normal((Q,) + U_i.shape)
    cands = sys.clamp_controls(cands)

    states, ok = rollout_batch(sys, x0, cands, scfg.integrator, t0)
    logw = _batched_log_density(sys, cert, ccfg, gcfg, states, cands, ok,
                                cost_fn, scfg.integrator.dt, t0)

    finite = np.isfinite(logw)
    if not np.any(finite):
        mean = cands.mean(axis=0)
        diag = {"ess": 0.0, "fallback": True, "weights": np.zeros(Q)}
        return mean, diag
    w = np.exp(logw - logw[finite].max())
    w = w / w.sum()
    mean = np.tensordot(w, cands, axes=(0, 0))
    diag = {"ess": float(1.0 / np.sum(w * w)), "fallback": False, "weights": w}
    return mean, diag


def reverse_step(U_i: np.ndarray, i: int, posterior_mean: np.ndarray,
                 schedule: NoiseSchedule) -> np.ndarray:
    """One reverse update using the posterior-mean score estimate."""
    if not 1 <= i <= schedule.num_steps:
        raise ContractError(f"reverse step index {i} outside [1, {schedule.num_steps}]")
    ab = schedule.alpha_bar[i]
    alpha = schedule.alpha_bar[i] / schedule.alpha_bar[i - 1]
    score = -(U_i - np.sqrt(ab) * posterior_mean) / (1.0 - ab)
    return (U_i + (1.0 - alpha) * score) / np.sqrt(alpha)


def sample_trajectory(sys, cert, ccfg, gcfg, scfg: SamplerConfig, x0,
                      cost_fn=None, stream: int = 0, t0: float = 0.0):
    """Run the full reverse chain from noise and return (sample, diagnostics).

    `stream` distinguishes trajectories drawn under the same master seed
    (e.g. rollout or batch index). Each reverse step uses its own
    counter-based substream keyed by (master seed, stream, step), so results
    are identical under any execution order or worker count.
    """
    N = scfg.schedule.num_steps
    T, m = scfg.horizon, sys.m
    start = time.perf_counter()
    gen0 = rnglib.substream(scfg.seed, rnglib.SAMPLE_INIT, stream)
    U = gen0.standard_normal((T, m))
    ess = np.zeros(N)
    fallback = np.zeros(N, dtype=bool)
    for i in range(N, 0, -1):
        gen = rnglib.substream(scfg.seed, rnglib.SAMPLE_STEP, stream, i)
        mean, diag = estimate_posterior_mean(
            sys, cert, ccfg, gcfg, scfg, U, i, x0, gen, cost_fn, t0)
        ess[i - 1] = diag["ess"]
        fallback[i - 1] = diag["fallback"]
        U = reverse_step(U, i, mean, scfg.schedule)
    sample = derive_states(
        sys, TrajectorySample(controls=sys.clamp_controls(U), x0=np.asarray(x0, dtype=float),
                              t0=t0), scfg.integrator)
    diagnostics = {"ess": ess, "fallback": fallback,
                   "wall_ms": (time.perf_counter() - start) * 1e3}
    return sample, diagnostics


# ---------------------------------------------------------------------------
# Trajectory CSV export
# ---------------------------------------------------------------------------

CSV_FLOAT = "%.17g"


def trajectory_csv_header(n: int, m: int) -> str:
    cols = (["t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)]
            + ["V", "lie", "violation_hinge"])
    return ",".join(cols)


def trajectory_csv_rows(sys, cert, ccfg, sample: TrajectorySample,
                        dt: float = 0.1) -> list[str]:
    states, controls = sample.states, sample.controls
    V = forward_many(cert, states)
    G = grad_many(cert, states)
    times = _state_times(states.shape[0], dt, sample.t0)
    F = sys.dynamics_fn(states, controls, times)
    lie = np.einsum("bi,bi->b", G, F)
    hinge = np.maximum(lie + ccfg.lam * V, 0.0)
    rows = []
    for t in range(states.shape[0]):
        vals = ([float(t + 1)] + list(states[t]) + list(controls[t])
                + [V[t], lie[t], hinge[t]])
        rows.append(",".join(CSV_FLOAT % v for v in vals))
    return rows


def write_trajectories_csv(path, sys, cert, ccfg, samples, dt: float = 0.1) -> None:
    lines = [trajectory_csv_header(sys.n, sys.m)]
    for sample in samples:
        lines.extend(trajectory_csv_rows(sys, cert, ccfg, sample, dt))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
