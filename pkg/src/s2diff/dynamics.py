"""Benchmark dynamical systems, integration, rollout, and set membership.

States are 1-D float64 arrays of length ``n``; controls of length ``m``.
All dynamics callables broadcast over leading batch dimensions, operating on
the last axis, so the same code serves single states and candidate batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    DimensionMismatchError,
    DomainError,
    IntegrationBlowupError,
    UnsupportedStructureError,
)

SAFE, NEITHER, UNSAFE = 1, 0, -1

_SYSTEMS_DIR = Path(__file__).parent / "systems"


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 0.1
    scheme: str = "euler"  # euler | rk4

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.scheme not in ("euler", "rk4"):
            raise ValueError(f"unknown integration scheme {self.scheme!r}")


@dataclass(frozen=True)
class SystemSpec:
    """Immutable description of one dynamical system.

    `dynamics_fn(x, u, t)` returns dx/dt and broadcasts over batches.
    `affine_fn(x, t)` returns (drift, input_matrix) for control-affine
    systems and is None otherwise.  `safe_fn`/`unsafe_fn` are vectorized
    boolean predicates; membership is evaluated on raw (unclamped) states.
    """

    name: str
    n: int
    m: int
    control_lo: np.ndarray
    control_hi: np.ndarray
    goal: np.ndarray
    u_eq: np.ndarray
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    init_lo: np.ndarray
    init_hi: np.ndarray
    physical_params: dict = field(repr=False)
    dynamics_fn: Callable = field(repr=False)
    affine_fn: Callable | None = field(repr=False)
    safe_fn: Callable = field(repr=False)
    unsafe_fn: Callable = field(repr=False)

    @property
    def is_affine(self) -> bool:
        return self.affine_fn is not None

    def clamp_controls(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.control_lo, self.control_hi)


def _check_state(sys: SystemSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != sys.n:
        raise DimensionMismatchError(
            f"{sys.name}: state has dim {x.shape[-1]}, expected {sys.n}")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{sys.name}: non-finite state entries")
    return x


def _check_control(sys: SystemSpec, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != sys.m:
        raise DimensionMismatchError(
            f"{sys.name}: control has dim {u.shape[-1]}, expected {sys.m}")
    if not np.all(np.isfinite(u)):
        raise DomainError(f"{sys.name}: non-finite control entries")
    return u


def eval_dynamics(sys: SystemSpec, x, u, t: float = 0.0) -> np.ndarray:
    """Evaluate dx/dt = f(x, u) at time t (t only matters for tracking tasks)."""
    x = _check_state(sys, x)
    u = _check_control(sys, u)
    return sys.dynamics_fn(x, u, t)


def eval_affine_parts(sys: SystemSpec, x, t: float = 0.0):
    """Return (drift, input_matrix) with f(x,u) = drift + input_matrix @ u."""
    if sys.affine_fn is None:
        raise UnsupportedStructureError(
            f"{sys.name} is not control-affine; no drift/input decomposition")
    x = _check_state(sys, x)
    return sys.affine_fn(x, t)


def step(sys: SystemSpec, x, u, cfg: IntegratorConfig, t: float = 0.0) -> np.ndarray:
    """Advance one time step with the control held constant over the step."""
    x = _check_state(sys, x)
    u = _check_control(sys, u)
    nxt = _step_raw(sys, x, u, cfg, t)
    if not np.all(np.isfinite(nxt)):
        raise IntegrationBlowupError(
            f"{sys.name}: non-finite state after one {cfg.scheme} step", state=nxt)
    return nxt


def _step_raw(sys: SystemSpec, x, u, cfg: IntegratorConfig, t: float) -> np.ndarray:
    f = sys.dynamics_fn
    dt = cfg.dt
    if cfg.scheme == "euler":
        return x + dt * f(x, u, t)
    k1 = f(x, u, t)
    k2 = f(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = f(x + dt * k3, u, t + dt)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rollout(sys: SystemSpec, x0, controls, cfg: IntegratorConfig, t0: float = 0.0):
    """Roll the system forward through a control sequence.

    Controls are clamped to the system bounds. Returns (states, clamped)
    where states[t] is the state after applying clamped[t], t = 0..T-1.
    """
    x0 = _check_state(sys, x0)
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or controls.shape[1] != sys.m:
        raise DimensionMismatchError(
            f"{sys.name}: control sequence must be (T, {sys.m}), got {controls.shape}")
    clamped = sys.clamp_controls(controls)
    T = clamped.shape[0]
    states = np.empty((T, sys.n))
    x = x0
    for k in range(T):
        x = _step_raw(sys, x, clamped[k], cfg, t0 + k * cfg.dt)
        if not np.all(np.isfinite(x)):
            raise IntegrationBlowupError(
                f"{sys.name}: rollout blew up at step {k}", state=x, step_index=k)
        states[k] = x
    return states, clamped


def rollout_batch(sys: SystemSpec, x0, controls, cfg: IntegratorConfig, t0: float = 0.0):
    """Vectorized rollout of many control sequences from a shared start state.

    controls: (B, T, m), already within bounds or to be clamped by caller.
    Returns (states (B, T, n), ok (B,)) where ok marks rows that stayed finite;
    blown-up rows are reported rather than raised so samplers can discard them.
    """
    controls = np.asarray(controls, dtype=float)
    B, T, _ = controls.shape
    states = np.empty((B, T, sys.n))
    x = np.broadcast_to(np.asarray(x0, dtype=float), (B, sys.n)).copy()
    ok = np.ones(B, dtype=bool)
    with np.errstate(all="ignore"):
        for k in range(T):
            x = _step_raw(sys, x, controls[:, k], cfg, t0 + k * cfg.dt)
            good = np.all(np.isfinite(x), axis=-1)
            ok &= good
            x[~good] = 0.0  # park dead rows so later steps stay finite
            states[:, k] = x
    return states, ok


def classify_state(sys: SystemSpec, x) -> str:
    """Classify a single state as 'safe', 'unsafe', or 'neither'."""
    code = classify_many(sys, _check_state(sys, x)[None, :])[0]
    return {SAFE: "safe", UNSAFE: "unsafe", NEITHER: "neither"}[int(code)]


def classify_many(sys: SystemSpec, x: np.ndarray) -> np.ndarray:
    """Vectorized classification; returns codes SAFE / NEITHER / UNSAFE."""
    x = np.asarray(x, dtype=float)
    codes = np.zeros(x.shape[:-1], dtype=int)
    codes[sys.safe_fn(x)] = SAFE
    codes[sys.unsafe_fn(x)] = UNSAFE  # unsafe wins; predicates are disjoint
    return codes


# ---------------------------------------------------------------------------
# Constants files
# ---------------------------------------------------------------------------

def parse_constants(path) -> dict:
    """Parse a `key = real(-list)` constants file into a dict."""
    params: dict = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        vals = [float(tok) for tok in value.replace(",", " ").split()]
        params[key.strip()] = vals[0] if len(vals) == 1 else np.array(vals)
    return params


def _vec(params, key, n) -> np.ndarray:
    v = np.atleast_1d(np.asarray(params[key], dtype=float))
    if v.size == 1 and n > 1:
        v = np.full(n, v[0])
    if v.size != n:
        raise ValueError(f"constant {key!r} must have {n} entries, got {v.size}")
    return v


def _affine_dynamics(affine_fn):
    def dyn(x, u, t):
        drift, G = affine_fn(x, t)
        return drift + np.einsum("...ij,...j->...i", G, u)
    return dyn


# ---------------------------------------------------------------------------
# System builders
# ---------------------------------------------------------------------------

def _build_pendulum(p):
    mass, length, grav = p["mass"], p["length"], p["gravity"]
    inertia = mass * length ** 2

    def affine(x, t):
        th = x[..., 0]
        drift = np.stack(
            [x[..., 1], -(mass * grav * length / inertia) * np.sin(th)], axis=-1)
        G = np.zeros(x.shape[:-1] + (2, 1))
        G[..., 1, 0] = 1.0 / inertia
        return drift, G

    def safe(x):
        return (np.abs(x[..., 0]) <= p["safe_angle"]) & (
            np.linalg.norm(x, axis=-1) <= p["safe_norm"])

    def unsafe(x):
        return (np.abs(x[..., 0]) >= p["unsafe_angle"]) | (
            np.linalg.norm(x, axis=-1) >= p["unsafe_norm"])

    return affine, safe, unsafe


def _build_nonaffine_pendulum(p):
    # Pendulum-like plant with a quadratic input term; deliberately not
    # expressible as drift + G(x) u, to exercise the non-affine code path.
    gain = p["input_quad_gain"]

    def dyn(x, u, t):
        v = u[..., 0]
        return np.stack(
            [x[..., 1], -np.sin(x[..., 0]) + v + gain * v * np.abs(v)], axis=-1)

    def safe(x):
        return (np.abs(x[..., 0]) <= p["safe_angle"]) & (
            np.linalg.norm(x, axis=-1) <= p["safe_norm"])

    def unsafe(x):
        return (np.abs(x[..., 0]) >= p["unsafe_angle"]) | (
            np.linalg.norm(x, axis=-1) >= p["unsafe_norm"])

    return dyn, safe, unsafe


def _car_reference(p, t):
    # Reference path signals: constant speed, sinusoidal turn rate.
    v_ref = p["v_ref"]
    omega_ref = p["omega_ref_amp"] * np.sin(p["omega_ref_freq"] * t)
    a_ref = p["a_ref"]
    return v_ref, omega_ref, a_ref


def _build_car_kin(p):
    wheelbase = p["l_f"] + p["l_r"]

    def affine(x, t):
        v_ref, omega_ref, a_ref = _car_reference(p, t)
        xe, ye, delta, ve, psie = (x[..., i] for i in range(5))
        v = ve + v_ref
        drift = np.stack([
            v * np.cos(psie) - v_ref + omega_ref * ye,
            v * np.sin(psie) - omega_ref * xe,
            np.zeros_like(xe),
            np.full_like(xe, -a_ref),
            v / wheelbase * np.tan(delta) - omega_ref,
        ], axis=-1)
        G = np.zeros(x.shape[:-1] + (5, 2))
        G[..., 2, 0] = 1.0
        G[..., 3, 1] = 1.0
        return drift, G

    always = lambda x: np.ones(x.shape[:-1], dtype=bool)
    never = lambda x: np.zeros(x.shape[:-1], dtype=bool)
    return affine, always, never  # pure tracking task: no avoid region


def _build_car_slip(p):
    wheelbase = p["l_f"] + p["l_r"]
    lf, lr = p["l_f"], p["l_r"]
    csf, csr = p["c_sf"], p["c_sr"]
    mu, mass, iz, grav = p["mu"], p["mass"], p["i_z"], p["gravity"]

    def affine(x, t):
        v_ref, omega_ref, _ = _car_reference(p, t)
        xe, ye, delta, ve, psie, psidote, beta = (x[..., i] for i in range(7))
        v = ve + v_ref
        yaw_acc = (
            -(mu * mass / (v * iz * wheelbase))
            * (lf ** 2 * csf * grav * lr + lr ** 2 * csr * grav * lf)
            * (psidote + omega_ref)
            + (mu * mass / (iz * wheelbase))
            * (lr * csr * grav * lf - lf * csf * grav * lr) * beta
            + (mu * mass / (iz * wheelbase)) * (lf * csf * grav * lr) * delta
        )
        slip_rate = (
            ((mu / (v ** 2 * wheelbase)) * (csr * grav * lf * lr - csf * grav * lr * lf) - 1.0)
            * (psidote + omega_ref)
            - (mu / (v * wheelbase)) * (csr * grav * lf + csf * grav * lr) * beta
            + (mu / (v * wheelbase)) * (csf * grav * lr) * delta
        )
        drift = np.stack([
            v * np.cos(psie) - v_ref + omega_ref * ye,
            v * np.sin(psie) - omega_ref * xe,
            np.zeros_like(xe),
            np.zeros_like(xe),
            psidote,
            yaw_acc,
            slip_rate,
        ], axis=-1)
        G = np.zeros(x.shape[:-1] + (7, 2))
        G[..., 2, 0] = 1.0
        G[..., 3, 1] = 1.0
        return drift, G

    always = lambda x: np.ones(x.shape[:-1], dtype=bool)
    never = lambda x: np.zeros(x.shape[:-1], dtype=bool)
    return affine, always, never


def _build_segway(p):
    base_m, body_m, body_j, length = p["base_mass"], p["body_mass"], p["body_inertia"], p["length"]
    grav = p["gravity"]
    lam = [p[f"lambda_{i}"] for i in range(1, 10)]
    m_t = base_m + body_m
    j_t = body_j + body_m * length ** 2
    ratio = m_t * j_t / (body_m ** 2 * length ** 2)

    def affine(x, t):
        theta, v, omega = x[..., 1], x[..., 2], x[..., 3]
        cth, sth = np.cos(theta), np.sin(theta)
        den_v = cth - ratio + lam[8]
        den_w = cth ** 2 - ratio + lam[8]
        drift = np.stack([
            v,
            omega,
            (grav * sth * cth + lam[0] * v * cth + lam[1] * v - length * omega ** 2 * sth) / den_v,
            (lam[2] * v * cth + lam[3] * v - (m_t * grav / (body_m * length)) * sth
             - omega ** 2 * sth * cth) / den_w,
        ], axis=-1)
        G = np.zeros(x.shape[:-1] + (4, 1))
        G[..., 2, 0] = (lam[5] / m_t) * (lam[4] + cth) / den_w
        G[..., 3, 0] = (lam[7] * length / j_t) * (cth + lam[6]) / den_w
        return drift, G

    def top_distance(x):
        px = x[..., 0] + np.sin(x[..., 1])
        py = np.cos(x[..., 1])
        return np.sqrt(px ** 2 + (py - 1.0) ** 2)

    def safe(x):
        return top_distance(x) >= p["safe_distance"]

    def unsafe(x):
        return top_distance(x) <= p["obstacle_radius"]

    return affine, safe, unsafe


def _build_lander(p):
    mass, grav = p["mass"], p["gravity"]
    ge_gain, ge_h0 = p["ground_effect_gain"], p["ground_effect_h0"]

    def affine(x, t):
        pz = x[..., 2]
        fa3 = -ge_gain / (pz + ge_h0) if ge_gain else np.zeros_like(pz)
        drift = np.stack([
            x[..., 3], x[..., 4], x[..., 5],
            np.zeros_like(pz), np.zeros_like(pz),
            fa3 / mass - grav,
        ], axis=-1)
        G = np.zeros(x.shape[:-1] + (6, 3))
        for i in range(3):
            G[..., 3 + i, i] = 1.0 / mass
        return drift, G

    def safe(x):
        return (x[..., 2] >= p["safe_floor"]) & (
            np.linalg.norm(x, axis=-1) <= p["safe_norm"])

    def unsafe(x):
        return (x[..., 2] <= p["unsafe_floor"]) | (
            np.linalg.norm(x, axis=-1) >= p["unsafe_norm"])

    return affine, safe, unsafe


def _obstacle_clearance(p, px, pz):
    """Signed distance to the nearest obstacle boundary (negative inside)."""
    circles = np.atleast_1d(np.asarray(p["obstacle_circles"], dtype=float)).reshape(-1, 3)
    dist = np.full(np.shape(px), np.inf)
    for cx, cz, r in circles:
        dist = np.minimum(dist, np.sqrt((px - cx) ** 2 + (pz - cz) ** 2) - r)
    return dist


def _build_quad2d(p):
    mass, inertia, arm, grav = p["mass"], p["inertia"], p["arm"], p["gravity"]

    def affine(x, t):
        th = x[..., 2]
        zero = np.zeros_like(th)
        drift = np.stack([x[..., 3], x[..., 4], x[..., 5],
                          zero, np.full_like(th, -grav), zero], axis=-1)
        G = np.zeros(x.shape[:-1] + (6, 2))
        G[..., 3, 0] = np.sin(th) / mass
        G[..., 3, 1] = np.sin(th) / mass
        G[..., 4, 0] = np.cos(th) / mass
        G[..., 4, 1] = np.cos(th) / mass
        G[..., 5, 0] = arm / inertia
        G[..., 5, 1] = -arm / inertia
        return drift, G

    def safe(x):
        return _obstacle_clearance(p, x[..., 0], x[..., 1]) >= p["safe_offset"]

    def unsafe(x):
        return _obstacle_clearance(p, x[..., 0], x[..., 1]) <= 0.0

    return affine, safe, unsafe


def _build_quad3d(p):
    mass, grav = p["mass"], p["gravity"]

    def affine(x, t):
        phi, th = x[..., 6], x[..., 7]
        zero = np.zeros_like(phi)
        drift = np.stack([x[..., 3], x[..., 4], x[..., 5],
                          zero, zero, np.full_like(phi, -grav),
                          zero, zero, zero], axis=-1)
        G = np.zeros(x.shape[:-1] + (9, 4))
        G[..., 3, 0] = -np.sin(th) / mass
        G[..., 4, 0] = np.cos(th) * np.sin(phi) / mass
        G[..., 5, 0] = np.cos(th) * np.cos(phi) / mass
        G[..., 6, 1] = 1.0
        G[..., 7, 2] = 1.0
        G[..., 8, 3] = 1.0
        return drift, G

    def safe(x):
        return (x[..., 2] >= p["safe_floor"]) & (
            np.linalg.norm(x, axis=-1) <= p["safe_norm"])

    def unsafe(x):
        return (x[..., 2] <= p["unsafe_floor"]) | (
            np.linalg.norm(x, axis=-1) >= p["unsafe_norm"])

    return affine, safe, unsafe


_BUILDERS = {
    "pendulum": (_build_pendulum, True),
    "nonaffine_pendulum": (_build_nonaffine_pendulum, False),
    "car_kin": (_build_car_kin, True),
    "car_slip": (_build_car_slip, True),
    "segway": (_build_segway, True),
    "lander": (_build_lander, True),
    "quad2d": (_build_quad2d, True),
    "quad3d": (_build_quad3d, True),
}


def list_systems() -> list[str]:
    return sorted(_BUILDERS)


def load_system(name: str, overrides: dict | None = None,
                constants_path=None) -> SystemSpec:
    """Construct a SystemSpec from its constants file (plus overrides)."""
    if name not in _BUILDERS:
        raise KeyError(f"unknown system {name!r}; available: {list_systems()}")
    path = Path(constants_path) if constants_path else _SYSTEMS_DIR / f"{name}.txt"
    params = parse_constants(path)
    if overrides:
        params.update(overrides)

    builder, affine = _BUILDERS[name]
    core, safe_fn, unsafe_fn = builder(params)
    if affine:
        affine_fn, dynamics_fn = core, _affine_dynamics(core)
    else:
        affine_fn, dynamics_fn = None, core

    n = int(params["n"])
    m = int(params["m"])
    limit = _vec(params, "control_limit", m)
    spec = SystemSpec(
        name=name, n=n, m=m,
        control_lo=-limit, control_hi=limit,
        goal=_vec(params, "goal", n),
        u_eq=_vec(params, "u_eq", m),
        domain_lo=_vec(params, "domain_lo", n),
        domain_hi=_vec(params, "domain_hi", n),
        init_lo=_vec(params, "init_lo", n),
        init_hi=_vec(params, "init_hi", n),
        physical_params=params,
        dynamics_fn=dynamics_fn,
        affine_fn=affine_fn,
        safe_fn=safe_fn,
        unsafe_fn=unsafe_fn,
    )
    _validate_spec(spec)
    return spec


def _validate_spec(sys: SystemSpec):
    if not np.all(sys.control_lo < sys.control_hi):
        raise ValueError(f"{sys.name}: control_lo must be below control_hi")
    if not bool(sys.safe_fn(sys.goal[None, :])[0]):
        raise ValueError(f"{sys.name}: goal state must satisfy the safe predicate")
    # Safe/unsafe predicates must be disjoint on a sampled grid of the domain.
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(1234)))
    grid = rng.uniform(sys.domain_lo, sys.domain_hi, size=(512, sys.n))
    both = sys.safe_fn(grid) & sys.unsafe_fn(grid)
    if np.any(both):
        raise ValueError(f"{sys.name}: safe and unsafe predicates overlap")
