"""Neural certificate: ReLU MLP scalar potential, exact gradients, and the
training loss built from goal, positivity, level-set, and dissipation terms.

The network is V(x) = W_L z_{L-1} + b_L with z_i = relu(W_i z_{i-1} + b_i).
All derivatives are computed by hand with numpy: reverse accumulation for
dV/dx and dV/dtheta, and a forward tangent pass for the directional
derivative grad(V).f whose parameter gradient shares the same backward
multipliers (ReLU masks are piecewise constant, so treating them as fixed
gives the exact gradient away from kinks; at a kink the inactive branch is
used, i.e. subgradient zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rnglib
from .dynamics import SystemSpec, eval_dynamics
from .errors import ContractError, DimensionMismatchError

LABELS = ("goal", "safe", "unsafe", "interior")


@dataclass
class CertificateConfig:
    c: float = 1.0          # safety level separating sub/super level sets
    lam: float = 1.0        # dissipation rate
    eps: float = 0.01       # violation buffer inside the hinge terms
    alpha1: float = 1.0     # weight of the continuous dissipation hinge
    alpha2: float = 1.0     # weight of the discrete-difference hinge

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("safety level c must be positive")
        if not self.lam > 0:
            raise ValueError("dissipation rate must be positive")
        if self.eps < 0 or self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("eps, alpha1, alpha2 must be non-negative")


@dataclass
class LabeledState:
    x: np.ndarray
    label: str
    successor: np.ndarray | None = None
    control: np.ndarray | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")


@dataclass
class MlpCertificate:
    """ReLU network with scalar output; weights[i] has shape (out, in)."""

    layer_sizes: tuple
    weights: list = field(repr=False)
    biases: list = field(repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if sizes[-1] != 1:
            raise ValueError("certificate output dimension must be 1")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} parameter shapes do not compose")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
        self.layer_sizes = sizes

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpCertificate":
        return MlpCertificate(self.layer_sizes,
                              [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases])

    def value(self, x) -> float:
        return float(forward_many(self, np.asarray(x, dtype=float)[None, :])[0])

    def grad(self, x) -> np.ndarray:
        return grad_many(self, np.asarray(x, dtype=float)[None, :])[0]


def init_certificate(layer_sizes, seed: int = 0) -> MlpCertificate:
    """Kaiming-style uniform init scaled by fan-in; biases start at zero."""
    gen = rnglib.substream(seed, rnglib.CERT_INIT)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(gen.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpCertificate(tuple(layer_sizes), weights, biases)


def zero_certificate(n: int, layer_sizes=None) -> MlpCertificate:
    sizes = tuple(layer_sizes) if layer_sizes else (n, 1)
    weights = [np.zeros((sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)]
    biases = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
    return MlpCertificate(sizes, weights, biases)


# ---------------------------------------------------------------------------
# Forward / backward passes (batched over rows of X)
# ---------------------------------------------------------------------------

def _check_batch(cert, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != cert.input_dim:
        raise DimensionMismatchError(
            f"expected (B, {cert.input_dim}) inputs, got {X.shape}")
    return X


def _forward_cached(cert, X):
    """Return (values (B,), activations [Z_0..Z_{L-1}], masks [M_1..M_{L-1}])."""
    zs, masks = [X], []
    z = X
    last = cert.num_layers - 1
    for i, (w, b) in enumerate(zip(cert.weights, cert.biases)):
        a = z @ w.T + b
        if i < last:
            mask = a > 0.0
            z = a * mask
            masks.append(mask)
            zs.append(z)
        else:
            vals = a[:, 0]
    return vals, zs, masks


def forward_many(cert, X) -> np.ndarray:
    return _forward_cached(cert, _check_batch(cert, X))[0]


def grad_many(cert, X) -> np.ndarray:
    """Exact dV/dx for each row of X (inactive branch at ReLU kinks)."""
    X = _check_batch(cert, X)
    _, _, masks = _forward_cached(cert, X)
    d = np.ones((X.shape[0], 1))
    for i in range(cert.num_layers - 1, 0, -1):
        d = (d @ cert.weights[i]) * masks[i - 1]
    return d @ cert.weights[0]


def value(cert: MlpCertificate, x) -> float:
    """Scalar potential V(x)."""
    return cert.value(x)


def grad_value(cert: MlpCertificate, x) -> np.ndarray:
    """Exact gradient of V at x."""
    return cert.grad(x)


def lie_derivative(cert, sys: SystemSpec, x, u, t: float = 0.0) -> float:
    """Rate of change of V along the dynamics: grad(V).f(x, u)."""
    return float(np.dot(cert.grad(x), eval_dynamics(sys, x, u, t)))


def lie_derivative_many(cert, F: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Batched grad(V).F given precomputed dynamics values F (B, n)."""
    return np.einsum("bi,bi->b", grad_many(cert, X), F)


def _tangent_forward(cert, X, F, masks):
    """Forward tangent pass: returns (lie (B,), tangents [T_0..T_{L-1}])."""
    ts = [F]
    t = F
    last = cert.num_layers - 1
    for i, w in enumerate(cert.weights):
        ta = t @ w.T
        if i < last:
            t = ta * masks[i]
            ts.append(t)
        else:
            lie = ta[:, 0]
    return lie, ts


def _backprop(cert, seeds, zs, masks, grads_w, grads_b, with_bias=True):
    """Accumulate seeds^T-weighted parameter gradients into grads_w/b."""
    d = seeds[:, None]
    for i in range(cert.num_layers - 1, -1, -1):
        grads_w[i] += d.T @ zs[i]
        if with_bias:
            grads_b[i] += d.sum(axis=0)
        if i > 0:
            d = (d @ cert.weights[i]) * masks[i - 1]


def _zero_grads(cert):
    return ([np.zeros_like(w) for w in cert.weights],
            [np.zeros_like(b) for b in cert.biases])


# ---------------------------------------------------------------------------
# Training loss
# ---------------------------------------------------------------------------

def _pack_batch(cert, cfg, sys, batch):
    if not batch:
        raise ContractError("certificate loss needs a non-empty batch")
    B = len(batch)
    X = np.stack([np.asarray(s.x, dtype=float) for s in batch])
    if X.shape[1] != sys.n or sys.n != cert.input_dim:
        raise DimensionMismatchError("batch/system/certificate dims disagree")
    is_goal = np.array([s.label == "goal" for s in batch])
    is_safe = np.array([s.label == "safe" for s in batch])
    is_unsafe = np.array([s.label == "unsafe" for s in batch])

    has_lie = np.zeros(B, dtype=bool)   # control present: continuous hinge
    has_succ = np.zeros(B, dtype=bool)  # successor present: discrete hinge
    Xn = np.zeros_like(X)
    F = np.zeros_like(X)
    for i, s in enumerate(batch):
        if cfg.alpha2 > 0 and s.control is not None and s.successor is None:
            raise ContractError("sample has a control but no successor while "
                                "the discrete-difference hinge is active")
        if cfg.alpha1 > 0 and s.successor is not None and s.control is None:
            raise ContractError("sample has a successor but no control while "
                                "the dissipation hinge is active")
        if s.control is not None:
            has_lie[i] = True
            F[i] = eval_dynamics(sys, s.x, s.control)
        if s.successor is not None:
            has_succ[i] = True
            Xn[i] = np.asarray(s.successor, dtype=float)
    return X, Xn, F, has_lie, has_succ, is_goal, is_safe, is_unsafe


def _loss_terms(cert, cfg, V, Vn, lie, has_lie, has_succ, is_goal, is_safe,
                is_unsafe):
    goal_t = np.where(is_goal, np.abs(V), 0.0)
    pos_t = np.maximum(-V, 0.0)
    safe_t = np.where(is_safe, np.maximum(V - cfg.c, 0.0), 0.0)
    unsafe_t = np.where(is_unsafe, np.maximum(cfg.c - V, 0.0), 0.0)
    arg1 = lie + cfg.lam * V + cfg.eps
    arg2 = Vn - V + cfg.lam * V + cfg.eps
    diss1 = np.where(has_lie, cfg.alpha1 * np.maximum(arg1, 0.0), 0.0)
    diss2 = np.where(has_succ, cfg.alpha2 * np.maximum(arg2, 0.0), 0.0)
    total = goal_t + pos_t + safe_t + unsafe_t + diss1 + diss2
    return total, arg1, arg2


def clbf_loss(cert, cfg: CertificateConfig, sys: SystemSpec, batch) -> float:
    """Mean certificate training loss over a batch of labeled states."""
    X, Xn, F, hl, hs, g, s, u = _pack_batch(cert, cfg, sys, batch)
    V, _, masks = _forward_cached(cert, X)
    Vn = forward_many(cert, Xn)
    lie, _ = _tangent_forward(cert, X, F, masks)
    total, _, _ = _loss_terms(cert, cfg, V, Vn, lie, hl, hs, g, s, u)
    return float(np.mean(total))


def clbf_loss_grad(cert, cfg: CertificateConfig, sys: SystemSpec, batch):
    """Return (loss, grads_w, grads_b): exact mean-loss parameter gradient.

    The dissipation hinge differentiates through grad(V) itself (the
    second-order path): its weight gradient reuses the value-path backward
    multipliers seeded on the tangent activations.
    """
    X, Xn, F, hl, hs, g, s, u = _pack_batch(cert, cfg, sys, batch)
    B = X.shape[0]
    V, zs, masks = _forward_cached(cert, X)
    Vn, zs_n, masks_n = _forward_cached(cert, Xn)
    lie, ts = _tangent_forward(cert, X, F, masks)
    total, arg1, arg2 = _loss_terms(cert, cfg, V, Vn, lie, hl, hs, g, s, u)
    loss = float(np.mean(total))

    act1 = hl & (arg1 > 0.0)
    act2 = hs & (arg2 > 0.0)
    # d(loss)/dV(x) per sample:
    seed_v = (np.where(g, np.sign(V), 0.0)
              - (V < 0.0)
              + np.where(s, (V > cfg.c).astype(float), 0.0)
              - np.where(u, (V < cfg.c).astype(float), 0.0)
              + cfg.alpha1 * cfg.lam * act1
              + cfg.alpha2 * (cfg.lam - 1.0) * act2) / B
    # d(loss)/dV(successor) and d(loss)/d(lie):
    seed_vn = (cfg.alpha2 * act2.astype(float)) / B
    seed_lie = (cfg.alpha1 * act1.astype(float)) / B

    gw, gb = _zero_grads(cert)
    _backprop(cert, seed_v, zs, masks, gw, gb)
    _backprop(cert, seed_vn, zs_n, masks_n, gw, gb)
    _backprop(cert, seed_lie, ts, masks, gw, gb, with_bias=False)
    return loss, gw, gb


# ---------------------------------------------------------------------------
# Checkpoint format: text header, then row-major float64 parameter lines.
# repr() emits shortest round-trip decimals, so save -> load -> save is
# byte-identical.
# ---------------------------------------------------------------------------

def save_checkpoint(path, cert: MlpCertificate, cfg: CertificateConfig, seed: int):
    lines = [
        "layers " + " ".join(str(s) for s in cert.layer_sizes),
        "activation relu",
        f"c {cfg.c!r}",
        f"lambda {cfg.lam!r}",
        f"eps {cfg.eps!r}",
        f"alpha1 {cfg.alpha1!r}",
        f"alpha2 {cfg.alpha2!r}",
        f"seed {seed}",
    ]
    for i, (w, b) in enumerate(zip(cert.weights, cert.biases)):
        lines.append(f"W{i + 1}")
        for row in w:
            lines.append(" ".join(repr(v) for v in row))
        lines.append(f"b{i + 1}")
        lines.append(" ".join(repr(v) for v in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Return (cert, cfg, seed) parsed from a checkpoint file."""
    lines = Path(path).read_text().splitlines()
    header = {}
    idx = 0
    while idx < len(lines) and not lines[idx].startswith("W"):
        key, _, val = lines[idx].partition(" ")
        header[key] = val
        idx += 1
    sizes = tuple(int(t) for t in header["layers"].split())
    if header.get("activation") != "relu":
        raise ValueError(f"unsupported activation {header.get('activation')!r}")
    cfg = CertificateConfig(
        c=float(header["c"]), lam=float(header["lambda"]),
        eps=float(header["eps"]), alpha1=float(header["alpha1"]),
        alpha2=float(header["alpha2"]))
    seed = int(header["seed"])

    weights, biases = [], []
    for i in range(len(sizes) - 1):
        if lines[idx] != f"W{i + 1}":
            raise ValueError(f"malformed checkpoint: expected W{i + 1} marker")
        idx += 1
        rows = [np.array([float(t) for t in lines[idx + r].split()])
                for r in range(sizes[i + 1])]
        idx += sizes[i + 1]
        if lines[idx] != f"b{i + 1}":
            raise ValueError(f"malformed checkpoint: expected b{i + 1} marker")
        idx += 1
        weights.append(np.stack(rows))
        biases.append(np.array([float(t) for t in lines[idx].split()]))
        idx += 1
    return MlpCertificate(sizes, weights, biases), cfg, seed
