"""Alternating training loop: guided trajectory collection, then certificate
updates on the replay data, checkpointing every epoch.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rnglib
from .certificate import (CertificateConfig, LabeledState, MlpCertificate,
                          clbf_loss_grad, init_certificate, save_checkpoint)
from .diffusion import (GuidanceConfig, SamplerConfig, sample_trajectory,
                        write_trajectories_csv)
from .dynamics import SAFE, UNSAFE, SystemSpec, classify_many
from .errors import (EpochError, EvaluationError, IntegrationBlowupError,
                     TrainingDivergenceError)

_CODE_TO_LABEL = {SAFE: "safe", UNSAFE: "unsafe"}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_initial_states: int = 16
    grad_steps_per_epoch: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    minibatch: int = 256
    replay_epochs: int = 5          # keep data from this many recent epochs
    seed: int = 0
    hidden_layers: int = 3
    hidden_units: int = 64
    init_lo: np.ndarray | None = None  # defaults to the system's init box
    init_hi: np.ndarray | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_initial_states < 1:
            raise ValueError("need at least one initial state per epoch")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")

    def layer_sizes(self, n: int) -> tuple:
        return (n,) + (self.hidden_units,) * self.hidden_layers + (1,)

    def init_region(self, sys: SystemSpec):
        lo = sys.init_lo if self.init_lo is None else np.asarray(self.init_lo, dtype=float)
        hi = sys.init_hi if self.init_hi is None else np.asarray(self.init_hi, dtype=float)
        return lo, hi


class ReplayDataset:
    """Labeled states tagged by epoch of origin; oldest epochs are evicted."""

    def __init__(self, capacity_epochs: int):
        self.capacity_epochs = capacity_epochs
        self._by_epoch: dict[int, list[LabeledState]] = {}

    def add_epoch(self, epoch: int, states: list[LabeledState]) -> None:
        self._by_epoch.setdefault(epoch, []).extend(states)
        while len(self._by_epoch) > self.capacity_epochs:
            del self._by_epoch[min(self._by_epoch)]

    def states(self) -> list[LabeledState]:
        out: list[LabeledState] = []
        for epoch in sorted(self._by_epoch):
            out.extend(self._by_epoch[epoch])
        return out

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_epoch.values())


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators mirroring the certificate parameters."""

    m_w: list = field(repr=False)
    v_w: list = field(repr=False)
    m_b: list = field(repr=False)
    v_b: list = field(repr=False)
    step: int = 0

    @classmethod
    def for_certificate(cls, cert: MlpCertificate) -> "OptimizerState":
        return cls(m_w=[np.zeros_like(w) for w in cert.weights],
                   v_w=[np.zeros_like(w) for w in cert.weights],
                   m_b=[np.zeros_like(b) for b in cert.biases],
                   v_b=[np.zeros_like(b) for b in cert.biases])

    def apply(self, cert, gw, gb, lr, beta1, beta2, eps=1e-8):
        self.step += 1
        corr1 = 1.0 - beta1 ** self.step
        corr2 = 1.0 - beta2 ** self.step
        for i in range(cert.num_layers):
            for p, g, m, v in ((cert.weights[i], gw[i], self.m_w[i], self.v_w[i]),
                               (cert.biases[i], gb[i], self.m_b[i], self.v_b[i])):
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                p -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)


def label_trajectory(sys: SystemSpec, sample) -> list[LabeledState]:
    """Turn one rollout into dataset entries (state, control applied there,
    successor), so every entry supports both dissipation terms."""
    xs = np.vstack([sample.x0[None, :], sample.states[:-1]])
    codes = classify_many(sys, xs)
    entries = []
    for t in range(sample.horizon):
        entries.append(LabeledState(
            x=xs[t],
            label=_CODE_TO_LABEL.get(int(codes[t]), "interior"),
            successor=sample.states[t].copy(),
            control=sample.controls[t].copy()))
    return entries


def collect_phase(sys, cert, ccfg, gcfg, scfg, tcfg: TrainConfig,
                  dataset: ReplayDataset, epoch: int, cost_fn=None,
                  workers: int = 1):
    """Sample guided trajectories from fresh initial states and store them.

    Returns the list of successfully sampled trajectories. Raises EpochError
    if every one of them blew up.
    """
    B = tcfg.batch_initial_states
    lo, hi = tcfg.init_region(sys)
    gen = rnglib.substream(tcfg.seed, rnglib.INIT_STATES, epoch)
    x0s = gen.uniform(lo, hi, size=(B, sys.n))

    def draw(b):
        try:
            sample, _ = sample_trajectory(
                sys, cert, ccfg, gcfg, scfg, x0s[b], cost_fn,
                stream=epoch * B + b)
            return sample
        except (IntegrationBlowupError, EvaluationError):
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(draw, range(B)))
    else:
        results = [draw(b) for b in range(B)]

    samples = [s for s in results if s is not None]
    if not samples:
        raise EpochError(f"epoch {epoch}: all {B} trajectories failed")
    entries: list[LabeledState] = []
    for sample in samples:
        entries.extend(label_trajectory(sys, sample))
    entries.append(LabeledState(x=sys.goal.copy(), label="goal"))
    dataset.add_epoch(epoch, entries)
    return samples


def update_phase(cert, ccfg, sys, dataset: ReplayDataset, tcfg: TrainConfig,
                 opt: OptimizerState, epoch: int):
    """Run the epoch's gradient steps on replayed minibatches.

    Returns the per-step loss trace. The certificate is updated in place.
    """
    data = dataset.states()
    if not data:
        raise EpochError("update phase needs a non-empty dataset")
    gen = rnglib.substream(tcfg.seed, rnglib.UPDATE, epoch)
    trace = []
    for step_idx in range(tcfg.grad_steps_per_epoch):
        idx = gen.integers(0, len(data), size=min(tcfg.minibatch, len(data)))
        batch = [data[i] for i in idx]
        loss, gw, gb = clbf_loss_grad(cert, ccfg, sys, batch)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(
                f"non-finite loss at epoch {epoch}", minibatch_index=step_idx)
        opt.apply(cert, gw, gb, tcfg.learning_rate, tcfg.beta1, tcfg.beta2)
        trace.append(loss)
    return trace


def _epoch_metrics(sys, cert, ccfg, samples, violation_states, seed, epoch,
                   wall_ms):
    # Cheap per-epoch diagnostics computed from the collected trajectories.
    from .evaluation import (MetricsReport, monotonicity_fraction,
                             violation_rate_estimate)
    unsafe_free = []
    terminal = []
    mono = []
    for s in samples:
        codes = classify_many(sys, s.states)
        unsafe_free.append(not np.any(codes == UNSAFE))
        terminal.append(float(np.linalg.norm(s.states[-1] - sys.goal)))
        mono.append(monotonicity_fraction(cert, s))
    rate = 0.0
    if violation_states > 0:
        rate, _ = violation_rate_estimate(
            sys, cert, ccfg, violation_states,
            rng_seed=(seed, rnglib.VIOLATION, epoch))
    terminal = np.asarray(terminal)
    return MetricsReport(
        safety_rate=float(np.mean(unsafe_free)),
        terminal_error_mean=float(terminal.mean()),
        terminal_error_std=float(terminal.std()),
        violation_rate=rate,
        monotonicity_fraction=float(np.mean(mono)),
        eval_time_ms_mean=wall_ms,
        eval_time_ms_std=0.0,
    )


def run(sys: SystemSpec, ccfg: CertificateConfig, gcfg: GuidanceConfig,
        scfg: SamplerConfig, tcfg: TrainConfig, out_dir, cost_fn=None,
        workers: int = 1, config_snapshot: str | None = None,
        epoch_violation_states: int = 2000):
    """Train for `tcfg.epochs` epochs; returns (certificate, metrics history).

    Writes `config.snapshot`, a top-level `checkpoint` (the latest), and per
    epoch `epoch_{k}/{checkpoint,trajectories.csv,metrics.json}` under out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config_snapshot is not None:
        (out / "config.snapshot").write_text(config_snapshot)

    cert = init_certificate(tcfg.layer_sizes(sys.n), seed=tcfg.seed)
    opt = OptimizerState.for_certificate(cert)
    dataset = ReplayDataset(tcfg.replay_epochs)
    save_checkpoint(out / "checkpoint", cert, ccfg, tcfg.seed)

    history = []
    for epoch in range(1, tcfg.epochs + 1):
        t_start = time.perf_counter()
        samples = collect_phase(sys, cert, ccfg, gcfg, scfg, tcfg, dataset,
                                epoch, cost_fn, workers)
        update_phase(cert, ccfg, sys, dataset, tcfg, opt, epoch)
        wall_ms = (time.perf_counter() - t_start) * 1e3

        edir = out / f"epoch_{epoch}"
        edir.mkdir(exist_ok=True)
        save_checkpoint(edir / "checkpoint", cert, ccfg, tcfg.seed)
        write_trajectories_csv(edir / "trajectories.csv", sys, cert, ccfg,
                               samples, scfg.integrator.dt)
        report = _epoch_metrics(sys, cert, ccfg, samples,
                                epoch_violation_states, tcfg.seed, epoch,
                                wall_ms)
        (edir / "metrics.json").write_text(report.to_json())
        history.append(report)
        save_checkpoint(out / "checkpoint", cert, ccfg, tcfg.seed)
    return cert, history
