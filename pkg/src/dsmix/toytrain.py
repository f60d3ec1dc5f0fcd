"""A small multi-stream network on a synthetic regression task.

The model embeds an input vector into ``n`` streams of width ``C``, runs
``L`` residual blocks whose branch is a tanh perceptron ``C -> 4C -> C``,
averages the streams and reads out a linear prediction. Training uses
AdamW with global-norm clipping and a warmup + cosine schedule, and logs
one record per step.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .birkhoff import build_basis
from .grad import backward_cached
from .hyperblock import SK_ITERS, BlockParams, Variant, forward_cached, init_params
from .matcore import ds_error_batch

log = logging.getLogger(__name__)

CSV_HEADER = ("step", "loss", "grad_norm", "max_ds_error", "ms_per_step")


class TrainingDiverged(FloatingPointError):
    """Raised when the loss stops being finite; carries the offending batch."""

    def __init__(self, step: int, indices: np.ndarray, inputs: np.ndarray,
                 targets: np.ndarray, dump_path: Path | None = None):
        self.step = step
        self.indices = indices
        self.inputs = inputs
        self.targets = targets
        self.dump_path = dump_path
        where = f"; batch dumped to {dump_path}" if dump_path else ""
        super().__init__(f"non-finite loss at step {step} on a batch of {len(indices)} samples{where}")


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    seed: int

    def __len__(self) -> int:
        return self.inputs.shape[0]


def make_task(seed: int = 0, d_in: int = 8, d_out: int = 4, samples: int = 256,
              hidden: int = 32) -> Dataset:
    """Standard-normal inputs labelled by a fixed random two-layer tanh teacher."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, hidden))
    B = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d_out))
    u = rng.normal(size=(samples, d_in))
    return Dataset(u, np.tanh(u @ A) @ B * 2.0, seed)


class MLPBranch:
    """``h -> tanh(h W1 + b1) W2``; keeps its last activation for ``backward``."""

    def __init__(self, W1, b1, W2):
        self.W1, self.b1, self.W2 = W1, b1, W2
        self.grads: dict[str, np.ndarray] = {}
        self._t = None

    def __call__(self, h):
        self._t = np.tanh(h @ self.W1 + self.b1)
        return self._t @ self.W2

    def backward(self, h, dy):
        t = self._t
        C = h.shape[-1]
        self.grads["W2"] = t.reshape(-1, t.shape[-1]).T @ dy.reshape(-1, C)
        ds = (dy @ self.W2.T) * (1.0 - t * t)
        self.grads["W1"] = h.reshape(-1, C).T @ ds.reshape(-1, ds.shape[-1])
        self.grads["b1"] = ds.reshape(-1, ds.shape[-1]).sum(0)
        return ds @ self.W1.T


@dataclass
class ToyModel:
    variant: Variant
    n: int
    C: int
    embed: np.ndarray  # (d_in, n*C)
    blocks: list[BlockParams]
    branches: list[MLPBranch]
    readout: np.ndarray  # (C, d_out)
    sk_iters: int = SK_ITERS

    @property
    def L(self) -> int:
        return len(self.blocks)

    @classmethod
    def create(cls, variant, n: int = 4, C: int = 16, L: int = 6, d_in: int = 8,
               d_out: int = 4, seed: int = 0, sk_iters: int = SK_ITERS) -> "ToyModel":
        if L < 1:
            raise ValueError("L must be >= 1")
        variant = Variant.parse(variant)
        rng = np.random.default_rng(seed)
        embed = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, n * C))
        blocks = [init_params(variant, n, C) for _ in range(L)]
        branches = [MLPBranch(rng.normal(0.0, 1.0 / np.sqrt(C), (C, 4 * C)),
                              np.zeros(4 * C),
                              rng.normal(0.0, 1.0 / np.sqrt(4 * C), (4 * C, C)) / np.sqrt(L))
                    for _ in range(L)]
        readout = rng.normal(0.0, 1.0 / np.sqrt(C), (C, d_out))
        return cls(variant, n, C, embed, blocks, branches, readout, sk_iters)

    # flat parameter vector, in a fixed order: embed, readout, blocks, branches
    def to_vector(self) -> np.ndarray:
        parts = [self.embed.ravel(), self.readout.ravel()]
        parts += [b.to_vector() for b in self.blocks]
        parts += [np.concatenate([br.W1.ravel(), br.b1, br.W2.ravel()]) for br in self.branches]
        return np.concatenate(parts)

    def load_vector(self, v: np.ndarray) -> None:
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            out = v[pos:pos + size].reshape(shape).copy()
            pos += size
            return out

        self.embed = take(self.embed.shape)
        self.readout = take(self.readout.shape)
        for i, b in enumerate(self.blocks):
            self.blocks[i] = b.from_vector(take((b.to_vector().size,)))
        for br in self.branches:
            br.W1, br.b1, br.W2 = take(br.W1.shape), take(br.b1.shape), take(br.W2.shape)
        if pos != v.size:
            raise ValueError(f"vector has {v.size} entries, model needs {pos}")

    def decay_mask(self) -> np.ndarray:
        """1 for weight matrices, 0 for biases and gate scales."""
        parts = [np.ones(self.embed.size), np.ones(self.readout.size)]
        for b in self.blocks:
            parts += [np.ones(b.W_pre.size + b.W_post.size + b.W_res.size),
                      np.zeros(b.b_pre.size + b.b_post.size + b.b_res.size + 3)]
        for br in self.branches:
            parts += [np.ones(br.W1.size), np.zeros(br.b1.size), np.ones(br.W2.size)]
        return np.concatenate(parts)

    def forward(self, u: np.ndarray):
        """Predictions for a batch ``(B, d_in)`` plus the per-layer caches."""
        basis = build_basis(self.n) if self.variant is Variant.MHC_LITE else None
        x = (u @ self.embed).reshape(u.shape[0], self.n, self.C)
        caches = []
        for block, branch in zip(self.blocks, self.branches):
            x, cache = forward_cached(block, x, branch, self.sk_iters, basis)
            caches.append(cache)
        z = x.mean(axis=-2)
        return z @ self.readout, z, caches

    def loss_and_grad(self, u: np.ndarray, y: np.ndarray):
        pred, z, caches = self.forward(u)
        diff = pred - y
        loss = float(np.mean(diff * diff))
        dpred = 2.0 * diff / diff.size
        g_readout = z.T @ dpred
        dx = np.repeat((dpred @ self.readout.T)[:, None, :] / self.n, self.n, axis=1)
        basis = build_basis(self.n) if self.variant is Variant.MHC_LITE else None
        block_grads, branch_grads = [], []
        for block, branch, cache in zip(reversed(self.blocks), reversed(self.branches),
                                        reversed(caches)):
            g, dx = backward_cached(block, cache, branch.backward, dx, basis)
            block_grads.append(g)
            branch_grads.append(dict(branch.grads))
        g_embed = u.T @ dx.reshape(u.shape[0], -1)
        parts = [g_embed.ravel(), g_readout.ravel()]
        parts += [g.to_vector() for g in reversed(block_grads)]
        parts += [np.concatenate([bg["W1"].ravel(), bg["b1"], bg["W2"].ravel()])
                  for bg in reversed(branch_grads)]
        layer_ds = np.array([ds_error_batch(c.maps.H_res).max() for c in caches])
        return loss, np.concatenate(parts), layer_ds


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    grad_norm: float  # before clipping
    clipped_norm: float
    max_ds_error: float
    ms_per_step: float
    layer_ds_error: tuple = ()  # worst ds_error of H_res over the batch, per layer


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def smoothed_loss(self, window: int = 25) -> np.ndarray:
        """Trailing moving average of the loss (shorter windows at the start)."""
        loss = self.column("loss")
        c = np.concatenate([[0.0], np.cumsum(loss)])
        idx = np.arange(1, loss.size + 1)
        lo = np.maximum(0, idx - window)
        return (c[idx] - c[lo]) / (idx - lo)

    def write_csv(self, dest) -> None:
        """Write to a path or an open text stream."""
        if hasattr(dest, "write"):
            self._write_rows(dest)
        else:
            with Path(dest).open("w", newline="") as fh:
                self._write_rows(fh)

    def _write_rows(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.step, f"{r.loss:.17g}", f"{r.grad_norm:.17g}",
                        f"{r.max_ds_error:.17g}", f"{r.ms_per_step:.17g}"])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([StepRecord(int(r["step"]), float(r["loss"]), float(r["grad_norm"]),
                               float("nan"), float(r["max_ds_error"]), float(r["ms_per_step"]))
                    for r in rows])


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    batch_size: int | None = None  # None: full batch
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    clip: float = 1.0
    warmup_frac: float = 0.02
    min_lr_ratio: float = 0.1
    adam_eps: float = 1e-8
    seed: int = 0


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay down to ``min_lr_ratio * lr``."""
    warmup = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(1, cfg.steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    lo = cfg.lr * cfg.min_lr_ratio
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + np.cos(np.pi * progress))


def train(model: ToyModel, data: Dataset, cfg: TrainConfig | None = None,
          dump_dir=None) -> TrainLog:
    """AdamW training loop; mutates ``model`` in place."""
    cfg = cfg or TrainConfig()
    if cfg.steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    theta = model.to_vector()
    decay = model.decay_mask()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    out = TrainLog()
    N = len(data)
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        if cfg.batch_size is None or cfg.batch_size >= N:
            idx = np.arange(N)
        else:
            idx = rng.choice(N, cfg.batch_size, replace=False)
        u, y = data.inputs[idx], data.targets[idx]
        loss, g, layer_ds = model.loss_and_grad(u, y)
        if not np.isfinite(loss):
            path = None
            if dump_dir is not None:
                path = Path(dump_dir) / f"diverged_step{step}.npz"
                np.savez(path, step=step, indices=idx, inputs=u, targets=y, params=theta)
            raise TrainingDiverged(step, idx, u, y, path)
        norm = float(np.sqrt(np.dot(g, g)))
        if norm > cfg.clip:
            g = g * (cfg.clip / norm)
        clipped = float(np.sqrt(np.dot(g, g)))

        lr = lr_at(step, cfg)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** (step + 1))
        vhat = v / (1 - cfg.beta2 ** (step + 1))
        theta = theta - lr * (mhat / (np.sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * decay * theta)
        model.load_vector(theta)

        ms = 1e3 * (time.perf_counter() - t0)
        out.records.append(StepRecord(step, loss, norm, clipped, float(layer_ds.max()), ms,
                                      tuple(float(e) for e in layer_ds)))
        if step % 100 == 0:
            log.debug("step %d loss %.5f grad_norm %.4f", step, loss, norm)
    return out


@dataclass
class Harvest:
    """Per-(layer, token) residual maps collected from a forward pass."""

    variant: Variant
    hres: np.ndarray  # (L, T, n, n)
    pre_sk: np.ndarray | None = None  # (L, T, n, n), MHC only

    def __len__(self) -> int:
        return self.hres.shape[0] * self.hres.shape[1]

    def matrices(self) -> list[np.ndarray]:
        return list(self.hres.reshape(-1, *self.hres.shape[-2:]))

    def per_token_stacks(self) -> list[list[np.ndarray]]:
        """For each token, its layer sequence H_1 .. H_L."""
        return [list(self.hres[:, t]) for t in range(self.hres.shape[1])]

    def save(self, path) -> None:
        arrays = {"variant": np.array(self.variant.value), "hres": self.hres}
        if self.pre_sk is not None:
            arrays["pre_sk"] = self.pre_sk
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "Harvest":
        with np.load(path) as z:
            pre = z["pre_sk"] if "pre_sk" in z.files else None
            return cls(Variant.parse(str(z["variant"])), z["hres"], pre)


def harvest_hres(model: ToyModel, data: Dataset, tokens: int) -> Harvest:
    if not 0 < tokens <= len(data):
        raise ValueError(f"tokens must be in [1, {len(data)}], got {tokens}")
    _, _, caches = model.forward(data.inputs[:tokens])
    hres = np.stack([c.maps.H_res for c in caches])
    pre = None
    if model.variant is Variant.MHC:
        pre = np.stack([c.maps.pre_sk for c in caches])
    return Harvest(model.variant, hres, pre)
