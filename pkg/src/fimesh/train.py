"""Mini-batch training and evaluation loops for the mesh super-resolution models."""

from __future__ import annotations

import copy
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from fimesh import autograd as ag
from fimesh.nn import SSRModel, nearest_upsample, plan_for, psnr_capped

SCHEDULES = ("constant", "cosine")
# Named random streams; the index is mixed into the seed so each stream can
# be re-seeded without disturbing the others.
STREAMS = ("init", "split", "shuffle", "synth")


class NumericError(RuntimeError):
    pass


def stream_rng(seed: int, name: str) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def learning_rate(base: float, schedule: str, step: int, total: int) -> float:
    if schedule == "constant" or total <= 0:
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + np.cos(np.pi * step / total))
    raise ValueError(f"schedule must be one of {SCHEDULES}")


def predict(model: SSRModel, x: np.ndarray, batch: int = 64) -> np.ndarray:
    """Eval-mode forward in chunks."""
    outs = [model(x[i:i + batch], training=False).data for i in range(0, len(x), batch)]
    return np.concatenate(outs) if outs else np.zeros((0, model.config.image_channels, model.n_out))


def item_psnrs(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.array([psnr_capped(p, t) for p, t in zip(pred, target)])


def upsample_floor(x: np.ndarray, level_in: int, kind: str) -> np.ndarray:
    """Parameter-free two-level reference prediction."""
    return nearest_upsample(nearest_upsample(x, plan_for(level_in, kind)), plan_for(level_in + 1, kind))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_store: ag.ParamStore | None = None
    best_epoch: int = 0


def train_model(
    model: SSRModel,
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    epochs: int = 50,
    batch: int = 64,
    lr: float = 0.01,
    schedule: str = "constant",
    seed: int = 0,
    on_epoch=None,
) -> TrainResult:
    """Adam on MSE. Epoch 0 in the history is the untrained model.

    ``best_store`` holds a copy of the parameters with the highest test PSNR.
    A non-finite loss raises :class:`NumericError`.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"schedule must be one of {SCHEDULES}")
    if len(train_x) == 0:
        raise ValueError("empty training set")
    rng = stream_rng(seed, "shuffle")
    steps_per_epoch = -(-len(train_x) // batch)
    total = epochs * steps_per_epoch
    result = TrainResult()
    t0 = time.perf_counter()

    def record(epoch, train_mse, cur_lr):
        test_psnr = float(item_psnrs(predict(model, test_x), test_y).mean()) if len(test_x) else None
        row = {
            "epoch": epoch,
            "train_mse": float(train_mse),
            "test_psnr": test_psnr,
            "lr": float(cur_lr),
            "elapsed_s": time.perf_counter() - t0,
        }
        result.history.append(row)
        best = max((r["test_psnr"] for r in result.history[:-1] if r["test_psnr"] is not None),
                   default=None)
        if result.best_store is None or (test_psnr is not None and best is not None and test_psnr > best):
            result.best_store = copy.deepcopy(model.store)
            result.best_epoch = epoch
        if on_epoch is not None:
            on_epoch(row)

    init_mse = float(np.mean((predict(model, train_x) - train_y) ** 2))
    record(0, init_mse, lr)
    step = 0
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(train_x))
        losses = []
        for i in range(0, len(perm), batch):
            idx = perm[i:i + batch]
            cur = learning_rate(lr, schedule, step, total)
            model.store.zero_grad()
            with ag.Tape() as tape:
                loss = ag.mse(model(train_x[idx], training=True), train_y[idx])
                tape.backward(loss)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            ag.adam_step(model.store, cur)
            losses.append(value * len(idx))
            step += 1
        record(epoch, sum(losses) / len(perm), cur)
    return result
