"""Optimization loop with warmup/decay, multi-chunk masks and checkpoints."""

import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from xstream import data as xdata
from xstream import geometry
from xstream import numerics as nx
from xstream.core import TransducerModel
from xstream.data import Utterance
from xstream.exceptions import NonFiniteError, TrainingDivergedError
from xstream.numerics import Tensor
from xstream.transducer import Vocab
from xstream.utils import (
    dataclass_from_dict,
    dataclass_to_dict,
    dumps_line,
    get_rng_state,
    set_rng_state,
    substream,
)

logger = logging.getLogger(__name__)

TRAINING_MODES = ("non_streaming", "fixed_chunk", "multi_chunk")
ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9
TRAINER_STREAMS = ("sampler", "dropout", "shuffle")

@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings.

    Parameters
    ----------
    learning_rate : float
        Peak learning rate reached at the end of warmup.
    warmup_steps : int
        Linear warmup length in optimizer steps.
    epochs : int
    batch_size : int
    chunk_choices : tuple of int
        Chunk sizes sampled per batch in ``multi_chunk`` mode.
    training_mode : {"non_streaming", "fixed_chunk", "multi_chunk"}
    chunk_frames : int or None
        Training chunk size in ``fixed_chunk`` mode.
    left_context : int or None
        Training left context in chunks; None (``"full"``) is the default
        for every streaming mode.
    seed : int
        Root of the sampler, dropout and shuffle generators.
    grad_clip : float
        Global gradient norm cap.
    epoch_decay : float
        Per-epoch learning rate factor.
    optimizer : str
        Only plain Adam (``"adam"``) is available.
    """
    learning_rate: float = 1.25e-3
    warmup_steps: int = 500
    epochs: int = 10
    batch_size: int = 8
    chunk_choices: tuple[int, ...] = geometry.DEFAULT_CHUNK_CHOICES
    training_mode: str = "non_streaming"
    chunk_frames: int | None = None
    left_context: int | None = field(default=None, metadata={"none_as": "full"})
    seed: int = 0
    grad_clip: float = 5.0
    epoch_decay: float = 0.9
    optimizer: str = "adam"

    def __post_init__(self):
        if self.training_mode not in TRAINING_MODES:
            raise ValueError(f"training_mode must be one of {TRAINING_MODES}.")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1.")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0.")
        if self.training_mode == "multi_chunk" and not self.chunk_choices:
            raise ValueError("multi_chunk training needs chunk_choices.")
        if self.training_mode == "fixed_chunk" and self.chunk_frames is None:
            raise ValueError("fixed_chunk training needs chunk_frames.")
        if self.optimizer != "adam":
            raise ValueError("only the 'adam' optimizer is available.")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ValueError("learning_rate and grad_clip must be positive.")


PRESETS = {
    "ami": {"learning_rate": 1.25e-3, "epochs": 10},
    "commonvoice": {"learning_rate": 5.0e-3, "epochs": 20},
}

def preset(name: str, **overrides) -> TrainConfig:
    """Training configuration of a named corpus setup, with overrides."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}.")
    return TrainConfig(**{**PRESETS[name], **overrides})

def lr_at(step: int, epoch: int, cfg: TrainConfig) -> float:
    """
    Learning rate of optimizer step `step` (1-based) in epoch `epoch`.

    Linear warmup to `cfg.learning_rate`, then inverse square-root decay in
    steps, times ``epoch_decay ** epoch``.
    """
    if step < 1:
        raise ValueError("step must be >= 1.")
    warmup = cfg.warmup_steps
    ramp = min(step / warmup, 1.0)
    decay = math.sqrt(warmup / max(step, warmup)) * cfg.epoch_decay ** epoch
    return cfg.learning_rate * ramp * decay


@dataclass
class OptimState:
    """Adam moments per parameter name, and the count of applied steps."""
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "OptimState":
        return cls(
            0,
            {n: np.zeros(t.shape, dtype=t.dtype) for n, t in params.items()},
            {n: np.zeros(t.shape, dtype=t.dtype) for n, t in params.items()},
            )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
    ) -> tuple[dict[str, Tensor], OptimState, bool]:
    """
    One Adam update.

    Parameters
    ----------
    params : mapping of str to Tensor
    grads : mapping of str to np.ndarray
        Gradient per parameter name, shaped like the parameter.
    state : OptimState
    lr : float

    Returns
    -------
    params : dict
        Updated parameters (new tensors).
    state : OptimState
        Updated moments.
    applied : bool
        False when the step was skipped because a gradient was not finite;
        parameters and state are then returned unchanged.
    """
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient of {name!r} has shape {grads[name].shape}, expected {p.shape}")
    if not all(np.isfinite(g).all() for g in grads.values()):
        warnings.warn("non-finite gradient, optimizer step skipped", stacklevel=2)
        return dict(params), state, False
    b1, b2 = betas
    step = state.step + 1
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** step)
        v_hat = v[name] / (1 - b2 ** step)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params[name] = Tensor((p.data - update).astype(p.dtype))
    return new_params, OptimState(step, m, v), True

def clip_grad_norm(
    grads: Mapping[str, np.ndarray],
    max_norm: float = 5.0,
    ) -> tuple[dict[str, np.ndarray], float]:
    """Scales `grads` so their global L2 norm is at most `max_norm`."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    factor = max_norm / norm
    return {n: g * factor for n, g in grads.items()}, norm

def evaluate_nll(
    model: TransducerModel,
    utts: Sequence[Utterance],
    spec: geometry.MaskSpec,
    ) -> float:
    """Mean per-utterance negative log-likelihood, without dropout."""
    if not utts:
        raise ValueError("cannot evaluate an empty dataset.")
    return float(np.mean([model.loss(u.inputs, u.tokens, spec).item() for u in utts]))


class Trainer:
    """
    Trains a `TransducerModel` with full-utterance masked forwards.

    Parameters
    ----------
    model : TransducerModel
        Initial model.
    cfg : TrainConfig
    run_config : mapping, optional
        Configuration snapshot stored in checkpoints.
    vocab : Vocab, optional
        Stored in checkpoints so decoding can spell tokens.
    """

    def __init__(
        self,
        model: TransducerModel,
        cfg: TrainConfig,
        run_config: Mapping | None = None,
        vocab: Vocab | None = None,
        ):
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        self.run_config = dict(run_config) if run_config is not None else None
        self.optim = OptimState.zeros(model.params)
        self.step = 0
        self.epoch = 0
        self.best_dev_nll = math.inf
        self.rngs = {name: substream(cfg.seed, name) for name in TRAINER_STREAMS}
        self.history: list[dict] = []

    def batch_spec(self) -> geometry.MaskSpec:
        """Geometry of the next batch; draws a chunk size in multi_chunk mode."""
        cfg = self.cfg
        if cfg.training_mode == "non_streaming":
            return geometry.MaskSpec.full_attention()
        if cfg.training_mode == "fixed_chunk":
            return geometry.MaskSpec(cfg.chunk_frames, cfg.left_context)
        chunk = geometry.sample_chunk_size(self.rngs["sampler"], cfg.chunk_choices)
        return geometry.MaskSpec(chunk, cfg.left_context)

    def eval_spec(self) -> geometry.MaskSpec:
        """Dev geometry: the training chunk in fixed_chunk mode, full attention otherwise."""
        if self.cfg.training_mode == "fixed_chunk":
            return geometry.MaskSpec(self.cfg.chunk_frames, self.cfg.left_context)
        return geometry.MaskSpec.full_attention()

    def _utterance_grads(self, utt: Utterance, spec: geometry.MaskSpec):
        rate = self.model.cfg.encoder.dropout
        rng = self.rngs["dropout"] if rate > 0 else None
        try:
            with nx.Tape() as tape:
                for t in self.model.params.values():
                    tape.watch(t)
                nll = self.model.loss(utt.inputs, utt.tokens, spec, rng)
        except NonFiniteError as err:
            raise TrainingDivergedError(
                "non-finite loss",
                step=self.step + 1,
                epoch=self.epoch,
                utterance_id=utt.utterance_id,
                chunk_frames=spec.chunk_frames,
                ) from err
        return nll.item(), nx.backward(tape, nll, self.model.params)

    def train_step(self, batch: Sequence[Utterance]) -> dict:
        """
        Forward, backward and update on one batch.

        Gradients are averaged over the batch, clipped to `grad_clip`, and
        applied with the scheduled learning rate.
        """
        if not batch:
            raise ValueError("empty batch.")
        spec = self.batch_spec()
        total = None
        losses = []
        for utt in batch:
            loss, grads = self._utterance_grads(utt, spec)
            losses.append(loss)
            total = grads if total is None else {n: total[n] + grads[n] for n in total}
        mean_grads = {n: g / len(batch) for n, g in total.items()}
        clipped, norm = clip_grad_norm(mean_grads, self.cfg.grad_clip)
        self.step += 1
        lr = lr_at(self.step, self.epoch, self.cfg)
        params, self.optim, applied = adam_step(self.model.params, clipped, self.optim, lr)
        self.model = self.model.with_params(params)
        return {
            "loss": float(np.mean(losses)),
            "lr": lr,
            "grad_norm": norm,
            "chunk_frames": spec.chunk_frames,
            "applied": applied,
        }

    def train_epoch(self, utts: Sequence[Utterance]) -> dict:
        """
        One pass over `utts` in shuffled batches.

        Returns
        -------
        dict
            ``epoch``, ``mean_nll``, ``steps``, ``lr_trace``, ``lr_final``,
            ``chunk_sizes_used`` and ``skipped_steps``.
        """
        if not utts:
            raise ValueError("cannot train on an empty dataset.")
        order = self.rngs["shuffle"].permutation(len(utts))
        size = self.cfg.batch_size
        steps = []
        for start in range(0, len(order), size):
            batch = [utts[i] for i in order[start:start + size]]
            steps.append(self.train_step(batch))
        metrics = {
            "epoch": self.epoch,
            "mean_nll": float(np.mean([s["loss"] for s in steps])),
            "steps": len(steps),
            "lr_trace": [s["lr"] for s in steps],
            "lr_final": steps[-1]["lr"],
            "chunk_sizes_used": [s["chunk_frames"] for s in steps],
            "skipped_steps": sum(not s["applied"] for s in steps),
        }
        logger.info(
            "epoch %d: mean nll %.4f over %d steps, lr %.3e",
            self.epoch, metrics["mean_nll"], metrics["steps"], metrics["lr_final"],
            )
        self.epoch += 1
        return metrics

    def fit(
        self,
        train: Sequence[Utterance],
        dev: Sequence[Utterance] | None = None,
        checkpoint_dir: str | os.PathLike | None = None,
        metrics_path: str | os.PathLike | None = None,
        ) -> pd.DataFrame:
        """
        Trains until `cfg.epochs` epochs have run.

        After each epoch the dev negative log-likelihood is measured, the
        ``last`` checkpoint is written and, on a new lowest dev value, the
        ``best`` one. A metrics JSON line per epoch is appended to
        `metrics_path`.

        Returns
        -------
        pd.DataFrame
            One row per epoch of this call.
        """
        rows = []
        while self.epoch < self.cfg.epochs:
            metrics = self.train_epoch(train)
            if dev:
                metrics["dev_nll"] = evaluate_nll(self.model, dev, self.eval_spec())
            self.history.append(metrics)
            rows.append(metrics)
            if metrics_path is not None:
                with open(metrics_path, "a", encoding="utf-8") as fh:
                    fh.write(dumps_line(metrics) + "\n")
            if checkpoint_dir is not None:
                checkpoint_dir = Path(checkpoint_dir)
                score = metrics.get("dev_nll", metrics["mean_nll"])
                if score < self.best_dev_nll:
                    self.best_dev_nll = score
                    self.save(checkpoint_dir / "best.xtrd")
                self.save(checkpoint_dir / "last.xtrd")
        return pd.DataFrame(rows).set_index("epoch") if rows else pd.DataFrame()

    def save(self, path: str | os.PathLike) -> Path:
        return xdata.save_checkpoint(
            path,
            self.model,
            optim=self.optim,
            config=self.run_config,
            rng_states={n: get_rng_state(r) for n, r in self.rngs.items()},
            vocab=self.vocab,
            step=self.step,
            epoch=self.epoch,
            best_dev_nll=None if math.isinf(self.best_dev_nll) else self.best_dev_nll,
            train=dataclass_to_dict(self.cfg),
            )

    @classmethod
    def from_checkpoint(
        cls,
        path: str | os.PathLike,
        cfg: TrainConfig | None = None,
        ) -> "Trainer":
        """
        Restores model, optimizer, schedule position and generators.

        Continuing from here reproduces the uninterrupted trajectory.
        """
        ckpt = xdata.load_checkpoint(path)
        if cfg is None:
            cfg = dataclass_from_dict(TrainConfig, ckpt.header["train"], "train")
        trainer = cls(ckpt.model(), cfg, ckpt.header.get("config"), ckpt.vocab)
        m, v = ckpt.optim_moments()
        if m:
            trainer.optim = OptimState(int(ckpt.header["optim_step"]), m, v)
        trainer.step = int(ckpt.header.get("step", 0))
        trainer.epoch = int(ckpt.header.get("epoch", 0))
        best = ckpt.header.get("best_dev_nll")
        trainer.best_dev_nll = math.inf if best is None else float(best)
        for name, state in (ckpt.header.get("rng") or {}).items():
            if name in trainer.rngs:
                set_rng_state(trainer.rngs[name], state)
        logger.info("resumed from %s at epoch %d, step %d", path, trainer.epoch, trainer.step)
        return trainer
