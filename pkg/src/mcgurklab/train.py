"""Self-supervised training: InfoNCE with in-batch negatives and Adam."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .model import CpcModel, ModelConfig, save_checkpoint
from .signal import NoiseBank, Waveform, mix_at_snr, peak_normalize
from .tensorcore import NumericError, Tensor

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainConfigError",
    "info_nce_from_scores",
    "info_nce_loss",
    "adam_update",
    "Trainer",
    "train",
    "FULL_SCALE_DEFAULTS",
]

log = logging.getLogger(__name__)

# Values of record for full-scale runs; desk profiles override them.
FULL_SCALE_DEFAULTS = {"steps": 600_000, "batch_size": 16, "learning_rate": 2e-4}


class TrainConfigError(ValueError):
    """Invalid training configuration."""


@dataclass
class TrainConfig:
    steps: int = FULL_SCALE_DEFAULTS["steps"]
    batch_size: int = FULL_SCALE_DEFAULTS["batch_size"]
    learning_rate: float = FULL_SCALE_DEFAULTS["learning_rate"]
    snr_db: float | None = None
    noise_prob: float = 1.0
    horizon: int | None = None
    n_negatives: int | None = None
    clip_frames: int = 32
    seed: int = 0
    checkpoint_every: int = 0
    precision: str = "64"
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.steps < 1:
            raise TrainConfigError("steps must be at least 1")
        if self.batch_size < 2:
            raise TrainConfigError("batch_size must be at least 2 so every clip has in-batch negatives")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise TrainConfigError("noise_prob must lie in [0, 1]")
        if self.clip_frames % 4:
            raise TrainConfigError("clip_frames must be a multiple of 4 (lip/audio frame alignment)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({"precision": self.precision, **self.model})


# ---------------------------------------------------------------- loss


def info_nce_from_scores(scores: Tensor, positive: int = 0) -> Tensor:
    """Mean of ``-log softmax(scores)[positive]`` over all leading axes."""
    lp = tc.log_softmax(scores, axis=-1)
    idx = (Ellipsis, positive)
    return tc.scale(tc.tmean(tc.getitem(lp, idx)), -1.0)


def info_nce_loss(
    predictions: list[Tensor],
    targets: Tensor,
    n_negatives: int | None = None,
    rng: np.random.Generator | None = None,
    allow_degenerate: bool = False,
) -> Tensor:
    """Contrastive loss over all valid ``(t, k)`` pairs of a batch.

    Prediction ``predictions[k-1][b, t]`` is scored by dot product against
    ``targets[b', t + k]`` for every clip ``b'`` of the batch; the positive is
    ``b' = b``. ``n_negatives`` restricts each row to a random subset of the
    other clips.
    """
    batch, steps, _ = targets.shape
    if batch < 2 and not allow_degenerate:
        raise TrainConfigError("a batch of one has no in-batch negatives")
    if n_negatives is not None and not 1 <= n_negatives <= batch - 1 and not allow_degenerate:
        raise TrainConfigError(f"n_negatives must be in [1, {batch - 1}]")
    losses = []
    weights = []
    diag = np.arange(batch)
    for k, pred in enumerate(predictions, start=1):
        n = steps - k
        if n < 1:
            continue
        p = tc.transpose(pred[:, :n, :], (1, 0, 2))  # (n, B, D)
        z = tc.transpose(targets[:, k:, :], (1, 2, 0))  # (n, D, B)
        scores = tc.matmul(p, z)  # (n, B, B)
        if n_negatives is not None and n_negatives < batch - 1:
            rng = rng if rng is not None else np.random.default_rng(0)
            mask = np.full((batch, batch), -1e30)
            for b in range(batch):
                others = np.delete(diag, b)
                mask[b, rng.choice(others, n_negatives, replace=False)] = 0.0
                mask[b, b] = 0.0
            scores = tc.add(scores, Tensor(mask))
        lp = tc.log_softmax(scores, axis=-1)
        losses.append(tc.scale(tc.tsum(lp[:, diag, diag]), -1.0))
        weights.append(n * batch)
    if not losses:
        raise TrainConfigError("no valid (t, k) pairs: clips are shorter than the horizon")
    total = losses[0]
    for extra in losses[1:]:
        total = tc.add(total, extra)
    return tc.scale(total, 1.0 / sum(weights))


# ---------------------------------------------------------------- optimiser


def adam_update(params: dict, grads: dict, moments: dict, lr: float, step: int, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place bias-corrected Adam step; ``step`` counts from 1."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m, v = moments.setdefault(name, (np.zeros_like(p), np.zeros_like(p)))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------- loop


@dataclass
class TrainState:
    step: int
    params: dict
    moments: dict
    rng_state: dict
    losses: list

    def save(self, path) -> None:
        arrays = {f"p:{k}": v for k, v in self.params.items()}
        for k, (m, v) in self.moments.items():
            arrays[f"m:{k}"] = m
            arrays[f"v:{k}"] = v
        meta = {"step": self.step, "rng_state": self.rng_state}
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        arrays["__losses__"] = np.asarray(self.losses, dtype=np.float64)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "TrainState":
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            params, m, v = {}, {}, {}
            for key in z.files:
                kind, _, name = key.partition(":")
                if kind == "p":
                    params[name] = z[key].copy()
                elif kind == "m":
                    m[name] = z[key].copy()
                elif kind == "v":
                    v[name] = z[key].copy()
            losses = z["__losses__"].tolist()
        moments = {k: (m[k], v[k]) for k in m}
        return cls(meta["step"], params, moments, meta["rng_state"], losses)


class Trainer:
    """Stateful training loop over a pretraining corpus of (Waveform, LipTrack) pairs."""

    def __init__(self, config: TrainConfig, corpus, noise_bank: NoiseBank | None = None, model: CpcModel | None = None):
        if config.snr_db is not None and noise_bank is None:
            raise TrainConfigError("snr_db is set but no noise bank was given")
        self.config = config
        self.corpus = [(w, l) for w, l in corpus]
        self.noise_bank = noise_bank
        tc.set_precision(config.precision)
        self.model = model or CpcModel(config.model_config(), seed=config.seed)
        self.horizon = config.horizon or self.model.config.horizon
        self.rng = np.random.default_rng(config.seed)
        self.moments: dict = {}
        self.step = 0
        self.losses: list[float] = []
        stride = self.model.config.total_stride
        self.clip_samples = config.clip_frames * stride
        usable = [i for i, (w, _) in enumerate(self.corpus) if len(w) >= self.clip_samples]
        if len(usable) < 2:
            raise TrainConfigError("fewer than two pretraining utterances are long enough for a clip")
        self.usable = usable

    # state round trip ------------------------------------------------

    def state(self) -> TrainState:
        return TrainState(
            self.step,
            {k: t.data.copy() for k, t in self.model.params.items()},
            {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
            self.rng.bit_generator.state,
            list(self.losses),
        )

    def restore(self, state: TrainState) -> None:
        for k, arr in state.params.items():
            self.model.params[k].data[...] = arr
        self.moments = {k: (m.copy(), v.copy()) for k, (m, v) in state.moments.items()}
        self.rng.bit_generator.state = state.rng_state
        self.step = state.step
        self.losses = list(state.losses)

    # batches ---------------------------------------------------------

    def sample_batch(self) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        idx = self.rng.choice(self.usable, cfg.batch_size, replace=len(self.usable) < cfg.batch_size)
        stride = self.model.config.total_stride
        lip_frames = cfg.clip_frames // 4
        audio, lips = [], []
        for i in idx:
            w, l = self.corpus[i]
            n_frames = len(w) // stride
            start = int(self.rng.integers(0, (n_frames - cfg.clip_frames) // 4 + 1)) * 4
            clip = Waveform(w.samples[start * stride : (start + cfg.clip_frames) * stride], w.sample_rate)
            clip = peak_normalize(clip)
            if cfg.snr_db is not None and self.rng.random() < cfg.noise_prob:
                clip = mix_at_snr(clip, self.noise_bank, cfg.snr_db, self.rng)
            lip = l.frames[start // 4 : start // 4 + lip_frames]
            if len(lip) < lip_frames:
                lip = np.concatenate([lip, np.repeat(lip[-1:], lip_frames - len(lip), axis=0)])
            audio.append(clip.samples)
            lips.append(lip)
        return np.stack(audio), np.stack(lips)

    def loss(self, audio, lips) -> Tensor:
        z, c = self.model.forward(audio, lips, rng=self.rng, dropout=True)
        preds = self.model.predict_future(c, self.horizon)
        return info_nce_loss(preds, z, self.config.n_negatives, self.rng)

    # loop ------------------------------------------------------------

    def train_step(self) -> float:
        audio, lips = self.sample_batch()
        self.model.zero_grad()
        loss = self.loss(audio, lips)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {self.step + 1}")
        loss.backward()
        params = {k: t.data for k, t in self.model.params.items()}
        grads = {k: t.grad for k, t in self.model.params.items() if t.grad is not None}
        adam_update(params, grads, self.moments, self.config.learning_rate, self.step + 1)
        self.step += 1
        self.losses.append(value)
        return value

    def run(self, until: int | None = None, out_dir=None) -> list[float]:
        """Train up to step ``until`` (default: ``config.steps``).

        With ``out_dir``, periodic checkpoints and train states are written,
        and on a numeric abort the last good state is saved before re-raising.
        """
        until = self.config.steps if until is None else until
        out = Path(out_dir) if out_dir is not None else None
        while self.step < until:
            try:
                self.train_step()
            except NumericError:
                # a failed step raises before touching parameters or moments
                if out is not None:
                    self.save(out, tag="last_good")
                raise
            every = self.config.checkpoint_every
            if out is not None and every and self.step % every == 0:
                self.save(out, tag=f"step{self.step:07d}")
            if self.step % 100 == 0:
                log.info("step %d loss %.4f", self.step, float(np.mean(self.losses[-100:])))
        return self.losses

    def save(self, out_dir, tag: str = "final") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / f"model_{tag}.ckpt"
        save_checkpoint(ckpt, self.model, {"step": self.step, "train_config": self.config.to_dict()})
        self.state().save(out / f"state_{tag}.npz")
        write_loss_curve(out / "loss.csv", self.losses)
        return ckpt


def write_loss_curve(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


def train(config: TrainConfig, corpus, noise_bank: NoiseBank | None = None, out_dir=None) -> tuple[CpcModel, list[float]]:
    """Train a fresh model; returns the model and its per-step loss curve."""
    trainer = Trainer(config, corpus, noise_bank)
    losses = trainer.run(out_dir=out_dir)
    if out_dir is not None:
        trainer.save(out_dir)
    return trainer.model, losses
