"""Audiovisual contrastive predictive coding network.

Waveform -> strided conv stack ─┐
                                ├─ concat -> width-1 conv (fusion) -> z
Lip track -> conv -> resample ──┘
z + sinusoidal positions -> causal transformer layer -> c (context)
c -> transformer layer -> K linear heads -> predictions of z[t + k]
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import InsufficientLengthError, Tensor

__all__ = [
    "ModelConfig",
    "CpcModel",
    "AlignmentError",
    "CheckpointError",
    "sinusoidal_positions",
    "interpolation_matrix",
    "save_checkpoint",
    "load_checkpoint",
]

REPRESENTATIONS = ("encoder", "fusion", "context")


class AlignmentError(ValueError):
    """Audio and visual streams disagree in length."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


@dataclass
class ModelConfig:
    embed_dim: int = 64
    audio_channels: int = 32
    # (kernel width, stride) per audio conv layer; strides multiply to 160 samples per frame
    audio_layers: list = field(default_factory=lambda: [[10, 5], [8, 4], [4, 4], [4, 2]])
    lip_dim: int = 2
    visual_width: int = 3
    heads: int = 4
    ffn_mult: int = 4
    horizon: int = 6
    modality_dropout_p: float = 0.5
    representation: str = "context"
    precision: str = "64"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not 0.0 <= self.modality_dropout_p <= 1.0:
            raise ValueError("modality_dropout_p must lie in [0, 1]")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")
        self.audio_layers = [list(map(int, layer)) for layer in self.audio_layers]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def total_stride(self) -> int:
        return math.prod(s for _, s in self.audio_layers)

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for width, stride in self.audio_layers:
            rf += (width - 1) * jump
            jump *= stride
        return rf


def sinusoidal_positions(steps: int, dim: int) -> np.ndarray:
    pos = np.arange(steps)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((steps, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def interpolation_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation with aligned end points, as an ``(n_out, n_in)`` matrix."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


class CpcModel:
    """Parameters plus the forward passes of the audiovisual CPC network.

    Inputs are batched: waveforms ``(B, N)`` and lip tracks ``(B, L, lip_dim)``.
    Single :class:`~mcgurklab.signal.Waveform` / ``LipTrack`` objects are also
    accepted and treated as a batch of one.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, params: dict | None = None):
        self.config = config or ModelConfig()
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params: dict[str, Tensor] = params

    def _init_params(self, rng: np.random.Generator) -> dict:
        cfg = self.config
        d = cfg.embed_dim

        def w(*shape, fan_in):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape), requires_grad=True)

        def b(n, spread=0.0):
            return Tensor(rng.normal(0.0, spread, n) if spread else np.zeros(n), requires_grad=True)

        p = {}
        cin = 1
        for i, (width, _) in enumerate(cfg.audio_layers):
            cout = d if i == len(cfg.audio_layers) - 1 else cfg.audio_channels
            p[f"audio.conv{i}.w"] = w(width, cin, cout, fan_in=width * cin)
            p[f"audio.conv{i}.b"] = b(cout, 0.1)
            cin = cout
        p["audio.ln.g"] = Tensor(np.ones(d), requires_grad=True)
        p["audio.ln.b"] = b(d)
        p["visual.conv.w"] = w(cfg.visual_width, cfg.lip_dim, d, fan_in=cfg.visual_width * cfg.lip_dim)
        p["visual.conv.b"] = b(d, 0.1)
        p["fuse.w"] = w(2 * d, d, fan_in=2 * d)
        p["fuse.b"] = b(d, 0.1)
        p.update(tc.init_attention_params(d, cfg.heads, cfg.ffn_mult, rng, prefix="context."))
        p.update(tc.init_attention_params(d, cfg.heads, cfg.ffn_mult, rng, prefix="predictor."))
        # small heads keep untrained scores near-exchangeable (loss ~ ln(candidates))
        for k in range(1, cfg.horizon + 1):
            p[f"head{k}.w"] = Tensor(rng.normal(0.0, 0.02 / math.sqrt(d), (d, d)), requires_grad=True)
            p[f"head{k}.b"] = b(d)
        return p

    # ------------------------------------------------------------ plumbing

    @property
    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, precision) -> "CpcModel":
        """Copy of the model with parameters cast under the given precision."""
        with tc.precision(precision):
            params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        cfg = ModelConfig.from_dict({**self.config.to_dict(), "precision": str(precision)})
        return CpcModel(cfg, params=params)

    @staticmethod
    def _audio_batch(w) -> np.ndarray:
        if hasattr(w, "samples"):
            return w.samples[None, :]
        arr = np.asarray(w, dtype=np.float64)
        return arr[None, :] if arr.ndim == 1 else arr

    @staticmethod
    def _lip_batch(lips) -> np.ndarray:
        if hasattr(lips, "frames"):
            return lips.frames[None]
        arr = np.asarray(lips, dtype=np.float64)
        return arr[None] if arr.ndim == 2 else arr

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.config.total_stride

    # ------------------------------------------------------------ encoders

    def encode_audio(self, w) -> Tensor:
        """``(B, N)`` samples to ``(B, N // stride, D)`` frames."""
        cfg = self.config
        x = self._audio_batch(w)
        n = x.shape[-1]
        rf, stride = cfg.receptive_field, cfg.total_stride
        if n < rf:
            raise InsufficientLengthError(f"{n} samples is shorter than the receptive field ({rf})")
        pad = rf - stride
        left = pad // 2
        x = np.pad(x, ((0, 0), (left, pad - left)))
        h = Tensor(x[..., None])
        for i, (_, s) in enumerate(cfg.audio_layers):
            h = tc.gelu(tc.conv1d(h, self.params[f"audio.conv{i}.w"], s, self.params[f"audio.conv{i}.b"]))
        return tc.layer_norm(h, self.params["audio.ln.g"], self.params["audio.ln.b"])

    def encode_visual(self, lips, target_len: int) -> Tensor:
        """Lip frames through a same-padded conv, resampled to ``target_len`` frames."""
        cfg = self.config
        x = self._lip_batch(lips)
        half = cfg.visual_width // 2
        x = np.pad(x, ((0, 0), (half, cfg.visual_width - 1 - half), (0, 0)))
        h = tc.gelu(tc.conv1d(Tensor(x), self.params["visual.conv.w"], 1, self.params["visual.conv.b"]))
        n_in = h.shape[-2]
        if n_in == target_len:
            return h
        m = interpolation_matrix(target_len, n_in)
        return tc.matmul(Tensor(np.broadcast_to(m, (h.shape[0],) + m.shape)), h)

    def modality_dropout(self, a: Tensor, v: Tensor, p: float, rng: np.random.Generator):
        """Zero one whole modality per clip with probability ``p``.

        Returns ``(a, v, dropped)`` where ``dropped[b]`` is ``"audio"``,
        ``"visual"`` or ``None``.
        """
        if a.shape != v.shape:
            raise AlignmentError(f"modality shapes differ: {a.shape} vs {v.shape}")
        batch = a.shape[0]
        drop = rng.random(batch) < p
        which_audio = rng.random(batch) < 0.5
        dropped = [None if not d else ("audio" if wa else "visual") for d, wa in zip(drop, which_audio)]
        if not drop.any():
            return a, v, dropped
        keep_a = np.array([0.0 if d == "audio" else 1.0 for d in dropped])[:, None, None]
        keep_v = np.array([0.0 if d == "visual" else 1.0 for d in dropped])[:, None, None]
        a = tc.mul(a, Tensor(np.broadcast_to(keep_a, a.shape)))
        v = tc.mul(v, Tensor(np.broadcast_to(keep_v, v.shape)))
        return a, v, dropped

    def fuse_preactivation(self, a: Tensor, v: Tensor) -> Tensor:
        if a.shape != v.shape:
            raise AlignmentError(f"cannot fuse streams of shapes {a.shape} and {v.shape}")
        return tc.add(tc.matmul(tc.concat([a, v], axis=-1), self.params["fuse.w"]), self.params["fuse.b"])

    def fuse(self, a: Tensor, v: Tensor) -> Tensor:
        return tc.gelu(self.fuse_preactivation(a, v))

    def context(self, z: Tensor) -> Tensor:
        steps, dim = z.shape[-2:]
        x = tc.add(z, Tensor(sinusoidal_positions(steps, dim)))
        return tc.attention_block(x, self.params, self.config.heads, causal=True, prefix="context.")

    def predict_future(self, c: Tensor, horizon: int | None = None) -> list[Tensor]:
        """One ``(B, T, D)`` prediction per step ahead; entry ``k - 1`` targets ``z[t + k]``."""
        k_max = horizon or self.config.horizon
        if k_max > self.config.horizon:
            raise ValueError(f"model has only {self.config.horizon} prediction heads")
        if c.shape[-2] <= k_max:
            raise InsufficientLengthError(f"need more than {k_max} frames to predict {k_max} steps ahead")
        h = tc.attention_block(c, self.params, self.config.heads, causal=False, prefix="predictor.")
        return [
            tc.add(tc.matmul(h, self.params[f"head{k}.w"]), self.params[f"head{k}.b"])
            for k in range(1, k_max + 1)
        ]

    # ------------------------------------------------------------ full passes

    def forward(self, audio, lips, rng=None, dropout: bool = False, dropout_p: float | None = None):
        """Encoder output ``z`` and context ``c`` for a batch."""
        a = self.encode_audio(audio)
        v = self.encode_visual(lips, a.shape[-2])
        if dropout:
            p = self.config.modality_dropout_p if dropout_p is None else dropout_p
            a, v, _ = self.modality_dropout(a, v, p, rng)
        z = self.fuse(a, v)
        return z, self.context(z)

    def embed(self, audio, lips, representation: str | None = None) -> np.ndarray:
        """Evaluation embeddings ``(B, T, D)`` without dropout or gradient tracking."""
        rep = representation or self.config.representation
        a = self.encode_audio(audio)
        if rep == "encoder":
            return a.data
        v = self.encode_visual(lips, a.shape[-2])
        z = self.fuse(a, v)
        if rep == "fusion":
            return z.data
        return self.context(z).data

    def embed_stimulus(self, rec, mode: str = "audiovisual", representation: str | None = None) -> np.ndarray:
        """``(T, D)`` embedding of one stimulus record."""
        if mode not in ("audiovisual", "audio_only"):
            raise ValueError("mode must be 'audiovisual' or 'audio_only'")
        lips = rec.liptrack.frames
        if mode == "audio_only":
            lips = np.zeros_like(lips)
        return self.embed(rec.waveform.samples, lips, representation)[0]

    def embed_records(self, records, mode: str = "audiovisual", representation: str | None = None, batch_size: int = 64) -> list:
        """Embed many records, batching those of equal length."""
        groups: dict = {}
        for i, r in enumerate(records):
            groups.setdefault((len(r.waveform), len(r.liptrack)), []).append(i)
        out: list = [None] * len(records)
        for idx in groups.values():
            for lo in range(0, len(idx), batch_size):
                chunk = idx[lo : lo + batch_size]
                audio = np.stack([records[i].waveform.samples for i in chunk])
                lips = np.stack([records[i].liptrack.frames for i in chunk])
                if mode == "audio_only":
                    lips = np.zeros_like(lips)
                emb = self.embed(audio, lips, representation)
                for j, i in enumerate(chunk):
                    out[i] = emb[j]
        return out


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MCGCPCv\x00"
FORMAT_VERSION = 1


def save_checkpoint(path, model: CpcModel, metadata: dict | None = None) -> None:
    """Write config and parameters; parameter blocks are little-endian float32.

    Layout: magic, u32 version, u32 header length, JSON header, u32 block
    count, then per block: u16 name length, name, u8 ndim, u32 extents,
    float32 data.
    """
    header = {
        "config": model.config.to_dict(),
        "parameter_count": model.parameter_count,
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        data = model.params[name].data
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[CpcModel, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off += 8
    header = json.loads(raw[off : off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        params[name] = Tensor(arr.astype(tc.get_dtype()), requires_grad=True)
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    model = CpcModel(ModelConfig.from_dict(header["config"]), params=params)
    if model.parameter_count != header["parameter_count"]:
        raise CheckpointError(f"{path}: parameter count mismatch")
    return model, header.get("metadata", {})
