"""Denoising-diffusion machinery.

Provides the variance schedule and forward noising, a small MLP teacher
denoiser (trained to predict the added noise), ancestral sampling for
producing distillation pairs, the clean-prediction reverse update used by
the iterative optical sampler, and the pairs file format.

The reverse update here re-noises the predicted clean sample to the
marginal of the earlier timestep (x0-parameterized update with fresh
noise); the variance follows the forward-process marginal.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Parameter, adamw_step
from .errors import (
    DimensionError,
    FormatError,
    IntegrityError,
    NumericalError,
    TruncationError,
)
from .models import timestep_embedding
from .rng import RngStream

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "q_sample",
    "reverse_update",
    "TeacherDenoiser",
    "teacher_train",
    "teacher_sample",
    "PairSet",
    "export_pairs",
    "import_pairs",
]

PAIRS_MAGIC = b"OGPAIR01"


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed by timestep t in [0, T]; alpha_bar[0] == 1 exactly."""

    T: int
    beta: np.ndarray  # beta[0] = 0 by convention, beta[1..T] in (0, 1)
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[self.T] >= 0.05:
            raise ValueError(
                f"schedule leaves too much signal at T: alpha_bar[T]={self.alpha_bar[self.T]}"
            )


def build_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative-product signal retention."""
    if T < 2:
        raise ValueError(f"need at least 2 timesteps, got {T}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError(f"invalid beta range ({beta_1}, {beta_T})")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_1, beta_T, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar[0] = 1.0
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _coef(values: np.ndarray, t, like: np.ndarray) -> np.ndarray:
    """Per-sample scalar coefficients broadcast against image batches."""
    c = np.asarray(values)[np.asarray(t, dtype=np.int64)]
    extra = like.ndim - np.ndim(c)
    return c.reshape(np.shape(c) + (1,) * extra)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"q_sample: x0 {x0.shape} vs eps {eps.shape}")
    ab = _coef(schedule.alpha_bar, t, x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_update(j0_hat: np.ndarray, t: int, t_prev: int, eps: np.ndarray | None,
                   schedule: NoiseSchedule) -> np.ndarray:
    """Jump from a clean prediction at step t to the marginal at t_prev.

    t_prev = 0 returns the prediction exactly (no noise is added because
    alpha_bar[0] = 1).
    """
    if not 0 <= t_prev < t <= schedule.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    j0_hat = np.asarray(j0_hat)
    if t_prev == 0:
        return j0_hat.copy()
    ab = schedule.alpha_bar[t_prev]
    noise = 0.0 if eps is None else np.asarray(eps)
    return np.sqrt(ab) * j0_hat + np.sqrt(1.0 - ab) * noise


class TeacherDenoiser:
    """MLP noise predictor: (x_t, sinusoidal t-embedding, optional class
    embedding) -> estimated eps.  Smooth activations keep the score field
    well behaved."""

    kind = "teacher"

    def __init__(self, pixels: int = 784, widths: tuple[int, ...] = (512, 512, 512),
                 t_embed: int = 32, class_count: int = 10, embed_dim: int = 16,
                 rng_seed: int = 0, precision: str = "f32"):
        self.pixels = pixels
        self.widths = tuple(widths)
        self.t_embed = t_embed
        self.class_count = class_count
        self.embed_dim = embed_dim
        self.rng_seed = rng_seed
        self.precision = precision
        dtype = np.float64 if precision == "f64" else np.float32
        rng = RngStream("teacher-init", rng_seed)
        in_dim = pixels + t_embed + (embed_dim if class_count else 0)
        dims = [in_dim, *self.widths, pixels]
        self.weights, self.biases = [], []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            # near-zero output head: the untrained net predicts ~0 noise
            std = 0.01 * np.sqrt(1.0 / dims[i]) if last else np.sqrt(2.0 / dims[i])
            w = (std * rng.child(f"W{i}").normal((dims[i], dims[i + 1]))).astype(dtype)
            self.weights.append(Parameter(f"mlp.W{i}", w))
            self.biases.append(Parameter(f"mlp.b{i}", np.zeros(dims[i + 1], dtype=dtype)))
        self.class_embed = None
        if class_count:
            e = 0.5 * rng.child("embed").normal((class_count, embed_dim))
            self.class_embed = Parameter("embed", e.astype(dtype))
        self._graphs = {}

    @property
    def parameters(self) -> list[Parameter]:
        params = [p for pair in zip(self.weights, self.biases) for p in pair]
        if self.class_embed is not None:
            params.append(self.class_embed)
        return params

    def _features(self, x_t: np.ndarray, t) -> np.ndarray:
        b = x_t.shape[0]
        temb = timestep_embedding(np.broadcast_to(np.atleast_1d(t), (b,)), self.t_embed)
        dtype = self.weights[0].data.dtype
        return np.concatenate([x_t.reshape(b, -1), temb], axis=1).astype(dtype)

    def build_graph(self, batch: int, train: bool):
        key = (batch, train)
        if key in self._graphs:
            return self._graphs[key]
        g = Graph(self.precision)
        x = g.input("x")
        if self.class_count:
            x = g.concat(x, g.embed(g.parameter(self.class_embed), g.input("labels")))
        h = x
        for i in range(len(self.weights) - 1):
            h = g.act(g.fc(h, g.parameter(self.weights[i]), g.parameter(self.biases[i])),
                      "silu")
        out = g.fc(h, g.parameter(self.weights[-1]), g.parameter(self.biases[-1]))
        handles = {"graph": g, "eps": out}
        if train:
            handles["loss"] = g.mse(out, g.input("target"))
        self._graphs[key] = handles
        return handles

    def predict_eps(self, x_t: np.ndarray, t, labels=None) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t))
        h = self.build_graph(x_t.shape[0], train=False)
        feeds = {"x": self._features(x_t, t)}
        if self.class_count:
            if labels is None:
                raise ValueError("conditional teacher requires labels")
            feeds["labels"] = np.broadcast_to(np.atleast_1d(labels), (x_t.shape[0],))
        h["graph"].forward(feeds)
        return h["eps"].value.copy()

    def config_dict(self) -> dict:
        return {
            "kind": self.kind, "pixels": self.pixels, "widths": list(self.widths),
            "t_embed": self.t_embed, "class_count": self.class_count,
            "embed_dim": self.embed_dim, "rng_seed": self.rng_seed,
            "precision": self.precision,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "TeacherDenoiser":
        cfg = dict(cfg)
        cfg.pop("kind", None)
        cfg["widths"] = tuple(cfg["widths"])
        return cls(**cfg)


def teacher_train(
    dataset: tuple[np.ndarray, np.ndarray | None],
    schedule: NoiseSchedule,
    epochs: int,
    widths: tuple[int, ...] = (512, 512, 512),
    batch: int = 128,
    lr: float = 1e-3,
    weight_decay: float = 1e-6,
    rng_seed: int = 0,
    precision: str = "f32",
    log=None,
) -> tuple[TeacherDenoiser, list[float]]:
    """Train an MLP denoiser on images in [0, 1] (normalized to [-1, 1]
    internally) by minimizing ||eps - eps_hat||^2 over random (x0, t, eps).

    Returns the trained denoiser and per-epoch mean losses.
    """
    images, labels = dataset
    images = np.asarray(images)
    n = images.shape[0]
    pixels = int(np.prod(images.shape[1:]))
    x0_all = (2.0 * images.reshape(n, pixels) - 1.0)
    class_count = 0 if labels is None else int(np.max(labels)) + 1
    teacher = TeacherDenoiser(pixels=pixels, widths=widths, class_count=class_count,
                              rng_seed=rng_seed, precision=precision)
    handles = teacher.build_graph(batch, train=True)
    g = handles["graph"]
    rng = RngStream("teacher-train", rng_seed)
    steps = max(1, n // batch)
    epoch_losses = []
    for epoch in range(epochs):
        order = rng.child(f"shuffle{epoch}").permutation(n)
        total = 0.0
        for s in range(steps):
            idx = order[s * batch : (s + 1) * batch]
            if idx.size < batch:
                continue
            x0 = x0_all[idx]
            t = rng.child(f"t{epoch}/{s}").integers(1, schedule.T + 1, batch)
            eps = rng.child(f"eps{epoch}/{s}").normal((batch, pixels))
            x_t = q_sample(x0, t, eps, schedule)
            feeds = {"x": teacher._features(x_t, t),
                     "target": eps.astype(teacher.weights[0].data.dtype)}
            if class_count:
                feeds["labels"] = labels[idx]
            for p in teacher.parameters:
                p.zero_grad()
            g.forward(feeds)
            g.backward(handles["loss"])
            loss = float(handles["loss"].value)
            if not np.isfinite(loss):
                raise NumericalError(f"teacher loss diverged at epoch {epoch} step {s}")
            adamw_step(teacher.parameters, lr=lr, weight_decay=weight_decay)
            total += loss
        epoch_losses.append(total / steps)
        if log:
            log(f"teacher epoch {epoch}: loss {epoch_losses[-1]:.4f}")
    return teacher, epoch_losses


def teacher_sample(
    denoiser: TeacherDenoiser,
    schedule: NoiseSchedule,
    n: int,
    class_label=None,
    rng_seed: int = 0,
    noise_dim: int = 100,
    noise_mode: str = "projected",
    projection_seed: int = 7,
    batch: int = 512,
) -> "PairSet":
    """Ancestral sampling; records the recoverable seed noise per image.

    The snapshot distillation pipeline needs a noise_dim vector per image;
    in 'projected' mode it is a fixed seeded Gaussian random projection of
    the initial draw x_T (preserving the noise -> image correspondence), in
    'fresh' mode an independent draw.  Deterministic per rng_seed; chunking
    into batches does not change the values.
    """
    if noise_mode not in ("projected", "fresh"):
        raise ValueError(f"unknown noise mode {noise_mode!r}")
    pixels = denoiser.pixels
    rng = RngStream("teacher-sample", rng_seed)
    if class_label is None and denoiser.class_count:
        labels = rng.child("labels").integers(0, denoiser.class_count, n)
    elif denoiser.class_count:
        labels = np.full(n, int(class_label), dtype=np.int64)
    else:
        labels = None

    x_t = rng.child("xT").normal((n, pixels))
    x_init = x_t.copy()
    x0_pred = np.zeros_like(x_t)
    for t in range(schedule.T, 0, -1):
        z = rng.child(f"step{t}").normal((n, pixels)) if t > 1 else None
        for a in range(0, n, batch):
            b = min(a + batch, n)
            lab = None if labels is None else labels[a:b]
            eps_hat = denoiser.predict_eps(x_t[a:b], t, lab).astype(np.float64)
            beta_t = schedule.beta[t]
            ab_t = schedule.alpha_bar[t]
            mean = (x_t[a:b] - beta_t / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(
                schedule.alpha[t]
            )
            if t > 1:
                ab_prev = schedule.alpha_bar[t - 1]
                sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta_t)
                x_t[a:b] = mean + sigma * z[a:b]
            else:
                x0_pred[a:b] = mean
    images = ((np.clip(x0_pred, -1.0, 1.0) + 1.0) / 2.0).astype(np.float32)

    if noise_mode == "projected":
        proj = RngStream("pair-projection", projection_seed).normal((pixels, noise_dim))
        noise = (x_init @ proj) / np.sqrt(pixels)
    else:
        noise = rng.child("fresh-noise").normal((n, noise_dim))
    side = int(round(np.sqrt(pixels)))
    return PairSet(
        noise=noise.astype(np.float32),
        labels=None if labels is None else labels.astype(np.uint16),
        images=images.reshape(n, side, side),
    )


# ---------------------------------------------------------------------------
# distillation pairs


@dataclass
class PairSet:
    """Teacher-generated (noise, class, image) triples."""

    noise: np.ndarray  # [n, noise_dim] float32
    labels: np.ndarray | None  # [n] uint16 or None
    images: np.ndarray  # [n, h, w] float32 in [0, 1]

    def __post_init__(self):
        self.noise = np.ascontiguousarray(self.noise, dtype=np.float32)
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.noise.shape[0] != self.images.shape[0]:
            raise DimensionError("noise and image counts disagree")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pair images must lie in [0, 1]")

    @property
    def count(self) -> int:
        return self.noise.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.noise.shape[1]

    def data_hash(self) -> str:
        return hashlib.sha256(self._payload()).hexdigest()

    def _record_dtype(self) -> np.dtype:
        h, w = self.images.shape[1:]
        fields = [("noise", "<f4", (self.noise_dim,))]
        if self.labels is not None:
            fields.append(("label", "<u2"))
        fields.append(("image", "<f4", (h * w,)))
        return np.dtype(fields)

    def _payload(self) -> bytes:
        import struct

        h, w = self.images.shape[1:]
        head = PAIRS_MAGIC + struct.pack(
            "<IIIIB", self.count, self.noise_dim, h, w, 0 if self.labels is None else 1
        )
        rec = np.zeros(self.count, dtype=self._record_dtype())
        rec["noise"] = self.noise
        if self.labels is not None:
            rec["label"] = self.labels
        rec["image"] = self.images.reshape(self.count, h * w)
        return head + rec.tobytes()

    def subset(self, idx) -> "PairSet":
        return PairSet(
            noise=self.noise[idx],
            labels=None if self.labels is None else self.labels[idx],
            images=self.images[idx],
        )


def export_pairs(pairs: PairSet, path) -> None:
    payload = pairs._payload()
    digest = hashlib.sha256(payload).digest()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
        f.write(digest)
    import os

    os.replace(tmp, path)


def import_pairs(path) -> PairSet:
    import struct

    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 21 + 32:
        raise TruncationError(f"pairs file too short: {len(blob)} bytes")
    if blob[:8] != PAIRS_MAGIC:
        raise FormatError(f"bad pairs magic {blob[:8]!r}, expected {PAIRS_MAGIC!r}")
    count, noise_dim, h, w, has_labels = struct.unpack("<IIIIB", blob[8:25])
    record = 4 * noise_dim + (2 if has_labels else 0) + 4 * h * w
    expected = 25 + count * record + 32
    if len(blob) != expected:
        raise TruncationError(
            f"pairs file has {len(blob)} bytes, expected {expected} "
            f"({count} records of {record} bytes)"
        )
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError("pairs file hash mismatch")
    fields = [("noise", "<f4", (noise_dim,))]
    if has_labels:
        fields.append(("label", "<u2"))
    fields.append(("image", "<f4", (h * w,)))
    rec = np.frombuffer(payload[25:], dtype=np.dtype(fields), count=count)
    return PairSet(
        noise=rec["noise"].copy(),
        labels=rec["label"].copy() if has_labels else None,
        images=rec["image"].reshape(count, h, w).copy(),
    )
