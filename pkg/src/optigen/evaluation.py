"""Evaluation harness: probe classifiers, proxy metrics, and audits.

The probe classifier's 64-wide penultimate layer is the feature space for
the Frechet distance, substituting for a large pretrained vision network;
every metric value is therefore a "proxy-" value and is reported with the
probe's identity hash and a banner saying the numbers are not comparable
to pretrained-feature scores.  Metrics refuse to run when the probe has
not passed its accuracy gate.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Parameter, adamw_step
from .errors import GateError, NumericalError
from .rng import RngStream

__all__ = [
    "ProbeClassifier",
    "BinaryDigitProbes",
    "MetricReport",
    "PROXY_BANNER",
    "proxy_fid",
    "fid_from_features",
    "fid_from_stats",
    "proxy_is",
    "is_from_posteriors",
    "welch_t_test",
    "betainc_reg",
    "binary_digit_audit",
    "interpolate_latent",
    "FailureRule",
    "calibrate_failure_rule",
    "failure_rate",
]

PROXY_BANNER = "proxy feature space -- not comparable to Inception-based values"
PROBE_GATE_ACCURACY = 0.95
COV_REG = 1e-6


# ---------------------------------------------------------------------------
# probe classifiers


class ProbeClassifier:
    """Small MLP digit classifier (pixels -> 256 -> 64 -> classes).

    Metrics are only trustworthy above the accuracy gate; `require_gate`
    raises below it.
    """

    kind = "probe"

    def __init__(self, pixels: int = 784, classes: int = 10, rng_seed: int = 0,
                 precision: str = "f64"):
        self.pixels = pixels
        self.classes = classes
        self.rng_seed = rng_seed
        self.precision = precision
        self.test_accuracy = 0.0
        dtype = np.float64 if precision == "f64" else np.float32
        rng = RngStream("probe-init", rng_seed)
        dims = [pixels, 256, 64, classes]
        self.weights, self.biases = [], []
        for i in range(3):
            std = np.sqrt(2.0 / dims[i])
            w = (std * rng.child(f"W{i}").normal((dims[i], dims[i + 1]))).astype(dtype)
            self.weights.append(Parameter(f"probe.W{i}", w))
            self.biases.append(Parameter(f"probe.b{i}", np.zeros(dims[i + 1], dtype=dtype)))
        self._graphs = {}

    @property
    def parameters(self) -> list[Parameter]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def _forward_arrays(self, images: np.ndarray):
        x = np.asarray(images).reshape(len(images), -1)
        x = x.astype(self.weights[0].data.dtype)
        h1 = _lrelu(x @ self.weights[0].data + self.biases[0].data)
        h2 = _lrelu(h1 @ self.weights[1].data + self.biases[1].data)
        logits = h2 @ self.weights[2].data + self.biases[2].data
        return h2, logits

    def features(self, images: np.ndarray) -> np.ndarray:
        """Penultimate 64-wide activations."""
        return self._forward_arrays(images)[0].astype(np.float64)

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        _, logits = self._forward_arrays(images)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=1, keepdims=True)).astype(np.float64)

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        pred = self.predict_proba(images).argmax(axis=1)
        return float((pred == np.asarray(labels)).mean())

    def train(self, train_x, train_y, test_x, test_y, epochs: int = 40,
              batch: int = 128, lr: float = 1e-3, weight_decay: float = 1e-5,
              augment: bool = True, log=None) -> "ProbeClassifier":
        g = Graph(self.precision)
        x = g.input("x")
        h = x
        for i in range(2):
            h = g.act(g.fc(h, g.parameter(self.weights[i]), g.parameter(self.biases[i])),
                      "leaky_relu")
        logits = g.fc(h, g.parameter(self.weights[2]), g.parameter(self.biases[2]))
        loss = g.softmax_xent(logits, g.input("labels"))
        rng = RngStream("probe-train", self.rng_seed)
        n = len(train_x)
        train_x = np.asarray(train_x)
        dtype = self.weights[0].data.dtype
        for epoch in range(epochs):
            imgs = (_augment_shifts(train_x, rng.child(f"aug{epoch}"))
                    if augment and train_x.ndim == 3 else train_x)
            flat = imgs.reshape(n, -1).astype(dtype)
            order = rng.child(f"shuffle{epoch}").permutation(n)
            for s in range(n // batch):
                idx = order[s * batch : (s + 1) * batch]
                for p in self.parameters:
                    p.zero_grad()
                g.forward({"x": flat[idx], "labels": np.asarray(train_y)[idx]})
                g.backward(loss)
                if not np.isfinite(loss.value):
                    raise NumericalError(f"probe loss diverged at epoch {epoch}")
                adamw_step(self.parameters, lr=lr, weight_decay=weight_decay)
            if log:
                log(f"probe epoch {epoch}: loss {float(loss.value):.4f}")
        self.test_accuracy = self.accuracy(test_x, test_y)
        return self

    def require_gate(self):
        if self.test_accuracy < PROBE_GATE_ACCURACY:
            raise GateError(
                f"probe test accuracy {self.test_accuracy:.3f} below the "
                f"{PROBE_GATE_ACCURACY:.2f} gate; metrics refused"
            )

    def identity_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters:
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def config_dict(self) -> dict:
        return {"kind": self.kind, "pixels": self.pixels, "classes": self.classes,
                "rng_seed": self.rng_seed, "precision": self.precision,
                "test_accuracy": self.test_accuracy}

    @classmethod
    def from_config(cls, cfg: dict) -> "ProbeClassifier":
        probe = cls(pixels=cfg["pixels"], classes=cfg["classes"],
                    rng_seed=cfg["rng_seed"], precision=cfg["precision"])
        probe.test_accuracy = cfg.get("test_accuracy", 0.0)
        return probe


class BinaryDigitProbes:
    """One binary MLP per class (positive class vs rest), for the
    per-digit recognition audit."""

    kind = "binary-probe"

    def __init__(self, pixels: int = 784, classes: int = 10, hidden: int = 128,
                 rng_seed: int = 0, precision: str = "f64"):
        self.pixels = pixels
        self.classes = classes
        self.hidden = hidden
        self.rng_seed = rng_seed
        self.precision = precision
        self.holdout_recall = np.zeros(classes)
        self.trained = False
        dtype = np.float64 if precision == "f64" else np.float32
        rng = RngStream("binary-init", rng_seed)
        self.weights, self.biases = [], []
        for c in range(classes):
            w1 = (np.sqrt(2.0 / pixels) * rng.child(f"c{c}/W0").normal((pixels, hidden)))
            w2 = (np.sqrt(1.0 / hidden) * rng.child(f"c{c}/W1").normal((hidden, 1)))
            self.weights.append([Parameter(f"bin{c}.W0", w1.astype(dtype)),
                                 Parameter(f"bin{c}.W1", w2.astype(dtype))])
            self.biases.append([Parameter(f"bin{c}.b0", np.zeros(hidden, dtype=dtype)),
                                Parameter(f"bin{c}.b1", np.zeros(1, dtype=dtype))])

    @property
    def parameters(self) -> list[Parameter]:
        out = []
        for c in range(self.classes):
            out += self.weights[c] + self.biases[c]
        return out

    def confidence(self, images: np.ndarray, cls: int) -> np.ndarray:
        x = np.asarray(images).reshape(len(images), -1)
        x = x.astype(self.weights[cls][0].data.dtype)
        h = _lrelu(x @ self.weights[cls][0].data + self.biases[cls][0].data)
        logits = (h @ self.weights[cls][1].data + self.biases[cls][1].data)[:, 0]
        return _sigmoid_np(logits.astype(np.float64))

    def train(self, train_x, train_y, test_x, test_y, epochs: int = 12,
              batch: int = 128, lr: float = 1e-3, augment: bool = True,
              log=None) -> "BinaryDigitProbes":
        train_y = np.asarray(train_y)
        train_x = np.asarray(train_x)
        rng = RngStream("binary-train", self.rng_seed)
        for c in range(self.classes):
            params = self.weights[c] + self.biases[c]
            g = Graph(self.precision)
            x = g.input("x")
            h = g.act(g.fc(x, g.parameter(self.weights[c][0]),
                           g.parameter(self.biases[c][0])), "leaky_relu")
            logits = g.reshape(g.fc(h, g.parameter(self.weights[c][1]),
                                    g.parameter(self.biases[c][1])), (-1,))
            loss = g.bce_logits(logits, g.input("t"))
            pos = np.flatnonzero(train_y == c)
            neg = np.flatnonzero(train_y != c)
            dtype = self.weights[c][0].data.dtype
            for epoch in range(epochs):
                # rebalance: as many negatives as positives each epoch
                sel_neg = neg[rng.child(f"c{c}/neg{epoch}").integers(0, len(neg), len(pos))]
                idx = np.concatenate([pos, sel_neg])
                idx = idx[rng.child(f"c{c}/shuf{epoch}").permutation(len(idx))]
                imgs = train_x[idx]
                if augment and imgs.ndim == 3:
                    imgs = _augment_shifts(imgs, rng.child(f"c{c}/aug{epoch}"))
                flat = imgs.reshape(len(idx), -1)
                targets = (train_y[idx] == c).astype(np.float64)
                for s in range(len(idx) // batch):
                    sl = slice(s * batch, (s + 1) * batch)
                    for p in params:
                        p.zero_grad()
                    g.forward({"x": flat[sl].astype(dtype), "t": targets[sl]})
                    g.backward(loss)
                    adamw_step(params, lr=lr, weight_decay=1e-5)
            if log:
                log(f"binary classifier {c} trained")
        test_y = np.asarray(test_y)
        for c in range(self.classes):
            mask = test_y == c
            if mask.any():
                conf = self.confidence(np.asarray(test_x)[mask], c)
                self.holdout_recall[c] = float((conf > 0.5).mean())
        self.trained = True
        return self

    def require_gate(self):
        if not self.trained:
            raise GateError("binary classifiers are untrained; audit refused")

    def config_dict(self) -> dict:
        return {"kind": self.kind, "pixels": self.pixels, "classes": self.classes,
                "hidden": self.hidden, "rng_seed": self.rng_seed,
                "precision": self.precision, "trained": self.trained,
                "holdout_recall": self.holdout_recall.tolist()}

    @classmethod
    def from_config(cls, cfg: dict) -> "BinaryDigitProbes":
        probes = cls(pixels=cfg["pixels"], classes=cfg["classes"], hidden=cfg["hidden"],
                     rng_seed=cfg["rng_seed"], precision=cfg["precision"])
        probes.trained = cfg.get("trained", False)
        probes.holdout_recall = np.asarray(cfg.get("holdout_recall",
                                                   [0.0] * cfg["classes"]))
        return probes


def _augment_shifts(images: np.ndarray, stream: RngStream, max_shift: int = 1):
    """Random integer translations (zero-padded), the usual cheap digit
    augmentation."""
    out = np.empty_like(images)
    shifts = stream.integers(-max_shift, max_shift + 1, (len(images), 2))
    for i, (dx, dy) in enumerate(shifts):
        img = images[i]
        shifted = np.zeros_like(img)
        h, w = img.shape
        rs, re = max(dx, 0), min(h + dx, h)
        cs, ce = max(dy, 0), min(w + dy, w)
        if rs < re and cs < ce:
            shifted[rs:re, cs:ce] = img[rs - dx : re - dx, cs - dy : ce - dy]
        out[i] = shifted
    return out


def _lrelu(x):
    return np.where(x > 0, x, 0.01 * x)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# metric reports


@dataclass
class MetricReport:
    name: str
    value: float
    batch_size: int
    seed_range: tuple[int, int]
    repeats: int
    mean: float
    std: float | None
    probe_hash: str
    banner: str = PROXY_BANNER
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.std is not None and self.repeats < 2:
            raise ValueError("std reported from fewer than 2 repeats")

    def csv_row(self) -> str:
        std = "" if self.std is None else f"{self.std:.6g}"
        return (f"{self.name},{self.value:.6g},{self.batch_size},"
                f"{self.seed_range[0]}:{self.seed_range[1]},{self.repeats},"
                f"{self.mean:.6g},{std},{self.probe_hash}")

    @staticmethod
    def csv_header() -> str:
        return "metric,value,batch_size,seed_range,repeats,mean,std,probe_hash"


# ---------------------------------------------------------------------------
# Frechet distance over probe features


def fid_from_stats(mu_g, cov_g, mu_r, cov_r) -> float:
    """||mu_g - mu_r||^2 + tr(cov_g + cov_r - 2 (cov_g cov_r)^{1/2}).

    The matrix square root is taken via eigendecomposition of the
    symmetrized product A^{1/2} cov_r A^{1/2}; tiny negative eigenvalues
    from roundoff are clamped to zero.
    """
    mu_g = np.asarray(mu_g, dtype=np.float64)
    mu_r = np.asarray(mu_r, dtype=np.float64)
    cov_g = np.asarray(cov_g, dtype=np.float64)
    cov_r = np.asarray(cov_r, dtype=np.float64)
    diff = mu_g - mu_r
    w, v = np.linalg.eigh((cov_g + cov_g.T) / 2.0)
    root_g = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    inner = root_g @ ((cov_r + cov_r.T) / 2.0) @ root_g
    ev = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(ev, 0.0, None)).sum()
    fid = float(diff @ diff + np.trace(cov_g) + np.trace(cov_r) - 2.0 * tr_sqrt)
    return max(fid, 0.0)


def fid_from_features(feat_g: np.ndarray, feat_r: np.ndarray,
                      regularize: float = COV_REG) -> float:
    feat_g = np.asarray(feat_g, dtype=np.float64)
    feat_r = np.asarray(feat_r, dtype=np.float64)
    if feat_g.shape[0] < 2 or feat_r.shape[0] < 2:
        raise ValueError("need at least 2 samples per set for covariance")
    d = feat_g.shape[1]
    mu_g, mu_r = feat_g.mean(axis=0), feat_r.mean(axis=0)
    cov_g = np.cov(feat_g, rowvar=False) + regularize * np.eye(d)
    cov_r = np.cov(feat_r, rowvar=False) + regularize * np.eye(d)
    return fid_from_stats(mu_g, cov_g, mu_r, cov_r)


def proxy_fid(gen_images, ref_images, probe: ProbeClassifier) -> tuple[float, dict]:
    """Frechet distance in the probe's feature space.

    Returns (value, notes); notes flag a small-sample bias warning when
    either set is below twice the feature dimension.
    """
    probe.require_gate()
    fg = probe.features(gen_images)
    fr = probe.features(ref_images)
    notes = {}
    if min(len(fg), len(fr)) < 2 * fg.shape[1]:
        notes["bias_warning"] = (
            f"sample count below 2 x feature dim ({2 * fg.shape[1]}); "
            "covariance estimate is biased"
        )
    return fid_from_features(fg, fr), notes


# ---------------------------------------------------------------------------
# proxy inception score


def is_from_posteriors(posteriors: np.ndarray, splits: int = 10) -> tuple[float, float]:
    p = np.asarray(posteriors, dtype=np.float64)
    if p.shape[0] < splits:
        raise ValueError(f"need at least {splits} samples for {splits} splits")
    scores = []
    for chunk in np.array_split(p, splits):
        marginal = chunk.mean(axis=0, keepdims=True)
        kl = (chunk * (np.log(chunk + 1e-16) - np.log(marginal + 1e-16))).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    scores = np.asarray(scores)
    return float(scores.mean()), float(scores.std())


def proxy_is(gen_images, probe: ProbeClassifier, splits: int = 10) -> tuple[float, float]:
    """exp(mean KL(p(y|x) || p(y))) per split, mean and std over splits."""
    probe.require_gate()
    if len(gen_images) < splits * 10:
        raise ValueError(f"need at least {splits * 10} images, got {len(gen_images)}")
    return is_from_posteriors(probe.predict_proba(gen_images), splits)


# ---------------------------------------------------------------------------
# Welch's t-test with an in-repo regularized incomplete beta


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    max_iter, eps, fpmin = 300, 3e-17, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("betainc_reg requires a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def welch_t_test(sample_a, sample_b) -> tuple[float, float, float]:
    """Welch's two-sample t with Welch-Satterthwaite dof and two-sided p.

    All-equal degenerate samples return (0, dof, 1) by convention.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    if se2 == 0.0:
        if a.mean() == b.mean():
            return 0.0, float(na + nb - 2), 1.0
        return math.inf if a.mean() > b.mean() else -math.inf, float(na + nb - 2), 0.0
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    dof = float(se2**2 / (sa**2 / (na - 1) + sb**2 / (nb - 1)))
    if math.isinf(t):
        return t, dof, 0.0
    p = betainc_reg(dof / 2.0, 0.5, dof / (dof + t * t))
    return t, dof, min(max(p, 0.0), 1.0)


# ---------------------------------------------------------------------------
# per-digit audit


def binary_digit_audit(gen_per_class: dict[int, np.ndarray] | list,
                       probes: BinaryDigitProbes):
    """Mean confidence and recognition fraction per class, plus the overall
    recognition rate (confidence > 0.5 under the matching binary probe)."""
    probes.require_gate()
    if not isinstance(gen_per_class, dict):
        gen_per_class = dict(enumerate(gen_per_class))
    per_class = {}
    hits = total = 0
    for cls, images in sorted(gen_per_class.items()):
        conf = probes.confidence(images, cls)
        per_class[cls] = {
            "mean_confidence": float(conf.mean()),
            "recognized": float((conf > 0.5).mean()),
            "count": int(len(conf)),
        }
        hits += int((conf > 0.5).sum())
        total += len(conf)
    return per_class, hits / total


# ---------------------------------------------------------------------------
# latent interpolation


def interpolate_latent(model, j1: np.ndarray, j2: np.ndarray, c1: int | None,
                       c2: int | None, steps: int):
    """Sweep gamma over [0, 1]: inputs and class embeddings are mixed as
    gamma * first + (1 - gamma) * second, then run through the model.

    Returns (gammas, images, panel)."""
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    from .images import tile_grid

    gammas = np.linspace(0.0, 1.0, steps)
    e1 = e2 = None
    if getattr(model.encoder, "class_count", 0):
        e1 = model.class_embed.data[int(c1)]
        e2 = model.class_embed.data[int(c2)]
    frames = []
    for gamma in gammas:
        j = gamma * j1 + (1.0 - gamma) * j2
        if e1 is not None:
            e = gamma * e1 + (1.0 - gamma) * e2
            frames.append(model.generate(j[None], embeddings=e[None])[0])
        else:
            frames.append(model.generate(j[None])[0])
    images = np.stack(frames)
    return gammas, images, tile_grid(images, cols=steps)


# ---------------------------------------------------------------------------
# failure-rate estimation


@dataclass(frozen=True)
class FailureRule:
    """An image fails when its max class posterior is below
    `posterior_min` OR its pixel variance is below `variance_fraction` of
    the reference median variance."""

    posterior_min: float = 0.4
    variance_fraction: float = 0.1
    ref_median_variance: float = 0.0

    def describe(self) -> str:
        return (f"failed if max posterior < {self.posterior_min} or pixel variance "
                f"< {self.variance_fraction} * ref median ({self.ref_median_variance:.4g})")


def calibrate_failure_rule(ref_images, probe: ProbeClassifier,
                           posterior_min: float = 0.4,
                           variance_fraction: float = 0.1) -> tuple[FailureRule, float]:
    """Fix the rule's reference variance from real data and report the
    rule's false positive rate on that same data."""
    ref = np.asarray(ref_images)
    variances = ref.reshape(len(ref), -1).var(axis=1)
    rule = FailureRule(posterior_min, variance_fraction, float(np.median(variances)))
    return rule, failure_rate(ref, probe, rule)


def failure_rate(gen_images, probe: ProbeClassifier, rule: FailureRule) -> float:
    probe.require_gate()
    gen = np.asarray(gen_images)
    post_max = probe.predict_proba(gen).max(axis=1)
    variances = gen.reshape(len(gen), -1).var(axis=1)
    failed = (post_max < rule.posterior_min) | (
        variances < rule.variance_fraction * rule.ref_median_variance
    )
    return float(failed.mean())
