"""Training loops: snapshot distillation, iterative diffusion-style
self-supervision, and the efficiency-target sweep.

Snapshot training minimizes MSE between the per-image max-normalized
sensor intensity and the teacher image (replicated onto the sensor grid),
plus the one-sided efficiency shortfall penalty.  The encoder and the
decoder surfaces are updated jointly; nonzero gradient norms on both
groups are asserted every epoch.

The sweep variant holds the achieved efficiency in a band around each
target by penalizing deviation on both sides; elsewhere the penalty is
one-sided as in the base training op.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import adamw_step
from .checkpoint import ModelCheckpoint
from .data import upsample_to_sensor
from .diffusion import NoiseSchedule, PairSet, q_sample
from .errors import ConfigError, NumericalError, TrainingError
from .models import IterativeModel, SnapshotModel
from .rng import RngStream

__all__ = ["TrainConfig", "TrainReport", "train_snapshot", "train_iterative",
           "efficiency_sweep"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_steps: int = 200
    eta_target: float = 0.0
    eta_weight: float = 0.0
    misalign_sigma: float = 0.0
    phase_bits: int = 0
    rng_seed: int = 0
    precision: str = "f64"
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.eta_target <= 1.0:
            raise ConfigError("eta_target must lie in [0, 1]")
        if self.eta_weight < 0:
            raise ConfigError("eta_weight must be >= 0")


@dataclass
class TrainReport:
    """Append-only per-epoch record plus a config echo."""

    config: dict
    epochs: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    collapse_warnings: list[int] = field(default_factory=list)

    def add_epoch(self, **kw):
        self.epochs.append(kw)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"record": "config", **self.config}, sort_keys=True)]
        for i, e in enumerate(self.epochs):
            lines.append(json.dumps({"record": "epoch", "epoch": i, **e}, sort_keys=True))
        if self.final_metrics:
            lines.append(json.dumps({"record": "final", **self.final_metrics},
                                    sort_keys=True))
        return "\n".join(lines) + "\n"

    def csv_summary(self) -> str:
        rows = ["epoch,loss,eta_mean,seconds"]
        for i, e in enumerate(self.epochs):
            rows.append(f"{i},{e['loss']:.6g},{e.get('eta_mean', '')},"
                        f"{e.get('seconds', 0):.2f}")
        return "\n".join(rows) + "\n"


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    return cfg.lr


def _grad_norms(params) -> dict[str, float]:
    return {p.name: float(np.linalg.norm(p.grad)) for p in params}


def _snapshot_params(params) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore_params(params, saved) -> None:
    for p, s in zip(params, saved):
        p.data[...] = s


def _diversity(images: np.ndarray) -> float:
    """Mean pairwise L2 distance over a sample batch (collapse monitor)."""
    flat = images.reshape(len(images), -1)
    sq = (flat**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T
    iu = np.triu_indices(len(flat), k=1)
    return float(np.sqrt(np.clip(d2[iu], 0.0, None)).mean())


def train_snapshot(pairs: PairSet, model: SnapshotModel, cfg: TrainConfig,
                   report_extra: dict | None = None,
                   symmetric_eta: bool = False) -> tuple[ModelCheckpoint, TrainReport]:
    """Distill teacher pairs into the optical model with AdamW."""
    if pairs.noise_dim != model.encoder.noise_dim:
        raise ConfigError(
            f"pairs noise_dim {pairs.noise_dim} != encoder noise_dim "
            f"{model.encoder.noise_dim}"
        )
    conditional = model.encoder.class_count > 0
    if conditional and pairs.labels is None:
        raise ConfigError("conditional model needs labeled pairs")

    model.eta_target = cfg.eta_target
    model.eta_weight = cfg.eta_weight
    model.invalidate_graphs()
    jitter = cfg.misalign_sigma > 0
    handles = _train_graph(model, cfg, jitter, symmetric_eta)
    g = handles["graph"]
    params = model.parameters
    sensor_n = model.optics.sensor_region.shape[0]
    targets_all = upsample_to_sensor(pairs.images.astype(np.float64), sensor_n)
    dtype = np.float64 if cfg.precision == "f64" else np.float32
    noise_all = pairs.noise.astype(dtype)
    targets_all = targets_all.astype(dtype)

    rng = RngStream("snapshot-train", cfg.rng_seed)
    report = TrainReport(config={**cfg.__dict__, **(report_extra or {}),
                                 "model": model.config_dict()})
    n = pairs.count
    steps_per_epoch = n // cfg.batch_size
    step = 0
    good = _snapshot_params(params)
    init_diversity = None
    for epoch in range(cfg.epochs):
        t0 = time.time()
        order = rng.child(f"shuffle{epoch}").permutation(n)
        total_loss = total_eta = 0.0
        min_decoder_norm = np.inf
        min_encoder_norm = np.inf
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            feeds = {"noise": noise_all[idx], "target": targets_all[idx]}
            if conditional:
                feeds["labels"] = pairs.labels[idx].astype(np.int64)
            if jitter:
                _poke_jitter(handles, rng.child(f"jitter{epoch}/{s}"), cfg.misalign_sigma)
            for p in params:
                p.zero_grad()
            g.forward(feeds)
            g.backward(handles["loss"])
            loss = float(handles["loss"].value)
            if not np.isfinite(loss):
                _restore_params(params, good)
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch} step {s}; "
                    "parameters restored to the last checkpointed state"
                )
            dec_norm = min(float(np.linalg.norm(p.grad)) for p in model.decoder.layers)
            enc_norms = [float(np.linalg.norm(p.grad)) for p in model.encoder_parameters]
            min_decoder_norm = min(min_decoder_norm, dec_norm)
            if enc_norms:
                min_encoder_norm = min(min_encoder_norm, min(enc_norms))
            adamw_step(params, lr=_lr_at(step, cfg), weight_decay=cfg.weight_decay)
            total_loss += loss
            total_eta += float(handles["eta"].value)
            step += 1
        if min_decoder_norm == 0.0:
            raise TrainingError(f"decoder gradients vanished in epoch {epoch}")
        report.add_epoch(
            loss=total_loss / steps_per_epoch, eta_mean=total_eta / steps_per_epoch,
            seconds=time.time() - t0, min_decoder_grad_norm=min_decoder_norm,
            min_encoder_grad_norm=(None if not np.isfinite(min_encoder_norm)
                                   else min_encoder_norm),
        )
        if (epoch + 1) % cfg.checkpoint_every == 0:
            good = _snapshot_params(params)
            div = _monitor_collapse(model, pairs, rng.child(f"collapse{epoch}"))
            if init_diversity is None:
                init_diversity = div
            elif div < 0.25 * init_diversity:
                report.collapse_warnings.append(epoch)
                log.warning("possible mode collapse at epoch %d: sample diversity "
                            "%.4f < 25%% of initial %.4f", epoch, div, init_diversity)
    ckpt = ModelCheckpoint.from_params(
        "snapshot", model.config_dict(), params,
        rng_state=[rng.state], metadata={"train_config": report.config},
    )
    return ckpt, report


def _train_graph(model, cfg, jitter, symmetric_eta):
    handles = model.build_graph(cfg.batch_size, train=True, jitter=jitter)
    if symmetric_eta:
        # mark the built-in penalty symmetric (band around the target)
        g = handles["graph"]
        for node in g.nodes:
            if node.op == "eff_penalty":
                node.ctx["symmetric"] = True
    return handles


def _poke_jitter(handles, rng: RngStream, sigma: float):
    shifts = rng.normal((len(handles["shifts"]), 2)) * sigma
    for node, (dx, dy) in zip(handles["shifts"], shifts):
        node.ctx["dx"] = float(dx)
        node.ctx["dy"] = float(dy)


def _monitor_collapse(model, pairs, rng: RngStream, n: int = 64) -> float:
    noise = rng.normal((n, model.encoder.noise_dim))
    labels = None
    if model.encoder.class_count:
        labels = rng.child("labels").integers(0, model.encoder.class_count, n)
    images = model.generate(noise.astype(np.float64), labels)
    return _diversity(images)


def train_iterative(dataset: np.ndarray, model: IterativeModel,
                    schedule: NoiseSchedule, cfg: TrainConfig,
                    report_extra: dict | None = None) -> tuple[ModelCheckpoint, TrainReport]:
    """Diffusion-style self-supervision: noise the data to a random step,
    predict the clean sample optically, and regress on it."""
    images = np.asarray(dataset, dtype=np.float64)
    n = images.shape[0]
    x0_all = 2.0 * images - 1.0  # signed data range
    model.eta_target = cfg.eta_target
    model.eta_weight = cfg.eta_weight
    model.invalidate_graphs()
    jitter = cfg.misalign_sigma > 0
    handles = model.build_graph(cfg.batch_size, train=True, jitter=jitter)
    g = handles["graph"]
    params = model.parameters
    sensor_n = model.optics.sensor_region.shape[0]
    dtype = np.float64 if cfg.precision == "f64" else np.float32

    rng = RngStream("iterative-train", cfg.rng_seed)
    report = TrainReport(config={**cfg.__dict__, **(report_extra or {}),
                                 "model": model.config_dict()})
    steps_per_epoch = n // cfg.batch_size
    step = 0
    good = _snapshot_params(params)
    for epoch in range(cfg.epochs):
        t0 = time.time()
        order = rng.child(f"shuffle{epoch}").permutation(n)
        total_loss = total_eta = 0.0
        min_decoder_norm = np.inf
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            x0 = x0_all[idx]
            t = rng.child(f"t{epoch}/{s}").integers(1, schedule.T + 1, cfg.batch_size)
            eps = rng.child(f"eps{epoch}/{s}").normal(x0.shape)
            j_t = q_sample(x0, t, eps, schedule)
            target = upsample_to_sensor(x0, sensor_n).astype(dtype)
            if model.encoder_free:
                from .models import encoderfree_phase

                feeds = {"phi": encoderfree_phase(j_t).astype(dtype), "target": target}
            else:
                feeds = {"x": model.encoder_inputs(j_t, t), "target": target}
            if jitter:
                _poke_jitter(handles, rng.child(f"jitter{epoch}/{s}"), cfg.misalign_sigma)
            for p in params:
                p.zero_grad()
            g.forward(feeds)
            g.backward(handles["loss"])
            loss = float(handles["loss"].value)
            if not np.isfinite(loss):
                _restore_params(params, good)
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch} step {s}; "
                    "parameters restored"
                )
            min_decoder_norm = min(
                min_decoder_norm,
                min(float(np.linalg.norm(p.grad)) for p in model.decoder.layers),
            )
            adamw_step(params, lr=_lr_at(step, cfg), weight_decay=cfg.weight_decay)
            total_loss += loss
            total_eta += float(handles["eta"].value)
            step += 1
        if min_decoder_norm == 0.0:
            raise TrainingError(f"decoder gradients vanished in epoch {epoch}")
        report.add_epoch(loss=total_loss / steps_per_epoch,
                         eta_mean=total_eta / steps_per_epoch,
                         seconds=time.time() - t0,
                         min_decoder_grad_norm=min_decoder_norm)
        if (epoch + 1) % cfg.checkpoint_every == 0:
            good = _snapshot_params(params)
    ckpt = ModelCheckpoint.from_params(
        "iterative", model.config_dict(), params,
        rng_state=[rng.state], metadata={"train_config": report.config},
    )
    return ckpt, report


def efficiency_sweep(pairs: PairSet, model_factory, targets: list[float],
                     cfg: TrainConfig, evaluate_fid, eta_weight: float = 20.0):
    """Train one model per efficiency target and report (achieved eta,
    proxy FID) rows plus a CSV.

    model_factory(target) -> fresh SnapshotModel; evaluate_fid(model) ->
    (proxy_fid, mean_eta).  Targets are held in a band by a symmetric
    penalty so the achieved efficiency tracks the requested one.
    """
    if len(targets) < 2:
        raise ConfigError("sweep needs at least 2 targets")
    rows = []
    for target in targets:
        run_cfg = TrainConfig(**{**cfg.__dict__, "eta_target": float(target),
                                 "eta_weight": eta_weight})
        model = model_factory(target)
        try:
            ckpt, report = train_snapshot(pairs, model, run_cfg, symmetric_eta=True,
                                          report_extra={"sweep_target": target})
        except (TrainingError, NumericalError) as exc:
            raise TrainingError(f"sweep target {target}: {exc}") from exc
        fid, eta = evaluate_fid(model)
        rows.append({"target": float(target), "eta": float(eta), "proxy_fid": float(fid),
                     "final_loss": report.epochs[-1]["loss"]})
    csv = "target,eta_achieved,proxy_fid\n" + "\n".join(
        f"{r['target']:.4g},{r['eta']:.6g},{r['proxy_fid']:.6g}" for r in rows
    ) + "\n"
    return rows, csv
