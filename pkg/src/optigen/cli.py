"""Command-line surface.

Subcommands: train-teacher, gen-pairs, train-snapshot, train-iterative,
train-baseline, train-probe, infer, interpolate, evaluate,
ablate {efficiency|bits|misalign|seed-res}, flops.

Exit codes: 0 success, 1 usage/configuration error, 2 data/format error,
3 numerical failure.  Every artifact-producing run writes a manifest
(resolved config, seeds, and content hashes of its inputs) into the output
directory; outputs are a pure function of the manifest in single-threaded
mode.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import optics as optics_mod
from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .config import DEFAULTS, format_config, load_config, optical_from_config
from .data import load_dataset, sensor_to_native, split_dataset
from .diffusion import (
    TeacherDenoiser,
    build_schedule,
    export_pairs,
    import_pairs,
    reverse_update,
    teacher_sample,
    teacher_train,
)
from .errors import ConfigError, DataError, GraphStateError, NumericalError
from .evaluation import (
    BinaryDigitProbes,
    MetricReport,
    ProbeClassifier,
    binary_digit_audit,
    calibrate_failure_rule,
    failure_rate,
    interpolate_latent,
    proxy_fid,
    proxy_is,
    welch_t_test,
)
from .images import save_pgm, save_ppm, tile_grid
from .models import (
    DigitalBaseline,
    EncoderConfig,
    IterativeModel,
    SnapshotModel,
    apply_misalignment,
    count_flops,
    encoderfree_phase,
    quantize_array,
)
from .rng import RngStream
from .training import TrainConfig, efficiency_sweep, train_iterative, train_snapshot

log = logging.getLogger("optigen")

COMMANDS = [
    "train-teacher", "gen-pairs", "train-snapshot", "train-iterative",
    "train-baseline", "train-probe", "infer", "interpolate", "evaluate",
    "ablate", "flops",
]


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 and suggest close flag/command names."""

    def error(self, message):
        for token in sys.argv[1:]:
            if token.startswith("-") and "unrecognized arguments" in message:
                close = difflib.get_close_matches(token.lstrip("-"),
                                                  [a.lstrip("-") for a in
                                                   self._option_candidates()], n=1)
                if close:
                    message += f" (did you mean --{close[0]}?)"
                break
        self.exit(1, f"{self.prog}: error: {message}\n")

    def _option_candidates(self):
        return [opt for action in self._actions for opt in action.option_strings]


def build_parser() -> _Parser:
    parser = _Parser(prog="optigen", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override rng_seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--precision", choices=["f32", "f64"], default=None)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("train-teacher", help="train the proxy diffusion teacher")
    common(p)

    p = sub.add_parser("gen-pairs", help="sample distillation pairs from a teacher")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--count", type=int, default=None, help="override pair_count")

    p = sub.add_parser("train-snapshot", help="distill pairs into the optical model")
    common(p)
    p.add_argument("--pairs", required=True, help="pairs file")

    p = sub.add_parser("train-iterative", help="diffusion-style optical training")
    common(p)

    p = sub.add_parser("train-baseline", help="train the all-digital FC baseline")
    common(p)
    p.add_argument("--pairs", required=True)

    p = sub.add_parser("train-probe", help="train the metric probe classifiers")
    common(p)

    p = sub.add_parser("infer", help="generate images from a model checkpoint")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--label", type=int, default=None)

    p = sub.add_parser("interpolate", help="latent interpolation panel")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--labels", default="0,1", help="two class labels c1,c2")

    p = sub.add_parser("evaluate", help="proxy metrics for a model checkpoint")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--binary-probe", default=None)
    p.add_argument("--protocol", choices=["quick", "paper-protocol"], default="quick")

    p = sub.add_parser("ablate", help="batch ablation studies")
    common(p)
    p.add_argument("study", choices=["efficiency", "bits", "misalign", "seed-res"])
    p.add_argument("--model", default=None, help="trained model (bits/misalign)")
    p.add_argument("--probe", default=None)
    p.add_argument("--pairs", default=None)
    p.add_argument("--bits", default="8,4,2,1")
    p.add_argument("--targets", default="0.05,0.2,0.4")

    p = sub.add_parser("flops", help="FLOPs comparison table")
    common(p)

    return parser


# ---------------------------------------------------------------------------
# manifest


def _content_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, cfg: dict, inputs: dict[str, str]):
    lines = [f"command = {command}"]
    for name, path in sorted(inputs.items()):
        lines.append(f"input.{name} = {path}")
        lines.append(f"input.{name}.sha256 = {_content_hash(path)}")
    body = "\n".join(lines) + "\n# resolved config\n" + format_config(cfg)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write(body)


def _setup(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["rng_seed"] = args.seed
    if args.precision is not None:
        cfg["precision"] = args.precision
    os.makedirs(args.out, exist_ok=True)
    optics_mod.fft_workers = max(1, args.threads)
    _set_blas_threads(args.threads)
    return cfg


def _set_blas_threads(n: int):
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except Exception:
        pass  # BLAS keeps its default thread count


def _dataset(cfg):
    images, labels = load_dataset(cfg["data_dir"] or None)
    return split_dataset(images, labels, test_fraction=0.2, seed=0)


def _schedule(cfg):
    return build_schedule(cfg["timesteps"], cfg["beta_start"], cfg["beta_end"])


def _encoder_config(cfg, noise_dim=None, class_count=None, seed_n=None):
    return EncoderConfig(
        noise_dim=noise_dim if noise_dim is not None else cfg["noise_dim"],
        class_count=cfg["class_count"] if class_count is None else class_count,
        embed_dim=cfg["embed_dim"],
        hidden_dims=(cfg["hidden1"], cfg["hidden2"]),
        seed_n=cfg["seed_n"] if seed_n is None else seed_n,
    )


def _train_config(cfg, **overrides) -> TrainConfig:
    base = dict(
        batch_size=cfg["batch_size"], epochs=cfg["epochs"], lr=cfg["lr"],
        weight_decay=cfg["weight_decay"], warmup_steps=cfg["warmup_steps"],
        eta_target=cfg["eta_target"], eta_weight=cfg["eta_weight"],
        misalign_sigma=cfg["misalign_sigma"], phase_bits=cfg["phase_bits"],
        rng_seed=cfg["rng_seed"], precision=cfg["precision"],
        checkpoint_every=cfg["checkpoint_every"],
    )
    base.update(overrides)
    return TrainConfig(**base)


def _model_from_checkpoint(path: str):
    ckpt = load_checkpoint(path)
    cls = {"snapshot": SnapshotModel, "iterative": IterativeModel,
           "baseline": DigitalBaseline, "teacher": TeacherDenoiser,
           "probe": ProbeClassifier, "binary-probe": BinaryDigitProbes}[ckpt.kind]
    model = cls.from_config(ckpt.config)
    ckpt.load_into(model.parameters)
    return model, ckpt


def _save_model(path, model, kind, rng_state=None, metadata=None):
    ckpt = ModelCheckpoint.from_params(kind, model.config_dict(), model.parameters,
                                       rng_state=rng_state or [],
                                       metadata=metadata or {})
    save_checkpoint(path, ckpt)
    return path


# ---------------------------------------------------------------------------
# command handlers


def cmd_train_teacher(args) -> int:
    cfg = _setup(args)
    train_x, train_y, _, _ = _dataset(cfg)
    schedule = _schedule(cfg)
    widths = tuple([cfg["teacher_hidden"]] * cfg["teacher_layers"])
    teacher, losses = teacher_train(
        (train_x, train_y if cfg["class_count"] else None), schedule,
        epochs=cfg["teacher_epochs"], widths=widths, batch=cfg["batch_size"],
        lr=cfg["lr"], rng_seed=cfg["rng_seed"], precision=cfg["precision"],
        log=log.info,
    )
    path = os.path.join(args.out, "teacher.ckpt")
    _save_model(path, teacher, "teacher")
    with open(os.path.join(args.out, "teacher-losses.csv"), "w") as f:
        f.write("epoch,loss\n" + "\n".join(f"{i},{l:.6g}" for i, l in enumerate(losses)))
    _write_manifest(args.out, "train-teacher", cfg, {})
    log.info("teacher saved to %s (final loss %.4f)", path, losses[-1])
    return 0


def cmd_gen_pairs(args) -> int:
    cfg = _setup(args)
    teacher, _ = _model_from_checkpoint(args.teacher)
    schedule = _schedule(cfg)
    count = args.count or cfg["pair_count"]
    pairs = teacher_sample(
        teacher, schedule, count, rng_seed=cfg["rng_seed"],
        noise_dim=cfg["noise_dim"], noise_mode=cfg["pair_noise"],
    )
    path = os.path.join(args.out, "pairs.bin")
    export_pairs(pairs, path)
    _write_manifest(args.out, "gen-pairs", cfg, {"teacher": args.teacher})
    log.info("wrote %d pairs to %s (hash %s)", pairs.count, path, pairs.data_hash()[:12])
    return 0


def _snapshot_from_cfg(cfg) -> SnapshotModel:
    return SnapshotModel(
        _encoder_config(cfg), optical_from_config(cfg),
        decoder_layers=cfg["decoder_layers"], eta_target=cfg["eta_target"],
        eta_weight=cfg["eta_weight"], rng_seed=cfg["rng_seed"],
        precision=cfg["precision"], phase_bits=cfg["phase_bits"],
        replication=cfg["seed_replication"] or None,
    )


def cmd_train_snapshot(args) -> int:
    cfg = _setup(args)
    pairs = import_pairs(args.pairs)
    model = _snapshot_from_cfg(cfg)
    ckpt, report = train_snapshot(pairs, model, _train_config(cfg))
    save_checkpoint(os.path.join(args.out, "snapshot.ckpt"), ckpt)
    _write_reports(args.out, report)
    _write_manifest(args.out, "train-snapshot", cfg, {"pairs": args.pairs})
    return 0


def cmd_train_iterative(args) -> int:
    cfg = _setup(args)
    train_x, _, _, _ = _dataset(cfg)
    schedule = _schedule(cfg)
    model = _iterative_from_cfg(cfg)
    ckpt, report = train_iterative(train_x, model, schedule, _train_config(cfg))
    save_checkpoint(os.path.join(args.out, "iterative.ckpt"), ckpt)
    _write_reports(args.out, report)
    _write_manifest(args.out, "train-iterative", cfg, {})
    return 0


def _iterative_from_cfg(cfg) -> IterativeModel:
    image_n = cfg["image_n"]
    encoder_free = cfg["encoder_free"]
    noise_dim = image_n**2 + (0 if encoder_free else cfg["timestep_embed"])
    enc = EncoderConfig(
        noise_dim=noise_dim, class_count=0, embed_dim=0,
        hidden_dims=(cfg["hidden1"], cfg["hidden2"]),
        seed_n=image_n if encoder_free else cfg["seed_n"],
    )
    return IterativeModel(
        enc, optical_from_config(cfg), decoder_layers=cfg["decoder_layers"],
        eta_target=cfg["eta_target"], eta_weight=cfg["eta_weight"],
        rng_seed=cfg["rng_seed"], precision=cfg["precision"],
        phase_bits=cfg["phase_bits"], replication=cfg["seed_replication"] or None,
        image_n=image_n, timestep_embed=0 if encoder_free else cfg["timestep_embed"],
        encoder_free=encoder_free,
    )


def cmd_train_baseline(args) -> int:
    cfg = _setup(args)
    pairs = import_pairs(args.pairs)
    model = DigitalBaseline(
        noise_dim=cfg["noise_dim"], class_count=cfg["class_count"],
        embed_dim=cfg["embed_dim"], layer_count=cfg["baseline_layers"],
        hidden=cfg["baseline_hidden"], out_pixels=cfg["image_n"] ** 2,
        rng_seed=cfg["rng_seed"], precision=cfg["precision"],
    )
    from .autodiff import adamw_step

    handles = model.build_graph(cfg["batch_size"], train=True)
    g = handles["graph"]
    rng = RngStream("baseline-train", cfg["rng_seed"])
    n = pairs.count
    flat = pairs.images.reshape(n, -1).astype(np.float64)
    dtype = np.float64 if cfg["precision"] == "f64" else np.float32
    step = 0
    for epoch in range(cfg["epochs"]):
        order = rng.child(f"shuffle{epoch}").permutation(n)
        for s in range(n // cfg["batch_size"]):
            idx = order[s * cfg["batch_size"] : (s + 1) * cfg["batch_size"]]
            feeds = {"noise": pairs.noise[idx].astype(dtype),
                     "target": flat[idx].astype(dtype)}
            if cfg["class_count"]:
                feeds["labels"] = pairs.labels[idx].astype(np.int64)
            for p in model.parameters:
                p.zero_grad()
            g.forward(feeds)
            g.backward(handles["loss"])
            if not np.isfinite(handles["loss"].value):
                raise NumericalError(f"baseline loss diverged at epoch {epoch}")
            lr = cfg["lr"] * min(1.0, (step + 1) / max(cfg["warmup_steps"], 1))
            adamw_step(model.parameters, lr=lr, weight_decay=cfg["weight_decay"])
            step += 1
        log.info("baseline epoch %d: loss %.5f", epoch, float(handles["loss"].value))
    _save_model(os.path.join(args.out, "baseline.ckpt"), model, "baseline")
    _write_manifest(args.out, "train-baseline", cfg, {"pairs": args.pairs})
    return 0


def cmd_train_probe(args) -> int:
    cfg = _setup(args)
    train_x, train_y, test_x, test_y = _dataset(cfg)
    probe = ProbeClassifier(pixels=cfg["image_n"] ** 2, classes=cfg["class_count"],
                            rng_seed=cfg["rng_seed"], precision=cfg["precision"])
    probe.train(train_x, train_y, test_x, test_y, epochs=40,
                batch=cfg["batch_size"], log=log.info)
    log.info("probe test accuracy: %.4f", probe.test_accuracy)
    _save_model(os.path.join(args.out, "probe.ckpt"), probe, "probe")
    binaries = BinaryDigitProbes(pixels=cfg["image_n"] ** 2,
                                 classes=cfg["class_count"],
                                 rng_seed=cfg["rng_seed"],
                                 precision=cfg["precision"])
    binaries.train(train_x, train_y, test_x, test_y, log=log.info)
    log.info("binary holdout recall: %s", np.round(binaries.holdout_recall, 3))
    _save_model(os.path.join(args.out, "binary.ckpt"), binaries, "binary-probe")
    _write_manifest(args.out, "train-probe", cfg, {})
    return 0


def cmd_infer(args) -> int:
    cfg = _setup(args)
    model, ckpt = _model_from_checkpoint(args.model)
    rng = RngStream("infer", cfg["rng_seed"])
    count = args.count
    if ckpt.kind == "snapshot":
        noise = rng.normal((count, model.encoder.noise_dim))
        labels = None
        if model.encoder.class_count:
            if args.label is not None:
                labels = np.full(count, args.label)
            else:
                labels = rng.child("labels").integers(0, model.encoder.class_count, count)
        images = model.generate(noise, labels)
    elif ckpt.kind == "iterative":
        images = _iterative_generate(model, cfg, count, rng)
    elif ckpt.kind == "baseline":
        labels = rng.child("labels").integers(0, model.class_count, count) \
            if model.class_count else None
        side = int(np.sqrt(model.out_pixels))
        images = model.generate(rng.normal((count, model.noise_dim)), labels)
        images = images.reshape(count, side, side)
    else:
        raise ConfigError(f"cannot infer from a {ckpt.kind!r} checkpoint")
    for i, img in enumerate(images):
        save_pgm(os.path.join(args.out, f"sample-{i:04d}.pgm"), img)
    save_pgm(os.path.join(args.out, "panel.pgm"),
             tile_grid(images, cols=int(np.ceil(np.sqrt(count)))))
    _write_manifest(args.out, "infer", cfg, {"model": args.model})
    return 0


def _iterative_generate(model: IterativeModel, cfg: dict, count: int,
                        rng: RngStream) -> np.ndarray:
    """Run the reverse ladder; returns [count, image_n, image_n] in [0, 1]."""
    schedule = _schedule(cfg)
    ladder = [t for t in cfg["sample_ladder"] if t <= schedule.T]
    n_img = model.image_n
    j_t = rng.child("JT").normal((count, n_img, n_img))
    steps = ladder + [0]
    for i in range(len(steps) - 1):
        t, t_prev = steps[i], steps[i + 1]
        pred_sensor = model.predict_clean(j_t, t, t_max=schedule.T)
        j0_hat = sensor_to_native(pred_sensor, n_img)
        eps = rng.child(f"eps{t_prev}").normal(j_t.shape) if t_prev > 0 else None
        j_t = reverse_update(j0_hat, t, t_prev, eps, schedule)
    return np.clip((np.clip(j_t, -1.0, 1.0) + 1.0) / 2.0, 0.0, 1.0)


def cmd_interpolate(args) -> int:
    cfg = _setup(args)
    model, ckpt = _model_from_checkpoint(args.model)
    if ckpt.kind != "snapshot":
        raise ConfigError("interpolation needs a snapshot checkpoint")
    rng = RngStream("interp", cfg["rng_seed"])
    j1 = rng.child("J1").normal(model.encoder.noise_dim)
    j2 = rng.child("J2").normal(model.encoder.noise_dim)
    c1, c2 = (int(x) for x in args.labels.split(","))
    _, frames, panel = interpolate_latent(model, j1, j2, c1, c2, args.steps)
    save_pgm(os.path.join(args.out, "interpolation.pgm"), panel)
    for i, img in enumerate(frames):
        save_pgm(os.path.join(args.out, f"frame-{i:03d}.pgm"), img)
    _write_manifest(args.out, "interpolate", cfg, {"model": args.model})
    return 0


def cmd_evaluate(args) -> int:
    cfg = _setup(args)
    model, mckpt = _model_from_checkpoint(args.model)
    probe, _ = _model_from_checkpoint(args.probe)
    images_all, labels_all = load_dataset(cfg["data_dir"] or None)
    n_img = cfg["image_n"]
    reports: list[MetricReport] = []

    if cfg["eval_repeats"] < 1:
        raise ConfigError("eval_repeats must be >= 1")
    batch = cfg["eval_batch"] if args.protocol == "paper-protocol" else min(
        cfg["eval_batch"], 256
    )
    repeats = cfg["eval_repeats"] if args.protocol == "paper-protocol" else 2
    seed_lo, seed_hi = 0, cfg["eval_seed_range"]
    seed_stream = RngStream("eval-seeds", cfg["rng_seed"])
    fids, is_means = [], []
    gen_cache = None
    for r in range(repeats):
        s = seed_stream.integers(seed_lo, seed_hi)
        gen = _generate_for_eval(model, mckpt.kind, cfg, batch, seed=s)
        ref_idx = seed_stream.child(f"ref{r}").integers(0, len(images_all), batch)
        fids.append(proxy_fid(gen, images_all[ref_idx], probe)[0])
        is_means.append(proxy_is(gen, probe, splits=min(10, max(2, batch // 10)))[0])
        gen_cache = gen
    phash = probe.identity_hash()
    reports.append(MetricReport("proxy-fid", float(np.mean(fids)), batch,
                                (seed_lo, seed_hi), repeats, float(np.mean(fids)),
                                float(np.std(fids)) if repeats > 1 else None, phash))
    reports.append(MetricReport("proxy-is", float(np.mean(is_means)), batch,
                                (seed_lo, seed_hi), repeats, float(np.mean(is_means)),
                                float(np.std(is_means)) if repeats > 1 else None, phash))

    # t-test between per-image max posteriors of generated vs real images
    conf_gen = probe.predict_proba(gen_cache).max(axis=1)
    conf_ref = probe.predict_proba(images_all[:batch]).max(axis=1)
    t, dof, p = welch_t_test(conf_gen, conf_ref)
    reports.append(MetricReport("welch-t-maxposterior", t, batch, (seed_lo, seed_hi),
                                1, t, None, phash, notes={"p": p, "dof": dof}))

    rule, fp = calibrate_failure_rule(images_all, probe)
    fr = failure_rate(gen_cache, probe, rule)
    reports.append(MetricReport("failure-rate", fr, batch, (seed_lo, seed_hi), 1,
                                fr, None, phash,
                                notes={"rule": rule.describe(), "real_fp_rate": fp}))

    model_classes = getattr(getattr(model, "encoder", model), "class_count", 0)
    if args.binary_probe and model_classes:
        binaries, _ = _model_from_checkpoint(args.binary_probe)
        per_class = {}
        for c in range(binaries.classes):
            per_class[c] = _generate_for_eval(model, mckpt.kind, cfg, 100, seed=c,
                                              label=c)
        audit, overall = binary_digit_audit(per_class, binaries)
        reports.append(MetricReport("binary-recognition", overall, 100 * 10,
                                    (0, 10), 1, overall, None, phash,
                                    notes={"per_class": audit}))

    with open(os.path.join(args.out, "metrics.csv"), "w") as f:
        f.write(MetricReport.csv_header() + "\n")
        for rep in reports:
            f.write(rep.csv_row() + "\n")
    with open(os.path.join(args.out, "metrics.txt"), "w") as f:
        f.write(f"# {reports[0].banner}\n")
        for rep in reports:
            f.write(f"{rep.name}: {rep.value:.6g}" +
                    (f" +- {rep.std:.4g}" if rep.std is not None else "") +
                    (f"  {rep.notes}" if rep.notes else "") + "\n")
    save_pgm(os.path.join(args.out, "samples.pgm"),
             tile_grid(gen_cache[:64], cols=8))
    _write_manifest(args.out, "evaluate", cfg,
                    {"model": args.model, "probe": args.probe})
    print(open(os.path.join(args.out, "metrics.txt")).read(), end="")
    return 0


def _generate_for_eval(model, kind: str, cfg: dict, count: int, seed: int,
                       label=None) -> np.ndarray:
    """Images at native resolution in [0, 1] for metric computation."""
    rng = RngStream("eval-gen", seed)
    n_img = cfg["image_n"]
    if kind == "snapshot":
        noise = rng.normal((count, model.encoder.noise_dim))
        labels = None
        if model.encoder.class_count:
            labels = (np.full(count, label) if label is not None else
                      rng.child("labels").integers(0, model.encoder.class_count, count))
        sensor = model.generate(noise, labels)
        return sensor_to_native(sensor, n_img)
    if kind == "iterative":
        return _iterative_generate(model, cfg, count, rng)
    if kind == "baseline":
        labels = None
        if model.class_count:
            labels = (np.full(count, label) if label is not None else
                      rng.child("labels").integers(0, model.class_count, count))
        flat = model.generate(rng.normal((count, model.noise_dim)), labels)
        return flat.reshape(count, n_img, n_img)
    raise ConfigError(f"cannot generate from kind {kind!r}")


def cmd_ablate(args) -> int:
    cfg = _setup(args)
    if args.study == "efficiency":
        return _ablate_efficiency(args, cfg)
    if args.study == "bits":
        return _ablate_bits(args, cfg)
    if args.study == "misalign":
        return _ablate_misalign(args, cfg)
    return _ablate_seed_res(args, cfg)


def _need(args, attr):
    if getattr(args, attr) is None:
        raise ConfigError(f"ablate {args.study} requires --{attr.replace('_', '-')}")
    return getattr(args, attr)


def _fid_evaluator(probe, ref_images, cfg, n=256, seed=0):
    def evaluate(model):
        gen = _generate_for_eval(model, "snapshot", cfg, n, seed=seed)
        _, etas = model.generate(
            RngStream("eval-eta", seed).normal((64, model.encoder.noise_dim)),
            (RngStream("eval-eta-l", seed).integers(0, model.encoder.class_count, 64)
             if model.encoder.class_count else None),
            return_eta=True,
        )
        return proxy_fid(gen, ref_images, probe)[0], float(etas.mean())

    return evaluate


def _ablate_efficiency(args, cfg) -> int:
    pairs = import_pairs(_need(args, "pairs"))
    probe, _ = _model_from_checkpoint(_need(args, "probe"))
    images_all, _ = load_dataset(cfg["data_dir"] or None)
    targets = [float(x) for x in args.targets.split(",")]

    def factory(target):
        return _snapshot_from_cfg(cfg)

    rows, csv = efficiency_sweep(pairs, factory, targets, _train_config(cfg),
                                 _fid_evaluator(probe, images_all[:2000], cfg))
    with open(os.path.join(args.out, "efficiency.csv"), "w") as f:
        f.write(csv)
    _write_manifest(args.out, "ablate-efficiency", cfg,
                    {"pairs": args.pairs, "probe": args.probe})
    print(csv, end="")
    return 0


def _ablate_bits(args, cfg) -> int:
    model, ckpt = _model_from_checkpoint(_need(args, "model"))
    probe, _ = _model_from_checkpoint(_need(args, "probe"))
    images_all, _ = load_dataset(cfg["data_dir"] or None)
    bit_list = [int(b) for b in args.bits.split(",")]
    rows = []
    for bits in bit_list:
        quantized = SnapshotModel.from_config({**ckpt.config, "phase_bits": bits})
        ckpt.load_into(quantized.parameters)
        gen = _generate_for_eval(quantized, "snapshot", cfg, 256, seed=0)
        fid, _ = proxy_fid(gen, images_all[:2000], probe)
        rows.append((bits, fid))
    csv = "bits,proxy_fid\n" + "\n".join(f"{b},{v:.6g}" for b, v in rows) + "\n"
    with open(os.path.join(args.out, "bits.csv"), "w") as f:
        f.write(csv)
    _write_manifest(args.out, "ablate-bits", cfg,
                    {"model": args.model, "probe": args.probe})
    print(csv, end="")
    return 0


def _ablate_misalign(args, cfg) -> int:
    model, ckpt = _model_from_checkpoint(_need(args, "model"))
    probe, _ = _model_from_checkpoint(_need(args, "probe"))
    images_all, _ = load_dataset(cfg["data_dir"] or None)
    shifts = [0.0, 1.0, 2.0, 4.0]
    rows = []
    originals = [p.data.copy() for p in model.decoder.layers]
    for s in shifts:
        shifted = apply_misalignment(model.decoder, [(s, s)] * len(model.decoder))
        for p, q in zip(model.decoder.layers, shifted.layers):
            p.data[...] = q.data
        model.invalidate_graphs()
        gen = _generate_for_eval(model, ckpt.kind, cfg, 256, seed=0)
        fid, _ = proxy_fid(gen, images_all[:2000], probe)
        for p, o in zip(model.decoder.layers, originals):
            p.data[...] = o
        model.invalidate_graphs()
        rows.append((s, fid))
    csv = "shift,proxy_fid\n" + "\n".join(f"{s},{v:.6g}" for s, v in rows) + "\n"
    with open(os.path.join(args.out, "misalign.csv"), "w") as f:
        f.write(csv)
    _write_manifest(args.out, "ablate-misalign", cfg,
                    {"model": args.model, "probe": args.probe})
    print(csv, end="")
    return 0


def _ablate_seed_res(args, cfg) -> int:
    pairs = import_pairs(_need(args, "pairs"))
    probe, _ = _model_from_checkpoint(_need(args, "probe"))
    images_all, _ = load_dataset(cfg["data_dir"] or None)
    rows = []
    for seed_n in (cfg["seed_n"], cfg["seed_n"] // 2, cfg["seed_n"] // 4):
        run_cfg = dict(cfg)
        run_cfg["seed_n"] = seed_n
        run_cfg["seed_replication"] = 0
        model = _snapshot_from_cfg(run_cfg)
        _, report = train_snapshot(pairs, model, _train_config(run_cfg))
        fid, _ = _fid_evaluator(probe, images_all[:2000], run_cfg)(model)
        rows.append((seed_n, fid))
    csv = "seed_n,proxy_fid\n" + "\n".join(f"{s},{v:.6g}" for s, v in rows) + "\n"
    with open(os.path.join(args.out, "seed-res.csv"), "w") as f:
        f.write(csv)
    _write_manifest(args.out, "ablate-seed-res", cfg,
                    {"pairs": args.pairs, "probe": args.probe})
    print(csv, end="")
    return 0


def cmd_flops(args) -> int:
    cfg = _setup(args)
    snap = _snapshot_from_cfg(cfg)
    rows = [("snapshot-optical-encoder", count_flops(snap))]
    for layers in (3, 5, 7, 9):
        base = DigitalBaseline(
            noise_dim=cfg["noise_dim"], class_count=cfg["class_count"],
            embed_dim=cfg["embed_dim"], layer_count=layers,
            hidden=cfg["baseline_hidden"], out_pixels=cfg["image_n"] ** 2,
        )
        rows.append((f"digital-{layers}-layer", count_flops(base)))
    csv = "model,flops\n" + "\n".join(f"{n},{v}" for n, v in rows) + "\n"
    with open(os.path.join(args.out, "flops.csv"), "w") as f:
        f.write(csv)
    _write_manifest(args.out, "flops", cfg, {})
    print(csv, end="")
    return 0


def _write_reports(out_dir, report):
    with open(os.path.join(out_dir, "train-report.jsonl"), "w") as f:
        f.write(report.to_jsonl())
    with open(os.path.join(out_dir, "train-summary.csv"), "w") as f:
        f.write(report.csv_summary())


HANDLERS = {
    "train-teacher": cmd_train_teacher,
    "gen-pairs": cmd_gen_pairs,
    "train-snapshot": cmd_train_snapshot,
    "train-iterative": cmd_train_iterative,
    "train-baseline": cmd_train_baseline,
    "train-probe": cmd_train_probe,
    "infer": cmd_infer,
    "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
}


def cli_dispatch(argv: list[str]) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    if args.command is None:
        parser.print_help()
        return 1
    try:
        return HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"optigen: configuration error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"optigen: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"optigen: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, GraphStateError, FloatingPointError) as exc:
        print(f"optigen: numerical failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
