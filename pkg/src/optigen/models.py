"""Model definitions: digital encoders, diffractive decoder stacks, and the
generative architectures built from them.

Each model owns its parameters and can build static autodiff graphs for
training or batched inference.  A separate pure-numpy forward path through
the optics module serves as the non-differentiable physical reference; the
two paths agree to near machine precision and the test suite pins that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import optics
from .autodiff import Graph, Parameter
from .errors import ConfigError, DimensionError
from .optics import HeightMap, OpticalConfig, PhaseSeed
from .rng import RngStream

__all__ = [
    "EncoderConfig",
    "DecoderStack",
    "SnapshotModel",
    "IterativeModel",
    "DigitalBaseline",
    "encoderfree_phase",
    "multicolor_forward",
    "timestep_embedding",
    "count_flops",
    "quantize_phase",
    "quantize_array",
    "apply_misalignment",
]

TWO_PI = 2.0 * np.pi
MAX_DECODER_LAYERS = 5


@dataclass(frozen=True)
class EncoderConfig:
    """Three fully connected layers mapping noise (+ class embedding) to a
    phase seed: [noise_dim + embed_dim -> h1 -> h2 -> seed_n^2]."""

    noise_dim: int = 100
    class_count: int = 0  # 0 = unconditional
    embed_dim: int = 16
    hidden_dims: tuple[int, int] = (400, 400)
    seed_n: int = 64

    def __post_init__(self):
        if self.noise_dim < 1 or self.seed_n < 1:
            raise ConfigError("noise_dim and seed_n must be positive")
        if len(self.hidden_dims) != 2:
            raise ConfigError("exactly two hidden layer widths expected")
        if self.class_count and self.embed_dim < 1:
            raise ConfigError("conditional encoder needs embed_dim >= 1")

    @property
    def input_dim(self) -> int:
        return self.noise_dim + (self.embed_dim if self.class_count else 0)


class DecoderStack:
    """One to five learnable phase surfaces separated by free space.

    Raw height parameters are unconstrained; the physical surface is their
    fractional part (one 2*pi cycle at lambda_ref), which the forward pass
    applies identically in the graph and the reference path.
    """

    def __init__(self, layers: list[Parameter], lambda_ref: float):
        if not 1 <= len(layers) <= MAX_DECODER_LAYERS:
            raise ConfigError(f"decoder depth must be in [1, {MAX_DECODER_LAYERS}]")
        sides = {p.data.shape for p in layers}
        if len(sides) != 1:
            raise ConfigError(f"decoder layers disagree on grid size: {sides}")
        self.layers = layers
        self.lambda_ref = lambda_ref

    def __len__(self):
        return len(self.layers)

    @property
    def grid_n(self) -> int:
        return self.layers[0].data.shape[0]

    def height_maps(self) -> list[HeightMap]:
        return [HeightMap(p.data - np.floor(p.data)) for p in self.layers]

    def phase_coef(self, wavelength: float) -> float:
        return TWO_PI * self.lambda_ref / wavelength


def timestep_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape [batch, width]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def encoderfree_phase(j_t: np.ndarray) -> np.ndarray:
    """Min-max intensity-to-phase mapping; constant images give zero phase.

    Affine-invariant: a*J + b (a > 0) maps to the same phases as J.
    """
    j_t = np.asarray(j_t, dtype=np.float64)
    axes = tuple(range(j_t.ndim - 2, j_t.ndim))
    lo = j_t.min(axis=axes, keepdims=True)
    hi = j_t.max(axis=axes, keepdims=True)
    return TWO_PI * (j_t - lo) / (hi - lo + 1e-12)


def _lrelu(x):
    return np.where(x > 0, x, 0.01 * x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _OpticalModelBase:
    """Shared machinery: parameter init, graph cache, optical chain."""

    def __init__(self, encoder: EncoderConfig, optics_cfg: OpticalConfig,
                 decoder_layers: int = 1, eta_target: float = 0.0,
                 eta_weight: float = 0.0, rng_seed: int = 0,
                 precision: str = "f64", phase_bits: int = 0,
                 replication: int | None = None, lambda_ref: float | None = None):
        self.encoder = encoder
        self.optics = optics_cfg
        self.eta_target = float(eta_target)
        self.eta_weight = float(eta_weight)
        self.rng_seed = int(rng_seed)
        self.precision = precision
        self.phase_bits = int(phase_bits)
        self.replication = replication or optics.seed_replication(
            encoder.seed_n, optics_cfg.grid_n
        )
        side = encoder.seed_n * self.replication
        if side > optics_cfg.grid_n:
            raise ConfigError(
                f"seed {encoder.seed_n} x replication {self.replication} exceeds grid"
            )
        self.input_power = float(side * side)
        self.lambda_ref = lambda_ref or optics_cfg.wavelength
        self._graphs: dict = {}
        self._init_params(decoder_layers)

    # -- parameters --------------------------------------------------------

    def _init_params(self, decoder_layers: int):
        rng = RngStream(f"{self.kind}-init", self.rng_seed)
        enc = self.encoder
        dims = [enc.input_dim, *enc.hidden_dims, enc.seed_n**2]
        dtype = np.float64 if self.precision == "f64" else np.float32
        self.weights, self.biases = [], []
        for i in range(3):
            std = np.sqrt(2.0 / dims[i]) if i < 2 else np.sqrt(1.0 / dims[i])
            w = (std * rng.child(f"W{i}").normal((dims[i], dims[i + 1]))).astype(dtype)
            self.weights.append(Parameter(f"enc.W{i}", w))
            self.biases.append(Parameter(f"enc.b{i}", np.zeros(dims[i + 1], dtype=dtype)))
        self.class_embed = None
        if enc.class_count:
            e = 0.5 * rng.child("embed").normal((enc.class_count, enc.embed_dim))
            self.class_embed = Parameter("enc.embed", e.astype(dtype))
        heights = [
            0.02 * rng.child(f"H{i}").uniform((self.optics.grid_n, self.optics.grid_n))
            for i in range(decoder_layers)
        ]
        self.decoder = DecoderStack(
            [Parameter(f"dec.h{i}", h.astype(dtype)) for i, h in enumerate(heights)],
            self.lambda_ref,
        )

    @property
    def parameters(self) -> list[Parameter]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        if self.class_embed is not None:
            params.append(self.class_embed)
        params += self.decoder.layers
        return params

    @property
    def encoder_parameters(self) -> list[Parameter]:
        params = [p for pair in zip(self.weights, self.biases) for p in pair]
        if self.class_embed is not None:
            params.append(self.class_embed)
        return params

    def invalidate_graphs(self):
        self._graphs.clear()

    # -- graph construction --------------------------------------------------

    def _aperture(self) -> np.ndarray:
        n = self.optics.grid_n
        side = self.encoder.seed_n * self.replication
        o = (n - side) // 2
        mask = np.zeros((n, n))
        mask[o : o + side, o : o + side] = 1.0
        return mask

    def _chain_distances(self) -> list[float]:
        cfg = self.optics
        mids = [cfg.d_between_decoders] * (len(self.decoder) - 1)
        return [cfg.d_seed_to_decoder, *mids, cfg.d_decoder_to_sensor]

    def _build_optical_chain(self, g: Graph, phi_seed, wavelength: float, jitter: bool):
        """phi seed [B,s,s] -> (raw sensor image node, shift nodes)."""
        cfg = self.optics
        if self.phase_bits:
            phi_seed = g.quantize_st(phi_seed, self.phase_bits, TWO_PI)
        grid_phi = g.replicate_embed(phi_seed, self.replication, cfg.grid_n)
        u = g.hadamard(g.complex_from_phase(grid_phi), self._aperture())
        distances = self._chain_distances()
        coef = self.decoder.phase_coef(wavelength)
        shift_nodes = []
        for i, h_param in enumerate(self.decoder.layers):
            u = self._propagate_node(g, u, distances[i], wavelength)
            h = g.parameter(h_param)
            if self.phase_bits:
                h = g.quantize_st(h, self.phase_bits, 1.0)
            if jitter:
                h = g.shift_bilinear(h, 0.0, 0.0)
                shift_nodes.append(h)
            u = g.modulate_height(u, h, coef)
        u = self._propagate_node(g, u, distances[-1], wavelength)
        image_raw = g.sqmag(g.crop(u, cfg.sensor_region))
        return image_raw, shift_nodes

    def _propagate_node(self, g: Graph, u, z: float, wavelength: float):
        if z == 0:
            return u
        h = optics.transfer_function(self.optics, z, wavelength)
        if self.precision == "f32":
            h = h.astype(np.complex64)
        return g.ifft2(g.hadamard(g.fft2(u), h))

    def _encoder_nodes(self, g: Graph, x):
        h1 = g.act(g.fc(x, g.parameter(self.weights[0]), g.parameter(self.biases[0])),
                   "leaky_relu")
        h2 = g.act(g.fc(h1, g.parameter(self.weights[1]), g.parameter(self.biases[1])),
                   "leaky_relu")
        z = g.fc(h2, g.parameter(self.weights[2]), g.parameter(self.biases[2]))
        s = self.encoder.seed_n
        return g.reshape(g.phase_encode(z), (-1, s, s))

    # -- pure reference path ---------------------------------------------------

    def _seed_phases(self, noise: np.ndarray, labels=None, embeddings=None) -> np.ndarray:
        """Encoder applied in plain numpy; returns [B, s, s] phases."""
        x = np.atleast_2d(np.asarray(noise, dtype=self.weights[0].data.dtype))
        if self.encoder.class_count:
            if embeddings is None:
                if labels is None:
                    raise ValueError("conditional encoder requires labels or embeddings")
                labels = np.atleast_1d(labels)
                if (labels < 0).any() or (labels >= self.encoder.class_count).any():
                    raise ValueError(f"label out of range [0, {self.encoder.class_count})")
                embeddings = self.class_embed.data[labels.astype(np.int64)]
            x = np.concatenate([x, np.atleast_2d(embeddings).astype(x.dtype)], axis=1)
        h = _lrelu(x @ self.weights[0].data + self.biases[0].data)
        h = _lrelu(h @ self.weights[1].data + self.biases[1].data)
        z = h @ self.weights[2].data + self.biases[2].data
        phi = TWO_PI * _sigmoid(z)
        s = self.encoder.seed_n
        return phi.reshape(-1, s, s)

    def encode_seed(self, noise: np.ndarray, class_label=None, embedding=None) -> PhaseSeed:
        """Noise (+ optional class) to a single phase seed, deterministically."""
        phi = self._seed_phases(noise, class_label, embedding)[0]
        if self.phase_bits:
            phi = quantize_array(phi, self.phase_bits, TWO_PI)
        # clip the open-interval asymptote onto the [0, 2*pi) seed domain
        return PhaseSeed(np.minimum(phi, np.nextafter(TWO_PI, 0.0)))

    def snapshot_forward(self, seed: PhaseSeed, wavelength: float | None = None):
        """Reference optical chain for one seed: (raw image, EfficiencyReport)."""
        lam = wavelength or self.optics.wavelength
        field = optics.embed_seed(seed, self.optics, lam, self.replication)
        distances = self._chain_distances()
        maps = self.decoder.height_maps()
        if self.phase_bits:
            maps = [quantize_phase(m, self.phase_bits) for m in maps]
        for i, hm in enumerate(maps):
            field = optics.propagate(field, distances[i], self.optics.band_limit)
            field = optics.modulate_phase(
                field, optics.decoder_phase_at(hm, lam, self.lambda_ref)
            )
        field = optics.propagate(field, distances[-1], self.optics.band_limit)
        image = optics.detect_intensity(field, self.optics.sensor_region)
        report = optics.diffraction_efficiency(
            field, self.optics.sensor_region, self.input_power
        )
        return image, report


class SnapshotModel(_OpticalModelBase):
    """Single-pass optical generator distilled from teacher pairs."""

    kind = "snapshot"

    def build_graph(self, batch: int, train: bool, wavelength: float | None = None,
                    jitter: bool = False):
        lam = wavelength or self.optics.wavelength
        key = (batch, train, lam, jitter)
        if key in self._graphs:
            return self._graphs[key]
        g = Graph(self.precision)
        noise = g.input("noise")
        if self.encoder.class_count:
            emb = g.embed(g.parameter(self.class_embed), g.input("labels"))
            x = g.concat(noise, emb)
        else:
            x = noise
        phi = self._encoder_nodes(g, x)
        image_raw, shifts = self._build_optical_chain(g, phi, lam, jitter)
        image = g.normalize_max(image_raw)
        eta = g.scale(g.power_mean(image_raw), 1.0 / self.input_power)
        handles = {"graph": g, "image": image, "image_raw": image_raw, "eta": eta,
                   "shifts": shifts}
        if train:
            loss_fit = g.mse(image, g.input("target"))
            penalty = g.eff_penalty(eta, self.eta_target, self.eta_weight)
            handles["loss"] = g.add(loss_fit, penalty)
            handles["loss_fit"] = loss_fit
        self._graphs[key] = handles
        return handles

    def generate(self, noise: np.ndarray, labels=None, embeddings=None,
                 wavelength: float | None = None, return_eta: bool = False):
        """Batched inference: normalized [0, 1] sensor images."""
        noise = np.atleast_2d(noise)
        h = self.build_graph(noise.shape[0], train=False, wavelength=wavelength)
        g = h["graph"]
        feeds = {"noise": noise}
        if self.encoder.class_count:
            if embeddings is not None:
                # bypass the lookup by feeding a pre-mixed embedding is not
                # possible through the embed node; run the pure path instead
                return self._generate_pure(noise, embeddings, wavelength, return_eta)
            if labels is None:
                raise ValueError("conditional model requires labels")
            feeds["labels"] = np.atleast_1d(labels)
        g.forward(feeds)
        images = h["image"].value.copy()
        if not return_eta:
            return images
        raw = h["image_raw"].value
        etas = raw.sum(axis=(1, 2)) / self.input_power
        return images, etas

    def _generate_pure(self, noise, embeddings, wavelength, return_eta):
        phis = self._seed_phases(noise, embeddings=embeddings)
        images, etas = [], []
        for phi in phis:
            if self.phase_bits:
                phi = quantize_array(phi, self.phase_bits, TWO_PI)
            seed = PhaseSeed(np.minimum(phi, np.nextafter(TWO_PI, 0.0)))
            img, rep = self.snapshot_forward(seed, wavelength)
            images.append(img / (img.max() + 1e-12))
            etas.append(rep.eta)
        images = np.stack(images)
        return (images, np.asarray(etas)) if return_eta else images

    def config_dict(self) -> dict:
        return _base_config_dict(self)

    @classmethod
    def from_config(cls, cfg: dict) -> "SnapshotModel":
        return _model_from_config(cls, cfg)


class IterativeModel(_OpticalModelBase):
    """Timestep-conditioned optical denoiser predicting the clean sample.

    The encoder consumes the flattened, per-image standardized noisy sample
    with an optional sinusoidal timestep embedding appended; the encoder-free
    variant maps intensities straight to seed phases instead.  The detected
    intensity is max-normalized per image and affinely mapped to the signed
    data range by two trained scalars.
    """

    kind = "iterative"

    def __init__(self, *args, image_n: int = 28, timestep_embed: int = 32,
                 encoder_free: bool = False, **kwargs):
        self.image_n = int(image_n)
        self.timestep_embed = int(timestep_embed)
        self.encoder_free = bool(encoder_free)
        super().__init__(*args, **kwargs)
        if self.encoder_free and self.encoder.seed_n != self.image_n:
            raise ConfigError(
                "encoder-free model maps intensities to phases directly, so "
                f"seed_n ({self.encoder.seed_n}) must equal image_n ({self.image_n})"
            )

    def _init_params(self, decoder_layers: int):
        if self.encoder_free:
            # no digital encoder: seed side equals the image side
            rng = RngStream(f"{self.kind}-init", self.rng_seed)
            dtype = np.float64 if self.precision == "f64" else np.float32
            self.weights, self.biases, self.class_embed = [], [], None
            heights = [
                0.02 * rng.child(f"H{i}").uniform((self.optics.grid_n, self.optics.grid_n))
                for i in range(decoder_layers)
            ]
            self.decoder = DecoderStack(
                [Parameter(f"dec.h{i}", h.astype(dtype)) for i, h in enumerate(heights)],
                self.lambda_ref,
            )
        else:
            super()._init_params(decoder_layers)
        dtype = np.float64 if self.precision == "f64" else np.float32
        self.out_gain = Parameter("out.gain", np.asarray(2.0, dtype=dtype))
        self.out_bias = Parameter("out.bias", np.asarray(-1.0, dtype=dtype))

    @property
    def parameters(self) -> list[Parameter]:
        base = [] if self.encoder_free else [
            p for pair in zip(self.weights, self.biases) for p in pair
        ]
        return base + self.decoder.layers + [self.out_gain, self.out_bias]

    def expected_input_dim(self) -> int:
        return self.image_n**2 + self.timestep_embed

    def build_graph(self, batch: int, train: bool, jitter: bool = False):
        lam = self.optics.wavelength
        key = (batch, train, jitter)
        if key in self._graphs:
            return self._graphs[key]
        g = Graph(self.precision)
        if self.encoder_free:
            phi = g.input("phi")  # [B, s, s] precomputed intensity-to-phase seed
        else:
            phi = self._encoder_nodes(g, g.input("x"))
        image_raw, shifts = self._build_optical_chain(g, phi, lam, jitter)
        norm = g.normalize_max(image_raw)
        pred = g.affine_scalar(norm, g.parameter(self.out_gain), g.parameter(self.out_bias))
        eta = g.scale(g.power_mean(image_raw), 1.0 / self.input_power)
        handles = {"graph": g, "pred": pred, "image_raw": image_raw, "eta": eta,
                   "shifts": shifts}
        if train:
            loss_fit = g.mse(pred, g.input("target"))
            penalty = g.eff_penalty(eta, self.eta_target, self.eta_weight)
            handles["loss"] = g.add(loss_fit, penalty)
            handles["loss_fit"] = loss_fit
        self._graphs[key] = handles
        return handles

    def encoder_inputs(self, j_t: np.ndarray, t) -> np.ndarray:
        """Standardize, flatten, and append the timestep embedding."""
        j_t = np.asarray(j_t, dtype=np.float64)
        b = j_t.shape[0]
        flat = j_t.reshape(b, -1)
        mu = flat.mean(axis=1, keepdims=True)
        sd = flat.std(axis=1, keepdims=True)
        x = (flat - mu) / (sd + 1e-8)
        if self.timestep_embed:
            t = np.broadcast_to(np.atleast_1d(t), (b,))
            x = np.concatenate([x, timestep_embedding(t, self.timestep_embed)], axis=1)
        dtype = np.float64 if self.precision == "f64" else np.float32
        return x.astype(dtype)

    def predict_clean(self, j_t: np.ndarray, t, t_max: int | None = None) -> np.ndarray:
        """Denoised prediction at sensor resolution, in the signed data range."""
        j_t = np.asarray(j_t)
        if j_t.ndim == 2:
            j_t = j_t[None]
        b = j_t.shape[0]
        if t_max is not None:
            if np.min(np.atleast_1d(t)) < 1 or np.max(np.atleast_1d(t)) > t_max:
                raise ValueError(f"timestep {t} outside [1, {t_max}]")
        h = self.build_graph(b, train=False)
        g = h["graph"]
        if self.encoder_free:
            dtype = np.float64 if self.precision == "f64" else np.float32
            g.forward({"phi": encoderfree_phase(j_t).astype(dtype)})
        else:
            g.forward({"x": self.encoder_inputs(j_t, t)})
        return h["pred"].value.copy()

    def config_dict(self) -> dict:
        cfg = _base_config_dict(self)
        cfg.update(
            image_n=self.image_n,
            timestep_embed=self.timestep_embed,
            encoder_free=self.encoder_free,
        )
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "IterativeModel":
        return _model_from_config(cls, cfg)


class DigitalBaseline:
    """All-digital generator: L_d stacked FC layers with a sigmoid output."""

    kind = "baseline"

    def __init__(self, noise_dim: int = 100, class_count: int = 0, embed_dim: int = 16,
                 layer_count: int = 9, hidden: int = 900, out_pixels: int = 784,
                 rng_seed: int = 0, precision: str = "f64"):
        if layer_count < 1:
            raise ConfigError("baseline needs at least one layer")
        self.noise_dim = noise_dim
        self.class_count = class_count
        self.embed_dim = embed_dim
        self.layer_count = layer_count
        self.hidden = hidden
        self.out_pixels = out_pixels
        self.rng_seed = rng_seed
        self.precision = precision
        dtype = np.float64 if precision == "f64" else np.float32
        rng = RngStream("baseline-init", rng_seed)
        in_dim = noise_dim + (embed_dim if class_count else 0)
        dims = [in_dim] + [hidden] * (layer_count - 1) + [out_pixels]
        self.weights, self.biases = [], []
        for i in range(layer_count):
            std = np.sqrt(2.0 / dims[i]) if i < layer_count - 1 else np.sqrt(1.0 / dims[i])
            w = (std * rng.child(f"W{i}").normal((dims[i], dims[i + 1]))).astype(dtype)
            self.weights.append(Parameter(f"fc.W{i}", w))
            self.biases.append(Parameter(f"fc.b{i}", np.zeros(dims[i + 1], dtype=dtype)))
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

    def build_graph(self, batch: int, train: bool):
        key = (batch, train)
        if key in self._graphs:
            return self._graphs[key]
        g = Graph(self.precision)
        x = g.input("noise")
        if self.class_count:
            x = g.concat(x, g.embed(g.parameter(self.class_embed), g.input("labels")))
        for i in range(self.layer_count):
            x = g.fc(x, g.parameter(self.weights[i]), g.parameter(self.biases[i]))
            if i < self.layer_count - 1:
                x = g.act(x, "leaky_relu")
        out = g.act(x, "sigmoid")
        handles = {"graph": g, "image": out}
        if train:
            handles["loss"] = g.mse(out, g.input("target"))
        self._graphs[key] = handles
        return handles

    def generate(self, noise: np.ndarray, labels=None) -> np.ndarray:
        noise = np.atleast_2d(noise)
        h = self.build_graph(noise.shape[0], train=False)
        feeds = {"noise": noise}
        if self.class_count:
            if labels is None:
                raise ValueError("conditional baseline requires labels")
            labels = np.atleast_1d(labels)
            if (labels < 0).any() or (labels >= self.class_count).any():
                raise ValueError(f"label out of range [0, {self.class_count})")
            feeds["labels"] = labels
        h["graph"].forward(feeds)
        return h["image"].value.copy()

    def invalidate_graphs(self):
        self._graphs.clear()

    def config_dict(self) -> dict:
        return {
            "kind": self.kind, "noise_dim": self.noise_dim,
            "class_count": self.class_count, "embed_dim": self.embed_dim,
            "layer_count": self.layer_count, "hidden": self.hidden,
            "out_pixels": self.out_pixels, "rng_seed": self.rng_seed,
            "precision": self.precision,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "DigitalBaseline":
        cfg = dict(cfg)
        cfg.pop("kind", None)
        return cls(**cfg)


def multicolor_forward(model: _OpticalModelBase, noise_triplet: np.ndarray,
                       labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Three sequential monochrome passes through the shared decoder stack.

    Returns (images [3, sensor, sensor] normalized, per-channel eta).
    """
    if len(model.optics.wavelengths) != 3:
        raise ConfigError(
            f"multicolor generation needs 3 wavelengths, got {len(model.optics.wavelengths)}"
        )
    noise_triplet = np.asarray(noise_triplet)
    if noise_triplet.shape[0] != 3:
        raise DimensionError("expected a noise triplet, one vector per channel")
    channels, etas = [], []
    for lam, noise in zip(model.optics.wavelengths, noise_triplet):
        img, eta = model.generate(noise[None], labels=labels, wavelength=lam,
                                  return_eta=True)
        channels.append(img[0])
        etas.append(eta[0])
    return np.stack(channels), np.asarray(etas)


def _fc_flops(m: int, n: int) -> int:
    return 2 * m * n + n


def count_flops(model) -> int:
    """Digital inference FLOPs: FC layers at 2*m*n + n, nonlinearities at one
    FLOP per element.  The optical chain contributes none, so optical models
    count only their encoder."""
    if isinstance(model, DigitalBaseline):
        total = 0
        for w in model.weights:
            m, n = w.data.shape
            total += _fc_flops(m, n) + n  # activation (or output sigmoid)
        return total
    if isinstance(model, _OpticalModelBase):
        if getattr(model, "encoder_free", False):
            return 0
        total = 0
        for w in model.weights:
            m, n = w.data.shape
            total += _fc_flops(m, n) + n  # hidden activations / phase encoding
        return total
    raise TypeError(f"cannot count FLOPs for {type(model).__name__}")


def quantize_array(values: np.ndarray, bits: int, cycle: float) -> np.ndarray:
    """Snap to the nearest of 2^bits uniform levels spanning one cycle."""
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must lie in [1, 16], got {bits}")
    levels = 2**bits
    step = cycle / levels
    return (np.rint(np.asarray(values) / step) % levels) * step


def quantize_phase(obj, bits: int):
    """Quantize a HeightMap (cycle 1) or PhaseSeed (cycle 2*pi); idempotent."""
    if isinstance(obj, HeightMap):
        return HeightMap(quantize_array(obj.values, bits, 1.0))
    if isinstance(obj, PhaseSeed):
        return PhaseSeed(quantize_array(obj.values, bits, TWO_PI))
    raise TypeError(f"expected HeightMap or PhaseSeed, got {type(obj).__name__}")


def apply_misalignment(decoder: DecoderStack, shifts) -> DecoderStack:
    """Laterally shifted view of a decoder stack.

    Integer parts shift with zero padding; fractional parts interpolate the
    height map bilinearly.  Shifts are bounded to an eighth of the grid.
    """
    from .autodiff import bilinear_shift

    if len(shifts) != len(decoder):
        raise ValueError(f"need {len(decoder)} shift pairs, got {len(shifts)}")
    bound = decoder.grid_n / 8
    shifted = []
    for p, (dx, dy) in zip(decoder.layers, shifts):
        if abs(dx) > bound or abs(dy) > bound:
            raise ValueError(f"shift ({dx}, {dy}) exceeds bound {bound}")
        shifted.append(Parameter(p.name, bilinear_shift(p.data, float(dx), float(dy))))
    return DecoderStack(shifted, decoder.lambda_ref)


def _base_config_dict(model: _OpticalModelBase) -> dict:
    enc = model.encoder
    cfg = model.optics
    return {
        "kind": model.kind,
        "noise_dim": enc.noise_dim, "class_count": enc.class_count,
        "embed_dim": enc.embed_dim, "hidden_dims": list(enc.hidden_dims),
        "seed_n": enc.seed_n,
        "grid_n": cfg.grid_n, "pitch": cfg.pitch,
        "wavelengths": list(cfg.wavelengths),
        "d1": cfg.d_seed_to_decoder, "d2": cfg.d_between_decoders,
        "d3": cfg.d_decoder_to_sensor,
        "sensor_n": cfg.sensor_region.shape[0], "band_limit": cfg.band_limit,
        "decoder_layers": len(model.decoder), "eta_target": model.eta_target,
        "eta_weight": model.eta_weight, "rng_seed": model.rng_seed,
        "precision": model.precision, "phase_bits": model.phase_bits,
        "replication": model.replication, "lambda_ref": model.lambda_ref,
    }


def _model_from_config(cls, cfg: dict):
    enc = EncoderConfig(
        noise_dim=cfg["noise_dim"], class_count=cfg["class_count"],
        embed_dim=cfg["embed_dim"], hidden_dims=tuple(cfg["hidden_dims"]),
        seed_n=cfg["seed_n"],
    )
    opt = OpticalConfig(
        grid_n=cfg["grid_n"], pitch=cfg["pitch"],
        wavelengths=tuple(cfg["wavelengths"]),
        d_seed_to_decoder=cfg["d1"], d_between_decoders=cfg["d2"],
        d_decoder_to_sensor=cfg["d3"],
        sensor_region=optics.SensorRegion.centered(cfg["grid_n"], cfg["sensor_n"]),
        band_limit=cfg["band_limit"],
    )
    kwargs = {}
    if cls is IterativeModel:
        kwargs = {
            "image_n": cfg.get("image_n", 28),
            "timestep_embed": cfg.get("timestep_embed", 32),
            "encoder_free": cfg.get("encoder_free", False),
        }
    return cls(
        enc, opt, decoder_layers=cfg["decoder_layers"], eta_target=cfg["eta_target"],
        eta_weight=cfg["eta_weight"], rng_seed=cfg["rng_seed"],
        precision=cfg["precision"], phase_bits=cfg["phase_bits"],
        replication=cfg["replication"], lambda_ref=cfg["lambda_ref"], **kwargs,
    )
