"""Adversarial autoencoder core shared by the data- and anomaly-feature
modules: conv encoder with linear/softmax heads, conv decoder, prior
discriminators, and the three-phase trainer (reconstruction, regularization,
semi-supervised).

The encoder trunk pools (6, 300) -> (3, 150) -> (3, 75) -> (3, 38): the time
axis is pooled once (it cannot be halved evenly again), later stages pool the
frequency axis only. The decoder projects the latent code to the smallest
grid and mirrors the schedule with upsampling, ending in a linear map back to
6*300 cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .errors import InvalidArgument, InvalidConfig, MissingDecoder, NumericError
from .simulate import TILE_COLS, TILE_ROWS, N_CLASSES

N_FEATURES = 50          # continuous feature width
CONT_PRIOR_DIM = 5       # leading features regularized toward N(0, 1)
_GRID = (3, 38, 32)      # smallest spatial grid of the conv stack


def encoder_trunk() -> nn.Chain:
    return nn.Chain(
        [
            nn.Conv3x3(32, "tanh"), nn.MaxPool2(pool_rows=True, pool_cols=True),
            nn.Conv3x3(32, "tanh"), nn.MaxPool2(pool_rows=False, pool_cols=True),
            nn.Conv3x3(32, "tanh"), nn.MaxPool2(pool_rows=False, pool_cols=True),
        ],
        (TILE_ROWS, TILE_COLS, 1),
    )


def feature_head() -> nn.Chain:
    return nn.Chain([nn.Dense(N_FEATURES, "linear")], _GRID)


def class_head() -> nn.Chain:
    return nn.Chain([nn.Dense(N_CLASSES, "softmax")], _GRID)


def decoder_chain(latent_dim: int) -> nn.Chain:
    return nn.Chain(
        [
            nn.Dense(int(np.prod(_GRID)), "tanh"),
            nn.Reshape(_GRID),
            nn.Conv3x3(32, "tanh"), nn.Upsample2(rows=False, cols=True),
            nn.Conv3x3(64, "tanh"), nn.Upsample2(rows=False, cols=True),
            nn.Conv3x3(64, "tanh"), nn.Upsample2(rows=True, cols=True),
            nn.Conv3x3(1, "tanh"),
            nn.Dense(TILE_ROWS * TILE_COLS, "linear"),
        ],
        (latent_dim,),
    )


def discriminator_chain(input_dim: int) -> nn.Chain:
    """Two tanh hidden layers of width 64 and a 2-way softmax: index 0 is the
    'drawn from the prior' class, index 1 the 'produced by the encoder' class."""
    return nn.Chain(
        [nn.Dense(64, "tanh"), nn.Dense(64, "tanh"), nn.Dense(2, "softmax")],
        (input_dim,),
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")


@dataclass
class Normalization:
    lo_db: float
    hi_db: float

    def apply(self, values: np.ndarray) -> np.ndarray:
        span = max(self.hi_db - self.lo_db, 1e-6)
        return (2.0 * (values - self.lo_db) / span - 1.0).astype(np.float32)

    @classmethod
    def fit(cls, stacks: np.ndarray) -> "Normalization":
        return cls(lo_db=float(stacks.min()), hi_db=float(stacks.max()))


GLOBAL_DECODER = ""  # decoder-table key for the shared decoder


class AaeModel:
    """Global encoder, decoder table keyed by sensor id, and discriminators.

    Until specialization the table holds one shared decoder under
    GLOBAL_DECODER which serves every sensor; afterwards lookups are strict.
    """

    def __init__(self, with_class_head: bool, rng: np.random.Generator):
        self.with_class_head = with_class_head
        self.trunk = encoder_trunk()
        self.feat_head = feature_head()
        self.trunk_p = self.trunk.init_params(rng)
        self.feat_p = self.feat_head.init_params(rng)
        if with_class_head:
            self.cls_head = class_head()
            self.cls_p = self.cls_head.init_params(rng)
            latent = N_FEATURES + N_CLASSES
        else:
            self.cls_head = None
            self.cls_p = None
            latent = N_FEATURES
        self.latent_dim = latent
        self.decoder = decoder_chain(latent)
        self.decoders: dict[str, nn.Params] = {GLOBAL_DECODER: self.decoder.init_params(rng)}
        self.specialized = False
        self.disc_cont = discriminator_chain(CONT_PRIOR_DIM)
        self.disc_cont_p = self.disc_cont.init_params(rng)
        if with_class_head:
            self.disc_cat = discriminator_chain(N_CLASSES)
            self.disc_cat_p = self.disc_cat.init_params(rng)
        else:
            self.disc_cat = None
            self.disc_cat_p = None
        self.norm = Normalization(0.0, 1.0)
        self.loss_trace: list[dict] = []

    # -- plumbing ----------------------------------------------------------

    def encoder_tensors(self) -> list[np.ndarray]:
        out = list(self.trunk_p.tensors) + list(self.feat_p.tensors)
        if self.cls_p is not None:
            out += list(self.cls_p.tensors)
        return out

    def decoder_params_for(self, sensor_id: str) -> nn.Params:
        if self.specialized:
            if sensor_id not in self.decoders:
                raise MissingDecoder(f"no decoder trained for sensor {sensor_id!r}")
            return self.decoders[sensor_id]
        return self.decoders[GLOBAL_DECODER]

    # -- forward passes ------------------------------------------------------

    def encode(self, x: np.ndarray, want_cache: bool = False):
        """x: (B, 6, 300) normalized. Returns (f, probs, caches)."""
        t_out, t_cache = self.trunk.forward(self.trunk_p, x[..., None])
        f, f_cache = self.feat_head.forward(self.feat_p, t_out)
        probs = None
        c_cache = None
        if self.cls_head is not None:
            probs, c_cache = self.cls_head.forward(self.cls_p, t_out)
        caches = (t_cache, f_cache, c_cache) if want_cache else None
        return f, probs, caches

    def latent(self, f: np.ndarray, probs: np.ndarray | None) -> np.ndarray:
        if self.with_class_head:
            return np.concatenate([probs, f], axis=1)
        return f

    def decode(self, params: nn.Params, z: np.ndarray, want_cache: bool = False):
        flat, cache = self.decoder.forward(params, z)
        return flat.reshape(-1, TILE_ROWS, TILE_COLS), (cache if want_cache else None)

    def encoder_backward(self, caches, g_f: np.ndarray | None, g_probs: np.ndarray | None):
        """Combine head gradients into trunk-input space; returns per-chain grads."""
        t_cache, f_cache, c_cache = caches
        g_trunk_out = None
        f_grads = None
        c_grads = None
        if g_f is not None:
            f_grads, g1 = self.feat_head.backward(f_cache, g_f)
            g_trunk_out = g1
        if g_probs is not None:
            c_grads, g2 = self.cls_head.backward(c_cache, g_probs)
            g_trunk_out = g2 if g_trunk_out is None else g_trunk_out + g2
        t_grads, _ = self.trunk.backward(t_cache, g_trunk_out)
        return t_grads, f_grads, c_grads


def _onehot(idx: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(idx), width), dtype=np.float32)
    out[np.arange(len(idx)), idx] = 1.0
    return out


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def disc_losses_per_sample(chain: nn.Chain, params: nn.Params, x: np.ndarray) -> np.ndarray:
    """-log P(prior | x) per row: the per-tile discriminator loss channel."""
    probs, _ = chain.forward(params, x)
    return -np.log(np.clip(probs[:, 0].astype(np.float64), 1e-12, 1.0))


def train_aae(
    x: np.ndarray,
    labels: Sequence[int | None] | None,
    cfg: TrainConfig,
    with_class_head: bool,
) -> AaeModel:
    """Three-phase AAE training on (N, 6, 300) dB values.

    Phase a minimizes reconstruction MSE; phase b trains the discriminators on
    prior-vs-encoding batches and then updates the encoder adversarially;
    phase c (class-head models only) runs cross-entropy on the labeled subset.
    """
    if x.ndim != 3 or x.shape[1:] != (TILE_ROWS, TILE_COLS):
        raise InvalidArgument(f"expected (N, {TILE_ROWS}, {TILE_COLS}) inputs, got {x.shape}")
    rng = np.random.default_rng(cfg.seed)
    adam = nn.AdamConfig(learning_rate=cfg.learning_rate)
    model = AaeModel(with_class_head, rng)
    model.norm = Normalization.fit(x)
    xn = model.norm.apply(x)

    labeled_idx = np.array([], dtype=int)
    onehot_labels = None
    if with_class_head:
        if labels is None or not any(l is not None for l in labels):
            raise InvalidConfig("semi-supervised phase needs at least one labeled tile")
        labeled_idx = np.array([i for i, l in enumerate(labels) if l is not None])
        onehot_labels = _onehot(np.array([labels[i] for i in labeled_idx]), N_CLASSES)

    dec_p = model.decoders[GLOBAL_DECODER]
    n = len(xn)
    for epoch in range(cfg.epochs):
        stats = {"recon": 0.0, "adv": 0.0, "disc_cont": 0.0, "disc_cat": 0.0, "semi": 0.0}
        n_batches = 0
        labeled_order = rng.permutation(len(labeled_idx)) if len(labeled_idx) else None
        labeled_pos = 0
        for batch in _batches(n, cfg.batch_size, rng):
            xb = xn[batch]
            bsz = len(batch)

            # (a) reconstruction
            f, probs, caches = model.encode(xb, want_cache=True)
            z = model.latent(f, probs)
            xhat, d_cache = model.decode(dec_p, z, want_cache=True)
            loss, g = nn.mse_loss(xhat, xb)
            stats["recon"] += loss
            d_grads, g_z = model.decoder.backward(d_cache, g.reshape(bsz, -1))
            if with_class_head:
                g_probs, g_f = g_z[:, :N_CLASSES], g_z[:, N_CLASSES:]
            else:
                g_probs, g_f = None, g_z
            t_grads, f_grads, c_grads = model.encoder_backward(caches, g_f, g_probs)
            nn.adam_step(dec_p, d_grads, adam)
            nn.adam_step(model.trunk_p, t_grads, adam)
            nn.adam_step(model.feat_p, f_grads, adam)
            if c_grads is not None:
                nn.adam_step(model.cls_p, c_grads, adam)

            # (b) regularization: discriminators, then the encoder adversarially
            f, probs, caches = model.encode(xb, want_cache=True)
            f5 = f[:, :CONT_PRIOR_DIM]
            prior5 = rng.standard_normal((bsz, CONT_PRIOR_DIM)).astype(np.float32)
            d_in = np.vstack([prior5, f5])
            d_target = _onehot(np.array([0] * bsz + [1] * bsz), 2)
            d_out, d_cache = model.disc_cont.forward(model.disc_cont_p, d_in)
            d_loss, d_g = nn.cross_entropy_loss(d_out, d_target)
            stats["disc_cont"] += d_loss
            dc_grads, _ = model.disc_cont.backward(d_cache, d_g)
            nn.adam_step(model.disc_cont_p, dc_grads, adam)
            if with_class_head:
                prior_cat = _onehot(rng.integers(0, N_CLASSES, size=bsz), N_CLASSES)
                k_in = np.vstack([prior_cat, probs])
                k_out, k_cache = model.disc_cat.forward(model.disc_cat_p, k_in)
                k_loss, k_g = nn.cross_entropy_loss(k_out, d_target)
                stats["disc_cat"] += k_loss
                dk_grads, _ = model.disc_cat.backward(k_cache, k_g)
                nn.adam_step(model.disc_cat_p, dk_grads, adam)

            # encoder fooling pass against the updated discriminators
            a_out, a_cache = model.disc_cont.forward(model.disc_cont_p, f5)
            a_loss, a_g = nn.cross_entropy_loss(a_out, _onehot(np.zeros(bsz, dtype=int), 2))
            stats["adv"] += a_loss
            _, g_f5 = model.disc_cont.backward(a_cache, a_g)
            g_f = np.zeros_like(f)
            g_f[:, :CONT_PRIOR_DIM] = g_f5
            g_probs = None
            if with_class_head:
                b_out, b_cache = model.disc_cat.forward(model.disc_cat_p, probs)
                b_loss, b_g = nn.cross_entropy_loss(b_out, _onehot(np.zeros(bsz, dtype=int), 2))
                stats["adv"] += b_loss
                _, g_probs = model.disc_cat.backward(b_cache, b_g)
            t_grads, f_grads, c_grads = model.encoder_backward(caches, g_f, g_probs)
            nn.adam_step(model.trunk_p, t_grads, adam)
            nn.adam_step(model.feat_p, f_grads, adam)
            if c_grads is not None:
                nn.adam_step(model.cls_p, c_grads, adam)

            # (c) semi-supervised classification on the labeled subset
            if with_class_head and len(labeled_idx):
                take = min(cfg.batch_size, len(labeled_idx))
                if labeled_pos + take > len(labeled_idx):
                    labeled_order = rng.permutation(len(labeled_idx))
                    labeled_pos = 0
                sel = labeled_order[labeled_pos:labeled_pos + take]
                labeled_pos += take
                lx = xn[labeled_idx[sel]]
                ly = onehot_labels[sel]
                _, probs, caches = model.encode(lx, want_cache=True)
                s_loss, s_g = nn.cross_entropy_loss(probs, ly)
                stats["semi"] += s_loss
                t_grads, _, c_grads = model.encoder_backward(caches, None, s_g)
                nn.adam_step(model.trunk_p, t_grads, adam)
                nn.adam_step(model.cls_p, c_grads, adam)
            n_batches += 1

        trace = {k: v / max(n_batches, 1) for k, v in stats.items()}
        trace["epoch"] = epoch
        model.loss_trace.append(trace)
        if not np.isfinite(trace["recon"]):
            raise NumericError(f"training diverged at epoch {epoch}: recon loss is not finite")
    return model


def train_decoder_only(
    model: AaeModel,
    params: nn.Params,
    x_norm: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> nn.Params:
    """Fine-tune one decoder on already-normalized tiles; the encoder is read-only."""
    adam = nn.AdamConfig(learning_rate=cfg.learning_rate)
    for _ in range(cfg.epochs):
        for batch in _batches(len(x_norm), cfg.batch_size, rng):
            xb = x_norm[batch]
            f, probs, _ = model.encode(xb)
            z = model.latent(f, probs)
            xhat, d_cache = model.decode(params, z, want_cache=True)
            _, g = nn.mse_loss(xhat, xb)
            d_grads, _ = model.decoder.backward(d_cache, g.reshape(len(batch), -1))
            nn.adam_step(params, d_grads, adam)
    return params


def reconstruction_errors(model: AaeModel, params: nn.Params, x_norm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-tile MSE and residuals (input minus reconstruction) for one decoder."""
    f, probs, _ = model.encode(x_norm)
    z = model.latent(f, probs)
    xhat, _ = model.decode(params, z)
    residual = x_norm - xhat
    r = np.mean(np.square(residual.astype(np.float64)), axis=(1, 2))
    return r, residual.astype(np.float32)
