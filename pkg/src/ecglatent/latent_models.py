"""The seven 30-dimensional beat encoders and their training machinery.

Six network variants (AE, SAE, VAE, BetaVAE, CyclicalBetaVAE,
AnnealedBetaVAE) share one convolutional encoder-decoder and differ
only in their KL-weight schedule and whether the latent is sampled.
The seventh encoder is an exact incremental PCA baseline.
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import (
    BatchNorm,
    Conv1d,
    ConvTranspose1d,
    Dense,
    Dropout,
    Tanh,
    Tensor,
)
from .errors import NotFittedError, ParameterError, ShapeError, TrainingError
from .preprocess import BEAT_SAMPLES, SEGMENT_BOUNDS, ScalingParams, XyzBeat

LATENT_DIM = 30
DETERMINISTIC_LOG_VAR = -np.inf

VARIANTS = ("AE", "SAE", "VAE", "BetaVAE", "CyclicalBetaVAE", "AnnealedBetaVAE")

_ENCODER_FILTERS = (256, 256, 512, 512)
_DECODER_FILTERS = (512, 256, 128)  # final layer is always 3 output leads
_DENSE_WIDTH = 256
_KERNEL = 9
_STRIDE = 2
_L2 = 0.01
_DROPOUT = 0.25


# ---------------------------------------------------------------------------
# beta schedules


@dataclass
class BetaSchedule:
    kind: str = "constant"  # constant | cyclical | annealed
    constant_value: float = 1.0
    cycle_peak: float = 5.0
    cycle_epochs: int = 20
    anneal_start: float = 10.0
    anneal_epochs: int = 50

    def validate(self):
        if self.kind not in ("constant", "cyclical", "annealed"):
            raise ParameterError(f"unknown schedule kind {self.kind!r}")
        if min(self.constant_value, self.cycle_peak, self.anneal_start) < 0:
            raise ParameterError("beta values must be >= 0")
        if self.cycle_epochs < 1 or self.anneal_epochs < 1:
            raise ParameterError("schedule epoch counts must be >= 1")


def beta_at(schedule: BetaSchedule, epoch: int) -> float:
    """KL weight at a given epoch.

    Cyclical is a continuous triangle wave (0 at phase 0, peak at
    half-period); annealed decays linearly from ``anneal_start`` to 0 at
    ``anneal_epochs`` and stays 0 after.
    """
    if epoch < 0:
        raise ParameterError("epoch must be >= 0")
    if schedule.kind == "constant":
        return schedule.constant_value
    if schedule.kind == "cyclical":
        half = schedule.cycle_epochs / 2.0
        phase = epoch % schedule.cycle_epochs
        return schedule.cycle_peak * (1.0 - abs(phase / half - 1.0))
    if schedule.kind == "annealed":
        if epoch >= schedule.anneal_epochs:
            return 0.0
        return schedule.anneal_start * (1.0 - epoch / schedule.anneal_epochs)
    raise ParameterError(f"unknown schedule kind {schedule.kind!r}")


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossWeights:
    theta_p: float = 20.0
    theta_qrs: float = 10.0
    theta_t: float = 15.0

    def validate(self):
        if min(self.theta_p, self.theta_qrs, self.theta_t) < 0:
            raise ParameterError("segment weights must be >= 0")


@dataclass
class LossBreakdown:
    l_p: float
    l_qrs: float
    l_t: float
    l_e: float
    kl: float
    beta: float
    total: float


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != 3 or x.shape[2] != BEAT_SAMPLES:
        raise ShapeError(f"expected (N, 3, {BEAT_SAMPLES}) beats, got {x.shape}")
    return x


def kl_divergence(mu, log_var) -> float:
    """KL to the standard normal: summed over latent dims, batch-averaged."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    log_var = np.atleast_2d(np.asarray(log_var, dtype=np.float64))
    per_dim = -0.5 * (1.0 + log_var - mu**2 - np.exp(log_var))
    return float(per_dim.sum(axis=1).mean())


def weighted_reconstruction_loss(x, x_prime, weights: LossWeights | None = None) -> LossBreakdown:
    """Segment-weighted MSE between beats (scaled units)."""
    weights = weights or LossWeights()
    xa, xb = _as_batch(x), _as_batch(x_prime)
    if xa.shape != xb.shape:
        raise ShapeError(f"shape mismatch {xa.shape} vs {xb.shape}")
    sq = (xa - xb) ** 2
    segs = [float(sq[:, :, a:b].mean()) for a, b in SEGMENT_BOUNDS]
    l_e = weights.theta_p * segs[0] + weights.theta_qrs * segs[1] + weights.theta_t * segs[2]
    return LossBreakdown(segs[0], segs[1], segs[2], l_e, 0.0, 0.0, l_e)


def elbo_loss(x, x_prime, mu, log_var, beta: float, weights: LossWeights | None = None) -> LossBreakdown:
    """Full training objective: weighted reconstruction plus beta * KL."""
    rec = weighted_reconstruction_loss(x, x_prime, weights)
    kl = kl_divergence(mu, log_var)
    return LossBreakdown(
        rec.l_p, rec.l_qrs, rec.l_t, rec.l_e, kl, beta, rec.l_e + beta * kl
    )


def reparameterize(mu, log_var, rng: np.random.Generator) -> np.ndarray:
    """Draw z = mu + exp(log_var / 2) * eps with eps ~ N(0, I)."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    eps = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * log_var) * eps


def _elbo_graph(x_np, recon_t, mu_t, logvar_t, beta, weights, stochastic):
    """Tensor-graph ELBO; returns (total tensor, float breakdown)."""
    diff = ad.sub(recon_t, Tensor(x_np))
    sq = ad.square(diff)
    seg_ts = [ad.tmean(ad.narrow(sq, 2, a, b)) for a, b in SEGMENT_BOUNDS]
    l_e = ad.add(
        ad.add(ad.mul(seg_ts[0], weights.theta_p), ad.mul(seg_ts[1], weights.theta_qrs)),
        ad.mul(seg_ts[2], weights.theta_t),
    )
    if stochastic:
        term = ad.sub(
            ad.add(ad.add(1.0, logvar_t), ad.mul(ad.square(mu_t), -1.0)),
            ad.exp(logvar_t),
        )
        kl = ad.mul(ad.tmean(ad.tsum(term, axis=1)), -0.5)
        total = ad.add(l_e, ad.mul(kl, beta)) if beta != 0.0 else l_e
        kl_val = kl.item()
    else:
        total = l_e
        kl_val = 0.0
        beta = 0.0
    breakdown = LossBreakdown(
        seg_ts[0].item(),
        seg_ts[1].item(),
        seg_ts[2].item(),
        l_e.item(),
        kl_val,
        beta,
        l_e.item() + beta * kl_val,
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# variant configuration


@dataclass
class VariantConfig:
    variant: str = "SAE"
    schedule: BetaSchedule = field(default_factory=BetaSchedule)
    stochastic: bool = True
    scale: float = 1.0 / 16.0
    latent_dim: int = LATENT_DIM
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "VariantConfig":
        """Canonical schedule and sampling mode for each named variant."""
        table = {
            "AE": (BetaSchedule("constant", constant_value=0.0), False),
            "SAE": (BetaSchedule("constant", constant_value=0.0), True),
            "VAE": (BetaSchedule("constant", constant_value=1.0), True),
            "BetaVAE": (BetaSchedule("constant", constant_value=3.0), True),
            "CyclicalBetaVAE": (BetaSchedule("cyclical", cycle_peak=5.0, cycle_epochs=20), True),
            "AnnealedBetaVAE": (BetaSchedule("annealed", anneal_start=10.0, anneal_epochs=50), True),
        }
        if variant not in table:
            raise ParameterError(f"unknown variant {variant!r}; choose one of {VARIANTS}")
        schedule, stochastic = table[variant]
        cfg = cls(variant=variant, schedule=schedule, stochastic=stochastic, **overrides)
        cfg.validate()
        return cfg

    def validate(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        self.schedule.validate()
        if self.scale <= 0:
            raise ParameterError("architecture scale must be > 0")
        if self.latent_dim < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("latent_dim/epochs/batch_size out of range")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if self.variant == "AE" and self.stochastic:
            raise ParameterError("AE must be deterministic")
        if self.variant != "AE" and not self.stochastic:
            raise ParameterError(f"{self.variant} must be stochastic")
        fixed = {"SAE": 0.0, "VAE": 1.0, "BetaVAE": 3.0}
        if self.variant in fixed:
            if self.schedule.kind != "constant" or self.schedule.constant_value != fixed[self.variant]:
                raise ParameterError(
                    f"{self.variant} requires constant beta {fixed[self.variant]}"
                )


@dataclass
class LatentEncoding:
    """Encoder output for one beat: mu, log sigma^2, and the sampled z."""

    mu: np.ndarray
    log_var: np.ndarray
    z: np.ndarray
    epsilon_seed: int
    deterministic: bool = False


# ---------------------------------------------------------------------------
# the network


def _scaled(n: int, scale: float) -> int:
    return max(1, math.ceil(n * scale))


class VaeNetwork:
    """Conv encoder -> (mu, log_var) heads -> sampled z -> conv decoder."""

    def __init__(self, config: VariantConfig, init_seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([init_seed, 0xEC61]))
        s = config.scale
        enc_f = [_scaled(f, s) for f in _ENCODER_FILTERS]
        dec_f = [_scaled(f, s) for f in _DECODER_FILTERS] + [3]
        dense_w = _scaled(_DENSE_WIDTH, s)
        self.encoder_filters = tuple(enc_f)
        self.decoder_filters = tuple(dec_f)
        self.dense_width = dense_w

        # time-axis lengths under stride-2 "same" convolutions
        self.lengths = [BEAT_SAMPLES]
        for _ in enc_f:
            self.lengths.append(-(-self.lengths[-1] // _STRIDE))
        self.bottleneck_len = self.lengths[-1]
        flat = enc_f[-1] * self.bottleneck_len

        self.enc_groups = []
        c_prev = 3
        for i, c in enumerate(enc_f):
            self.enc_groups.append(
                [
                    Conv1d(c_prev, c, _KERNEL, _STRIDE, rng, name=f"enc.conv{i}"),
                    BatchNorm(c, name=f"enc.bn{i}"),
                    Tanh(),
                ]
            )
            c_prev = c
        self.enc_dense_groups = [
            [
                Dense(flat, dense_w, rng, l2=_L2, name="enc.fc0"),
                Tanh(),
                Dropout(_DROPOUT, name="enc.drop0"),
            ],
            [
                Dense(dense_w, dense_w, rng, l2=_L2, name="enc.fc1"),
                Tanh(),
                Dropout(_DROPOUT, name="enc.drop1"),
            ],
        ]
        self.mu_head = Dense(dense_w, config.latent_dim, rng, name="enc.mu")
        self.logvar_head = Dense(dense_w, config.latent_dim, rng, name="enc.logvar")

        self.dec_dense_groups = [
            [
                Dense(config.latent_dim, dense_w, rng, l2=_L2, name="dec.fc0"),
                Tanh(),
                Dropout(_DROPOUT, name="dec.drop0"),
            ],
            [
                Dense(dense_w, flat, rng, l2=_L2, name="dec.fc1"),
                Tanh(),
            ],
        ]
        self.dec_groups = []
        c_prev = enc_f[-1]
        # mirror the encoder lengths: bottleneck -> ... -> 750
        up_lengths = list(reversed(self.lengths[:-1]))
        for i, (c, l_out) in enumerate(zip(dec_f, up_lengths)):
            group = [
                ConvTranspose1d(c_prev, c, _KERNEL, _STRIDE, l_out, rng, name=f"dec.convT{i}")
            ]
            if i < len(dec_f) - 1:
                group += [BatchNorm(c, name=f"dec.bn{i}"), Tanh()]
            self.dec_groups.append(group)
            c_prev = c

        self._dropouts = [
            g[2] for g in self.enc_dense_groups
        ] + [self.dec_dense_groups[0][2]]
        self._all_layers = (
            [l for g in self.enc_groups for l in g]
            + [l for g in self.enc_dense_groups for l in g]
            + [self.mu_head, self.logvar_head]
            + [l for g in self.dec_dense_groups for l in g]
            + [l for g in self.dec_groups for l in g]
        )

    # -- parameter access ---------------------------------------------------

    def params(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in self._all_layers:
            out.extend(layer.params())
        return out

    def batchnorms(self) -> list[BatchNorm]:
        return [l for l in self._all_layers if isinstance(l, BatchNorm)]

    def l2_terms(self):
        terms = []
        for layer in self._all_layers:
            t = layer.l2_penalty()
            if t is not None:
                terms.append(t)
        return terms

    def _seed_noise(self, noise_seed):
        for i, d in enumerate(self._dropouts):
            d.seed = np.random.SeedSequence([_seed_int(noise_seed), 101 + i])

    # -- forward ------------------------------------------------------------

    def _run(self, x: Tensor, layers, training: bool) -> Tensor:
        for layer in layers:
            x = layer.forward(x, training)
        return x

    def _encode_trunk(self, x: Tensor, training: bool) -> Tensor:
        for g in self.enc_groups:
            x = self._run(x, g, training)
        x = ad.reshape(x, (x.data.shape[0], -1))
        for g in self.enc_dense_groups:
            x = self._run(x, g, training)
        return x

    def _decode_graph(self, z: Tensor, training: bool) -> Tensor:
        x = z
        for g in self.dec_dense_groups:
            x = self._run(x, g, training)
        x = ad.reshape(x, (x.data.shape[0], self.encoder_filters[-1], self.bottleneck_len))
        for g in self.dec_groups:
            x = self._run(x, g, training)
        return x

    def forward_full(self, x_np: np.ndarray, training: bool, noise_seed=0):
        """One pass through encoder, sampling, decoder.

        Returns (recon, mu, log_var) tensors. ``noise_seed`` fixes the
        dropout masks and the reparameterization draw.
        """
        self._seed_noise(noise_seed)
        x = Tensor(np.asarray(x_np, dtype=np.float64))
        h = self._encode_trunk(x, training)
        mu = self.mu_head.forward(h, training)
        logvar = self.logvar_head.forward(h, training)
        if self.config.stochastic:
            eps_rng = np.random.default_rng(
                np.random.SeedSequence([_seed_int(noise_seed), 7])
            )
            eps = eps_rng.standard_normal(mu.data.shape)
            z = ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), Tensor(eps)))
        else:
            z = mu
        recon = self._decode_graph(z, training)
        return recon, mu, logvar

    # -- inference ----------------------------------------------------------

    def encode_batch(self, beats: np.ndarray, epsilon_seed: int = 0):
        """Inference-mode encodings (dropout off, running BN stats)."""
        x = _as_batch(beats)
        with ad.no_grad():
            h = self._encode_trunk(Tensor(x), False)
            mu = self.mu_head.forward(h, False).data
            logvar = self.logvar_head.forward(h, False).data
        out = []
        for i in range(x.shape[0]):
            if self.config.stochastic:
                rng = np.random.default_rng(
                    np.random.SeedSequence([int(epsilon_seed), i])
                )
                z = reparameterize(mu[i], logvar[i], rng)
                out.append(LatentEncoding(mu[i], logvar[i], z, epsilon_seed, False))
            else:
                lv = np.full(self.config.latent_dim, DETERMINISTIC_LOG_VAR)
                out.append(LatentEncoding(mu[i], lv, mu[i].copy(), epsilon_seed, True))
        return out

    def encode(self, beat, epsilon_seed: int = 0) -> LatentEncoding:
        return self.encode_batch(np.asarray(beat)[None] if np.asarray(beat).ndim == 2 else beat, epsilon_seed)[0]

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Reconstruct scaled-unit beats from latent vectors."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"expected latent dim {self.config.latent_dim}, got {z.shape[1]}")
        with ad.no_grad():
            recon = self._decode_graph(Tensor(z), False).data
        return recon[0] if recon.shape[0] == 1 and z.shape[0] == 1 else recon

    def reconstruct(self, beats: np.ndarray, epsilon_seed: int = 0) -> np.ndarray:
        x = _as_batch(beats)
        encs = self.encode_batch(x, epsilon_seed)
        z = np.stack([e.z for e in encs])
        rec = self.decode(z)
        return rec.reshape(x.shape)

    # -- gradient checking ----------------------------------------------------

    def make_fd_evaluator(self, x_np, beta, weights, noise_seed=0):
        """Stage-cached finite-difference loss evaluators for gradient_check.

        Caches unperturbed activations at every stage boundary so the
        FD loop for a parameter only recomputes downstream stages.
        """
        x_np = np.asarray(x_np, dtype=np.float64)
        for bn in self.batchnorms():
            bn.update_stats = False
        self._seed_noise(noise_seed)
        eps_rng = np.random.default_rng(np.random.SeedSequence([_seed_int(noise_seed), 7]))

        stages = []  # (stage_name, param_names)
        conv_stages = [(f"conv{i}", g) for i, g in enumerate(self.enc_groups)]
        dense_stages = [(f"encd{i}", g) for i, g in enumerate(self.enc_dense_groups)]
        head_stage = ("heads", [self.mu_head, self.logvar_head])
        decd_stages = [(f"decd{i}", g) for i, g in enumerate(self.dec_dense_groups)]
        dect_stages = [(f"dect{i}", g) for i, g in enumerate(self.dec_groups)]
        all_stages = conv_stages + dense_stages + [head_stage] + decd_stages + dect_stages
        param_stage = {}
        for si, (sname, group) in enumerate(all_stages):
            for layer in group:
                for pname, _ in layer.params():
                    param_stage[pname] = si

        n_enc = len(conv_stages) + len(dense_stages)
        head_idx = n_enc
        eps_cache = {}

        # L2 penalties only move when their own W is perturbed, so cache
        # the unperturbed terms and recompute at most one per evaluation
        l2_layers = {}
        for layer in self._all_layers:
            if getattr(layer, "l2", 0.0) > 0:
                l2_layers[layer.W.name] = layer
        base_l2 = {
            name: layer.l2 * float((layer.W.data**2).sum())
            for name, layer in l2_layers.items()
        }
        total_l2 = sum(base_l2.values())

        def run_group(a, group):
            for layer in group:
                a = layer.fast_forward(a, True)
            return a

        def run_all_from(stage_idx, act):
            """Recompute stages stage_idx.. from activation ``act``; return loss."""
            si = stage_idx
            a = act
            # encoder conv stages
            while si < len(conv_stages):
                a = run_group(a, all_stages[si][1])
                si += 1
                if si == len(conv_stages):
                    a = a.reshape(a.shape[0], -1)
            while si < n_enc:
                a = run_group(a, all_stages[si][1])
                si += 1
            if si == head_idx:
                mu = self.mu_head.fast_forward(a, True)
                logvar = self.logvar_head.fast_forward(a, True)
                cache["mu"], cache["logvar"] = mu, logvar
                if self.config.stochastic:
                    z = mu + np.exp(0.5 * logvar) * eps_cache["eps"]
                else:
                    z = mu
                a = z
                si += 1
            while si < len(all_stages):
                a = run_group(a, all_stages[si][1])
                si += 1
                if si == head_idx + 1 + len(decd_stages):
                    a = a.reshape(a.shape[0], self.encoder_filters[-1], self.bottleneck_len)
            recon = a
            rec = weighted_reconstruction_loss(x_np, recon, weights)
            if self.config.stochastic and beta != 0.0:
                kl = kl_divergence(cache["mu"], cache["logvar"])
            else:
                kl = 0.0
            return rec.l_e + beta * kl

        # unperturbed pass caching each stage input
        cache = {}
        stage_inputs = [None] * (len(all_stages) + 1)
        with ad.no_grad():
            a = x_np
            for si in range(len(conv_stages)):
                stage_inputs[si] = a
                a = self._run(Tensor(a), all_stages[si][1], True).data
                if si == len(conv_stages) - 1:
                    a = a.reshape(a.shape[0], -1)
            for si in range(len(conv_stages), n_enc):
                stage_inputs[si] = a
                a = self._run(Tensor(a), all_stages[si][1], True).data
            stage_inputs[head_idx] = a
            mu = self.mu_head.forward(Tensor(a), True).data
            if self.config.stochastic:
                eps_cache["eps"] = eps_rng.standard_normal(mu.shape)
            logvar = self.logvar_head.forward(Tensor(a), True).data
            z = (
                mu + np.exp(0.5 * logvar) * eps_cache["eps"]
                if self.config.stochastic
                else mu
            )
            a = z
            for si in range(head_idx + 1, len(all_stages)):
                stage_inputs[si] = a
                a = self._run(Tensor(a), all_stages[si][1], True).data
                if si == head_idx + len(decd_stages):
                    a = a.reshape(a.shape[0], self.encoder_filters[-1], self.bottleneck_len)

        def fd_loss_for(param_name):
            si = param_stage[param_name]
            act = stage_inputs[si]
            layer = l2_layers.get(param_name)
            if layer is None:
                return lambda: run_all_from(si, act) + total_l2
            rest = total_l2 - base_l2[param_name]
            return lambda: (
                run_all_from(si, act) + rest + layer.l2 * float((layer.W.data**2).sum())
            )

        return fd_loss_for

    def gradient_check(self, x_np, beta=1.0, weights=None, tolerance=1e-4, h=1e-4, noise_seed=0):
        """Full-network gradient check of the training objective."""
        weights = weights or LossWeights()
        x_np = np.asarray(x_np, dtype=np.float64)
        for bn in self.batchnorms():
            bn.update_stats = False

        def loss_fn():
            recon, mu, logvar = self.forward_full(x_np, True, noise_seed)
            total, _ = _elbo_graph(
                x_np, recon, mu, logvar, beta, weights, self.config.stochastic
            )
            for t in self.l2_terms():
                total = ad.add(total, t)
            return total

        fd_loss_for = self.make_fd_evaluator(x_np, beta, weights, noise_seed)
        try:
            return ad.gradient_check(
                self.params(), loss_fn, h=h, tolerance=tolerance, fd_loss_for=fd_loss_for
            )
        finally:
            for bn in self.batchnorms():
                bn.update_stats = True


def _seed_int(seed) -> int:
    if isinstance(seed, (tuple, list)):
        h = 0
        for v in seed:
            h = (h * 1000003 + int(v)) % (2**63)
        return h
    return int(seed)


def build_network(config: VariantConfig, init_seed: int = 0) -> VaeNetwork:
    """Construct the encoder-decoder for a variant config."""
    return VaeNetwork(config, init_seed)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    loss: LossBreakdown


def train(
    model: VaeNetwork,
    beats: np.ndarray,
    config: VariantConfig | None = None,
    seed: int = 0,
) -> list[EpochLog]:
    """Train on scaled beats (N, 3, 750); deterministic given ``seed``."""
    config = config or model.config
    x_all = _as_batch(beats)
    n = x_all.shape[0]
    weights = LossWeights()
    params = model.params()
    tensors = [p for _, p in params]
    state = ad.AdamState.for_params(tensors)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F1E]))
    logs: list[EpochLog] = []

    for epoch in range(config.epochs):
        beta = beta_at(config.schedule, epoch)
        order = shuffle_rng.permutation(n)
        sums = np.zeros(7)
        count = 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb = x_all[idx]
            for _, p in params:
                p.zero_grad()
            recon, mu, logvar = model.forward_full(xb, True, (seed, epoch, bi))
            total, breakdown = _elbo_graph(
                xb, recon, mu, logvar, beta, weights, config.stochastic
            )
            for t in model.l2_terms():
                total = ad.add(total, t)
            if not np.isfinite(total.item()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi} "
                    f"(variant {config.variant})"
                )
            total.backward()
            grads = [p.grad for p in tensors]
            ad.adam_step(tensors, grads, state, config.learning_rate)
            w = len(idx)
            sums += w * np.array(
                [
                    breakdown.l_p,
                    breakdown.l_qrs,
                    breakdown.l_t,
                    breakdown.l_e,
                    breakdown.kl,
                    breakdown.beta,
                    breakdown.total,
                ]
            )
            count += w
        if count:
            m = sums / count
            logs.append(EpochLog(epoch, LossBreakdown(*m)))
    return logs


# ---------------------------------------------------------------------------
# incremental PCA baseline


class IncrementalPca:
    """Exact streaming PCA via merge-SVD.

    The full-rank factorization of everything seen so far is retained
    internally (desk-scale datasets make that cheap), so incremental
    fitting matches a one-shot SVD; only the exposed ``components`` are
    truncated to ``n_components``.
    """

    def __init__(self, n_components: int = LATENT_DIM, n_features: int = 3 * BEAT_SAMPLES):
        self.n_components = n_components
        self.n_features = n_features
        self.mean = np.zeros(n_features)
        self._sv = None  # singular values of centered data seen so far
        self._vt = None  # right singular vectors, full retained rank
        self.samples_seen = 0

    def partial_fit(self, batch: np.ndarray) -> "IncrementalPca":
        x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {x.shape[1]}")
        m = x.shape[0]
        if m < 1:
            raise ParameterError("batch must contain at least one sample")
        batch_mean = x.mean(axis=0)
        if self.samples_seen == 0:
            self.mean = batch_mean
            stack = x - batch_mean
            new_n = m
        else:
            n = self.samples_seen
            new_n = n + m
            correction = np.sqrt(n * m / new_n) * (self.mean - batch_mean)
            stack = np.vstack(
                [self._sv[:, None] * self._vt, x - batch_mean, correction[None, :]]
            )
            self.mean = (n * self.mean + m * batch_mean) / new_n
        _, s, vt = np.linalg.svd(stack, full_matrices=False)
        keep = int(min(len(s), new_n))
        self._sv = s[:keep]
        self._vt = vt[:keep]
        self.samples_seen = new_n
        return self

    def _check_fitted(self):
        if self.samples_seen < self.n_components:
            raise NotFittedError(
                f"need >= {self.n_components} samples, saw {self.samples_seen}"
            )

    @property
    def components(self) -> np.ndarray:
        """Top components, sign-fixed (largest-magnitude entry positive)."""
        self._check_fitted()
        comps = self._vt[: self.n_components].copy()
        for row in comps:
            if row[np.argmax(np.abs(row))] < 0:
                row *= -1.0
        return comps

    @property
    def explained_variance(self) -> np.ndarray:
        self._check_fitted()
        return self._sv[: self.n_components] ** 2 / max(self.samples_seen - 1, 1)

    def transform(self, x: np.ndarray) -> np.ndarray:
        self._check_fitted()
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        code = (np.atleast_2d(x) - self.mean) @ self.components.T
        return code[0] if single else code

    def inverse_transform(self, code: np.ndarray) -> np.ndarray:
        self._check_fitted()
        code = np.asarray(code, dtype=np.float64)
        single = code.ndim == 1
        x = np.atleast_2d(code) @ self.components + self.mean
        return x[0] if single else x


def pca_partial_fit(model: IncrementalPca, batch: np.ndarray) -> IncrementalPca:
    return model.partial_fit(batch)


def pca_transform(model: IncrementalPca, beat: np.ndarray) -> np.ndarray:
    return model.transform(np.asarray(beat).reshape(-1) if np.asarray(beat).ndim == 2 else beat)


def pca_inverse(model: IncrementalPca, code: np.ndarray) -> np.ndarray:
    flat = model.inverse_transform(code)
    if flat.ndim == 1:
        return flat.reshape(3, BEAT_SAMPLES)
    return flat.reshape(-1, 3, BEAT_SAMPLES)


# ---------------------------------------------------------------------------
# serialization (opaque payload; the file wrapper lives in cli)


def _config_to_dict(config: VariantConfig) -> dict:
    return asdict(config)


def _config_from_dict(d: dict) -> VariantConfig:
    d = dict(d)
    d["schedule"] = BetaSchedule(**d["schedule"])
    cfg = VariantConfig(**d)
    cfg.validate()
    return cfg


def model_to_payload(model, config, scaling: ScalingParams | None) -> bytes:
    """Serialize a VaeNetwork or IncrementalPca with config and scaling."""
    arrays: dict[str, np.ndarray] = {}
    if isinstance(model, IncrementalPca):
        kind = "pca"
        cfg_dict = {"n_components": model.n_components, "n_features": model.n_features}
        arrays["mean"] = model.mean
        arrays["sv"] = model._sv
        arrays["vt"] = model._vt
        extra = {"samples_seen": model.samples_seen}
    else:
        kind = "vae"
        cfg_dict = _config_to_dict(config or model.config)
        for name, p in model.params():
            arrays[name] = p.data
        for i, bn in enumerate(model.batchnorms()):
            arrays[f"_bnstate{i}.mean"] = bn.running_mean
            arrays[f"_bnstate{i}.var"] = bn.running_var
        extra = {}

    manifest = []
    blob = io.BytesIO()
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob.write(raw)
        offset += len(raw)
    header = {
        "kind": kind,
        "config": cfg_dict,
        "scaling": None
        if scaling is None
        else {"abs_max": scaling.abs_max, "per_lead_mean": scaling.per_lead_mean.tolist()},
        "extra": extra,
        "arrays": manifest,
    }
    hraw = json.dumps(header, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(hraw)) + hraw + blob.getvalue()


def model_from_payload(payload: bytes):
    """Inverse of :func:`model_to_payload`; returns (model, config, scaling)."""
    hlen = struct.unpack("<I", payload[:4])[0]
    header = json.loads(payload[4 : 4 + hlen].decode("utf-8"))
    body = payload[4 + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arrays[entry["name"]] = np.frombuffer(
            body, dtype="<f8", count=size, offset=start
        ).reshape(shape).copy()

    scaling = None
    if header["scaling"] is not None:
        scaling = ScalingParams(
            header["scaling"]["abs_max"], np.asarray(header["scaling"]["per_lead_mean"])
        )

    if header["kind"] == "pca":
        model = IncrementalPca(
            header["config"]["n_components"], header["config"]["n_features"]
        )
        model.mean = arrays["mean"]
        model._sv = arrays["sv"]
        model._vt = arrays["vt"]
        model.samples_seen = int(header["extra"]["samples_seen"])
        return model, None, scaling

    config = _config_from_dict(header["config"])
    model = VaeNetwork(config, init_seed=0)
    named = dict(model.params())
    for name, arr in arrays.items():
        if name.startswith("_bnstate"):
            continue
        if name not in named:
            raise ParameterError(f"checkpoint has unknown parameter {name!r}")
        if named[name].data.shape != arr.shape:
            raise ShapeError(f"checkpoint shape mismatch for {name!r}")
        named[name].data = arr
    for i, bn in enumerate(model.batchnorms()):
        bn.running_mean = arrays[f"_bnstate{i}.mean"]
        bn.running_var = arrays[f"_bnstate{i}.var"]
    return model, config, scaling


def payload_digest(payload: bytes) -> str:
    return format(zlib.crc32(payload) & 0xFFFFFFFF, "08x")


__all__ = [
    "BetaSchedule",
    "beta_at",
    "LossWeights",
    "LossBreakdown",
    "kl_divergence",
    "weighted_reconstruction_loss",
    "elbo_loss",
    "reparameterize",
    "VariantConfig",
    "VARIANTS",
    "LatentEncoding",
    "VaeNetwork",
    "build_network",
    "train",
    "EpochLog",
    "IncrementalPca",
    "pca_partial_fit",
    "pca_transform",
    "pca_inverse",
    "model_to_payload",
    "model_from_payload",
    "payload_digest",
    "LATENT_DIM",
    "DETERMINISTIC_LOG_VAR",
]
