"""Gaussian variational autoencoder on the in-repo autodiff engine.

The encoder trunk maps x to a hidden representation; two linear heads emit
the posterior mean and log-variance, so q(z|x) is a diagonal Gaussian and
sampling is reparameterized as z = mean + exp(logvar/2) * eps.  The decoder
maps z back to data space and the reconstruction likelihood is fixed to the
unit-variance Gaussian N(decoded, I), which keeps the whole objective inside
the engine's primitive set.  The prior is N(0, I).

Three interchangeable per-point bound estimators are exposed:

* ``elbo_type1``      -- one Monte-Carlo average of log p(x, z) - log q(z|x);
* ``elbo_type2_mc``   -- reconstruction and KL terms each estimated by their
                         own Monte-Carlo draws;
* ``elbo_type2_analytic`` -- Monte-Carlo reconstruction plus the exact
                         closed-form KL(q(z|x) || N(0, I)).

``kl_weight`` scales the KL term in every estimator and objective; 1 is the
plain bound, 0 degenerates to an autoencoder.  Training runs mini-batch
gradient steps either in EM style (encoder ascent, then decoder ascent on the
refreshed objective) or jointly by backpropagation on the negative bound.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Mlp, NonFiniteError, Tape, apply_mlp, apply_on_tape, init_mlp
from .gaussian import GaussianDiag, GaussianFull, LOG_2PI
from .rng import Rng

ELBO_TYPES = ("type1", "type2_mc", "type2_analytic")
_ENCODER_NETS = ("encoder_trunk", "head_mean", "head_logvar")
_ALL_NETS = _ENCODER_NETS + ("decoder",)


class VaeError(ValueError):
    """Invalid VAE model or configuration."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss), with the offending batch named."""


@dataclass
class VaeModel:
    """Encoder trunk (d->h), mean/log-variance heads (h->p), decoder (p->d)."""

    encoder_trunk: Mlp
    head_mean: Mlp
    head_logvar: Mlp
    decoder: Mlp
    kl_weight: float = 1.0

    def __post_init__(self):
        d, h = self.encoder_trunk.in_dim, self.encoder_trunk.out_dim
        p = self.head_mean.out_dim
        chain_ok = (
            self.head_mean.in_dim == h
            and self.head_logvar.in_dim == h
            and self.head_logvar.out_dim == p
            and self.decoder.in_dim == p
            and self.decoder.out_dim == d
        )
        if not chain_ok:
            raise VaeError("dimension chain d->h->p->d is inconsistent")
        if self.kl_weight < 0.0:
            raise VaeError("kl_weight must be >= 0")

    @property
    def data_dim(self) -> int:
        return self.encoder_trunk.in_dim

    @property
    def hidden_dim(self) -> int:
        return self.encoder_trunk.out_dim

    @property
    def latent_dim(self) -> int:
        return self.head_mean.out_dim

    @property
    def prior(self) -> GaussianFull:
        """The fixed latent prior N(0, I_p)."""
        p = self.latent_dim
        return GaussianFull(np.zeros(p), np.eye(p))

    @classmethod
    def create(
        cls,
        data_dim: int,
        latent_dim: int,
        hidden_dim: int,
        seed: int = 0,
        kl_weight: float = 1.0,
    ) -> "VaeModel":
        """Standard architecture: tanh trunk/decoder hidden, linear heads."""
        rand = Rng(seed)
        return cls(
            encoder_trunk=init_mlp([data_dim, hidden_dim], ["tanh"], rand),
            head_mean=init_mlp([hidden_dim, latent_dim], ["identity"], rand),
            head_logvar=init_mlp([hidden_dim, latent_dim], ["identity"], rand),
            decoder=init_mlp(
                [latent_dim, hidden_dim, data_dim], ["tanh", "identity"], rand
            ),
            kl_weight=kl_weight,
        )


@dataclass(frozen=True)
class ElboEstimate:
    """Bound estimate split as value = recon_term - kl_weight * kl_term."""

    value: float
    recon_term: float
    kl_term: float
    n_samples: int
    stderr: float


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    mc_samples: int = 1
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-3
    joint_lr: float = 1e-3
    elbo_type: str = "type2_analytic"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.mc_samples < 1:
            raise VaeError("epochs, batch_size, mc_samples must be >= 1")
        # zero is allowed so one side of the EM alternation can be frozen
        if min(self.lr_encoder, self.lr_decoder, self.joint_lr) < 0.0:
            raise VaeError("learning rates must be >= 0")
        if self.elbo_type not in ELBO_TYPES:
            raise VaeError(f"elbo_type must be one of {ELBO_TYPES}")


# -- encoding / decoding ----------------------------------------------------


def _encode_arrays(model: VaeModel, batch: np.ndarray):
    hidden = apply_mlp(model.encoder_trunk, batch)
    mean = apply_mlp(model.head_mean, hidden)
    logvar = apply_mlp(model.head_logvar, hidden)
    return mean, logvar


def encode(model: VaeModel, x) -> GaussianDiag:
    """q(z|x): mean head plus exp of the log-variance head."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.data_dim,):
        raise VaeError(f"x must have shape ({model.data_dim},), got {x.shape}")
    mean, logvar = _encode_arrays(model, x[None, :])
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(logvar))):
        raise VaeError("encoder produced non-finite activations")
    return GaussianDiag(mean[0], np.exp(logvar[0]))


def reparam_sample(q: GaussianDiag, n_samples: int, rand: Rng):
    """Draw z_j = mean + sqrt(var) * eps_j; returns (z, eps), both (n, p).

    The eps draws are returned so gradients (and finite-difference checks)
    can flow through mean and variance with the noise held fixed.
    """
    n_samples = int(n_samples)
    if n_samples < 1:
        raise VaeError("need at least one sample")
    eps = rand.normal((n_samples, q.dim))
    return q.mean + np.sqrt(q.var) * eps, eps


def decode(model: VaeModel, z) -> tuple[np.ndarray, GaussianFull]:
    """Decoded point and its implied unit-variance likelihood N(decoded, I)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise VaeError(f"z must have shape ({model.latent_dim},), got {z.shape}")
    decoded = apply_mlp(model.decoder, z[None, :])[0]
    if not np.all(np.isfinite(decoded)):
        raise VaeError("decoder produced non-finite activations")
    return decoded, GaussianFull(decoded, np.eye(model.data_dim))


def _decoder_loglik(model: VaeModel, x, zs):
    """log N(x | decode(z), I) for each row z of zs."""
    decoded = apply_mlp(model.decoder, zs)
    sq = np.sum((x - decoded) ** 2, axis=1)
    return -0.5 * (sq + model.data_dim * LOG_2PI)


def analytic_kl_to_prior(mean, logvar) -> np.ndarray:
    """KL(N(mean, diag exp(logvar)) || N(0, I)) per row, in closed form.

    0.5 * sum_k (exp(logvar_k) + mean_k^2 - logvar_k - 1).
    """
    mean = np.atleast_2d(mean)
    logvar = np.atleast_2d(logvar)
    return 0.5 * np.sum(np.exp(logvar) + mean**2 - logvar - 1.0, axis=1)


# -- per-point bound estimators ---------------------------------------------


def _mc_terms(model: VaeModel, x, mean, logvar, n_samples, rand):
    """Per-sample reconstruction and KL integrands for one data point."""
    p = model.latent_dim
    eps = rand.normal((n_samples, p))
    std = np.exp(0.5 * logvar)
    zs = mean + std * eps
    recon = _decoder_loglik(model, x, zs)
    # log q(z|x) with z reparameterized: the quadratic form reduces to eps^2
    log_q = -0.5 * (np.sum(eps**2, axis=1) + float(np.sum(logvar)) + p * LOG_2PI)
    log_prior = -0.5 * (np.sum(zs**2, axis=1) + p * LOG_2PI)
    return recon, log_q - log_prior


def _stderr(samples) -> float:
    n = len(samples)
    if n < 2:
        return 0.0
    return float(np.std(samples, ddof=1) / math.sqrt(n))


def elbo_type1(model: VaeModel, x, n_samples: int, rand: Rng) -> ElboEstimate:
    """Single Monte-Carlo average of log p(x, z) - log q(z|x)."""
    x = np.asarray(x, dtype=np.float64)
    q = encode(model, x)
    mean, logvar = q.mean, np.log(q.var)
    recon, kl = _mc_terms(model, x, mean, logvar, int(n_samples), rand)
    w = model.kl_weight
    return ElboEstimate(
        value=float(np.mean(recon) - w * np.mean(kl)),
        recon_term=float(np.mean(recon)),
        kl_term=float(np.mean(kl)),
        n_samples=int(n_samples),
        stderr=_stderr(recon - w * kl),
    )


def elbo_type2_mc(model: VaeModel, x, n_samples: int, rand: Rng) -> ElboEstimate:
    """Reconstruction and KL terms estimated with independent draws."""
    x = np.asarray(x, dtype=np.float64)
    q = encode(model, x)
    mean, logvar = q.mean, np.log(q.var)
    n_samples = int(n_samples)
    recon, _ = _mc_terms(model, x, mean, logvar, n_samples, rand)
    _, kl = _mc_terms(model, x, mean, logvar, n_samples, rand)
    w = model.kl_weight
    stderr = math.sqrt(
        _stderr(recon) ** 2 + (w * _stderr(kl)) ** 2
    )
    return ElboEstimate(
        value=float(np.mean(recon) - w * np.mean(kl)),
        recon_term=float(np.mean(recon)),
        kl_term=float(np.mean(kl)),
        n_samples=n_samples,
        stderr=stderr,
    )


def elbo_type2_analytic(
    model: VaeModel, x, n_samples: int, rand: Rng
) -> ElboEstimate:
    """Monte-Carlo reconstruction plus the exact KL to the prior."""
    x = np.asarray(x, dtype=np.float64)
    q = encode(model, x)
    mean, logvar = q.mean, np.log(q.var)
    recon, _ = _mc_terms(model, x, mean, logvar, int(n_samples), rand)
    kl = float(analytic_kl_to_prior(mean, logvar)[0])
    w = model.kl_weight
    return ElboEstimate(
        value=float(np.mean(recon) - w * kl),
        recon_term=float(np.mean(recon)),
        kl_term=kl,
        n_samples=int(n_samples),
        stderr=_stderr(recon),
    )


_ESTIMATORS = {
    "type1": elbo_type1,
    "type2_mc": elbo_type2_mc,
    "type2_analytic": elbo_type2_analytic,
}


# -- taped objective for training and gradient checks ------------------------


def bind_parameters(tape: Tape, model: VaeModel) -> dict:
    """Create parameter leaves for every net; returns {net: [(w, b), ...]}."""
    return {
        name: [
            (tape.leaf(layer.weights), tape.leaf(layer.bias))
            for layer in getattr(model, name).layers
        ]
        for name in _ALL_NETS
    }


def batch_elbo_objective(
    tape: Tape,
    model: VaeModel,
    refs: dict,
    batch: np.ndarray,
    eps_draws: list[np.ndarray],
    elbo_type: str,
) -> int:
    """Record sum over the batch of the chosen bound estimator.

    ``eps_draws`` holds one (batch, p) noise matrix per Monte-Carlo sample;
    passing them in keeps the objective a deterministic function of the
    parameters, which is what both training and finite-difference gradient
    checks need.
    """
    n, d = batch.shape
    p = model.latent_dim
    x_ref = tape.leaf(batch)
    hidden = apply_on_tape(tape, model.encoder_trunk, x_ref, refs["encoder_trunk"])
    mean = apply_on_tape(tape, model.head_mean, hidden, refs["head_mean"])
    logvar = apply_on_tape(tape, model.head_logvar, hidden, refs["head_logvar"])

    recon_parts = []
    kl_mc_parts = []
    for eps in eps_draws:
        std = tape.exp(tape.scale(logvar, 0.5))
        z = tape.add(mean, tape.hadamard(std, tape.leaf(eps)))
        decoded = apply_on_tape(tape, model.decoder, z, refs["decoder"])
        diff = tape.add(x_ref, tape.scale(decoded, -1.0))
        recon_parts.append(tape.scale(tape.reduce_sum(tape.square(diff)), -0.5))
        if elbo_type in ("type1", "type2_mc"):
            # 2 [log q(z|x) - log p(z)] = (z-mean)^2/var + logvar - z^2,
            # summed over the batch; the log 2 pi constants cancel.
            centered = tape.add(z, tape.scale(mean, -1.0))
            quad_q = tape.hadamard(
                tape.square(centered), tape.exp(tape.scale(logvar, -1.0))
            )
            q_core = tape.reduce_sum(tape.add(quad_q, logvar))
            p_core = tape.reduce_sum(tape.square(z))
            kl_mc_parts.append(
                tape.scale(tape.add(q_core, tape.scale(p_core, -1.0)), 0.5)
            )

    n_draws = len(eps_draws)
    recon_sum = recon_parts[0]
    for part in recon_parts[1:]:
        recon_sum = tape.add(recon_sum, part)
    recon = tape.add(
        tape.scale(recon_sum, 1.0 / n_draws),
        tape.leaf(np.asarray(-0.5 * n * d * LOG_2PI)),
    )

    if elbo_type == "type2_analytic":
        inner = tape.add(
            tape.add(tape.exp(logvar), tape.square(mean)),
            tape.add(tape.scale(logvar, -1.0), tape.leaf(-np.ones((n, p)))),
        )
        kl = tape.scale(tape.reduce_sum(inner), 0.5)
    else:
        kl_sum = kl_mc_parts[0]
        for part in kl_mc_parts[1:]:
            kl_sum = tape.add(kl_sum, part)
        kl = tape.scale(kl_sum, 1.0 / n_draws)

    objective = tape.add(recon, tape.scale(kl, -model.kl_weight))
    tape.output_ref = objective
    return objective


def _ascend(model: VaeModel, refs: dict, grads: dict, nets, lr: float):
    """Gradient-ascent update of the named nets' parameters in place."""
    for name in nets:
        net = getattr(model, name)
        for layer, (w_ref, b_ref) in zip(net.layers, refs[name]):
            layer.weights, layer.bias = autodiff.sgd_step(
                [layer.weights, layer.bias],
                [-grads[w_ref], -grads[b_ref]],
                lr,
            )


def _batch_estimates(model: VaeModel, data, n_samples: int, rand: Rng,
                     elbo_type: str):
    """Vectorized per-point (value, recon, kl) arrays over a whole dataset."""
    mean, logvar = _encode_arrays(model, data)
    n, p = mean.shape
    d = model.data_dim
    std = np.exp(0.5 * logvar)
    eps = rand.normal((n_samples, n, p))
    zs = mean + std * eps
    decoded = apply_mlp(model.decoder, zs.reshape(n_samples * n, p))
    decoded = decoded.reshape(n_samples, n, d)
    recon = -0.5 * (np.sum((data - decoded) ** 2, axis=2) + d * LOG_2PI)
    recon = recon.mean(axis=0)
    if elbo_type == "type2_analytic":
        kl = analytic_kl_to_prior(mean, logvar)
    else:
        if elbo_type == "type2_mc":
            eps = rand.normal((n_samples, n, p))
            zs = mean + std * eps
        log_q = -0.5 * (
            np.sum(eps**2, axis=2) + np.sum(logvar, axis=1) + p * LOG_2PI
        )
        log_prior = -0.5 * (np.sum(zs**2, axis=2) + p * LOG_2PI)
        kl = (log_q - log_prior).mean(axis=0)
    return recon - model.kl_weight * kl, recon, kl


def _epoch_estimate(
    model: VaeModel, data: np.ndarray, config: TrainConfig, rand: Rng
) -> ElboEstimate:
    """Mean per-point bound over the dataset with the configured estimator."""
    values, recons, kls = _batch_estimates(
        model, data, config.mc_samples, rand, config.elbo_type
    )
    return ElboEstimate(
        value=float(np.mean(values)),
        recon_term=float(np.mean(recons)),
        kl_term=float(np.mean(kls)),
        n_samples=config.mc_samples,
        stderr=_stderr(values),
    )


def _check_training_data(model: VaeModel, data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.data_dim:
        raise VaeError(
            f"data must be (n, {model.data_dim}), got {data.shape}"
        )
    if not np.all(np.isfinite(data)):
        raise VaeError("data contains non-finite values")
    return data


def _batch_grads(model, batch, rand, config):
    tape = Tape()
    refs = bind_parameters(tape, model)
    eps_draws = [
        rand.normal((batch.shape[0], model.latent_dim))
        for _ in range(config.mc_samples)
    ]
    objective = batch_elbo_objective(
        tape, model, refs, batch, eps_draws, config.elbo_type
    )
    grads = tape.gradients(objective, np.asarray(1.0))
    return refs, grads


def _run_training(model, data, config, em_style: bool):
    model = copy.deepcopy(model)
    data = _check_training_data(model, data)
    rand = Rng(config.seed)
    n = data.shape[0]
    trace = []
    for epoch in range(config.epochs):
        order = rand.permutation(n)
        for k, start in enumerate(range(0, n, config.batch_size)):
            batch = data[order[start : start + config.batch_size]]
            try:
                if em_style:
                    refs, grads = _batch_grads(model, batch, rand, config)
                    _ascend(model, refs, grads, _ENCODER_NETS, config.lr_encoder)
                    refs, grads = _batch_grads(model, batch, rand, config)
                    _ascend(model, refs, grads, ("decoder",), config.lr_decoder)
                else:
                    refs, grads = _batch_grads(model, batch, rand, config)
                    _ascend(model, refs, grads, _ALL_NETS, config.joint_lr)
            except NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {k}"
                ) from exc
        trace.append(_epoch_estimate(model, data, config, rand))
    return model, trace


def train_em(model: VaeModel, data, config: TrainConfig):
    """Alternating training: encoder ascent, then decoder ascent per batch.

    The encoder step moves only the trunk and the two heads with lr_encoder;
    the decoder step recomputes the objective under the refreshed encoder and
    moves only the decoder with lr_decoder.  Returns (trained model copy,
    per-epoch ElboEstimate list).
    """
    return _run_training(model, data, config, em_style=True)


def train_backprop(model: VaeModel, data, config: TrainConfig):
    """Joint training: every parameter descends the negative bound with
    joint_lr (equivalently, ascends the bound).  Same trace contract as
    train_em."""
    return _run_training(model, data, config, em_style=False)


def reconstruct(model: VaeModel, x, rand: Rng) -> np.ndarray:
    """encode -> one reparameterized draw -> decode."""
    q = encode(model, x)
    zs, _ = reparam_sample(q, 1, rand)
    decoded, _ = decode(model, zs[0])
    return decoded


def generate(model: VaeModel, n: int, rand: Rng) -> np.ndarray:
    """Decode n prior draws; n = 0 yields an empty (0, d) matrix."""
    n = int(n)
    if n < 0:
        raise VaeError("n must be >= 0")
    zs = rand.normal((n, model.latent_dim))
    return apply_mlp(model.decoder, zs).reshape(n, model.data_dim)


def to_dict(model: VaeModel) -> dict:
    """JSON-ready form reusing the Mlp layer payloads."""
    return {
        "type": "vae",
        "d": model.data_dim,
        "p": model.latent_dim,
        "h": model.hidden_dim,
        "encoder_trunk": autodiff.mlp_to_dict(model.encoder_trunk),
        "head_mean": autodiff.mlp_to_dict(model.head_mean),
        "head_logvar": autodiff.mlp_to_dict(model.head_logvar),
        "decoder": autodiff.mlp_to_dict(model.decoder),
        "kl_weight": model.kl_weight,
    }


def from_dict(obj: dict) -> VaeModel:
    if obj.get("type") != "vae":
        raise VaeError(f"not a vae payload: {obj.get('type')}")
    model = VaeModel(
        encoder_trunk=autodiff.mlp_from_dict(obj["encoder_trunk"]),
        head_mean=autodiff.mlp_from_dict(obj["head_mean"]),
        head_logvar=autodiff.mlp_from_dict(obj["head_logvar"]),
        decoder=autodiff.mlp_from_dict(obj["decoder"]),
        kl_weight=float(obj["kl_weight"]),
    )
    declared = (obj["d"], obj["h"], obj["p"])
    if (model.data_dim, model.hidden_dim, model.latent_dim) != declared:
        raise VaeError("declared dimensions disagree with layer shapes")
    return model
