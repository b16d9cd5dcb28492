"""Bayesian Arrival Curve Learner.

A small tanh network whose every weight carries a Gaussian variational
posterior N(mu, softplus(rho)^2). Training minimizes the negative ELBO with
the reparameterization trick; the output layer has a mean head and a
heteroscedastic noise head. ``mode="deterministic"`` drops the noise draws and
the KL term, which gives the plain feed-forward baseline.

Shapes: weight draws carry a leading sample axis S, so a layer weight is
(S, n_in, n_out) and activations are (S, n, width).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .features import FeatureSpec, Normalizer, TrainingSample, fit_normalizer, samples_to_arrays
from .seeding import substream

logger = logging.getLogger(__name__)

BAYESIAN = "bayesian"
DETERMINISTIC = "deterministic"
ARTIFACT_VERSION = 1
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class Hyperparameters:
    hidden: Tuple[int, ...] = (32, 32)
    learning_rate: float = 0.01
    epochs: int = 400
    batch_size: int = 128
    mc_samples: int = 1
    predict_samples: int = 100
    prior_std: float = 1.0
    kl_scale: float = 0.3  # tempered posterior
    kl_warmup_epochs: int = 0
    init_mu: float = 0.05
    init_rho: float = -5.0
    sigma_floor: float = 0.05
    heteroscedastic: bool = True
    fixed_sigma: float = 1.0
    optimizer: str = "adam"
    patience: int = 30
    val_fraction: float = 0.1
    min_val_samples: int = 20

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def kl_factor(self, epoch: int) -> float:
        if self.kl_warmup_epochs <= 0:
            return self.kl_scale
        return self.kl_scale * min(1.0, (epoch + 1) / self.kl_warmup_epochs)


@dataclass
class VariationalLayer:
    w_mu: np.ndarray
    w_rho: np.ndarray
    b_mu: np.ndarray
    b_rho: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.w_mu.shape

    def params(self) -> List[np.ndarray]:
        return [self.w_mu, self.w_rho, self.b_mu, self.b_rho]

    def std(self) -> Tuple[np.ndarray, np.ndarray]:
        return softplus(self.w_rho), softplus(self.b_rho)


@dataclass
class BaclModel:
    layers: List[VariationalLayer]
    spec: FeatureSpec
    normalizer: Normalizer
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    mode: str = BAYESIAN
    seed: int = 0
    out_shift: float = 0.0
    out_scale: float = 1.0
    lane: str = ""

    def __post_init__(self):
        if self.mode not in (BAYESIAN, DETERMINISTIC):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def create(
        cls,
        n_in: int,
        hyper: Hyperparameters = Hyperparameters(),
        *,
        spec: Optional[FeatureSpec] = None,
        normalizer: Optional[Normalizer] = None,
        mode: str = BAYESIAN,
        seed: int = 0,
        out_shift: float = 0.0,
        out_scale: float = 1.0,
        lane: str = "",
    ) -> "BaclModel":
        rng = substream(seed, "init")
        widths = (n_in,) + hyper.hidden + (2,)
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers.append(
                VariationalLayer(
                    rng.uniform(-hyper.init_mu, hyper.init_mu, size=(a, b)),
                    np.full((a, b), hyper.init_rho),
                    rng.uniform(-hyper.init_mu, hyper.init_mu, size=b),
                    np.full(b, hyper.init_rho),
                )
            )
        if spec is None:
            spec = FeatureSpec(tuple(f"x{i}" for i in range(n_in - 2)))
        if normalizer is None:
            normalizer = Normalizer(np.zeros(n_in), np.ones(n_in))
        return cls(layers, spec, normalizer, hyper, mode, seed, float(out_shift), float(out_scale), lane)

    @property
    def n_in(self) -> int:
        return self.layers[0].shape[0]

    def params(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def n_weights(self) -> int:
        return sum(l.w_mu.size + l.b_mu.size for l in self.layers)

    def copy(self) -> "BaclModel":
        layers = [VariationalLayer(*(p.copy() for p in l.params())) for l in self.layers]
        return replace(self, layers=layers)

    # ---- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": ARTIFACT_VERSION,
            "lane": self.lane,
            "mode": self.mode,
            "seed": self.seed,
            "shapes": [list(l.shape) for l in self.layers],
            "layers": [{k: v.tolist() for k, v in zip(("w_mu", "w_rho", "b_mu", "b_rho"), l.params())} for l in self.layers],
            "features": {"upstream_lanes": list(self.spec.upstream_lanes), "feature_set": self.spec.feature_set},
            "normalizer": self.normalizer.to_dict(),
            "out_shift": self.out_shift,
            "out_scale": self.out_scale,
            "hyper": asdict(self.hyper),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaclModel":
        if d.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"unsupported model artifact version {d.get('version')!r}")
        layers = []
        for shape, raw in zip(d["shapes"], d["layers"]):
            layer = VariationalLayer(*(np.array(raw[k], dtype=float) for k in ("w_mu", "w_rho", "b_mu", "b_rho")))
            a, b = shape
            if layer.w_mu.shape != (a, b) or layer.w_rho.shape != (a, b) or layer.b_mu.shape != (b,) or layer.b_rho.shape != (b,):
                raise ValueError(f"layer arrays do not match declared shape {shape}")
            layers.append(layer)
        for prev, nxt in zip(layers[:-1], layers[1:]):
            if prev.shape[1] != nxt.shape[0]:
                raise ValueError("consecutive layer shapes do not chain")
        if layers[-1].shape[1] != 2:
            raise ValueError("output layer must have two heads")
        hyper = Hyperparameters(**d["hyper"])
        spec = FeatureSpec(tuple(d["features"]["upstream_lanes"]), d["features"]["feature_set"])
        normalizer = Normalizer.from_dict(d["normalizer"])
        if spec.width != layers[0].shape[0] or normalizer.shift.size != spec.width:
            raise ValueError("feature width does not match the input layer")
        return cls(layers, spec, normalizer, hyper, d["mode"], int(d["seed"]), float(d["out_shift"]), float(d["out_scale"]), d.get("lane", ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BaclModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray
    raw_mean: np.ndarray  # before clamping at zero
    var_epistemic: np.ndarray
    var_aleatoric: np.ndarray
    n_samples: int

    @property
    def var_total(self) -> np.ndarray:
        return self.var_epistemic + self.var_aleatoric

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var_total)


# ---- weights and forward pass ------------------------------------------

def draw_noise(model: BaclModel, n_samples: int, rng: np.random.Generator) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [
        (rng.standard_normal((n_samples,) + l.shape), rng.standard_normal((n_samples, l.shape[1])))
        for l in model.layers
    ]


def zero_noise(model: BaclModel, n_samples: int = 1):
    return [(np.zeros((n_samples,) + l.shape), np.zeros((n_samples, l.shape[1]))) for l in model.layers]


def sample_weights(model: BaclModel, eps, stds=None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """omega = mu + softplus(rho) * eps, elementwise, per layer.

    ``eps`` holds one (eps_w, eps_b) pair per layer, optionally with a leading
    sample axis. Deterministic models ignore the noise.
    """
    if model.mode == DETERMINISTIC:
        return [(l.w_mu + np.zeros_like(ew), l.b_mu + np.zeros_like(eb)) for l, (ew, eb) in zip(model.layers, eps)]
    stds = stds if stds is not None else [l.std() for l in model.layers]
    return [(l.w_mu + sw * ew, l.b_mu + sb * eb) for l, (sw, sb), (ew, eb) in zip(model.layers, stds, eps)]


def _forward(model: BaclModel, Z: np.ndarray, weights):
    acts = [np.broadcast_to(Z, (weights[0][0].shape[0],) + Z.shape)]
    h = acts[0]
    for W, b in weights[:-1]:
        h = np.tanh(np.matmul(h, W) + b[:, None, :])
        acts.append(h)
    W, b = weights[-1]
    out = np.matmul(h, W) + b[:, None, :]
    mean = model.out_shift + model.out_scale * out[..., 0]
    if model.hyper.heteroscedastic:
        sigma = model.out_scale * softplus(out[..., 1]) + model.hyper.sigma_floor
    else:
        sigma = np.full_like(mean, model.hyper.fixed_sigma)
    return mean, sigma, out, acts


def _as_batched(weights):
    if weights[0][0].ndim == 2:
        return [(W[None], b[None]) for W, b in weights]
    return weights


def forward(model: BaclModel, Z: np.ndarray, weights) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and noise std for normalized inputs ``Z`` under concrete weights.

    Returns arrays of shape (S, n).
    """
    mean, sigma, _, _ = _forward(model, np.asarray(Z, dtype=float), _as_batched(weights))
    return mean, sigma


# ---- objective ----------------------------------------------------------

def kl_divergence(model: BaclModel, stds=None) -> float:
    """Closed-form KL[q || p] summed over all weights, p = N(0, prior_std^2)."""
    s = model.hyper.prior_std
    stds = stds if stds is not None else [l.std() for l in model.layers]
    total = 0.0
    for layer, (sw, sb) in zip(model.layers, stds):
        for mu, sig in ((layer.w_mu, sw), (layer.b_mu, sb)):
            total += float(np.sum(math.log(s) - np.log(sig) + (sig**2 + mu**2) / (2 * s**2) - 0.5))
    return total


def gaussian_nll(y, mean, sigma):
    r = y - mean
    return HALF_LOG_2PI + np.log(sigma) + r**2 / (2 * sigma**2)


def loss_and_grads(model: BaclModel, Z: np.ndarray, y: np.ndarray, eps, kl_weight: float):
    """Negative ELBO on a minibatch and its gradient w.r.t. every parameter.

    loss = kl_weight * KL + mean over noise draws of sum_i NLL_i. Gradients
    follow the parameter order of ``model.params()``.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    bayes = model.mode == BAYESIAN
    stds = [l.std() for l in model.layers] if bayes else None
    weights = sample_weights(model, eps, stds)
    S = weights[0][0].shape[0]
    mean, sigma, out, acts = _forward(model, Z, weights)
    nll = gaussian_nll(y[None, :], mean, sigma)
    loss = float(nll.sum()) / S
    if bayes and kl_weight:
        loss += kl_weight * kl_divergence(model, stds)

    r = y[None, :] - mean
    d_mean = -r / sigma**2 / S
    d_out = np.empty_like(out)
    d_out[..., 0] = d_mean * model.out_scale
    if model.hyper.heteroscedastic:
        d_sigma = (1.0 / sigma - r**2 / sigma**3) / S
        d_out[..., 1] = d_sigma * model.out_scale * expit(out[..., 1])
    else:
        d_out[..., 1] = 0.0

    grads_w = [None] * len(weights)
    delta = d_out
    for k in range(len(weights) - 1, -1, -1):
        W, _ = weights[k]
        h = acts[k]
        grads_w[k] = (np.matmul(np.swapaxes(h, 1, 2), delta), delta.sum(axis=1))
        if k > 0:
            delta = np.matmul(delta, np.swapaxes(W, 1, 2)) * (1.0 - acts[k] ** 2)

    grads = []
    s2 = model.hyper.prior_std**2
    for k, (layer, (gW, gb), (ew, eb)) in enumerate(zip(model.layers, grads_w, eps)):
        sw, sb = stds[k] if bayes else (None, None)
        for g, e, mu, rho, sig in ((gW, ew, layer.w_mu, layer.w_rho, sw), (gb, eb, layer.b_mu, layer.b_rho, sb)):
            g_mu = g.sum(axis=0)
            if bayes:
                sig_rho = -np.expm1(-sig)  # sigmoid(rho) = 1 - exp(-softplus(rho))
                g_rho = (g * e).sum(axis=0) * sig_rho
                if kl_weight:
                    g_mu = g_mu + kl_weight * mu / s2
                    g_rho = g_rho + kl_weight * (-1.0 / sig + sig / s2) * sig_rho
            else:
                g_rho = np.zeros_like(rho)
            grads.append(g_mu)
            grads.append(g_rho)
    return loss, grads


def negative_elbo(model: BaclModel, Z, y, eps, kl_weight: float) -> float:
    loss, _ = loss_and_grads(model, Z, y, eps, kl_weight)
    return loss


def gradient_step(model: BaclModel, Z, y, eps, kl_weight: float, learning_rate: float) -> BaclModel:
    """One plain gradient-descent update, mu <- mu - a*d_mu, rho <- rho - a*d_rho."""
    loss, grads = loss_and_grads(model, Z, y, eps, kl_weight)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} on batch of {len(y)} samples")
    new = model.copy()
    for p, g in zip(new.params(), grads):
        p -= learning_rate * g
    return new


# ---- training -----------------------------------------------------------

@dataclass
class TrainResult:
    model: BaclModel
    loss_trace: List[float]
    val_trace: List[float]
    best_epoch: int
    stopped_early: bool


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _packed(model: BaclModel) -> Tuple[BaclModel, np.ndarray]:
    """Copy of ``model`` whose parameter arrays are views into one flat buffer."""
    params = model.params()
    flat = np.concatenate([p.ravel() for p in params])
    views, off = [], 0
    for p in params:
        views.append(flat[off:off + p.size].reshape(p.shape))
        off += p.size
    layers = [VariationalLayer(*views[4 * i:4 * i + 4]) for i in range(len(model.layers))]
    return replace(model, layers=layers), flat


def _mean_nll(model: BaclModel, Z, y) -> float:
    mean, sigma = forward(model, Z, [(l.w_mu, l.b_mu) for l in model.layers])
    return float(gaussian_nll(y, mean[0], sigma[0]).mean())


def train(model: BaclModel, X: np.ndarray, y: np.ndarray, seed: int = 0, hyper: Optional[Hyperparameters] = None) -> TrainResult:
    """Minibatch negative-ELBO training on raw features ``X``.

    Holds out ``val_fraction`` of the data (when there is enough) and stops once
    the validation NLL has not improved for ``patience`` epochs, restoring the
    best parameters. Deterministic for a fixed ``seed``.
    """
    hyper = hyper or model.hyper
    model, flat = _packed(replace(model, hyper=hyper))
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size < 1:
        raise ValueError("train needs at least one sample")
    rng = substream(seed, "train")
    Z = model.normalizer.apply(X)

    n_val = int(round(hyper.val_fraction * y.size)) if y.size >= hyper.min_val_samples else 0
    perm = rng.permutation(y.size)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    Zt, yt = Z[tr_idx], y[tr_idx]
    Zv, yv = Z[val_idx], y[val_idx]
    N = yt.size
    bs = min(hyper.batch_size, N)
    opt = _Adam([flat], hyper.learning_rate) if hyper.optimizer == "adam" else None

    trace, val_trace = [], []
    best = (np.inf, 0, flat.copy())
    bad_epochs = 0
    first = None
    stopped = False
    for epoch in range(hyper.epochs):
        kl_w_epoch = hyper.kl_factor(epoch) if model.mode == BAYESIAN else 0.0
        order = rng.permutation(N)
        total = 0.0
        for start in range(0, N, bs):
            idx = order[start:start + bs]
            eps = draw_noise(model, hyper.mc_samples, rng)
            loss, grads = loss_and_grads(model, Zt[idx], yt[idx], eps, kl_w_epoch * idx.size / N)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch rows {tr_idx[idx].tolist()}")
            g = np.concatenate([x.ravel() for x in grads])
            if opt is not None:
                opt.step([flat], [g])
            else:
                flat -= hyper.learning_rate * g
            total += loss
        trace.append(total)
        if first is None:
            first = abs(total)
        elif total > 10 * first:
            bad_epochs += 1
            if bad_epochs >= 5:
                raise TrainingError(f"training diverged: epoch {epoch} loss {total:.4g} vs initial {first:.4g}")
        else:
            bad_epochs = 0

        if n_val:
            v = _mean_nll(model, Zv, yv)
            val_trace.append(v)
            if v < best[0] - 1e-6:
                best = (v, epoch, flat.copy())
            elif epoch - best[1] >= hyper.patience:
                stopped = True
                break
    best_epoch = len(trace) - 1
    if n_val and np.isfinite(best[0]):
        flat[...] = best[2]
        best_epoch = best[1]
    return TrainResult(model.copy(), trace, val_trace, best_epoch, stopped)


def fit_lane_model(
    samples: Sequence[TrainingSample],
    spec: FeatureSpec,
    hyper: Hyperparameters = Hyperparameters(),
    mode: str = BAYESIAN,
    seed: int = 0,
    lane: str = "",
) -> TrainResult:
    """Normalize, initialize and train one lane's model from its samples."""
    X, y = samples_to_arrays(samples)
    if y.size == 0:
        raise ValueError(f"lane {lane!r}: no training samples")
    if X.shape[1] != spec.width:
        raise ValueError(f"samples carry {X.shape[1]} features, spec expects {spec.width}")
    norm = fit_normalizer(X)
    scale = max(float(np.std(y)), 1.0)
    model = BaclModel.create(
        spec.width, hyper, spec=spec, normalizer=norm, mode=mode, seed=seed,
        out_shift=float(np.mean(y)), out_scale=scale, lane=lane,
    )
    return train(model, X, y, seed=seed)


# ---- prediction ---------------------------------------------------------

def predict(model: BaclModel, X: np.ndarray, n_samples: Optional[int] = None) -> PredictiveDistribution:
    """Monte-Carlo predictive mean and variance split for raw features ``X``.

    Weight draws come from a fixed stream tied to the model seed, so repeated
    calls on the same inputs return identical results.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = model.normalizer.apply(X)
    if model.mode == DETERMINISTIC:
        M = 1
        eps = zero_noise(model, 1)
    else:
        M = int(n_samples or model.hyper.predict_samples)
        if M < 1:
            raise ValueError("need at least one weight sample")
        eps = draw_noise(model, M, substream(model.seed, "predict", M))
    mean, sigma = forward(model, Z, sample_weights(model, eps))
    mu = mean.mean(axis=0)
    if M == 1:
        epi = np.zeros_like(mu)
    else:
        epi = np.maximum((mean**2).mean(axis=0) - mu**2, 0.0)
    alea = (sigma**2).mean(axis=0)
    return PredictiveDistribution(np.maximum(mu, 0.0), mu, epi, alea, M)
