"""Training objectives: MSE on log amplitudes and a per-bin Gaussian mixture."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _make, as_tensor, check_finite

SIGMA_MIN_DB = 0.01
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def mse_loss(pred, target):
    """Mean of squared differences over every element; differentiable in both."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gd = (2.0 / n) * g * diff
        if pred.requires_grad:
            pred._accum(gd)
        if target.requires_grad:
            target._accum(-gd)

    return _make(np.mean(diff * diff), (pred, target), backward)


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class CGMParams:
    """Per-bin mixture parameters, each of shape (..., bins, K).

    ``scales`` are standard deviations (already exponentiated and floored).
    Fields hold either numpy arrays or :class:`Tensor` objects.
    """

    logits: object
    means: object
    scales: object

    @property
    def n_components(self):
        return np.shape(_arr(self.logits))[-1]

    def weights(self):
        return softmax(_arr(self.logits))

    def numpy(self):
        return CGMParams(_arr(self.logits), _arr(self.means), _arr(self.scales))

    def mixture_mean(self):
        return np.sum(self.weights() * _arr(self.means), axis=-1)

    def mixture_var(self):
        w, mu, sd = self.weights(), _arr(self.means), _arr(self.scales)
        m = np.sum(w * mu, axis=-1, keepdims=True)
        return np.sum(w * (sd * sd + (mu - m) ** 2), axis=-1)


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def cgm_nll(params, target):
    """Mean over bins (and leading axes) of -log sum_k w_k N(target | mu_k, sigma_k)."""
    lg, mu, sd = (as_tensor(x) for x in (params.logits, params.means, params.scales))
    x = _arr(target)
    for name, t in (("logits", lg), ("means", mu), ("scales", sd)):
        check_finite(t.data, f"mixture {name}")
    if np.any(sd.data <= 0):
        raise ValueError("mixture scales must be positive")
    if not (lg.shape == mu.shape == sd.shape) or lg.shape[:-1] != x.shape:
        raise ValueError(
            f"mixture shapes {lg.shape}/{mu.shape}/{sd.shape} do not fit target {x.shape}"
        )
    z = (x[..., None] - mu.data) / sd.data
    log_w = lg.data - np.max(lg.data, axis=-1, keepdims=True)
    log_w = log_w - np.log(np.sum(np.exp(log_w), axis=-1, keepdims=True))
    comp = log_w - 0.5 * z * z - np.log(sd.data) - _HALF_LOG_2PI
    top = np.max(comp, axis=-1, keepdims=True)
    lse = top[..., 0] + np.log(np.sum(np.exp(comp - top), axis=-1))
    n = lse.size
    resp = np.exp(comp - lse[..., None])
    w = np.exp(log_w)

    def backward(g):
        c = g / n
        if lg.requires_grad:
            lg._accum(c * (w - resp))
        if mu.requires_grad:
            mu._accum(-c * resp * z / sd.data)
        if sd.requires_grad:
            sd._accum(-c * resp * (z * z - 1.0) / sd.data)

    return _make(-np.mean(lse), (lg, mu, sd), backward)


def sharpened_weights(logits, tau):
    """Mixture weights raised to 1/tau and renormalised (tau > 0)."""
    return softmax(np.asarray(logits) / tau)


def cgm_sample(params, tau, rng=None):
    """Draw one value per bin.

    At ``tau == 0`` the result is the mean of the highest-weight component
    and ``rng`` is not touched.
    """
    if tau < 0:
        raise ValueError("temperature must be >= 0")
    p = params.numpy()
    if tau == 0:
        k = np.argmax(p.logits, axis=-1)
        return np.take_along_axis(p.means, k[..., None], axis=-1)[..., 0]
    if rng is None:
        raise ValueError("sampling at tau > 0 needs a numpy Generator")
    w = sharpened_weights(p.logits, tau)
    u = rng.random(w.shape[:-1])
    k = np.minimum((np.cumsum(w, axis=-1) < u[..., None]).sum(axis=-1), w.shape[-1] - 1)
    mu = np.take_along_axis(p.means, k[..., None], axis=-1)[..., 0]
    sd = np.take_along_axis(p.scales, k[..., None], axis=-1)[..., 0]
    return mu + tau * sd * rng.standard_normal(mu.shape)
