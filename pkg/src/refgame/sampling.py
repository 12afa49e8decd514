"""Stochastic token machinery: named RNG streams, Gumbel-max sampling,
the Gumbel-softmax relaxation, straight-through sampling, and the
learned inverse-temperature network.

Randomness is drawn from named counter-based streams: ``stream(seed,
*key)`` returns a fresh Philox generator for that key, so any draw can
be replayed later from (seed, key) alone.  Perturbation probes rely on
this to reuse identical Gumbel noise across objective evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn

# Stream domains.  Every consumer of randomness derives its generator
# from (seed, domain, *indices) so no two purposes share a stream.
DOMAIN_WORLD = 1
DOMAIN_INIT = 2
DOMAIN_BATCH = 3
DOMAIN_GUMBEL = 4
DOMAIN_EVAL = 5
DOMAIN_LM = 6
DOMAIN_PROBE = 7
DOMAIN_SPLIT = 8
DOMAIN_CAPTION = 9


def stream(seed, *key):
    """Named generator: independent Philox stream for (seed, *key)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def gumbel_noise(rng, shape):
    """Gumbel(0, 1) draws g = -log(-log(u)), u ~ U(0,1), clamped finite."""
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


@dataclass
class StepSample:
    """One sampled token: discrete id, optional relaxation, and the noise
    that produced it (so the discrete id and the relaxation's argmax
    coincide by construction)."""

    token_id: int
    log_prob: float
    noise: np.ndarray
    relaxed: ag.Tensor | None = None
    onehot: ag.Tensor | None = None


def _logits_tensor(logits):
    t = logits if isinstance(logits, ag.Tensor) else ag.tensor(np.asarray(logits, dtype=np.float64))
    if t.data.ndim != 1:
        raise ag.ShapeError(f"expected a logits vector, got shape {t.shape}")
    if not np.all(np.isfinite(t.data)):
        raise ValueError("logits must be finite")
    return t


def gumbel_softmax(logits, temperature, noise):
    """Relaxed categorical sample: softmax((log_softmax(logits) + g) / tau).

    ``temperature`` may be a float or a scalar Tensor; the result is
    differentiable with respect to the logits and a Tensor temperature.
    """
    lt = _logits_tensor(logits)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != lt.shape:
        raise ag.ShapeError(f"gumbel_softmax: noise shape {noise.shape} vs logits {lt.shape}")
    if isinstance(temperature, ag.Tensor):
        if np.any(temperature.data <= 0):
            raise ValueError("gumbel_softmax: temperature must be positive")
        inv = ag.div(ag.tensor(np.ones(1)), temperature)
        y = ag.mul(ag.add(ag.log_softmax_rows(lt), ag.tensor(noise)), inv)
    else:
        if temperature <= 0:
            raise ValueError("gumbel_softmax: temperature must be positive")
        y = ag.scale(ag.add(ag.log_softmax_rows(lt), ag.tensor(noise)), 1.0 / float(temperature))
    return ag.softmax_rows(y)


def gumbel_softmax_rows(logits, inv_temperature, noise):
    """Batched relaxation on (B, V) logits.

    ``inv_temperature`` is either a float (fixed temperature 1/value) or
    a (B, 1) Tensor of per-row inverse temperatures.
    """
    y = ag.add(ag.log_softmax_rows(logits), ag.tensor(noise))
    if isinstance(inv_temperature, ag.Tensor):
        y = ag.mul_rows(y, inv_temperature)
    else:
        y = ag.scale(y, float(inv_temperature))
    return ag.softmax_rows(y)


def sample_token(logits, rng):
    """Categorical draw via Gumbel-max: argmax(log p + g) ~ Cat(softmax(logits))."""
    lt = _logits_tensor(logits)
    g = gumbel_noise(rng, lt.shape)
    logp = ag.log_softmax_rows(lt)
    token = int(np.argmax(logp.data + g))
    return StepSample(token_id=token, log_prob=float(logp.data[token]), noise=g)


def st_sample(logits, temperature, rng):
    """Straight-through draw: discrete one-hot forward, relaxed backward.

    The discrete id equals the argmax of the relaxation for the same
    noise, so message usage is identical in training and evaluation.
    """
    lt = _logits_tensor(logits)
    g = gumbel_noise(rng, lt.shape)
    logp = ag.log_softmax_rows(lt)
    token = int(np.argmax(logp.data + g))
    relaxed = gumbel_softmax(lt, temperature, g)
    onehot = ag.straight_through(relaxed)
    return StepSample(token_id=token, log_prob=float(logp.data[token]), noise=g,
                      relaxed=relaxed, onehot=onehot)


class TemperatureNet:
    """Learned per-step inverse temperature:

        1 / tau(h) = softplus(w . h) + tau0

    so tau(h) <= 1/tau0 whenever tau0 > 0.  An optional tanh hidden layer
    can replace the single linear map.
    """

    def __init__(self, w, tau0, hidden=None):
        self.w = ag.param(w)
        self.tau0 = float(tau0)
        self.hidden = hidden
        if tau0 < 0:
            raise ValueError("TemperatureNet: tau0 must be >= 0")

    @classmethod
    def create(cls, rng, hidden_size, tau0, hidden_units=0):
        if hidden_units > 0:
            hid = nn.AffineMap.create(rng, hidden_size, hidden_units)
            w = nn.glorot(rng, hidden_units, 1)
            net = cls(w, tau0, hidden=hid)
        else:
            net = cls(nn.glorot(rng, hidden_size, 1), tau0)
        return net

    def inverse_col(self, h):
        """(B, H) hidden states -> (B, 1) inverse temperatures."""
        x = h
        if self.hidden is not None:
            x = ag.tanh(self.hidden(x))
        return ag.add_const(ag.softplus(ag.matmul(x, self.w)), self.tau0)

    def named_params(self, prefix):
        out = [(f"{prefix}.w", self.w)]
        if self.hidden is not None:
            out = self.hidden.named_params(f"{prefix}.hidden") + out
        return out


def temperature(net, h):
    """Scalar temperature for one hidden vector; differentiable w.r.t. w."""
    hv = h if isinstance(h, ag.Tensor) else ag.tensor(np.asarray(h, dtype=np.float64))
    row = nn._as_row(hv)
    inv = net.inverse_col(row)
    return ag.div(ag.tensor(np.ones(1)), nn._first_row(inv))
