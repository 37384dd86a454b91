"""Latent dynamics model, windowed prediction error and learning progress."""

from __future__ import annotations

from collections import deque

import numpy as np

from . import nn
from .nn import Network, activation, dense


class LatentDynamics:
    """Next-latent and reward predictors reading one shared tanh hidden layer."""

    def __init__(self, latent_dim, action_dim, hidden=64, lr=1e-3, seed=0):
        self.latent_dim = latent_dim
        self.action_dim = action_dim
        self.trunk = Network((latent_dim + action_dim,), [dense(hidden), activation("tanh")], seed=seed)
        self.p_head = Network((hidden,), [dense(latent_dim)], seed=seed + 1)
        self.r_head = Network((hidden,), [dense(1)], seed=seed + 2)
        self.opt = nn.Adam(self.params, lr=lr)

    @property
    def params(self):
        return self.trunk.params + self.p_head.params + self.r_head.params

    def forward(self, phi, a):
        """Batched prediction with caches for :meth:`backward`."""
        x = np.concatenate([np.atleast_2d(phi), np.atleast_2d(a)], axis=1)
        h, c_trunk = self.trunk.forward(x)
        p, c_p = self.p_head.forward(h)
        r, c_r = self.r_head.forward(h)
        return p, r[:, 0], (c_trunk, c_p, c_r)

    def backward(self, caches, g_p, g_r):
        """Return ``(param_grads, grad_phi, grad_action)``."""
        c_trunk, c_p, c_r = caches
        gp_params, gh = self.p_head.backward(c_p, g_p)
        gr_params, gh_r = self.r_head.backward(c_r, np.asarray(g_r).reshape(-1, 1))
        gt_params, gx = self.trunk.backward(c_trunk, gh + gh_r)
        return gt_params + gp_params + gr_params, gx[:, :self.latent_dim], gx[:, self.latent_dim:]

    def predict(self, phi, a):
        p, r, _ = self.forward(phi, a)
        if np.ndim(phi) == 1:
            return p[0], float(r[0])
        return p, r

    def loss_and_grads(self, phi, a, phi_next, r_ext):
        """Minibatch model loss: mean squared latent error norm plus mean squared reward error."""
        p, r, caches = self.forward(phi, a)
        n = p.shape[0]
        dp = p - phi_next
        dr = r - np.asarray(r_ext, dtype=np.float64)
        loss = float(np.sum(dp * dp) / n + np.sum(dr * dr) / n)
        grads, _, _ = self.backward(caches, 2.0 * dp / n, 2.0 * dr / n)
        return loss, grads

    def train(self, phi, a, phi_next, r_ext):
        """One Adam step; latents are inputs only, nothing flows back into the encoder."""
        loss, grads = self.loss_and_grads(phi, a, phi_next, r_ext)
        if not np.isfinite(loss):
            raise nn.NonFiniteError("non-finite model loss")
        self.opt.step(grads)
        return loss

    def step_error(self, phi, a, phi_next, r_ext):
        p, r = self.predict(np.asarray(phi), np.asarray(a))
        d = p - phi_next
        return float(np.dot(d, d) + (r - r_ext) ** 2)


class CuriosityState:
    """Prediction-error history, learning progress and the scaled intrinsic reward.

    ``learning_progress`` returns ``initial_lp`` until both the current and the
    lagged window are complete.
    """

    def __init__(self, window=40, lag=20, decay=0.1, initial_lp=-1.0, eps_scale=1e-8):
        if window < 1 or lag < 1:
            raise ValueError("window and lag must be positive")
        if initial_lp >= 0:
            raise ValueError("initial learning progress must be negative")
        self.window = window
        self.lag = lag
        self.decay = decay
        self.initial_lp = initial_lp
        self.eps_scale = eps_scale
        self.errors: deque[float] = deque(maxlen=window + lag)
        self.count = 0
        self.running_scale = 0.0
        self.lp_current = initial_lp

    def record(self, error):
        if error < 0:
            raise ValueError("prediction error must be non-negative")
        self.errors.append(float(error))
        self.count += 1

    def window_average(self, offset=0):
        """Mean of the ``window`` errors ending ``offset`` steps ago, or None if incomplete."""
        n = len(self.errors)
        if offset < 0 or n - offset < self.window:
            return None
        hist = list(self.errors)
        return sum(hist[n - offset - self.window:n - offset]) / self.window

    def learning_progress(self):
        lagged = self.window_average(self.lag)
        current = self.window_average(0)
        if lagged is None or current is None:
            self.lp_current = self.initial_lp
        else:
            self.lp_current = lagged - current
        return self.lp_current

    def lp_defined(self):
        return len(self.errors) >= self.window + self.lag

    def intrinsic_reward(self, lp=None):
        """``-LP`` divided by the largest ``|LP|`` seen so far, clipped to [-1, 1].

        The placeholder value used before the windows fill is not a measured
        learning progress and yields zero.
        """
        if lp is None:
            if not self.lp_defined():
                return 0.0
            lp = self.lp_current
        self.running_scale = max(self.running_scale, abs(lp))
        return float(np.clip(-lp / max(self.running_scale, self.eps_scale), -1.0, 1.0))

    def combine_reward(self, r_ext, r_int, t):
        return combine_reward(r_ext, r_int, t, self.decay)


def combine_reward(r_ext, r_int, t, decay):
    return r_ext + r_int / (1.0 + decay * t)
