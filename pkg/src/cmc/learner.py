"""Pixel actor-critic: conv autoencoder trained jointly with the critic.

The critic is ``Q(s, a) = head(f(s) ++ a)`` where ``f`` is the encoder shared
with the autoencoder. The actor reads the latent code and never trains the
encoder. Target copies exist for the encoder, critic head and actor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Network, activation, conv2d, dense, meanpool, reshape, upsample


@dataclass(frozen=True)
class ConvPreset:
    input_pool: int
    filters: tuple[int, int, int]
    kernel: int = 3
    hidden: int = 64


PRESETS = {
    "desk": ConvPreset(input_pool=2, filters=(4, 8, 8)),
    # seven conv layers in total across encoder and decoder
    "full": ConvPreset(input_pool=1, filters=(16, 32, 32)),
}


def encoder_specs(obs_shape, latent_dim, preset: ConvPreset):
    h, w, _ = obs_shape
    f1, f2, f3 = preset.filters
    k = preset.kernel
    specs = []
    if preset.input_pool > 1:
        specs.append(meanpool(preset.input_pool))
        h, w = h // preset.input_pool, w // preset.input_pool
    specs += [conv2d(f1, k), activation("relu"), meanpool(2),
              conv2d(f2, k), activation("relu"), meanpool(2),
              conv2d(f3, k), activation("relu"),
              reshape((h // 4) * (w // 4) * f3), dense(latent_dim)]
    return specs


def decoder_specs(obs_shape, latent_dim, preset: ConvPreset, full_scale=False):
    h, w, c = obs_shape
    f1, f2, f3 = preset.filters
    k = preset.kernel
    p = preset.input_pool
    hb, wb = h // (4 * p), w // (4 * p)
    # mirror of the encoder: channel counts step back down f3 -> f2 -> f1
    specs = [dense(hb * wb * f3), activation("relu"), reshape(hb, wb, f3),
             conv2d(f2, k), activation("relu"), upsample(2),
             conv2d(f1, k), activation("relu"), upsample(2)]
    if full_scale:
        specs += [conv2d(f1, k), activation("relu")]
    specs.append(conv2d(c, k))
    if p > 1:
        specs.append(upsample(p))
    return specs


@dataclass(frozen=True)
class LearnerConfig:
    latent_dim: int = 8
    preset: str = "desk"
    gamma: float = 0.99
    tau: float = 1e-3
    lam_rec: float = 0.1
    lam_critic: float = 1.0
    critic_lr: float = 1e-3
    actor_lr: float = 1e-4
    cacla_lr: float = 1e-2
    hidden: int = 64

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must be in (0, 1]")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")


@dataclass
class Minibatch:
    obs: np.ndarray
    phi: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    reward_ext: np.ndarray
    next_obs: np.ndarray
    next_phi: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.obs.shape[0]


class ActorCritic:
    def __init__(self, obs_shape, action_dim, config: LearnerConfig | None = None, seed=0):
        cfg = config or LearnerConfig()
        self.config = cfg
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        dz = cfg.latent_dim
        preset = PRESETS[cfg.preset]
        for extent in obs_shape[:2]:
            if extent % (4 * preset.input_pool):
                raise ValueError(f"image extent {extent} not divisible by {4 * preset.input_pool}")
        seeds = np.random.SeedSequence(seed).generate_state(4)
        self.encoder = Network(obs_shape, encoder_specs(obs_shape, dz, preset), seed=int(seeds[0]))
        self.decoder = Network((dz,), decoder_specs(obs_shape, dz, preset, cfg.preset == "full"),
                               seed=int(seeds[1]))
        self.critic = Network((dz + action_dim,), [dense(cfg.hidden), activation("relu"), dense(1)],
                              seed=int(seeds[2]))
        self.actor = Network((dz,), [dense(cfg.hidden), activation("relu"), dense(action_dim),
                                     activation("tanh")], seed=int(seeds[3]))
        self.encoder_t = self.encoder.copy()
        self.critic_t = self.critic.copy()
        self.actor_t = self.actor.copy()
        self.critic_opt = nn.Adam(self.critic_params, lr=cfg.critic_lr)
        self.actor_opt = nn.Adam(self.actor.params, lr=cfg.actor_lr)

    @property
    def critic_params(self):
        return self.encoder.params + self.decoder.params + self.critic.params

    def networks(self):
        return {"encoder": self.encoder, "decoder": self.decoder, "critic": self.critic, "actor": self.actor,
                "encoder_target": self.encoder_t, "critic_target": self.critic_t, "actor_target": self.actor_t}

    # ------------------------------------------------------------------ evaluation

    def encode(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 3:
            return self.encoder(obs[None])[0]
        return self.encoder(obs)

    def act(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.ndim == 1:
            return self.actor(phi[None])[0]
        return self.actor(phi)

    def q_value(self, phi, a, target=False):
        net = self.critic_t if target else self.critic
        return net(np.concatenate([np.atleast_2d(phi), np.atleast_2d(a)], axis=1))[:, 0]

    def td_targets(self, batch: Minibatch):
        """``r + gamma * (1 - done) * Q'(s', mu'(f'(s')))`` using the stored combined reward."""
        phi_next = self.encoder_t(batch.next_obs)
        q_next = self.q_value(phi_next, self.actor_t(phi_next), target=True)
        return batch.reward + self.config.gamma * (1.0 - batch.done) * q_next

    # ------------------------------------------------------------------ critic + autoencoder

    def reconstruction_loss(self, obs):
        """Pixel MSE of the autoencoder and gradients for encoder and decoder."""
        obs = np.asarray(obs, dtype=np.float64)
        phi, c_enc = self.encoder.forward(obs)
        rec, c_dec = self.decoder.forward(phi)
        loss, g_rec = nn.mse(rec, obs)
        g_dec, g_phi = self.decoder.backward(c_dec, g_rec)
        g_enc, _ = self.encoder.backward(c_enc, g_phi, input_grad=False)
        return loss, g_enc, g_dec

    def combined_gradients(self, batch: Minibatch, lam_rec=None, lam_critic=None):
        """Loss report and gradients (ordered like ``critic_params``) of the weighted loss."""
        cfg = self.config
        lam_rec = cfg.lam_rec if lam_rec is None else lam_rec
        lam_critic = cfg.lam_critic if lam_critic is None else lam_critic
        y = self.td_targets(batch)
        phi, c_enc = self.encoder.forward(batch.obs)
        rec, c_dec = self.decoder.forward(phi)
        rec_loss, g_rec = nn.mse(rec, batch.obs)
        q, c_q = self.critic.forward(np.concatenate([phi, batch.action], axis=1))
        critic_loss, g_q = nn.mse(q[:, 0], y)
        g_dec, g_phi_rec = self.decoder.backward(c_dec, lam_rec * g_rec)
        g_head, g_x = self.critic.backward(c_q, lam_critic * g_q[:, None])
        g_enc, _ = self.encoder.backward(c_enc, g_phi_rec + g_x[:, :cfg.latent_dim], input_grad=False)
        report = {"rec_loss": rec_loss, "critic_loss": critic_loss,
                  "loss": lam_rec * rec_loss + lam_critic * critic_loss}
        return report, g_enc + g_dec + g_head, phi

    def combined_update(self, batch: Minibatch):
        report, grads, phi = self.combined_gradients(batch)
        if not np.isfinite(report["loss"]):
            report["aborted"] = True
            return report
        self.critic_opt.step(grads)
        report["phi"] = phi
        return report

    # ------------------------------------------------------------------ actor

    def ddpg_gradients(self, phi):
        """Gradient of ``-mean_i Q(phi_i, mu(phi_i))`` wrt the actor parameters."""
        n = phi.shape[0]
        a, c_mu = self.actor.forward(phi)
        _, c_q = self.critic.forward(np.concatenate([phi, a], axis=1))
        _, g_x = self.critic.backward(c_q, np.full((n, 1), -1.0 / n))
        grads, _ = self.actor.backward(c_mu, g_x[:, self.config.latent_dim:])
        return grads

    def ddpg_actor_update(self, batch: Minibatch, phi=None):
        phi = self.encoder(batch.obs) if phi is None else phi
        self.actor_opt.step(self.ddpg_gradients(phi))

    def advantages(self, batch: Minibatch, phi=None, phi_next=None):
        phi = self.encoder(batch.obs) if phi is None else phi
        phi_next = self.encoder(batch.next_obs) if phi_next is None else phi_next
        q_now = self.q_value(phi, self.actor(phi))
        q_next = self.q_value(phi_next, self.actor(phi_next))
        return batch.reward + self.config.gamma * (1.0 - batch.done) * q_next - q_now

    def cacla_actor_update(self, batch: Minibatch, phi=None, phi_next=None):
        """Move the actor toward stored actions whose observed advantage is positive.

        Uses plain gradient steps with rate ``cacla_lr`` on the mean of
        ``0.5 * |a_i - mu(phi_i)|^2`` over the positive-advantage samples.
        Returns how many samples triggered the update.
        """
        phi = self.encoder(batch.obs) if phi is None else phi
        adv = self.advantages(batch, phi, phi_next)
        pos = adv > 0
        m = int(pos.sum())
        if m == 0:
            return 0
        mu, c_mu = self.actor.forward(phi[pos])
        grads, _ = self.actor.backward(c_mu, (mu - batch.action[pos]) / m)
        nn.check_finite(grads)
        for p, g in zip(self.actor.params, grads):
            p -= self.config.cacla_lr * g
        return m

    def soft_update_targets(self, tau=None):
        tau = self.config.tau if tau is None else tau
        nn.soft_update(self.encoder_t, self.encoder, tau)
        nn.soft_update(self.critic_t, self.critic, tau)
        nn.soft_update(self.actor_t, self.actor, tau)

    def save(self, directory):
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, net in self.networks().items():
            nn.save_checkpoint(net, directory / f"{name}.json")
