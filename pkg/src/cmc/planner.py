"""Gradient-descent model-predictive planner over the learned latent model.

A plan is an ``(H, action_dim)`` array of actions in ``[-1, 1]``. The model is
unrolled from the current latent under the plan; the loss is the squared gap
between a target return and the undiscounted sum of predicted rewards, and the
actions are updated by backprop through time. Network parameters are never
modified here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 3
    iterations: int = 10
    rate: float = 0.05
    target_return: float = 1.0

    def __post_init__(self):
        if self.horizon < 1 or self.iterations < 1:
            raise ValueError("horizon and iterations must be >= 1")
        if not self.rate > 0:
            raise ValueError("plan update rate must be > 0")


@dataclass
class PlanResult:
    actions: np.ndarray
    losses: list[float] = field(default_factory=list)
    diverged: bool = False
    halved: bool = False

    @property
    def first_action(self):
        return first_action(self.actions)


def first_action(plan):
    return np.asarray(plan)[0].copy()


class Planner:
    def __init__(self, dynamics, actor, config: PlannerConfig | None = None):
        self.dynamics = dynamics
        self.actor = actor
        self.config = config or PlannerConfig()

    def propose(self, phi, horizon=None):
        """Actor-seeded plan: act, predict the next latent, act again."""
        H = horizon or self.config.horizon
        phi = np.asarray(phi, dtype=np.float64).reshape(1, -1)
        actions = []
        for h in range(H):
            a = self.actor(phi)
            actions.append(a[0])
            if h + 1 < H:
                phi, _, _ = self.dynamics.forward(phi, a)
        return np.array(actions)

    def _unroll(self, plan, phi):
        phi = np.asarray(phi, dtype=np.float64).reshape(1, -1)
        caches, rewards = [], []
        for h in range(plan.shape[0]):
            nxt, r, cache = self.dynamics.forward(phi, plan[h:h + 1])
            caches.append(cache)
            rewards.append(r[0])
            phi = nxt
        return rewards, caches

    def plan_loss(self, plan, phi):
        rewards, _ = self._unroll(np.asarray(plan, dtype=np.float64), phi)
        return float((self.config.target_return - sum(rewards)) ** 2)

    def loss_and_gradient(self, plan, phi):
        """Exact gradient of the plan loss wrt every action component."""
        plan = np.asarray(plan, dtype=np.float64)
        rewards, caches = self._unroll(plan, phi)
        gap = self.config.target_return - sum(rewards)
        g_r = np.array([-2.0 * gap])
        grad = np.empty_like(plan)
        g_phi = np.zeros((1, self.dynamics.latent_dim))
        for h in reversed(range(plan.shape[0])):
            _, g_phi, g_a = self.dynamics.backward(caches[h], g_phi, g_r)
            grad[h] = g_a[0]
        return float(gap * gap), grad

    def plan_gradient(self, plan, phi):
        return self.loss_and_gradient(plan, phi)[1]

    def optimize(self, plan, phi, config: PlannerConfig | None = None):
        """K clipped gradient steps on the plan.

        ``losses`` holds the loss of the plan before each update followed by
        the loss of the returned plan. After three consecutive loss increases
        the step size is halved for the rest of the call; a non-finite
        gradient stops early and returns the best plan seen.
        """
        cfg = config or self.config
        plan = np.clip(np.array(plan, dtype=np.float64), -1.0, 1.0)
        rate = cfg.rate
        result = PlanResult(plan)
        best_plan, best_loss = plan.copy(), np.inf
        rises = 0
        for _ in range(cfg.iterations):
            loss, grad = self.loss_and_gradient(plan, phi)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                result.diverged = True
                result.actions = best_plan
                return result
            if result.losses and loss > result.losses[-1]:
                rises += 1
                if rises >= 3 and not result.halved:
                    rate *= 0.5
                    result.halved = True
            else:
                rises = 0
            result.losses.append(loss)
            if loss < best_loss:
                best_plan, best_loss = plan.copy(), loss
            plan = np.clip(plan - rate * grad, -1.0, 1.0)
        final = self.plan_loss(plan, phi)
        result.losses.append(final)
        if not np.isfinite(final):
            result.diverged = True
            plan = best_plan
        result.actions = plan
        return result

    def plan(self, phi):
        """Propose, optimize and return the full result; execute ``result.first_action``."""
        return self.optimize(self.propose(phi), phi)
