"""Deterministic pixel-rendered reaching and grasping environments.

Both environments take actions in ``[-1, 1]^dim(A)``; joint deltas are the
clipped action times ``max_step`` degrees. Observations are HWC float images
in ``[0, 1]`` quantized to 1/255 so they can be stored losslessly as uint8.
Channel 0 (red) shows the target object, channel 1 (green) the arm and
channel 2 (blue) the gripper or hand.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

REWARD_MODES = ("dense", "sparse")
OUTCOMES = ("none", "success", "topple", "timeout")


@dataclass(frozen=True)
class EnvConfig:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    reward_mode: str = "sparse"
    episode_length: int = 30
    max_step: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.image_height < 8 or self.image_width < 8:
            raise ValueError("image extents must be >= 8")
        if self.channels != 3:
            raise ValueError("only 3-channel rendering is supported")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if not self.max_step > 0:
            raise ValueError("max_step must be > 0")


    @property
    def observation_shape(self):
        return (self.image_height, self.image_width, self.channels)


@dataclass
class StepResult:
    observation: np.ndarray
    reward_ext: float
    done: bool
    info: dict = field(default_factory=dict)


def quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


class Canvas:
    """Pixel-center coordinates of a view rectangle in world units."""

    def __init__(self, height, width, x_range, y_range):
        self.height, self.width = height, width
        x0, x1 = x_range
        y0, y1 = y_range
        self.pixel = (x1 - x0) / width
        xs = x0 + (np.arange(width) + 0.5) * (x1 - x0) / width
        ys = y1 - (np.arange(height) + 0.5) * (y1 - y0) / height
        self.X, self.Y = np.meshgrid(xs, ys)

    def disc(self, center, radius):
        d = np.hypot(self.X - center[0], self.Y - center[1])
        return np.clip(0.5 + (radius - d) / self.pixel, 0.0, 1.0)

    def segment(self, p, q, half_width):
        px, py = p
        dx, dy = q[0] - px, q[1] - py
        length2 = dx * dx + dy * dy
        t = ((self.X - px) * dx + (self.Y - py) * dy) / max(length2, 1e-12)
        t = np.clip(t, 0.0, 1.0)
        d = np.hypot(self.X - (px + t * dx), self.Y - (py + t * dy))
        return np.clip(0.5 + (half_width - d) / self.pixel, 0.0, 1.0)


# --------------------------------------------------------------------------
# reward functions


def reward_reach(tip, target, mode, zone_radius, max_distance):
    """+1 inside the (inclusive) target zone; otherwise -distance/max_distance or 0."""
    d = math.dist(tip, target)
    if d <= zone_radius:
        return 1.0
    if mode == "sparse":
        return 0.0
    return -min(d / max_distance, 1.0)


def reward_grasp(shoulder_angle, target_angle, event, mode, max_angle_distance):
    if event == "grasped":
        return 1.0
    if event == "toppled":
        return -1.0
    if mode == "sparse":
        return 0.0
    return -min(abs(shoulder_angle - target_angle) / max_angle_distance, 1.0)


# --------------------------------------------------------------------------
# reacher


@dataclass
class ReacherState:
    joint_angles: np.ndarray  # radians
    target_position: np.ndarray


class PixelReacher:
    """Planar 3-link arm reaching a red disc, seen from above.

    The base sits at the image center; joint angle 0 points the link along
    the previous link (the first along +y). Targets are drawn uniformly from
    the half annulus ``r in [0.45, 0.85]``, polar angle within 90 degrees of
    +y, every point of which the arm can reach within its joint limits.
    """

    name = "reacher"
    action_dim = 3
    link_lengths = (0.4, 0.35, 0.25)
    joint_limit = math.pi / 2
    target_r_range = (0.45, 0.85)
    view = 1.05

    @property
    def observation_shape(self):
        return self.config.observation_shape

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.arm_length = float(sum(self.link_lengths))
        self.zone_radius = self.arm_length / 10.0
        self.max_distance = self.arm_length + self.target_r_range[1]
        cfg = self.config
        self.canvas = Canvas(cfg.image_height, cfg.image_width, (-self.view, self.view), (-self.view, self.view))
        self.state: ReacherState | None = None
        self.t = 0
        self.episode = -1
        self.done = False

    @property
    def obs_shape(self):
        return (self.config.image_height, self.config.image_width, self.config.channels)

    def zone_area_fraction(self):
        r0, r1 = self.target_r_range
        return (math.pi * self.zone_radius**2) / (0.5 * math.pi * (r1 * r1 - r0 * r0))

    def sample_target(self, rng):
        r0, r1 = self.target_r_range
        r = math.sqrt(rng.uniform(r0 * r0, r1 * r1))
        psi = rng.uniform(-math.pi / 2, math.pi / 2)
        return np.array([r * math.sin(psi), r * math.cos(psi)])

    def in_target_region(self, p):
        r = math.hypot(p[0], p[1])
        return self.target_r_range[0] <= r <= self.target_r_range[1] and p[1] >= -1e-12

    def reset(self, episode=None):
        self.episode = self.episode + 1 if episode is None else int(episode)
        rng = np.random.default_rng((self.config.seed, self.episode))
        self.state = ReacherState(np.zeros(3), self.sample_target(rng))
        self.t = 0
        self.done = False
        return self.render()

    def joint_positions(self, angles=None):
        angles = self.state.joint_angles if angles is None else angles
        pts = [np.zeros(2)]
        heading = 0.0
        for length, theta in zip(self.link_lengths, angles):
            heading += theta
            pts.append(pts[-1] + length * np.array([math.sin(heading), math.cos(heading)]))
        return pts

    def tip(self, angles=None):
        return self.joint_positions(angles)[-1]

    def distance(self):
        return float(math.dist(self.tip(), self.state.target_position))

    def step(self, action):
        if self.state is None or self.done:
            raise RuntimeError("episode finished or not started; call reset()")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.action_dim), -1.0, 1.0)
        if not np.all(np.isfinite(a)):
            raise ValueError("action must be finite")
        delta = a * math.radians(self.config.max_step)
        self.state.joint_angles = np.clip(self.state.joint_angles + delta, -self.joint_limit, self.joint_limit)
        self.t += 1
        tip = self.tip()
        reward = reward_reach(tip, self.state.target_position, self.config.reward_mode,
                              self.zone_radius, self.max_distance)
        outcome = "none"
        if math.dist(tip, self.state.target_position) <= self.zone_radius:
            outcome = "success"
        elif self.t >= self.config.episode_length:
            outcome = "timeout"
        self.done = outcome != "none"
        return StepResult(self.render(), reward, self.done, {"distance": self.distance(), "outcome": outcome})

    def render(self, state=None):
        state = state or self.state
        c = self.canvas
        img = np.zeros(self.obs_shape)
        img[..., 0] = c.disc(state.target_position, self.zone_radius)
        pts = self.joint_positions(state.joint_angles)
        arm = np.zeros((c.height, c.width))
        for p, q in zip(pts[:-1], pts[1:]):
            arm = np.maximum(arm, c.segment(p, q, 0.04))
        img[..., 1] = arm
        img[..., 2] = c.disc(pts[-1], 0.07)
        return quantize(img)

    def summary(self):
        s = self.state
        return {"joint_angles": s.joint_angles.tolist(), "target": s.target_position.tolist(),
                "distance": self.distance()}


# --------------------------------------------------------------------------
# grasper


@dataclass
class GrasperState:
    shoulder_angle: float  # degrees
    hand_aperture: float  # 1 = fully open
    target_angle: float  # degrees
    object_upright: bool = True


class PixelGrasper:
    """One shoulder joint plus an open/close hand grasping an upright object.

    The hand moves on a circle around the shoulder; the object stands on the
    same circle at ``target_angle``. Closing the hand (aperture dropping below
    one half) triggers the retention check: the grasp holds iff the shoulder
    is within ``grasp_tolerance`` degrees of the object. A failed check reopens
    the hand and leaves the shoulder where it closed, unless the closing hand
    swept through the object's angular sector, which topples the object.
    """

    name = "grasper"
    action_dim = 2
    shoulder_limit = 100.0
    target_range = (20.0, 80.0)  # absolute angle, either side
    object_halfwidth = 10.0
    grasp_tolerance = 5.0
    retention_move = 20.0
    hand_step = 0.5
    reach_radius = 0.8

    @property
    def observation_shape(self):
        return self.config.observation_shape

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig(image_height=16, image_width=32)
        self.max_angle_distance = self.shoulder_limit + self.target_range[1]
        cfg = self.config
        self.canvas = Canvas(cfg.image_height, cfg.image_width, (-1.0, 1.0),
                             (-0.15, -0.15 + 2.0 * cfg.image_height / cfg.image_width))
        self.state: GrasperState | None = None
        self.t = 0
        self.episode = -1
        self.done = False

    @property
    def obs_shape(self):
        return (self.config.image_height, self.config.image_width, self.config.channels)

    def sample_target(self, rng):
        lo, hi = self.target_range
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        return side * rng.uniform(lo, hi)

    def reset(self, episode=None):
        self.episode = self.episode + 1 if episode is None else int(episode)
        rng = np.random.default_rng((self.config.seed, self.episode))
        self.state = GrasperState(0.0, 1.0, float(self.sample_target(rng)), True)
        self.t = 0
        self.done = False
        return self.render()

    def verify_grasp(self, state=None):
        """Retention check after closing; returns whether the object is held."""
        s = state or self.state
        return abs(s.shoulder_angle - s.target_angle) <= self.grasp_tolerance

    def _sweeps_object(self, a0, a1):
        lo, hi = min(a0, a1), max(a0, a1)
        t, w = self.state.target_angle, self.object_halfwidth
        return hi >= t - w and lo <= t + w

    def step(self, action):
        if self.state is None or self.done:
            raise RuntimeError("episode finished or not started; call reset()")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.action_dim), -1.0, 1.0)
        if not np.all(np.isfinite(a)):
            raise ValueError("action must be finite")
        s = self.state
        prev_angle, prev_aperture = s.shoulder_angle, s.hand_aperture
        lim = self.shoulder_limit
        s.shoulder_angle = float(np.clip(prev_angle + a[0] * self.config.max_step, -lim, lim))
        s.hand_aperture = float(np.clip(prev_aperture + a[1] * self.hand_step, 0.0, 1.0))
        self.t += 1

        event = "none"
        if s.hand_aperture < 0.5 <= prev_aperture:
            if self.verify_grasp():
                event = "grasped"
            elif self._sweeps_object(prev_angle, s.shoulder_angle):
                event = "toppled"
                s.object_upright = False
            else:
                # retention move failed: reopen, shoulder back to where it closed
                s.hand_aperture = 1.0
        reward = reward_grasp(s.shoulder_angle, s.target_angle, event, self.config.reward_mode,
                              self.max_angle_distance)
        outcome = {"grasped": "success", "toppled": "topple"}.get(event, "none")
        if outcome == "none" and self.t >= self.config.episode_length:
            outcome = "timeout"
        self.done = outcome != "none"
        info = {"distance": abs(s.shoulder_angle - s.target_angle) / self.max_angle_distance,
                "outcome": outcome, "event": event}
        return StepResult(self.render(), reward, self.done, info)

    def _on_circle(self, angle_deg, radius=None):
        r = self.reach_radius if radius is None else radius
        a = math.radians(angle_deg)
        return np.array([r * math.sin(a), r * math.cos(a)])

    def render(self, state=None):
        s = state or self.state
        c = self.canvas
        img = np.zeros(self.obs_shape)
        obj = self._on_circle(s.target_angle)
        if s.object_upright:
            img[..., 0] = c.disc(obj, 0.07)
        else:
            img[..., 0] = 0.5 * c.segment(obj, self._on_circle(s.target_angle, self.reach_radius + 0.15), 0.04)
        hand = self._on_circle(s.shoulder_angle)
        img[..., 1] = c.segment(np.zeros(2), self._on_circle(s.shoulder_angle, self.reach_radius - 0.06), 0.04)
        a = math.radians(s.shoulder_angle)
        tangent = np.array([math.cos(a), -math.sin(a)])
        spread = 0.03 + 0.09 * s.hand_aperture
        fingers = np.maximum(c.disc(hand + spread * tangent, 0.05), c.disc(hand - spread * tangent, 0.05))
        img[..., 2] = fingers
        return quantize(img)

    def summary(self):
        return {k: (float(v) if not isinstance(v, bool) else v) for k, v in asdict(self.state).items()}


ENVIRONMENTS = {"reacher": PixelReacher, "grasper": PixelGrasper}

DEFAULT_IMAGE = {"reacher": (32, 32), "grasper": (16, 32)}


def make_env(name, reward_mode="sparse", episode_length=30, max_step=20.0, seed=0, image=None):
    h, w = image or DEFAULT_IMAGE[name]
    cfg = EnvConfig(image_height=h, image_width=w, reward_mode=reward_mode,
                    episode_length=episode_length, max_step=max_step, seed=seed)
    return ENVIRONMENTS[name](cfg)


# --------------------------------------------------------------------------
# debug output


class TraceWriter:
    """Newline-delimited JSON episode trace."""

    def __init__(self, path):
        self.fh = open(path, "w")

    def write(self, t, action, reward_ext, outcome, state_summary):
        rec = {"t": t, "action": [float(x) for x in action], "reward_ext": reward_ext,
               "outcome": outcome, "state": state_summary}
        self.fh.write(json.dumps(rec) + "\n")

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_ppm(path, obs):
    """Binary P6 dump of an HWC image in [0, 1]."""
    img = np.round(np.clip(obs, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, dims, maxval, body = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError("not a binary PPM written by write_ppm")
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0
