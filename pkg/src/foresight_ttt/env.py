"""Synthetic 2D reach environment with perturbation dimensions.

The agent and goal live on the unit square. Observations are tiny grayscale
images (sums of Gaussian blobs) plus an encoded instruction vector. Eight
perturbation dimensions (Clean + seven shifts) move either the scene
sampling distributions (Robot, Layout), the instruction encoding (Language),
or the rendering (Noise, Background, Camera, Light).

All operations are pure: randomness comes in through explicit seeds or
`numpy.random.Generator` instances, so identical seeds give bit-identical
episodes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from importlib import resources

import numpy as np

__all__ = [
    "Dimension",
    "EpisodeConfig",
    "PerturbationSpec",
    "WorldState",
    "Observation",
    "reset",
    "render",
    "encode_instruction",
    "step",
    "expert_action",
    "mixing_matrix",
]


class Dimension(Enum):
    """Perturbation dimensions; CLEAN is the unperturbed reference."""

    CLEAN = "clean"
    ROBOT = "robot"
    LANGUAGE = "language"
    NOISE = "noise"
    LAYOUT = "layout"
    BACKGROUND = "background"
    CAMERA = "camera"
    LIGHT = "light"


# Canonical evaluation order of the seven non-clean dimensions.
PERTURBED_DIMENSIONS = (
    Dimension.ROBOT,
    Dimension.LANGUAGE,
    Dimension.NOISE,
    Dimension.LAYOUT,
    Dimension.BACKGROUND,
    Dimension.CAMERA,
    Dimension.LIGHT,
)


@dataclass(frozen=True)
class PerturbationSpec:
    """One perturbation dimension at a magnitude in [0, 1]."""

    dimension: Dimension = Dimension.CLEAN
    magnitude: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError(f"magnitude must lie in [0, 1], got {self.magnitude}")


CLEAN = PerturbationSpec(Dimension.CLEAN)


@dataclass(frozen=True)
class EpisodeConfig:
    """Scene geometry, dynamics, and rendering constants for one episode."""

    image_side: int = 16
    max_steps: int = 60
    success_radius: float = 0.06
    action_cap: float = 0.08
    dynamics_noise_std: float = 0.005
    num_distractors: int = 2
    num_goal_ids: int = 8
    blob_sigma: float = 1.2

    def __post_init__(self):
        if self.image_side < 4:
            raise ValueError("image_side must be >= 4")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.success_radius <= 0:
            raise ValueError("success_radius must be > 0")
        if self.action_cap <= 0:
            raise ValueError("action_cap must be > 0")
        if self.dynamics_noise_std < 0:
            raise ValueError("dynamics_noise_std must be >= 0")
        if self.num_distractors < 0:
            raise ValueError("num_distractors must be >= 0")
        if self.num_goal_ids < 1:
            raise ValueError("num_goal_ids must be >= 1")
        if self.blob_sigma <= 0:
            raise ValueError("blob_sigma must be > 0")

    @property
    def image_dim(self) -> int:
        return self.image_side * self.image_side


@dataclass
class WorldState:
    """Scene behind an observation: positions, goal label, step counter.

    ``episode_seed`` is carried along so per-episode-fixed perturbation
    parameters (the Background grating) can be rederived at render time.
    """

    agent_pos: np.ndarray
    goal_pos: np.ndarray
    distractor_pos: list[np.ndarray]
    goal_id: int
    t: int = 0
    succeeded: bool = False
    episode_seed: int = 0


@dataclass
class Observation:
    """Flat image in [0,1]^(side*side) plus the encoded instruction."""

    image: np.ndarray
    instruction: np.ndarray


# Stream tags keep the per-purpose RNG substreams disjoint.
_TAG_RESET = 0
_TAG_BACKGROUND = 1


def reset(config: EpisodeConfig, spec: PerturbationSpec, seed: int) -> WorldState:
    """Sample a fresh episode state, deterministic in (config, spec, seed).

    Robot shifts the agent's spawn band by +magnitude*(0.25, 0.25); Layout
    shifts the goal/distractor band the opposite way, by
    -magnitude*(0.25, 0.25). Both are clipped back into the unit square, so
    magnitude 0 reproduces the Clean draw exactly.
    """
    rng = np.random.default_rng([seed, _TAG_RESET])
    agent = rng.uniform(0.1, 0.9, size=2)
    if spec.dimension is Dimension.ROBOT:
        agent = np.clip(agent + spec.magnitude * np.array([0.25, 0.25]), 0.0, 1.0)

    object_shift = np.zeros(2)
    if spec.dimension is Dimension.LAYOUT:
        object_shift = -spec.magnitude * np.array([0.25, 0.25])
    goal = np.clip(rng.uniform(0.15, 0.85, size=2) + object_shift, 0.0, 1.0)
    distractors = [
        np.clip(rng.uniform(0.15, 0.85, size=2) + object_shift, 0.0, 1.0)
        for _ in range(config.num_distractors)
    ]
    goal_id = int(rng.integers(config.num_goal_ids))
    return WorldState(
        agent_pos=agent,
        goal_pos=goal,
        distractor_pos=distractors,
        goal_id=goal_id,
        t=0,
        succeeded=False,
        episode_seed=int(seed),
    )


def _blob_image(state: WorldState, config: EpisodeConfig) -> np.ndarray:
    """Sum of Gaussian blobs on the pixel grid, clamped to [0, 1]."""
    side = config.image_side
    cols, rows = np.meshgrid(np.arange(side) + 0.5, np.arange(side) + 0.5)
    img = np.zeros((side, side))
    objects = [(state.agent_pos, 1.0), (state.goal_pos, 0.7)]
    objects += [(p, 0.4) for p in state.distractor_pos]
    two_sigma_sq = 2.0 * config.blob_sigma**2
    for pos, amp in objects:
        dx = cols - pos[0] * side
        dy = rows - pos[1] * side
        img += amp * np.exp(-(dx * dx + dy * dy) / two_sigma_sq)
    return np.clip(img, 0.0, 1.0)


def _background_grating(state: WorldState, config: EpisodeConfig) -> np.ndarray:
    """Unit-amplitude sinusoidal grating, fixed per episode by the seed."""
    rng = np.random.default_rng([state.episode_seed, _TAG_BACKGROUND])
    fx = int(rng.integers(1, 4))
    fy = int(rng.integers(1, 4))
    phase = rng.uniform(0.0, 2.0 * math.pi)
    side = config.image_side
    cols, rows = np.meshgrid(np.arange(side) + 0.5, np.arange(side) + 0.5)
    return np.sin(2.0 * math.pi * (fx * cols + fy * rows) / side + phase)


def render(
    state: WorldState,
    config: EpisodeConfig,
    spec: PerturbationSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """Render the scene to a flat image vector in [0, 1].

    ``rng`` is consumed only by the Noise dimension (one normal draw per
    pixel); every other dimension renders deterministically from the state.
    """
    img = _blob_image(state, config)
    m = spec.magnitude
    dim = spec.dimension
    if dim is Dimension.NOISE:
        img = img + rng.normal(0.0, 0.15 * m, size=img.shape)
    elif dim is Dimension.BACKGROUND:
        img = img + 0.2 * m * _background_grating(state, config)
    elif dim is Dimension.CAMERA:
        k = int(round(2.0 * m))
        if k > 0:
            shifted = np.zeros_like(img)
            shifted[k:, k:] = img[:-k, :-k]
            img = shifted
    elif dim is Dimension.LIGHT:
        img = img * (1.0 + 0.5 * m)
    return np.clip(img, 0.0, 1.0).reshape(-1)


def _sinkhorn(raw: np.ndarray, iterations: int = 500) -> np.ndarray:
    """Alternate row/column normalization until doubly stochastic."""
    m = raw.copy()
    for _ in range(iterations):
        m /= m.sum(axis=1, keepdims=True)
        m /= m.sum(axis=0, keepdims=True)
    return m


def _generate_mixing_matrix(dim: int, seed: int = 0) -> np.ndarray:
    """Doubly-stochastic mixing matrix from a fixed seed (asset provenance)."""
    rng = np.random.default_rng(seed)
    return _sinkhorn(rng.uniform(0.1, 1.0, size=(dim, dim)))


_MATRIX_CACHE: dict[int, np.ndarray] = {}


def mixing_matrix(dim: int) -> np.ndarray:
    """Instruction mixing matrix for the Language dimension.

    The default 8x8 matrix is loaded from the checked-in asset so the
    perturbation is stable across machines and library versions; other sizes
    are regenerated from the same fixed seed.
    """
    if dim not in _MATRIX_CACHE:
        if dim == 8:
            text = resources.files("foresight_ttt.assets").joinpath(
                "mixing_matrix.json"
            ).read_text()
            _MATRIX_CACHE[dim] = np.array(json.loads(text)["matrix"])
        else:
            _MATRIX_CACHE[dim] = _generate_mixing_matrix(dim)
    return _MATRIX_CACHE[dim]


def encode_instruction(
    goal_id: int, spec: PerturbationSpec, config: EpisodeConfig
) -> np.ndarray:
    """Encode the goal label; Language blends it through the mixing matrix."""
    if not 0 <= goal_id < config.num_goal_ids:
        raise ValueError(f"goal_id {goal_id} out of range [0, {config.num_goal_ids})")
    one_hot = np.zeros(config.num_goal_ids)
    one_hot[goal_id] = 1.0
    if spec.dimension is not Dimension.LANGUAGE or spec.magnitude == 0.0:
        return one_hot
    mixed = (1.0 - spec.magnitude) * one_hot + spec.magnitude * (
        mixing_matrix(config.num_goal_ids) @ one_hot
    )
    return mixed / np.linalg.norm(mixed)


def observe(
    state: WorldState,
    config: EpisodeConfig,
    spec: PerturbationSpec,
    rng: np.random.Generator,
    instruction: np.ndarray,
) -> Observation:
    """Bundle the rendered image with the episode's instruction vector."""
    return Observation(image=render(state, config, spec, rng), instruction=instruction)


def cap_norm(vec: np.ndarray, cap: float) -> np.ndarray:
    """Rescale ``vec`` so its L2 norm does not exceed ``cap``."""
    norm = float(np.linalg.norm(vec))
    if norm <= cap:
        return vec.astype(float)
    return vec * (cap / norm)


def step(
    state: WorldState,
    action: np.ndarray,
    config: EpisodeConfig,
    rng: np.random.Generator,
) -> tuple[WorldState, bool, bool]:
    """Advance one timestep; returns (next_state, done, success).

    The action is capped to ``action_cap`` in L2 norm, Gaussian dynamics
    noise is added, and the agent is clipped to the unit square. Stepping a
    finished episode is a caller bug and raises.
    """
    if state.succeeded:
        raise ValueError("cannot step an episode that already succeeded")
    if state.t >= config.max_steps:
        raise ValueError("cannot step an episode past max_steps")
    move = cap_norm(np.asarray(action, dtype=float), config.action_cap)
    noise = rng.normal(0.0, config.dynamics_noise_std, size=2)
    new_pos = np.clip(state.agent_pos + move + noise, 0.0, 1.0)
    t_next = state.t + 1
    success = bool(np.linalg.norm(new_pos - state.goal_pos) < config.success_radius)
    done = success or t_next == config.max_steps
    next_state = replace(
        state, agent_pos=new_pos, t=t_next, succeeded=state.succeeded or success
    )
    return next_state, done, success


def expert_action(state: WorldState, config: EpisodeConfig) -> np.ndarray:
    """Straight-line move toward the goal, capped to the per-step budget."""
    return cap_norm(state.goal_pos - state.agent_pos, config.action_cap)
