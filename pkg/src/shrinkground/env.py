"""The shrinking MDP: state assembly, transitions, rewards and reasoning traces."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .geometry import Box, iou, shrink, shrink_fixed, spatial_feature
from .query import Triad
from .scene import UKN, PatchEncoder, Scene


class Action(IntEnum):
    SHRINK_TOP = 0
    SHRINK_BOTTOM = 1
    SHRINK_LEFT = 2
    SHRINK_RIGHT = 3
    STOP = 4

    @property
    def direction(self) -> str | None:
        return (None if self is Action.STOP
                else ("top", "bottom", "left", "right")[int(self)])


N_ACTIONS = len(Action)


class TerminalStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    alpha: float = 0.2
    t_max: int = 20
    min_side_fraction: float = 0.02
    terminal_bonus: bool = False
    regress_penalty: bool = False
    fixed_stride: bool = False
    multiscale: bool = True
    spatial: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.t_max < 1:
            raise ValueError("t_max must be positive")


@dataclass
class AgentState:
    sub_states: np.ndarray  # (scales, M*3*D_w + D_v + 5)
    patch: Box
    step_index: int = 0
    done: bool = False


@dataclass
class StepOutcome:
    next_state: AgentState
    reward: float
    done: bool
    iou_after: float
    delta_iou: float


def shrink_reward(iou_after: float, delta_iou: float) -> float:
    """Three-level reward on the post-action overlap and its change."""
    if iou_after < 0.3 or delta_iou <= 0.0:
        return 0.0
    if iou_after < 0.5:
        return 1.0
    return 10.0


def regress_reward(iou_before: float, iou_after: float) -> float:
    """Mirror of :func:`shrink_reward` for a step that lowers IoU: minus what undoing it would earn."""
    if iou_after >= iou_before:
        return 0.0
    return -shrink_reward(iou_before, iou_before - iou_after)


def assemble_state(linguistic: np.ndarray, visual: Sequence[np.ndarray],
                   spatial: np.ndarray) -> np.ndarray:
    """Stack one sub-state per scale, each ``linguistic + visual[c] + spatial``."""
    return np.stack([np.concatenate([linguistic, v, spatial]) for v in visual])


@dataclass
class EpisodeTrace:
    query: str
    scene_seed: int
    triads: list[Triad]
    gt_box: list[float]
    steps: list[dict] = field(default_factory=list)
    final_box: list[float] | None = None

    @property
    def flags(self) -> list[bool]:
        return list(self.steps[-1]["triad_active"]) if self.steps else [True] * len(self.triads)

    def to_json(self) -> dict:
        return {"query": self.query, "scene_seed": self.scene_seed,
                "triads": [list(t) for t in self.triads], "gt_box": self.gt_box,
                "steps": self.steps, "final_box": self.final_box}

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeTrace":
        return cls(d["query"], d["scene_seed"], [tuple(t) for t in d["triads"]], d["gt_box"],
                   d["steps"], d["final_box"])


def triad_support(scene: Scene, patch: Box, triad: Triad, target_id: int) -> bool:
    """Whether some non-target object of the triad's reference kind still overlaps ``patch``."""
    ref = triad[1]
    for o in scene.objects:
        if o.id == target_id or (ref != UKN and o.category != ref):
            continue
        if o.box.intersection_area(patch) > 0.0:
            return True
    return False


def update_trace(trace: EpisodeTrace, scene: Scene, new_patch: Box, triads: Sequence[Triad],
                 target_id: int, action: Action | None = None, reward: float = 0.0) -> EpisodeTrace:
    """Append a step; a triad goes inactive once its support leaves the patch and stays so."""
    prev = trace.flags
    flags = [p and triad_support(scene, new_patch, t, target_id) for p, t in zip(prev, triads)]
    trace.steps.append({"patch": new_patch.to_list(),
                        "action": None if action is None else action.name,
                        "reward": reward, "triad_active": flags})
    trace.final_box = new_patch.to_list()
    return trace


class ShrinkEnv:
    """One episode at a time over a fixed scene and target.

    Direction actions shrink the patch; a shrink that would push an axis below
    ``min_side_fraction`` of the frame is refused and ends the episode, as does
    reaching ``t_max`` steps or choosing Stop.
    """

    def __init__(self, encoder: PatchEncoder, cfg: EnvConfig = EnvConfig()):
        self.encoder = encoder
        self.cfg = cfg
        self.scene: Scene | None = None
        self.state: AgentState | None = None

    def _sub_states(self, patch: Box) -> np.ndarray:
        scene = self.scene
        scales = (1, 2, 3) if self.cfg.multiscale else (1,)
        visual = [self.encoder.encode(scene, patch, c) for c in scales]
        spatial = spatial_feature(patch, scene.frame)
        if not self.cfg.spatial:
            spatial = np.zeros_like(spatial)
        return assemble_state(self.linguistic, visual, spatial)

    def reset(self, scene: Scene, gt_box: Box, linguistic: np.ndarray) -> AgentState:
        self.scene = scene
        self.gt_box = gt_box
        self.linguistic = np.asarray(linguistic, dtype=np.float64)
        patch = scene.frame.box
        self.iou_now = iou(patch, gt_box)
        self.state = AgentState(self._sub_states(patch), patch, 0, False)
        return self.state

    def propose(self, patch: Box, action: Action) -> Box | None:
        """Patch after a direction action, or None when the min-side guard refuses it."""
        frame = self.scene.frame
        d = action.direction
        if self.cfg.fixed_stride:
            stride = self.cfg.alpha * (frame.H if d in ("top", "bottom") else frame.W)
            extent = patch.h if d in ("top", "bottom") else patch.w
            new_extent = extent - stride
        else:
            new = shrink(patch, d, self.cfg.alpha)
            new_extent = new.h if d in ("top", "bottom") else new.w
        limit = self.cfg.min_side_fraction * (frame.H if d in ("top", "bottom") else frame.W)
        if new_extent < limit:
            return None
        return shrink_fixed(patch, d, stride) if self.cfg.fixed_stride else new

    def step(self, action: Action | int) -> StepOutcome:
        state = self.state
        if state is None or state.done:
            raise TerminalStateError("cannot step a terminal or unset state")
        action = Action(action)
        done = False
        patch = state.patch
        if action is Action.STOP:
            done = True
        else:
            new = self.propose(patch, action)
            if new is None:
                done = True
            else:
                patch = new
        step_index = state.step_index + 1
        if step_index >= self.cfg.t_max:
            done = True
        iou_after = iou(patch, self.gt_box)
        delta = iou_after - self.iou_now
        reward = shrink_reward(iou_after, delta)
        if self.cfg.regress_penalty and delta < 0.0:
            reward = regress_reward(self.iou_now, iou_after)
        if action is Action.STOP and self.cfg.terminal_bonus:
            reward = 10.0 if iou_after >= 0.5 else 0.0
        sub = state.sub_states if patch is state.patch else self._sub_states(patch)
        self.state = AgentState(sub, patch, step_index, done)
        self.iou_now = iou_after
        return StepOutcome(self.state, reward, done, iou_after, delta)


def oracle_action(env: ShrinkEnv) -> Action:
    """Greedy direction maximizing next-step IoU; Stop when nothing improves."""
    best, best_iou = Action.STOP, env.iou_now
    for a in list(Action)[:4]:
        new = env.propose(env.state.patch, a)
        if new is None:
            continue
        v = iou(new, env.gt_box)
        if v > best_iou:
            best, best_iou = a, v
    return best
