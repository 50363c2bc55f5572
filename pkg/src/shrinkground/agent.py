"""Actor-critic agent over per-scale sub-states, the supervised baseline and the box refiner.

The actor is one network applied to every scale's sub-state; the action
distribution is the arithmetic mean of the per-scale softmaxes. The critic
likewise averages its per-scale values unless ``critic_input == "concat"``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .env import N_ACTIONS, Action, AgentState, ShrinkEnv
from .geometry import Box, ImageFrame, clamp_to_frame, iou, spatial_feature
from .nets import Adam, Mlp, softmax
from .scene import PatchEncoder, Scene

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class ActorCritic:
    actor: Mlp
    critic: Mlp
    gamma: float = 0.9
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    optimizer: str = "adam"
    entropy_coef: float = 0.0
    critic_input: str = "mean"
    actor_opt: Adam = field(init=False)
    critic_opt: Adam = field(init=False)
    critic_version: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.actor.sizes[-1] != N_ACTIONS or self.critic.sizes[-1] != 1:
            raise ValueError("actor needs 5 outputs and critic 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.critic_input not in ("mean", "concat"):
            raise ValueError(f"unknown critic input mode {self.critic_input!r}")
        self.actor_opt = Adam(self.lr_actor)
        self.critic_opt = Adam(self.lr_critic)

    @classmethod
    def build(cls, state_dim: int, scales: int = 3, hidden: tuple[int, ...] = (128, 64),
              seed: int = 0, critic_input: str = "mean", activation: str = "tanh",
              **kw) -> "ActorCritic":
        actor = Mlp([state_dim, *hidden, N_ACTIONS], activation, "logits", seed=seed)
        critic_in = state_dim * scales if critic_input == "concat" else state_dim
        critic = Mlp([critic_in, *hidden, 1], activation, "scalar", seed=seed + 1)
        return cls(actor, critic, critic_input=critic_input, **kw)

    def _apply(self, net: Mlp, opt: Adam, ascent: np.ndarray, lr: float) -> None:
        if self.optimizer == "sgd":
            if not np.all(np.isfinite(ascent)):
                opt.step(net.params, ascent, net)  # raises with the parameter path
            net.params += lr * ascent
        else:
            opt.step(net.params, ascent, net, ascend=True)

    # -- policy -----------------------------------------------------------

    def policy(self, sub_states: np.ndarray) -> np.ndarray:
        """Scale-averaged action probabilities."""
        return softmax(self.actor.forward(sub_states)).mean(axis=0)

    def _policy_grad(self, sub_states: np.ndarray, action, weight, entropy_coef: float,
                     forward=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gradient of ``sum_i weight_i * log pbar_i[action_i]`` plus the entropy bonus.

        ``sub_states`` is ``(k, d)`` for one state or ``(n, k, d)`` for a batch;
        returns the log-probabilities, the flat gradient and the averaged policies.
        """
        S = np.asarray(sub_states)
        batch = S.reshape(-1, S.shape[-2], S.shape[-1])
        n, k = batch.shape[:2]
        z, cache = forward if forward is not None else self.actor.forward_cached(batch.reshape(n * k, -1))
        P = softmax(z).reshape(n, k, N_ACTIONS)
        pbar = P.mean(axis=1)
        acts = np.broadcast_to(np.asarray(action, dtype=int), (n,))
        rows = np.arange(n)
        pa = pbar[rows, acts]
        if np.any(pa <= 0.0):
            raise ValueError("action has zero probability")
        # d log pbar_a / d z_c = P[c,a] (e_a - P[c]) / (k pbar_a)
        Pa = P[rows, :, acts]  # (n, k)
        up = -P * Pa[:, :, None]
        up[rows, :, acts] += Pa
        up *= (np.broadcast_to(np.asarray(weight, dtype=float), (n,)) / (k * pa))[:, None, None]
        if entropy_coef:
            g = -(np.log(np.maximum(pbar, 1e-300)) + 1.0)  # (n, 5)
            up += entropy_coef * P * (g[:, None, :] - np.einsum("nka,na->nk", P, g)[:, :, None]) / k
        grad, _ = self.actor.backward(cache, up.reshape(n * k, N_ACTIONS))
        return np.log(pa), grad, pbar

    def log_pi_grad(self, sub_states: np.ndarray, action: int) -> tuple[float, np.ndarray]:
        """``log pbar[action]`` of the scale-averaged policy and its parameter gradient."""
        logp, grad, _ = self._policy_grad(sub_states, action, 1.0, 0.0)
        return float(logp[0]), grad

    def actor_update(self, sub_states: np.ndarray, action, delta, forward=None) -> np.ndarray | float:
        """Policy-gradient step along ``delta * grad log pi``; returns the pre-update log-prob.

        With a batch of states the step follows the mean of the per-state terms.
        ``forward`` may carry the actor's ``forward_cached`` result for the
        flattened sub-states computed with the current parameters.
        """
        S = np.asarray(sub_states)
        n = 1 if S.ndim == 2 else S.shape[0]
        weight = np.asarray(delta, dtype=float) / n
        logp, ascent, _ = self._policy_grad(S, action, weight, self.entropy_coef / n, forward)
        self._apply(self.actor, self.actor_opt, ascent, self.lr_actor)
        return float(logp[0]) if S.ndim == 2 else logp

    # -- value ------------------------------------------------------------

    def _critic_rows(self, sub_states: np.ndarray) -> np.ndarray:
        if self.critic_input == "concat":
            return sub_states.reshape(1, -1)
        return sub_states

    def value(self, sub_states: np.ndarray) -> float:
        return float(self.critic.forward(self._critic_rows(sub_states)).mean())

    def value_grad(self, sub_states: np.ndarray) -> tuple[float, np.ndarray]:
        rows = self._critic_rows(sub_states)
        v, cache = self.critic.forward_cached(rows)
        grad, _ = self.critic.backward(cache, np.full(rows.shape[0], 1.0 / rows.shape[0]))
        return float(v.mean()), grad

    def batch_values(self, S: np.ndarray, S_next: np.ndarray | None = None):
        """Values of a batch ``(n, k, d)`` of states and of their successors.

        Returns ``(v_now, v_next, grad_fn)``; ``grad_fn(w)`` gives the gradient of
        ``sum_i w_i V(s_i)`` at the weights used for the values.
        """
        n = S.shape[0]
        now = S.reshape(n, -1) if self.critic_input == "concat" else S.reshape(-1, S.shape[-1])
        r = now.shape[0] // n
        rows = now
        if S_next is not None and len(S_next):
            nxt = (S_next.reshape(len(S_next), -1) if self.critic_input == "concat"
                   else S_next.reshape(-1, S_next.shape[-1]))
            rows = np.concatenate([now, nxt])
        v, cache = self.critic.forward_cached(rows)
        v_now = v[:n * r].reshape(n, r).mean(axis=1)
        v_next = v[n * r:].reshape(-1, r).mean(axis=1)

        def grad_fn(w: np.ndarray) -> np.ndarray:
            up = np.zeros(rows.shape[0])
            up[:n * r] = np.repeat(np.asarray(w, dtype=float) / r, r)
            return self.critic.backward(cache, up)[0]
        return v_now, v_next, grad_fn

    def critic_update(self, sub_states: np.ndarray, delta: float) -> None:
        """Semi-gradient TD step: ``w += lr * delta * grad V(s)``."""
        _, grad = self.value_grad(sub_states)
        self.critic_ascend(delta * grad)

    def critic_ascend(self, direction: np.ndarray) -> None:
        """Critic step along a precomputed ascent direction (e.g. ``delta * grad V``)."""
        self._apply(self.critic, self.critic_opt, direction, self.lr_critic)
        self.critic_version += 1

    def clone(self) -> "ActorCritic":
        ac = ActorCritic(self.actor.clone(), self.critic.clone(), self.gamma, self.lr_actor,
                         self.lr_critic, self.optimizer, self.entropy_coef, self.critic_input)
        ac.actor_opt = self.actor_opt.copy()
        ac.critic_opt = self.critic_opt.copy()
        return ac


def select_action(policy_net: Mlp, state: AgentState, mode: str = "infer",
                  rng: np.random.Generator | None = None) -> tuple[Action, np.ndarray]:
    """Average the per-scale softmaxes; sample in ``train`` mode, argmax in ``infer`` mode."""
    pbar = softmax(policy_net.forward(state.sub_states)).mean(axis=0)
    if mode == "infer":
        return Action(int(np.argmax(pbar))), pbar
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    return Action(_sample(pbar, rng)), pbar


def _sample(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(p) - 1)


def td_advantage(r: float, v_next: float, v_now: float, gamma: float, terminal: bool) -> float:
    """One-step TD error; the bootstrap term is dropped at terminal transitions."""
    return r + (0.0 if terminal else gamma * v_next) - v_now


# ---------------------------------------------------------------------------
# training loops

Episode = tuple[Scene, Box, np.ndarray]  # scene, ground-truth box, linguistic feature


@dataclass
class Schedule:
    episodes: int
    seed: int = 0
    log_every: int = 1000
    value_bound: float = 1e4
    batch: int = 1  # episodes run in lockstep; each step's updates average over them


def train_rl(ac: ActorCritic, env: ShrinkEnv, episodes: Callable[[int], Episode],
             schedule: Schedule, on_log: Callable[[dict], None] | None = None) -> list[dict]:
    """Online actor-critic: one actor then one critic update after every step.

    ``schedule.batch`` episodes advance in lockstep and each step's updates
    use the mean over the still-running episodes; ``batch=1`` is the plain
    single-episode algorithm. Both updates use TD errors computed with the
    critic weights from before this step's critic update. Returns the metrics log.
    """
    rng = np.random.default_rng(schedule.seed)
    B = max(1, schedule.batch)
    envs = [env] + [ShrinkEnv(env.encoder, env.cfg) for _ in range(B - 1)]
    metrics: list[dict] = []
    window_r, window_iou = [], []
    for start in range(0, schedule.episodes, B):
        n = min(B, schedule.episodes - start)
        states = []
        for j in range(n):
            scene, gt, ling = episodes(start + j)
            states.append(envs[j].reset(scene, gt, ling))
        returns = np.zeros(n)
        live = [j for j in range(n) if not states[j].done]
        while live:
            S = np.stack([states[j].sub_states for j in live])
            m, k = S.shape[:2]
            fwd = ac.actor.forward_cached(S.reshape(m * k, -1))
            pbar = softmax(fwd[0]).reshape(m, k, N_ACTIONS).mean(axis=1)
            acts = np.array([_sample(p, rng) for p in pbar])
            outs = [envs[j].step(int(a)) for j, a in zip(live, acts)]
            rewards = np.array([o.reward for o in outs])
            done = np.array([o.done for o in outs])
            cont = [o.next_state.sub_states for o in outs if not o.done]
            version = ac.critic_version
            v_now, v_cont, grad_fn = ac.batch_values(S, np.stack(cont) if cont else None)
            v_next = np.zeros(m)
            v_next[~done] = v_cont
            if np.abs(v_now).max() > schedule.value_bound or np.abs(v_next).max() > schedule.value_bound:
                raise DivergenceError(f"value magnitude exceeded {schedule.value_bound} "
                                      f"in episodes {start}..{start + n - 1}")
            delta = rewards + np.where(done, 0.0, ac.gamma * v_next) - v_now
            ac.actor_update(S, acts, delta, fwd)
            assert ac.critic_version == version, "critic changed before its own update"
            ac.critic_ascend(grad_fn(delta / m))
            for j, o in zip(live, outs):
                returns[j] += o.reward
                states[j] = o.next_state
            live = [j for j in live if not states[j].done]
        window_r.extend(returns)
        window_iou.extend(envs[j].iou_now for j in range(n))
        end = start + n
        if end // schedule.log_every > start // schedule.log_every or end == schedule.episodes:
            ious = np.array(window_iou)
            rec = {"episode": end, "mean_reward": float(np.mean(window_r)),
                   "acc@0.5": float(np.mean(ious > 0.5)), "mean_iou": float(ious.mean())}
            if on_log is not None:
                extra = on_log(rec)
                if extra:
                    rec.update(extra)
            metrics.append(rec)
            log.info("episode %d reward %.3f acc %.3f iou %.3f", rec["episode"],
                     rec["mean_reward"], rec["acc@0.5"], rec["mean_iou"])
            window_r, window_iou = [], []
    return metrics


@dataclass
class SupervisedConfig:
    samples_per_episode: int = 10
    threshold: float = 0.05  # fraction of the frame extent on the same axis
    stop_fraction: float = 0.1  # share of samples drawn with all margins under the threshold
    seed: int = 0


def supervised_label(region: Box, gt: Box, frame: ImageFrame, threshold: float = 0.05) -> Action:
    """Side with the largest spatial difference from the target, or Stop under the threshold.

    Ties go to the lowest action index.
    """
    diffs = np.array([gt.y_tl - region.y_tl, region.y_br - gt.y_br,
                      gt.x_tl - region.x_tl, region.x_br - gt.x_br])
    limits = threshold * np.array([frame.H, frame.H, frame.W, frame.W])
    best = int(np.argmax(diffs))
    if diffs[best] > limits[best]:
        return Action(best)
    return Action.STOP


def sample_covering_region(gt: Box, frame: ImageFrame, rng: np.random.Generator,
                           tight: float | None = None) -> Box:
    """Random region containing ``gt``; with ``tight`` every margin stays below that size."""
    room = np.array([gt.y_tl, frame.H - gt.y_br, gt.x_tl, frame.W - gt.x_br])
    if tight is not None:
        room = np.minimum(room, tight)
    m = rng.uniform(0.0, 1.0, size=4) ** 2 * room  # bias toward tighter regions
    return Box(gt.x_tl - m[2], gt.y_tl - m[0], gt.x_br + m[3], gt.y_br + m[1])


def train_supervised(ac: ActorCritic, env: ShrinkEnv, episodes: Callable[[int], Episode],
                     n_episodes: int, cfg: SupervisedConfig = SupervisedConfig(),
                     on_log: Callable[[dict], None] | None = None, log_every: int = 1000) -> list[dict]:
    """Cross-entropy on the scale-averaged policy against max-difference side labels."""
    rng = np.random.default_rng(cfg.seed)
    metrics, losses = [], []
    for ep in range(n_episodes):
        scene, gt, ling = episodes(ep)
        env.reset(scene, gt, ling)
        frame = scene.frame
        for _ in range(cfg.samples_per_episode):
            tight = None
            if rng.random() < cfg.stop_fraction:
                tight = cfg.threshold * min(frame.W, frame.H)
            region = sample_covering_region(gt, frame, rng, tight)
            label = supervised_label(region, gt, frame, cfg.threshold)
            S = env._sub_states(region)
            logp = ac.actor_update(S, int(label), 1.0)
            losses.append(-logp)
        if (ep + 1) % log_every == 0 or ep + 1 == n_episodes:
            rec = {"episode": ep + 1, "cross_entropy": float(np.mean(losses))}
            if on_log is not None:
                rec.update(on_log(rec) or {})
            metrics.append(rec)
            losses = []
    return metrics


# ---------------------------------------------------------------------------
# box refinement

@dataclass
class Refiner:
    """Regresses coordinate offsets from a box's spatial feature and scale-1 encoding."""

    net: Mlp
    encoder: PatchEncoder
    sigma: float = 5.0

    @classmethod
    def build(cls, encoder: PatchEncoder, hidden: tuple[int, ...] = (128, 64), seed: int = 0,
              sigma: float = 5.0) -> "Refiner":
        net = Mlp([5 + encoder.cfg.visual_dim, *hidden, 4], "tanh", "linear", seed=seed)
        # zero output layer: an untrained refiner is the identity
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = 0.0
        return cls(net, encoder, sigma)

    def features(self, scene: Scene, box: Box) -> np.ndarray:
        return np.concatenate([spatial_feature(box, scene.frame), self.encoder.encode(scene, box, 1)])

    def offsets(self, scene: Scene, box: Box) -> np.ndarray:
        f = self.net.forward(self.features(scene, box))
        return f * np.array([scene.frame.W, scene.frame.H, scene.frame.W, scene.frame.H])

    def refine(self, scene: Scene, box: Box) -> tuple[Box, bool]:
        """Refined box and whether it was usable; degenerate outputs return ``box`` unchanged."""
        raw = np.array(box.to_list()) + self.offsets(scene, box)
        c = clamp_to_frame(raw, scene.frame)
        if not (c[0] < c[2] and c[1] < c[3]) or not all(map(math.isfinite, c)):
            return box, False
        return Box(*c), True


def noisy_box(gt: Box, frame: ImageFrame, sigma: float, rng: np.random.Generator) -> Box:
    """``gt`` plus per-coordinate Gaussian noise, clamped to the frame; redrawn if inverted."""
    for _ in range(100):
        c = clamp_to_frame(np.array(gt.to_list()) + rng.normal(0.0, sigma, 4), frame)
        if c[2] - c[0] > 1e-6 and c[3] - c[1] > 1e-6:
            return Box(*c)
    return gt


def refiner_pairs(scenes: Iterator[Scene], sigma: float, rng: np.random.Generator,
                  per_scene: int = 4) -> Iterator[tuple[Scene, Box, Box]]:
    for scene in scenes:
        for _ in range(per_scene):
            obj = scene.objects[int(rng.integers(len(scene.objects)))]
            yield scene, noisy_box(obj.box, scene.frame, sigma, rng), obj.box


def train_refiner(refiner: Refiner, scenes: list[Scene], steps: int = 4000, batch: int = 32,
                  lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Minibatch Adam on the squared error between predicted and true normalized offsets."""
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    feats, targets = [], []
    for scene, noisy, gt in refiner_pairs(iter(scenes), refiner.sigma, rng):
        feats.append(refiner.features(scene, noisy))
        scale = np.array([scene.frame.W, scene.frame.H, scene.frame.W, scene.frame.H])
        targets.append((np.array(gt.to_list()) - np.array(noisy.to_list())) / scale)
    X, Y = np.array(feats), np.array(targets)
    losses = []
    for _ in range(steps):
        idx = rng.integers(len(X), size=batch)
        out, cache = refiner.net.forward_cached(X[idx])
        err = out - Y[idx]
        losses.append(float((err ** 2).sum(axis=1).mean()))
        grad, _ = refiner.net.backward(cache, 2.0 * err / batch)
        opt.step(refiner.net.params, grad, refiner.net)
    return losses
