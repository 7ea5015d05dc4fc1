"""
Visual model-predictive control.

A cross-entropy method planner searches action sequences whose predicted frames match
goal frames, pusher pixels excluded. The MPC loop executes the first planned action in
the simulator, observes the new frame and replans. Tasks are re-positioning (reach a
goal pose) and trajectory tracking (follow a reference pose sequence).
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple

import numpy as np
import pandas as pd

from .pushworld import (
    A_MAX,
    ObjectSpec,
    WorldState,
    pusher_masks,
    pusher_path,
    render,
    render_states,
    save_frame_png,
    scripted_push,
    simulate,
    step,
)
from .utils import atomic_write, parallel_map, timing

logger = logging.getLogger("evf.planner")
logger.addHandler(logging.NullHandler())

TASKS = ("reposition", "track")
METHODS = ("evf", "no-context", "no-motion", "simulator")
SPLIT_LABELS = {"train": "Seen", "test": "Unseen"}
# pose errors are reported in world units x 1000
POSE_SCALE = 1000.0
EPISODE_COLUMNS = ["step", "action_x", "action_y", "cost", "pose_error"]
KEY_COLUMNS = ["method", "kind", "split", "object_id", "episode", "initial_error"]


class PlanningError(RuntimeError):
    pass


@dataclass
class PlanConfig:
    horizon: int = 5
    candidates: int = 200
    elites: int = 10
    cem_iters: int = 3
    a_max: float = A_MAX
    replan_every: int = 1
    samples_per_candidate: int = 1
    init_std: float = None

    def __post_init__(self):
        for name in ("horizon", "candidates", "elites", "cem_iters", "replan_every",
                     "samples_per_candidate"):
            if getattr(self, name) < 1:
                raise ValueError("%s must be >= 1, got %r" % (name, getattr(self, name)))
        if self.elites > self.candidates:
            raise ValueError("elites (%d) > candidates (%d)" % (self.elites, self.candidates))
        if self.replan_every > self.horizon:
            raise ValueError("replan_every (%d) > horizon (%d)" % (self.replan_every, self.horizon))
        if not 0 < self.a_max <= A_MAX:
            raise ValueError("a_max must be in (0, %g], got %r" % (A_MAX, self.a_max))
        if self.init_std is None:
            self.init_std = self.a_max / 2

    @classmethod
    def from_settings(cls, settings):
        """build from flat settings (`plan.*` keys)"""
        names = set(cls.__dataclass_fields__)
        values = {k[len("plan."):]: v for k, v in settings.items() if k.startswith("plan.")}
        return cls(**{k: v for k, v in values.items() if k in names})


def cost_masked_l2(pred, goal, mask):
    """
    Mean squared difference over unmasked pixels.

    Parameters
    ----------
    pred, goal: numpy.ndarray
        frames (..., H, W), broadcastable.
    mask: numpy.ndarray
        boolean (..., H, W), True on excluded (pusher) pixels.

    Returns
    -------
    float or numpy.ndarray
        one cost per frame.

    Raises
    ------
    PlanningError
        if every pixel of a frame is masked.
    """
    pred = np.asarray(pred, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if pred.shape[-2:] != goal.shape[-2:]:
        raise ValueError("frames of shapes %s and %s" % (pred.shape, goal.shape))
    keep = ~np.asarray(mask, dtype=bool)
    count = keep.sum(axis=(-2, -1))
    if np.any(count == 0):
        raise PlanningError("every pixel is masked")
    squared = np.where(keep, np.square(pred - goal), 0.0)
    cost = squared.sum(axis=(-2, -1)) / count
    return float(cost) if np.ndim(cost) == 0 else cost


class Dynamics(ABC):
    """Predicts the frames and pusher masks of candidate action sequences."""

    @abstractmethod
    def rollout(self, actions, rng):
        """
        Parameters
        ----------
        actions: numpy.ndarray
            (n, H, 2) candidate sequences.
        rng: numpy.random.Generator
            source of the predictive noise, shared by all candidates.

        Returns
        -------
        tuple(numpy.ndarray, numpy.ndarray)
            frames (n, S, H, h, w) for S samples per candidate and pusher masks
            (n, H, h, w).
        """


class LearnedDynamics(Dynamics):
    """
    The video model, conditioned on the recent observations.

    Parameters
    ----------
    model: evf.model.VisualForesight
    c: numpy.ndarray
        context, (context_dim,).
    frames: numpy.ndarray
        last `context_frames` observed frames (C, h, w), the current one last.
    past_actions: numpy.ndarray
        the C - 1 actions between those frames.
    pusher: numpy.ndarray
        current pusher position, for the candidate pusher masks.
    samples: int
        rollouts per candidate, costs are averaged over them.
    """

    def __init__(self, model, c, frames, past_actions, pusher, samples=1):
        self.model = model
        self.c = np.asarray(c, dtype=np.float32)
        self.frames = np.asarray(frames, dtype=np.float32)
        self.past_actions = np.asarray(past_actions, dtype=np.float32).reshape(-1, 2)
        self.pusher = np.asarray(pusher, dtype=float)
        self.samples = samples

    def rollout(self, actions, rng):
        n, H = actions.shape[:2]
        S = self.samples
        C = len(self.frames)
        shape = self.frames.shape[1:]
        steps = C - 1 + H
        noise = rng.standard_normal((S, steps, self.model.config.latent_dim))
        context = np.broadcast_to(self.frames, (n * S,) + self.frames.shape)
        past = np.broadcast_to(self.past_actions, (n * S,) + self.past_actions.shape)
        full = np.concatenate([past, np.repeat(actions, S, axis=0)], axis=1)
        predicted = self.model.predict(context, full, self.c, H, noise=np.tile(noise, (n, 1, 1)))
        frames = predicted.reshape((n, S, H) + shape)
        return frames, pusher_masks(pusher_path(self.pusher, actions), shape)


class SimulatorDynamics(Dynamics):
    """The ground-truth simulator from `state`; a single deterministic sample."""

    def __init__(self, spec, state):
        self.spec = spec
        self.state = state

    def rollout(self, actions, rng):
        frames, masks = [], []
        for sequence in actions:
            intensity, mask = render_states(simulate(self.state, self.spec, sequence)[1:],
                                            self.spec)
            frames.append(intensity)
            masks.append(mask)
        return np.stack(frames)[:, None], np.stack(masks)


class PlanResult(NamedTuple):
    actions: np.ndarray
    cost: float
    iteration_costs: List[float]
    mean: np.ndarray
    std: np.ndarray


def cem_plan(dynamics, goals, goal_masks, cfg, rng, terminal_weight=0.0):
    """
    Cross-entropy method over action sequences of `cfg.horizon` steps.

    Each iteration samples `cfg.candidates` sequences from a diagonal Gaussian (clipped
    to `[-a_max, a_max]`), scores them against the per-step `goals` and refits the
    Gaussian to the `cfg.elites` best. From the second iteration on, the previous mean
    and the best sequence so far replace the first two samples, and all rollouts of one
    plan share their predictive noise, so the best cost never increases across
    iterations.

    Parameters
    ----------
    dynamics: Dynamics
    goals: numpy.ndarray
        (H, h, w) goal frame of each step.
    goal_masks: numpy.ndarray
        (H, h, w) pusher pixels of the goals.
    cfg: PlanConfig
    rng: numpy.random.Generator
    terminal_weight: float
        extra weight of the last step's cost.

    Returns
    -------
    PlanResult
        the final mean, unless a scored candidate has a lower cost. `iteration_costs`
        holds the best candidate cost of each iteration.

    Raises
    ------
    PlanningError
        if every candidate of an iteration has a non-finite cost.
    """
    H = cfg.horizon
    goals = np.asarray(goals)
    goal_masks = np.asarray(goal_masks, dtype=bool)
    if goals.shape[0] != H or goal_masks.shape != goals.shape:
        raise ValueError("goals of shape %s for a horizon of %d" % (goals.shape, H))
    noise_seed = int(rng.integers(2**63))
    weights = np.ones(H)
    weights[-1] += terminal_weight

    def score(samples):
        frames, masks = dynamics.rollout(samples, np.random.default_rng(noise_seed))
        excluded = masks[:, None] | goal_masks[None, None]
        with np.errstate(invalid="ignore", over="ignore"):
            costs = cost_masked_l2(frames, goals[None, None], excluded)
            return costs.mean(axis=1) @ weights

    mean = np.zeros((H, 2))
    std = np.full((H, 2), cfg.init_std)
    best, best_cost = None, np.inf
    iteration_costs = []
    for it in range(cfg.cem_iters):
        samples = np.clip(mean + std * rng.standard_normal((cfg.candidates, H, 2)),
                          -cfg.a_max, cfg.a_max)
        if it > 0:
            samples[0] = mean
            if cfg.candidates > 1:
                samples[1] = best
        costs = score(samples)
        finite = np.isfinite(costs)
        if not finite.any():
            raise PlanningError("all %d candidates have non-finite costs" % cfg.candidates)
        if not finite.all():
            logger.debug("discarding %d candidates with non-finite cost", (~finite).sum())
        ranked = np.argsort(np.where(finite, costs, np.inf), kind="stable")
        elites = samples[ranked[: min(cfg.elites, int(finite.sum()))]]
        mean, std = elites.mean(axis=0), elites.std(axis=0)
        iteration_costs.append(float(costs[ranked[0]]))
        if costs[ranked[0]] < best_cost:
            best, best_cost = samples[ranked[0]].copy(), float(costs[ranked[0]])

    final_cost = float(score(mean[None])[0])
    if np.isfinite(final_cost) and final_cost <= best_cost:
        return PlanResult(mean, final_cost, iteration_costs, mean, std)
    return PlanResult(best, best_cost, iteration_costs, mean, std)


@dataclass
class TaskSpec:
    """
    A control task on one object.

    `goal_states` holds one pose for re-positioning and one pose per control step for
    tracking; `goal_frames` and `goal_masks` are their renderings.
    """

    kind: str
    object_id: int
    spec: ObjectSpec
    initial: WorldState
    goal_states: list
    episode_length: int
    split: str = "test"
    goal_frames: np.ndarray = field(default=None, repr=False)
    goal_masks: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError("unknown task %r, expected one of %s" % (self.kind, TASKS))
        if self.episode_length < 0:
            raise ValueError("negative episode length")
        expected = 1 if self.kind == "reposition" else self.episode_length
        if len(self.goal_states) != expected:
            raise ValueError("%s task of %d steps with %d goal states" % (
                self.kind, self.episode_length, len(self.goal_states)))
        if self.goal_frames is None and self.goal_states:
            self.goal_frames, self.goal_masks = render_states(self.goal_states, self.spec)

    def goal_index(self, t):
        """goal of control step `t` (0-based, the step producing frame t + 1)"""
        return 0 if self.kind == "reposition" else min(t, self.episode_length - 1)

    def horizon_goals(self, t, H):
        index = [self.goal_index(t + h) for h in range(H)]
        return self.goal_frames[index], self.goal_masks[index]

    def pose_error(self, state, t):
        goal = self.goal_states[self.goal_index(t)]
        return float(np.hypot(state.x - goal.x, state.y - goal.y) * POSE_SCALE)

    @property
    def initial_error(self):
        if not self.goal_states:
            return 0.0
        return self.pose_error(self.initial, 0)


def make_task(spec, object_id, kind, episode_length, seed, split="test"):
    """
    Build a task from a scripted push of the object.

    Re-positioning goals are the final pose of a scripted push lasting twice the episode;
    tracking references are the poses visited by a scripted push of the episode length.
    Both start from the scripted initial state.
    """
    rng = np.random.default_rng([int(s) for s in np.atleast_1d(seed)])
    if kind == "reposition":
        initial, script = scripted_push(rng, 2 * episode_length + 1)
        goals = [simulate(initial, spec, script)[-1]]
    elif kind == "track":
        initial, script = scripted_push(rng, episode_length + 1)
        goals = simulate(initial, spec, script)[1:]
    else:
        raise ValueError("unknown task %r, expected one of %s" % (kind, TASKS))
    return TaskSpec(kind, object_id, spec, initial, goals, episode_length, split)


@dataclass
class EpisodeRecord:
    task: TaskSpec
    method: str
    episode: int
    table: pd.DataFrame
    frames: np.ndarray = field(default=None, repr=False)

    @property
    def initial_error(self):
        return self.task.initial_error

    @property
    def final_error(self):
        return float(self.table["pose_error"].iloc[-1]) if len(self.table) else self.initial_error

    @property
    def mean_error(self):
        return float(self.table["pose_error"].mean()) if len(self.table) else self.initial_error

    def to_frame(self):
        frame = self.table.copy()
        for name, value in reversed(self.keys().items()):
            frame.insert(0, name, value)
        return frame

    def keys(self):
        return dict(method=self.method, kind=self.task.kind, split=self.task.split,
                    object_id=self.task.object_id, episode=self.episode,
                    initial_error=self.initial_error)


def _context_history(frames, actions, C):
    """last C frames and C - 1 actions, padded with the first frame and zero actions"""
    pad = max(0, C - len(frames))
    frames = [frames[0]] * pad + list(frames)[-C:]
    actions = [np.zeros(2, dtype=np.float32)] * pad + list(actions)
    actions = actions[len(actions) - (C - 1):]
    return np.stack(frames), np.asarray(actions, dtype=np.float32).reshape(C - 1, 2)


@timing
def mpc_run(task, cfg, rng, model=None, support=None, method="evf", episode=0, dump_dir=None):
    """
    Run one control episode.

    Parameters
    ----------
    task: TaskSpec
    cfg: PlanConfig
    rng: numpy.random.Generator
    model: evf.model.VisualForesight or None
        needed by the `evf` and `no-context` methods.
    support: evf.model.SupportSet or None
        observation-only videos of the task object; the context is their posterior mean.
    method: str
        `evf`, `no-context` (planning with a model trained without context),
        `no-motion` (zero actions) or `simulator` (planning with the ground truth).
    dump_dir: str or None
        PNG dump of the goal and the observed frames.

    Returns
    -------
    EpisodeRecord
        one table row per executed step: action, cost of the observed frame against the
        step goal, and object position error (x 1000).
    """
    if method not in METHODS:
        raise ValueError("unknown method %r, expected one of %s" % (method, METHODS))
    if method in ("evf", "no-context") and model is None:
        raise ValueError("method %r needs a model" % method)
    state = task.initial
    first = render(state, task.spec)
    observed, masks, executed = [first.intensity], [first.pusher_mask], []
    rows = []
    if method in ("evf", "no-context"):
        if model.config.use_context:
            if support is None:
                raise ValueError("method %r needs a support set" % method)
            c = model.context(support)
        else:
            c = np.zeros(model.config.context_dim, dtype=np.float32)

    queue = []
    for t in range(task.episode_length):
        if method == "no-motion":
            action = np.zeros(2)
        else:
            if not queue:
                goals, goal_masks = task.horizon_goals(t, cfg.horizon)
                if method == "simulator":
                    dynamics = SimulatorDynamics(task.spec, state)
                else:
                    C = model.config.context_frames
                    frames, past = _context_history(observed, executed, C)
                    dynamics = LearnedDynamics(model, c, frames, past,
                                               state.pusher, cfg.samples_per_candidate)
                terminal = 1.0 if task.kind == "reposition" else 0.0
                plan = cem_plan(dynamics, goals, goal_masks, cfg, rng, terminal_weight=terminal)
                queue = list(plan.actions[: cfg.replan_every])
            action = np.clip(queue.pop(0), -cfg.a_max, cfg.a_max)
        state = step(state, task.spec, action)
        frame = render(state, task.spec)
        observed.append(frame.intensity)
        masks.append(frame.pusher_mask)
        executed.append(np.asarray(action, dtype=np.float32))
        g = task.goal_index(t)
        cost = cost_masked_l2(frame.intensity, task.goal_frames[g],
                              frame.pusher_mask | task.goal_masks[g])
        rows.append(dict(step=t + 1, action_x=float(action[0]), action_y=float(action[1]),
                         cost=cost, pose_error=task.pose_error(state, t)))

    record = EpisodeRecord(task, method, episode, pd.DataFrame(rows, columns=EPISODE_COLUMNS),
                           np.stack(observed))
    if dump_dir is not None and task.goal_states:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        stem = "%s_episode%03d" % (method, episode)
        save_frame_png(dump_dir / (stem + "_goal.png"), task.goal_frames[-1])
        for t, intensity in enumerate(record.frames):
            save_frame_png(dump_dir / ("%s_t%02d.png" % (stem, t)), intensity)
    logger.debug("episode %d (%s, object %d): final error %.2f", episode, method,
                 task.object_id, record.final_error)
    return record


def run_episodes(tasks, cfg, seed, method, model=None, supports=None, dump_dir=None):
    """
    Run one episode per task in parallel; episode `e` plans with
    `numpy.random.default_rng([*seed, e])`.
    """
    supports = [None] * len(tasks) if supports is None else supports

    words = [int(s) for s in np.atleast_1d(seed)]

    def run(e):
        return mpc_run(tasks[e], cfg, np.random.default_rng(words + [e]), model=model,
                       support=supports[e], method=method, episode=e, dump_dir=dump_dir)

    return parallel_map(run, range(len(tasks)))


def episodes_frame(records):
    """long table of all executed steps, one row per episode step"""
    frames = [r.to_frame() for r in records]
    columns = KEY_COLUMNS + EPISODE_COLUMNS
    if not frames:
        return pd.DataFrame(columns=columns)
    return pd.concat(frames, ignore_index=True)[columns]


def write_episodes(path, records):
    with atomic_write(path, "w") as f:
        episodes_frame(records).to_csv(f, index=False)


def summarize_episodes(frame):
    """per-episode errors of a long episode table"""
    keys = ["method", "kind", "split", "object_id", "episode"]
    grouped = frame.groupby(keys, sort=True)
    summary = grouped.agg(initial_error=("initial_error", "first"),
                          final_error=("pose_error", "last"),
                          mean_error=("pose_error", "mean"))
    return summary.reset_index()


def report_control(records):
    """
    Summary of control episodes per method, task and split.

    Parameters
    ----------
    records: list of EpisodeRecord or pandas.DataFrame
        records, or their long table (`episodes_frame`).

    Returns
    -------
    pandas.DataFrame
        one row per (kind, method, split) with the episode count, mean and median final
        error, mean error over time and mean initial error. `split` is labelled
        Seen/Unseen.
    """
    if isinstance(records, pd.DataFrame):
        per_episode = summarize_episodes(records)
    else:
        per_episode = pd.DataFrame([
            dict(r.keys(), final_error=r.final_error, mean_error=r.mean_error) for r in records])
    per_episode = per_episode.assign(split=per_episode["split"].map(SPLIT_LABELS))
    summary = per_episode.groupby(["kind", "method", "split"], sort=True).agg(
        episodes=("final_error", "size"),
        mean_final=("final_error", "mean"),
        median_final=("final_error", "median"),
        mean_over_time=("mean_error", "mean"),
        initial=("initial_error", "mean"),
    )
    return summary.reset_index()


def control_table(summary):
    """Seen/Unseen columns side by side, one row per task and method"""
    wide = summary.pivot_table(index=["kind", "method"], columns="split",
                               values=["mean_final", "median_final", "mean_over_time"])
    wide.columns = ["%s %s" % (split, stat) for stat, split in wide.columns]
    return wide[sorted(wide.columns, key=lambda c: (c.split()[0] != "Seen", c))]


def format_control_table(summary):
    return control_table(summary).to_string(float_format=lambda x: "%.2f" % x)
