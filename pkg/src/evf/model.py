"""
Hierarchical latent-variable video prediction model.

Three networks share one :class:`~evf.autodiff.ParamStore`:

* the experience encoder (`phi/...`) maps a support set of action-free videos of one
  object to a Gaussian posterior over the context `c`,
* the frame encoder (`psi/...`) gives the training-time posterior over the per-step
  latent `z_t` from `I_t`, `I_{t-1}` and `c`,
* the recurrent generator (`theta/...`) predicts `I_t` from `I_{t-1}`, `a_{t-1}`, `z_t`,
  `c` and its hidden state, with a gated skip connection to the first frame.

All networks are dense; recurrent cells are gated recurrent units.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import List, NamedTuple

import numpy as np

from .autodiff import (
    GaussianParams,
    Graph,
    ParamStore,
    kl_diag_gaussian,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
)
from .utils import read_kv_file, write_kv_file

logger = logging.getLogger("evf.model")
logger.addHandler(logging.NullHandler())

CONFIG_SUFFIX = ".cfg"
# posterior head weights start small so posteriors start near the prior
HEAD_INIT_SCALE = 1e-2


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    frame_dim: int = 256
    action_dim: int = 2
    context_dim: int = 8
    latent_dim: int = 8
    hidden_dim: int = 128
    cell: str = "gru"
    beta: float = 1e-3
    gamma: float = 1e-3
    context_frames: int = 2
    predict_frames: int = 10
    # False gives the no-context baseline: c is 0 and the context KL is dropped
    use_context: bool = True

    def __post_init__(self):
        for name in ("frame_dim", "action_dim", "context_dim", "latent_dim", "hidden_dim",
                     "context_frames", "predict_frames"):
            if int(getattr(self, name)) < 1:
                raise ModelError("%s must be positive, got %r" % (name, getattr(self, name)))
        if self.beta < 0 or self.gamma < 0:
            raise ModelError("beta and gamma must be >= 0")
        if self.cell != "gru":
            raise ModelError("unsupported recurrent cell %r" % self.cell)

    @classmethod
    def from_settings(cls, values):
        """build from a `{field: value}` mapping, ignoring unknown keys"""
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    def to_settings(self):
        return asdict(self)


class SupportSet(NamedTuple):
    """`frames` has shape (M, T, frame_dim); no actions"""

    frames: np.ndarray
    object_id: int


class Batch(NamedTuple):
    """target trajectories of one object: frames (b, T, frame_dim), actions (b, T-1, 2)"""

    frames: np.ndarray
    actions: np.ndarray
    object_id: int


@dataclass
class RolloutResult:
    predicted: List
    posteriors: List
    latents: List
    recon: object
    z_kl: object


def flatten_frames(frames):
    """(..., H, W) frames to (..., H*W) float32"""
    frames = np.asarray(frames, dtype=np.float32)
    return frames.reshape(frames.shape[:-2] + (-1,))


def _dense_init(rng, n_in, n_out, scale=None):
    scale = 1 / np.sqrt(n_in) if scale is None else scale
    return rng.normal(scale=scale, size=(n_in, n_out)), np.zeros(n_out)


def init_params(cfg, seed=0):
    """
    Initialize all parameters.

    Returns
    -------
    ParamStore
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    h = cfg.hidden_dim

    def dense(name, n_in, n_out, scale=None):
        w, b = _dense_init(rng, n_in, n_out, scale)
        store.add(name + "/w", w)
        store.add(name + "/b", b)

    def gru(prefix, n_in):
        for gate in ("z", "r", "n"):
            w, b = _dense_init(rng, n_in + h, h)
            store.add("%s/w%s" % (prefix, gate), w)
            store.add("%s/b%s" % (prefix, gate), b)

    dense("phi/embed", cfg.frame_dim, h)
    gru("phi/gru", h)
    dense("phi/mean", h, cfg.context_dim, HEAD_INIT_SCALE)
    dense("phi/logvar", h, cfg.context_dim, HEAD_INIT_SCALE)

    dense("psi/hidden", 2 * cfg.frame_dim + cfg.context_dim, h)
    dense("psi/mean", h, cfg.latent_dim, HEAD_INIT_SCALE)
    dense("psi/logvar", h, cfg.latent_dim, HEAD_INIT_SCALE)

    dense("theta/embed", cfg.frame_dim + cfg.action_dim + cfg.latent_dim + cfg.context_dim, h)
    gru("theta/gru", h)
    dense("theta/frame", h, cfg.frame_dim)
    dense("theta/gate", h, cfg.frame_dim)
    return store


def gru_cell(g, P, prefix, x, h):
    """h' = n + z * (h - n)"""
    xh = g.concat(x, h)
    z = g.sigmoid(g.dense(xh, P[prefix + "/wz"], P[prefix + "/bz"]))
    r = g.sigmoid(g.dense(xh, P[prefix + "/wr"], P[prefix + "/br"]))
    n = g.tanh(g.dense(g.concat(x, r * h), P[prefix + "/wn"], P[prefix + "/bn"]))
    return n + z * (h - n)


def _heads(g, P, prefix, x):
    mean = g.dense(x, P[prefix + "/mean/w"], P[prefix + "/mean/b"])
    log_var = g.dense(x, P[prefix + "/logvar/w"], P[prefix + "/logvar/b"])
    return GaussianParams.from_heads(mean, log_var)


def encode_experience(g, P, support, cfg):
    """
    Posterior over the context from a support set.

    Each trajectory is encoded on its own (frame embedding, recurrent cell over time);
    final hidden states are mean-pooled, so the result is exactly invariant to the order
    of the trajectories and to duplicating them.

    Parameters
    ----------
    g: Graph
    P: dict
        parameter nodes by name.
    support: SupportSet
    cfg: ModelConfig

    Returns
    -------
    GaussianParams
        of shape (context_dim,)
    """
    frames = np.asarray(support.frames, dtype=np.float32)
    if frames.ndim != 3 or len(frames) == 0:
        raise ModelError("support set needs at least one trajectory, got shape %s" % (
            frames.shape,))
    if frames.shape[-1] != cfg.frame_dim:
        raise ModelError("support frames of dim %d, model expects %d" % (
            frames.shape[-1], cfg.frame_dim))
    finals = []
    for video in frames:
        h = g.constant(np.zeros(cfg.hidden_dim))
        for frame in video:
            x = g.tanh(g.dense(g.constant(frame), P["phi/embed/w"], P["phi/embed/b"]))
            h = gru_cell(g, P, "phi/gru", x, h)
        finals.append(h)
    pooled = g.mean(g.stack(*finals), axis=0)
    return _heads(g, P, "phi", pooled)


def encode_frame_posterior(g, P, frame, prev_frame, c, cfg):
    """
    Posterior over z_t from the flattened frames `I_t`, `I_{t-1}` and context `c`.

    All inputs are nodes with a leading batch axis.
    """
    if frame.shape[-1] != cfg.frame_dim or prev_frame.shape != frame.shape:
        raise ModelError("frame shapes %s and %s, model expects dim %d" % (
            frame.shape, prev_frame.shape, cfg.frame_dim))
    x = g.concat(frame, prev_frame, c)
    hidden = g.relu(g.dense(x, P["psi/hidden/w"], P["psi/hidden/b"]))
    return _heads(g, P, "psi", hidden)


def generator_step(g, P, prev_frame, action, z, c, hidden, first_frame, gate=None):
    """
    One generator step.

    Returns
    -------
    tuple(Node, Node)
        prediction `first_frame + m * (candidate - first_frame)` and the new hidden
        state. `gate` overrides the predicted mask `m` when given.
    """
    x = g.tanh(g.dense(g.concat(prev_frame, action, z, c), P["theta/embed/w"], P["theta/embed/b"]))
    hidden = gru_cell(g, P, "theta/gru", x, hidden)
    candidate = g.sigmoid(g.dense(hidden, P["theta/frame/w"], P["theta/frame/b"]))
    if gate is None:
        gate = g.sigmoid(g.dense(hidden, P["theta/gate/w"], P["theta/gate/b"]))
    prediction = first_frame + gate * (candidate - first_frame)
    return prediction, hidden


def _batched_context(g, c, b, cfg):
    if c.shape == (cfg.context_dim,):
        return g.broadcast(c, (b, cfg.context_dim))
    if c.shape != (b, cfg.context_dim):
        raise ModelError("context of shape %s for a batch of %d" % (c.shape, b))
    return c


def rollout_train(g, P, frames, actions, c, noise, cfg):
    """
    Training rollout over full trajectories.

    Frames 1..T-1 are predicted. The generator reads ground-truth previous frames while
    predicting the first `context_frames` frames and its own predictions afterwards.
    z_t is a single reparameterized sample of the frame posterior.

    Parameters
    ----------
    frames: numpy.ndarray
        (b, T, frame_dim)
    actions: numpy.ndarray
        (b, T-1, action_dim)
    c: Node
        (context_dim,) or (b, context_dim)
    noise: numpy.ndarray
        standard normal draws (b, T-1, latent_dim)

    Returns
    -------
    RolloutResult
        `recon` is the per-trajectory mean over steps of the summed squared error, `z_kl`
        the per-trajectory sum over steps of KL(q(z_t) || N(0, I)).
    """
    frames = np.asarray(frames, dtype=np.float32)
    b, T = frames.shape[:2]
    if T < cfg.context_frames + 1:
        raise ModelError("trajectories of %d frames, need at least %d" % (
            T, cfg.context_frames + 1))
    if actions.shape[:2] != (b, T - 1):
        raise ModelError("actions of shape %s for frames %s" % (actions.shape, frames.shape))
    c = _batched_context(g, c, b, cfg)
    first = g.constant(frames[:, 0])
    hidden = g.constant(np.zeros((b, cfg.hidden_dim)))
    result = RolloutResult([], [], [], None, None)
    sq_error = None
    for t in range(1, T):
        target = g.constant(frames[:, t])
        truth_prev = g.constant(frames[:, t - 1])
        q = encode_frame_posterior(g, P, target, truth_prev, c, cfg)
        z = reparameterize(q, noise[:, t - 1])
        prev = truth_prev if t <= cfg.context_frames else result.predicted[-1]
        prediction, hidden = generator_step(
            g, P, prev, g.constant(actions[:, t - 1]), z, c, hidden, first)
        err = g.sum(g.square(prediction - target), axis=-1)
        kl = kl_diag_gaussian(q, axis=-1)
        sq_error = err if sq_error is None else sq_error + err
        result.z_kl = kl if result.z_kl is None else result.z_kl + kl
        result.predicted.append(prediction)
        result.posteriors.append(q)
        result.latents.append(z)
    result.recon = g.scale(sq_error, 1.0 / (T - 1))
    return result


def rollout_predict(g, P, context, actions, c, noise, cfg, horizon):
    """
    Autoregressive prediction with z_t drawn from the prior.

    The generator reads the `C` context frames (warm-up), then predicts `horizon` frames
    from its own outputs.

    Parameters
    ----------
    context: numpy.ndarray
        (b, C, frame_dim), C >= 1
    actions: numpy.ndarray
        (b, C - 1 + horizon, action_dim)
    c: Node
        (context_dim,) or (b, context_dim)
    noise: numpy.ndarray
        standard normal prior draws (b, C - 1 + horizon, latent_dim)

    Returns
    -------
    list of Node
        `horizon` predictions of shape (b, frame_dim), for frames C..C+horizon-1.
    """
    context = np.asarray(context, dtype=np.float32)
    b, C = context.shape[:2]
    if C < 1:
        raise ModelError("prediction needs at least one context frame")
    if horizon < 0:
        raise ModelError("negative horizon %d" % horizon)
    steps = C - 1 + horizon
    if actions.shape[:2] != (b, steps):
        raise ModelError("actions of shape %s, expected (%d, %d, ...)" % (actions.shape, b, steps))
    if horizon == 0:
        return []
    c = _batched_context(g, c, b, cfg)
    first = g.constant(context[:, 0])
    hidden = g.constant(np.zeros((b, cfg.hidden_dim)))
    predictions = []
    for t in range(1, C + horizon):
        prev = g.constant(context[:, t - 1]) if t <= C else predictions[-1]
        z = g.constant(noise[:, t - 1])
        prediction, hidden = generator_step(
            g, P, prev, g.constant(actions[:, t - 1]), z, c, hidden, first)
        if t >= C:
            predictions.append(prediction)
    return predictions


def elbo_loss(g, P, support, batch, dataset_size, noise_c, noise_z, cfg):
    """
    Negative stochastic lower bound of one object's dataset, per trajectory.

    `loss = mean_b(recon + beta * Z) + (gamma / dataset_size) * C` with a single context
    sample shared by the batch. With `cfg.use_context` False, c is 0 and the context term
    is dropped.

    Returns
    -------
    tuple(Node, dict)
        scalar loss and diagnostics nodes: `recon`, `z_kl`, `c_kl`, `c_term`, `loss`
        and the per-trajectory `per_trajectory` = recon + beta * Z.
    """
    if support.object_id != batch.object_id:
        raise ModelError("support set of object %d, batch of object %d" % (
            support.object_id, batch.object_id))
    if dataset_size < 1:
        raise ModelError("dataset size must be >= 1")
    if cfg.use_context:
        posterior = encode_experience(g, P, support, cfg)
        c = reparameterize(posterior, noise_c)
        c_kl = kl_diag_gaussian(posterior)
    else:
        c = g.constant(np.zeros(cfg.context_dim))
        c_kl = g.constant(0.0)
    c_term = g.scale(c_kl, cfg.gamma / dataset_size)
    result = rollout_train(g, P, batch.frames, batch.actions, c, noise_z, cfg)
    per_trajectory = result.recon + g.scale(result.z_kl, cfg.beta)
    loss = g.mean(per_trajectory) + c_term
    diagnostics = {
        "recon": g.mean(result.recon),
        "z_kl": g.mean(result.z_kl),
        "c_kl": c_kl,
        "c_term": c_term,
        "loss": loss,
        "per_trajectory": per_trajectory,
    }
    return loss, diagnostics


class VisualForesight:
    """
    Model configuration and parameters, with numpy-level entry points.

    Parameters
    ----------
    config: ModelConfig or None
    store: ParamStore or None
        freshly initialized from `seed` if None.
    seed: int

    Examples
    --------
    >>> model = VisualForesight(ModelConfig(hidden_dim=16))
    >>> mean, log_var = model.posterior(support)
    >>> frames = model.predict(context, actions, mean, horizon=10, rng=rng)
    """

    def __init__(self, config=None, store=None, seed=0):
        self.config = ModelConfig() if config is None else config
        self.store = init_params(self.config, seed) if store is None else store

    def __repr__(self):
        return "<VisualForesight: %s, %d parameters%s>" % (
            "context" if self.config.use_context else "no context", self.store.size,
            ", step %d" % self.store.step if self.store.step else "")

    def bind(self, graph):
        return self.store.bind(graph)

    def posterior(self, support):
        """
        Context posterior of a support set.

        Returns
        -------
        tuple(numpy.ndarray, numpy.ndarray)
            mean and log-variance, (context_dim,).
        """
        g = Graph()
        q = encode_experience(g, self.bind(g), support, self.config)
        return q.numpy()

    def context(self, support, rng=None):
        """
        Context used for prediction: zeros without context, the posterior mean when `rng`
        is None, else a posterior sample.
        """
        if not self.config.use_context:
            return np.zeros(self.config.context_dim, dtype=np.float32)
        mean, log_var = self.posterior(support)
        if rng is None:
            return mean
        return (mean + np.exp(0.5 * log_var) * rng.standard_normal(mean.shape)).astype(np.float32)

    def predict(self, context, actions, c, horizon, rng=None, noise=None):
        """
        Predict `horizon` frames.

        Parameters
        ----------
        context: numpy.ndarray
            (b, C, frame_dim) or (b, C, H, W)
        actions: numpy.ndarray
            (b, C - 1 + horizon, action_dim)
        c: numpy.ndarray
            (context_dim,) or (b, context_dim)
        rng: numpy.random.Generator or None
            source of the prior draws when `noise` is None.

        Returns
        -------
        numpy.ndarray
            (b, horizon, frame_dim)
        """
        context = np.asarray(context, dtype=np.float32)
        if context.ndim == 4:
            context = flatten_frames(context)
        b, C = context.shape[:2]
        steps = C - 1 + horizon
        if noise is None:
            rng = np.random.default_rng() if rng is None else rng
            noise = rng.standard_normal((b, steps, self.config.latent_dim))
        g = Graph()
        if not self.config.use_context:
            c = np.zeros_like(np.asarray(c, dtype=np.float32))
        predictions = rollout_predict(
            g, self.bind(g), context, np.asarray(actions, dtype=np.float32), g.constant(c),
            noise, self.config, horizon)
        if not predictions:
            return np.zeros((b, 0, self.config.frame_dim), dtype=np.float32)
        return np.stack([p.value for p in predictions], axis=1)

    def loss(self, support, batch, dataset_size, rng, dtype=np.float32):
        """
        Build the loss graph of one object with fresh noise from `rng`.

        Returns
        -------
        tuple(Graph, Node, dict)
        """
        cfg = self.config
        b, T = batch.frames.shape[:2]
        noise_c = rng.standard_normal(cfg.context_dim)
        noise_z = rng.standard_normal((b, T - 1, cfg.latent_dim))
        g = Graph(dtype=dtype)
        loss, diagnostics = elbo_loss(
            g, self.bind(g), support, batch, dataset_size, noise_c, noise_z, cfg)
        return g, loss, diagnostics

    def save(self, path):
        """checkpoint `path` (+ `.opt`) and the `.cfg` config snapshot"""
        save_checkpoint(path, self.store)
        write_kv_file(str(path) + CONFIG_SUFFIX, self.config.to_settings())

    @classmethod
    def load(cls, path, optimizer=True):
        cfg = ModelConfig.from_settings(read_kv_file(str(path) + CONFIG_SUFFIX))
        store = load_checkpoint(path, optimizer=optimizer)
        reference = init_params(cfg)
        for name in reference:
            if name not in store:
                raise ModelError("checkpoint %s lacks parameter %s" % (path, name))
            if store[name].shape != reference[name].shape:
                raise ModelError("parameter %s of shape %s in %s, config expects %s" % (
                    name, store[name].shape, path, reference[name].shape))
        return cls(cfg, store)
