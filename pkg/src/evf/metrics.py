"""
Frame similarity metrics, best-of-K evaluation and context embedding analysis.
"""

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
import xarray as xr
from scipy import stats
from scipy.spatial import distance
from skimage.metrics import structural_similarity
from sklearn.decomposition import PCA
from sklearn.metrics import silhouette_score

from .model import SupportSet, flatten_frames
from .pushworld import save_frame_png
from .training import sample_support_indices
from .utils import atomic_write, parallel_map, timing

logger = logging.getLogger("evf.metrics")
logger.addHandler(logging.NullHandler())

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_C1 = SSIM_K1**2
SSIM_C2 = SSIM_K2**2


class MetricError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError("frames of shapes %s and %s" % (a.shape, b.shape))
    if a.ndim < 2:
        raise MetricError("frames must be at least 2-D, got shape %s" % (a.shape,))
    return a, b


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def psnr(a, b):
    """
    Peak signal-to-noise ratio of [0, 1] frames, in dB.

    Computed over the last two axes; leading axes are batch axes. Values are capped at
    100 dB (MSE below 1e-10).
    """
    a, b = _pair(a, b)
    mse = np.mean(np.square(a - b), axis=(-2, -1))
    with np.errstate(divide="ignore"):
        value = np.where(mse < MSE_FLOOR, PSNR_CAP, -10 * np.log10(np.maximum(mse, MSE_FLOOR)))
    return _scalar(np.minimum(value, PSNR_CAP))


def ssim(a, b, window=SSIM_WINDOW):
    """
    Structural similarity of [0, 1] frames.

    `skimage.metrics.structural_similarity` per frame, with uniform `window` x `window`
    windows and population statistics. Leading axes are batch axes.

    Raises
    ------
    MetricError
        if the frames are smaller than the window.
    """
    a, b = _pair(a, b)
    if min(a.shape[-2:]) < window:
        raise MetricError("frames of shape %s smaller than the %dx%d window" % (
            a.shape[-2:], window, window))
    frame_shape = a.shape[-2:]
    values = [
        structural_similarity(x, y, win_size=window, data_range=1.0, gaussian_weights=False,
                              use_sample_covariance=False, K1=SSIM_K1, K2=SSIM_K2)
        for x, y in zip(a.reshape((-1,) + frame_shape), b.reshape((-1,) + frame_shape))
    ]
    return _scalar(np.asarray(values, dtype=np.float64).reshape(a.shape[:-2]))


class EvalReport:
    """
    Best-of-K prediction scores.

    Data is held in `EvalReport.dataset`, an `xarray.Dataset` with `psnr` and `ssim` over
    (trajectory, time) and `object_id`, `index`, `support_object_id` over trajectory.
    `time` is the prediction step, starting at 1. `support_object_id` is the object the
    support set was drawn from (`object_id` unless the support was mismatched).
    """

    def __init__(self, psnr, ssim, object_id, index, K, support_size, mismatched=False,
                 support_object_id=None):
        psnr = np.asarray(psnr, dtype=np.float64)
        ssim = np.asarray(ssim, dtype=np.float64)
        if psnr.ndim != 2 or psnr.shape != ssim.shape:
            raise MetricError("psnr and ssim must share a (trajectory, time) shape")
        if support_object_id is None:
            support_object_id = object_id
        self.dataset = xr.Dataset(
            {
                "psnr": (("trajectory", "time"), psnr),
                "ssim": (("trajectory", "time"), ssim),
                "object_id": ("trajectory", np.asarray(object_id, dtype=int)),
                "index": ("trajectory", np.asarray(index, dtype=int)),
                "support_object_id": ("trajectory", np.asarray(support_object_id, dtype=int)),
            },
            coords={"time": np.arange(1, psnr.shape[1] + 1)},
            attrs={"K": int(K), "support_size": int(support_size), "mismatched": int(mismatched)},
        )

    def __repr__(self):
        return "<EvalReport: %d trajectories, horizon %d, K=%d>" % (
            self.n_trajectories, self.horizon, self.K)

    @property
    def K(self):
        return self.dataset.attrs["K"]

    @property
    def horizon(self):
        return self.dataset.sizes["time"]

    @property
    def n_trajectories(self):
        return self.dataset.sizes["trajectory"]

    def curves(self):
        """mean over trajectories per prediction step"""
        mean = self.dataset[["psnr", "ssim"]].mean("trajectory")
        return mean.to_dataframe()

    def per_object(self):
        """mean over trajectories and steps, per object"""
        per_trajectory = self.dataset[["psnr", "ssim"]].mean("time")
        frame = per_trajectory.to_dataframe()
        frame["object_id"] = self.dataset["object_id"].values
        return frame.groupby("object_id")[["psnr", "ssim"]].mean()

    def mean(self, metric="ssim"):
        return float(self.dataset[metric].mean())

    def to_frame(self):
        """long table: one row per trajectory and step"""
        frame = self.dataset[["psnr", "ssim"]].to_dataframe().reset_index()
        frame["object_id"] = self.dataset["object_id"].values[frame["trajectory"]]
        frame["index"] = self.dataset["index"].values[frame["trajectory"]]
        frame["support_object_id"] = self.dataset["support_object_id"].values[frame["trajectory"]]
        return frame[["object_id", "support_object_id", "index", "time", "psnr", "ssim"]]

    def to_csv(self, path, per_trajectory=False):
        """per-step curves (or the long per-trajectory table) as CSV"""
        frame = self.to_frame() if per_trajectory else self.curves().reset_index()
        with atomic_write(path, "w") as f:
            frame.to_csv(f, index=False)

    @classmethod
    def read_csv(cls, path, K=0, support_size=0):
        """rebuild a report from its per-trajectory CSV"""
        frame = pd.read_csv(path, float_precision="round_trip")
        frame = frame.sort_values(["object_id", "index", "time"])
        keys = frame.drop_duplicates(["object_id", "index"])
        horizon = frame["time"].nunique()
        shape = (len(keys), horizon)
        if "support_object_id" in keys:
            support_ids = keys["support_object_id"].values
            mismatched = bool((support_ids != keys["object_id"].values).any())
        else:
            support_ids, mismatched = None, False
        return cls(frame["psnr"].values.reshape(shape), frame["ssim"].values.reshape(shape),
                   keys["object_id"].values, keys["index"].values, K, support_size,
                   mismatched=mismatched, support_object_id=support_ids)

    def summary(self):
        curves = self.curves()
        lines = [
            "trajectories: %d" % self.n_trajectories,
            "objects: %d" % len(np.unique(self.dataset["object_id"])),
            "K: %d" % self.K,
            "support size: %d" % self.dataset.attrs["support_size"],
            "mismatched support: %s" % bool(self.dataset.attrs["mismatched"]),
            "mean psnr: %.4f" % self.mean("psnr"),
            "mean ssim: %.4f" % self.mean("ssim"),
            "",
            curves.to_string(float_format=lambda x: "%.4f" % x),
        ]
        return "\n".join(lines)


def _eval_trajectory(job, model, K, horizon, support_size, seed, shape, dump_dir):
    dataset, support_dataset, i = job
    cfg = model.config
    C = cfg.context_frames
    if support_dataset is dataset:
        exclude = [i]
        if dataset.N < 2:
            raise MetricError("object %d has a single trajectory, no support set" % (
                dataset.object_id))
    else:
        exclude = []
    rng = np.random.default_rng([seed, dataset.object_id, i])
    indices = sample_support_indices(support_dataset.N, support_size, rng, exclude)
    support = SupportSet(flatten_frames(support_dataset.frames[indices]), dataset.object_id)

    steps = C - 1 + horizon
    contexts, noise = [], []
    for k in range(K):
        draw = np.random.default_rng([seed, dataset.object_id, i, k])
        contexts.append(model.context(support, draw))
        noise.append(draw.standard_normal((steps, cfg.latent_dim)))
    context = np.repeat(flatten_frames(dataset.frames[i:i + 1, :C]), K, axis=0)
    actions = np.repeat(dataset.actions[i:i + 1, :steps], K, axis=0)
    predicted = model.predict(context, actions, np.stack(contexts), horizon, noise=np.stack(noise))
    predicted = predicted.reshape((K, horizon) + shape)
    truth = dataset.frames[i, C:C + horizon]
    p = psnr(predicted, np.broadcast_to(truth, predicted.shape))
    s = ssim(predicted, np.broadcast_to(truth, predicted.shape))
    if dump_dir is not None:
        best = int(np.argmax(s.mean(axis=1)))
        for t in range(horizon):
            stem = "object%03d_traj%03d_t%02d" % (dataset.object_id, i, t + 1)
            save_frame_png(Path(dump_dir) / (stem + "_truth.png"), truth[t])
            save_frame_png(Path(dump_dir) / (stem + "_pred.png"), predicted[best, t])
    return p.max(axis=0), s.max(axis=0)


@timing
def best_of_k_eval(model, datasets, K=10, horizon=10, seed=0, support_size=5,
                   support_datasets=None, dump_dir=None, dump_trajectories=0):
    """
    Best-of-K evaluation of a model on held-out trajectories.

    For each trajectory the support set is sampled from the other trajectories of the
    same object (or from `support_datasets`), then `K` rollouts are drawn, each with its
    own posterior sample of the context and prior samples of the latents. For each metric
    and step, the best of the `K` rollouts is kept.

    Parameters
    ----------
    model: evf.model.VisualForesight
    datasets: list of evf.pushworld.DatasetFile
    K: int
    horizon: int
        predicted steps, capped by the trajectory length.
    seed: int
        draws of rollout `k` of trajectory `i` of object `o` come from
        `numpy.random.default_rng([seed, o, i, k])`, so curves are non-decreasing in `K`.
    support_size: int
    support_datasets: list of evf.pushworld.DatasetFile or None
        support source per dataset, for mismatched-support evaluation.
    dump_dir: str or None
        PNG dumps of the ground truth and the best rollout of the first
        `dump_trajectories` trajectories of each object.

    Returns
    -------
    EvalReport
    """
    if K < 1:
        raise MetricError("K must be >= 1, got %r" % K)
    if not datasets:
        raise MetricError("no dataset to evaluate")
    if support_datasets is not None and len(support_datasets) != len(datasets):
        raise MetricError("one support dataset per evaluated dataset is needed")
    C = model.config.context_frames
    T = min(d.T for d in datasets)
    if T - C < horizon:
        msg = "horizon %d capped to %d by trajectories of %d frames" % (horizon, T - C, T)
        warnings.warn(msg)
        logger.warning(msg)
        horizon = T - C
    if horizon < 1:
        raise MetricError("trajectories of %d frames leave nothing to predict" % T)
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)

    jobs, object_ids, support_ids, indices = [], [], [], []
    for j, dataset in enumerate(datasets):
        source = dataset if support_datasets is None else support_datasets[j]
        for i in range(dataset.N):
            jobs.append((dataset, source, i))
            object_ids.append(dataset.object_id)
            support_ids.append(source.object_id)
            indices.append(i)
    shape = datasets[0].frame_shape

    def run(job):
        dump = dump_dir if job[2] < dump_trajectories else None
        return _eval_trajectory(job, model, K, horizon, support_size, seed, shape, dump)

    results = parallel_map(run, jobs)
    report = EvalReport([r[0] for r in results], [r[1] for r in results], object_ids, indices,
                        K, support_size, mismatched=support_datasets is not None,
                        support_object_id=support_ids)
    logger.info("evaluated %d trajectories: mean psnr %.3f, mean ssim %.4f",
                report.n_trajectories, report.mean("psnr"), report.mean("ssim"))
    return report


def paired_comparison(a, b, metric="ssim"):
    """
    Paired comparison of two reports over their shared trajectories.

    Each trajectory is scored by its mean `metric` over steps.

    Returns
    -------
    dict
        `n`, `mean_a`, `mean_b`, `diff` (a - b), `t` and the two-sided `p` of a paired
        t-test.
    """
    fa = a.to_frame().groupby(["object_id", "index"])[metric].mean()
    fb = b.to_frame().groupby(["object_id", "index"])[metric].mean()
    joined = pd.concat([fa.rename("a"), fb.rename("b")], axis=1, join="inner")
    if len(joined) < 2:
        raise MetricError("paired comparison needs >= 2 shared trajectories, got %d" % len(joined))
    test = stats.ttest_rel(joined["a"], joined["b"])
    return dict(n=len(joined), mean_a=float(joined["a"].mean()), mean_b=float(joined["b"].mean()),
                diff=float((joined["a"] - joined["b"]).mean()), t=float(test.statistic),
                p=float(test.pvalue))


@dataclass
class EmbeddingStats:
    intra: float
    inter: float
    silhouette: float
    embeddings: pd.DataFrame

    @property
    def ratio(self):
        """inter/intra distance ratio, nan when both are 0"""
        if self.intra == 0:
            return float("inf") if self.inter > 0 else float("nan")
        return self.inter / self.intra

    def summary(self):
        return "\n".join([
            "objects: %d" % self.embeddings["object_id"].nunique(),
            "draws: %d" % self.embeddings["draw"].nunique(),
            "intra-object distance: %.6f" % self.intra,
            "inter-object distance: %.6f" % self.inter,
            "inter/intra ratio: %.4f" % self.ratio,
            "silhouette: %.4f" % self.silhouette,
        ])


def separation_statistics(points, labels):
    """
    Mean intra-label and inter-label Euclidean distances and the silhouette score.

    Returns
    -------
    tuple(float, float, float)
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    square = distance.squareform(distance.pdist(points))
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~np.eye(len(labels), dtype=bool)
    intra = float(square[same & off_diagonal].mean())
    inter = float(square[~same].mean())
    if np.all(square == 0):
        silhouette = 0.0
    else:
        silhouette = float(silhouette_score(square, labels, metric="precomputed"))
    return intra, inter, silhouette


@timing
def embedding_separation(model, datasets, draws=10, support_size=5, seed=0):
    """
    Separation of context embeddings between objects.

    For each object, `draws` support sets are sampled independently and mapped to their
    posterior mean.

    Returns
    -------
    EmbeddingStats
    """
    if len(datasets) < 2:
        raise MetricError("embedding separation needs >= 2 objects, got %d" % len(datasets))
    if draws < 2:
        raise MetricError("embedding separation needs >= 2 draws per object, got %d" % draws)
    jobs = [(dataset, r) for dataset in datasets for r in range(draws)]

    def embed(job):
        dataset, r = job
        rng = np.random.default_rng([seed, dataset.object_id, r])
        indices = sample_support_indices(dataset.N, support_size, rng)
        support = SupportSet(flatten_frames(dataset.frames[indices]), dataset.object_id)
        return model.posterior(support)[0]

    means = np.stack(parallel_map(embed, jobs)).astype(np.float64)
    labels = np.array([d.object_id for d, _ in jobs])
    intra, inter, silhouette = separation_statistics(means, labels)
    table = pd.DataFrame(means, columns=["c%d" % i for i in range(means.shape[1])])
    table.insert(0, "draw", [r for _, r in jobs])
    table.insert(0, "object_id", labels)
    return EmbeddingStats(intra, inter, silhouette, table)


class Projection(NamedTuple):
    coordinates: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray


def pca_project(embeddings, dims=2):
    """
    Project on the top principal components.

    Fitted with `sklearn.decomposition.PCA` (full SVD, float64). Each component is
    oriented so its largest-magnitude entry is positive. When the data has fewer than
    `dims` features, the missing coordinates are 0.

    Returns
    -------
    Projection
        `coordinates` (n, dims), `components` (dims, d) and `explained_variance` (dims,).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise MetricError("embeddings must be 2-D, got shape %s" % (x.shape,))
    n, d = x.shape
    if n < max(dims, 2):
        raise MetricError("%d samples for %d components" % (n, dims))
    k = min(dims, d)
    pca = PCA(n_components=k, svd_solver="full").fit(x)
    vectors = pca.components_
    signs = np.sign(vectors[np.arange(k), np.argmax(np.abs(vectors), axis=1)])
    vectors = vectors * np.where(signs == 0, 1, signs)[:, None]
    coordinates = np.zeros((n, dims))
    components = np.zeros((dims, d))
    variance = np.zeros(dims)
    coordinates[:, :k] = (x - pca.mean_) @ vectors.T
    components[:k] = vectors
    variance[:k] = np.clip(pca.explained_variance_, 0, None)
    return Projection(coordinates, components, variance)


def embedding_projection_table(embedding_stats, dims=2):
    """PCA coordinates as an `object_id,draw,x,y` table"""
    columns = [c for c in embedding_stats.embeddings.columns if c.startswith("c")]
    projection = pca_project(embedding_stats.embeddings[columns].values, dims)
    table = embedding_stats.embeddings[["object_id", "draw"]].copy()
    for name, column in zip("xyzw", projection.coordinates.T):
        table[name] = column
    return table
