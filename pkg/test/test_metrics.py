import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import pdist
from sklearn.decomposition import PCA

from evf.metrics import (
    SSIM_C1,
    SSIM_C2,
    EvalReport,
    MetricError,
    best_of_k_eval,
    embedding_projection_table,
    embedding_separation,
    paired_comparison,
    pca_project,
    psnr,
    separation_statistics,
    ssim,
)
from evf.model import ModelConfig, SupportSet, VisualForesight, flatten_frames
from evf.pushworld import DatasetFile
from evf.training import sample_support_indices


@pytest.fixture
def frames(rng):
    return rng.uniform(size=(2, 16, 16))


def test_psnr_values(frames):
    a, _ = frames
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)
    checker = np.indices((8, 8)).sum(axis=0) % 2
    assert psnr(checker, 1 - checker) == pytest.approx(0.0)


def test_psnr_symmetric_and_batched(frames):
    a, b = frames
    assert psnr(a, b) == psnr(b, a)
    batched = psnr(np.stack([a, b]), np.stack([b, b]))
    assert batched.shape == (2,)
    assert batched[0] == pytest.approx(psnr(a, b)) and batched[1] == 100.0


def test_psnr_shape_mismatch():
    with pytest.raises(MetricError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identity_and_symmetry(frames):
    a, b = frames
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= ssim(a, b) <= 1


def test_ssim_constant_frames():
    # flat windows: variances and covariance vanish, the C2 terms cancel
    value = ssim(np.zeros((16, 16)), np.ones((16, 16)))
    assert value == pytest.approx(SSIM_C1 / (1 + SSIM_C1))


def test_ssim_small_frames():
    with pytest.raises(MetricError, match="window"):
        ssim(np.zeros((6, 16)), np.zeros((6, 16)))


def _uniform_window_ssim(a, b, window=7):
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


def test_ssim_uniform_window_reference(frames):
    a, b = frames
    assert ssim(a, b) == pytest.approx(_uniform_window_ssim(a, b), rel=1e-6, abs=1e-9)
    blurred = (a + np.roll(a, 1, axis=0)) / 2
    assert ssim(a, blurred) == pytest.approx(_uniform_window_ssim(a, blurred), rel=1e-6, abs=1e-9)


def test_ssim_batched(rng):
    a = rng.uniform(size=(2, 3, 16, 16))
    b = rng.uniform(size=(2, 3, 16, 16))
    values = ssim(a, b)
    assert values.shape == (2, 3)
    for i in range(2):
        for j in range(3):
            assert values[i, j] == pytest.approx(ssim(a[i, j], b[i, j]), abs=1e-12)


@pytest.fixture(scope="module")
def eval_model():
    return VisualForesight(ModelConfig(context_dim=3, latent_dim=3, hidden_dim=8), seed=0)


def test_best_of_k_single_sample(eval_model, tiny_dataset):
    report = best_of_k_eval(eval_model, [tiny_dataset], K=1, horizon=4, seed=0)
    assert report.horizon == 4 and report.n_trajectories == tiny_dataset.N
    # the single rollout of trajectory 0, drawn as the evaluation draws it
    rng = np.random.default_rng([0, tiny_dataset.object_id, 0])
    idx = sample_support_indices(tiny_dataset.N, 5, rng, exclude=[0])
    support = SupportSet(flatten_frames(tiny_dataset.frames[idx]), tiny_dataset.object_id)
    draw = np.random.default_rng([0, tiny_dataset.object_id, 0, 0])
    c = eval_model.context(support, draw)
    noise = draw.standard_normal((1, 5, 3))
    predicted = eval_model.predict(tiny_dataset.frames[:1, :2], tiny_dataset.actions[:1, :5],
                                   c[None], 4, noise=noise).reshape(4, 16, 16)
    truth = tiny_dataset.frames[0, 2:6]
    np.testing.assert_allclose(report.dataset["ssim"].values[0], ssim(predicted, truth))
    np.testing.assert_allclose(report.dataset["psnr"].values[0], psnr(predicted, truth))


def test_best_of_k_monotone(eval_model, tiny_dataset):
    small = best_of_k_eval(eval_model, [tiny_dataset], K=2, horizon=4, seed=1)
    large = best_of_k_eval(eval_model, [tiny_dataset], K=5, horizon=4, seed=1)
    assert np.all(large.dataset["ssim"].values >= small.dataset["ssim"].values)
    assert np.all(large.dataset["psnr"].values >= small.dataset["psnr"].values)


def test_best_of_k_deterministic(eval_model, tiny_dataset, other_dataset):
    a = best_of_k_eval(eval_model, [tiny_dataset, other_dataset], K=2, horizon=3, seed=4)
    b = best_of_k_eval(eval_model, [tiny_dataset, other_dataset], K=2, horizon=3, seed=4)
    assert a.dataset.equals(b.dataset)
    assert list(a.per_object().index) == [0, 1]


def test_best_of_k_horizon_capped(eval_model, tiny_dataset):
    with pytest.warns(UserWarning, match="capped"):
        report = best_of_k_eval(eval_model, [tiny_dataset], K=1, horizon=10)
    assert report.horizon == tiny_dataset.T - 2


def test_best_of_k_mismatched(eval_model, tiny_dataset, other_dataset):
    report = best_of_k_eval(eval_model, [tiny_dataset, other_dataset], K=1, horizon=3,
                            support_datasets=[other_dataset, tiny_dataset])
    assert report.dataset.attrs["mismatched"] == 1
    assert report.n_trajectories == 16
    frame = report.to_frame()
    assert (frame["support_object_id"] != frame["object_id"]).all()
    pairs = frame[["object_id", "support_object_id"]].drop_duplicates().values.tolist()
    assert sorted(pairs) == sorted([[tiny_dataset.object_id, other_dataset.object_id],
                                    [other_dataset.object_id, tiny_dataset.object_id]])


def test_best_of_k_matched_support_ids(eval_model, tiny_dataset):
    report = best_of_k_eval(eval_model, [tiny_dataset], K=1, horizon=2)
    np.testing.assert_array_equal(report.dataset["support_object_id"].values,
                                  report.dataset["object_id"].values)


def test_best_of_k_single_trajectory(eval_model, tiny_dataset):
    single = DatasetFile(3, tiny_dataset.spec, tiny_dataset.frames[:1], tiny_dataset.masks[:1],
                         tiny_dataset.actions[:1])
    with pytest.raises(MetricError, match="single trajectory"):
        best_of_k_eval(eval_model, [single], K=1, horizon=2)


def test_best_of_k_invalid_k(eval_model, tiny_dataset):
    with pytest.raises(MetricError):
        best_of_k_eval(eval_model, [tiny_dataset], K=0)


def test_best_of_k_frame_dumps(tmp_path, eval_model, tiny_dataset):
    best_of_k_eval(eval_model, [tiny_dataset], K=2, horizon=2, dump_dir=tmp_path,
                   dump_trajectories=1)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "object000_traj000_t01_pred.png", "object000_traj000_t01_truth.png",
        "object000_traj000_t02_pred.png", "object000_traj000_t02_truth.png",
    ]


def test_eval_report_csv(tmp_path, rng):
    report = EvalReport(rng.uniform(10, 30, (4, 3)), rng.uniform(0, 1, (4, 3)), [0, 0, 1, 1],
                        [0, 1, 0, 1], K=3, support_size=5)
    report.to_csv(tmp_path / "curves.csv")
    assert (tmp_path / "curves.csv").read_text().splitlines()[0] == "time,psnr,ssim"
    report.to_csv(tmp_path / "long.csv", per_trajectory=True)
    back = EvalReport.read_csv(tmp_path / "long.csv", K=3, support_size=5)
    np.testing.assert_array_equal(back.dataset["ssim"].values, report.dataset["ssim"].values)
    assert "mean ssim" in report.summary()


def test_eval_report_csv_support_ids(tmp_path, rng):
    report = EvalReport(rng.uniform(10, 30, (4, 2)), rng.uniform(0, 1, (4, 2)), [0, 0, 1, 1],
                        [0, 1, 0, 1], K=1, support_size=5, mismatched=True,
                        support_object_id=[1, 1, 0, 0])
    report.to_csv(tmp_path / "long.csv", per_trajectory=True)
    header = (tmp_path / "long.csv").read_text().splitlines()[0]
    assert header == "object_id,support_object_id,index,time,psnr,ssim"
    back = EvalReport.read_csv(tmp_path / "long.csv")
    np.testing.assert_array_equal(back.dataset["support_object_id"].values, [1, 1, 0, 0])
    assert back.dataset.attrs["mismatched"] == 1


def test_paired_comparison(rng):
    ssim_a = rng.uniform(0.5, 0.6, (10, 3))
    a = EvalReport(ssim_a, ssim_a, np.repeat([0, 1], 5), np.tile(range(5), 2), 1, 5)
    b = EvalReport(ssim_a - 0.1, ssim_a - 0.1 + rng.normal(0, 0.01, (10, 3)), np.repeat([0, 1], 5),
                   np.tile(range(5), 2), 1, 5)
    result = paired_comparison(a, b)
    assert result["n"] == 10
    assert result["diff"] == pytest.approx(0.1, abs=0.01)
    assert result["p"] < 0.05


def test_separation_degenerate():
    intra, inter, silhouette = separation_statistics(np.zeros((6, 3)), [0, 0, 1, 1, 2, 2])
    assert (intra, inter, silhouette) == (0.0, 0.0, 0.0)


def test_separation_ordering_invariant(rng):
    points = rng.normal(size=(9, 4))
    labels = np.repeat([0, 1, 2], 3)
    perm = rng.permutation(9)
    a = separation_statistics(points, labels)
    b = separation_statistics(points[perm], labels[perm])
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_separation_clusters(rng):
    centers = np.array([[0, 0], [10, 0], [0, 10]])
    points = np.repeat(centers, 4, axis=0) + rng.normal(0, 0.1, (12, 2))
    intra, inter, silhouette = separation_statistics(points, np.repeat([0, 1, 2], 4))
    assert inter / intra > 10 and silhouette > 0.9


def test_embedding_separation(eval_model, tiny_dataset, other_dataset):
    stats = embedding_separation(eval_model, [tiny_dataset, other_dataset], draws=3)
    assert list(stats.embeddings.columns) == ["object_id", "draw", "c0", "c1", "c2"]
    assert len(stats.embeddings) == 6
    assert stats.intra >= 0 and stats.inter >= 0 and -1 <= stats.silhouette <= 1
    table = embedding_projection_table(stats)
    assert list(table.columns) == ["object_id", "draw", "x", "y"]
    assert "silhouette" in stats.summary()


def test_embedding_separation_insufficient(eval_model, tiny_dataset, other_dataset):
    with pytest.raises(MetricError):
        embedding_separation(eval_model, [tiny_dataset, other_dataset], draws=1)
    with pytest.raises(MetricError):
        embedding_separation(eval_model, [tiny_dataset])


def test_pca_line():
    t = np.linspace(-1, 1, 20)
    points = np.stack([t, 2 * t, -t], axis=1) + 3
    projection = pca_project(points)
    assert np.all(np.abs(projection.coordinates[:, 1]) < 1e-6)


def test_pca_two_dims_preserves_distances(rng):
    points = rng.normal(size=(15, 2))
    projection = pca_project(points)
    np.testing.assert_allclose(pdist(projection.coordinates), pdist(points), atol=1e-10)


def test_pca_explained_variance_oracle(rng):
    points = rng.normal(size=(50, 6)) @ rng.normal(size=(6, 6))
    projection = pca_project(points)
    centered = points - points.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    np.testing.assert_allclose(projection.explained_variance, singular[:2] ** 2 / 49, rtol=1e-6)


def test_pca_sign_convention(rng):
    points = rng.normal(size=(10, 3))
    components = pca_project(points).components
    for row in components:
        assert row[np.argmax(np.abs(row))] > 0
    flipped = pca_project(-points).components
    np.testing.assert_allclose(np.abs(flipped), np.abs(components), atol=1e-10)


def test_pca_matches_sklearn_up_to_sign(rng):
    points = rng.normal(size=(30, 5)) * [3, 2, 1, 0.5, 0.1]
    projection = pca_project(points, dims=3)
    reference = PCA(n_components=3).fit_transform(points)
    np.testing.assert_allclose(np.abs(projection.coordinates), np.abs(reference), atol=1e-10)


def test_pca_rank_deficient():
    projection = pca_project(np.array([[1.0], [2.0], [4.0]]), dims=2)
    assert projection.coordinates.shape == (3, 2)
    np.testing.assert_array_equal(projection.coordinates[:, 1], 0.0)


def test_pca_too_few_samples():
    with pytest.raises(MetricError):
        pca_project(np.zeros((1, 3)), dims=2)
