"""
Trained-model checks on a 2-object toy corpus.

Trains two models of 2000 steps (default and gamma=1e3 context weight), so expect several
minutes on one core. Run explicitly:

    pytest highlevel-checks/check_evf_training.py
"""

import logging

import numpy as np
import pytest
from scipy import stats

from evf.model import ModelConfig, SupportSet, flatten_frames
from evf.pushworld import generate_corpus
from evf.training import TrainConfig, load_train_datasets, sample_support_indices, train_loop

logging.basicConfig()
logging.getLogger("evf").setLevel(logging.INFO)
logging.captureWarnings(True)

logger = logging.getLogger("evf_check")
logger.setLevel(logging.DEBUG)

STEPS = 2000


@pytest.fixture(scope="module")
def toy_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return generate_corpus(root, seed=0, K_train=2, K_test=0, N=50, T=12)


@pytest.fixture(scope="module")
def toy_datasets(toy_manifest):
    return load_train_datasets(toy_manifest)


def _train(manifest, out_dir, **model_settings):
    cfg = TrainConfig(steps=STEPS, meta_batch_objects=2, seed=0)
    config = ModelConfig(**model_settings)
    logger.info("training %s for %d steps", config, STEPS)
    return train_loop(cfg, manifest, out_dir, model_config=config)


@pytest.fixture(scope="module")
def trained(toy_manifest, tmp_path_factory):
    return _train(toy_manifest, tmp_path_factory.mktemp("train"))


@pytest.fixture(scope="module")
def trained_strong_context_penalty(toy_manifest, tmp_path_factory):
    return _train(toy_manifest, tmp_path_factory.mktemp("train_gamma"), gamma=1e3)


def _contexts(model, dataset, support_dataset, seed=0):
    """posterior-mean context per trajectory of `dataset`, support drawn from `support_dataset`"""
    contexts = []
    for i in range(dataset.N):
        rng = np.random.default_rng([seed, dataset.object_id, i])
        exclude = [i] if support_dataset is dataset else []
        indices = sample_support_indices(support_dataset.N, 5, rng, exclude)
        support = SupportSet(flatten_frames(support_dataset.frames[indices]), dataset.object_id)
        contexts.append(model.context(support))
    return np.stack(contexts)


def _prediction_mse(model, dataset, support_dataset, horizon):
    """per-trajectory MSE of the zero-noise rollout"""
    cfg = model.config
    C = cfg.context_frames
    steps = C - 1 + horizon
    noise = np.zeros((dataset.N, steps, cfg.latent_dim))
    predicted = model.predict(dataset.frames[:, :C], dataset.actions[:, :steps],
                              _contexts(model, dataset, support_dataset), horizon, noise=noise)
    truth = flatten_frames(dataset.frames[:, C:C + horizon])
    return np.mean(np.square(predicted - truth), axis=(1, 2))


def test_toy_loss_reduction(trained):
    loss = trained.log["loss"]
    assert len(loss) == STEPS
    first, last = loss.iloc[:100].mean(), loss.iloc[-100:].mean()
    logger.info("loss %.4f over the first 100 steps, %.4f over the last 100", first, last)
    assert last <= 0.7 * first


def test_one_step_beats_copy_last_frame(trained, toy_datasets):
    model = trained.model
    C = model.config.context_frames
    predicted, copied = [], []
    for dataset in toy_datasets:
        predicted.append(_prediction_mse(model, dataset, dataset, horizon=1))
        last = flatten_frames(dataset.frames[:, C - 1])
        truth = flatten_frames(dataset.frames[:, C])
        copied.append(np.mean(np.square(last - truth), axis=1))
    predicted, copied = np.concatenate(predicted).mean(), np.concatenate(copied).mean()
    logger.info("one-step MSE %.5f, copy-last-frame MSE %.5f", predicted, copied)
    assert predicted < copied


def test_strong_context_penalty_ignores_support(trained_strong_context_penalty, toy_datasets):
    model = trained_strong_context_penalty.model
    horizon = model.config.predict_frames
    swapped = toy_datasets[::-1]
    matched = np.concatenate([
        _prediction_mse(model, d, d, horizon) for d in toy_datasets])
    mismatched = np.concatenate([
        _prediction_mse(model, d, s, horizon) for d, s in zip(toy_datasets, swapped)])
    gap = matched - mismatched
    test = stats.ttest_rel(matched, mismatched)
    logger.info("matched %.5f, mismatched %.5f, gap %.2e, p=%s", matched.mean(),
                mismatched.mean(), gap.mean(), test.pvalue)
    # identical rollouts give a zero gap and an undefined p-value
    assert np.isnan(test.pvalue) or test.pvalue > 0.05 or \
        abs(gap.mean()) < 1e-3 * matched.mean()
