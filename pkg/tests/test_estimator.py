import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from embedmask.datamodel import DatasetSplit
from embedmask.estimator import ReasoningSegmenter
from embedmask.validation import check_image, check_queries, check_samples

from helpers import TINY, random_sample

TRAIN = [random_sample(f"s{i}", i, n_masks=1 + i % 2) for i in range(4)]


def _est(**kw):
    params = dict(model_config=dict(TINY), total_iters=2, finetune_iters=1, warmup_iters=1,
                  batch_per_step=2, grad_accum_steps=1)
    params.update(kw)
    return ReasoningSegmenter(**params)


def test_params_round_trip():
    est = _est(lr=1e-3)
    params = est.get_params()
    assert params["lr"] == 1e-3 and params["model_config"]["d_model"] == 32
    cloned = clone(est)
    assert cloned.get_params() == params
    est.set_params(seed=5)
    assert est.seed == 5


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        _est().predict(TRAIN)


def test_fit_predict_score_finetune():
    est = _est().fit(TRAIN)
    assert est.n_iter_ == 2 and len(est.history_) == 2
    preds = est.predict(TRAIN[:2])
    assert len(preds) == 2
    assert all(m.bits.shape == (16, 16) for p in preds for m in p.masks)
    pairs = est.predict([(s.image.pixels, s.instruction) for s in TRAIN[:2]])
    assert [p.text for p in pairs] == [p.text for p in preds]
    assert 0.0 <= est.score(TRAIN) <= 1.0
    est.finetune([random_sample("r", 9, kind="reasoning")])
    assert est.n_iter_ == 1


def test_fit_is_deterministic():
    a = _est().fit(TRAIN).history_
    b = _est().fit(TRAIN).history_
    assert a == b


def test_save_load(tmp_path):
    est = _est().fit(TRAIN)
    est.save(tmp_path / "ck")
    back = ReasoningSegmenter.load(tmp_path / "ck", max_new_tokens=est.max_new_tokens)
    assert [p.text for p in back.predict(TRAIN)] == [p.text for p in est.predict(TRAIN)]


def test_check_samples():
    assert check_samples(DatasetSplit("train", TRAIN)) == TRAIN
    with pytest.raises(TypeError):
        check_samples(TRAIN[0])
    with pytest.raises(TypeError):
        check_samples([1, 2])
    with pytest.raises(ValueError):
        check_samples([])
    with pytest.raises(ValueError):
        check_samples([random_sample("v", 1, n_masks=0)], require_masks=True)


def test_check_image_and_queries():
    img = check_image(np.zeros((16, 16, 3)), (16, 16))
    assert img.height == 16
    with pytest.raises(ValueError):
        check_image(np.zeros((8, 16, 3)), (16, 16))
    with pytest.raises(TypeError):
        check_queries([42])
    with pytest.raises(ValueError):
        check_queries([(np.zeros((16, 16, 3)), "  ")])
