import numpy as np
import pytest

from rangeudf.experiments import ToyConfig, run_ambiguity, toy_scenes
from rangeudf.scenes import make_ambiguity_pair
from rangeudf.training import loss_floor


def test_pair_floor_is_half_offset():
    pair = make_ambiguity_pair(0.05, n_queries=128)
    floor = loss_floor(pair.first.queries.off_surface.udf, pair.second.queries.off_surface.udf)
    assert floor == pytest.approx(0.025, abs=1e-6)


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["bundle_only", "idw"])
def test_bundle_functions_stay_on_floor(variant):
    # with q and (q - p_k) removed, both records present the same inputs:
    # no amount of training can bring the mean l1 under |d1 - d2| / 2
    res = run_ambiguity(variant, offset=0.05, steps=400, n_queries=256, eval_every=100)
    assert res.floor == pytest.approx(0.025, abs=1e-6)
    assert min(res.curve) >= 0.025 - 1e-3


@pytest.mark.slow
def test_full_model_separates_pair():
    res = run_ambiguity("full", offset=0.05, steps=2000, n_queries=256, tol=0.0025, eval_every=50)
    assert res.final_l1 < 0.1 * 0.05


def test_toy_splits_disjoint_and_reproducible():
    cfg = ToyConfig(n_train=2, n_test=2, n_on=300, n_off=300, density=3)
    tr, te = toy_scenes(cfg, "train"), toy_scenes(cfg, "test")
    assert tr[0].cloud.tobytes() != te[0].cloud.tobytes()
    again = toy_scenes(cfg, "train")
    assert all(a.cloud.tobytes() == b.cloud.tobytes() for a, b in zip(tr, again))
    assert all(np.asarray(s.cloud_labels).max() < 3 for s in tr + te)
