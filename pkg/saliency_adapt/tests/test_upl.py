from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from saliency_adapt.core.config_manager import AugmentConfig
from saliency_adapt.core.errors import InvalidArgumentError, PseudoLabelError
from saliency_adapt.core.imaging import GrayMap, RgbImage
from saliency_adapt.pipeline.augment import apply, build_augmentation_set, invert
from saliency_adapt.pipeline.predictor import SaliencyPredictor, init_params
from saliency_adapt.pipeline.upl import (
    PseudoLabelRecord,
    VarianceMap,
    WeightMap,
    refresh_pseudo_labels,
    reweight,
    select_targets,
    uncertainty_score,
    variance_map,
    write_pseudo_audit,
)

SMALL_AUGMENT = AugmentConfig(scale_dims=(12, 12))


class ConstantPredictor:
    def __init__(self, value: float) -> None:
        self.value = value

    def predict(self, image: RgbImage) -> GrayMap:
        return GrayMap.full(image.height, image.width, self.value)


class ChannelMeanPredictor:
    """Commutes exactly with horizontal flips."""

    def predict(self, image: RgbImage) -> GrayMap:
        return GrayMap(image.pixels.mean(axis=2) / 255.0)


class HashedNoisePredictor:
    """Deterministic per-image noise so every augmentation disagrees."""

    def predict(self, image: RgbImage) -> GrayMap:
        digest = hashlib.sha256(image.pixels.tobytes()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return GrayMap(rng.uniform(size=image.dims))


class FailingPredictor:
    def predict(self, image: RgbImage) -> GrayMap:
        raise RuntimeError("predictor exploded")


def target_pool(n: int, dims: tuple[int, int] = (8, 8), seed: int = 0) -> dict[str, RgbImage]:
    rng = np.random.default_rng(seed)
    return {
        f"target_{i:05d}": RgbImage(rng.integers(0, 256, size=dims + (3,), dtype=np.uint8))
        for i in range(n)
    }


def make_record(target_id: str, score: float, foreground: int) -> PseudoLabelRecord:
    label = np.zeros(100)
    label[:foreground] = 1.0
    variance = VarianceMap(np.full((10, 10), score))
    return PseudoLabelRecord(
        target_id=target_id,
        pseudo_label=GrayMap(label.reshape(10, 10)),
        variance=variance,
        score=score,
        weights=reweight(variance, 20.0),
    )


def test_variance_examples() -> None:
    same = [GrayMap.full(3, 3, 0.4)] * 4
    assert variance_map(same).values.max() <= 1e-20

    split = [GrayMap.full(2, 2, 0.0), GrayMap.full(2, 2, 1.0)]
    assert np.allclose(variance_map(split).values, 0.25)

    three = [GrayMap.full(2, 2, v) for v in (0.0, 0.5, 1.0)]
    assert np.allclose(variance_map(three).values, 1.0 / 6.0)


def test_variance_input_validation() -> None:
    with pytest.raises(InvalidArgumentError):
        variance_map([GrayMap.full(2, 2, 0.5)])
    with pytest.raises(InvalidArgumentError):
        variance_map([GrayMap.full(2, 2, 0.5), GrayMap.full(2, 3, 0.5)])


def test_score_examples() -> None:
    assert uncertainty_score(VarianceMap(np.zeros((4, 4)))) == 0.0
    assert uncertainty_score(VarianceMap(np.full((4, 4), 0.25))) == 0.25
    half = np.zeros((2, 2))
    half[0] = 0.2
    assert uncertainty_score(VarianceMap(half)) == pytest.approx(0.1)


def test_reweight_examples() -> None:
    assert reweight(VarianceMap(np.zeros((2, 2))), 20.0).values.tolist() == [[1.0, 1.0], [1.0, 1.0]]
    assert reweight(VarianceMap(np.full((1, 1), 0.05)), 20.0).values[0, 0] == pytest.approx(math.exp(-1))
    assert reweight(VarianceMap(np.full((1, 1), 0.25)), 20.0).values[0, 0] == pytest.approx(math.exp(-5))
    with pytest.raises(InvalidArgumentError):
        reweight(VarianceMap(np.zeros((1, 1))), 0.0)


@pytest.mark.parametrize("trial", range(50))
def test_statistics_match_straight_line_oracle(trial: int) -> None:
    rng = np.random.default_rng(trial)
    n = int(rng.integers(2, 5))
    preds = [GrayMap(rng.uniform(size=(16, 16))) for _ in range(n)]

    expected_var = np.zeros((16, 16))
    for y in range(16):
        for x in range(16):
            values = [pred.values[y, x] for pred in preds]
            mean = sum(values) / n
            expected_var[y, x] = sum((v - mean) ** 2 for v in values) / n
    variance = variance_map(preds)

    assert np.abs(variance.values - expected_var).max() <= 1e-12
    assert abs(uncertainty_score(variance) - expected_var.sum() / 256) <= 1e-12
    assert np.abs(reweight(variance, 20.0).values - np.exp(-20.0 * expected_var)).max() <= 1e-12


def test_selection_examples() -> None:
    records = [make_record("a", 0.20, 30), make_record("b", 0.01, 30), make_record("c", 0.05, 30)]

    assert not any(r.selected for r in select_targets(records, 0.0))
    assert all(r.selected for r in select_targets(records, 1.0))
    third = select_targets(records, 1.0 / 3.0)
    assert [r.target_id for r in third if r.selected] == ["b"]
    assert [r.target_id for r in third] == ["a", "b", "c"]


def test_selection_skips_degenerate_pseudo_labels() -> None:
    records = [
        make_record("empty", 0.0, 0),
        make_record("full", 0.0, 100),
        make_record("ok", 0.2, 40),
        make_record("also_ok", 0.1, 60),
    ]
    chosen = [r.target_id for r in select_targets(records, 0.5) if r.selected]
    assert chosen == ["ok", "also_ok"]

    everything = select_targets(records, 1.0)
    assert sum(r.selected for r in everything) == 2


def test_selection_ties_break_by_id() -> None:
    records = [make_record("b", 0.1, 50), make_record("a", 0.1, 50), make_record("c", 0.1, 50)]
    assert [r.target_id for r in select_targets(records, 0.34) if r.selected] == ["a"]


def test_selection_disabled_takes_first_ids_without_filter() -> None:
    records = [make_record("c", 0.0, 50), make_record("a", 0.25, 0), make_record("b", 0.2, 100)]
    chosen = [r.target_id for r in select_targets(records, 0.67, enabled=False) if r.selected]
    assert chosen == ["a", "b"]


def test_selection_quota_does_not_round_down_products() -> None:
    records = [make_record(f"t{i:03d}", i / 2000, 50) for i in range(300)]
    assert sum(r.selected for r in select_targets(records, 0.6)) == 180


def test_constant_predictor_has_no_uncertainty() -> None:
    images = target_pool(3)
    aug_sets = build_augmentation_set(SMALL_AUGMENT, list(images), seed=0)
    records = refresh_pseudo_labels(ConstantPredictor(0.3), images, aug_sets, 20.0, 0.0)

    for record in records:
        assert record.score <= 1e-20
        assert record.variance.values.max() <= 1e-20
        assert np.all(record.weights.values == 1.0)
        assert np.all(record.pseudo_label.values == 0.3)


def test_flip_equivariant_predictor_has_no_uncertainty() -> None:
    images = target_pool(2, dims=(6, 9))
    aug_sets = build_augmentation_set(AugmentConfig(scale=False, fda=False), list(images), seed=0)
    records = refresh_pseudo_labels(ChannelMeanPredictor(), images, aug_sets, 20.0, 0.0)

    assert all(record.score == 0.0 for record in records)


def test_refresh_matches_manual_computation() -> None:
    images = target_pool(4)
    aug_sets = build_augmentation_set(SMALL_AUGMENT, list(images), seed=3)
    predictor = HashedNoisePredictor()
    records = refresh_pseudo_labels(predictor, images, aug_sets, 20.0, 0.5, degen_lo=0.0, degen_hi=1.0)

    for record in records:
        image = images[record.target_id]
        preds = [
            invert(spec, predictor.predict(apply(spec, image, images)), image.dims).values
            for spec in aug_sets[record.target_id]
        ]
        mean = sum(preds) / len(preds)
        expected = sum((p - mean) ** 2 for p in preds) / len(preds)
        assert np.abs(record.variance.values - expected).max() <= 1e-12
        assert np.array_equal(record.pseudo_label.values, preds[0])
        assert abs(record.score - float(expected.mean())) <= 1e-12
    assert sum(record.selected for record in records) == 2
    selected_scores = sorted(r.score for r in records if r.selected)
    rejected_scores = sorted(r.score for r in records if not r.selected)
    assert selected_scores[-1] <= rejected_scores[0]


def test_refresh_without_reweighting_uses_unit_weights() -> None:
    images = target_pool(2)
    aug_sets = build_augmentation_set(SMALL_AUGMENT, list(images), seed=0)
    records = refresh_pseudo_labels(HashedNoisePredictor(), images, aug_sets, 20.0, 1.0, reweighting=False)

    assert all(np.all(record.weights.values == 1.0) for record in records)
    assert any(record.score > 0 for record in records)


def test_refresh_leaves_predictor_untouched() -> None:
    predictor = SaliencyPredictor(init_params(0))
    before = predictor.checksum
    images = target_pool(2)
    refresh_pseudo_labels(predictor, images, build_augmentation_set(SMALL_AUGMENT, list(images), 0), 20.0, 1.0)

    assert predictor.checksum == before


def test_refresh_names_the_failing_target() -> None:
    images = target_pool(2)
    aug_sets = build_augmentation_set(SMALL_AUGMENT, list(images), seed=0)
    with pytest.raises(PseudoLabelError) as excinfo:
        refresh_pseudo_labels(FailingPredictor(), images, aug_sets, 20.0, 1.0)
    assert excinfo.value.target_id == "target_00000"


def test_write_pseudo_audit(tmp_path: Path) -> None:
    record = make_record("target_00007", 0.05, 30)
    write_pseudo_audit([record], tmp_path)

    for suffix in ("_label.png", "_variance.png", "_weight.png", ".json"):
        assert (tmp_path / f"target_00007{suffix}").exists()
    sidecar = json.loads((tmp_path / "target_00007.json").read_text(encoding="utf-8"))
    assert sidecar["score"] == 0.05
    assert sidecar["foreground_fraction"] == 0.3


def test_weight_map_bounds() -> None:
    assert np.all(WeightMap.ones(2, 3).values == 1.0)
    with pytest.raises(InvalidArgumentError):
        WeightMap(np.zeros((2, 2)))
