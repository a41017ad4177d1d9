from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import ndimage

from sam_peft import interactive
from sam_peft.errors import DataError, ShapeError
from sam_peft.interactive import (
    Correction,
    TrainConfig,
    evaluate_interactive,
    interactive_training_step,
    sample_correction,
    sample_initial_prompt,
)
from sam_peft.optim import Adam
from sam_peft.stubs import EmptyModel, OracleModel
from sam_peft.synth import GenSpec, Sample, load, normalise, render
from sam_peft.tensor import Tensor

from .conftest import TinyFactory

Array = np.ndarray[Any, Any]


@pytest.fixture
def square() -> Array:
    """A 5x7 object inside a 16x16 frame."""
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:9, 3:10] = True
    return mask


def _samples_64(n: int) -> list[Sample]:
    spec = GenSpec(image_size=64, min_instances=2, max_instances=3, max_radius=8.0, seed=3)
    out = []
    for i in range(n):
        image, labels = render(spec, "train", i)
        out.append(Sample(f"train_{i:04d}", Tensor(normalise(image)), labels))
    return out


def test_train_config_defaults() -> None:
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.objects_per_image, cfg.correction_iterations) == (2, 25, 7)
    assert cfg.lr == 1e-5
    assert TrainConfig.resource_efficient().objects_per_image == 5
    assert TrainConfig.resource_efficient(objects_per_image=3).objects_per_image == 3


@pytest.mark.parametrize("field", ["batch_size", "objects_per_image", "max_epochs"])
def test_train_config_rejects_non_positive(field: str) -> None:
    with pytest.raises(ValidationError):
        TrainConfig.model_validate({field: 0})


def test_eval_point_is_the_deepest_pixel(square: Array) -> None:
    prompts = sample_initial_prompt(square, "point", "eval", np.random.default_rng(0))
    assert prompts.positive_points == ((6, 5),)
    assert prompts.box is None


def test_eval_box_is_tight(square: Array) -> None:
    prompts = sample_initial_prompt(square, "box", "eval", np.random.default_rng(0))
    assert prompts.box == (4, 3, 8, 9)
    assert not prompts.positive_points


def test_train_prompts_stay_on_the_object(square: Array) -> None:
    rng = np.random.default_rng(1)
    for _ in range(50):
        (point,) = sample_initial_prompt(square, "point", "train", rng).positive_points
        assert square[point]
        box = sample_initial_prompt(square, "box", "train", rng).box
        assert box is not None
        r0, c0, r1, c1 = box
        assert r0 <= 4 and c0 <= 3 and r1 >= 8 and c1 >= 9
        assert r0 >= 0 and c0 >= 0 and r1 <= 15 and c1 <= 15


def test_empty_mask_has_no_prompt() -> None:
    with pytest.raises(DataError, match="empty mask"):
        sample_initial_prompt(np.zeros((4, 4), dtype=bool), "point", "eval", np.random.default_rng(0))


def test_exact_prediction_needs_no_correction(square: Array) -> None:
    assert sample_correction(square, square, np.random.default_rng(0)) is None


def test_correction_polarity(square: Array) -> None:
    rng = np.random.default_rng(2)
    missed = square.copy()
    missed[4:9, 3:6] = False
    fix = sample_correction(missed, square, rng)
    assert fix is not None and fix.positive
    assert square[fix.point] and not missed[fix.point]

    spurious = square.copy()
    spurious[12:15, 12:15] = True
    fix = sample_correction(spurious, square, rng)
    assert fix is not None and not fix.positive
    assert spurious[fix.point] and not square[fix.point]


def test_correction_uses_the_largest_error_component(square: Array) -> None:
    pred = square.copy()
    pred[0, 0] = True
    pred[11:15, 11:15] = True
    for seed in range(10):
        fix = sample_correction(pred, square, np.random.default_rng(seed))
        assert fix is not None
        r, c = fix.point
        assert 11 <= r < 15 and 11 <= c < 15


def _polarity_case(seed: int) -> tuple[Array, Array]:
    """A synthetic object and a prediction damaged by a shift, an extra block and a hole."""
    rng = np.random.default_rng(seed)
    spec = GenSpec(image_size=64, min_instances=1, max_instances=4, max_radius=10.0, seed=seed)
    _, labels = render(spec, "test", 0)
    ids = [int(i) for i in np.unique(labels) if i != 0]
    truth = labels == ids[int(rng.integers(len(ids)))]
    pred = np.roll(truth, tuple(int(v) for v in rng.integers(-3, 4, size=2)), axis=(0, 1))
    r, c = (int(v) for v in rng.integers(0, 56, size=2))
    pred[r : r + int(rng.integers(1, 9)), c : c + int(rng.integers(1, 9))] = True
    r, c = (int(v) for v in rng.integers(0, 56, size=2))
    pred[r : r + int(rng.integers(1, 9)), c : c + int(rng.integers(1, 9))] = False
    return pred, truth


@pytest.mark.parametrize("seed", range(100))
def test_corrections_land_in_the_largest_error_component(seed: int) -> None:
    pred, truth = _polarity_case(seed)
    missed, spurious = truth & ~pred, pred & ~truth
    rng = np.random.default_rng(seed)
    for _ in range(5):
        fix = sample_correction(pred, truth, rng)
        if fix is None:
            assert not missed.any() and not spurious.any()
            continue
        errors = missed if missed.sum() >= spurious.sum() else spurious
        assert fix.positive == (errors is missed)
        if fix.positive:
            assert truth[fix.point] and not pred[fix.point]
        else:
            assert pred[fix.point] and not truth[fix.point]
        components, _ = ndimage.label(errors, structure=ndimage.generate_binary_structure(2, 1))
        sizes = np.bincount(components.reshape(-1))[1:]
        assert sizes[components[fix.point] - 1] == sizes.max()


def test_correction_shape_mismatch(square: Array) -> None:
    with pytest.raises(ShapeError):
        sample_correction(square, square[:8], np.random.default_rng(0))


def test_oracle_scores_one_at_every_iteration(instance_data: Path) -> None:
    samples = load(instance_data, "test")
    model = OracleModel(samples)
    for start in ("point", "box"):
        result = evaluate_interactive(model, samples, start, seed=1)
        assert result.traces
        assert sum(len(s.object_ids) for s in samples) == len(result.traces)
        for trace in result.traces:
            assert len(trace.entries) == 8
            assert trace.metrics == [1.0] * 8
            assert all(e.added is None for e in trace.entries)
        key = "ip" if start == "point" else "ib"
        assert result.aggregates == {start: 1.0, key: 1.0}


def test_empty_model_scores_zero(instance_data: Path) -> None:
    samples = load(instance_data, "test")
    result = evaluate_interactive(EmptyModel(128), samples, "box", metric="dice", iterations=2)
    assert all(t.metrics == [0.0, 0.0, 0.0] for t in result.traces)
    added = result.traces[0].entries[1].added
    assert added is not None and added.positive


def test_evaluation_needs_objects() -> None:
    blank = Sample("blank", Tensor(np.zeros((8, 8, 1), dtype=np.float32)), np.zeros((8, 8), dtype=np.uint32))
    with pytest.raises(DataError, match="no annotated objects"):
        evaluate_interactive(EmptyModel(8), [blank], "point")


def test_evaluation_is_reproducible(tiny_model: TinyFactory) -> None:
    samples = _samples_64(1)
    model = tiny_model()
    a = evaluate_interactive(model, samples, "point", seed=5, iterations=2)
    b = evaluate_interactive(model, samples, "point", seed=5, iterations=2)
    assert [t.metrics for t in a.traces] == [t.metrics for t in b.traces]
    assert model.training


def test_training_step_updates_parameters(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    before = model.mask_decoder.mask_token.data.copy()
    head_before = model.instance_head.out.weight.data.copy()
    optimizer = Adam(model.parameters(), lr=1e-3)
    cfg = TrainConfig(objects_per_image=2, correction_iterations=1)
    loss = interactive_training_step(
        model, _samples_64(2), cfg, optimizer, np.random.default_rng(0), train_instance_head=True
    )
    assert np.isfinite(loss) and loss > 0
    assert not np.array_equal(model.mask_decoder.mask_token.data, before)
    assert not np.array_equal(model.instance_head.out.weight.data, head_before)
    assert all(p.grad is None for p in model.parameters())


def test_training_step_without_objects_is_a_no_op(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    blank = Sample("blank", Tensor(np.zeros((64, 64, 1), dtype=np.float32)), np.zeros((64, 64), dtype=np.uint32))
    optimizer = Adam(model.parameters(), lr=1e-3)
    before = model.mask_decoder.mask_token.data.copy()
    assert interactive_training_step(model, [blank], TrainConfig(), optimizer, np.random.default_rng(0)) == 0.0
    np.testing.assert_array_equal(model.mask_decoder.mask_token.data, before)


def test_oracle_training_step_has_nothing_to_learn(
    instance_data: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    samples = load(instance_data, "train")
    corrections: list[Correction | None] = []

    def recording(pred: Array, truth: Array, rng: np.random.Generator) -> Correction | None:
        fix = sample_correction(pred, truth, rng)
        corrections.append(fix)
        return fix

    monkeypatch.setattr(interactive, "sample_correction", recording)
    cfg = TrainConfig(objects_per_image=3, correction_iterations=3)
    loss = interactive_training_step(OracleModel(samples), samples, cfg, None, np.random.default_rng(0))
    assert abs(loss) < 1e-4
    n_objects = sum(min(len(s.object_ids), 3) for s in samples)
    assert len(corrections) == 3 * n_objects
    assert all(fix is None for fix in corrections)


def test_training_loss_descends_on_one_image(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    batch = _samples_64(1)
    optimizer = Adam(model.parameters(), lr=1e-3)
    cfg = TrainConfig(objects_per_image=3, correction_iterations=0)
    # Same seed every step: the same objects and prompts each time.
    losses = [
        interactive_training_step(model, batch, cfg, optimizer, np.random.default_rng(0)) for _ in range(50)
    ]
    assert np.isfinite(losses).all()
    assert losses[-1] < losses[0]
