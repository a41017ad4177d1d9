from __future__ import annotations

from typing import Any

import numpy as np
import pytest

from sam_peft import ops
from sam_peft.efficiency import count_params, param_seq_ratio, probe_prompts
from sam_peft.errors import ConfigError
from sam_peft.gradcheck import grad_check
from sam_peft.losses import mask_loss
from sam_peft.nn import Linear, Parameter
from sam_peft.optim import Adam
from sam_peft.peft import (
    AdaptFormerModule,
    FactStore,
    FusedQkvLora,
    LoraAdapter,
    PeftConfig,
    adaptformer_forward,
    apply_peft,
    export_qlora,
    fact_forward,
    lora_forward,
    merge_lora,
    merge_lora_into,
)
from sam_peft.quant import QuantizedLinear
from sam_peft.samlite import SamLite, build_model
from sam_peft.tensor import Tensor, backward, no_grad
from sam_peft.vit import Block, VitConfig

from .conftest import TinyFactory

F64 = np.dtype(np.float64)

# Encoder-side trainable counts on the ViT-B shaped preset.
VIT_B_DELTAS: list[tuple[dict[str, Any], int]] = [
    ({"method": "full_ft"}, 89_578_240),
    ({"method": "late_ft", "late_fraction": 0.5}, 42_527_232),
    ({"method": "attn_tune"}, 28_348_416),
    ({"method": "late_lora", "lora_scope": "all", "late_fraction": 0.5}, 2_359_296),
    ({"method": "adaptformer", "alpha": "learned"}, 1_189_644),
    ({"method": "lora", "rank": 32, "lora_scope": "classic"}, 1_179_648),
    ({"method": "qlora", "rank": 32}, 1_179_648),
    ({"method": "ssf"}, 202_752),
    ({"method": "bias_tune"}, 83_712),
    ({"method": "ln_tune"}, 37_888),
    ({"method": "fact", "rank": 16}, 30_720),
    ({"method": "freeze_encoder"}, 0),
]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(99)


def _outputs(model: SamLite, image: np.ndarray[Any, Any]) -> tuple[np.ndarray[Any, Any], np.ndarray[Any, Any]]:
    prompts, _ = probe_prompts(model.image_size, model.image_size)
    with no_grad():
        features = model.encode(Tensor(image.astype(model.dtype)))
        return model.predict_mask(features, prompts).data, model.predict_instances(features).data


@pytest.mark.parametrize(("values", "expected"), VIT_B_DELTAS, ids=[v["method"] for v, _ in VIT_B_DELTAS])
def test_vit_b_encoder_trainable_counts(values: dict[str, Any], expected: int) -> None:
    model = build_model("vit-b-shape")
    report = count_params(model, PeftConfig.create(**values))
    assert report.encoder_trainable == expected


def test_vit_b_full_model_is_about_89_6m_in_the_encoder() -> None:
    report = count_params(build_model("vit-b-shape"), PeftConfig.create(method="freeze_encoder"))
    assert report.per_part["encoder"].total == 89_578_240
    assert report.trainable_params + report.frozen_params == report.total_params


def test_count_ordering_on_vit_b() -> None:
    """Encoder-side counts fall from full fine-tuning down to a frozen encoder (FacT r16 sits apart)."""
    counts = {
        (v["method"], v.get("lora_scope")): n for v, n in VIT_B_DELTAS if v["method"] not in ("fact", "qlora")
    }
    order = [
        counts[("full_ft", None)],
        counts[("late_ft", None)],
        counts[("attn_tune", None)],
        counts[("late_lora", "all")],
        max(counts[("lora", "classic")], counts[("adaptformer", None)]),
    ]
    assert order == sorted(order, reverse=True)
    tail = [counts[("ssf", None)], counts[("bias_tune", None)], counts[("ln_tune", None)], counts[("freeze_encoder", None)]]
    assert min(counts[("lora", "classic")], counts[("adaptformer", None)]) > tail[0]
    assert tail == sorted(tail, reverse=True)


def test_qlora_counts_weights_as_frozen_and_reports_bytes() -> None:
    model = build_model("vit-b-shape")
    report = count_params(model, PeftConfig.create(method="qlora"))
    base = count_params(build_model("vit-b-shape"), PeftConfig.create(method="freeze_encoder"))
    assert report.total_params == base.total_params + report.encoder_trainable
    # 4 linears per block, one byte per two weights plus an f32 scale per 64 weights
    weights = 12 * (768 * 2304 + 768 * 768 + 2 * 768 * 3072)
    assert report.quantized_bytes == weights // 2 + (weights // 64) * 4


def test_late_fraction_picks_blocks_from_the_end() -> None:
    assert list(PeftConfig.create(method="late_lora", late_fraction=0.08).adapted_blocks(12)) == [11]
    assert list(PeftConfig.create(method="late_lora", late_fraction=0.25).adapted_blocks(12)) == [9, 10, 11]
    assert len(PeftConfig.create(method="late_ft").adapted_blocks(12)) == 6
    assert len(PeftConfig.create(method="late_ft", late_fraction=1.0).adapted_blocks(12)) == 12


def test_defaults_follow_the_method() -> None:
    lora = PeftConfig.create(method="lora")
    assert (lora.rank, lora.alpha, lora.lora_scope) == (32, 1.0, "classic")
    fact = PeftConfig.create(method="fact")
    assert (fact.rank, fact.dropout) == (16, 0.1)
    adapt = PeftConfig.create(method="adaptformer")
    assert (adapt.projection_size, adapt.dropout) == (64, None)
    qlora = PeftConfig.create(method="qlora")
    assert (qlora.quant_bits, qlora.quant_block) == (4, 64)


@pytest.mark.parametrize(
    "values",
    [
        {"method": "lora", "projection_size": 64},
        {"method": "lora", "late_fraction": 0.5},
        {"method": "full_ft", "rank": 4},
        {"method": "late_lora", "late_fraction": 0.0},
        {"method": "fact", "alpha": "learned"},
        {"method": "qlora", "quant_bits": 8},
        {"method": "adaptformer", "dropout": 1.0},
    ],
)
def test_invalid_method_parameters(values: dict[str, Any]) -> None:
    with pytest.raises(ConfigError):
        PeftConfig.create(**values)


def test_unknown_method_suggests_a_name() -> None:
    with pytest.raises(ConfigError, match="did you mean 'late_lora'"):
        PeftConfig.create(method="late-lora")


def test_rank_must_be_below_width(tiny_model: TinyFactory) -> None:
    with pytest.raises(ConfigError, match="rank"):
        apply_peft(tiny_model(), PeftConfig.create(method="lora"))


def test_methods_do_not_stack(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    apply_peft(model, PeftConfig.create(method="ssf"))
    with pytest.raises(ConfigError, match="already adapted"):
        apply_peft(model, PeftConfig.create(method="bias_tune"))


def test_freeze_encoder_leaves_decoder_side_trainable(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    flags = apply_peft(model, PeftConfig.create(method="freeze_encoder"))
    assert not any(v for k, v in flags.items() if k.startswith("encoder."))
    assert all(v for k, v in flags.items() if not k.startswith("encoder."))


def test_ln_tune_only_unfreezes_norms(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    apply_peft(model, PeftConfig.create(method="ln_tune"))
    trainable = [p for name, p in model.named_parameters() if name.startswith("encoder.") and p.requires_grad]
    assert trainable
    assert all("norm" in p.tags for p in trainable)


def test_selective_tuning_needs_labelled_tensors(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    model.encoder.extra = Parameter(np.zeros(2, dtype=np.float32), ())  # type: ignore[attr-defined]
    with pytest.raises(ConfigError, match="no role tags"):
        apply_peft(model, PeftConfig.create(method="attn_tune"))


@pytest.mark.parametrize(
    "values",
    [
        {"method": "lora", "rank": 4},
        {"method": "lora", "rank": 4, "lora_scope": "all"},
        {"method": "late_lora", "rank": 4, "alpha": "learned"},
        {"method": "fact", "rank": 4},
        {"method": "adaptformer", "projection_size": 4, "dropout": 0.2},
        {"method": "ssf"},
    ],
)
def test_adapted_model_matches_base_at_init(values: dict[str, Any], tiny_model: TinyFactory, tiny_image: Any) -> None:
    image = tiny_image(3)
    base = _outputs(tiny_model(seed=5), image)
    model = tiny_model(seed=5)
    apply_peft(model, PeftConfig.create(**values))
    model.eval()
    adapted = _outputs(model, image)
    np.testing.assert_array_equal(adapted[0], base[0])
    np.testing.assert_array_equal(adapted[1], base[1])


def test_qlora_forward_stays_close_to_full_precision(tiny_model: TinyFactory, tiny_image: Any) -> None:
    image = tiny_image(4)
    base, _ = _outputs(tiny_model(seed=2), image)
    model = tiny_model(seed=2)
    apply_peft(model, PeftConfig.create(method="qlora", rank=4))
    quantized, _ = _outputs(model, image)
    rel = np.linalg.norm(quantized - base) / np.linalg.norm(base)
    assert rel < 0.05


def test_late_qlora_quantizes_everything_but_adapts_late_blocks(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    apply_peft(model, PeftConfig.create(method="late_qlora", rank=4, late_fraction=0.5))
    for block in model.encoder.blocks:
        assert isinstance(block.qkv, QuantizedLinear)
        assert isinstance(block.mlp_fc2, QuantizedLinear)
        assert (block.qkv.adapter is not None) == (block.index >= 2)


def test_lora_forward_equals_materialised_weight(rng: np.random.Generator) -> None:
    x = Tensor(rng.standard_normal((5, 8)))
    w = Tensor(rng.standard_normal((8, 6)))
    adapter = LoraAdapter(8, 6, 2, target="q", alpha=1.0, rng=rng, dtype=F64)
    adapter.B.data = rng.standard_normal((2, 6))
    dense = x.data @ (w.data + adapter.A.data @ adapter.B.data)
    np.testing.assert_allclose(lora_forward(x, w, adapter).data, dense, atol=1e-5)


def test_lora_with_zero_b_or_zero_alpha_is_the_frozen_layer(rng: np.random.Generator) -> None:
    x = Tensor(rng.standard_normal((5, 8)))
    w = Tensor(rng.standard_normal((8, 6)))
    fresh = LoraAdapter(8, 6, 2, target="v", rng=rng, dtype=F64)
    np.testing.assert_array_equal(lora_forward(x, w, fresh).data, (x @ w).data)
    muted = LoraAdapter(8, 6, 2, target="v", alpha=0.0, rng=rng, dtype=F64)
    muted.B.data = rng.standard_normal((2, 6))
    np.testing.assert_array_equal(lora_forward(x, w, muted).data, (x @ w).data)


def test_merge_of_zero_adapter_is_bit_exact(rng: np.random.Generator) -> None:
    w = rng.standard_normal((8, 24)).astype(np.float32)
    adapter = FusedQkvLora(8, 2, alpha=1.0, rng=rng, dtype=np.dtype(np.float32))
    np.testing.assert_array_equal(merge_lora(w, adapter), w)


def test_merged_weight_reproduces_adapter_forward(rng: np.random.Generator) -> None:
    w = Tensor(rng.standard_normal((8, 6)))
    adapter = LoraAdapter(8, 6, 3, target="attn_proj", alpha=0.5, rng=rng, dtype=F64)
    adapter.B.data = rng.standard_normal((3, 6))
    merged = merge_lora(w, adapter)
    for _ in range(16):
        x = Tensor(rng.standard_normal((4, 8)))
        diff = np.abs(x.data @ merged - lora_forward(x, w, adapter).data).max()
        assert diff < 1e-5


def test_merged_delta_has_rank_at_most_r(rng: np.random.Generator) -> None:
    w = rng.standard_normal((16, 48))
    adapter = FusedQkvLora(16, 3, alpha=1.0, rng=rng, dtype=F64)
    adapter.q.B.data = rng.standard_normal((3, 16))
    adapter.v.B.data = rng.standard_normal((3, 16))
    delta = merge_lora(w, adapter) - w
    singular = np.linalg.svd(adapter.q.delta_weight(), compute_uv=False)
    assert np.all(singular[3:] < 1e-6)
    # q and v slices each have rank 3; the fused delta at most 6
    assert np.all(np.linalg.svd(delta, compute_uv=False)[6:] < 1e-6)


def test_merge_lora_into_folds_every_adapter(tiny_model: TinyFactory, tiny_image: Any) -> None:
    model = tiny_model(dtype=np.float64)
    apply_peft(model, PeftConfig.create(method="lora", rank=4, lora_scope="all"))
    gen = np.random.default_rng(0)
    for _, module in model.named_modules():
        if isinstance(module, LoraAdapter):
            module.B.data = gen.standard_normal(module.B.shape) * 0.05
    image = tiny_image(1)
    before, _ = _outputs(model, image)
    merged = merge_lora_into(model)
    assert len(merged) == 4 * 4
    after, _ = _outputs(model, image)
    np.testing.assert_allclose(after, before, atol=1e-8)


def test_merge_refuses_quantized_weights(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    apply_peft(model, PeftConfig.create(method="qlora", rank=4))
    with pytest.raises(ConfigError, match="4-bit"):
        merge_lora_into(model)


def test_fact_with_zero_core_is_the_frozen_layer(rng: np.random.Generator) -> None:
    store = FactStore(8, 2, rng=rng, dtype=F64)
    store.register(0, "q")
    x = Tensor(rng.standard_normal((3, 8)))
    w = Tensor(rng.standard_normal((8, 8)))
    np.testing.assert_array_equal(fact_forward(x, w, store, 0, "q").data, (x @ w).data)


def test_fact_matches_dense_update_and_shares_factors(rng: np.random.Generator) -> None:
    store = FactStore(8, 2, rng=rng, dtype=F64)
    for block in (0, 1):
        store.register(block, "q").data = rng.standard_normal((2, 2))
    x = Tensor(rng.standard_normal((3, 8)))
    w = Tensor(rng.standard_normal((8, 8)))
    dense = x.data @ (w.data + store.delta_weight(0, "q"))
    np.testing.assert_allclose(fact_forward(x, w, store, 0, "q").data, dense, atol=1e-5)

    before = [store.delta_weight(b, "q") for b in (0, 1)]
    store.U.data = store.U.data + 0.1
    after = [store.delta_weight(b, "q") for b in (0, 1)]
    assert all(not np.allclose(a, b) for a, b in zip(before, after, strict=True))


def test_fact_missing_core(rng: np.random.Generator) -> None:
    store = FactStore(8, 2, rng=rng, dtype=F64)
    with pytest.raises(ConfigError, match="no FacT core"):
        store.delta(Tensor(np.ones((1, 8))), 3, "v")


def test_fact_store_is_shared_by_all_blocks(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    apply_peft(model, PeftConfig.create(method="fact", rank=4))
    store = model.encoder.fact
    assert isinstance(store, FactStore)
    assert len(store.sigmas) == 2 * len(model.encoder.blocks)
    names = [name for name, _ in model.named_parameters() if name.endswith((".U", ".V"))]
    assert names == ["encoder.fact.U", "encoder.fact.V"]


def test_adaptformer_with_zero_up_is_the_mlp(rng: np.random.Generator) -> None:
    mlp = Linear(8, 8, rng=rng, dtype=F64)
    module = AdaptFormerModule(8, 4, rng=rng, dtype=F64)
    x = Tensor(rng.standard_normal((5, 8)))
    np.testing.assert_array_equal(adaptformer_forward(x, mlp, module).data, mlp(x).data)


def test_adaptformer_gradients(rng: np.random.Generator) -> None:
    module = AdaptFormerModule(8, 4, alpha="learned", rng=rng, dtype=F64)
    module.up.weight.data = rng.standard_normal((4, 8))
    x = Tensor(rng.standard_normal((5, 8)))
    direction = Tensor(rng.standard_normal((5, 8)))
    params = [(name, p) for name, p in module.named_parameters()]
    result = grad_check(lambda: ops.sum(module(x) * direction), params)
    assert result.passed(1e-4), result.errors


def test_learned_alpha_stays_one_scalar(rng: np.random.Generator) -> None:
    module = AdaptFormerModule(8, 4, alpha="learned", rng=rng, dtype=F64)
    opt = Adam(module.parameters(), lr=1e-2)
    x = Tensor(rng.standard_normal((5, 8)))
    for _ in range(5):
        opt.zero_grad()
        backward(ops.mean(module(x) - 1.0) * 1.0)
        opt.step()
    assert module.alpha_param is not None
    assert module.alpha_param.shape == (1,)
    assert module.alpha_value != 1.0


def test_lora_attention_gradients(rng: np.random.Generator) -> None:
    cfg = VitConfig(image_size=32, patch_size=16, embed_dim=8, depth=1, heads=2, neck_dim=8)
    block = Block(cfg, 0, rng=rng, dtype=F64)
    for p in block.parameters():
        p.requires_grad = False
    adapter = FusedQkvLora(8, 2, alpha=1.0, rng=rng, dtype=F64)
    adapter.q.B.data = rng.standard_normal((2, 8)) * 0.1
    adapter.v.B.data = rng.standard_normal((2, 8)) * 0.1
    block.qkv.adapter = adapter
    x = Tensor(rng.standard_normal((4, 8)))
    direction = Tensor(rng.standard_normal((4, 8)))
    params = [
        ("q.A", adapter.q.A),
        ("q.B", adapter.q.B),
        ("v.A", adapter.v.A),
        ("v.B", adapter.v.B),
        ("qkv.weight", block.qkv.weight),
    ]
    result = grad_check(lambda: ops.sum(block(x) * direction), params)
    assert result.passed(1e-4), result.errors
    assert result.errors["qkv.weight"] == 0.0


@pytest.mark.parametrize("method", ["qlora", "lora", "ssf", "bias_tune", "late_ft", "fact"])
def test_frozen_tensors_survive_training(method: str, tiny_model: TinyFactory, tiny_image: Any) -> None:
    model = tiny_model()
    values: dict[str, Any] = {"method": method}
    if method in ("qlora", "lora", "fact"):
        values["rank"] = 4
    apply_peft(model, PeftConfig.create(**values))
    frozen = {name: t.data.copy() for name, t in model.named_tensors() if not t.requires_grad}
    trainable = {name: t.data.copy() for name, t in model.named_tensors() if t.requires_grad}
    assert frozen
    opt = Adam(model.parameters(), lr=1e-2)
    prompts, target = probe_prompts(64, 64)
    image = Tensor(tiny_image(0).astype(np.float32))
    for _ in range(10):
        opt.zero_grad()
        loss = mask_loss(model.predict_mask(model.encode(image), prompts), target)
        backward(loss)
        opt.step()
    for name, t in model.named_tensors():
        if name in frozen:
            assert t.data.tobytes() == frozen[name].tobytes(), name
    assert any(not np.array_equal(t.data, trainable[n]) for n, t in model.named_tensors() if n in trainable)


def test_export_of_untrained_qlora_is_the_base_model(tiny_model: TinyFactory, tiny_image: Any) -> None:
    image = tiny_image(2)
    reference = _outputs(tiny_model(seed=1), image)
    adapted = tiny_model(seed=1)
    cfg = PeftConfig.create(method="qlora", rank=4)
    apply_peft(adapted, cfg)
    restored = tiny_model(seed=1)
    replaced = export_qlora(cfg, dict(adapted.named_tensors()), restored)
    assert len(replaced) == 4 * 4
    assert restored.peft is not None and restored.peft.method == "lora"
    out = _outputs(restored, image)
    np.testing.assert_array_equal(out[0], reference[0])
    np.testing.assert_array_equal(out[1], reference[1])


def test_export_then_merge_matches_merge_on_base(tiny_model: TinyFactory, tiny_image: Any) -> None:
    cfg = PeftConfig.create(method="late_qlora", rank=4, late_fraction=0.5)
    adapted = tiny_model(seed=3)
    apply_peft(adapted, cfg)
    gen = np.random.default_rng(8)
    for _, module in adapted.named_modules():
        if isinstance(module, LoraAdapter):
            module.B.data = (gen.standard_normal(module.B.shape) * 0.05).astype(np.float32)
    tensors = dict(adapted.named_tensors())

    exported = tiny_model(seed=3)
    export_qlora(cfg, tensors, exported)
    merge_lora_into(exported)

    direct = tiny_model(seed=3)
    apply_peft(direct, PeftConfig.create(method="late_lora", rank=4, late_fraction=0.5))
    own = dict(direct.named_tensors())
    for name, t in tensors.items():
        if ".adapter." in name:
            own[name].data = t.data.copy()
    merge_lora_into(direct)

    image = tiny_image(6)
    np.testing.assert_allclose(_outputs(exported, image)[0], _outputs(direct, image)[0], atol=1e-5)


def test_export_refuses_non_qlora(tiny_model: TinyFactory) -> None:
    with pytest.raises(ConfigError, match="only QLoRA"):
        export_qlora(PeftConfig.create(method="lora", rank=4), {}, tiny_model())


def test_export_rejects_unknown_adapter_tensors(tiny_model: TinyFactory) -> None:
    cfg = PeftConfig.create(method="qlora", rank=4)
    adapted = tiny_model()
    apply_peft(adapted, cfg)
    tensors = dict(adapted.named_tensors())
    tensors["encoder.blocks.0.qkv.adapter.k.A"] = Tensor(np.zeros((16, 4), dtype=np.float32))
    with pytest.raises(ConfigError, match="adapter/target mismatch"):
        export_qlora(cfg, tensors, tiny_model())


@pytest.mark.parametrize(
    ("params", "seq", "expected"), [(175e9, 2048, 8.54e7), (86e6, 4096, 2.1e4), (12345.0, 1, 12345.0)]
)
def test_param_seq_ratio(params: float, seq: int, expected: float) -> None:
    assert param_seq_ratio(params, seq) == pytest.approx(expected, rel=0.01)


def test_param_seq_ratio_needs_a_sequence() -> None:
    with pytest.raises(ConfigError):
        param_seq_ratio(1e6, 0)
