import numpy as np
import pytest

from ssmiqa.blocks import ConfigError, IqaModel, ModelConfig, Trainer, preset
from ssmiqa.styleprompt import (
    PromptBank,
    StyleAffine,
    attach_adapters,
    freeze_all_but_head,
    freeze_backbone,
    freeze_everything,
    fuse_prompts,
    inject_style,
    tunable_fraction,
)
from ssmiqa.tensor import Tensor, no_grad


def _bank(n, dim=6, seed=0):
    return PromptBank(np.random.default_rng(seed), dim, n)


def test_single_prompt_returned_verbatim():
    bank = _bank(1)
    f = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4, 6)))
    fused = fuse_prompts(f, bank)
    for b in range(2):
        np.testing.assert_array_equal(fused.data[b, 0, 0], bank.prompts.data[0])


def test_zero_weight_head_gives_uniform_mean():
    bank = _bank(4)
    bank.weight_head.w.data[:] = 0.0
    bank.weight_head.b.data[:] = 0.0
    f = Tensor(np.random.default_rng(2).normal(size=(1, 2, 2, 6)))
    fused = fuse_prompts(f, bank)
    np.testing.assert_allclose(fused.data[0, 0, 0], bank.prompts.data.mean(axis=0), atol=1e-15)


def test_fuse_matches_explicit_sum_oracle():
    bank = _bank(6, seed=3)
    rng = np.random.default_rng(4)
    f = rng.normal(size=(2, 3, 5, 6))
    fused = fuse_prompts(Tensor(f), bank).data
    # independent route: pool, head, softmax, accumulate prompt-by-prompt
    pooled = f.mean(axis=(1, 2))
    logits = pooled @ bank.weight_head.w.data + bank.weight_head.b.data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    w = e / e.sum(axis=1, keepdims=True)
    for b in range(2):
        expect = np.zeros(6)
        for s in range(6):
            expect += w[b, s] * bank.prompts.data[s]
        np.testing.assert_allclose(fused[b, 0, 0], expect, atol=1e-14)


def test_fusion_weights_are_probabilities():
    bank = _bank(6, seed=5)
    from ssmiqa.tensor import global_avg_pool, reshape, softmax

    rng = np.random.default_rng(6)
    for _ in range(20):
        f = Tensor(rng.normal(size=(3, 2, 2, 6)) * 50)
        pooled = reshape(global_avg_pool(f), (3, 6))
        w = softmax(bank.weight_head(pooled), axis=-1).data
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_inject_zero_heads_is_identity_bit_exact():
    rng = np.random.default_rng(7)
    aff = StyleAffine(rng, 6, 6)
    f = rng.normal(size=(2, 4, 4, 6))
    out = inject_style(Tensor(f), Tensor(rng.normal(size=(2, 1, 1, 6))), aff)
    np.testing.assert_array_equal(out.data, f)


def test_inject_zero_features_gives_beta():
    rng = np.random.default_rng(8)
    aff = StyleAffine(rng, 6, 6)
    aff.beta_head.w.data = rng.normal(size=(6, 6))
    fused = Tensor(rng.normal(size=(1, 1, 1, 6)))
    out = inject_style(Tensor(np.zeros((1, 3, 3, 6))), fused, aff)
    aligned = fused.data.reshape(6) @ aff.align.data + aff.align_b.data
    beta = aligned @ aff.beta_head.w.data
    for i in range(3):
        for j in range(3):
            np.testing.assert_allclose(out.data[0, i, j], beta, atol=1e-14)


def test_inject_matches_scalar_loop_oracle():
    rng = np.random.default_rng(9)
    aff = StyleAffine(rng, 6, 6)
    aff.gamma_head.w.data = rng.normal(size=(6, 6)) * 0.3
    aff.beta_head.w.data = rng.normal(size=(6, 6)) * 0.3
    f = rng.normal(size=(1, 3, 4, 6))
    fused = rng.normal(size=(1, 1, 1, 6))
    out = inject_style(Tensor(f), Tensor(fused), aff).data

    aligned = fused.reshape(6) @ aff.align.data + aff.align_b.data
    gamma = aligned @ aff.gamma_head.w.data + aff.gamma_head.b.data
    beta = aligned @ aff.beta_head.w.data + aff.beta_head.b.data
    expect = np.empty_like(f)
    for i in range(3):
        for j in range(4):
            for c in range(6):
                expect[0, i, j, c] = f[0, i, j, c] * (1.0 + gamma[c]) + beta[c]
    np.testing.assert_array_equal(out, expect)


def test_scale_covariance_of_injection():
    rng = np.random.default_rng(10)
    aff = StyleAffine(rng, 6, 6)
    aff.gamma_head.w.data = rng.normal(size=(6, 6)) * 0.2
    aff.beta_head.w.data = rng.normal(size=(6, 6)) * 0.2
    f = rng.normal(size=(1, 2, 2, 6))
    fused = Tensor(rng.normal(size=(1, 1, 1, 6)))
    alpha = 2.75
    out_scaled = inject_style(Tensor(alpha * f), fused, aff).data
    aligned = fused.data.reshape(6) @ aff.align.data + aff.align_b.data
    gamma = aligned @ aff.gamma_head.w.data
    beta = aligned @ aff.beta_head.w.data
    np.testing.assert_allclose(out_scaled, alpha * f * (1.0 + gamma) + beta, atol=1e-12)


def test_prompt_bank_validation():
    with pytest.raises(ConfigError):
        _bank(0)


# -- model-level behaviour ----------------------------------------------------

def _desk_model(seed=0, adapters=False):
    cfg = preset("desk")
    cfg.adapters = adapters
    return IqaModel(cfg, seed=seed)


def test_adapters_attach_non_destructively():
    rng = np.random.default_rng(11)
    img = rng.uniform(size=(2, 32, 32, 3))
    plain = _desk_model(seed=3)
    with no_grad():
        base_scores = plain(Tensor(img)).data.copy()
    attach_adapters(plain, seed=99)
    with no_grad():
        adapted = plain(Tensor(img)).data
    np.testing.assert_array_equal(base_scores, adapted)


def test_attach_twice_errors():
    m = _desk_model()
    attach_adapters(m)
    with pytest.raises(ConfigError):
        attach_adapters(m)


def test_freeze_requires_adapters():
    with pytest.raises(ConfigError):
        freeze_backbone(_desk_model())


def test_freeze_backbone_keeps_backbone_bytes():
    m = _desk_model(seed=4)
    attach_adapters(m, seed=5)
    freeze_backbone(m, tune_head=True)
    before = {n: t.data.copy() for n, t in m.named_params()}

    tr = Trainer(m, lr=5e-3, seed=0)
    rng = np.random.default_rng(6)
    imgs = rng.uniform(size=(4, 32, 32, 3))
    targets = rng.uniform(size=4)
    for _ in range(3):
        tr.train_step(imgs, targets)

    changed_adapter = False
    for n, t in m.named_params():
        if ".adapter." in n or n.startswith("head."):
            changed_adapter |= not np.array_equal(before[n], t.data)
        else:
            assert np.array_equal(before[n], t.data), f"backbone tensor {n} changed"
    assert changed_adapter


def test_tunable_fraction_values():
    m = _desk_model(seed=7)
    freeze_everything(m)
    assert tunable_fraction(m) == 0.0

    m2 = _desk_model(seed=8)
    attach_adapters(m2)
    freeze_backbone(m2, tune_head=False)
    frac = tunable_fraction(m2)
    adapter = sum(t.size for n, t in m2.named_params() if ".adapter." in n)
    total = sum(t.size for _, t in m2.named_params())
    assert frac == pytest.approx(adapter / total)

    m3 = _desk_model(seed=9)
    freeze_all_but_head(m3)
    head = sum(t.size for n, t in m3.named_params() if n.startswith("head."))
    assert tunable_fraction(m3) == pytest.approx(head / m3.param_count())


def test_desk_transfer_config_fraction_below_six_percent():
    cfg = ModelConfig(depths=(3, 3), embed_dims=(16, 32), windows=(4, 2), n_state=8,
                      head_hidden=16, chunk=16)
    m = IqaModel(cfg, seed=10)
    attach_adapters(m)
    freeze_backbone(m, tune_head=True)
    assert tunable_fraction(m) <= 0.06
