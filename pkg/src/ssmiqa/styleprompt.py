"""Style-prompt transfer adapters: prompt fusion and channel-wise injection.

A bank of N learnable 1x1xC prompt components is fused per input with
softmax weights predicted from pooled features; the fused prompt is aligned
to the stage width and turned into per-channel affine parameters applied as
f * (1 + gamma) + beta. Gamma/beta heads start at zero, so attaching
adapters to a trained backbone is bit-exact until they are tuned.
"""

from __future__ import annotations

import numpy as np

from .blocks import ConfigError, IqaModel, Linear, Tensor
from .tensor import conv1x1, global_avg_pool, matmul, reshape, softmax


class PromptBank:
    """N learnable prompt components plus the input-conditioned weight head."""

    def __init__(self, rng, dim: int, n_prompts: int, prompt_dim: int | None = None):
        if n_prompts < 1:
            raise ConfigError(f"need at least one prompt component, got {n_prompts}")
        self.n_prompts = n_prompts
        self.prompt_dim = prompt_dim if prompt_dim is not None else dim
        self.prompts = Tensor(rng.normal(0.0, 0.02, size=(n_prompts, self.prompt_dim)),
                              requires_grad=True)
        self.weight_head = Linear(rng, dim, n_prompts)

    def named_params(self, prefix):
        yield f"{prefix}.prompts", self.prompts
        yield from self.weight_head.named_params(f"{prefix}.weight_head")


def fuse_prompts(f: Tensor, bank: PromptBank) -> Tensor:
    """(B, H, W, C) -> fused prompt (B, 1, 1, C_p): softmax-weighted sum."""
    b = f.shape[0]
    pooled = reshape(global_avg_pool(f), (b, f.shape[-1]))
    weights = softmax(bank.weight_head(pooled), axis=-1)  # (B, N), rows sum to 1
    fused = matmul(weights, bank.prompts)  # (B, C_p)
    return reshape(fused, (b, 1, 1, bank.prompt_dim))


class StyleAffine:
    """Channel alignment plus zero-initialized gamma/beta heads."""

    def __init__(self, rng, prompt_dim: int, dim: int):
        self.align = Tensor(_conv_init(rng, prompt_dim, dim), requires_grad=True)
        self.align_b = Tensor(np.zeros(dim), requires_grad=True)
        self.gamma_head = Linear(rng, dim, dim, zero_init=True)
        self.beta_head = Linear(rng, dim, dim, zero_init=True)

    def named_params(self, prefix):
        yield f"{prefix}.align", self.align
        yield f"{prefix}.align_b", self.align_b
        yield from self.gamma_head.named_params(f"{prefix}.gamma_head")
        yield from self.beta_head.named_params(f"{prefix}.beta_head")


def _conv_init(rng, d_in, d_out):
    lim = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-lim, lim, size=(d_in, d_out))


def inject_style(f: Tensor, fused: Tensor, affine: StyleAffine) -> Tensor:
    """f * (1 + gamma) + beta with gamma/beta broadcast over spatial positions."""
    aligned = conv1x1(fused, affine.align, affine.align_b)  # (B, 1, 1, C)
    gamma = affine.gamma_head(aligned)
    beta = affine.beta_head(aligned)
    return f * (gamma + 1.0) + beta


class StageAdapter:
    """Prompt bank + affine injection attached after one stage."""

    def __init__(self, rng, dim: int, n_prompts: int, prompt_dim: int | None = None):
        self.bank = PromptBank(rng, dim, n_prompts, prompt_dim)
        self.affine = StyleAffine(rng, self.bank.prompt_dim, dim)

    def __call__(self, f: Tensor) -> Tensor:
        return inject_style(f, fuse_prompts(f, self.bank), self.affine)

    def named_params(self, prefix):
        yield from self.bank.named_params(f"{prefix}.bank")
        yield from self.affine.named_params(f"{prefix}.affine")


def attach_adapters(model: IqaModel, seed: int = 0) -> IqaModel:
    """Add zero-initialized adapters after every stage, in place."""
    if model.adapters is not None:
        raise ConfigError("model already carries style adapters")
    rng = np.random.default_rng(seed)
    model.adapters = [StageAdapter(rng, d, model.cfg.n_prompts) for d in model.cfg.embed_dims]
    model.cfg.adapters = True
    return model


def freeze_backbone(model: IqaModel, tune_head: bool = True) -> IqaModel:
    """Clear requires_grad on everything except adapters (and head per flag)."""
    if model.adapters is None:
        raise ConfigError("freeze_backbone requires style adapters; attach them first")
    for name, t in model.named_params():
        if ".adapter." in name:
            t.requires_grad = True
        elif name.startswith("head."):
            t.requires_grad = bool(tune_head)
        else:
            t.requires_grad = False
    return model


def freeze_all_but_head(model: IqaModel) -> IqaModel:
    """Linear-probe setup: only the regression head stays trainable."""
    for name, t in model.named_params():
        t.requires_grad = name.startswith("head.")
    return model


def freeze_everything(model: IqaModel) -> IqaModel:
    for _, t in model.named_params():
        t.requires_grad = False
    return model


def tunable_fraction(model: IqaModel) -> float:
    total = 0
    trainable = 0
    for _, t in model.named_params():
        total += t.size
        if t.requires_grad:
            trainable += t.size
    return trainable / total if total else 0.0
