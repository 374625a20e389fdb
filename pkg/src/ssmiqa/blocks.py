"""Network assembly: patch embedding, gated SSM stages, quality head, training.

Input maps are channel-last (B, H, W, C). Every layer exposes
``named_params(prefix)`` so the optimizer and checkpoint code see one flat,
deterministically ordered name -> Tensor table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import scan2d
from .ssm import SsmParams, selective_scan
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    concat,
    depthwise_conv3x3,
    exp as texp,
    layer_norm,
    matmul,
    narrow,
    no_grad,
    pad_edge2d,
    reshape,
    silu,
    tmean,
    transpose,
)


class ConfigError(ValueError):
    """Model/run configuration is invalid or inconsistent."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters; presets tiny/small/base/desk."""

    depths: tuple = (2, 2, 4, 2)
    embed_dims: tuple = (96, 192, 384, 768)
    scan_mode: str = "local"
    windows: tuple = (7, 3, 2, 2)
    n_state: int = 16
    expand: int = 2
    mlp_ratio: float = 2.25
    head_hidden: int = 64
    patch: int = 4
    chunk: int = 64
    n_prompts: int = 6
    adapters: bool = False

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.embed_dims = tuple(int(d) for d in self.embed_dims)
        self.windows = tuple(int(w) for w in self.windows)
        if len(self.depths) != len(self.embed_dims):
            raise ConfigError(
                f"depths ({len(self.depths)}) and embed_dims ({len(self.embed_dims)}) disagree")
        if len(self.windows) != len(self.depths):
            raise ConfigError(f"windows must give one entry per stage, got {self.windows}")
        if self.scan_mode not in ("cross", "local"):
            raise ConfigError(f"scan_mode must be 'cross' or 'local', got {self.scan_mode!r}")

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    def to_dict(self) -> dict:
        return {
            "depths": list(self.depths),
            "embed_dims": list(self.embed_dims),
            "scan_mode": self.scan_mode,
            "windows": list(self.windows),
            "n_state": self.n_state,
            "expand": self.expand,
            "mlp_ratio": self.mlp_ratio,
            "head_hidden": self.head_hidden,
            "patch": self.patch,
            "chunk": self.chunk,
            "n_prompts": self.n_prompts,
            "adapters": self.adapters,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


PRESETS = {
    "tiny": dict(depths=(2, 2, 4, 2), embed_dims=(96, 192, 384, 768)),
    "small": dict(depths=(2, 2, 15, 2), embed_dims=(96, 192, 384, 768)),
    "base": dict(depths=(2, 2, 15, 2), embed_dims=(128, 256, 512, 1024)),
    "desk": dict(depths=(1, 1), embed_dims=(16, 32), windows=(4, 2), n_state=8,
                 head_hidden=16, chunk=16),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kwargs = dict(PRESETS[name])
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


# -- layers -------------------------------------------------------------------

def _xavier(rng, d_in, d_out):
    lim = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-lim, lim, size=(d_in, d_out))


class Linear:
    def __init__(self, rng, d_in, d_out, bias=True, zero_init=False):
        w = np.zeros((d_in, d_out)) if zero_init else _xavier(rng, d_in, d_out)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = matmul(x, self.w)
        return y + self.b if self.b is not None else y

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, dim):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)

    def named_params(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class DepthwiseConv:
    def __init__(self, rng, dim):
        lim = 1.0 / 3.0  # fan-in per channel is the 9 kernel taps
        self.w = Tensor(rng.uniform(-lim, lim, size=(3, 3, dim)), requires_grad=True)
        self.b = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return depthwise_conv3x3(x, self.w, self.b)

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class PatchEmbed:
    """4x4 non-overlapping patch linearization + linear projection + norm."""

    def __init__(self, rng, patch, in_ch, dim):
        self.patch = patch
        self.proj = Linear(rng, patch * patch * in_ch, dim)
        self.norm = LayerNorm(dim)

    def __call__(self, img):
        p = self.patch
        squeeze = img.ndim == 3
        if squeeze:
            img = reshape(img, (1,) + img.shape)
        b, h, w, c = img.shape
        if h % p or w % p:
            raise ShapeError(f"image extents {h}x{w} not divisible by patch size {p}")
        x = reshape(img, (b, h // p, p, w // p, p, c))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        x = reshape(x, (b, h // p, w // p, p * p * c))
        out = self.norm(self.proj(x))
        return reshape(out, out.shape[1:]) if squeeze else out

    def named_params(self, prefix):
        yield from self.proj.named_params(f"{prefix}.proj")
        yield from self.norm.named_params(f"{prefix}.norm")


class Downsample:
    """2x2 patch merge (edge-pad odd extents) + projection to the next width."""

    def __init__(self, rng, dim_in, dim_out):
        self.norm = LayerNorm(4 * dim_in)
        self.proj = Linear(rng, 4 * dim_in, dim_out, bias=False)

    def __call__(self, x):
        b, h, w, c = x.shape
        x = pad_edge2d(x, h % 2, w % 2)
        h2, w2 = (h + 1) // 2, (w + 1) // 2
        x = reshape(x, (b, h2, 2, w2, 2, c))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        x = reshape(x, (b, h2, w2, 4 * c))
        return self.proj(self.norm(x))

    def named_params(self, prefix):
        yield from self.norm.named_params(f"{prefix}.norm")
        yield from self.proj.named_params(f"{prefix}.proj")


class Ss2dBlock:
    """Gated multi-directional selective-scan block with residual identity.

    The output projection starts at zero, so a freshly built block is exactly
    the identity map and depth does not perturb initialization.
    """

    N_DIRECTIONS = 4

    def __init__(self, rng, dim, cfg: ModelConfig, window: int):
        self.dim = dim
        self.window = window
        self.scan_mode = cfg.scan_mode
        self.chunk = cfg.chunk
        d_inner = cfg.expand * dim
        self.d_inner = d_inner
        self.norm = LayerNorm(dim)
        self.in_proj = Linear(rng, dim, d_inner)
        self.gate_proj = Linear(rng, dim, d_inner)
        self.conv = DepthwiseConv(rng, d_inner)
        self.directions = [SsmParams(d_inner, cfg.n_state, rng) for _ in range(self.N_DIRECTIONS)]
        self.out_norm = LayerNorm(d_inner)
        self.out_proj = Linear(rng, d_inner, dim, zero_init=True)
        if cfg.mlp_ratio > 0:
            hidden = int(round(cfg.mlp_ratio * dim))
            self.mlp_norm = LayerNorm(dim)
            self.mlp_fc1 = Linear(rng, dim, hidden)
            self.mlp_fc2 = Linear(rng, hidden, dim, zero_init=True)
        else:
            self.mlp_norm = None

    def _orders(self, h, w):
        return scan2d.build_orders(h, w, self.scan_mode, self.window)

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if c != self.dim:
            raise ShapeError(f"block expects {self.dim} channels, got {x.shape}")
        orders = self._orders(h, w)
        xn = self.norm(x)
        gate = silu(self.gate_proj(xn))
        feat = silu(self.conv(self.in_proj(xn)))

        seqs = [scan2d.apply_order(feat, o) for o in orders]  # each (B, L, D)
        length = h * w
        u = concat([reshape(s, (b, length, 1, self.d_inner)) for s in seqs], axis=2)

        deltas, bs, cs = [], [], []
        for s, par in zip(seqs, self.directions):
            dl, bt, ct = par.project(s)
            deltas.append(reshape(dl, (b, length, 1, self.d_inner)))
            bs.append(reshape(bt, (b, length, 1, par.n_state)))
            cs.append(reshape(ct, (b, length, 1, par.n_state)))
        n_state = self.directions[0].n_state
        a = concat([reshape(-texp(p.a_log), (1, self.d_inner, n_state)) for p in self.directions], axis=0)
        d_skip = concat([reshape(p.d_skip, (1, self.d_inner)) for p in self.directions], axis=0)

        y = selective_scan(u, concat(deltas, axis=2), a, concat(bs, axis=2),
                           concat(cs, axis=2), d_skip, chunk=self.chunk)
        ys = [reshape(narrow(y, 2, k, 1), (b, length, self.d_inner))
              for k in range(self.N_DIRECTIONS)]
        merged = scan2d.merge_directions(ys, orders)

        out = x + self.out_proj(self.out_norm(merged) * gate)
        if self.mlp_norm is not None:
            out = out + self.mlp_fc2(silu(self.mlp_fc1(self.mlp_norm(out))))
        return out

    def named_params(self, prefix):
        yield from self.norm.named_params(f"{prefix}.norm")
        yield from self.in_proj.named_params(f"{prefix}.in_proj")
        yield from self.gate_proj.named_params(f"{prefix}.gate_proj")
        yield from self.conv.named_params(f"{prefix}.conv")
        for k, d in enumerate(self.directions):
            yield from d.named_params(f"{prefix}.dir{k}")
        yield from self.out_norm.named_params(f"{prefix}.out_norm")
        yield from self.out_proj.named_params(f"{prefix}.out_proj")
        if self.mlp_norm is not None:
            yield from self.mlp_norm.named_params(f"{prefix}.mlp_norm")
            yield from self.mlp_fc1.named_params(f"{prefix}.mlp_fc1")
            yield from self.mlp_fc2.named_params(f"{prefix}.mlp_fc2")


class QualityHead:
    """Global average pool -> linear -> silu -> linear -> scalar score."""

    def __init__(self, rng, dim, hidden):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, 1)

    def __call__(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        pooled = reshape(tmean(x, axis=(-3, -2)), (b, x.shape[-1]))
        return reshape(self.fc2(silu(self.fc1(pooled))), (b,))

    def named_params(self, prefix):
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")


class IqaModel:
    """Stem -> stages of gated SSM blocks (optional style adapters between)
    -> downsampling -> quality head.

    Inputs are [0, 1] images; the forward pass centers them at zero before
    the stem.
    """

    INPUT_CENTER = 0.5

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dims = cfg.embed_dims
        self.stem = PatchEmbed(rng, cfg.patch, 3, dims[0])
        self.stages = []
        for i, depth in enumerate(cfg.depths):
            self.stages.append([Ss2dBlock(rng, dims[i], cfg, cfg.windows[i]) for _ in range(depth)])
        self.downs = [Downsample(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        self.head = QualityHead(rng, dims[-1], cfg.head_hidden)
        self.adapters = None
        if cfg.adapters:
            from .styleprompt import StageAdapter

            self.adapters = [StageAdapter(rng, dims[i], cfg.n_prompts) for i in range(len(dims))]

    # -- structure ------------------------------------------------------------
    def named_params(self):
        yield from self.stem.named_params("stem")
        for i, blocks in enumerate(self.stages):
            for j, blk in enumerate(blocks):
                yield from blk.named_params(f"stage{i}.block{j}")
            if self.adapters is not None:
                yield from self.adapters[i].named_params(f"stage{i}.adapter")
            if i < len(self.downs):
                yield from self.downs[i].named_params(f"down{i}")
        yield from self.head.named_params("head")

    def backbone_param_names(self):
        """Everything except adapters and head."""
        names = set()
        for name, _ in self.named_params():
            if ".adapter." in name or name.startswith("head."):
                continue
            names.add(name)
        return names

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_params())

    def trainable_params(self):
        return [(n, t) for n, t in self.named_params() if t.requires_grad]

    # -- computation ------------------------------------------------------------
    def features(self, img: Tensor, collect: bool = False):
        if img.ndim == 3:
            img = reshape(img, (1,) + img.shape)
        x = self.stem(img - self.INPUT_CENTER)
        stage_outputs = []
        for i, blocks in enumerate(self.stages):
            for blk in blocks:
                x = blk(x)
            if self.adapters is not None:
                x = self.adapters[i](x)
            if collect:
                stage_outputs.append(x)
            if i < len(self.downs):
                x = self.downs[i](x)
        return (x, stage_outputs) if collect else x

    def __call__(self, img: Tensor) -> Tensor:
        return self.head(self.features(img))

    def score(self, img: np.ndarray) -> float:
        """Inference convenience for one (H, W, 3) image."""
        with no_grad():
            return float(self(Tensor(img)).data[0])

    def diagnose_nonfinite(self, img: Tensor) -> str:
        """Name the first stage whose output goes non-finite."""
        with no_grad():
            if img.ndim == 3:
                img = reshape(img, (1,) + img.shape)
            x = self.stem(img - self.INPUT_CENTER)
            if not np.isfinite(x.data).all():
                return "stem"
            for i, blocks in enumerate(self.stages):
                for j, blk in enumerate(blocks):
                    x = blk(x)
                    if not np.isfinite(x.data).all():
                        return f"stage{i}.block{j}"
                if self.adapters is not None:
                    x = self.adapters[i](x)
                    if not np.isfinite(x.data).all():
                        return f"stage{i}.adapter"
                if i < len(self.downs):
                    x = self.downs[i](x)
                    if not np.isfinite(x.data).all():
                        return f"down{i}"
            s = self.head(x)
            if not np.isfinite(s.data).all():
                return "head"
        return "loss"


# -- optimization -------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; decay skips 1-d tensors (norms/biases)."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]

    def zero_grad(self):
        for _, t in self.params:
            t.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        for i, (_, t) in enumerate(self.params):
            g = t.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            t.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and t.data.ndim >= 2:
                t.data -= lr * self.weight_decay * t.data


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(1, total - 1)))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    diff = pred - target
    return tmean(diff * diff)


class Trainer:
    """Minibatch training loop with cosine-decayed AdamW."""

    def __init__(self, model: IqaModel, lr=3e-4, weight_decay=0.05, seed: int = 0):
        self.model = model
        self.opt = AdamW(model.trainable_params(), lr=lr, weight_decay=weight_decay)
        self.rng = np.random.default_rng(seed)
        self.base_lr = lr

    def train_step(self, images: np.ndarray, scores: np.ndarray, lr: float | None = None) -> float:
        """One update on a (B, H, W, 3) batch; returns the scalar loss."""
        pred = self.model(Tensor(images))
        loss = mse_loss(pred, Tensor(scores))
        value = float(loss.data)
        if not math.isfinite(value):
            where = self.model.diagnose_nonfinite(Tensor(images))
            raise NumericError(f"non-finite loss; first non-finite output at {where}")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step(lr)
        return value

    def fit(self, images: np.ndarray, scores: np.ndarray, epochs: int, batch_size: int = 8,
            epoch_hook=None) -> list[float]:
        """Shuffled minibatch epochs over a fixed sample array; returns epoch losses."""
        n = images.shape[0]
        steps_per_epoch = max(1, -(-n // batch_size))
        total = max(1, epochs * steps_per_epoch)
        losses = []
        step = 0
        for epoch in range(epochs):
            order = self.rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                lr = cosine_lr(self.base_lr, step, total)
                epoch_loss += self.train_step(images[idx], scores[idx], lr=lr) * len(idx)
                step += 1
            losses.append(epoch_loss / n)
            if epoch_hook is not None:
                epoch_hook(epoch, losses[-1])
        return losses
