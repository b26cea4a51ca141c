"""Toy post-LN transformer encoder whose projection matrices are gated adapter layers.

Each block has six adapted matrices (query, key, value, output, FFN in, FFN out)
and two trainable layer norms. Token and position tables are frozen random
stand-ins for a pretrained backbone. Classification reads the first position
through a dense+tanh+linear head.

Multi-head attention is written as concat-then-project, which is algebraically
the same as summing per-head output projections.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .adapters import GatedLinear, GatedLoraLinear, PrunedLinear, zero_noise
from .errors import ConfigError, DimensionError, InputError, NumericError

ADAPTER_KINDS = ("gates_only", "gates_plus_lora", "lora_only", "full_finetune", "frozen")
PROJECTIONS = ("wq", "wk", "wv", "wo", "mlp_in", "mlp_out")
MASK_NEG = -1e9


@dataclass
class ModelConfig:
    num_blocks: int = 2
    model_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 256
    max_seq_len: int = 16
    num_classes: int = 2
    adapter_kind: str = "gates_only"
    lora_rank: int = 4
    lora_scale: float = 1.0
    gate_mlp: bool = True
    init_seed: int = 0
    ln_eps: float = 1e-5

    def validate(self):
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ConfigError(f"adapter_kind must be one of {ADAPTER_KINDS}, got {self.adapter_kind!r}")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.lora_active and self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1 when LoRA is active")
        for key in ("num_blocks", "model_dim", "num_heads", "ffn_dim", "vocab_size",
                    "max_seq_len", "num_classes"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        return self

    @property
    def lora_active(self):
        return self.adapter_kind in ("gates_plus_lora", "lora_only")

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads


def _make_layer(cfg, W, name, lora_rng, is_mlp):
    kind = cfg.adapter_kind
    adapt = not is_mlp or cfg.gate_mlp
    if kind == "full_finetune":
        return GatedLinear(W, gated=False, train_base=True, name=name)
    if kind == "frozen" or not adapt:
        return GatedLinear(W, gated=False, name=name)
    if kind == "gates_only":
        return GatedLinear(W, gated=True, name=name)
    return GatedLoraLinear(W, rank=cfg.lora_rank, rng=lora_rng, scale=cfg.lora_scale,
                           gated=(kind == "gates_plus_lora"), name=name)


class LayerNormParams:
    def __init__(self, d, name):
        self.gamma = ad.Tensor(np.ones(d), requires_grad=True, name=f"{name}.gamma")
        self.beta = ad.Tensor(np.zeros(d), requires_grad=True, name=f"{name}.beta")

    def __call__(self, x, eps):
        return ad.layer_norm(x, self.gamma, self.beta, eps)


class EncoderBlock:
    def __init__(self, cfg, weights, lora_rng, name):
        self.name = name
        for proj in PROJECTIONS:
            layer = _make_layer(cfg, weights[proj], f"{name}.{proj}", lora_rng, proj.startswith("mlp"))
            setattr(self, proj, layer)
        self.ln1 = LayerNormParams(cfg.model_dim, f"{name}.ln1")
        self.ln2 = LayerNormParams(cfg.model_dim, f"{name}.ln2")

    def layers(self):
        return [(p, getattr(self, p)) for p in PROJECTIONS]


class ClassifierHead:
    def __init__(self, d, num_classes, rng):
        self.dense_W = ad.Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)), requires_grad=True,
                                 name="head.dense.W")
        self.dense_b = ad.Tensor(np.zeros(d), requires_grad=True, name="head.dense.b")
        self.out_W = ad.Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (num_classes, d)), requires_grad=True,
                               name="head.out.W")
        self.out_b = ad.Tensor(np.zeros(num_classes), requires_grad=True, name="head.out.b")

    def tensors(self):
        return [self.dense_W, self.dense_b, self.out_W, self.out_b]

    def __call__(self, pooled):
        z = ad.tanh(pooled @ ad.transpose(self.dense_W) + self.dense_b)
        return z @ ad.transpose(self.out_W) + self.out_b


class Encoder:
    """Sequence classifier. ``forward(..., train=True)`` returns a taped Tensor,
    evaluation returns a plain ndarray of logits."""

    def __init__(self, cfg, embedding=None):
        self.cfg = cfg.validate()
        d, f = cfg.model_dim, cfg.ffn_dim
        rng = np.random.default_rng([cfg.init_seed, 0])
        lora_rng = np.random.default_rng([cfg.init_seed, 1])
        if embedding is None:
            embedding = rng.normal(0.0, 1.0, (cfg.vocab_size, d))
        embedding = np.array(embedding, dtype=np.float64)
        if embedding.shape != (cfg.vocab_size, d):
            raise DimensionError(f"embedding shape {embedding.shape} != ({cfg.vocab_size}, {d})")
        self.embedding = embedding
        self.positions = rng.normal(0.0, 0.1, (cfg.max_seq_len, d))
        self.blocks = []
        for i in range(cfg.num_blocks):
            shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
                      "mlp_in": (f, d), "mlp_out": (d, f)}
            weights = {p: rng.normal(0.0, 1.0 / math.sqrt(s[1]), s) for p, s in shapes.items()}
            self.blocks.append(EncoderBlock(cfg, weights, lora_rng, f"blocks.{i}"))
        self.head = ClassifierHead(d, cfg.num_classes, rng)
        self.pruned = False

    # -- structure

    def layers(self):
        for block in self.blocks:
            for _, layer in block.layers():
                yield layer

    def gate_vectors(self):
        for layer in self.layers():
            if isinstance(layer, PrunedLinear):
                continue
            for side, g in layer.gate_vectors():
                yield layer.name, side, g

    def layer_norms(self):
        for block in self.blocks:
            yield block.ln1
            yield block.ln2

    def param_groups(self):
        """Optimizer groups: gate means, decayed Gamma tensors, undecayed Gamma tensors."""
        groups = {"gates": [], "decay": [], "no_decay": []}
        for layer in self.layers():
            for key, ps in layer.param_groups().items():
                groups[key] += ps
        groups["decay"] += [self.head.dense_W, self.head.out_W]
        groups["no_decay"] += [self.head.dense_b, self.head.out_b]
        for ln in self.layer_norms():
            groups["no_decay"] += [ln.gamma, ln.beta]
        return groups

    def trainable_tensors(self):
        return [p for ps in self.param_groups().values() for p in ps]

    def zero_grad(self):
        for p in self.trainable_tensors():
            p.zero_grad()

    def named_tensors(self):
        out = {"embedding": self.embedding, "positions": self.positions}
        for block in self.blocks:
            for proj, layer in block.layers():
                prefix = f"{block.name}.{proj}"
                if isinstance(layer, PrunedLinear):
                    out[f"{prefix}.W_compact"] = layer.W_compact
                    out[f"{prefix}.kept_rows"] = layer.kept_rows.astype(np.float64)
                    out[f"{prefix}.kept_cols"] = layer.kept_cols.astype(np.float64)
                    if layer.bias_compact is not None:
                        out[f"{prefix}.bias_compact"] = layer.bias_compact
                else:
                    for key, t in layer.named_tensors().items():
                        out[f"{prefix}.{key}"] = t.data
            for ln_name in ("ln1", "ln2"):
                ln = getattr(block, ln_name)
                out[f"{block.name}.{ln_name}.gamma"] = ln.gamma.data
                out[f"{block.name}.{ln_name}.beta"] = ln.beta.data
        for t in self.head.tensors():
            out[t.name] = t.data
        return out

    def load_tensors(self, table):
        """Copy values from ``table`` into this model; shapes must match exactly."""
        if self.pruned:
            raise InputError("load into an unpruned model, then prune")
        mine = self.named_tensors()
        missing = sorted(set(mine) - set(table))
        if missing:
            raise InputError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
        unknown = sorted(set(table) - set(mine))
        if unknown:
            raise InputError(f"checkpoint has unexpected tensors: {', '.join(unknown[:5])}")
        for name, dst in mine.items():
            src = np.asarray(table[name], dtype=np.float64)
            if src.shape != dst.shape:
                raise DimensionError(f"tensor {name!r}: checkpoint shape {src.shape} != model shape {dst.shape}")
            dst[...] = src

    def prune(self, threshold=0.0):
        """Fused, compacted copy for inference. Raises DegenerateLayerError on empty layers."""
        clone = object.__new__(Encoder)
        clone.__dict__.update(self.__dict__)
        clone.blocks = []
        for block in self.blocks:
            nb = object.__new__(EncoderBlock)
            nb.__dict__.update(block.__dict__)
            for proj, layer in block.layers():
                setattr(nb, proj, layer.fuse(threshold))
            clone.blocks.append(nb)
        clone.pruned = True
        return clone

    # -- forward

    def _embed(self, ids, mask):
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise InputError(f"token ids must be a non-empty (batch, seq) array, got shape {ids.shape}")
        if ids.shape[1] > self.cfg.max_seq_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise InputError(f"token id out of range [0, {self.cfg.vocab_size})")
        x = self.embedding[ids] + self.positions[: ids.shape[1]]
        bias = None
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(ids.shape)
            bias = np.where(mask, 0.0, MASK_NEG)[:, None, None, :]
        return ad.Tensor(x), bias

    def forward(self, ids, mask=None, *, train=False, noise=zero_noise):
        if train:
            if self.pruned:
                raise InputError("pruned models are inference-only")
            return self._forward(ids, mask, train, noise)
        with ad.no_grad():
            return self._forward(ids, mask, False, noise).data

    def _forward(self, ids, mask, train, noise):
        x, bias = self._embed(ids, mask)

        def lin(layer, h):
            if train:
                out = layer.forward_train(h, noise)
                if not np.isfinite(out.data).all():
                    raise NumericError(f"non-finite output in layer {layer.name}")
                return out
            return ad.Tensor(layer.forward_eval(h.data))

        eps = self.cfg.ln_eps
        for block in self.blocks:
            x = block.ln1(x + mha_forward(self.cfg, block, x, bias, lin), eps)
            x = block.ln2(x + ffn_forward(block, x, lin), eps)
        return self.head(x[:, 0, :])

    def logits(self, ids, mask=None):
        return self.forward(ids, mask, train=False)


def mha_forward(cfg, block, x, bias, lin):
    B, S, d = x.shape
    if S == 0:
        raise InputError("empty sequence")
    H, hd = cfg.num_heads, cfg.head_dim

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, S, H, hd)), (0, 2, 1, 3))

    q = heads(lin(block.wq, x))
    k = heads(lin(block.wk, x))
    v = heads(lin(block.wv, x))
    scores = (q @ ad.transpose(k)) * (1.0 / math.sqrt(hd))
    if bias is not None:
        scores = scores + bias
    ctx = ad.softmax(scores) @ v
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, S, d))
    return lin(block.wo, ctx)


def ffn_forward(block, x, lin):
    return lin(block.mlp_out, ad.gelu(lin(block.mlp_in, x)))


def count_params(model, threshold=0.0):
    """Adapter trainables, frozen backbone size and structurally removable entries.

    The classifier head and layer norms are reported separately and are not part
    of ``trainable``.
    """
    trainable = frozen = removable = 0
    for layer in model.layers():
        if isinstance(layer, PrunedLinear):
            frozen += layer.W_compact.size
            continue
        trainable += layer.num_trainable()
        if not layer.train_base:
            frozen += layer.W0.data.size + (0 if layer.bias is None else layer.bias.data.size)
        removable += layer.removable_params(threshold)
    frozen += model.embedding.size + model.positions.size
    head = sum(t.data.size for t in model.head.tensors())
    ln = sum(ln.gamma.data.size + ln.beta.data.size for ln in model.layer_norms())
    return {"trainable": trainable, "frozen": frozen, "removable": removable,
            "head": head, "layer_norm": ln}


def config_dict(cfg):
    return asdict(cfg)
