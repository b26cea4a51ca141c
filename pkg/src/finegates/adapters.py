"""Gated linear layers over a frozen base matrix, with optional low-rank update.

For a base matrix ``W0`` of shape ``(k, d)`` (out x in) the layer computes

    h = diag(g_rows) @ (W0 + scale * B @ A) @ diag(g_cols) @ x

applied to the last axis of ``x``. Any bias is frozen and passes through the
row gate, so a closed row produces exactly zero.

Training and evaluation share one contraction kernel: columns whose gate is
exactly zero are skipped and closed rows are scattered back as zeros. A closed
gate contributes nothing to the value and receives no gradient through the
clamp, so skipping it changes neither. The payoff is that a fused, physically
compacted :class:`PrunedLinear` repeats the evaluation arithmetic bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateLayerError, DimensionError
from .gates import GateVector, eval_gates, sample_train_gates

LORA_A_STD = 0.02


def zero_noise(g):
    return np.zeros(len(g))


class GatedLinear:
    """Frozen ``W0`` scaled by row and column gates; the gates are the only trainables.

    ``gated=False`` gives a plain linear map, and ``train_base=True`` makes
    ``W0`` (and its bias) trainable. Those two switches cover the
    frozen-reference and full-finetune baselines.
    """

    def __init__(self, W0, bias=None, *, gated=True, train_base=False, name=""):
        W0 = np.array(W0, dtype=np.float64)
        if W0.ndim != 2:
            raise DimensionError(f"base weight must be 2-D, got shape {W0.shape}")
        k, d = W0.shape
        self.name = name
        self.gated = gated
        self.train_base = train_base
        self.W0 = ad.Tensor(W0, requires_grad=train_base, name=f"{name}.W0")
        self.bias = None
        if bias is not None:
            bias = np.array(bias, dtype=np.float64)
            if bias.shape != (k,):
                raise DimensionError(f"bias shape {bias.shape} does not match {k} output rows")
            self.bias = ad.Tensor(bias, requires_grad=train_base, name=f"{name}.bias")
        self.gate_rows = GateVector(k, name=f"{name}.gate_rows") if gated else None
        self.gate_cols = GateVector(d, name=f"{name}.gate_cols") if gated else None

    @property
    def shape(self):
        return self.W0.shape

    def gate_vectors(self):
        if not self.gated:
            return []
        return [("row", self.gate_rows), ("col", self.gate_cols)]

    def param_groups(self):
        groups = {"gates": [g.mu for _, g in self.gate_vectors()], "decay": [], "no_decay": []}
        if self.train_base:
            groups["decay"].append(self.W0)
            if self.bias is not None:
                groups["no_decay"].append(self.bias)
        return groups

    def named_tensors(self):
        out = {"W0": self.W0}
        if self.bias is not None:
            out["bias"] = self.bias
        for side, g in self.gate_vectors():
            out[f"gate_{side}s.mu"] = g.mu
        return out

    def num_trainable(self):
        return sum(p.data.size for ps in self.param_groups().values() for p in ps)

    # -- weights

    def base_weight(self):
        return self.W0

    def base_weight_eval(self):
        return self.W0.data

    def eval_gate_values(self):
        k, d = self.shape
        if not self.gated:
            return np.ones(k), np.ones(d)
        return eval_gates(self.gate_rows), eval_gates(self.gate_cols)

    def fused_weight(self):
        """Dense diag(g_r) (W0 + scale*B A) diag(g_c) at the evaluation gates."""
        gr, gc = self.eval_gate_values()
        return gr[:, None] * self.base_weight_eval() * gc[None, :]

    # -- forward

    def _check_input(self, x):
        if x.shape[-1] != self.shape[1]:
            raise DimensionError(
                f"layer {self.name!r} expects input width {self.shape[1]}, got shape {x.shape}"
            )

    def forward_train(self, x, noise=zero_noise):
        """Taped forward with freshly sampled gates; ``noise(gate)`` supplies epsilon."""
        x = ad.as_tensor(x)
        self._check_input(x)
        k, d = self.shape
        W = self.base_weight()
        if self.gated:
            wr = sample_train_gates(self.gate_rows, noise(self.gate_rows))
            wc = sample_train_gates(self.gate_cols, noise(self.gate_cols))
            W = ad.scale_rows_cols(W, wr, wc)
            rows = np.flatnonzero(wr.data)
            cols = np.flatnonzero(wc.data)
        else:
            wr = None
            rows, cols = np.arange(k), np.arange(d)

        if len(rows) == 0 or len(cols) == 0:
            # Every path to the output is closed; keep the gates on the tape.
            return ad.mul(ad.tsum(W), 0.0) + np.zeros(x.shape[:-1] + (k,))
        if len(cols) < d:
            W = ad.take(W, cols, axis=1)
            x = ad.take(x, cols, axis=-1)
        if len(rows) < k:
            W = ad.take(W, rows, axis=0)
        h = x @ ad.transpose(W)
        if self.bias is not None:
            b = self.bias if wr is None else wr * self.bias
            h = h + (b if len(rows) == k else ad.take(b, rows, axis=0))
        if len(rows) < k:
            h = ad.scatter(h, rows, axis=-1, size=k)
        return h

    def compact(self, threshold=0.0):
        """(W_compact, kept_rows, kept_cols, bias_compact) at the evaluation gates."""
        gr, gc = self.eval_gate_values()
        rows = np.flatnonzero(gr > threshold)
        cols = np.flatnonzero(gc > threshold)
        W = self.fused_weight()
        k, d = self.shape
        if len(cols) < d:
            W = np.take(W, cols, axis=1)
        if len(rows) < k:
            W = np.take(W, rows, axis=0)
        bias = None
        if self.bias is not None:
            b = self.bias.data if not self.gated else gr * self.bias.data
            bias = b if len(rows) == k else np.take(b, rows, axis=0)
        return W, rows, cols, bias

    def forward_eval(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        W, rows, cols, bias = self.compact(0.0)
        return _compact_apply(x, W, rows, cols, bias, self.shape)

    def fuse(self, threshold=0.0):
        W, rows, cols, bias = self.compact(threshold)
        if len(rows) == 0 or len(cols) == 0:
            raise DegenerateLayerError(self.name)
        return PrunedLinear(
            W_compact=np.ascontiguousarray(W),
            kept_rows=rows,
            kept_cols=cols,
            original_shape=tuple(self.shape),
            bias_compact=bias,
            name=self.name,
        )

    def removable_params(self, threshold=0.0):
        k, d = self.shape
        if not self.gated:
            return 0
        gr, gc = self.eval_gate_values()
        return k * d - int((gr > threshold).sum()) * int((gc > threshold).sum())


class GatedLoraLinear(GatedLinear):
    """Gated layer whose base is ``W0 + scale * W_B @ W_A`` with trainable low-rank factors."""

    def __init__(self, W0, bias=None, *, rank, rng, scale=1.0, gated=True, name=""):
        super().__init__(W0, bias, gated=gated, train_base=False, name=name)
        k, d = self.shape
        if rank < 1:
            raise DimensionError(f"LoRA rank must be >= 1, got {rank}")
        self.rank = rank
        self.scale = float(scale)
        self.lora_A = ad.Tensor(rng.normal(0.0, LORA_A_STD, size=(rank, d)), requires_grad=True,
                                name=f"{name}.lora_A")
        self.lora_B = ad.Tensor(np.zeros((k, rank)), requires_grad=True, name=f"{name}.lora_B")

    def param_groups(self):
        groups = super().param_groups()
        groups["decay"] += [self.lora_B, self.lora_A]
        return groups

    def named_tensors(self):
        out = super().named_tensors()
        out["lora_A"] = self.lora_A
        out["lora_B"] = self.lora_B
        return out

    def base_weight(self):
        return self.W0 + ad.matmul(self.lora_B, self.lora_A) * self.scale

    def base_weight_eval(self):
        return self.W0.data + (self.lora_B.data @ self.lora_A.data) * self.scale


def _compact_apply(x, W, rows, cols, bias, shape):
    k, d = shape
    if len(rows) == 0 or len(cols) == 0:
        return np.zeros(x.shape[:-1] + (k,))
    if len(cols) < d:
        x = np.take(x, cols, axis=-1)
    h = x @ W.T
    if bias is not None:
        h = h + bias
    if len(rows) < k:
        out = np.zeros(h.shape[:-1] + (k,))
        out[..., rows] = h
        h = out
    return h


@dataclass
class PrunedLinear:
    """Physically compacted layer: only surviving rows and columns are stored."""

    W_compact: np.ndarray
    kept_rows: np.ndarray
    kept_cols: np.ndarray
    original_shape: tuple
    bias_compact: np.ndarray = None
    name: str = ""

    @property
    def shape(self):
        return tuple(self.original_shape)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.original_shape[1]:
            raise DimensionError(
                f"pruned layer {self.name!r} expects input width {self.original_shape[1]}, got {x.shape}"
            )
        return _compact_apply(x, self.W_compact, self.kept_rows, self.kept_cols,
                              self.bias_compact, self.original_shape)

    forward_eval = forward

    def removed_params(self):
        k, d = self.original_shape
        return k * d - self.W_compact.size


def pruned_forward(p, x):
    return p.forward(x)
