"""Wall-clock benchmarks for column-gathered matrix products and pruned inference.

Timings pin the math library to one thread and report medians. Each
measurement is also split into three contiguous blocks whose medians give a
noise band for monotonicity checks.
"""

import contextlib
import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import GatedLinear, PrunedLinear
from .data import pad_batch
from .errors import ConfigError, InputError

MATMUL_COLUMNS = ("sparsity", "dense_ms", "gathered_ms", "relative_reduction_pct")
INFER_COLUMNS = ("sparsity", "median_epoch_ms", "RTF")
DEFAULT_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
NUM_BLOCKS = 3


def available_backends():
    names = ["numpy"]
    try:
        import torch  # noqa: F401

        names.append("torch")
    except ImportError:
        pass
    return names


def resolve_backend(name):
    if name == "auto":
        return "torch" if "torch" in available_backends() else "numpy"
    if name not in ("numpy", "torch"):
        raise ConfigError(f"unknown bench backend {name!r}")
    if name not in available_backends():
        raise ConfigError(f"backend {name!r} is not installed")
    return name


@contextlib.contextmanager
def single_thread(backend="numpy"):
    """Limit BLAS (and torch intra-op) parallelism to one thread for the duration."""
    with contextlib.ExitStack() as stack:
        try:
            from threadpoolctl import threadpool_limits

            stack.enter_context(threadpool_limits(limits=1))
        except ImportError:
            pass
        if backend == "torch":
            import torch

            prev = torch.get_num_threads()
            torch.set_num_threads(1)
            stack.callback(torch.set_num_threads, prev)
        yield


@dataclass
class Timing:
    """Per-call wall times in seconds, with a median and a three-block noise band."""

    samples: np.ndarray
    block_medians: list = field(default_factory=list)

    @classmethod
    def from_samples(cls, samples):
        samples = np.asarray(samples, dtype=np.float64)
        blocks = [float(np.median(b)) for b in np.array_split(samples, NUM_BLOCKS) if len(b)]
        return cls(samples, blocks)

    @property
    def median_ms(self):
        return float(np.median(self.samples)) * 1e3

    @property
    def noise_ms(self):
        return (max(self.block_medians) - min(self.block_medians)) * 1e3 if self.block_medians else 0.0


def _kernels(backend, W, X, kept, dtype):
    """(dense, gathered) zero-argument callables computing X W^T two ways.

    Both use the ``x @ W.T`` layout of the model's linear layers; the gathered
    form multiplies by the pre-compacted weight ``W[:, kept]``.
    """
    W = W.astype(dtype)
    X = X.astype(dtype)
    W_kept = np.ascontiguousarray(W[:, kept])
    if backend == "torch":
        import torch

        Xt, Wt, Wk = (torch.from_numpy(a) for a in (X, W, W_kept))
        idx = torch.from_numpy(kept.astype(np.int64))
        linear = torch.nn.functional.linear

        def dense():
            return linear(Xt, Wt)

        def gathered():
            return linear(torch.index_select(Xt, 1, idx), Wk)

        return dense, gathered

    def dense():
        return X @ W.T

    def gathered():
        return np.take(X, kept, axis=1) @ W_kept.T

    return dense, gathered


def _time_calls(fns, repeats, warmup=10, chunk=100):
    """Time ``repeats`` calls of each function, alternating between them every ``chunk`` calls.

    Alternating in chunks spreads slow drifts over all functions while keeping
    each one's operands warm in cache.
    """
    clock = time.perf_counter
    for fn in fns:
        for _ in range(warmup):
            fn()
    out = [np.empty(repeats) for _ in fns]
    for start in range(0, repeats, chunk):
        stop = min(start + chunk, repeats)
        for fn, buf in zip(fns, out):
            for i in range(start, stop):
                t0 = clock()
                fn()
                buf[i] = clock() - t0
    return out


@dataclass
class MatmulRow:
    sparsity: float
    dense: Timing
    gathered: Timing

    @property
    def relative_reduction_pct(self):
        d = self.dense.median_ms
        return 100.0 * (d - self.gathered.median_ms) / d

    def as_dict(self):
        return {
            "sparsity": self.sparsity,
            "dense_ms": self.dense.median_ms,
            "gathered_ms": self.gathered.median_ms,
            "relative_reduction_pct": self.relative_reduction_pct,
        }


def bench_matmul(dim=1024, batch=16, repeats=10**5, sparsity_grid=DEFAULT_GRID, backend="numpy", seed=0,
                 progress=None, dtype="float32"):
    """Median times of the dense product and of the column-gathered product per sparsity level.

    The gathered product drops a random ``sparsity`` fraction of input columns:
    it gathers the surviving columns of ``X`` and multiplies by the
    pre-compacted weight. The dense baseline is timed interleaved with the
    first grid level, so the zero-sparsity comparison sees identical
    conditions; every row reports that shared baseline.
    """
    grid = [float(s) for s in sparsity_grid]
    if not grid or any(not 0.0 <= s < 1.0 for s in grid):
        raise ConfigError(f"sparsity levels must lie in [0, 1), got {grid}")
    if dim < 1 or batch < 1 or repeats < NUM_BLOCKS:
        raise ConfigError("dim and batch must be >= 1 and repeats >= 3")
    backend = resolve_backend(backend)
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(dim, dim))
    X = rng.normal(size=(batch, dim))
    rows, dense = [], None
    with single_thread(backend):
        for level in grid:
            n_drop = int(round(level * dim))
            kept = np.sort(rng.permutation(dim)[: dim - n_drop])
            dense_fn, gathered_fn = _kernels(backend, W, X, kept, np.dtype(dtype))
            if dense is None:
                d_samples, g_samples = _time_calls([dense_fn, gathered_fn], repeats)
                dense = Timing.from_samples(d_samples)
            else:
                (g_samples,) = _time_calls([gathered_fn], repeats)
            rows.append(MatmulRow(level, dense, Timing.from_samples(g_samples)))
            if progress is not None:
                progress(rows[-1])
    return rows


def gathered_is_monotone(rows, start=0.1):
    """True when gathered time never rises by more than the block-median noise, from ``start`` on."""
    picked = sorted((r for r in rows if r.sparsity >= start - 1e-12), key=lambda r: r.sparsity)
    for a, b in zip(picked, picked[1:]):
        slack = max(a.gathered.noise_ms, b.gathered.noise_ms)
        if b.gathered.median_ms > a.gathered.median_ms + slack:
            return False
    return True


# ---------------------------------------------------------------- pruned inference


def level_variant(model, level):
    """Pruned copy of ``model`` keeping the top ``1 - level`` fraction of columns per gated layer.

    Columns are ranked by gate mean; rows are all kept. Ungated layers stay whole.
    """
    from .transformer import Encoder, EncoderBlock

    if getattr(model, "pruned", False):
        raise InputError("bench-infer needs a gated (unpruned) checkpoint")
    clone = object.__new__(Encoder)
    clone.__dict__.update(model.__dict__)
    clone.blocks = []
    for block in model.blocks:
        nb = object.__new__(EncoderBlock)
        nb.__dict__.update(block.__dict__)
        for proj, layer in block.layers():
            k, d = layer.shape
            W = layer.fused_weight() if layer.gated else layer.base_weight_eval()
            cols = np.arange(d)
            if layer.gated:
                keep = max(1, d - int(round(level * d)))
                order = np.argsort(-layer.gate_cols.mu.data, kind="stable")
                cols = np.sort(order[:keep])
            bias = None
            if layer.bias is not None:
                bias = layer.bias.data * (layer.eval_gate_values()[0] if layer.gated else 1.0)
            W_c = np.ascontiguousarray(W[:, cols])
            setattr(nb, proj, PrunedLinear(W_c, np.arange(k), cols, (k, d), bias, layer.name))
        clone.blocks.append(nb)
    clone.pruned = True
    return clone


def _epoch_fn(model, corpus, batch_size):
    blocks = [pad_batch(corpus.sequences[i : i + batch_size]) for i in range(0, len(corpus), batch_size)]

    def run():
        for ids, mask in blocks:
            model.logits(ids, mask)

    return run


def bench_infer(model, corpus, sparsity_levels=(0.0, 0.2, 0.4, 0.6, 0.8), repeats=10, batch_size=256):
    """One validation epoch per pruned level, ``repeats`` times; rows of sparsity, median_epoch_ms, RTF."""
    if len(corpus) == 0:
        raise ConfigError("empty evaluation set")
    levels = [float(s) for s in sparsity_levels]
    if any(not 0.0 <= s < 1.0 for s in levels):
        raise ConfigError(f"sparsity levels must lie in [0, 1), got {levels}")
    if not any(isinstance(layer, GatedLinear) and layer.gated for layer in model.layers()):
        raise InputError("model has no gated layers")
    fns = [_epoch_fn(level_variant(model, s), corpus, batch_size) for s in levels]
    with single_thread("numpy"):
        # Interleave levels so slow drifts hit all of them alike.
        samples = _time_calls(fns, repeats, warmup=1, chunk=1)
    medians = [float(np.median(s)) * 1e3 for s in samples]
    base = medians[levels.index(0.0)] if 0.0 in levels else None
    rows = []
    for s, m in zip(levels, medians):
        rows.append({"sparsity": s, "median_epoch_ms": m, "RTF": (base / m) if base else float("nan")})
    return rows


def rows_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(row[c])) for c in columns])
    return buf.getvalue()
