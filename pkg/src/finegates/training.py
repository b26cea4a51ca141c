"""Optimisation of the gated objective ``task cross-entropy + lambda * sum of sparsity penalties``.

Gate means and the remaining trainables (LoRA factors, head, layer norms) sit
in separate optimizer groups with their own fixed learning rates. Weight decay
is decoupled and skips the gate means.
"""

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import PrunedLinear
from .checkpoint import Checkpoint, save_checkpoint
from .data import batches, pad_batch
from .errors import ConfigError, NumericError
from .gates import SparsityLossMode, eval_gates, open_probabilities, sparsity_loss
from .transformer import Encoder, ModelConfig

METRIC_COLUMNS = ("step", "task_loss", "sparse_loss", "open_fraction_mean", "achieved_sparsity", "accuracy")


@dataclass
class TrainConfig:
    lam: float = 1.0
    target_sparsity: float = 0.0
    lr_gates: float = 1e-3
    lr_lora: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    max_steps: int = 1000
    seed: int = 0
    eval_every: int = 100
    sparsity_loss_mode: str = "hinge"
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    threshold: float = 0.0

    def validate(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError(f"target_sparsity must lie in [0, 1), got {self.target_sparsity}")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1, max_steps >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        try:
            SparsityLossMode(self.sparsity_loss_mode)
        except ValueError:
            raise ConfigError(f"unknown sparsity_loss_mode {self.sparsity_loss_mode!r}") from None
        return self


# ---------------------------------------------------------------- noise sources


class GaussianNoise:
    """Fresh N(0, sigma^2) gate noise on every call."""

    def __init__(self, rng):
        self.rng = rng

    def __call__(self, gate):
        return gate.draw_noise(self.rng)


class FrozenNoise:
    """Draws once per gate vector, then replays the same noise (for finite differences)."""

    def __init__(self, rng):
        self.rng = rng
        self._cache = {}

    def __call__(self, gate):
        key = id(gate)
        if key not in self._cache:
            self._cache[key] = gate.draw_noise(self.rng)
        return self._cache[key]


# ---------------------------------------------------------------- optimizers


class AdamW:
    """Adam with decoupled weight decay, one learning rate per parameter group."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        self.groups = [dict(g) for g in groups]
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [[np.zeros_like(p.data) for p in g["params"]] for g in self.groups]
        self.v = [[np.zeros_like(p.data) for p in g["params"]] for g in self.groups]

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for group, ms, vs in zip(self.groups, self.m, self.v):
            lr, wd = group["lr"], group.get("weight_decay", 0.0)
            for p, m, v in zip(group["params"], ms, vs):
                g = p.grad
                if wd:
                    p.data -= (lr * wd) * p.data
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, groups):
        self.groups = [dict(g) for g in groups]
        self.step_count = 0

    def step(self):
        self.step_count += 1
        for group in self.groups:
            lr, wd = group["lr"], group.get("weight_decay", 0.0)
            for p in group["params"]:
                if wd:
                    p.data -= (lr * wd) * p.data
                p.data -= lr * p.grad


def build_optimizer(model, cfg):
    pg = model.param_groups()
    groups = [
        {"name": "gates", "params": pg["gates"], "lr": cfg.lr_gates, "weight_decay": 0.0},
        {"name": "decay", "params": pg["decay"], "lr": cfg.lr_lora, "weight_decay": cfg.weight_decay},
        {"name": "no_decay", "params": pg["no_decay"], "lr": cfg.lr_lora, "weight_decay": 0.0},
    ]
    if cfg.optimizer == "sgd":
        return SGD(groups)
    return AdamW(groups, (cfg.beta1, cfg.beta2), cfg.adam_eps)


# ---------------------------------------------------------------- loss and steps


@dataclass
class LossParts:
    total: ad.Tensor
    task: ad.Tensor
    sparse: ad.Tensor


def sparse_penalty(model, cfg):
    terms = [sparsity_loss(g, cfg.target_sparsity, cfg.sparsity_loss_mode) for _, _, g in model.gate_vectors()]
    if not terms:
        return ad.Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def total_loss(model, batch, cfg, noise):
    ids, labels, mask = batch
    logits = model.forward(ids, mask, train=True, noise=noise)
    task = ad.cross_entropy(logits, labels)
    sparse = sparse_penalty(model, cfg)
    total = task + sparse * cfg.lam
    if not math.isfinite(total.item()):
        raise NumericError(f"non-finite loss (task={task.item()}, sparse={sparse.item()})")
    return LossParts(total, task, sparse)


def grad_norm(tensors):
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in tensors if p.grad is not None))


def train_step(model, batch, optim, cfg, noise, step=None):
    """One backward pass and parameter update; returns a metrics dict."""
    model.zero_grad()
    try:
        with ad.Tape() as tape:
            parts = total_loss(model, batch, cfg, noise)
        tape.backward(parts.total)
    except NumericError as exc:
        raise NumericError(f"step {step}: {exc}") from exc
    params = model.trainable_tensors()
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericError(f"step {step}: non-finite gradient in {p.name}")
    gnorm = grad_norm(params)
    optim.step()
    for _, _, g in model.gate_vectors():
        g.project()
    return {"step": step, "task_loss": parts.task.item(), "sparse_loss": parts.sparse.item(),
            "total_loss": parts.total.item(), "grad_norm": gnorm}


# ---------------------------------------------------------------- evaluation metrics


def gate_statistics(model, threshold=0.0):
    """(open_fraction_mean, achieved_sparsity) pooled over every gate of the model."""
    probs, closed, total = [], 0, 0
    for _, _, g in model.gate_vectors():
        with ad.no_grad():
            probs.append(open_probabilities(g).data)
        closed += int((eval_gates(g) <= threshold).sum())
        total += len(g)
    if not total:
        return 1.0, 0.0
    return float(np.concatenate(probs).mean()), closed / total


def predict(model, corpus, batch_size=256):
    preds = []
    for start in range(0, len(corpus), batch_size):
        ids, mask = pad_batch(corpus.sequences[start : start + batch_size])
        preds.append(np.argmax(model.logits(ids, mask), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model, corpus):
    if len(corpus) == 0:
        raise ConfigError("empty evaluation set")
    return float((predict(model, corpus) == corpus.labels).mean())


# ---------------------------------------------------------------- checkpoints


def model_checkpoint(model, train_cfg=None, extra_meta=None):
    meta = {"model_config": asdict(model.cfg), "pruned": model.pruned}
    if train_cfg is not None:
        meta["train_config"] = asdict(train_cfg)
    meta.update(extra_meta or {})
    tensors = {name: np.array(arr, dtype=np.float64) for name, arr in model.named_tensors().items()}
    return Checkpoint(tensors, meta)


def write_checkpoint(path, ckpt):
    return save_checkpoint(path, ckpt.tensors, ckpt.meta)


def model_from_checkpoint(ckpt):
    cfg = ModelConfig(**ckpt.model_config)
    tensors = dict(ckpt.tensors)
    model = Encoder(cfg, embedding=tensors["embedding"])
    if not ckpt.meta.get("pruned"):
        model.load_tensors(tensors)
        return model

    # Rebuild compacted layers from their index maps.
    for block in model.blocks:
        for proj, layer in block.layers():
            prefix = f"{block.name}.{proj}"
            W = tensors.pop(f"{prefix}.W_compact")
            rows = tensors.pop(f"{prefix}.kept_rows").astype(np.intp)
            cols = tensors.pop(f"{prefix}.kept_cols").astype(np.intp)
            bias = tensors.pop(f"{prefix}.bias_compact", None)
            setattr(block, proj, PrunedLinear(W, rows, cols, tuple(layer.shape), bias, prefix))
    model.pruned = True
    mine = model.named_tensors()
    for name, dst in mine.items():
        if name in tensors and not name.endswith(("W_compact", "kept_rows", "kept_cols")):
            dst[...] = tensors[name]
    return model


# ---------------------------------------------------------------- fit


@dataclass
class FitResult:
    history: list
    final: Checkpoint
    best: Checkpoint
    best_accuracy: float
    train_log: list = field(default_factory=list)

    @property
    def last(self):
        return self.history[-1]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def metrics_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in history:
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def fit(model, train, eval_corpus, cfg, out_dir=None, on_eval=None):
    """Train for ``cfg.max_steps`` steps, evaluating every ``cfg.eval_every`` steps and at the end."""
    cfg.validate()
    if len(train) == 0 or len(eval_corpus) == 0:
        raise ConfigError("training and evaluation sets must be non-empty")
    optim = build_optimizer(model, cfg)
    noise = GaussianNoise(np.random.default_rng([cfg.seed, 2]))
    history, train_log = [], []
    best, best_acc = None, -1.0

    def evaluate(step, last):
        nonlocal best, best_acc
        open_frac, sparsity = gate_statistics(model, cfg.threshold)
        row = {
            "step": step,
            "task_loss": last["task_loss"] if last else float("nan"),
            "sparse_loss": last["sparse_loss"] if last else float("nan"),
            "open_fraction_mean": open_frac,
            "achieved_sparsity": sparsity,
            "accuracy": accuracy(model, eval_corpus),
        }
        history.append(row)
        if row["accuracy"] > best_acc:
            best_acc = row["accuracy"]
            best = model_checkpoint(model, cfg, {"metrics_tail": row})
        if on_eval is not None:
            on_eval(row)

    step, epoch, last = 0, 0, None
    while step < cfg.max_steps:
        for batch in batches(train, cfg.batch_size, seed=cfg.seed, epoch=epoch):
            step += 1
            last = train_step(model, batch, optim, cfg, noise, step)
            train_log.append(last)
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                evaluate(step, last)
            if step >= cfg.max_steps:
                break
        epoch += 1
    if not history or history[-1]["step"] != step:
        evaluate(step, last)

    final = model_checkpoint(model, cfg, {"metrics_tail": history[-1]})
    result = FitResult(history, final, best, best_acc, train_log)
    if out_dir is not None:
        save_run(out_dir, result)
    return result


def save_run(out_dir, result):
    import os

    os.makedirs(out_dir, exist_ok=True)
    write_checkpoint(os.path.join(out_dir, "final.ckpt"), result.final)
    write_checkpoint(os.path.join(out_dir, "best.ckpt"), result.best)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        fh.write(metrics_csv(result.history))


def median_over_seeds(run, seeds):
    """Call ``run(seed) -> FitResult`` per seed; report medians of the final eval row."""
    results = [run(seed) for seed in seeds]
    rows = [r.last for r in results]
    return {
        "accuracy": float(np.median([r["accuracy"] for r in rows])),
        "achieved_sparsity": float(np.median([r["achieved_sparsity"] for r in rows])),
        "results": results,
    }
