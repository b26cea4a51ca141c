"""Task sources: a planted-sparse-feature generator and a TSV classification loader.

In the planted task the label depends only on a chosen subset of embedding
dimensions. Each sequence starts with a CLS token followed by content tokens.
The label is the argmax of an orthonormal projection of the mean content-token
embedding restricted to the informative dimensions. That makes the removable
(uninformative) dimensions known in advance.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
PAD_TOKEN, UNK_TOKEN, CLS_TOKEN = "<pad>", "<unk>", "<cls>"


@dataclass
class Corpus:
    sequences: list
    labels: np.ndarray
    vocab: dict
    split: str = "train"
    num_classes: int = 2
    embedding: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.sequences)

    def subset(self, idx, split=None):
        idx = list(idx)
        return Corpus([self.sequences[i] for i in idx], self.labels[idx], self.vocab,
                      split or self.split, self.num_classes, self.embedding)


@dataclass
class PlantedTaskSpec:
    vocab_size: int = 256
    seq_len: int = 8
    num_classes: int = 2
    model_dim: int = 32
    informative_dims: tuple = tuple(range(16))
    noise_rate: float = 0.0
    num_samples: int = 5000
    seed: int = 0
    # Samples whose top-two class scores differ by less than this are redrawn.
    margin: float = 0.05

    def validate(self):
        dims = tuple(int(i) for i in self.informative_dims)
        if not dims or any(i < 0 or i >= self.model_dim for i in dims):
            raise ConfigError(f"informative_dims must be a non-empty subset of [0, {self.model_dim})")
        if len(set(dims)) != len(dims) or len(dims) >= self.model_dim:
            raise ConfigError("informative_dims must be distinct and strictly fewer than model_dim")
        if self.num_classes > len(dims):
            raise ConfigError("num_classes cannot exceed the number of informative dims")
        if self.vocab_size <= CLS_ID + 1 or self.seq_len < 2:
            raise ConfigError("vocab_size must exceed the reserved ids and seq_len must be >= 2")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError("noise_rate must lie in [0, 1)")
        self.informative_dims = dims
        return self


def planted_vocab(vocab_size):
    vocab = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID, CLS_TOKEN: CLS_ID}
    for i in range(CLS_ID + 1, vocab_size):
        vocab[f"t{i}"] = i
    return vocab


def planted_embedding(spec):
    rng = np.random.default_rng([spec.seed, 7])
    return rng.normal(0.0, 1.0, (spec.vocab_size, spec.model_dim))


def planted_projection(spec):
    rng = np.random.default_rng([spec.seed, 11])
    q, _ = np.linalg.qr(rng.normal(size=(len(spec.informative_dims), spec.num_classes)))
    return q


def planted_scores(spec, embedding, sequences):
    """Class scores of the planted rule; argmax gives the noise-free label."""
    dims = np.asarray(spec.informative_dims)
    proj = planted_projection(spec)
    center = embedding[CLS_ID + 1 :].mean(axis=0)[dims]
    feats = np.stack([embedding[s[1:]].mean(axis=0)[dims] for s in sequences])
    return (feats - center) @ proj


def generate_planted(spec):
    """Draw a corpus whose label depends only on the informative dims.

    Classes are filled to equal quotas before label noise, then shuffled.
    """
    spec.validate()
    embedding = planted_embedding(spec)
    rng = np.random.default_rng([spec.seed, 3])
    dims = np.asarray(spec.informative_dims)
    proj = planted_projection(spec)
    center = embedding[CLS_ID + 1 :].mean(axis=0)[dims]
    quota = -(-spec.num_samples // spec.num_classes)
    counts = np.zeros(spec.num_classes, dtype=np.int64)
    sequences, labels = [], []
    while len(sequences) < spec.num_samples:
        toks = rng.integers(CLS_ID + 1, spec.vocab_size, size=spec.seq_len - 1)
        scores = (embedding[toks].mean(axis=0)[dims] - center) @ proj
        top = np.sort(scores)[::-1]
        label = int(np.argmax(scores))
        if top[0] - top[1] < spec.margin or counts[label] >= quota:
            continue
        counts[label] += 1
        sequences.append(np.concatenate([[CLS_ID], toks]).astype(np.int64))
        labels.append(label)
    order = rng.permutation(len(sequences))
    sequences = [sequences[i] for i in order]
    labels = np.asarray(labels, dtype=np.int64)[order]
    if spec.noise_rate > 0:
        flip = rng.random(len(labels)) < spec.noise_rate
        shift = rng.integers(1, spec.num_classes, size=len(labels))
        labels = np.where(flip, (labels + shift) % spec.num_classes, labels)
    return Corpus(sequences, labels, planted_vocab(spec.vocab_size), "train", spec.num_classes, embedding)


def split_corpus(corpus, eval_fraction=0.2):
    n_eval = int(round(len(corpus) * eval_fraction))
    n_train = len(corpus) - n_eval
    return corpus.subset(range(n_train), "train"), corpus.subset(range(n_train, len(corpus)), "eval")


def _read_tsv(path, max_samples=None):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if max_samples is not None and len(rows) >= max_samples:
                break
            label, sep, text = line.partition("\t")
            if not sep:
                raise InputError(f"{path}:{lineno}: expected 'label<TAB>tokens'")
            try:
                label = int(label)
            except ValueError:
                raise InputError(f"{path}:{lineno}: label {label!r} is not an integer") from None
            if label < 0:
                raise InputError(f"{path}:{lineno}: negative label {label}")
            tokens = text.split()
            if not tokens:
                raise InputError(f"{path}:{lineno}: no tokens")
            rows.append((label, tokens))
    if not rows:
        raise InputError(f"{path}: no examples")
    return rows


def build_vocab(token_lists):
    vocab = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID, CLS_TOKEN: CLS_ID}
    for tokens in token_lists:
        for tok in tokens:
            if tok not in vocab:
                vocab[tok] = len(vocab)
    return vocab


def load_tsv(path, max_samples=None, vocab=None, num_classes=None, split="train"):
    """Load ``label<TAB>tokens`` lines. Without ``vocab`` one is built from this file."""
    rows = _read_tsv(path, max_samples)
    if vocab is None:
        vocab = build_vocab(tokens for _, tokens in rows)
    seqs = [np.asarray([vocab.get(t, UNK_ID) for t in tokens], dtype=np.int64) for _, tokens in rows]
    labels = np.asarray([label for label, _ in rows], dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.max() >= num_classes:
        raise InputError(f"{path}: label {labels.max()} outside [0, {num_classes})")
    return Corpus(seqs, labels, vocab, split, num_classes)


def save_vocab(vocab, path):
    with open(path, "w", encoding="utf-8") as fh:
        for tok, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
            fh.write(f"{tok}\t{idx}\n")


def load_vocab(path):
    vocab = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok, sep, idx = line.rstrip("\n").rpartition("\t")
            if not sep:
                raise InputError(f"{path}:{lineno}: expected 'token<TAB>id'")
            vocab[tok] = int(idx)
    return vocab


def pad_batch(sequences, pad_id=PAD_ID, length=None):
    length = length or max(len(s) for s in sequences)
    ids = np.full((len(sequences), length), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for i, s in enumerate(sequences):
        s = s[:length]
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def batches(corpus, batch_size, seed=0, pad_id=PAD_ID, epoch=0, shuffle=True):
    """Yield ``(ids, labels, mask)`` blocks covering one epoch, right-padded."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(corpus))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        ids, mask = pad_batch([corpus.sequences[i] for i in idx], pad_id)
        yield ids, corpus.labels[idx], mask
