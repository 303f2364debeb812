"""Client corpus sketches.

A client is summarized by a fixed-size vector computed from its unlabeled
corpus: word counts are compared against a smoothed global background rate
(term saliency), or reduced to TF-IDF / binary bag-of-words / average
instance length. Sketches are the only client-specific input the server
ever sees, so everything here is deterministic and pure.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

UNK_TOKEN = "<unk>"

_PUNCT = set(string.punctuation)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class SketchError(ValueError):
    """Invalid input to a sketch computation."""


class SketchVariant(str, Enum):
    SALIENCY = "saliency"
    TFIDF = "tfidf"
    BBOW = "bbow"
    AVG_LENGTH = "avg_length"


@dataclass(frozen=True)
class Vocab:
    """Dense word → id mapping with a single UNK bucket at the end."""

    words: tuple[str, ...]
    index: dict[str, int]
    unk_index: int

    @property
    def size(self) -> int:
        return len(self.words)

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_index)

    def ids_of(self, tokens: list[str]) -> np.ndarray:
        unk = self.unk_index
        idx = self.index
        return np.array([idx.get(t, unk) for t in tokens], dtype=np.int64)

    @classmethod
    def from_words(cls, words: list[str]) -> "Vocab":
        if len(set(words)) != len(words):
            raise SketchError("duplicate words in vocabulary")
        if UNK_TOKEN not in words:
            raise SketchError("vocabulary missing UNK token")
        return cls(
            words=tuple(words),
            index={w: i for i, w in enumerate(words)},
            unk_index=words.index(UNK_TOKEN),
        )


@dataclass
class ClientCorpus:
    """One client's instances. labels is None for registration-time corpora,
    a list of ints for instance classification, or a list of per-token int
    lists for tagging."""

    client_id: str
    instances: list[list[str]]
    labels: list | None = None


@dataclass(frozen=True)
class CountProfile:
    """Per-client word counts over a fixed vocabulary."""

    counts: np.ndarray  # (V,) int64
    total: int


@dataclass(frozen=True)
class BackgroundModel:
    """Smoothed global unigram rates pooled over the training clients."""

    rates: np.ndarray  # (V,) float64, each in (0,1), sums to 1
    smoothing_alpha: float
    n_train_clients: int


@dataclass(frozen=True)
class Sketch:
    variant: SketchVariant
    values: np.ndarray  # float64

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class LengthScaler:
    """Affine map sending the training clients' mean instance lengths to
    [-1, 1]. Out-of-range clients extrapolate past the endpoints."""

    min_len: float
    max_len: float

    def transform(self, mean_len: float) -> float:
        return 2.0 * (mean_len - self.min_len) / (self.max_len - self.min_len) - 1.0


def tokenize(text: str, cased: bool = True) -> list[str]:
    """Whitespace split with leading/trailing punctuation detached as
    separate tokens. Lowercases unless cased."""
    if not cased:
        text = text.lower()
    out: list[str] = []
    for piece in text.split():
        head: list[str] = []
        tail: list[str] = []
        while piece and piece[0] in _PUNCT:
            head.append(piece[0])
            piece = piece[1:]
        while piece and piece[-1] in _PUNCT:
            tail.append(piece[-1])
            piece = piece[:-1]
        out.extend(head)
        if piece:
            out.append(piece)
        out.extend(reversed(tail))
    return out


def build_vocab(corpora: list[ClientCorpus], max_size: int) -> Vocab:
    """Top-(max_size-1) words by total frequency plus UNK, ties broken
    lexicographically."""
    if max_size < 1:
        raise SketchError("max_size must be >= 1")
    if not corpora:
        raise SketchError("empty corpus")
    freq: dict[str, int] = {}
    for corpus in corpora:
        for instance in corpus.instances:
            for token in instance:
                if token == UNK_TOKEN:
                    continue
                freq[token] = freq.get(token, 0) + 1
    if not freq:
        raise SketchError("empty corpus")
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[: max_size - 1]]
    words.append(UNK_TOKEN)
    return Vocab.from_words(words)


def count_profile(corpus: ClientCorpus, vocab: Vocab) -> CountProfile:
    """Word counts of a client corpus; out-of-vocab tokens land on UNK."""
    counts = np.zeros(vocab.size, dtype=np.int64)
    total = 0
    for instance in corpus.instances:
        for token in instance:
            counts[vocab.id_of(token)] += 1
            total += 1
    if total == 0:
        raise SketchError("empty corpus")
    return CountProfile(counts=counts, total=total)


def background_rates(
    profiles: list[CountProfile], smoothing_alpha: float = 1.0
) -> BackgroundModel:
    """Pooled unigram rates p_w = (a + sum_c n_cw) / (a*V + sum_cw n_cw)."""
    if smoothing_alpha < 0:
        raise SketchError("smoothing_alpha must be >= 0")
    if not profiles:
        raise SketchError("no profiles")
    pooled = np.zeros_like(profiles[0].counts, dtype=np.float64)
    for p in profiles:
        pooled += p.counts
    grand_total = float(pooled.sum())
    if grand_total == 0:
        raise SketchError("all profiles empty")
    vocab_size = pooled.shape[0]
    rates = (smoothing_alpha + pooled) / (smoothing_alpha * vocab_size + grand_total)
    return BackgroundModel(
        rates=rates,
        smoothing_alpha=smoothing_alpha,
        n_train_clients=len(profiles),
    )


def document_frequencies(profiles: list[CountProfile]) -> np.ndarray:
    """Number of clients in which each word occurs at least once."""
    if not profiles:
        raise SketchError("no profiles")
    df = np.zeros_like(profiles[0].counts, dtype=np.int64)
    for p in profiles:
        df += (p.counts > 0).astype(np.int64)
    return df


def _l2_normalize(raw: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        return raw
    return raw / norm


def saliency_sketch(profile: CountProfile, bg: BackgroundModel) -> Sketch:
    """Term-saliency vector: per word, the negative log probability of the
    observed count under the background rate, L2-normalized.

    raw_w = -n_w * log(p_w) - (N - n_w) * log(1 - p_w)
    """
    p = bg.rates
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise SketchError("unsmoothed background")
    n = profile.counts.astype(np.float64)
    total = float(profile.total)
    raw = -(n * np.log(p) + (total - n) * np.log1p(-p))
    values = _l2_normalize(raw)
    if not np.all(np.isfinite(values)):
        raise SketchError("non-finite sketch values")
    return Sketch(variant=SketchVariant.SALIENCY, values=values)


def tfidf_sketch(profile: CountProfile, df: np.ndarray, n_clients: int) -> Sketch:
    """Client-as-document TF-IDF: tf is relative frequency, idf is
    log(n_clients / df). L2-normalized; an all-zero vector stays zero."""
    if n_clients == 0:
        raise SketchError("n_clients must be positive")
    if df.shape != profile.counts.shape:
        raise SketchError("df shape mismatch")
    tf = profile.counts.astype(np.float64) / float(profile.total)
    idf = np.log(float(n_clients) / np.maximum(df, 1).astype(np.float64))
    values = _l2_normalize(tf * idf)
    return Sketch(variant=SketchVariant.TFIDF, values=values)


def bbow_sketch(profile: CountProfile) -> Sketch:
    """Binary occurrence vector, unnormalized."""
    values = (profile.counts > 0).astype(np.float64)
    return Sketch(variant=SketchVariant.BBOW, values=values)


def mean_instance_length(corpus: ClientCorpus) -> float:
    if not corpus.instances:
        raise SketchError("empty corpus")
    return sum(len(inst) for inst in corpus.instances) / len(corpus.instances)


def fit_length_scaler(corpora: list[ClientCorpus]) -> LengthScaler:
    means = [mean_instance_length(c) for c in corpora]
    lo, hi = min(means), max(means)
    if hi == lo:
        raise SketchError("degenerate scaler")
    return LengthScaler(min_len=float(lo), max_len=float(hi))


def avg_length_sketch(
    corpus_mean_len: float | ClientCorpus, scaler: LengthScaler
) -> Sketch:
    """Single-scalar sketch: mean instance length through the train-fitted
    affine map. Values outside [-1, 1] are legitimate extrapolation."""
    if scaler.max_len == scaler.min_len:
        raise SketchError("degenerate scaler")
    if isinstance(corpus_mean_len, ClientCorpus):
        corpus_mean_len = mean_instance_length(corpus_mean_len)
    value = scaler.transform(float(corpus_mean_len))
    return Sketch(
        variant=SketchVariant.AVG_LENGTH, values=np.array([value], dtype=np.float64)
    )


def compute_sketch(
    variant: SketchVariant,
    profile: CountProfile,
    *,
    bg: BackgroundModel | None = None,
    df: np.ndarray | None = None,
    n_clients: int | None = None,
    scaler: LengthScaler | None = None,
    mean_len: float | None = None,
) -> Sketch:
    """Dispatch over the four sketch variants from a raw count profile.

    avg_length additionally needs the corpus mean instance length, which a
    count profile alone cannot supply."""
    variant = SketchVariant(variant)
    if variant is SketchVariant.SALIENCY:
        if bg is None:
            raise SketchError("saliency sketch needs a background model")
        return saliency_sketch(profile, bg)
    if variant is SketchVariant.TFIDF:
        if df is None or n_clients is None:
            raise SketchError("tfidf sketch needs document frequencies")
        return tfidf_sketch(profile, df, n_clients)
    if variant is SketchVariant.BBOW:
        return bbow_sketch(profile)
    if variant is SketchVariant.AVG_LENGTH:
        if scaler is None:
            raise SketchError("avg_length sketch needs a fitted scaler")
        if mean_len is None:
            raise SketchError("avg_length sketch needs the mean instance length")
        return avg_length_sketch(mean_len, scaler)
    raise SketchError(f"unknown sketch variant: {variant}")


def sketch_dim(variant: SketchVariant, vocab_size: int) -> int:
    return 1 if SketchVariant(variant) is SketchVariant.AVG_LENGTH else vocab_size


# ---------------------------------------------------------------------------
# Counts payload exchange format
# ---------------------------------------------------------------------------

def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def vocab_hash(vocab: Vocab) -> str:
    """64-bit FNV-1a over the concatenated vocabulary words, hex-encoded."""
    return f"{fnv1a_64(''.join(vocab.words).encode('utf-8')):016x}"


def counts_payload(
    client_id: str,
    vocab: Vocab,
    profile: CountProfile,
    n_instances: int | None = None,
) -> dict:
    """JSON-serializable registration payload of raw counts."""
    payload = {
        "client_id": client_id,
        "vocab_hash": vocab_hash(vocab),
        "counts": [int(c) for c in profile.counts],
        "total": int(profile.total),
    }
    if n_instances is not None:
        payload["n_instances"] = int(n_instances)
    return payload


def parse_counts_payload(obj: dict) -> tuple[str, str, CountProfile, int | None]:
    """Validate a counts payload; returns (client_id, vocab_hash, profile,
    n_instances)."""
    try:
        client_id = str(obj["client_id"])
        declared_hash = str(obj["vocab_hash"])
        counts = np.array([int(c) for c in obj["counts"]], dtype=np.int64)
        total = int(obj["total"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SketchError(f"malformed counts payload: {exc}") from exc
    if np.any(counts < 0):
        raise SketchError("negative counts")
    if total != int(counts.sum()):
        raise SketchError("total does not match counts")
    n_instances = obj.get("n_instances")
    if n_instances is not None:
        n_instances = int(n_instances)
        if n_instances <= 0:
            raise SketchError("n_instances must be positive")
    return client_id, declared_hash, CountProfile(counts=counts, total=total), n_instances


# ---------------------------------------------------------------------------
# Corpus directory format
# ---------------------------------------------------------------------------
# One directory per client (directory name = client_id). Inside:
#   instances.txt  one plain-text instance per line (lm / registration corpora)
#   labeled.tsv    "<label>\t<text>" per line (instance classification)
#   tagged.tsv     "token\ttag" lines, blank line between instances (tagging)

def write_client_dir(
    corpus: ClientCorpus, path: Path, task: str, label_names: list[str] | None = None
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if task == "classify" and corpus.labels is not None:
        assert label_names is not None
        lines = [
            f"{label_names[label]}\t{' '.join(inst)}"
            for inst, label in zip(corpus.instances, corpus.labels)
        ]
        (path / "labeled.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif task == "tag" and corpus.labels is not None:
        assert label_names is not None
        blocks = []
        for inst, tags in zip(corpus.instances, corpus.labels):
            blocks.append(
                "\n".join(f"{tok}\t{label_names[t]}" for tok, t in zip(inst, tags))
            )
        (path / "tagged.tsv").write_text("\n\n".join(blocks) + "\n", encoding="utf-8")
    else:
        lines = [" ".join(inst) for inst in corpus.instances]
        (path / "instances.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_client_dir(
    path: Path, task: str, label_index: dict[str, int] | None = None
) -> ClientCorpus:
    path = Path(path)
    client_id = path.name
    labeled = path / "labeled.tsv"
    tagged = path / "tagged.tsv"
    plain = path / "instances.txt"
    if task == "classify" and labeled.exists():
        assert label_index is not None
        instances, labels = [], []
        for line in labeled.read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            name, _, text = line.partition("\t")
            instances.append(text.split())
            labels.append(label_index[name])
        return ClientCorpus(client_id=client_id, instances=instances, labels=labels)
    if task == "tag" and tagged.exists():
        assert label_index is not None
        instances, labels = [], []
        tokens: list[str] = []
        tags: list[int] = []
        for line in tagged.read_text(encoding="utf-8").splitlines() + [""]:
            if not line:
                if tokens:
                    instances.append(tokens)
                    labels.append(tags)
                    tokens, tags = [], []
                continue
            tok, _, tag = line.partition("\t")
            tokens.append(tok)
            tags.append(label_index[tag])
        return ClientCorpus(client_id=client_id, instances=instances, labels=labels)
    if not plain.exists():
        raise FileNotFoundError(f"no corpus file in {path}")
    instances = [
        line.split()
        for line in plain.read_text(encoding="utf-8").splitlines()
        if line
    ]
    return ClientCorpus(client_id=client_id, instances=instances)


def unlabeled_view(corpus: ClientCorpus) -> ClientCorpus:
    """The registration-time view of a corpus: instances without labels."""
    return ClientCorpus(client_id=corpus.client_id, instances=corpus.instances)
