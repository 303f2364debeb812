"""Leave-k-client-out training.

Held-out (OOD) clients contribute nothing to the vocabulary, background
rates, sketches, or gradients; their corpora are only touched at evaluation
time. Runs are bit-reproducible from the seed: one generator (spawned from
the run seed) initializes parameters, a second drives shuffling and sketch
dropout, and the training loop is single-threaded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import metrics
from .model import (
    ModelConfig,
    ModelError,
    Params,
    batch_loss_and_grads,
    digest,
    init_params,
    lm_config,
)
from .sketch import (
    BackgroundModel,
    ClientCorpus,
    LengthScaler,
    SketchError,
    SketchVariant,
    Vocab,
    background_rates,
    build_vocab,
    compute_sketch,
    count_profile,
    document_frequencies,
    fit_length_scaler,
    mean_instance_length,
    sketch_dim,
    unlabeled_view,
)


class TrainingError(RuntimeError):
    pass


@dataclass
class Hyperparams:
    """Every knob of a training run; the seed fully determines the output."""

    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    dropout_p: float = -1.0  # <0 means task default (0.2 for lm, else 0)
    embed_dim: int = 32
    enc_hidden: int = 64
    digest_hidden: int = 256
    digest_dim: int = 0  # 0 means task default (32 for lm, else 128)
    deep_hidden: int = 128
    n_experts: int = 0  # 0 means one expert per training client
    combiner: str = "concat"
    sketch_variant: str = "saliency"
    vocab_max_size: int = 10000
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    smoothing_alpha: float = 1.0
    cased: bool = True

    def effective_dropout(self, task: str) -> float:
        if self.dropout_p >= 0:
            return self.dropout_p
        return 0.2 if task == "lm" else 0.0

    def effective_digest_dim(self, task: str) -> int:
        if self.digest_dim > 0:
            return self.digest_dim
        return 32 if task == "lm" else 128


HYPERPARAM_FIELDS = {f.name for f in Hyperparams.__dataclass_fields__.values()}


@dataclass(frozen=True)
class SplitSpec:
    all_clients: tuple[str, ...]
    ood_clients: tuple[str, ...]
    id_validation_fraction: float
    id_test_fraction: float
    seed: int


@dataclass
class DataSplit:
    spec: SplitSpec
    train: dict[str, ClientCorpus]
    val: dict[str, ClientCorpus]
    test: dict[str, ClientCorpus]
    ood: dict[str, ClientCorpus]

    @property
    def train_clients(self) -> list[str]:
        return list(self.train)


def _slice_corpus(corpus: ClientCorpus, idx: np.ndarray) -> ClientCorpus:
    instances = [corpus.instances[i] for i in idx]
    labels = [corpus.labels[i] for i in idx] if corpus.labels is not None else None
    return ClientCorpus(client_id=corpus.client_id, instances=instances, labels=labels)


def make_split(
    clients: list[ClientCorpus],
    ood_clients: list[str],
    val_fraction: float,
    seed: int,
    test_fraction: float | None = None,
) -> DataSplit:
    """Partition clients into training (with per-client train/val/test
    slices) and fully held-out OOD clients."""
    if not 0.0 < val_fraction < 1.0:
        raise TrainingError(f"val_fraction must be in (0,1), got {val_fraction}")
    if test_fraction is None:
        test_fraction = val_fraction
    if not 0.0 <= test_fraction < 1.0 or val_fraction + test_fraction >= 1.0:
        raise TrainingError("val_fraction + test_fraction must leave training data")
    by_id = {c.client_id: c for c in clients}
    for cid in ood_clients:
        if cid not in by_id:
            raise TrainingError(f"unknown OOD client: {cid}")
    ood_set = set(ood_clients)
    spec = SplitSpec(
        all_clients=tuple(sorted(by_id)),
        ood_clients=tuple(sorted(ood_set)),
        id_validation_fraction=val_fraction,
        id_test_fraction=test_fraction,
        seed=seed,
    )
    train: dict[str, ClientCorpus] = {}
    val: dict[str, ClientCorpus] = {}
    test: dict[str, ClientCorpus] = {}
    ood: dict[str, ClientCorpus] = {}
    for i, cid in enumerate(spec.all_clients):
        corpus = by_id[cid]
        if cid in ood_set:
            ood[cid] = corpus
            continue
        rng = np.random.default_rng([seed, i])
        order = rng.permutation(len(corpus.instances))
        n_val = int(round(val_fraction * len(order)))
        n_test = int(round(test_fraction * len(order)))
        if len(order) - n_val - n_test <= 0:
            raise TrainingError(f"client {cid} has no training instances left")
        val[cid] = _slice_corpus(corpus, order[:n_val])
        test[cid] = _slice_corpus(corpus, order[n_val : n_val + n_test])
        train[cid] = _slice_corpus(corpus, order[n_val + n_test :])
    return DataSplit(spec=spec, train=train, val=val, test=test, ood=ood)


Item = tuple[str, np.ndarray, object]


@dataclass
class RunData:
    """Everything a training run needs, frozen before the first epoch."""

    task: str
    cfg: ModelConfig
    vocab: Vocab
    bg: BackgroundModel
    df: np.ndarray
    scaler: LengthScaler | None
    label_names: list[str]
    sketches: dict[str, np.ndarray]
    ood_sketches: dict[str, np.ndarray]
    train_items: list[Item]
    val_items: dict[str, list[Item]]
    test_items: dict[str, list[Item]]
    ood_items: dict[str, list[Item]]


def _corpus_items(corpus: ClientCorpus, vocab: Vocab, task: str) -> list[Item]:
    items: list[Item] = []
    for i, inst in enumerate(corpus.instances):
        ids = vocab.ids_of(inst)
        if ids.shape[0] == 0:
            continue
        if task == "classify":
            label = corpus.labels[i]
        elif task == "tag":
            label = np.asarray(corpus.labels[i], dtype=np.int64)
        else:
            label = None
        items.append((corpus.client_id, ids, label))
    return items


def _client_sketch(
    variant: SketchVariant,
    corpus: ClientCorpus,
    vocab: Vocab,
    bg: BackgroundModel,
    df: np.ndarray,
    n_clients: int,
    scaler: LengthScaler | None,
) -> np.ndarray:
    profile = count_profile(unlabeled_view(corpus), vocab)
    sk = compute_sketch(
        variant,
        profile,
        bg=bg,
        df=df,
        n_clients=n_clients,
        scaler=scaler,
        mean_len=mean_instance_length(corpus),
    )
    return sk.values


def prepare_run(
    split: DataSplit, task: str, label_names: list[str], hyper: Hyperparams
) -> RunData:
    """Build vocabulary, background model, sketches, and id-mapped items.
    Only training-client training slices feed the vocabulary, the background
    rates, the document frequencies, and the length scaler."""
    train_corpora = [split.train[c] for c in sorted(split.train)]
    if not train_corpora:
        raise TrainingError("empty training set")
    vocab = build_vocab(train_corpora, hyper.vocab_max_size)
    profiles = [count_profile(unlabeled_view(c), vocab) for c in train_corpora]
    bg = background_rates(profiles, hyper.smoothing_alpha)
    df = document_frequencies(profiles)
    try:
        scaler = fit_length_scaler(train_corpora)
    except SketchError:
        scaler = None
    variant = SketchVariant(hyper.sketch_variant)
    if variant is SketchVariant.AVG_LENGTH and scaler is None:
        raise TrainingError("degenerate scaler: all training clients share one mean length")

    n_train = len(train_corpora)
    sketches = {
        c.client_id: _client_sketch(variant, c, vocab, bg, df, n_train, scaler)
        for c in train_corpora
    }
    ood_sketches = {
        cid: _client_sketch(variant, split.ood[cid], vocab, bg, df, n_train, scaler)
        for cid in sorted(split.ood)
    }

    if task == "lm":
        n_labels = vocab.size
    else:
        n_labels = len(label_names)
    n_experts = hyper.n_experts if hyper.n_experts > 0 else n_train
    s_dim = sketch_dim(variant, vocab.size)
    if task == "lm":
        cfg = lm_config(
            vocab_size=vocab.size,
            sketch_dim=s_dim,
            combiner=hyper.combiner,
            embed_dim=hyper.embed_dim,
            enc_hidden=hyper.enc_hidden,
            digest_dim=hyper.effective_digest_dim(task),
            n_experts=n_experts,
        )
    else:
        cfg = ModelConfig(
            task=task,
            combiner=hyper.combiner,
            vocab_size=vocab.size,
            n_labels=n_labels,
            sketch_dim=s_dim,
            embed_dim=hyper.embed_dim,
            enc_hidden=hyper.enc_hidden,
            digest_hidden=hyper.digest_hidden,
            digest_dim=hyper.effective_digest_dim(task),
            n_experts=n_experts,
            deep_hidden=hyper.deep_hidden,
        )

    train_items: list[Item] = []
    for c in train_corpora:
        train_items.extend(_corpus_items(c, vocab, task))
    val_items = {cid: _corpus_items(split.val[cid], vocab, task) for cid in sorted(split.val)}
    test_items = {cid: _corpus_items(split.test[cid], vocab, task) for cid in sorted(split.test)}
    ood_items = {cid: _corpus_items(split.ood[cid], vocab, task) for cid in sorted(split.ood)}
    return RunData(
        task=task,
        cfg=cfg,
        vocab=vocab,
        bg=bg,
        df=df,
        scaler=scaler,
        label_names=label_names,
        sketches=sketches,
        ood_sketches=ood_sketches,
        train_items=train_items,
        val_items=val_items,
        test_items=test_items,
        ood_items=ood_items,
    )


class Adam:
    """Adam with bias correction; one moment pair per tensor."""

    def __init__(self, params: Params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_metric: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    selected_epoch: int = -1
    val_metric_name: str = ""

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_metric,seconds"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.val_metric!r},{e.seconds:.3f}")
        return "\n".join(lines) + "\n"


def _client_digests(params: Params, cfg: ModelConfig,
                    sketches: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    if cfg.combiner == "baseline":
        return {cid: None for cid in sketches}
    return {cid: digest(params, cfg, s)[0] for cid, s in sketches.items()}


def validation_metric(
    params: Params, cfg: ModelConfig, run: RunData, items: dict[str, list[Item]]
) -> tuple[str, float]:
    """Pooled ID metric used for epoch selection: accuracy for
    classification, macro-F1 for tagging, perplexity for the LM."""
    digests = _client_digests(params, cfg, run.sketches)
    preds: list[int] = []
    golds: list[int] = []
    if cfg.task == "lm":
        per_client = []
        for cid, client_items in items.items():
            if client_items:
                per_client.append(
                    metrics.perplexity(params, cfg, [ids for _, ids, _ in client_items],
                                       digests[cid])
                )
        return "perplexity", float(np.mean(per_client))
    for cid, client_items in items.items():
        g = digests[cid]
        for _, ids, label in client_items:
            scores = metrics.predict_scores(params, cfg, ids, g)
            p = scores.argmax(axis=1)
            if cfg.task == "classify":
                preds.append(int(p[0]))
                golds.append(int(label))
            else:
                preds.extend(int(x) for x in p)
                golds.extend(int(x) for x in label)
    if cfg.task == "classify":
        return "accuracy", metrics.accuracy(preds, golds)
    _, macro = metrics.token_f1(preds, golds, cfg.n_labels, exclude_class=0)
    return "macro_f1", macro


def train(run: RunData, hyper: Hyperparams) -> tuple[Params, TrainLog]:
    """Mini-batch Adam with best-epoch selection on the ID validation
    metric. Bit-deterministic given the seed."""
    if not run.train_items:
        raise TrainingError("empty training set")
    ss = np.random.SeedSequence(hyper.seed)
    init_ss, data_ss = ss.spawn(2)
    params = init_params(run.cfg, np.random.default_rng(init_ss))
    data_rng = np.random.default_rng(data_ss)
    opt = Adam(params, hyper.learning_rate)
    dropout_p = hyper.effective_dropout(run.task)
    log = TrainLog()
    best_metric: float | None = None
    best_params: Params | None = None
    lower_is_better = run.task == "lm"
    n = len(run.train_items)
    for epoch in range(hyper.epochs):
        start = time.monotonic()
        order = data_rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, hyper.batch_size):
            batch = [run.train_items[i] for i in order[lo : lo + hyper.batch_size]]
            loss, grads = batch_loss_and_grads(
                params,
                run.cfg,
                batch,
                run.sketches,
                train_mode=True,
                dropout_p=dropout_p,
                rng=data_rng,
            )
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {lo // hyper.batch_size}"
                )
            opt.step(params, grads)
            epoch_loss += loss * len(batch)
        name, val_metric = validation_metric(params, run.cfg, run, run.val_items)
        log.val_metric_name = name
        log.epochs.append(
            EpochStats(
                epoch=epoch,
                train_loss=epoch_loss / n,
                val_metric=val_metric,
                seconds=time.monotonic() - start,
            )
        )
        better = (
            best_metric is None
            or (val_metric < best_metric if lower_is_better else val_metric > best_metric)
        )
        if better:
            best_metric = val_metric
            best_params = {k: v.copy() for k, v in params.items()}
            log.selected_epoch = epoch
    assert best_params is not None
    return best_params, log
