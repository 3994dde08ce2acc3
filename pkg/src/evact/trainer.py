"""Desk-scale pipeline: synthetic labelled scenes -> adaptive frames -> CRUE -> Adam.

Also evaluation (top-k accuracy), event/text retrieval and the metrics
stream written during training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .autodiff import ParamStore
from .crue import CrueModel, LossConfig, ModelConfig
from .errors import TrainingDiverged, ValidationError
from .events import EventStream, Segment, SyntheticScene, generate_scene
from .representation import AfeConfig, FrameStack, afe_slice, render_frames

log = logging.getLogger(__name__)

METRICS_HEADER = "step,lr,L_contrastive,L_smoothL1,L_reg,L_final"
TOY_AFE = AfeConfig(delta=0.5, n_min=300, max_depth=6)


# ---------------------------------------------------------------------------
# dataset

@dataclass(frozen=True)
class ClassSpec:
    """A scene family: ``build(jitter)`` returns the segment list for one item."""

    name: str
    caption: str
    build: Callable[["_Jitter"], list[Segment]]


@dataclass
class _Jitter:
    rng: np.random.Generator
    width: int
    height: int
    pair_seeds: tuple[int, int]

    def duration(self, base=500_000) -> int:
        return int(base * self.rng.uniform(0.8, 1.2))

    def rate(self, base=0.01) -> float:
        return base * self.rng.uniform(0.8, 1.2)

    def center(self, spread=4) -> tuple[int, int]:
        return (self.width // 2 + int(self.rng.integers(-spread, spread + 1)),
                self.height // 2 + int(self.rng.integers(-spread, spread + 1)))

    def pattern(self) -> int:
        return int(self.rng.integers(0, 3))


def _sweep_settle(j: _Jitter, converse: bool) -> list[Segment]:
    # both members of the converse pair draw identical jitter so that only
    # the segment order differs
    sa, sb = j.pair_seeds
    bar = Segment(j.duration(), "bar", "right", j.rate(), seed=sa)
    tex = Segment(j.duration(), "texture", rate=j.rate(), pattern_seed=j.pattern(), seed=sb)
    return [tex, bar] if converse else [bar, tex]


CLASS_LIBRARY = {
    "sweep_settle": ClassSpec("sweep_settle", "a bar sweeps right and then a texture flickers in place",
                              lambda j: _sweep_settle(j, False)),
    "settle_sweep": ClassSpec("settle_sweep", "a texture flickers in place and then a bar sweeps right",
                              lambda j: _sweep_settle(j, True)),
    "expand": ClassSpec("expand", "a square outline grows outward from the middle",
                        lambda j: [Segment(2 * j.duration(), "square", "out", j.rate(), j.center())]),
    "oscillate": ClassSpec("oscillate", "a small dot swings left and right",
                           lambda j: [Segment(2 * j.duration(), "dot", "horizontal", j.rate(), j.center())]),
    "contract": ClassSpec("contract", "a square outline shrinks toward the middle",
                          lambda j: [Segment(2 * j.duration(), "square", "in", j.rate(), j.center())]),
    "sweep_left": ClassSpec("sweep_left", "a bar sweeps left across the view",
                            lambda j: [Segment(2 * j.duration(), "bar", "left", j.rate())]),
}
DEFAULT_CLASSES = ("sweep_settle", "settle_sweep", "expand", "oscillate")
# class-independent clutter that may be spliced into any item
DISTRACTORS = (("dot", "vertical"), ("square", "in"), ("bar", "down"), ("bar", "up"))


@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple[str, ...] = DEFAULT_CLASSES
    items_per_class: int = 50
    width: int = 32
    height: int = 32
    noise_rate: float = 0.001
    train_fraction: float = 0.8
    distractors: int = 0


@dataclass
class DataItem:
    stream: EventStream
    label: int
    split: str


@dataclass
class ToyDataset:
    items: list[DataItem]
    class_names: list[str]
    class_captions: list[str]
    seed: int
    _frames: dict = field(default_factory=dict, repr=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[int]:
        return [i for i, it in enumerate(self.items) if it.split == name]

    def labels(self, mode: str = "category") -> list[list[str]]:
        """Per-class token lists: the class name alone, or the full caption."""
        if mode == "category":
            return [[n] for n in self.class_names]
        if mode == "caption":
            return [[n, *c.split()] for n, c in zip(self.class_names, self.class_captions)]
        raise ValidationError(f"unknown label mode {mode!r}")

    @property
    def vocab(self) -> list[str]:
        words = list(self.class_names)
        for c in self.class_captions:
            words.extend(c.split())
        return list(dict.fromkeys(words))

    def frames(self, afe: AfeConfig) -> list[FrameStack]:
        """AFE-rendered frame stacks per item, cached per config."""
        if afe not in self._frames:
            self._frames[afe] = [render_frames(afe_slice(it.stream, afe)) for it in self.items]
        return self._frames[afe]


def scene_for(cls: ClassSpec, seed: int, item: int, spec: DatasetSpec, pair_seeds=None) -> SyntheticScene:
    rng = np.random.default_rng([seed, item])
    pair_seeds = pair_seeds or tuple(int(s) for s in rng.integers(0, 2**31, 2))
    j = _Jitter(rng, spec.width, spec.height, pair_seeds)
    segs = cls.build(j)
    for _ in range(spec.distractors):
        kind, direction = DISTRACTORS[int(rng.integers(len(DISTRACTORS)))]
        seg = Segment(j.duration(), kind, direction, j.rate(), j.center(), seed=int(rng.integers(2**31)))
        segs.insert(int(rng.integers(len(segs) + 1)), seg)
    return SyntheticScene(tuple(segs), spec.width, spec.height, spec.noise_rate,
                          seed=int(rng.integers(0, 2**31)))


def build_dataset(spec: DatasetSpec = DatasetSpec(), seed: int = 0) -> ToyDataset:
    """Deterministic labelled dataset with an 80/20 split inside every class."""
    if len(spec.classes) < 2:
        raise ValidationError(f"need at least 2 classes, got {len(spec.classes)}")
    if spec.items_per_class < 1:
        raise ValidationError("items_per_class must be >= 1")
    unknown = [c for c in spec.classes if c not in CLASS_LIBRARY]
    if unknown:
        raise ValidationError(f"unknown classes {unknown}; available: {sorted(CLASS_LIBRARY)}")
    n_train = int(round(spec.items_per_class * spec.train_fraction))
    items = []
    for label, name in enumerate(spec.classes):
        cls = CLASS_LIBRARY[name]
        for i in range(spec.items_per_class):
            scene = scene_for(cls, seed, label * 100_003 + i, spec)
            items.append(DataItem(generate_scene(scene), label, "train" if i < n_train else "test"))
    return ToyDataset(items, list(spec.classes), [CLASS_LIBRARY[c].caption for c in spec.classes], seed)


def converse_pair(seed: int, spec: DatasetSpec = DatasetSpec()) -> tuple[SyntheticScene, SyntheticScene]:
    """The two orderings of one sweep/settle item, sharing every random draw."""
    a = scene_for(CLASS_LIBRARY["sweep_settle"], seed, 0, spec)
    b = scene_for(CLASS_LIBRARY["settle_sweep"], seed, 0, spec)
    return a, b


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 2e-4
    lr_min: float = 1e-4
    seed: int = 0
    afe: AfeConfig = TOY_AFE
    loss: LossConfig = LossConfig()
    use_cr: bool = True
    use_ue: bool = True
    label_mode: str = "category"
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if self.lr < 0 or self.lr_min < 0:
            raise ValidationError("learning rates must be non-negative")

    def ablate(self, what: str) -> "TrainConfig":
        """``cr`` -> mean pooling, ``ue`` -> no Gaussian head, ``all`` -> both off."""
        flags = {"none": {}, "cr": {"use_cr": False}, "ue": {"use_ue": False},
                 "all": {"use_cr": False, "use_ue": False}}
        if what not in flags:
            raise ValidationError(f"unknown ablation {what!r}")
        return replace(self, **flags[what])


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, store: ParamStore, weight_decay=0.0, b1=0.9, b2=0.999, eps=1e-8):
        self.store, self.wd, self.b1, self.b2, self.eps = store, weight_decay, b1, b2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in store.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.store.items():
            g = p.grad + self.wd * p.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if lr == 0:
        return 0.0
    return lr_min + (lr - lr_min) * 0.5 * (1 + math.cos(math.pi * step / max(total, 1)))


def pad_batch(feats: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    t_max = max(len(f) for f in feats)
    out = np.zeros((len(feats), t_max, feats[0].shape[1]))
    mask = np.zeros((len(feats), t_max), dtype=bool)
    for i, f in enumerate(feats):
        out[i, :len(f)] = f
        mask[i, :len(f)] = True
    return out, mask


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_class: list[float]
    retrieval_hit: dict[int, float] = field(default_factory=dict)
    curves: dict[str, list[float]] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"top1={self.top1!r}", f"top5={self.top5!r}"]
        lines += [f"per_class.{i}={a!r}" for i, a in enumerate(self.per_class)]
        lines += [f"retrieval_hit@{k}={v!r}" for k, v in sorted(self.retrieval_hit.items())]
        lines += [f"curve.{k}={','.join(repr(x) for x in v)}" for k, v in self.curves.items()]
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    model: CrueModel
    report: EvalReport
    train_report: EvalReport
    metrics: list[dict]
    config: TrainConfig

    @property
    def store(self) -> ParamStore:
        return self.model.store

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def metrics_to_csv(rows: list[dict]) -> str:
    out = [METRICS_HEADER]
    for r in rows:
        out.append(",".join([str(r["step"])] + [f"{r[k]:.17g}" for k in
                                                 ("lr", "contrastive", "smooth_l1", "reg", "final")]))
    return "\n".join(out) + "\n"


def prepare_features(model: CrueModel, dataset: ToyDataset, afe: AfeConfig) -> list[np.ndarray]:
    return [model.frame_features(fs) for fs in dataset.frames(afe)]


def train(dataset: ToyDataset, config: TrainConfig = TrainConfig(), on_step=None) -> TrainResult:
    """Minibatch Adam with cosine-annealed learning rate; evaluates at the end.

    ``on_step`` receives each metrics row as it is produced.
    """
    model = CrueModel(dataset.vocab, config.model, seed=config.seed,
                      use_cr=config.use_cr, use_ue=config.use_ue)
    feats = prepare_features(model, dataset, config.afe)
    captions = dataset.labels(config.label_mode)
    train_idx = np.array(dataset.split("train"))
    if len(train_idx) == 0:
        raise ValidationError("dataset has no training items")
    labels = np.array([it.label for it in dataset.items])
    rng = np.random.default_rng([config.seed, 0xC0FFEE])
    opt = Adam(model.store, config.weight_decay)
    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    total = config.epochs * steps_per_epoch
    metrics = []
    step = 0
    for _ in range(config.epochs):
        perm = rng.permutation(train_idx)
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            x, mask = pad_batch([feats[i] for i in idx])
            loss, parts = model.loss(x, mask, captions, labels[idx], config.loss, rng)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at step {step}", step - 1)
            model.store.backward(loss)
            lr = cosine_lr(step, total, config.lr, config.lr_min)
            opt.step(lr)
            row = {"step": step, "lr": lr, **parts}
            metrics.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
    curves = _epoch_curves(metrics, steps_per_epoch)
    report = evaluate(model, dataset, "test", config, feats)
    report.curves = curves
    train_report = evaluate(model, dataset, "train", config, feats)
    return TrainResult(model, report, train_report, metrics, config)


def _epoch_curves(metrics, steps_per_epoch):
    curves = {}
    for key in ("contrastive", "smooth_l1", "reg", "final"):
        vals = np.array([m[key] for m in metrics])
        n = len(vals) // steps_per_epoch
        curves[key] = vals[:n * steps_per_epoch].reshape(n, steps_per_epoch).mean(axis=1).tolist()
    return curves


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    if len(labels) == 0:
        return 0.0
    k = min(k, scores.shape[1])
    # stable ranking: ties resolved toward the lower class index
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean([labels[i] in order[i] for i in range(len(labels))]))


def evaluate(model: CrueModel, dataset: ToyDataset, split: str = "test",
             config: TrainConfig = TrainConfig(), feats=None) -> EvalReport:
    """Top-1/top-5 classification by similarity to each class's text embedding."""
    feats = prepare_features(model, dataset, config.afe) if feats is None else feats
    idx = dataset.split(split)
    captions = dataset.labels(config.label_mode)
    labels = np.array([dataset.items[i].label for i in idx], dtype=int)
    scores = np.zeros((0, dataset.num_classes))
    if idx:
        parts = []
        for s in range(0, len(idx), 64):
            x, mask = pad_batch([feats[i] for i in idx[s:s + 64]])
            parts.append(model.class_scores(x, mask, captions))
        scores = np.concatenate(parts)
    per_class = []
    for c in range(dataset.num_classes):
        sel = labels == c
        per_class.append(topk_accuracy(scores[sel], labels[sel], 1) if sel.any() else 0.0)
    hits = {k: topk_accuracy(scores, labels, k) for k in (1, 5)}
    return EvalReport(topk_accuracy(scores, labels, 1), topk_accuracy(scores, labels, 5),
                      per_class, hits)


# ---------------------------------------------------------------------------
# retrieval

def _is_event(x) -> bool:
    return isinstance(x, (EventStream, FrameStack))


def _event_feats(model: CrueModel, items, afe: AfeConfig):
    out = []
    for it in items:
        fs = it if isinstance(it, FrameStack) else render_frames(afe_slice(it, afe))
        out.append(model.frame_features(fs))
    return pad_batch(out)


def retrieve(model: CrueModel, query, corpus: Sequence, k: int = 5,
             afe: AfeConfig = TOY_AFE) -> list[tuple[int, float]]:
    """Rank ``corpus`` by similarity to ``query``; returns the top ``k`` (index, score).

    Queries and corpus entries are event streams (or rendered frame stacks)
    or captions (token lists / strings). Event/text pairs are scored with
    the event fused under the text's guidance; same-modality pairs use plain
    cosine similarity of the text-free embeddings.
    """
    if len(corpus) == 0:
        raise ValidationError("retrieval corpus is empty")
    corpus = list(corpus)
    q_event = _is_event(query)
    c_event = [_is_event(c) for c in corpus]
    if len(set(c_event)) != 1:
        raise ValidationError("corpus mixes events and captions")
    if q_event and c_event[0]:
        x, m = _event_feats(model, [query] + corpus, afe)
        emb = model.event_embedding(x, m)
        scores = emb[1:] @ emb[0]
    elif not q_event and not c_event[0]:
        emb = model.text_embedding([query] + corpus)
        scores = emb[1:] @ emb[0]
    elif q_event:
        x, m = _event_feats(model, [query], afe)
        scores = model.class_scores(x, m, corpus)[0]
    else:
        x, m = _event_feats(model, corpus, afe)
        scores = model.class_scores(x, m, [query])[:, 0]
    order = np.argsort(-scores, kind="stable")[:min(k, len(corpus))]
    return [(int(i), float(scores[i])) for i in order]
