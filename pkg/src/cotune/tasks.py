"""Synthetic multimodal tasks and backbone pretraining.

Every example is generated from its own counter-based stream
``Philox(SeedSequence([seed, index]))``; training examples use indices
``0..n_train-1`` and evaluation examples ``EVAL_OFFSET + 0..n_eval-1``. No
global RNG state is touched.

Vocabulary layout (ids):

    0 PAD   1 END   2 Q   3 CAP   4 ASK_COLOR   5 ASK_SHAPE   6 ASK_COUNT   7 SEP
    8 ...   color values, then shape values, then count values
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .model import Batch, Example, ModelShape, ToyMLLM

PAD, END, Q, CAP, ASK_COLOR, ASK_SHAPE, ASK_COUNT, SEP = range(8)
FIRST_VALUE = 8
EVAL_OFFSET = 1_000_000
DATASET_FORMAT = "cotune-dataset"
DATASET_VERSION = 1


from .errors import ConfigError  # noqa: E402  (re-exported)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "qa"  # "qa" | "caption"
    n_colors: int = 4
    n_shapes: int = 4
    n_counts: int = 4
    noise: float = 0.1
    answer_len: tuple[int, int] = (1, 2)
    vocab: int = 64
    feat_dim: int = 16
    n_train: int = 512
    n_eval: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("qa", "caption"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if min(self.n_colors, self.n_shapes, self.n_counts, self.n_train, self.n_eval) < 1:
            raise ConfigError("attribute and split sizes must be >= 1")
        if self.vocab < FIRST_VALUE + self.n_colors + self.n_shapes + self.n_counts:
            raise ConfigError(f"vocab {self.vocab} too small for the attribute space")
        if self.feat_dim < self.n_colors + self.n_shapes + self.n_counts:
            raise ConfigError(f"feat_dim {self.feat_dim} too small for the attribute one-hots")
        lo, hi = self.answer_len
        if self.kind == "qa" and (lo, hi) != (1, 2):
            raise ConfigError("qa answers are 1-2 tokens")
        if self.kind == "caption" and (lo < 3 or hi < lo):
            raise ConfigError("caption answer length range must satisfy 3 <= lo <= hi")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["answer_len"] = list(self.answer_len)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["answer_len"] = tuple(d["answer_len"])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    # token ids of attribute values
    def color_token(self, c: int) -> int:
        return FIRST_VALUE + c

    def shape_token(self, s: int) -> int:
        return FIRST_VALUE + self.n_colors + s

    def count_token(self, n: int) -> int:
        return FIRST_VALUE + self.n_colors + self.n_shapes + n


PRESETS = {
    "toy-qa": TaskSpec(kind="qa", answer_len=(1, 2)),
    "toy-caption": TaskSpec(kind="caption", answer_len=(4, 10)),
}


def task_preset(name: str, seed: int = 0) -> TaskSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown task preset {name!r}") from None
    return TaskSpec(**{**base.to_dict(), "answer_len": base.answer_len, "seed": seed})


@dataclass
class Dataset:
    spec: TaskSpec
    train: list[Example]
    eval: list[Example]
    spec_hash: str = field(default="")

    def __post_init__(self):
        if not self.spec_hash:
            self.spec_hash = self.spec.hash()

    @property
    def seed(self) -> int:
        return self.spec.seed

    def content_hash(self) -> str:
        h = hashlib.sha256(self.spec_hash.encode())
        for e in self.train + self.eval:
            h.update(np.ascontiguousarray(e.feature, dtype="<f8").tobytes())
            h.update(np.asarray(e.instruction + (-1,) + e.answer, dtype="<i8").tobytes())
        return h.hexdigest()


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def attribute_features(spec: TaskSpec, color: int, shape: int, count: int) -> np.ndarray:
    f = np.zeros(spec.feat_dim)
    f[color] = 1.0
    f[spec.n_colors + shape] = 1.0
    f[spec.n_colors + spec.n_shapes + count] = 1.0
    return f


def caption_length(spec: TaskSpec, count: int) -> int:
    lo, hi = spec.answer_len
    if spec.n_counts == 1:
        return lo
    return lo + int(round(count * (hi - lo) / (spec.n_counts - 1)))


def label_for(spec: TaskSpec, color: int, shape: int, count: int, question: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(instruction, answer) as a deterministic function of the noiseless attributes."""
    c, s, n = spec.color_token(color), spec.shape_token(shape), spec.count_token(count)
    if spec.kind == "qa":
        if question == 0:
            return (Q, ASK_COLOR), (c,)
        if question == 1:
            return (Q, ASK_SHAPE), (s,)
        return (Q, ASK_COUNT), (n, s)
    cycle = (c, s, n)
    length = caption_length(spec, count)
    return (CAP, SEP), tuple(cycle[j % 3] for j in range(length))


def make_example(spec: TaskSpec, index: int) -> tuple[Example, tuple[int, int, int, int]]:
    g = _stream(spec.seed, index)
    color = int(g.integers(spec.n_colors))
    shape = int(g.integers(spec.n_shapes))
    count = int(g.integers(spec.n_counts))
    question = int(g.integers(3))
    feature = attribute_features(spec, color, shape, count) + g.normal(0.0, spec.noise, spec.feat_dim) \
        if spec.noise > 0 else attribute_features(spec, color, shape, count)
    instruction, answer = label_for(spec, color, shape, count, question)
    return Example(feature=feature, instruction=instruction, answer=answer), (color, shape, count, question)


def generate_dataset(spec: TaskSpec) -> Dataset:
    spec.validate()
    train = [make_example(spec, i)[0] for i in range(spec.n_train)]
    ev = [make_example(spec, EVAL_OFFSET + i)[0] for i in range(spec.n_eval)]
    return Dataset(spec=spec, train=train, eval=ev)


def nearest_attributes(spec: TaskSpec, feature: np.ndarray) -> tuple[int, int, int]:
    """Argmax within each one-hot block."""
    a, b = spec.n_colors, spec.n_colors + spec.n_shapes
    c = b + spec.n_counts
    return int(np.argmax(feature[:a])), int(np.argmax(feature[a:b])), int(np.argmax(feature[b:c]))


# ---------------------------------------------------------------- dataset files

def _example_to_json(e: Example) -> dict:
    return {
        "feature": [float(x) for x in e.feature],
        "instruction": list(e.instruction),
        "answer": list(e.answer),
    }


def _example_from_json(d: dict) -> Example:
    return Example(
        feature=np.array(d["feature"], dtype=np.float64),
        instruction=tuple(d["instruction"]),
        answer=tuple(d["answer"]),
    )


def save_dataset(ds: Dataset, path: str | Path) -> None:
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "spec": ds.spec.to_dict(),
        "spec_hash": ds.spec_hash,
        "seed": ds.seed,
        "train": [_example_to_json(e) for e in ds.train],
        "eval": [_example_to_json(e) for e in ds.eval],
    }
    Path(path).write_text(json.dumps(doc))


def load_dataset(path: str | Path, expect: TaskSpec | None = None) -> Dataset:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != DATASET_FORMAT or doc.get("version") != DATASET_VERSION:
        raise ConfigError(f"{path}: not a version-{DATASET_VERSION} dataset file")
    spec = TaskSpec.from_dict(doc["spec"])
    if spec.hash() != doc["spec_hash"]:
        raise ConfigError(f"{path}: stored spec hash does not match stored spec")
    if expect is not None and expect.hash() != doc["spec_hash"]:
        raise ConfigError(f"{path}: dataset was generated for a different task spec")
    return Dataset(
        spec=spec,
        train=[_example_from_json(d) for d in doc["train"]],
        eval=[_example_from_json(d) for d in doc["eval"]],
        spec_hash=doc["spec_hash"],
    )


def dump_text(ds: Dataset) -> str:
    lines = [f"# {DATASET_FORMAT} v{DATASET_VERSION} kind={ds.spec.kind} seed={ds.seed} spec={ds.spec_hash[:16]}"]
    for split, exs in (("train", ds.train), ("eval", ds.eval)):
        for i, e in enumerate(exs):
            feat = " ".join(f"{x:.3f}" for x in e.feature)
            lines.append(f"{split}\t{i}\t{' '.join(map(str, e.instruction))}\t"
                         f"{' '.join(map(str, e.answer))}\t{feat}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- backbone pretraining

@dataclass
class PretrainResult:
    backbone: dict[str, np.ndarray]
    initial_loss: float  # fixed probe batch, before training
    final_loss: float  # same probe batch, after training
    losses: list[float]  # per-update minibatch losses


def pretrain_backbone(
    spec: TaskSpec,
    steps: int,
    lr: float = 3e-3,
    shape: ModelShape | None = None,
    seed: int = 0,
    batch_size: int = 32,
    beta2: float = 0.99,
) -> PretrainResult:
    """Train X alone on text-only instruction/answer streams, then freeze it.

    With ``steps=0`` the returned backbone is the seeded initialization.
    """
    from .optim import AdamState, adam_step

    if steps < 0:
        raise ConfigError("steps must be >= 0")
    shape = shape or ModelShape(vocab=spec.vocab, feat_dim=spec.feat_dim)
    model = ToyMLLM(shape, seed=seed, end_token=END)
    params = model.backbone
    for t in params.values():
        t.requires_grad = True
    state = AdamState(alpha=lr, beta2=beta2)
    ds = generate_dataset(spec)
    texts = [Example(feature=np.zeros(0), instruction=e.instruction, answer=e.answer) for e in ds.train]

    def text_batch(idx):
        return Batch.from_examples([texts[i] for i in idx], n_soft=0, end_token=END)

    def loss_of(b: Batch) -> tc.Tensor:
        x = model.hidden(None, b.tokens, use_adapter=False)
        rows = tc.select_rows(x, b.row_example, b.row_pos)
        return tc.cross_entropy(tc.matmul(rows, params["out"]), b.targets, weights=b.weights)

    probe = text_batch(np.arange(min(len(texts), 128)))
    with tc.no_grad():
        initial = loss_of(probe).item()
    losses = []
    for k in range(steps):
        g = _stream(seed, 2_000_000 + k)
        b = text_batch(g.integers(len(texts), size=batch_size))
        for t in params.values():
            t.grad = None
        loss = loss_of(b)
        tc.backward(loss)
        losses.append(loss.item())
        grads = {n: t.grad for n, t in params.items()}
        new = adam_step(state, {n: t.data for n, t in params.items()}, grads)
        for n, t in params.items():
            t.data = new[n]
    with tc.no_grad():
        final = loss_of(probe).item()
    for t in params.values():
        t.requires_grad = False
        t.grad = None
    return PretrainResult(
        backbone={n: t.data.copy() for n, t in params.items()},
        initial_loss=initial, final_loss=final, losses=losses,
    )
