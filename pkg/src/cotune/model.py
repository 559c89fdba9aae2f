"""Toy two-component multimodal generator.

Composition: a trainable feature encoder S maps a feature vector to ``n_soft``
soft tokens; they are prefixed to the instruction and answer token embeddings
and run through a frozen causal language backbone X. Low-rank adapters T
modify the backbone's query/value projections and first MLP layer
(effective weight ``W + A @ B``).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint
from . import tensor as tc
from .tensor import ContractError, Tensor

COMPONENTS = ("S", "T")


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelShape:
    vocab: int = 64
    dim: int = 32
    n_blocks: int = 2
    n_soft: int = 4
    feat_dim: int = 16
    rank: int = 4
    max_seq: int = 24
    mlp_hidden: int = 64
    enc_hidden: int = 32

    def __post_init__(self):
        if self.n_soft < 1 or self.rank < 1 or self.vocab < 2:
            raise ValueError(f"invalid model shape {self}")


@dataclass(frozen=True)
class Example:
    feature: np.ndarray
    instruction: tuple[int, ...]
    answer: tuple[int, ...]

    def __post_init__(self):
        if len(self.answer) == 0:
            raise ValueError("answer must be non-empty")


@dataclass
class Batch:
    """Padded, teacher-forced view of a list of examples.

    Targets are the answer tokens followed by the end token; row ``r`` of the
    prediction matrix is read at ``row_pos[r]`` of example ``row_example[r]``.
    """

    features: np.ndarray  # [B, F]
    tokens: np.ndarray  # [B, L] instruction + answer, right padded
    instr_len: np.ndarray  # [B]
    row_example: np.ndarray  # [M]
    row_pos: np.ndarray  # [M] index into the full sequence (soft prefix included)
    targets: np.ndarray  # [M]
    weights: np.ndarray  # [M], sums to 1: 1/N outer mean, 1/K_i inner mean

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_examples(
        cls, examples: Sequence[Example], n_soft: int, end_token: int, pad_token: int = 0
    ) -> "Batch":
        if not examples:
            raise ContractError("batch must be non-empty")
        n = len(examples)
        width = max(len(e.instruction) + len(e.answer) for e in examples)
        tokens = np.full((n, width), pad_token, dtype=np.int64)
        rows_e, rows_p, targets, weights = [], [], [], []
        for i, e in enumerate(examples):
            seq = list(e.instruction) + list(e.answer)
            tokens[i, : len(seq)] = seq
            tgt = list(e.answer) + [end_token]
            start = n_soft + len(e.instruction) - 1
            for j, y in enumerate(tgt):
                rows_e.append(i)
                rows_p.append(start + j)
                targets.append(y)
                weights.append(1.0 / (n * len(tgt)))
        return cls(
            features=np.stack([np.asarray(e.feature, dtype=np.float64) for e in examples]),
            tokens=tokens,
            instr_len=np.array([len(e.instruction) for e in examples], dtype=np.int64),
            row_example=np.array(rows_e, dtype=np.int64),
            row_pos=np.array(rows_p, dtype=np.int64),
            targets=np.array(targets, dtype=np.int64),
            weights=np.array(weights, dtype=np.float64),
        )


@dataclass
class GenerationDistribution:
    """Per answer position next-token distributions under teacher forcing."""

    probs: np.ndarray  # [M, V]
    row_example: np.ndarray
    row_pos: np.ndarray
    n_examples: int

    def same_layout(self, other: "GenerationDistribution") -> bool:
        return (
            self.n_examples == other.n_examples
            and np.array_equal(self.row_example, other.row_example)
            and np.array_equal(self.row_pos, other.row_pos)
        )


def _checksum(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()


class ComponentParams:
    """Named parameter set of one component.

    ``apply_delta`` remembers the pre-image of each application, so applying
    the same delta with the negated scale restores the previous values
    exactly instead of relying on floating-point cancellation.
    """

    def __init__(self, name: str, tensors: dict[str, Tensor]):
        self.name = name
        self.tensors = tensors
        self._undo: list[tuple[float, dict[str, np.ndarray], dict[str, np.ndarray]]] = []

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.tensors.items()
        }

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def checksum(self) -> str:
        return _checksum(self.arrays())

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            t.data = np.array(arrays[k], dtype=np.float64, copy=True)
        self._undo.clear()

    def apply_delta(self, delta: Mapping[str, np.ndarray], scale: float) -> None:
        """theta <- theta + scale * delta."""
        if set(delta) != set(self.tensors):
            raise ContractError(f"apply_delta[{self.name}]: parameter names do not match")
        for k, t in self.tensors.items():
            if np.shape(delta[k]) != t.shape:
                raise ContractError(
                    f"apply_delta[{self.name}]: {k} shape {np.shape(delta[k])} != {t.shape}"
                )
        if self._undo:
            prev_scale, prev_delta, pre = self._undo[-1]
            if prev_scale == -scale and all(np.array_equal(prev_delta[k], delta[k]) for k in delta):
                self._undo.pop()
                for k, t in self.tensors.items():
                    t.data = pre[k]
                return
        if scale == 0.0:
            return
        pre = {k: t.data for k, t in self.tensors.items()}
        self._undo.append((scale, {k: np.array(delta[k], copy=True) for k in delta}, pre))
        if len(self._undo) > 8:
            del self._undo[0]
        for k, t in self.tensors.items():
            t.data = t.data + scale * np.asarray(delta[k], dtype=np.float64)

    def assign(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite values in place of a training update (clears undo history)."""
        for k, t in self.tensors.items():
            t.data = arrays[k]
        self._undo.clear()


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


ADAPTED = ("wq", "wv", "w1")


class ToyMLLM:
    def __init__(self, shape: ModelShape = ModelShape(), seed: int = 0, end_token: int = 1):
        self.shape = shape
        self.end_token = end_token
        self.counters = {"forward": 0}
        s = shape
        g = _rng(seed, 0)

        def mat(rows, cols, std, rng=g):
            return Tensor(rng.normal(0.0, std, size=(rows, cols)))

        bb: dict[str, Tensor] = {
            "tok_emb": mat(s.vocab, s.dim, 1.0),
            "pos_emb": mat(s.max_seq, s.dim, 0.5),
            "out": mat(s.dim, s.vocab, 1.0 / np.sqrt(s.dim)),
        }
        for i in range(s.n_blocks):
            p = f"blocks.{i}."
            for w in ("wq", "wk", "wv", "wo"):
                bb[p + w] = mat(s.dim, s.dim, 1.0 / np.sqrt(s.dim))
            bb[p + "w1"] = mat(s.dim, s.mlp_hidden, 1.0 / np.sqrt(s.dim))
            bb[p + "b1"] = Tensor(np.zeros(s.mlp_hidden))
            bb[p + "w2"] = mat(s.mlp_hidden, s.dim, 0.5 / np.sqrt(s.mlp_hidden))
            bb[p + "b2"] = Tensor(np.zeros(s.dim))
        self.backbone = bb

        ge = _rng(seed, 1)
        self.encoder = ComponentParams(
            "S",
            {
                "enc.w1": mat(s.feat_dim, s.enc_hidden, 1.0 / np.sqrt(s.feat_dim), ge),
                "enc.b1": Tensor(np.zeros(s.enc_hidden)),
                "enc.w2": mat(s.enc_hidden, s.n_soft * s.dim, 1.0 / np.sqrt(s.enc_hidden), ge),
                "enc.b2": Tensor(np.zeros(s.n_soft * s.dim)),
            },
        )
        ga = _rng(seed, 2)
        ad: dict[str, Tensor] = {}
        for i in range(s.n_blocks):
            for w in ADAPTED:
                rows, cols = bb[f"blocks.{i}.{w}"].shape
                ad[f"blocks.{i}.{w}.A"] = mat(rows, s.rank, 1.0 / np.sqrt(rows), ga)
                ad[f"blocks.{i}.{w}.B"] = Tensor(np.zeros((s.rank, cols)))
        self.adapter = ComponentParams("T", ad)
        self.encoder.set_requires_grad(True)
        self.adapter.set_requires_grad(True)

    # ------------------------------------------------------------ params

    def component(self, name: str) -> ComponentParams:
        if name == "S":
            return self.encoder
        if name == "T":
            return self.adapter
        raise ContractError(f"unknown or frozen component {name!r}; only 'S' and 'T' are trainable")

    def apply_delta(self, component: str, delta: Mapping[str, np.ndarray], scale: float) -> None:
        self.component(component).apply_delta(delta, scale)

    def backbone_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.backbone.items()}

    def backbone_checksum(self) -> str:
        return _checksum(self.backbone_arrays())

    def checksum(self) -> str:
        return _checksum(self.state_arrays())

    def trainable_checksum(self) -> str:
        """Checksum of S and T only; cheap enough to call around every probe."""
        return self.encoder.checksum() + self.adapter.checksum()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"X.{k}": v for k, v in self.backbone_arrays().items()}
        out.update({f"S.{k}": v for k, v in self.encoder.arrays().items()})
        out.update({f"T.{k}": v for k, v in self.adapter.arrays().items()})
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, t in self.backbone.items():
            t.data = np.array(arrays[f"X.{k}"], dtype=np.float64, copy=True)
        self.encoder.load({k: arrays[f"S.{k}"] for k in self.encoder.names()})
        self.adapter.load({k: arrays[f"T.{k}"] for k in self.adapter.names()})

    def load_backbone(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, t in self.backbone.items():
            t.data = np.array(arrays[k], dtype=np.float64, copy=True)

    def save(self, path, meta: Mapping | None = None) -> None:
        m = {"shape": self.shape.__dict__, "end_token": self.end_token}
        m.update(meta or {})
        checkpoint.save(path, self.state_arrays(), m)

    @classmethod
    def from_checkpoint(cls, path) -> "ToyMLLM":
        arrays, meta = checkpoint.load(path)
        model = cls(ModelShape(**meta["shape"]), seed=0, end_token=meta["end_token"])
        model.load_state(arrays)
        return model

    def clone(self) -> "ToyMLLM":
        other = ToyMLLM(self.shape, seed=0, end_token=self.end_token)
        other.load_state(self.state_arrays())
        return other

    # ------------------------------------------------------------ forward

    def encode_features(self, features: np.ndarray) -> Tensor:
        """[B, F] features -> [B, n_soft, D] soft tokens."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[None, :]
        if feats.shape[-1] != self.shape.feat_dim:
            raise ContractError(
                f"feature dim {feats.shape[-1]} != expected {self.shape.feat_dim}"
            )
        e = self.encoder
        x = Tensor(feats)
        h = tc.gelu(tc.add_row(tc.matmul(x, e["enc.w1"]), e["enc.b1"]))
        out = tc.add_row(tc.matmul(h, e["enc.w2"]), e["enc.b2"])
        return tc.reshape(out, (feats.shape[0], self.shape.n_soft, self.shape.dim))

    def _weight(self, block: int, name: str, use_adapter: bool) -> Tensor:
        w = self.backbone[f"blocks.{block}.{name}"]
        if use_adapter and name in ADAPTED:
            a = self.adapter[f"blocks.{block}.{name}.A"]
            b = self.adapter[f"blocks.{block}.{name}.B"]
            return tc.add(w, tc.matmul(a, b))
        return w

    def hidden(self, soft: Tensor | None, tokens: np.ndarray, use_adapter: bool = True) -> Tensor:
        """Final hidden states [B, S, D] for [soft ‖ tokens]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[0]
        parts = [tc.embedding(self.backbone["tok_emb"], tokens)]
        if soft is not None:
            parts.insert(0, soft)
        x = tc.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        seq = x.shape[1]
        if seq > self.shape.max_seq:
            raise LengthError(f"sequence length {seq} exceeds max_seq {self.shape.max_seq}")
        pos = np.broadcast_to(np.arange(seq), (n, seq))
        x = tc.add(x, tc.embedding(self.backbone["pos_emb"], pos))
        inv = 1.0 / np.sqrt(self.shape.dim)
        for i in range(self.shape.n_blocks):
            q = tc.matmul(x, self._weight(i, "wq", use_adapter))
            k = tc.matmul(x, self._weight(i, "wk", use_adapter))
            v = tc.matmul(x, self._weight(i, "wv", use_adapter))
            att = tc.softmax_rows(tc.causal_mask(tc.scale(tc.matmul(q, tc.transpose(k)), inv)))
            x = tc.add(x, tc.matmul(tc.matmul(att, v), self._weight(i, "wo", use_adapter)))
            h = tc.gelu(tc.add_row(tc.matmul(x, self._weight(i, "w1", use_adapter)),
                                   self.backbone[f"blocks.{i}.b1"]))
            x = tc.add(x, tc.add_row(tc.matmul(h, self.backbone[f"blocks.{i}.w2"]),
                                     self.backbone[f"blocks.{i}.b2"]))
        return x

    def answer_logits(self, batch: Batch, use_adapter: bool = True) -> Tensor:
        """Teacher-forced logits [M, V] at the answer positions of ``batch``."""
        self.counters["forward"] += 1
        soft = self.encode_features(batch.features)
        x = self.hidden(soft, batch.tokens, use_adapter)
        rows = tc.select_rows(x, batch.row_example, batch.row_pos)
        return tc.matmul(rows, self.backbone["out"])

    def forward_distributions(self, batch: Batch, use_adapter: bool = True) -> GenerationDistribution:
        with tc.no_grad():
            logits = self.answer_logits(batch, use_adapter)
        return GenerationDistribution(
            probs=tc._softmax(logits.data),
            row_example=batch.row_example,
            row_pos=batch.row_pos,
            n_examples=batch.size,
        )

    def batch_loss(self, batch: Batch, use_adapter: bool = True) -> Tensor:
        logits = self.answer_logits(batch, use_adapter)
        return tc.cross_entropy(logits, batch.targets, weights=batch.weights)

    # ------------------------------------------------------------ decoding

    def greedy_decode_many(
        self, features: np.ndarray, instructions: Sequence[Sequence[int]], max_len: int,
        use_adapter: bool = True,
    ) -> list[list[int]]:
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        feats = np.asarray(features, dtype=np.float64)
        n = len(instructions)
        out: list[list[int]] = [[] for _ in range(n)]
        done = np.zeros(n, dtype=bool)
        with tc.no_grad():
            soft = self.encode_features(feats)
            for _ in range(max_len):
                seqs = [list(instructions[i]) + out[i] for i in range(n)]
                width = max(len(s) for s in seqs)
                tokens = np.zeros((n, width), dtype=np.int64)
                for i, s in enumerate(seqs):
                    tokens[i, : len(s)] = s
                x = self.hidden(soft, tokens, use_adapter)
                last = np.array([self.shape.n_soft + len(s) - 1 for s in seqs])
                rows = tc.select_rows(x, np.arange(n), last)
                logits = tc.matmul(rows, self.backbone["out"]).data
                nxt = logits.argmax(axis=-1)  # first maximum = lowest id on ties
                for i in range(n):
                    if done[i]:
                        continue
                    if nxt[i] == self.end_token:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
                if done.all():
                    break
        return out

    def greedy_decode(self, feature: np.ndarray, instruction: Sequence[int], max_len: int,
                      use_adapter: bool = True) -> list[int]:
        return self.greedy_decode_many(np.asarray(feature)[None, :], [instruction], max_len,
                                       use_adapter)[0]
