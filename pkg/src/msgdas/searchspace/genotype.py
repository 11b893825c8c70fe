"""Discrete architectures derived from architecture logits."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ops import OpKind
from .topology import EDGES, NUM_NODES

CELL_TYPES = ("normal", "reduce")


@dataclass(frozen=True)
class Genotype:
    """Per cell type, two ``(predecessor, OpKind)`` pairs per intermediate node, in node order."""

    normal: tuple[tuple[int, OpKind], ...]
    reduce: tuple[tuple[int, OpKind], ...]

    def cell(self, cell_type: str) -> tuple[tuple[int, OpKind], ...]:
        return getattr(self, cell_type)

    def to_dict(self) -> dict:
        return {ct: [[int(p), OpKind(op).name] for p, op in self.cell(ct)] for ct in CELL_TYPES}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        validate_genotype_dict(d)
        return cls(**{ct: tuple((int(p), OpKind[name]) for p, name in d[ct]) for ct in CELL_TYPES})

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Genotype":
        return cls.from_json(Path(path).read_text())


def validate_genotype_dict(d: dict) -> None:
    """Raise ValueError unless ``d`` follows the genotype JSON schema."""
    if not isinstance(d, dict) or set(d) != set(CELL_TYPES):
        raise ValueError(f"genotype must have exactly the keys {CELL_TYPES}")
    for ct in CELL_TYPES:
        pairs = d[ct]
        if not isinstance(pairs, list) or len(pairs) != 2 * NUM_NODES:
            raise ValueError(f"{ct}: expected {2 * NUM_NODES} [pred, op] pairs")
        for j in range(NUM_NODES):
            preds = []
            for pair in pairs[2 * j: 2 * j + 2]:
                if not (isinstance(pair, list) and len(pair) == 2):
                    raise ValueError(f"{ct}: malformed pair {pair!r}")
                pred, name = pair
                if not isinstance(pred, int) or not 0 <= pred < j + 2:
                    raise ValueError(f"{ct}: node {j} has invalid predecessor {pred!r}")
                if name not in OpKind.__members__ or name == "Zero":
                    raise ValueError(f"{ct}: invalid op name {name!r}")
                preds.append(pred)
            if preds[0] == preds[1]:
                raise ValueError(f"{ct}: node {j} predecessors must be distinct")


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def derive_cell(alpha: np.ndarray) -> tuple[tuple[int, OpKind], ...]:
    """Keep the two strongest incoming edges per node, each with its best non-Zero op."""
    probs = _softmax_rows(np.asarray(alpha, dtype=np.float64))
    chosen = []
    for j in range(NUM_NODES):
        ranked = []
        for e, (src, dst) in enumerate(EDGES):
            if dst != j:
                continue
            row = probs[e, 1:]
            op = int(np.argmax(row)) + 1
            ranked.append((-row.max(), src, op))
        ranked.sort(key=lambda t: (t[0], t[1]))
        for _, src, op in sorted(ranked[:2], key=lambda t: t[1]):
            chosen.append((src, OpKind(op)))
    return tuple(chosen)


def derive_genotype(alpha) -> Genotype:
    """``alpha`` is an ArchParams or a mapping ``{"normal": [14, 8], "reduce": [14, 8]}``."""
    get = (lambda ct: alpha[ct]) if isinstance(alpha, dict) else (lambda ct: alpha.array(ct))
    return Genotype(**{ct: derive_cell(get(ct)) for ct in CELL_TYPES})


def count_skip_connect(g: Genotype) -> dict[str, int]:
    return {ct: sum(op == OpKind.SkipConnect for _, op in g.cell(ct)) for ct in CELL_TYPES}


def uniform_genotype(op: OpKind) -> Genotype:
    cell = tuple((p, OpKind(op)) for _ in range(NUM_NODES) for p in (0, 1))
    return Genotype(normal=cell, reduce=cell)

