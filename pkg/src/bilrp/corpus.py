"""Corpus-level analysis of interaction explanations.

Relevance is folded into (POS tag, POS tag) cells, keeping positive and
negative contributions apart; top token interactions are ranked within
similarity quantiles; and two corpora can be compared cell by cell.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyInput, MissingPosTags, NormalizationMismatch, OffsetOutOfRange, ValidationError
from .interactions import InteractionMatrix

SPECIAL_TOKENS = frozenset({"[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"})
NORMALIZATIONS = ("sum", "mean", "none")


@dataclass
class Cell:
    pos_sum: float = 0.0
    neg_sum: float = 0.0
    count: int = 0

    def add(self, value: float) -> None:
        if value > 0:
            self.pos_sum += value
        elif value < 0:
            self.neg_sum += value
        self.count += 1


@dataclass
class PosAggregate:
    """Signed relevance totals per POS-tag pair, with a normalization view."""

    cells: dict[tuple[str, str], Cell] = field(default_factory=dict)
    normalization: str = "sum"

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValidationError(
                f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}"
            )

    def _raw(self, cell: Cell) -> tuple[float, float]:
        if self.normalization == "mean":
            return cell.pos_sum / cell.count, cell.neg_sum / cell.count
        return cell.pos_sum, cell.neg_sum

    @property
    def normalizer(self) -> float:
        """Largest absolute (summed or mean) value over cells; 1 when all are zero."""
        if self.normalization == "none":
            return 1.0
        peak = 0.0
        for cell in self.cells.values():
            pos, neg = self._raw(cell)
            peak = max(peak, pos, -neg)
        return peak if peak > 0 else 1.0

    def value(self, tags: tuple[str, str], sign: str = "pos") -> float:
        cell = self.cells.get(tags)
        if cell is None:
            return 0.0
        pos, neg = self._raw(cell)
        raw = pos if sign == "pos" else neg
        return raw / self.normalizer

    def rows(self) -> list[tuple[str, str, float, float, int]]:
        """``(tag_a, tag_b, pos_value, neg_value, count)`` sorted by tags."""
        norm = self.normalizer
        out = []
        for tags in sorted(self.cells):
            pos, neg = self._raw(self.cells[tags])
            out.append((tags[0], tags[1], pos / norm, neg / norm, self.cells[tags].count))
        return out

    @property
    def tags_a(self) -> list[str]:
        return sorted({a for a, _ in self.cells})

    @property
    def tags_b(self) -> list[str]:
        return sorted({b for _, b in self.cells})

    def merge(self, other: "PosAggregate") -> "PosAggregate":
        if other.normalization != self.normalization:
            raise NormalizationMismatch("cannot merge aggregates with different normalization")
        merged = PosAggregate({}, self.normalization)
        for source in (self, other):
            for tags, cell in source.cells.items():
                target = merged.cells.setdefault(tags, Cell())
                target.pos_sum += cell.pos_sum
                target.neg_sum += cell.neg_sum
                target.count += cell.count
        return merged


def _word_groups(word_ids: Sequence[int]) -> tuple[list[int], int]:
    """Map token positions to word groups; special tokens (-1) stay separate."""
    groups = []
    index: dict[int, int] = {}
    for pos, w in enumerate(word_ids):
        key = ("w", w) if w >= 0 else ("s", pos)
        if key not in index:
            index[key] = len(index)
        groups.append(index[key])
    return groups, len(index)


def word_level(matrix: InteractionMatrix):
    """Sum subtoken relevance into words.

    Returns the word-level matrix with one POS tag per word (that of the
    word's first subtoken), for each side.
    """
    if matrix.pos_a is None or matrix.pos_b is None:
        raise MissingPosTags(f"explanation {matrix.pair_id!r} has no POS tags")
    wa = matrix.word_ids_a or tuple(range(len(matrix.tokens_a)))
    wb = matrix.word_ids_b or tuple(range(len(matrix.tokens_b)))
    ga, na = _word_groups(wa)
    gb, nb = _word_groups(wb)
    values = np.zeros((na, nb))
    np.add.at(values, (np.asarray(ga)[:, None], np.asarray(gb)[None, :]), matrix.values)
    tags_a = [""] * na
    for pos in reversed(range(len(ga))):
        tags_a[ga[pos]] = matrix.pos_a[pos]
    tags_b = [""] * nb
    for pos in reversed(range(len(gb))):
        tags_b[gb[pos]] = matrix.pos_b[pos]
    return values, tags_a, tags_b


def aggregate_pos_relevance(
    explanations: Iterable[InteractionMatrix], normalization: str = "sum", word_level_sum: bool = True
) -> PosAggregate:
    """Fold every matrix cell into its (POS, POS) cell, split by sign."""
    agg = PosAggregate({}, normalization)
    for matrix in explanations:
        if word_level_sum:
            values, tags_a, tags_b = word_level(matrix)
        else:
            if matrix.pos_a is None or matrix.pos_b is None:
                raise MissingPosTags(f"explanation {matrix.pair_id!r} has no POS tags")
            values, tags_a, tags_b = matrix.values, matrix.pos_a, matrix.pos_b
        for i, ta in enumerate(tags_a):
            for j, tb in enumerate(tags_b):
                agg.cells.setdefault((ta, tb), Cell()).add(float(values[i, j]))
    return agg


@dataclass(frozen=True)
class DiffEntry:
    tags: tuple[str, str]
    x: float
    y: float

    @property
    def difference(self) -> float:
        return self.x - self.y


def aggregate_diff(
    agg_x: PosAggregate, agg_y: PosAggregate, sign: str = "pos", top_n: int = 10
) -> list[DiffEntry]:
    """Tag pairs whose normalized relevance differs most between two corpora."""
    if agg_x.normalization != agg_y.normalization:
        raise NormalizationMismatch(
            f"normalizations differ: {agg_x.normalization!r} vs {agg_y.normalization!r}"
        )
    if sign not in ("pos", "neg"):
        raise ValidationError(f"sign must be 'pos' or 'neg', got {sign!r}")
    entries = [
        DiffEntry(tags, agg_x.value(tags, sign), agg_y.value(tags, sign))
        for tags in sorted(set(agg_x.cells) | set(agg_y.cells))
    ]
    entries.sort(key=lambda e: (-abs(e.difference), e.tags))
    return entries[:top_n]


# ---------------------------------------------------------------------------
# quantile groups and top interactions


def select_quantile_groups(predictions: Sequence[tuple[str, float]], q: float = 0.25):
    """Ids of the ``floor(q*n)`` highest- and lowest-scoring pairs.

    Pairs are ordered by (score, pair_id); the low group is taken from the
    front and the high group from the back, so equal scores split by id.
    """
    if not 0 < q <= 0.5:
        raise ValidationError(f"quantile must lie in (0, 0.5], got {q!r}")
    if not predictions:
        raise EmptyInput("no predictions")
    ordered = sorted(predictions, key=lambda p: (p[1], p[0]))
    k = math.floor(q * len(ordered) + 1e-9)
    low = [pid for pid, _ in ordered[:k]]
    high = [pid for pid, _ in ordered[len(ordered) - k:]][::-1] if k else []
    return high, low


@dataclass(frozen=True)
class RankedInteraction:
    token_a: str
    token_b: str
    relevance: float
    pair_id: str
    i: int = -1
    j: int = -1


@dataclass(frozen=True)
class InteractionRanking:
    entries: tuple[RankedInteraction, ...]
    group: str = "all"


def _is_special(token: str, tag: Optional[str]) -> bool:
    return token in SPECIAL_TOKENS or (tag is not None and tag in SPECIAL_TOKENS)


def rank_top_interactions(
    explanations: Iterable[InteractionMatrix],
    group_ids: Optional[Iterable[str]] = None,
    k: int = 5,
    *,
    exclude_special: bool = True,
    group: str = "all",
) -> InteractionRanking:
    """Top-k token interactions by signed relevance over a group of pairs."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    wanted = None if group_ids is None else set(group_ids)
    cells = []
    for m in explanations:
        if wanted is not None and m.pair_id not in wanted:
            continue
        for i, ta in enumerate(m.tokens_a):
            tag_a = m.pos_a[i] if m.pos_a is not None else None
            if exclude_special and _is_special(ta, tag_a):
                continue
            for j, tb in enumerate(m.tokens_b):
                tag_b = m.pos_b[j] if m.pos_b is not None else None
                if exclude_special and _is_special(tb, tag_b):
                    continue
                cells.append(RankedInteraction(ta, tb, float(m.values[i, j]), m.pair_id, i, j))
    cells.sort(key=lambda c: (-c.relevance, c.token_a, c.token_b, c.pair_id, c.i, c.j))
    return InteractionRanking(tuple(cells[:k]), group)


# ---------------------------------------------------------------------------
# tokenizer alignment


def word_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of whitespace-separated words."""
    return [m.span() for m in re.finditer(r"\S+", text)]


def align_subtokens_to_words(
    tokens: Sequence[str],
    char_offsets: Sequence[Optional[tuple[int, int]]],
    words: Sequence[tuple[int, int]],
) -> list[int]:
    """Word index for every subtoken, by the span containing its start offset.

    Tokens with offset ``None`` (special tokens) map to -1.
    """
    if len(tokens) != len(char_offsets):
        raise ValidationError("tokens and char_offsets differ in length")
    starts = [w[0] for w in words]
    out = []
    for tok, offset in zip(tokens, char_offsets):
        if offset is None:
            out.append(-1)
            continue
        start = offset[0]
        idx = int(np.searchsorted(starts, start, side="right")) - 1
        if idx < 0 or not words[idx][0] <= start < words[idx][1]:
            raise OffsetOutOfRange(f"token {tok!r} at offset {start} lies in no word span")
        out.append(idx)
    return out
