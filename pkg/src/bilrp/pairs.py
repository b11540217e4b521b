"""Annotated sentence-pair datasets (JSONL, one pair per line).

Each line looks like::

    {"id": "p0", "score": 3.2,
     "a": {"text": "...", "tokens": [...], "ids": [...], "word_ids": [...], "pos": [...]},
     "b": {...}}

Only ``tokens`` (or ``text``) is required per side when a vocabulary is
supplied; ``ids`` are then looked up, and ``word_ids`` default to one word
per token.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Iterable, Optional

from .encoder import TokenSequence, Vocab
from .errors import FieldLengthMismatch, MalformedJson, UnknownToken, UnknownTokenId


@dataclass(frozen=True)
class AnnotatedPair:
    id: str
    a: TokenSequence
    b: TokenSequence
    score: float = 0.0
    text_a: str = ""
    text_b: str = ""

    def side(self, which: str) -> TokenSequence:
        if which == "a":
            return self.a
        if which == "b":
            return self.b
        raise ValueError(f"side must be 'a' or 'b', got {which!r}")


def _parse_side(obj, line: int, vocab: Optional[Vocab], vocab_size: Optional[int]):
    if not isinstance(obj, dict):
        raise MalformedJson(line, "pair side must be an object")
    text = obj.get("text", "")
    tokens = obj.get("tokens")
    ids = obj.get("ids")
    try:
        if tokens is None:
            if vocab is None or not text:
                raise MalformedJson(line, "side needs 'tokens' (or 'text' with a vocabulary)")
            seq = vocab.encode(text)
            tokens, ids = list(seq.tokens), list(seq.ids)
        if ids is None:
            if vocab is None:
                raise MalformedJson(line, "side has no 'ids' and no vocabulary was given")
            ids = [vocab.lookup(t) for t in tokens]
    except UnknownToken as exc:
        raise UnknownTokenId(line, str(exc)) from None

    word_ids = obj.get("word_ids") or list(range(len(tokens)))
    pos = obj.get("pos")
    for name, values in (("tokens", tokens), ("word_ids", word_ids), ("pos", pos)):
        if values is not None and len(values) != len(ids):
            raise FieldLengthMismatch(
                line, f"'{name}' has {len(values)} entries but 'ids' has {len(ids)}"
            )
    if not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
        raise MalformedJson(line, "'ids' must be integers")
    limit = vocab_size if vocab_size is not None else (len(vocab) if vocab is not None else None)
    bad = [i for i in ids if i < 0 or (limit is not None and i >= limit)]
    if bad:
        raise UnknownTokenId(line, f"token ids {bad} outside vocabulary")
    seq = TokenSequence(tuple(ids), tuple(str(t) for t in tokens), tuple(word_ids),
                        None if pos is None else tuple(str(p) for p in pos))
    return seq, str(text)


def parse_pair_line(text: str, line: int = 1, vocab=None, vocab_size=None) -> AnnotatedPair:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(line, str(exc)) from None
    if not isinstance(obj, dict) or "a" not in obj or "b" not in obj:
        raise MalformedJson(line, "pair must be an object with 'a' and 'b'")
    score = obj.get("score", 0.0)
    if not isinstance(score, (int, float)) or isinstance(score, bool) or not math.isfinite(score):
        raise MalformedJson(line, f"score must be a finite number, got {score!r}")
    a, text_a = _parse_side(obj["a"], line, vocab, vocab_size)
    b, text_b = _parse_side(obj["b"], line, vocab, vocab_size)
    pair_id = obj.get("id", f"line{line}")
    return AnnotatedPair(str(pair_id), a, b, float(score), text_a, text_b)


def parse_pairs_file(
    path: str | os.PathLike, vocab: Optional[Vocab] = None, vocab_size: Optional[int] = None
) -> list[AnnotatedPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if text.strip():
                pairs.append(parse_pair_line(text, lineno, vocab, vocab_size))
    return pairs


def _side_dict(seq: TokenSequence, text: str) -> dict:
    out = {"text": text, "tokens": list(seq.tokens), "ids": list(seq.ids),
           "word_ids": list(seq.word_ids)}
    if seq.pos is not None:
        out["pos"] = list(seq.pos)
    return out


def pair_to_json(pair: AnnotatedPair) -> str:
    obj = {
        "id": pair.id,
        "score": pair.score,
        "a": _side_dict(pair.a, pair.text_a),
        "b": _side_dict(pair.b, pair.text_b),
    }
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_pairs_file(pairs: Iterable[AnnotatedPair], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(pair_to_json(pair) + "\n")
