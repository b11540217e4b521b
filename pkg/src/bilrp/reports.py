"""Serialization of explanations, evaluation reports and run manifests.

Floats are written with 9 significant digits so that outputs are stable
across runs and diff cleanly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .corpus import DiffEntry, InteractionRanking, PosAggregate
from .evaluation import ConservationRecord, PerturbationReport
from .interactions import InteractionMatrix

VERSION = "0.1.0"


def round_sig(x: float, digits: int = 9) -> Optional[float]:
    """*x* rounded to *digits* significant digits; non-finite values become None."""
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(f"{x:.{digits}g}")


def _clean(obj: Any) -> Any:
    if isinstance(obj, (float, np.floating)):
        return round_sig(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps(obj: Any, indent: Optional[int] = None) -> str:
    separators = (",", ":") if indent is None else (",", ": ")
    return json.dumps(_clean(obj), indent=indent, separators=separators, ensure_ascii=False,
                      allow_nan=False)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        r = round_sig(x)
        return "nan" if r is None else repr(r)
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_text(text: str, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# explanations


def explanation_to_dict(m: InteractionMatrix) -> dict:
    return {
        "id": m.pair_id,
        "method": m.method,
        "tokens_a": list(m.tokens_a),
        "tokens_b": list(m.tokens_b),
        "matrix": m.values.tolist(),
        "similarity": m.similarity,
        "relevance_sum": m.relevance_sum,
        "model_fingerprint": m.model_fingerprint,
    }


def explanations_jsonl(matrices: Iterable[InteractionMatrix]) -> str:
    return "".join(dumps(explanation_to_dict(m)) + "\n" for m in matrices)


def explanation_from_dict(obj: dict) -> InteractionMatrix:
    values = np.asarray(obj["matrix"], dtype=np.float64).reshape(
        len(obj["tokens_a"]), len(obj["tokens_b"])
    )
    return InteractionMatrix(
        values, tuple(obj["tokens_a"]), tuple(obj["tokens_b"]), obj["method"],
        float(obj["similarity"]), float(obj["relevance_sum"]), obj.get("id", ""),
        obj.get("model_fingerprint", ""),
    )


def explanations_csv(matrices: Iterable[InteractionMatrix]) -> str:
    rows = (
        (m.pair_id, i, j, float(m.values[i, j]))
        for m in matrices
        for i in range(m.shape[0])
        for j in range(m.shape[1])
    )
    return csv_text(("pair_id", "i", "i'", "value"), rows)


# ---------------------------------------------------------------------------
# evaluation and corpus reports


def perturbation_csv(report: PerturbationReport) -> str:
    return csv_text(("pair_id", "method", "side", "aupc"),
                    ((r.pair_id, r.method, r.side, r.aupc) for r in report.records))


def perturbation_summary(report: PerturbationReport) -> dict:
    return {"test": report.test, "methods": report.summary}


def curves_csv(report: PerturbationReport) -> str:
    rows = []
    for method, curve in report.curves.items():
        rows.extend((method, f, d) for f, d in zip(curve.fractions, curve.distances))
    return csv_text(("method", "fraction", "distance"), rows)


def conservation_csv(records: Iterable[ConservationRecord]) -> str:
    return csv_text(("pair_id", "relevance_sum", "similarity", "gap"),
                    ((r.pair_id, r.relevance_sum, r.similarity, r.gap) for r in records))


def pos_csv(agg: PosAggregate) -> str:
    return csv_text(("tag_a", "tag_b", "pos_value", "neg_value", "count"), agg.rows())


def ranking_csv(rankings: Iterable[InteractionRanking]) -> str:
    rows = []
    for ranking in rankings:
        for rank, e in enumerate(ranking.entries, start=1):
            rows.append((ranking.group, rank, e.token_a, e.token_b, e.relevance, e.pair_id))
    return csv_text(("group", "rank", "token_a", "token_b", "relevance", "pair_id"), rows)


def diff_csv(entries: Iterable[DiffEntry]) -> str:
    return csv_text(("tag_a", "tag_b", "x", "y", "difference"),
                    ((e.tags[0], e.tags[1], e.x, e.y, e.difference) for e in entries))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    model_fingerprint: str
    rules: dict
    method: str
    dataset: str
    version: str = VERSION
    timestamp: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "model_fingerprint": self.model_fingerprint,
            "rules": self.rules,
            "method": self.method,
            "dataset": self.dataset,
            "version": self.version,
            "timestamp": self.timestamp,
        }
        if self.extra:
            out["extra"] = self.extra
        return out


def manifest_path(output: str | os.PathLike) -> str:
    return os.fspath(output) + ".manifest.json"


def write_manifest(manifest: RunManifest, output: str | os.PathLike) -> str:
    path = manifest_path(output)
    write_text(dumps(manifest.to_dict(), indent=2) + "\n", path)
    return path
