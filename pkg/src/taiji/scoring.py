"""Independent scorer for benchmark runs.

Kept free of engine imports so it can re-score raw results written by the
harness (double entry): ``python -m taiji.scoring <fixture dir> <raw dir>``.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Iterable


def precision_recall(retrieved: Iterable[str], truth: Iterable[str]) -> tuple[float, float]:
    """Set precision and recall; an empty retrieval has precision 1 and an
    empty truth set recall 1 (nothing to miss)."""
    got, want = set(retrieved), set(truth)
    hit = len(got & want)
    precision = hit / len(got) if got else 1.0
    recall = hit / len(want) if want else 1.0
    return precision, recall


def score_run(fixture_dir: str | Path, raw_dir: str | Path) -> dict[str, tuple[float, float]]:
    truth = json.loads((Path(fixture_dir) / "truth.json").read_text(encoding="utf-8"))["truth"]
    out = {}
    for path in sorted(Path(raw_dir).glob("*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        out[doc["query"]] = precision_recall(doc["retrieved"], truth[doc["query"]])
    return out


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) != 2:
        print("usage: python -m taiji.scoring <fixture dir> <raw dir>", file=sys.stderr)
        return 2
    for qid, (p, r) in score_run(*args).items():
        print(f"{qid}\tprecision={p:.4f}\trecall={r:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
