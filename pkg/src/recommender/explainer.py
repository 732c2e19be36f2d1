"""Deterministic template explanations that cite retrieved evidence as ``[E<rank>: <source>]``."""
import re
from typing import Callable, Iterable, Optional, Set

import numpy as np

from .exceptions import RankerError
from .models import (
    AttributePayload,
    EvidenceItem,
    EvidencePool,
    Explanation,
    HistoryPayload,
    RankOutput,
    RetrievalResult,
)

CITATION_PATTERN = re.compile(r"\[E(\d+)(?::[^\]]*)?\]")


def _clause(ev: EvidenceItem, rank: int, label: Callable[[int], int]) -> str:
    p = ev.payload
    tag = ev.source.tag
    if isinstance(p, HistoryPayload):
        return f"you interacted with item {label(p.item_id)} (rated {p.rating:.1f}) [E{rank}: {tag}]"
    if isinstance(p, AttributePayload):
        return f"it matches your preference for {p.attr_name}={p.attr_value} [E{rank}: {tag}]"
    return f"item {label(p.head)} is {p.relation} item {label(p.tail)} [E{rank}: {tag}: {p.relation}]"


def generate_explanation(
    retrieved: RetrievalResult,
    out: RankOutput,
    pool: EvidencePool,
    tau_cite: float,
    item: Optional[int] = None,
    item_label: Optional[Callable[[int], int]] = None,
) -> Explanation:
    """Cite every evidence with attention >= tau_cite (top-1 if none qualifies), highest weight first.

    ``item_label`` maps model item indices to the ids printed in the text.
    """
    if len(retrieved) == 0:
        raise RankerError("no-evidence", "cannot explain without retrieved evidence")
    if len(out.attention) != len(retrieved):
        raise RankerError("shape-mismatch", "attention length differs from the retrieved evidence count")
    attention = out.attention
    qualifying = [r for r in range(1, len(retrieved) + 1) if attention[r - 1] >= tau_cite]
    if not qualifying:
        qualifying = [int(np.argmax(attention)) + 1]
    citations = sorted(qualifying, key=lambda r: (-attention[r - 1], r))
    ids = tuple(retrieved.evidence_ids[r - 1] for r in citations)
    label = item_label or int
    clauses = [_clause(pool.items[ev_id], rank, label) for rank, ev_id in zip(citations, ids)]
    subject = f"We recommend item {label(item)}" if item is not None else "We recommend this item"
    text = f"{subject} because " + "; and ".join(clauses) + "."
    return Explanation(
        text=text,
        citations=tuple(citations),
        per_citation_weight=tuple(float(attention[r - 1]) for r in citations),
        cited_evidence_ids=ids,
        retrieved_count=len(retrieved),
    )


def extract_evidence_ids(text: str, k: int) -> Set[int]:
    """Evidence ranks cited as ``[E<n>...]`` in ``text``, restricted to 1..k."""
    found = {int(m.group(1)) for m in CITATION_PATTERN.finditer(text)}
    return {n for n in found if 1 <= n <= k}


def effective_k(k: int, retrieved_count: Optional[int] = None) -> int:
    """K shrinks to the number of retrieved items when fewer than K candidates existed."""
    if k < 1:
        raise RankerError("bad-k", "coverage needs k >= 1")
    if retrieved_count is None or retrieved_count < 1:
        return k
    return min(k, retrieved_count)


def coverage_loss(citations: Iterable[int], k: int, retrieved_count: Optional[int] = None) -> float:
    """1 - |citations within 1..K_eff| / K_eff."""
    k_eff = effective_k(k, retrieved_count)
    cited = {c for c in citations if 1 <= c <= k_eff}
    return 1.0 - len(cited) / k_eff
