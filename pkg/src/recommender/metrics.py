"""Ranking metrics, faithfulness statistics, the OOD protocol and the experiment sweeps."""
import logging
import math
from dataclasses import asdict, replace
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import HyperParams, SynthConfig
from .datagen import generate_synthetic, split_dataset
from .exceptions import MetricError, RankerError
from .explainer import coverage_loss
from .models import DataSplit, EnvMetrics, EvalReport, EvidencePool, EvidenceSource, Explanation, HeldOutCase
from .recommender import Recommender
from .trainer import fit

logger = logging.getLogger(__name__)

TOP_N = 10


class ScoringModel(Protocol):
    def score_items(
        self, user_id: int, context: Sequence[int], items: Sequence[int], drop_key_evidence: bool = False
    ) -> np.ndarray: ...


def ndcg_at_k(rank: int, k: int) -> float:
    """Single-relevant-item NDCG: 1 / log2(rank + 1) inside the cutoff."""
    if rank < 1:
        raise MetricError("invalid-rank", f"rank must be >= 1, got {rank}")
    if k < 1:
        raise MetricError("bad-k", f"k must be >= 1, got {k}")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hr_at_k(rank: int, k: int) -> float:
    if rank < 1:
        raise MetricError("invalid-rank", f"rank must be >= 1, got {rank}")
    if k < 1:
        raise MetricError("bad-k", f"k must be >= 1, got {k}")
    return 1.0 if rank <= k else 0.0


def f1_at_k(rank: int, k: int) -> float:
    """F1 of a top-k list against a single ground-truth item."""
    return 2.0 / (k + 1) if hr_at_k(rank, k) else 0.0


def ood_degradation(ndcg_train: float, ndcg_test: float) -> float:
    """Relative NDCG drop from the training environment to a shifted one."""
    if ndcg_train <= 0:
        raise MetricError("degenerate-baseline", f"training-environment NDCG must be > 0, got {ndcg_train}")
    return (ndcg_train - ndcg_test) / ndcg_train


def target_rank(scores: np.ndarray, items: np.ndarray, target_pos: int = 0) -> int:
    """1-based rank of ``items[target_pos]``; ties are broken by ascending item id."""
    target_score = scores[target_pos]
    target_item = items[target_pos]
    higher = int(np.sum(scores > target_score))
    tied_before = int(np.sum((scores == target_score) & (items < target_item)))
    return 1 + higher + tied_before


def evidence_coverage_metric(explanations: Sequence[Explanation], k: int) -> float:
    """Mean share of the retrieval slots cited by each explanation.

    Each explanation is measured against K_eff = min(K, its retrieved count).
    """
    if not explanations:
        raise MetricError("empty-eval-set", "no explanations to measure")
    if k < 1:
        raise MetricError("bad-k", "coverage needs k >= 1")
    return float(np.mean([1.0 - coverage_loss(e.citations, k, e.retrieved_count) for e in explanations]))


def citation_source_distribution(explanations: Sequence[Explanation], pool: EvidencePool) -> Dict[str, float]:
    """Share of all citations per evidence source; all zeros when nothing was cited."""
    counts = {source.tag: 0 for source in EvidenceSource}
    for explanation in explanations:
        for ev_id in explanation.cited_evidence_ids:
            counts[pool.items[ev_id].source.tag] += 1
    total = sum(counts.values())
    return {tag: (n / total if total else 0.0) for tag, n in counts.items()}


def sample_eval_candidates(case: HeldOutCase, num_items: int, hp: HyperParams, rng: np.random.Generator) -> np.ndarray:
    """Target first, then seeded distinct negatives (or the whole catalog)."""
    if hp.full_catalog:
        others = np.delete(np.arange(num_items), case.target)
    else:
        n = min(hp.eval_negatives, num_items - 1)
        others = rng.choice(num_items - 1, size=n, replace=False)
        others[others >= case.target] += 1
    return np.concatenate([[case.target], others]).astype(np.int64)


def delta_f1(
    model: ScoringModel,
    cases: Sequence[HeldOutCase],
    candidates: Sequence[np.ndarray],
    k: int = TOP_N,
) -> float:
    """Mean top-k F1 with full evidence minus top-k F1 with each item's d* removed."""
    if not cases:
        return 0.0
    drops = []
    for case, items in zip(cases, candidates):
        full = model.score_items(case.user_id, case.context, items)
        reduced = model.score_items(case.user_id, case.context, items, drop_key_evidence=True)
        drops.append(f1_at_k(target_rank(full, items), k) - f1_at_k(target_rank(reduced, items), k))
    return float(np.mean(drops))


def _select_cases(cases: Sequence[HeldOutCase], cap: int, rng: np.random.Generator) -> List[HeldOutCase]:
    if not cap or len(cases) <= cap:
        return list(cases)
    return [cases[i] for i in sorted(rng.choice(len(cases), size=cap, replace=False))]


def _explain(model, case: HeldOutCase) -> Optional[Explanation]:
    try:
        _, _, explanation = model.explain(case.user_id, case.context, case.target)
    except RankerError as e:
        if e.code != "no-evidence":
            raise
        return None
    return explanation


def evaluate(
    model: ScoringModel,
    split: DataSplit,
    num_items: int,
    hp: HyperParams,
    seed: Optional[int] = None,
    pool: Optional[EvidencePool] = None,
) -> EvalReport:
    """Rank each held-out target among sampled negatives and aggregate every metric per environment.

    Faithfulness statistics need a model exposing ``explain`` and ``score_drop`` and are
    skipped (reported as 0) when retrieval is off.
    """
    if not split.test_cases or not any(split.test_cases.values()):
        raise MetricError("empty-split", "the split has no held-out cases")
    seed = hp.seed if seed is None else seed
    train_env = min(split.train_envs)
    if train_env not in split.test_cases:
        raise MetricError("empty-split", f"no held-out cases in training environment {train_env}")
    faithful = hp.k > 0 and hasattr(model, "explain")
    per_env: Dict[int, EnvMetrics] = {}
    explanations: List[Explanation] = []
    faithful_cases: List[HeldOutCase] = []
    faithful_items: List[np.ndarray] = []
    score_drops: List[float] = []
    for env in sorted(split.test_cases):
        cases = _select_cases(split.test_cases[env], hp.max_eval_cases, np.random.default_rng([seed, 3, env]))
        ndcg, hr = [], []
        for idx, case in enumerate(cases):
            items = sample_eval_candidates(case, num_items, hp, np.random.default_rng([seed, 4, env, idx]))
            scores = model.score_items(case.user_id, case.context, items)
            rank = target_rank(scores, items)
            ndcg.append(ndcg_at_k(rank, TOP_N))
            hr.append(hr_at_k(rank, TOP_N))
            if not faithful:
                continue
            faithful_cases.append(case)
            faithful_items.append(items)
            drop = model.score_drop(case.user_id, case.context, case.target)
            if drop is not None:
                score_drops.append(drop)
            explanation = _explain(model, case)
            if explanation is not None:
                explanations.append(explanation)
        per_env[env] = EnvMetrics(ndcg=float(np.mean(ndcg)), hr=float(np.mean(hr)), n_cases=len(cases))
        logger.info(f"env {env}: NDCG@{TOP_N}={per_env[env].ndcg:.4f} HR@{TOP_N}={per_env[env].hr:.4f} over {len(cases)} cases")

    shifted_env = split.shifted_env
    base = per_env[train_env].ndcg
    per_env_delta = {e: ood_degradation(base, m.ndcg) for e, m in per_env.items() if e != train_env}
    pool = pool if pool is not None else getattr(model, "pool", None)
    report = EvalReport(
        per_env=per_env,
        train_env=train_env,
        shifted_env=shifted_env,
        ood_delta=ood_degradation(base, per_env[shifted_env].ndcg),
        per_env_delta=per_env_delta,
        evidence_coverage=evidence_coverage_metric(explanations, hp.k) if explanations else 0.0,
        delta_f1=delta_f1(model, faithful_cases, faithful_items),
        mean_score_drop=float(np.mean(score_drops)) if score_drops else 0.0,
        cf_satisfied_fraction=float(np.mean([d >= hp.gamma for d in score_drops])) if score_drops else 0.0,
        source_distribution=citation_source_distribution(explanations, pool) if explanations and pool is not None
        else {source.tag: 0.0 for source in EvidenceSource},
        config=asdict(hp),
        seed=seed,
    )
    logger.info(f"OOD degradation env {train_env} -> env {shifted_env}: {report.ood_delta:.4f}")
    return report


# Reports

def report_rows(report: EvalReport) -> List[Tuple[str, float]]:
    """Flat (metric, value) rows in a fixed order."""
    rows: List[Tuple[str, float]] = []
    for env, m in sorted(report.per_env.items()):
        rows += [(f"ndcg@{TOP_N}_env{env}", m.ndcg), (f"hr@{TOP_N}_env{env}", m.hr), (f"n_cases_env{env}", float(m.n_cases))]
    for env, delta in sorted(report.per_env_delta.items()):
        rows.append((f"ood_delta_env{env}", delta))
    rows += [
        ("ood_delta", report.ood_delta),
        ("evidence_coverage", report.evidence_coverage),
        ("delta_f1", report.delta_f1),
        ("mean_score_drop", report.mean_score_drop),
        ("cf_satisfied_fraction", report.cf_satisfied_fraction),
    ]
    rows += [(f"source_share_{tag}", share) for tag, share in sorted(report.source_distribution.items())]
    return rows


def report_frame(report: EvalReport) -> pd.DataFrame:
    return pd.DataFrame(report_rows(report), columns=["metric", "value"])


def aggregate_reports(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """Mean and population stdev of every report metric across seeds."""
    if not reports:
        raise MetricError("empty-eval-set", "no reports to aggregate")
    frame = pd.concat([report_frame(r) for r in reports], ignore_index=True)
    grouped = frame.groupby("metric", sort=False)["value"]
    return pd.DataFrame({"mean": grouped.mean(), "stdev": grouped.std(ddof=0)}).reset_index()


def format_report(report: EvalReport, aggregate: Optional[pd.DataFrame] = None) -> str:
    """Human-readable report; every number printed with 6 decimals."""
    lines = [
        f"seed: {report.seed}",
        f"train_env: {report.train_env}",
        f"shifted_env: {report.shifted_env}",
    ]
    lines += [f"{name}: {value:.6f}" for name, value in report_rows(report)]
    if aggregate is not None:
        lines.append("")
        lines.append("mean +- stdev across seeds")
        lines += [f"{row.metric}: {row.mean:.6f} +- {row.stdev:.6f}" for row in aggregate.itertuples()]
    lines.append("")
    lines.append("config")
    lines += [f"  {key}: {value}" for key, value in sorted(report.config.items())]
    return "\n".join(lines) + "\n"


# Sweeps

def sweep_k(model, split: DataSplit, num_items: int, hp: HyperParams, k_values: Iterable[int], seed: Optional[int] = None) -> pd.DataFrame:
    """Re-evaluate a frozen model at each retrieval size K."""
    rows = []
    for k in k_values:
        sized = model.with_hyperparams(k=int(k))
        report = evaluate(sized, split, num_items, sized.hp, seed=seed)
        rows.append({
            "k": int(k),
            f"ndcg@{TOP_N}_train": report.per_env[report.train_env].ndcg,
            f"ndcg@{TOP_N}_shifted": report.per_env[report.shifted_env].ndcg,
            "ood_delta": report.ood_delta,
            "evidence_coverage": report.evidence_coverage,
        })
        logger.info(f"K={k}: NDCG@{TOP_N}={rows[-1][f'ndcg@{TOP_N}_train']:.4f} coverage={report.evidence_coverage:.4f}")
    return pd.DataFrame(rows)


ABLATIONS = {
    "full": {},
    "no_causal": {"lambda1": 0.0},
    "no_rag": {"k": 0},
    "no_faithful": {"lambda2": 0.0},
    "baseline": {"lambda1": 0.0, "k": 0},
}


def variant_hyperparams(hp: HyperParams, variant: str) -> HyperParams:
    if variant not in ABLATIONS:
        raise MetricError("unknown-variant", f"unknown variant {variant!r}")
    return replace(hp, **ABLATIONS[variant])


def run_variant(synth: SynthConfig, train_envs: Sequence[int], hp: HyperParams, variant: str) -> EvalReport:
    """Generate data, train and evaluate one ablation variant end to end."""
    dataset, pool, _ = generate_synthetic(synth)
    split = split_dataset(dataset, train_envs, hp.max_len)
    variant_hp = variant_hyperparams(hp, variant)
    result = fit(dataset, split, pool, variant_hp)
    model = Recommender(result.params, result.pool, variant_hp)
    return evaluate(model, split, dataset.num_items, variant_hp)


def sweep_shift(
    synth: SynthConfig,
    intensities: Iterable[float],
    hp: HyperParams,
    seeds: Iterable[int],
    train_envs: Sequence[int],
    variants: Sequence[str] = ("full", "baseline"),
) -> pd.DataFrame:
    """OOD degradation of each variant as the test-time spurious flip grows."""
    rows = []
    for intensity in intensities:
        for seed in seeds:
            cfg = replace(synth, shift_intensity=float(intensity), seed=synth.seed + seed)
            for variant in variants:
                report = run_variant(cfg, train_envs, replace(hp, seed=seed), variant)
                rows.append({
                    "intensity": float(intensity),
                    "seed": seed,
                    "variant": variant,
                    f"ndcg@{TOP_N}_train": report.per_env[report.train_env].ndcg,
                    f"ndcg@{TOP_N}_shifted": report.per_env[report.shifted_env].ndcg,
                    "ood_delta": report.ood_delta,
                })
                logger.info(f"shift {intensity} seed {seed} {variant}: OOD delta {report.ood_delta:.4f}")
    return pd.DataFrame(rows)
