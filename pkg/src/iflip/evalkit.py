"""FAS metrics (HTER / AUC / TPR@FPR), the unified single-train multi-domain
protocol runner, and the ablation harness.

Spoof is the positive class everywhere: higher score = more likely attack. The
operating threshold for HTER defaults to the EER point on the evaluation
scores, the usual convention when the paper under test leaves it unstated.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import synthdata, textproto
from .config import EvalConfig, RunConfig, config_from_dict
from .model import FasModel, collate
from .textproto import QuestionType


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # 1 = spoof, 0 = live
    domain_id: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be equal-length 1-d arrays")

    def require_both_classes(self) -> None:
        if not ((self.labels == 1).any() and (self.labels == 0).any()):
            raise ValueError(f"score set {self.domain_id!r} needs both classes present")

    @property
    def spoof_scores(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def live_scores(self) -> np.ndarray:
        return self.scores[self.labels == 0]


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # average of ranks i+1..j
        i = j
    return ranks


def auc(score_set: ScoreSet) -> float:
    """Area under the ROC with spoof positive; ties get half credit, so this
    equals the pairwise concordance statistic."""
    score_set.require_both_classes()
    ranks = _average_ranks(score_set.scores)
    n_pos = int((score_set.labels == 1).sum())
    n_neg = len(score_set.labels) - n_pos
    pos_rank_sum = float(ranks[score_set.labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def far_frr(score_set: ScoreSet, threshold: float) -> tuple[float, float]:
    """At threshold t (spoof iff score >= t): FAR = spoof accepted as live,
    FRR = live rejected as spoof."""
    far = float((score_set.spoof_scores < threshold).mean())
    frr = float((score_set.live_scores >= threshold).mean())
    return far, frr


def _threshold_candidates(scores: np.ndarray) -> np.ndarray:
    uniq = np.unique(scores)
    mids = 0.5 * (uniq[:-1] + uniq[1:])
    return np.concatenate([uniq, mids, [uniq[-1] + 1.0]])


def eer_threshold(score_set: ScoreSet) -> tuple[float, float, float]:
    """Threshold minimizing |FAR - FRR| over observed scores and midpoints;
    ties break toward lower HTER, then lower threshold. Returns (t, FAR, FRR)."""
    score_set.require_both_classes()
    cands = np.sort(_threshold_candidates(score_set.scores))
    spoof = score_set.spoof_scores
    live = score_set.live_scores
    far = (spoof[None, :] < cands[:, None]).mean(axis=1)
    frr = (live[None, :] >= cands[:, None]).mean(axis=1)
    diff = np.abs(far - frr)
    hter_vals = 0.5 * (far + frr)
    best = min(range(len(cands)), key=lambda i: (diff[i], hter_vals[i], cands[i]))
    return float(cands[best]), float(far[best]), float(frr[best])


def hter(score_set: ScoreSet, policy: str = "eer", tau: float | None = None) -> float:
    """(FAR + FRR) / 2 at the EER threshold or at a fixed tau."""
    score_set.require_both_classes()
    if policy == "eer":
        _, far, frr = eer_threshold(score_set)
    elif policy == "fixed":
        if tau is None:
            raise ValueError("fixed policy requires tau")
        far, frr = far_frr(score_set, tau)
    else:
        raise ValueError(f"unknown hter policy: {policy}")
    return 0.5 * (far + frr)


def roc_points(score_set: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    """ROC vertices (FPR, TPR) from threshold sweep, FPR nondecreasing.

    Live samples flagged as spoof are the false positives.
    """
    score_set.require_both_classes()
    uniq = np.unique(score_set.scores)
    thresholds = np.concatenate([[uniq[-1] + 1.0], uniq[::-1]])
    spoof = score_set.spoof_scores
    live = score_set.live_scores
    fpr = (live[None, :] >= thresholds[:, None]).mean(axis=1)
    tpr = (spoof[None, :] >= thresholds[:, None]).mean(axis=1)
    return fpr, tpr


def tpr_at_fpr(score_set: ScoreSet, target_fpr: float = 0.01,
               interpolate: bool = True) -> float:
    """Maximum TPR at operating points with FPR <= target; optionally linearly
    interpolated between the straddling ROC vertices."""
    fpr, tpr = roc_points(score_set)
    feasible = fpr <= target_fpr
    step_value = float(tpr[feasible].max()) if feasible.any() else 0.0
    if not interpolate:
        return step_value
    above = fpr > target_fpr
    if not above.any():
        return step_value
    if not feasible.any():
        return 0.0
    i = int(np.nonzero(feasible)[0][-1])
    j = int(np.nonzero(above)[0][0])
    f1, t1, f2, t2 = fpr[i], tpr[i], fpr[j], tpr[j]
    interp = t1 + (t2 - t1) * (target_fpr - f1) / (f2 - f1)
    return float(max(step_value, interp))


# -- reports --------------------------------------------------------------------


@dataclass
class DomainMetrics:
    domain_id: str
    hter: float
    auc: float
    tpr_at_fpr: float
    threshold: float
    n_live: int
    n_spoof: int

    def as_dict(self) -> dict:
        return dict(domain_id=self.domain_id, hter=self.hter, auc=self.auc,
                    tpr_at_fpr=self.tpr_at_fpr, threshold=self.threshold,
                    n_live=self.n_live, n_spoof=self.n_spoof)


@dataclass
class MetricReport:
    rows: list[DomainMetrics]
    mean: dict[str, float]
    skipped: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"rows": [r.as_dict() for r in self.rows], "mean": self.mean,
                "skipped": self.skipped}

    def table(self) -> str:
        headers = ["domain", "HTER%", "AUC%", "TPR%@FPR=1%"]
        rows = [[r.domain_id, f"{100 * r.hter:.2f}", f"{100 * r.auc:.2f}",
                 f"{100 * r.tpr_at_fpr:.2f}"] for r in self.rows]
        rows.append(["mean", f"{100 * self.mean['hter']:.2f}",
                     f"{100 * self.mean['auc']:.2f}",
                     f"{100 * self.mean['tpr_at_fpr']:.2f}"])
        return format_table(headers, rows)


def evaluate_scores(sets: list[ScoreSet], cfg: EvalConfig | None = None) -> MetricReport:
    cfg = cfg or EvalConfig()
    rows = []
    for s in sets:
        if cfg.hter_policy == "eer":
            thr, far, frr = eer_threshold(s)
        else:
            thr = cfg.fixed_tau
            far, frr = far_frr(s, thr)
        rows.append(DomainMetrics(
            domain_id=s.domain_id,
            hter=0.5 * (far + frr),
            auc=auc(s),
            tpr_at_fpr=tpr_at_fpr(s, cfg.target_fpr, cfg.tpr_interpolate),
            threshold=thr,
            n_live=int((s.labels == 0).sum()),
            n_spoof=int((s.labels == 1).sum()),
        ))
    mean = {
        key: float(np.mean([getattr(r, key) for r in rows])) if rows else float("nan")
        for key in ("hter", "auc", "tpr_at_fpr")
    }
    return MetricReport(rows=rows, mean=mean)


def score_domain(model: FasModel, samples: list[synthdata.Sample], domain_id: str,
                 batch_size: int = 128) -> ScoreSet:
    scores = []
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start:start + batch_size])
        scores.append(model.fake_scores(batch.images).numpy())
    labels = np.array([1 if s.content_label != 0 else 0 for s in samples])
    return ScoreSet(np.concatenate(scores), labels, domain_id)


def run_protocol(model: FasModel, domains: list[tuple[str, list[synthdata.Sample]]],
                 cfg: EvalConfig | None = None,
                 batch_size: int = 128) -> tuple[MetricReport, list[ScoreSet]]:
    """Score every target domain with the LLM-free path and compute metrics."""
    if not domains:
        raise ValueError("run_protocol needs at least one domain")
    sets, skipped = [], []
    for name, samples in domains:
        if not samples:
            skipped.append(name)
            continue
        sets.append(score_domain(model, samples, name, batch_size))
    report = evaluate_scores(sets, cfg)
    report.skipped = skipped
    return report, sets


def aggregate_seed_reports(reports: list[MetricReport]) -> dict:
    """Per-domain and mean metrics averaged over seeds."""
    domains = [r.domain_id for r in reports[0].rows]
    per_domain = {}
    for d in domains:
        per_domain[d] = {
            key: float(np.mean([
                next(row for row in rep.rows if row.domain_id == d).as_dict()[key]
                for rep in reports]))
            for key in ("hter", "auc", "tpr_at_fpr")
        }
    mean = {key: float(np.mean([rep.mean[key] for rep in reports]))
            for key in ("hter", "auc", "tpr_at_fpr")}
    return {"per_domain": per_domain, "mean": mean, "n_seeds": len(reports)}


def format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(headers)]
    def fmt(row):
        return "  ".join(str(v).ljust(w) for v, w in zip(row, widths))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines)


# -- ablation harness --------------------------------------------------------------

ABLATION_SUITES = ("branches", "head_mode", "granularity", "style_prompts",
                   "lambda_sweep", "qformer_depth", "binary_mode", "llm_free_timing")


def _clone_config(cfg: RunConfig) -> RunConfig:
    return config_from_dict(copy.deepcopy(cfg.to_dict()))


def _suite_configs(cfg: RunConfig, suite: str) -> list[tuple[str, RunConfig]]:
    out: list[tuple[str, RunConfig]] = []

    def variant_row(label: str, **edits) -> None:
        c = _clone_config(cfg)
        for key, value in edits.items():
            section, name = key.split(".")
            setattr(getattr(c, section), name, value)
        c.validate()
        out.append((label, c))

    if suite == "branches":
        variant_row("--/--/--", **{"train.variant": "baseline"})
        variant_row("CB/--/--", **{"train.variant": "cb_only"})
        variant_row("--/SB/--", **{"train.variant": "sb_only"})
        variant_row("CB/SB/--", **{"train.variant": "no_cue"})
        variant_row("CB/SB/Cue", **{"train.variant": "full"})
    elif suite == "head_mode":
        variant_row("cls_head", **{"train.variant": "cls_head"})
        variant_row("frozen_lm", **{"train.variant": "full", "train.head_mode": "frozen_lm"})
    elif suite == "granularity":
        for g in (1, 2, 3):
            variant_row(f"granularity={g}", **{"data.granularity": g})
    elif suite == "style_prompts":
        for k in (1, 2, 3):
            variant_row("+".join(f"style{i}" for i in range(1, k + 1)),
                        **{"train.style_prompt_count": k})
    elif suite == "lambda_sweep":
        defaults = (cfg.weights.content, cfg.weights.style, cfg.weights.cls, cfg.weights.cue)
        grids = {
            "content": (0.1, 0.4, 0.8),
            "style": (0.1, 0.4, 0.8),
            "cls": (0.05, 0.15, 0.4),
            "cue": (0.01, 0.05, 0.2),
        }
        seen = set()
        for name, grid in grids.items():
            for v in grid:
                values = dict(content=defaults[0], style=defaults[1],
                              cls=defaults[2], cue=defaults[3])
                values[name] = v
                key = tuple(values.values())
                if key in seen:
                    continue
                seen.add(key)
                label = "defaults" if key == defaults else f"{name}={v}"
                variant_row(label, **{f"weights.{k}": val for k, val in values.items()})
    elif suite == "qformer_depth":
        for depth in (1, 2, 3, 4):
            variant_row(f"depth={depth}", **{"qformer.depth": depth})
    elif suite == "binary_mode":
        variant_row("full", **{"train.variant": "full"})
        variant_row("binary,no-style", **{"train.variant": "no_style"})
    else:
        raise ValueError(f"unknown ablation suite: {suite} (have {ABLATION_SUITES})")
    return out


def run_ablations(cfg: RunConfig, suite: str,
                  meta_train: list[synthdata.Sample],
                  meta_eval: list[synthdata.Sample],
                  targets: list[tuple[str, list[synthdata.Sample]]],
                  lm_provider, seeds: list[int] | None = None,
                  progress: bool = False) -> dict:
    """Train/evaluate each suite configuration with shared seeds and data.

    `lm_provider(granularities)` returns a frozen LM pretrained on a corpus
    covering those content granularities (cached by the caller).
    """
    from .train import fit  # local import to avoid a cycle

    if suite == "llm_free_timing":
        return _timing_suite(cfg, meta_train, targets, lm_provider)

    if suite not in ABLATION_SUITES:
        raise ValueError(f"unknown ablation suite: {suite} (have {ABLATION_SUITES})")
    seeds = seeds or [cfg.train.seed + i for i in range(cfg.train.replicates)]
    vocab = textproto.default_vocabulary()
    rows = []
    for label, row_cfg in _suite_configs(cfg, suite):
        reports = []
        for seed in seeds:
            c = _clone_config(row_cfg)
            c.train.seed = seed
            needs_lm = c.toggles().head_mode == "frozen_lm"
            grans = (1, 2, 3) if suite == "granularity" else (c.data.granularity,)
            lm = lm_provider(grans) if needs_lm else None
            result = fit(c, meta_train, lm, vocab=vocab)
            report, _ = run_protocol(result.model, targets, c.eval)
            reports.append(report)
            if progress:
                print(f"[{suite}] {label} seed={seed} "
                      f"mean HTER {100 * report.mean['hter']:.2f}%")
        agg = aggregate_seed_reports(reports)
        rows.append({"label": label, **agg["mean"], "per_domain": agg["per_domain"]})
    base = rows[0]
    table_rows = []
    for r in rows:
        rel = ""
        if suite == "branches" and base["hter"] > 0:
            rel = f" (+{100 * (base['hter'] - r['hter']) / base['hter']:.1f}%)"
        table_rows.append([r["label"], f"{100 * r['hter']:.2f}{rel}",
                           f"{100 * r['auc']:.2f}", f"{100 * r['tpr_at_fpr']:.2f}"])
    table = format_table(["config", "HTER%", "AUC%", "TPR%@FPR=1%"], table_rows)
    return {"suite": suite, "seeds": seeds, "rows": rows, "table": table}


def _timing_suite(cfg: RunConfig, meta_train, targets, lm_provider) -> dict:
    """Per-sample inference seconds, full pipeline (with answer decoding)
    against the LLM-free score path, over >= 200 samples."""
    from .train import fit

    vocab = textproto.default_vocabulary()
    c = _clone_config(cfg)
    lm = lm_provider((c.data.granularity,))
    result = fit(c, meta_train, lm, vocab=vocab)
    samples = [s for _, ss in targets for s in ss][:max(200, 1)]
    if len(samples) < 200:
        reps = (200 // max(len(samples), 1)) + 1
        samples = (samples * reps)[:200]

    def time_path(fn) -> tuple[float, float]:
        times = []
        for s in samples:
            batch = collate([s])
            t0 = time.perf_counter()
            fn(batch)
            times.append(time.perf_counter() - t0)
        return float(np.mean(times)), float(np.std(times))

    full_mean, full_std = time_path(lambda b: result.model.infer(b.images, decode=True))
    score_mean, score_std = time_path(lambda b: result.model.fake_scores(b.images))
    rows = [["full (decode answers)", f"{full_mean:.4f}", f"{full_std:.4f}"],
            ["llm-free (score only)", f"{score_mean:.4f}", f"{score_std:.4f}"]]
    table = format_table(["path", "sec/sample mean", "sec/sample std"], rows)
    return {"suite": "llm_free_timing", "n_samples": len(samples),
            "rows": [{"label": r[0], "mean_s": float(r[1]), "std_s": float(r[2])} for r in rows],
            "table": table}


# -- answer accuracy ---------------------------------------------------------------


def content_answer_accuracy(model: FasModel, samples: list[synthdata.Sample]) -> dict:
    qtype = model.content_qtype
    acc, malformed = model.answer_accuracy(samples, qtype)
    return {"qtype": qtype.value, "accuracy": acc, "malformed_rate": malformed,
            "n": len(samples)}
