"""Pseudo-relevance labels and loss weights computed from aggregated pairs.

``log`` is the natural logarithm everywhere; the scale ``s`` absorbs any
other base. ``log1p`` is used so tiny arguments (unclicked pairs, whose
combined label reduces to the rank term) keep full relative precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable

from .aggregation import AggregatedPair
from .errors import NonFinite, PolicyUnresolved

WEIGHT_MODES = ("none", "views", "clicks")
FORMULAS = ("clicks", "dwell", "rank", "cdr")


@dataclass(frozen=True)
class DwellMissing:
    """What to use as dwell time for a pair without any known dwell."""

    kind: str = "constant"  # zero | global_mean | constant
    value: float = 20.0

    def __post_init__(self):
        if self.kind not in ("zero", "global_mean", "constant"):
            raise ValueError(f"unknown dwell-missing policy {self.kind!r}")
        if self.kind == "constant" and not (self.value >= 0 and math.isfinite(self.value)):
            raise ValueError("constant dwell substitute must be finite and >= 0")

    @classmethod
    def parse(cls, text: str) -> "DwellMissing":
        if text == "zero":
            return cls("zero", 0.0)
        if text in ("mean", "global_mean"):
            return cls("global_mean", 0.0)
        if text.startswith("const:"):
            return cls("constant", float(text[6:]))
        raise ValueError(f"dwell-missing policy must be zero, mean or const:V (got {text!r})")

    def __str__(self) -> str:
        if self.kind == "constant":
            return f"const:{self.value:g}"
        return "mean" if self.kind == "global_mean" else "zero"


@dataclass(frozen=True)
class LabelConfig:
    alpha: float = 1.0
    beta: float = 0.5
    scale_s: float = 1 / 20
    rank_c: float = 100.0
    dwell_missing: DwellMissing = DwellMissing()
    weight_mode: str = "none"
    # corpus mean of known dwell totals, needed by the global_mean policy
    dwell_mean: float | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("click weights alpha and beta must be >= 0")
        if not self.scale_s > 0 or not self.rank_c > 0:
            raise ValueError("scale_s and rank_c must be strictly positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")

    def with_corpus_mean(self, pairs: Iterable[AggregatedPair]) -> "LabelConfig":
        return replace(self, dwell_mean=corpus_dwell_mean(pairs))


def corpus_dwell_mean(pairs: Iterable[AggregatedPair]) -> float:
    total = 0
    n = 0
    for p in pairs:
        if p.dwell_known > 0:
            total += p.dwell_total
            n += 1
    return total / n if n else 0.0


def clip01(x: float) -> float:
    if not math.isfinite(x):
        raise NonFinite(f"cannot clip non-finite value {x!r}")
    return max(0.0, min(1.0, x))


def weighted_clicks(pair: AggregatedPair, cfg: LabelConfig) -> float:
    return cfg.alpha * pair.nonlast_clicks + cfg.beta * pair.last_clicks


def click_label(pair: AggregatedPair, cfg: LabelConfig) -> float:
    return clip01(cfg.scale_s * math.log1p(weighted_clicks(pair, cfg)))


def resolve_dwell(pair: AggregatedPair, policy: DwellMissing, dwell_mean: float | None) -> float:
    if pair.dwell_known > 0:
        return float(pair.dwell_total)
    if policy.kind == "zero":
        return 0.0
    if policy.kind == "constant":
        return policy.value
    if dwell_mean is None:
        raise PolicyUnresolved("global_mean dwell policy needs the corpus mean; use LabelConfig.with_corpus_mean")
    return dwell_mean


def dwell_label(pair: AggregatedPair, cfg: LabelConfig) -> float:
    d = resolve_dwell(pair, cfg.dwell_missing, cfg.dwell_mean)
    return clip01(cfg.scale_s * math.log1p(d))


def rank_label(pair: AggregatedPair, cfg: LabelConfig) -> float:
    """Views over summed rank plus ``C``: reciprocal mean rank boosted for frequent pairs."""
    return pair.views / (pair.rank_sum + cfg.rank_c)


def click_dwell_rank_label(pair: AggregatedPair, cfg: LabelConfig) -> float:
    signal = weighted_clicks(pair, cfg) + pair.views / (pair.rank_sum + cfg.rank_c)
    return clip01(cfg.scale_s * math.log1p(signal * max(1.0, float(pair.dwell_total))))


def loss_weight(pair: AggregatedPair, cfg: LabelConfig) -> float:
    if cfg.weight_mode == "views":
        return math.log(2 + pair.views)
    if cfg.weight_mode == "clicks":
        return math.log(2 + pair.clicks_total)
    return 1.0


LABEL_FUNCTIONS: dict[str, Callable[[AggregatedPair, LabelConfig], float]] = {
    "clicks": click_label,
    "dwell": dwell_label,
    "rank": rank_label,
    "cdr": click_dwell_rank_label,
}


def label_value(pair: AggregatedPair, cfg: LabelConfig, formula: str) -> float:
    """Training label for ``formula``; the rank label is clipped into [0, 1] here."""
    return clip01(LABEL_FUNCTIONS[formula](pair, cfg))


def label_rows(
    pairs: Iterable[AggregatedPair], cfg: LabelConfig, formula: str
) -> Iterable[tuple[str, str, str, str, float, float]]:
    fn = LABEL_FUNCTIONS[formula]
    for p in pairs:
        yield p.query, p.url, p.title, p.bte, clip01(fn(p, cfg)), loss_weight(p, cfg)
