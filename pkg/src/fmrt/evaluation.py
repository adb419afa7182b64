"""Homography-protocol evaluation of a matcher on synthetic pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .geometry.homography import HomographyError, RansacConfig, estimate_homography
from .geometry.metrics import CCM_THRESHOLDS, MMA_THRESHOLDS, auc, corner_error, reprojection_error
from .geometry.synth import SyntheticPair, synth_pair
from .model import FMRT

AUC_THRESHOLDS = (3, 5, 10)


@dataclass
class SourceResult:
    """Metrics for one pair from one match source (coarse or refined)."""

    n_matches: int
    errors: np.ndarray  # per-match reprojection error under the true warp
    corner_error: float  # inf when estimation failed
    failed: bool

    def to_dict(self) -> Dict[str, object]:
        return {
            "n_matches": self.n_matches,
            "mean_reprojection_error": None if self.n_matches == 0 else float(self.errors.mean()),
            "corner_error": None if not np.isfinite(self.corner_error) else self.corner_error,
            "estimation_failed": self.failed,
        }


@dataclass
class PairResult:
    seed: int
    coarse: SourceResult
    fine: SourceResult

    def to_dict(self) -> Dict[str, object]:
        return {"seed": self.seed, "coarse": self.coarse.to_dict(), "fine": self.fine.to_dict()}


def _score(pa: np.ndarray, pb: np.ndarray, pair: SyntheticPair, ransac: RansacConfig) -> SourceResult:
    H_gt = pair.warp.H
    errors = reprojection_error(pa, pb, H_gt) if len(pa) else np.zeros(0)
    size = pair.img_a.shape
    try:
        H, _ = estimate_homography(pa, pb, ransac)
        err = corner_error(H, H_gt, size)
        failed = not np.isfinite(err)
    except HomographyError:
        err, failed = float("inf"), True
    return SourceResult(len(pa), errors, err, failed)


def evaluate_pair(model: FMRT, pair: SyntheticPair, ransac: RansacConfig) -> PairResult:
    coarse, fine = model.match(pair.img_a, pair.img_b)
    return PairResult(
        pair.seed,
        coarse=_score(coarse.pa, coarse.pb, pair, ransac),
        fine=_score(fine.pa, fine.pb, pair, ransac),
    )


def eval_pairs(cfg: RunConfig, n: int, seed: int) -> List[SyntheticPair]:
    """``n`` held-out pairs; seeds are derived from ``seed`` so runs repeat exactly."""
    if n <= 0:
        raise ValueError("no pairs")
    ss = np.random.SeedSequence([seed, 1])
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n)]
    return [synth_pair(s, cfg.image_size, cfg.warp_magnitude, cfg.photometric) for s in seeds]


def _aggregate(results: Sequence[SourceResult]) -> Dict[str, object]:
    corner = np.array([r.corner_error for r in results])
    errors = np.concatenate([r.errors for r in results]) if results else np.zeros(0)
    finite = errors[np.isfinite(errors)]
    return {
        "ccm": {str(t): float((corner < t).mean()) for t in CCM_THRESHOLDS},
        "auc": {str(t): float(v) for t, v in zip(AUC_THRESHOLDS, auc(corner, AUC_THRESHOLDS))},
        "mma": None if errors.size == 0 else {str(t): float((errors < t).mean()) for t in MMA_THRESHOLDS},
        "mean_reprojection_error": None if finite.size == 0 else float(finite.mean()),
        "n_matches": int(errors.size),
        "estimation_failures": int(sum(r.failed for r in results)),
    }


@dataclass
class EvalReport:
    pairs: List[PairResult]
    config: Optional[RunConfig] = None
    extra: Dict[str, object] = field(default_factory=dict)

    def aggregate(self) -> Dict[str, Dict[str, object]]:
        return {
            "coarse": _aggregate([p.coarse for p in self.pairs]),
            "fine": _aggregate([p.fine for p in self.pairs]),
        }

    def to_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        if self.config is not None:
            out["config"] = self.config.to_dict()
        out.update(self.extra)
        out["n_pairs"] = len(self.pairs)
        out["aggregate"] = self.aggregate()
        out["pairs"] = [p.to_dict() for p in self.pairs]
        return out


def evaluate(model: FMRT, pairs: Sequence[SyntheticPair], ransac: Optional[RansacConfig] = None) -> EvalReport:
    if not pairs:
        raise ValueError("no pairs")
    cfg = model.cfg
    ransac = ransac or RansacConfig(threshold=cfg.ransac_threshold, max_iters=cfg.ransac_iters, seed=cfg.seed)
    return EvalReport([evaluate_pair(model, p, ransac) for p in pairs], cfg)
