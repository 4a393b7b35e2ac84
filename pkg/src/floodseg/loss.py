"""Masked cross-entropy, the elevation-guided pairwise loss, and audit tools.

The pairwise loss sums, over every labeled pixel p and each of its 8
neighbors p_n, a constant weight w(p, p_n) times a deviation term
(1 - gt(p_n) * f(p)), where f(p) in (-1, 1) is the signed confidence of
the prediction at p. The weight is nonzero exactly when the neighbor's
label plus the elevation difference constrain p (a flooded neighbor
uphill, or a dry neighbor downhill). Neighborhoods are expanded into 8
shifted planes ("unfold") with a one-pixel reflected border, turning the
pair sum into elementwise arithmetic.

Only the deviation term sees the network scores, so gradients reach a
pixel solely through its own confidence; weights are data constants.
"""

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .raster import ElevationMap, LabelMap

# fixed neighbor order: row-major scan of the 3x3 window, center excluded
NEIGHBOR_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)

WEIGHTING_SCHEMES = ("binary", "elev_diff", "log_elev_diff")
LOSS_SCHEMES = ("ce", "ce+eva", "eva")
BORDER_MODES = ("include", "exclude")
REDUCE_MODES = ("sum", "mean_per_labeled")


class PairCase(enum.Enum):
    """The five classes of an ordered pixel-pair (p, p_n)."""

    UNLABELED_NEIGHBOR = "unlabeled_neighbor"
    FLOOD_NEIGHBOR_HIGHER = "flood_neighbor_higher"
    FLOOD_NEIGHBOR_NOT_HIGHER = "flood_neighbor_not_higher"
    DRY_NEIGHBOR_LOWER = "dry_neighbor_lower"
    DRY_NEIGHBOR_NOT_LOWER = "dry_neighbor_not_lower"

    @property
    def active(self):
        """Whether the pair constrains p under the law of gravity."""
        return self in (PairCase.FLOOD_NEIGHBOR_HIGHER, PairCase.DRY_NEIGHBOR_LOWER)


@dataclass
class LossConfig:
    scheme: str = "eva"
    lambda_: float = 1.0
    weighting: str = "binary"
    border_pairs: str = "include"
    reduce: str = "sum"

    def __post_init__(self):
        if self.scheme not in LOSS_SCHEMES:
            raise ValueError(f"unknown loss scheme {self.scheme!r}")
        if self.weighting not in WEIGHTING_SCHEMES:
            raise ValueError(f"unknown weighting scheme {self.weighting!r}")
        if self.border_pairs not in BORDER_MODES:
            raise ValueError(f"border_pairs must be one of {BORDER_MODES}")
        if self.reduce not in REDUCE_MODES:
            raise ValueError(f"reduce must be one of {REDUCE_MODES}")
        if self.lambda_ < 0:
            raise ValueError("lambda must be nonnegative")


@dataclass
class ScorePair:
    """Raw dry/flood score planes with derived probabilities."""

    s_dry: np.ndarray
    s_flood: np.ndarray

    def __post_init__(self):
        self.s_dry = np.asarray(self.s_dry)
        self.s_flood = np.asarray(self.s_flood)
        if self.s_dry.shape != self.s_flood.shape:
            raise ValueError("score planes must have equal dims")
        if not (np.isfinite(self.s_dry).all() and np.isfinite(self.s_flood).all()):
            raise ValueError("scores must be finite")

    def _softmax(self):
        m = np.maximum(self.s_flood, self.s_dry)
        ef = np.exp(self.s_flood - m)
        ed = np.exp(self.s_dry - m)
        return ed / (ed + ef), ef / (ed + ef)

    def p_flood(self):
        return self._softmax()[1]

    def p_dry(self):
        return self._softmax()[0]


def _labels2d(gt):
    if isinstance(gt, LabelMap):
        return gt.values
    return np.asarray(gt)


def _heights2d(h):
    if isinstance(h, ElevationMap):
        return h.values.astype(np.float64)
    return np.asarray(h, dtype=np.float64)


def unfold_neighbors(a):
    """Expand (H,W) into 8 neighbor planes using a reflected border."""
    a = np.asarray(a)
    ap = np.pad(a, 1, mode="reflect")
    h, w = a.shape
    return np.stack(
        [ap[1 + di : 1 + di + h, 1 + dj : 1 + dj + w] for di, dj in NEIGHBOR_OFFSETS]
    )


def interior_pair_mask(h, w):
    """Validity planes: False where the neighbor falls outside the grid."""
    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]
    planes = []
    for di, dj in NEIGHBOR_OFFSETS:
        planes.append(
            ((ii + di >= 0) & (ii + di < h)) & ((jj + dj >= 0) & (jj + dj < w))
        )
    return np.stack(planes)


def neighbor_diffs(h):
    """Elevation drop from each pixel to its 8 neighbors: h(p) - h(p_n)."""
    hv = _heights2d(h)
    return hv[None, :, :] - unfold_neighbors(hv)


def classify_pair(gt_n, dh):
    """Classify one ordered pair from the neighbor label and elevation drop."""
    if gt_n == 0:
        return PairCase.UNLABELED_NEIGHBOR
    if gt_n == 1:
        return (
            PairCase.FLOOD_NEIGHBOR_HIGHER
            if dh < 0
            else PairCase.FLOOD_NEIGHBOR_NOT_HIGHER
        )
    if gt_n == -1:
        return (
            PairCase.DRY_NEIGHBOR_LOWER if dh > 0 else PairCase.DRY_NEIGHBOR_NOT_LOWER
        )
    raise ValueError(f"label must be in {{-1,0,1}}, got {gt_n}")


def pair_weight(gt_n, dh, scheme="binary"):
    """Constraint weight of one ordered pair; zero exactly when inactive."""
    act = -float(gt_n) * float(dh)
    if scheme == "binary":
        return 1.0 if act > 0 else 0.0
    if scheme == "elev_diff":
        return max(act, 0.0)
    if scheme == "log_elev_diff":
        return float(np.log1p(max(act, 0.0)))
    raise ValueError(f"unknown weighting scheme {scheme!r}")


def f_value(s_flood, s_dry):
    """Signed confidence in (-1, 1); ties resolve to the flood branch."""
    if s_flood >= s_dry:
        return float(1.0 / (1.0 + np.exp(-s_flood)))
    return float(-1.0 / (1.0 + np.exp(-s_dry)))


def pair_deviation(gt_n, f_p):
    """How far the prediction at p strays from the pair's constraint."""
    return 1.0 - float(gt_n) * float(f_p)


def weight_planes(gt, h, weighting="binary", border_pairs="include"):
    """Per-pair weights and neighbor labels as (8,H,W) planes.

    Weights use raw (unnormalized) elevations and are pure data
    constants: they never carry gradient.
    """
    gtv = _labels2d(gt).astype(np.float64)
    gtn = unfold_neighbors(gtv)
    dh = neighbor_diffs(h)
    act = -gtn * dh
    if weighting == "binary":
        w = (act > 0).astype(np.float64)
    elif weighting == "elev_diff":
        w = np.maximum(act, 0.0)
    elif weighting == "log_elev_diff":
        w = np.log1p(np.maximum(act, 0.0))
    else:
        raise ValueError(f"unknown weighting scheme {weighting!r}")
    if border_pairs == "exclude":
        w = w * interior_pair_mask(*gtv.shape)
    elif border_pairs != "include":
        raise ValueError(f"border_pairs must be one of {BORDER_MODES}")
    return w, gtn


def _check_scores(scores, gt):
    if scores.data.ndim != 3 or scores.data.shape[0] != 2:
        raise ValueError("scores must be a (2,H,W) tensor: channel 0 dry, 1 flood")
    gtv = _labels2d(gt)
    if gtv.shape != scores.data.shape[1:]:
        raise ValueError("label dims do not match scores")
    return gtv


def cross_entropy_loss(scores, gt, reduce="sum"):
    """Pixel-wise cross entropy over labeled pixels only.

    scores: (2,H,W) tensor, channel 0 = dry, channel 1 = flood.
    """
    gtv = _check_scores(scores, gt)
    mask = np.stack([(gtv == -1), (gtv == 1)]).astype(scores.data.dtype)
    logp = autodiff.log(autodiff.softmax_channel(scores))
    loss = -(autodiff.Tensor(mask) * logp).sum()
    if reduce == "mean_per_labeled":
        loss = loss * (1.0 / max(1, int((gtv != 0).sum())))
    return loss


def elevation_loss(
    scores, gt, h, weighting="binary", border_pairs="include", reduce="sum"
):
    """Physics-guided pairwise loss over labeled pixels and their neighbors.

    Expanded form: sum_p S(p) - sum_p A(p) * f(p), where
    S(p) = sum_n w(p,p_n) and A(p) = sum_n w(p,p_n) * gt(p_n) over the
    8 neighbors, both restricted to labeled p. Only f carries gradient;
    at a tied score the flood branch is differentiated.
    """
    gtv = _check_scores(scores, gt)
    w, gtn = weight_planes(gtv, h, weighting, border_pairs)
    labeled = gtv != 0
    s_per_px = w.sum(axis=0) * labeled
    a_per_px = (w * gtn).sum(axis=0) * labeled

    dt = scores.data.dtype
    branch_flood = scores.data[1] >= scores.data[0]
    coeff = np.zeros_like(scores.data)
    coeff[1] = (a_per_px * branch_flood).astype(dt)
    coeff[0] = (-a_per_px * ~branch_flood).astype(dt)

    const = autodiff.Tensor(np.asarray(s_per_px.sum(), dtype=dt))
    loss = const - (autodiff.Tensor(coeff) * autodiff.sigmoid(scores)).sum()
    if reduce == "mean_per_labeled":
        loss = loss * (1.0 / max(1, int(labeled.sum())))
    return loss


def total_loss(scores, gt, h, cfg):
    """Combined loss per the configured scheme: ce, ce+eva, or eva."""
    if cfg.lambda_ < 0:
        raise ValueError("lambda must be nonnegative")
    if cfg.scheme == "ce":
        return cross_entropy_loss(scores, gt, cfg.reduce)
    eva = elevation_loss(scores, gt, h, cfg.weighting, cfg.border_pairs, cfg.reduce)
    if cfg.scheme == "eva":
        return eva
    ce = cross_entropy_loss(scores, gt, cfg.reduce)
    return ce + eva * cfg.lambda_


def case_histogram(gt, h, border_pairs="include"):
    """Pair counts per case over labeled centers and their 8 neighbors."""
    gtv = _labels2d(gt)
    gtn = unfold_neighbors(gtv.astype(np.int64))
    dh = neighbor_diffs(h)
    centers = (gtv != 0)[None, :, :]
    if border_pairs == "exclude":
        centers = centers & interior_pair_mask(*gtv.shape)
    counts = {
        PairCase.UNLABELED_NEIGHBOR: int((centers & (gtn == 0)).sum()),
        PairCase.FLOOD_NEIGHBOR_HIGHER: int((centers & (gtn == 1) & (dh < 0)).sum()),
        PairCase.FLOOD_NEIGHBOR_NOT_HIGHER: int(
            (centers & (gtn == 1) & (dh >= 0)).sum()
        ),
        PairCase.DRY_NEIGHBOR_LOWER: int((centers & (gtn == -1) & (dh > 0)).sum()),
        PairCase.DRY_NEIGHBOR_NOT_LOWER: int(
            (centers & (gtn == -1) & (dh <= 0)).sum()
        ),
    }
    return counts


def violation_rate(pred, gt, h, border_pairs="include"):
    """Fraction of constrained pairs whose hard prediction defies gravity.

    Active pairs are counted at every center pixel (the physical law
    does not care whether p itself is annotated); 0/0 returns 0.
    """
    predv = _labels2d(pred)
    if not np.isin(predv, (-1, 1)).all():
        raise ValueError("prediction must be hard labels in {-1, +1}")
    gtn = unfold_neighbors(_labels2d(gt).astype(np.int64))
    dh = neighbor_diffs(h)
    case21 = (gtn == 1) & (dh < 0)
    case31 = (gtn == -1) & (dh > 0)
    if border_pairs == "exclude":
        ok = interior_pair_mask(*predv.shape)
        case21 &= ok
        case31 &= ok
    active = int(case21.sum() + case31.sum())
    if active == 0:
        return 0.0
    viol = int((case21 & (predv == -1)[None]).sum()) + int(
        (case31 & (predv == 1)[None]).sum()
    )
    return viol / active


def histogram_json(counts):
    """Stable-keyed mapping for audit output."""
    return {case.value: counts[case] for case in PairCase}
