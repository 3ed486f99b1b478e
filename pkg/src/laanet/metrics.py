"""Depth evaluation: median scaling, range caps and the seven standard errors."""
from dataclasses import asdict, dataclass

import numpy as np

MIN_DEPTH = 1e-3
DEPTH_CAPS = (40.0, 50.0, 60.0, 80.0)
COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
HEADERS = ("Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d<1.25", "d<1.25^2", "d<1.25^3")


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    scale_factor: float = 1.0
    valid_pixel_count: int = 0
    cap_m: float = 80.0

    def row(self):
        return [getattr(self, c) for c in COLUMNS]

    def to_tsv(self, digits=3):
        return "\t".join(f"{v:.{digits}f}" for v in self.row())

    def to_dict(self):
        return asdict(self)


def median_scale(pred, gt, mask=None):
    """Scale ``pred`` so its median over ``mask`` matches that of ``gt``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise EvaluationError("median scaling needs at least one masked pixel")
    mp, mg = np.median(pred[mask]), np.median(gt[mask])
    if mp <= 0 or mg <= 0:
        raise ZeroDivisionError(f"non-positive median (pred {mp}, gt {mg})")
    s = mg / mp
    return pred * s, float(s)


def compute_errors(pred, gt):
    """The seven metrics on already-masked 1-D arrays."""
    thresh = np.maximum(gt / pred, pred / gt)
    d1 = (thresh < 1.25).mean()
    d2 = (thresh < 1.25**2).mean()
    d3 = (thresh < 1.25**3).mean()
    diff = pred - gt
    rmse = np.sqrt((diff**2).mean())
    rmse_log = np.sqrt(((np.log(pred) - np.log(gt)) ** 2).mean())
    abs_rel = np.mean(np.abs(diff) / gt)
    sq_rel = np.mean(diff**2 / gt)
    return abs_rel, sq_rel, rmse, rmse_log, d1, d2, d3


def compute_metrics(pred, gt, cap_m=80.0, min_depth=MIN_DEPTH, median_scaling=True):
    if not cap_m > min_depth > 0:
        raise ValueError(f"need cap_m > min_depth > 0, got cap_m={cap_m}, min_depth={min_depth}")
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = (gt > min_depth) & (gt <= cap_m)
    if not mask.any():
        raise EvaluationError(f"no ground-truth pixels in ({min_depth}, {cap_m}] m")
    p, g = pred[mask], gt[mask]
    scale = 1.0
    if median_scaling:
        p, scale = median_scale(p, g)
    p = np.clip(p, min_depth, cap_m)
    errs = compute_errors(p, g)
    return MetricsReport(*map(float, errs), scale_factor=scale, valid_pixel_count=int(mask.sum()), cap_m=cap_m)


def mean_report(reports):
    """Average per-image reports (the usual per-image-then-mean aggregation)."""
    if not reports:
        raise EvaluationError("no reports to aggregate")
    vals = np.mean([r.row() for r in reports], 0)
    return MetricsReport(
        *map(float, vals),
        scale_factor=float(np.mean([r.scale_factor for r in reports])),
        valid_pixel_count=int(sum(r.valid_pixel_count for r in reports)),
        cap_m=reports[0].cap_m,
    )


def format_table(rows, label_header="Setting", columns=HEADERS):
    """Tab-separated table in the standard column order; ``rows`` is ``[(label, report)]``."""
    n = len(columns)
    lines = ["\t".join([label_header, *columns])]
    for label, rep in rows:
        lines.append("\t".join([str(label), *(f"{v:.3f}" for v in rep.row()[:n])]))
    return "\n".join(lines)
