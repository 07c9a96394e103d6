"""Overlap and deformation-error scoring of filtered series against ground truth."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .deform import interior_mask
from .errors import DataError, GridMismatchError
from .phantom import rng_stream
from .volume import LabelMap, warp_labels

CSV_COLUMNS = ("case", "frame", "roi", "mode", "dice", "epe_mean", "epe_p95", "min_jacobian")
REPORT_MODES = ("none", "pairwise", "sequential", "concat")


def _as_array(x):
    return x.data if isinstance(x, LabelMap) else np.asarray(x)


def dice(a, b, label):
    """Dice overlap of the voxels carrying ``label`` in ``a`` and ``b``.

    Both empty counts as perfect agreement (1.0); exactly one empty gives 0.0.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise GridMismatchError(f"label grids differ: {a.shape} vs {b.shape}")
    ma = a == label
    mb = b == label
    na, nb = int(ma.sum()), int(mb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ma & mb)) / (na + nb)


def endpoint_error(est, gt, mask=None, margin=2):
    """``(mean, max, p95)`` of ``|est - gt|`` in voxels.

    ``mask`` may be a boolean array or a label map (nonzero voxels count);
    without it, voxels within ``margin`` of the border are excluded.
    """
    e = est.data if hasattr(est, "data") else np.asarray(est)
    g = gt.data if hasattr(gt, "data") else np.asarray(gt)
    if e.shape != g.shape:
        raise GridMismatchError(f"field grids differ: {e.shape[:3]} vs {g.shape[:3]}")
    err = np.sqrt(np.sum((e - g) ** 2, axis=-1))
    if mask is None:
        sel = interior_mask(err.shape, margin)
        if not sel.any():
            sel = np.ones(err.shape, dtype=bool)
    else:
        sel = _as_array(mask) != 0
        if sel.shape != err.shape:
            raise GridMismatchError(f"mask grid {sel.shape} does not match field {err.shape}")
    vals = err[sel]
    if vals.size == 0:
        return 0.0, 0.0, 0.0
    return float(vals.mean()), float(vals.max()), float(np.percentile(vals, 95))


@dataclass
class ReportRow:
    case: str
    frame: int
    roi: str
    mode: str
    dice: float
    epe_mean: float = float("nan")
    epe_p95: float = float("nan")
    min_jacobian: float = float("nan")

    def as_tuple(self):
        return (self.case, self.frame, self.roi, self.mode, self.dice,
                self.epe_mean, self.epe_p95, self.min_jacobian)


@dataclass
class OverlapReport:
    rows: list = field(default_factory=list)

    def modes(self):
        return sorted({r.mode for r in self.rows}, key=_mode_rank)

    def cases(self):
        return sorted({r.case for r in self.rows})

    def select(self, case=None, mode=None, roi=None):
        return [r for r in self.rows
                if (case is None or r.case == case)
                and (mode is None or r.mode == mode)
                and (roi is None or r.roi == roi)]

    def mean_dice(self, mode, case=None, roi=None):
        vals = [r.dice for r in self.select(case, mode, roi)]
        if not vals:
            raise KeyError(f"no rows for mode={mode!r} case={case!r} roi={roi!r}")
        return float(np.mean(vals))

    def min_dice(self, mode, case=None, roi=None):
        return float(min(r.dice for r in self.select(case, mode, roi)))

    def aggregates(self):
        """``{(case, mode): (mean dice, min dice)}``."""
        return {(c, m): (self.mean_dice(m, c), self.min_dice(m, c))
                for c in self.cases() for m in self.modes() if self.select(c, m)}

    def case_order(self, mode="sequential"):
        """Cases sorted by increasing mean dice under ``mode``."""
        return sorted(self.cases(), key=lambda c: (self.mean_dice(mode, c), c))

    def extend(self, other):
        self.rows.extend(other.rows)
        return self

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.case, r.frame, r.roi, r.mode, _fmt(r.dice), _fmt(r.epe_mean),
                        _fmt(r.epe_p95), _fmt(r.min_jacobian)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary(self):
        lines = [f"{'case':<12}{'mode':<12}{'mean':>8}{'min':>8}"]
        for case in self.case_order() if "sequential" in self.modes() else self.cases():
            for mode in self.modes():
                if self.select(case, mode):
                    lines.append(f"{case:<12}{mode:<12}{self.mean_dice(mode, case):8.4f}"
                                 f"{self.min_dice(mode, case):8.4f}")
        return "\n".join(lines)


def _fmt(x):
    return "" if x != x else f"{x:.6g}"


def _mode_rank(mode):
    return (REPORT_MODES.index(mode), mode) if mode in REPORT_MODES else (len(REPORT_MODES), mode)


def sample_frames(n_frames, count=5, seed=0):
    """``count`` distinct random 1-based frame numbers (excluding the template frame), sorted."""
    pool = np.arange(2, n_frames + 1)
    if count >= pool.size:
        return [int(i) for i in pool]
    rng = rng_stream(seed, "eval-frames")
    return sorted(int(i) for i in rng.choice(pool, size=count, replace=False))


def build_report(results, labels, frame_labels, gt_forward=None, case="case",
                 modes=("none", "pairwise", "sequential"), frames=None):
    """Per-frame, per-ROI dice (plus endpoint error when ground truth is known).

    ``results`` maps mode name to a :class:`SeriesResult`; ``frame_labels`` holds the
    reference segmentation for each frame (index 0 = frame 1), either a list or a
    dict keyed by 1-based frame number. ``none`` propagates with the zero field.
    ``frames`` restricts scoring to the given 1-based frame numbers.
    """
    if isinstance(frame_labels, dict):
        ref = dict(frame_labels)
    else:
        ref = {i + 1: lab for i, lab in enumerate(frame_labels)}
    missing = [m for m in modes if m != "none" and m not in results]
    if missing:
        raise DataError(f"missing results for mode(s): {', '.join(missing)}")
    frames = sorted(ref) if frames is None else list(frames)
    absent = [n for n in frames if n not in ref]
    if absent:
        raise DataError(f"no reference labels for frame(s) {absent}")
    roi_ids = labels.labels()
    names = labels.label_names or {}

    report = OverlapReport()
    for mode in modes:
        for n in frames:
            target = ref[n]
            if tuple(target.dims) != tuple(labels.dims):
                raise GridMismatchError(f"frame {n} labels grid does not match template labels")
            epe_mean = epe_p95 = min_jac = float("nan")
            if mode == "none":
                moved = labels
                if gt_forward is not None:
                    gt = gt_forward[n - 1]
                    epe_mean, _, epe_p95 = endpoint_error(np.zeros_like(gt.data), gt)
            else:
                fr = results[mode].frame(n)
                if fr.inverse is None:
                    raise DataError(f"{mode} frame {n}: deformation fields were not kept")
                moved = warp_labels(labels, fr.inverse)
                min_jac = fr.min_jacobian
                if gt_forward is not None and fr.forward is not None:
                    epe_mean, _, epe_p95 = endpoint_error(fr.forward, gt_forward[n - 1])
            for lab in roi_ids:
                report.rows.append(ReportRow(case, n, names.get(lab, str(lab)), mode,
                                             dice(moved, target, lab), epe_mean, epe_p95, min_jac))
    return report


def read_report_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise DataError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
        for rec in reader:
            num = {k: float(rec[k]) if rec[k] != "" else float("nan")
                   for k in ("dice", "epe_mean", "epe_p95", "min_jacobian")}
            rows.append(ReportRow(rec["case"], int(rec["frame"]), rec["roi"], rec["mode"], **num))
    return OverlapReport(rows)
