"""Forward filtering over a volume series, plus the two baseline strategies.

``sequential`` is the Markov-chain estimate: each frame is registered to the
template starting from the previous frame's velocity, optionally penalized for
moving away from it. ``pairwise`` registers every frame from the identity with
no temporal term. ``concat`` registers consecutive frames and chains the maps.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .deform import DisplacementField, VelocityField, compose, jacobian_determinant, mean_magnitude
from .errors import DataError, RegistrationError, TempRegError
from .registration import RegConfig, field_digest, register_pair
from .similarity import local_cc
from .volume import LabelMap, Volume3, check_same_grid, warp_labels, warp_volume

log = logging.getLogger(__name__)

MODES = ("sequential", "pairwise", "concat")
# backward smoothing pass, reserved for a later release
RESERVED_MODES = ("smoothing",)


@dataclass(eq=False)
class SeriesInput:
    """Template plus ordered frames; ``frames`` may be any (lazy) sequence."""

    template: Volume3
    frames: Sequence
    labels: Optional[LabelMap] = None

    @classmethod
    def from_frames(cls, frames, labels=None):
        """Use the first frame as the template."""
        return cls(frames[0], frames, labels)


@dataclass(eq=False)
class FrameResult:
    index: int  # 1-based frame number
    velocity: Optional[VelocityField]
    forward: Optional[DisplacementField]
    inverse: Optional[DisplacementField]
    data_term: float
    min_jacobian: float
    iterations: int
    seconds: float
    converged: bool
    mean_displacement: float
    init_digest: Optional[str] = None
    velocity_digest: Optional[str] = None
    objective_trace: list = field(default_factory=list)


@dataclass(eq=False)
class SeriesResult:
    mode: str
    frames: list

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def frame(self, n):
        """Result for 1-based frame number ``n``."""
        if not 1 <= n <= len(self.frames):
            raise IndexError(f"frame {n} out of range 1..{len(self.frames)}")
        return self.frames[n - 1]

    @property
    def flagged(self):
        return [f.index for f in self.frames if not f.converged]


def _frame_result(index, velocity, forward, inverse, data_term, iterations, seconds, converged,
                  init_digest, trace, keep_fields):
    return FrameResult(
        index=index,
        velocity=velocity if keep_fields else None,
        forward=forward if keep_fields else None,
        inverse=inverse if keep_fields else None,
        data_term=data_term,
        min_jacobian=float(jacobian_determinant(forward).data.min()),
        iterations=iterations,
        seconds=seconds,
        converged=converged,
        mean_displacement=mean_magnitude(forward),
        init_digest=init_digest,
        velocity_digest=field_digest(velocity),
        objective_trace=list(trace),
    )


def _register(index, template, frame, init, v_prev, cfg):
    try:
        check_same_grid(template, frame, f"frame {index} grid vs template")
        return register_pair(template, frame, init, v_prev, cfg)
    except TempRegError as exc:
        raise RegistrationError(index, exc) from exc


def filter_series(series, cfg=None, mode="sequential", on_frame=None, keep_fields=True, workers=1):
    """Estimate the template-to-frame deformation for every frame.

    ``on_frame(frame_result, velocity, forward, inverse)`` is called as soon as a
    frame is done (fields are passed even when ``keep_fields`` is False), so
    callers can stream results to disk. Frames that stop without converging are
    kept and flagged; sequential mode continues from their best-effort field.
    """
    cfg = cfg or RegConfig()
    if mode in RESERVED_MODES:
        raise NotImplementedError(f"mode {mode!r} is reserved and not implemented")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    n_frames = len(series.frames)
    if n_frames < 1:
        raise DataError("series needs at least one frame")

    results = []

    def emit(index, velocity, forward, inverse, data_term, iterations, seconds, converged, digest, trace):
        fr = _frame_result(index, velocity, forward, inverse, data_term, iterations, seconds,
                           converged, digest, trace, keep_fields)
        if not converged:
            log.warning("frame %d did not converge; kept best-effort estimate", index)
        if on_frame is not None:
            on_frame(fr, velocity, forward, inverse)
        results.append(fr)

    template = series.template
    if mode == "sequential":
        prev = None
        for i in range(n_frames):
            frame = series.frames[i]
            t0 = time.perf_counter()
            res = _register(i + 1, template, frame, prev, prev, cfg)
            emit(i + 1, res.velocity, res.forward, res.inverse, res.data_term, res.iterations,
                 time.perf_counter() - t0, res.converged, res.init_digest, res.objective_trace)
            prev = res.velocity

    elif mode == "pairwise":
        base = replace(cfg, lambda2=0.0)

        def one(i):
            t0 = time.perf_counter()
            res = _register(i + 1, template, series.frames[i], None, None, base)
            return res, time.perf_counter() - t0

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                done = list(pool.map(one, range(n_frames)))
        else:
            done = (one(i) for i in range(n_frames))
        for i, (res, secs) in enumerate(done):
            emit(i + 1, res.velocity, res.forward, res.inverse, res.data_term, res.iterations,
                 secs, res.converged, res.init_digest, res.objective_trace)

    else:  # concat
        base = replace(cfg, lambda2=0.0)
        prev_frame = template
        fwd = inv = vel = None
        for i in range(n_frames):
            frame = series.frames[i]
            t0 = time.perf_counter()
            step = _register(i + 1, prev_frame, frame, None, None, base)
            if fwd is None:
                fwd, inv, vel = step.forward, step.inverse, step.velocity
            else:
                fwd = compose(step.forward, fwd)
                inv = compose(inv, step.inverse)
                # first-order log of the chained map; the chained fields are authoritative
                vel = vel.like(vel.data + step.velocity.data)
            data_term = -local_cc(frame, warp_volume(template, inv, clamp=True), cfg.cc)[0]
            emit(i + 1, vel, fwd, inv, data_term, step.iterations, time.perf_counter() - t0,
                 step.converged, None, step.objective_trace)
            prev_frame = frame

    return SeriesResult(mode, results)


def propagate_labels(result, labels, frame_indices):
    """Carry template labels into the requested (1-based) frames by nearest-neighbour pull-back."""
    out = []
    for n in frame_indices:
        fr = result.frame(n)
        if fr.inverse is None:
            raise DataError(f"frame {n}: deformation fields were not kept")
        if tuple(fr.inverse.dims) != tuple(labels.dims):
            raise DataError(f"labels grid {tuple(labels.dims)} does not match frame {n} fields")
        out.append(warp_labels(labels, fr.inverse))
    return out
