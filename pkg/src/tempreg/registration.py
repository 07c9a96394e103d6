"""Pairwise diffeomorphic registration with warm start and temporal penalty.

The template is pulled back into frame space through ``exp(-v)``; the estimated
template-to-frame map is ``exp(v)``. The objective is

    -local_cc(frame, template o exp(-v)) + lambda2 * |exp(v) o exp(-v_prev)|^2

with spatial regularity imposed by Gaussian smoothing of the update (fluid)
and of the accumulated velocity (elastic), both scaled by ``lambda1``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .deform import (
    DisplacementField,
    VelocityField,
    compose,
    downsample_field,
    exp_velocity,
    field_sq_norm,
    smooth_field,
    upsample_field,
)
from .errors import GridMismatchError, NonFiniteError
from .similarity import CcConfig, LocalCC, cc_value_and_gradient, local_cc
from .volume import check_same_grid, pyramid, warp_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegConfig:
    lambda1: float = 1.0
    lambda2: float = 0.0
    sigma_fluid: float = 3.0
    sigma_elastic: float = 1.0
    step_size: float = 0.25
    pyramid_levels: int = 3
    iters_per_level: tuple = (50, 50, 25)
    converge_tol: float = 1e-4
    cc: CcConfig = field(default_factory=CcConfig)
    symmetric: bool = False

    def __post_init__(self):
        iters = tuple(int(i) for i in self.iters_per_level)
        object.__setattr__(self, "iters_per_level", iters)
        if isinstance(self.cc, dict):
            object.__setattr__(self, "cc", CcConfig(**self.cc))
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.sigma_fluid < 0 or self.sigma_elastic < 0:
            raise ValueError("smoothing sigmas must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if len(iters) != self.pyramid_levels:
            raise ValueError(f"iters_per_level needs {self.pyramid_levels} entries, got {len(iters)}")
        if any(i < 0 for i in iters):
            raise ValueError("iteration counts must be non-negative")
        if not self.converge_tol >= 0:
            raise ValueError("converge_tol must be non-negative")

    @property
    def fluid_sigma(self):
        return self.lambda1 * self.sigma_fluid

    @property
    def elastic_sigma(self):
        return self.lambda1 * self.sigma_elastic

    def to_dict(self):
        d = asdict(self)
        d["iters_per_level"] = list(self.iters_per_level)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        names = {f.name for f in fields(cls)}
        cc = dict(d.pop("cc", None) or {})
        for key in [k for k in d if k.startswith("cc.")]:
            cc[key[3:]] = d.pop(key)
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cc_names = {f.name for f in fields(CcConfig)}
        bad_cc = sorted(set(cc) - cc_names)
        if bad_cc:
            raise ValueError(f"unknown config keys: {', '.join('cc.' + k for k in bad_cc)}")
        if cc:
            d["cc"] = CcConfig(**cc)
        if "pyramid_levels" in d and "iters_per_level" not in d:
            d["iters_per_level"] = _default_schedule(int(d["pyramid_levels"]))
        return cls(**d)

    def with_overrides(self, overrides):
        """Apply flat ``key -> value`` overrides (values may be strings)."""
        d = self.to_dict()
        cc = d.pop("cc")
        for key, raw in overrides.items():
            if key.startswith("cc."):
                sub = key[3:]
                if sub not in cc:
                    raise ValueError(f"unknown config key: {key}")
                cc[sub] = _coerce(raw, type(cc[sub]))
            elif key in d:
                d[key] = _coerce(raw, type(d[key]), d[key])
            else:
                raise ValueError(f"unknown config key: {key}")
        if "pyramid_levels" in overrides and "iters_per_level" not in overrides:
            d["iters_per_level"] = _default_schedule(int(d["pyramid_levels"]))
        d["cc"] = cc
        return RegConfig.from_dict(d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        lines = []
        for key, value in sorted(self.to_dict().items()):
            if key == "cc":
                lines += [f"cc.{k} = {v}" for k, v in sorted(value.items())]
            elif isinstance(value, list):
                lines.append(f"{key} = {','.join(str(v) for v in value)}")
            else:
                lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        overrides = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            overrides[key] = value
        return cls().with_overrides(overrides)

    @classmethod
    def load(cls, path):
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text))
        return cls.from_text(text)


def _default_schedule(levels):
    base = [50] * max(levels - 1, 0) + [25]
    return base[-levels:]


def _coerce(raw, typ, current=None):
    if not isinstance(raw, str):
        return raw
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (list, tuple):
        return [int(p) for p in raw.replace("[", "").replace("]", "").split(",") if p.strip()]
    return typ(raw)


class TraceEntry(NamedTuple):
    level: int
    iteration: int
    data_term: float
    temporal_term: float

    @property
    def total(self):
        return self.data_term + self.temporal_term


@dataclass(eq=False)
class RegResult:
    velocity: VelocityField
    forward: DisplacementField
    inverse: DisplacementField
    objective_trace: list
    converged: bool
    iterations: int = 0
    data_term: float = 0.0
    temporal_term: float = 0.0
    init_digest: Optional[str] = None
    level_iterations: tuple = ()

    @property
    def objective(self):
        return self.data_term + self.temporal_term


def field_digest(f):
    """Stable content hash of a field (used to log warm-start provenance)."""
    if f is None:
        return None
    return hashlib.sha1(np.ascontiguousarray(f.data).tobytes()).hexdigest()


def objective(template, frame, v, v_prev, cfg):
    """``(total, data_term, temporal_term)`` of the registration objective at ``v``."""
    check_same_grid(template, frame, "template/frame grids")
    for f in (v, v_prev):
        if f is not None and tuple(f.dims) != tuple(frame.dims):
            raise GridMismatchError(f"velocity grid {tuple(f.dims)} does not match image {tuple(frame.dims)}")
    warped = warp_volume(template, exp_velocity(-v), clamp=True)
    data_term = -local_cc(frame, warped, cfg.cc)[0]
    temporal = 0.0
    if v_prev is not None:
        temporal = cfg.lambda2 * field_sq_norm(compose(exp_velocity(v), exp_velocity(-v_prev)))
    return data_term + temporal, data_term, temporal


class _Level:
    """Objective and descent direction on one pyramid level."""

    def __init__(self, template, frame, v_prev, cfg):
        self.template = template
        self.frame = frame
        self.v_prev = v_prev
        self.cfg = cfg
        self.use_temporal = v_prev is not None and cfg.lambda2 > 0
        self.inv_prev = exp_velocity(-v_prev) if self.use_temporal else None
        self.metric = LocalCC(frame.data, cfg.cc)
        self.metric_back = LocalCC(template.data, cfg.cc) if cfg.symmetric else None

    def evaluate(self, v):
        """Return ``(data_term, temporal_term, descent)`` at ``v``."""
        cfg = self.cfg
        s = exp_velocity(-v)
        cc, _, g = cc_value_and_gradient(self.frame, self.template, s, cfg.cc, clamp=True,
                                         metric=self.metric)
        # s ~ -v to first order, so ascent on cc along s is descent along -v
        descent = -g
        if cfg.symmetric:
            fwd = exp_velocity(v)
            _, _, gb = cc_value_and_gradient(self.template, self.frame, fwd, cfg.cc, clamp=True,
                                             metric=self.metric_back)
            descent = 0.5 * (descent + gb)
        temporal = 0.0
        if self.use_temporal:
            r = compose(exp_velocity(v), self.inv_prev).data
            temporal = cfg.lambda2 * float(np.mean(np.sum(r**2, axis=-1)))
            descent = descent - 2.0 * cfg.lambda2 * r / r.shape[0] / r.shape[1] / r.shape[2]
        if not np.isfinite(descent).all() or not np.isfinite(cc):
            raise NonFiniteError("non-finite values during registration; try a smaller step_size")
        return -cc, temporal, descent


def _scale_update(u, step, percentile=99.0):
    """Scale ``u`` so its ``percentile`` magnitude equals ``step``; clip longer vectors to ``step``.

    A handful of boundary or low-contrast voxels can carry forces orders of magnitude
    above the rest; normalizing by the plain maximum would freeze everything else.
    Returns None for a vanishing update.
    """
    mag = np.sqrt(np.sum(u * u, axis=-1))
    ref = float(np.percentile(mag, percentile)) if mag.size else 0.0
    if ref <= 1e-15:
        ref = float(mag.max()) if mag.size else 0.0
        if ref <= 1e-15:
            return None
    u = u * (step / ref)
    mag = mag * (step / ref)
    over = mag > step
    if over.any():
        u[over] *= (step / mag[over])[:, None]
    return u


def _run_level(level, v, n_iters, cfg, level_index, trace):
    """Greedy descent on one level. Only improving steps are accepted."""
    data, temporal, descent = level.evaluate(v)
    trace.append(TraceEntry(level_index, 0, data, temporal))
    step = cfg.step_size
    min_step = cfg.step_size / 8.0
    recent = []
    converged = False
    iters = 0
    while iters < n_iters:
        iters += 1
        u = smooth_field(VelocityField(descent, v.spacing), cfg.fluid_sigma).data
        u = _scale_update(u, step)
        if u is None:
            converged = True
            break
        cand = smooth_field(v.like(v.data + u), cfg.elastic_sigma)
        c_data, c_temporal, c_descent = level.evaluate(cand)
        old = data + temporal
        new = c_data + c_temporal
        if new < old:
            v, data, temporal, descent = cand, c_data, c_temporal, c_descent
            trace.append(TraceEntry(level_index, iters, data, temporal))
            recent.append((old - new) / max(abs(old), 1e-12))
            step = min(cfg.step_size, step * 2.0)
            if len(recent) >= 3 and np.mean(recent[-3:]) < cfg.converge_tol:
                converged = True
                break
        else:
            step *= 0.5
            if step < min_step:
                converged = True
                break
    return v, data, temporal, converged, iters


def register_pair(template, frame, init=None, v_prev=None, cfg=None):
    """Estimate ``v`` with ``template o exp(-v) ~ frame`` by multi-resolution greedy descent.

    ``init`` warm-starts the velocity; ``v_prev`` (the previous frame's estimate)
    enables the temporal penalty when ``cfg.lambda2 > 0``. The returned objective
    at the finest level never exceeds the objective of ``init``.
    """
    cfg = cfg or RegConfig()
    check_same_grid(template, frame, "template/frame grids")
    for name, f in (("init", init), ("v_prev", v_prev)):
        if f is not None and tuple(f.dims) != tuple(frame.dims):
            raise GridMismatchError(f"{name} grid {tuple(f.dims)} does not match image {tuple(frame.dims)}")
    digest = field_digest(init)
    if init is None:
        init = VelocityField.zeros(frame.dims, frame.spacing)

    t_levels = pyramid(template, cfg.pyramid_levels)
    f_levels = pyramid(frame, cfg.pyramid_levels)
    n_levels = len(t_levels)
    schedule = cfg.iters_per_level[-n_levels:]

    init_levels = [init]
    prev_levels = [v_prev]
    for _ in range(n_levels - 1):
        init_levels.append(downsample_field(init_levels[-1]))
        prev_levels.append(None if prev_levels[-1] is None else downsample_field(prev_levels[-1]))
    init_levels.reverse()
    prev_levels.reverse()

    trace = []
    per_level = []
    converged = True
    v = None
    for k in range(n_levels):
        level = _Level(t_levels[k], f_levels[k], prev_levels[k], cfg)
        start = init_levels[k]
        if v is not None:
            # carry over only what coarser levels changed, keep init detail
            moved = upsample_field(v.like(v.data - init_levels[k - 1].data), start.dims)
            cand = start.like(start.data + moved.data)
            c_total = sum(level.evaluate(cand)[:2])
            s_total = sum(level.evaluate(start)[:2])
            if c_total < s_total:
                start = cand
        v, data, temporal, conv, iters = _run_level(level, start, schedule[k], cfg, k, trace)
        per_level.append(iters)
        log.debug("level %d: %d iterations, objective %.6f", k, iters, data + temporal)
        if k == n_levels - 1:
            converged = conv

    return RegResult(
        velocity=v,
        forward=exp_velocity(v),
        inverse=exp_velocity(-v),
        objective_trace=trace,
        converged=converged,
        iterations=sum(per_level),
        data_term=data,
        temporal_term=temporal,
        init_digest=digest,
        level_iterations=tuple(per_level),
    )
