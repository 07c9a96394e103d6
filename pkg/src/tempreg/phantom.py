"""Synthetic 4D phantoms with known deformations.

Motion lives in velocity space: ``v_1 = 0`` and each later frame adds a smooth
random increment (plus an occasional large smooth jump), so every ground-truth
map ``exp(v_n)`` is a diffeomorphism by construction.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy import ndimage

from .deform import DisplacementField, VelocityField, exp_velocity, jacobian_determinant
from .errors import DataError
from .volume import LabelMap, Volume3, smooth_array, warp_labels, warp_volume


def rng_stream(seed, name):
    """Independent generator for the named stream derived from ``seed``."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


@dataclass(frozen=True)
class Roi:
    name: str
    kind: str  # "ellipsoid", "sphere" or "blob"
    center: tuple  # fraction of dims
    radii: tuple  # fraction of dims; spheres use radii[0] scaled by min(dims)
    intensity: float


DEFAULT_ROIS = (
    Roi("placenta", "ellipsoid", (0.5, 0.3, 0.5), (0.32, 0.12, 0.28), 120.0),
    Roi("brain", "sphere", (0.3, 0.68, 0.5), (0.13,), 70.0),
    Roi("liver", "blob", (0.68, 0.68, 0.5), (0.11,), 170.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (48, 48, 48)
    n_frames: int = 20
    seed: int = 0
    drift_amplitude: float = 0.4
    drift_persistence: float = 0.8
    jump_probability: float = 0.0
    jump_amplitude: float = 3.0
    jump_frames: tuple = ()
    velocity_smoothness_sigma: float = 12.0
    noise_sigma: float = 1.0
    intensity_drift: Optional[tuple] = None  # (roi id, fractional change)
    texture_amplitude: float = 12.0
    roi_set: tuple = DEFAULT_ROIS

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "jump_frames", tuple(int(f) for f in self.jump_frames))
        rois = tuple(r if isinstance(r, Roi) else Roi(**r) for r in self.roi_set)
        object.__setattr__(self, "roi_set", tuple(
            Roi(r.name, r.kind, tuple(r.center), tuple(r.radii), float(r.intensity)) for r in rois))
        if self.intensity_drift is not None:
            object.__setattr__(self, "intensity_drift", tuple(self.intensity_drift))
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ValueError(f"phantom dims must be >= 16 per axis, got {self.dims}")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.drift_amplitude < 0 or self.jump_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("amplitudes must be non-negative")
        if not 0.0 <= self.drift_persistence <= 1.0:
            raise ValueError("drift_persistence must lie in [0, 1]")
        if not 0.0 <= self.jump_probability <= 1.0:
            raise ValueError("jump_probability must lie in [0, 1]")
        if self.velocity_smoothness_sigma <= 0:
            raise ValueError("velocity_smoothness_sigma must be positive")
        for r in self.roi_set:
            if r.kind not in ("ellipsoid", "sphere", "blob"):
                raise ValueError(f"unknown ROI kind {r.kind!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown phantom keys: {', '.join(unknown)}")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, overrides):
        """Apply flat ``key -> value`` overrides; string values are parsed per field."""
        d = self.to_dict()
        for key, raw in overrides.items():
            if key not in d or key == "roi_set":
                raise ValueError(f"unknown phantom key: {key}")
            d[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
        return PhantomSpec.from_dict(d)

    @classmethod
    def load(cls, path):
        """Read a JSON document or ``key = value`` lines."""
        with open(path) as fh:
            text = fh.read()
        if text.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text))
        pairs = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, sep, value = line.partition("=")
                if not sep:
                    raise ValueError(f"{path}: expected 'key = value', got {line!r}")
                pairs[key.strip()] = value.strip()
        return cls().with_overrides(pairs)


_INT_KEYS = ("n_frames", "seed")
_TUPLE_KEYS = {"dims": int, "jump_frames": int, "intensity_drift": float}


def _parse_value(key, raw):
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        if raw.lower() in ("", "none"):
            return None if key == "intensity_drift" else ()
        parts = [p for p in raw.strip("()[]").replace(" ", ",").split(",") if p]
        return tuple(_TUPLE_KEYS[key](p) for p in parts)
    if key in _INT_KEYS:
        return int(raw)
    return float(raw)


@dataclass(eq=False)
class PhantomSeries:
    template: Volume3
    labels: LabelMap
    frames: list
    gt_velocities: list
    gt_forward_fields: list
    gt_labels: list  # template labels carried into each frame by the true motion
    noiseless_frames: list = field(default_factory=list)


def _roi_mask(roi, dims, grid):
    center = [c * n for c, n in zip(roi.center, dims)]
    if roi.kind == "ellipsoid":
        radii = [r * n for r, n in zip(roi.radii, dims)]
        q = sum(((grid[a] - center[a]) / radii[a]) ** 2 for a in range(3))
        return q <= 1.0, center, radii
    r = roi.radii[0] * min(dims)
    if roi.kind == "sphere":
        q = sum((grid[a] - center[a]) ** 2 for a in range(3))
        return q <= r * r, center, [r] * 3
    # blob: two overlapping spheres offset along x and y
    off = 0.45 * r
    c1 = [center[0] - off, center[1] - off / 2, center[2]]
    c2 = [center[0] + off, center[1] + off / 2, center[2]]
    r2 = 0.8 * r
    m1 = sum((grid[a] - c1[a]) ** 2 for a in range(3)) <= r2 * r2
    m2 = sum((grid[a] - c2[a]) ** 2 for a in range(3)) <= r2 * r2
    return m1 | m2, center, [off + r2] * 3


def gen_template(spec):
    """Piecewise-smooth template over a textured background, with its label map."""
    dims = spec.dims
    grid = np.indices(dims, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.int64)
    names = {}
    base = np.full(dims, 40.0)
    for idx, roi in enumerate(spec.roi_set, start=1):
        mask, center, extent = _roi_mask(roi, dims, grid)
        for a in range(3):
            if center[a] - extent[a] < 1 or center[a] + extent[a] > dims[a] - 2:
                raise DataError(f"ROI {roi.name!r} does not fit inside dims {dims}")
        if not mask.any():
            raise DataError(f"ROI {roi.name!r} is empty at dims {dims}")
        if (labels[mask] != 0).any():
            raise DataError(f"ROI {roi.name!r} overlaps another ROI")
        labels[mask] = idx
        base[mask] = roi.intensity
        names[idx] = roi.name

    rng = rng_stream(spec.seed, "template")
    texture = ndimage.gaussian_filter(rng.standard_normal(dims), 2.0, mode="reflect")
    texture *= spec.texture_amplitude / max(texture.std(), 1e-12)
    data = smooth_array(base, 0.7) + texture
    return Volume3(data), LabelMap(labels, (1.0, 1.0, 1.0), names)


def smooth_random_field(rng, dims, sigma, amplitude):
    """Gaussian vector noise smoothed by ``sigma``, scaled to max magnitude ``amplitude``."""
    noise = rng.standard_normal(tuple(dims) + (3,))
    # periodic boundary keeps the field statistics stationary up to the grid edge
    f = np.stack([ndimage.gaussian_filter(noise[..., c], sigma, mode="wrap", truncate=3.0)
                  for c in range(3)], axis=-1)
    mag = np.sqrt(np.sum(f * f, axis=-1)).max()
    if amplitude == 0 or mag == 0:
        return np.zeros_like(f)
    return f * (amplitude / mag)


def _episode_factor(n, n_frames, fraction):
    # three equal episodes: baseline, changed, baseline
    if n_frames < 3:
        return 1.0
    third = n_frames / 3.0
    return 1.0 + fraction if third <= n < 2 * third else 1.0


def drift_direction(spec):
    """Smooth unit-max field giving each series a persistent drift direction."""
    return smooth_random_field(rng_stream(spec.seed, "drift"), spec.dims, spec.velocity_smoothness_sigma, 1.0)


def advance_velocity(v_prev, n, spec, motion, jumps, direction=None, max_attempts=10):
    """Next state of the velocity chain (frame index ``n``, zero-based).

    The increment mixes the series' fixed drift ``direction`` with fresh smooth
    noise and is scaled to max magnitude ``drift_amplitude``; it depends on the
    past only through ``v_prev`` and the generator states. Returns ``(v_n, exp(v_n))``.
    """
    dims = spec.dims
    if direction is None:
        direction = drift_direction(spec)
    rho = spec.drift_persistence
    jump_now = (n in spec.jump_frames) or (spec.jump_probability > 0 and jumps.random() < spec.jump_probability)
    for _ in range(max_attempts):
        fresh = smooth_random_field(motion, dims, spec.velocity_smoothness_sigma, 1.0)
        inc = rho * direction + (1.0 - rho) * fresh
        mag = np.sqrt(np.sum(inc * inc, axis=-1)).max()
        inc = inc * (spec.drift_amplitude / mag) if mag > 0 else inc
        if jump_now:
            inc = inc + smooth_random_field(jumps, dims, spec.velocity_smoothness_sigma, spec.jump_amplitude)
        v = VelocityField(v_prev.data + inc)
        fwd = exp_velocity(v)
        if jacobian_determinant(fwd).data.min() > 0 and jacobian_determinant(exp_velocity(-v)).data.min() > 0:
            return v, fwd
    raise DataError(f"frame {n + 1}: could not draw a diffeomorphic deformation in "
                    f"{max_attempts} attempts; reduce drift/jump amplitudes or increase smoothness")


def gen_series(template, labels, spec, max_attempts=10):
    """Draw the velocity chain and render noisy frames; frame 0 is the template plus noise."""
    if tuple(template.dims) != tuple(spec.dims) or tuple(labels.dims) != tuple(spec.dims):
        raise DataError("template/labels dims do not match the phantom spec")
    motion = rng_stream(spec.seed, "motion")
    jumps = rng_stream(spec.seed, "jumps")
    noise = rng_stream(spec.seed, "noise")
    dims = spec.dims

    direction = drift_direction(spec)
    velocities = [VelocityField.zeros(dims)]
    forwards = [DisplacementField.zeros(dims)]
    for n in range(1, spec.n_frames):
        v, fwd = advance_velocity(velocities[-1], n, spec, motion, jumps, direction, max_attempts)
        velocities.append(v)
        forwards.append(fwd)

    frames, clean, gt_labels = [], [], []
    for n, v in enumerate(velocities):
        pull = exp_velocity(-v)
        warped = warp_volume(template, pull, clamp=True).data
        lab = warp_labels(labels, pull)
        if spec.intensity_drift is not None:
            roi_id, fraction = spec.intensity_drift
            factor = _episode_factor(n, spec.n_frames, float(fraction))
            warped = np.where(lab.data == int(roi_id), warped * factor, warped)
        clean.append(template.like(warped))
        data = warped + spec.noise_sigma * noise.standard_normal(dims) if spec.noise_sigma > 0 else warped
        frames.append(template.like(data))
        gt_labels.append(lab)
    return PhantomSeries(template, labels, frames, velocities, forwards, gt_labels, clean)


def make_phantom(spec):
    template, labels = gen_template(spec)
    return gen_series(template, labels, spec)
