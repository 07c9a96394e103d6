import gc
import weakref
from collections.abc import Sequence

import numpy as np
import pytest

from conftest import smooth_volume
from tempreg.deform import DisplacementField, interior_mask
from tempreg.errors import DataError, RegistrationError
from tempreg.evaluation import dice, endpoint_error
from tempreg.phantom import PhantomSpec, gen_template
from tempreg.registration import RegConfig
from tempreg.temporal import SeriesInput, filter_series, propagate_labels
from tempreg.volume import Volume3, warp_volume

DIMS = (32, 32, 32)


def translation_series(n_frames=20, step=0.4, noise=0.5, seed=0):
    """Template plus frames shifted by ``step * n`` voxels along x (true forward map +x)."""
    template, labels = gen_template(PhantomSpec(dims=DIMS, seed=seed))
    rng = np.random.default_rng(seed)
    frames, truth = [], []
    for n in range(n_frames):
        shift = np.zeros(DIMS + (3,))
        shift[..., 0] = -step * n
        warped = warp_volume(template, DisplacementField(shift), clamp=True).data
        frames.append(Volume3(warped + noise * rng.standard_normal(DIMS)))
        truth.append(DisplacementField(-shift))
    return template, labels, frames, truth


@pytest.fixture(scope="module")
def drift():
    template, labels, frames, truth = translation_series()
    series = SeriesInput.from_frames(frames, labels)
    out = {m: filter_series(series, RegConfig(), m) for m in ("sequential", "concat")}
    return template, labels, frames, truth, out


class TestModes:
    def test_static_series(self, rng):
        t = smooth_volume(rng, (20, 20, 20))
        series = SeriesInput(t, [t] * 4)
        for mode in ("sequential", "pairwise", "concat"):
            res = filter_series(series, RegConfig(), mode)
            assert len(res) == 4
            assert all(f.mean_displacement < 0.1 for f in res.frames)

    def test_sequential_tracks_translation(self, drift):
        _, _, _, truth, out = drift
        inner = interior_mask(DIMS, 4)
        for fr, gt in zip(out["sequential"].frames, truth):
            est = fr.forward.data[inner][:, 0].mean()
            assert abs(est - gt.data[0, 0, 0, 0]) < 0.5

    def test_concat_drifts_more(self, drift):
        _, _, _, truth, out = drift
        seq = endpoint_error(out["sequential"].frame(20).forward, truth[-1])[0]
        cat = endpoint_error(out["concat"].frame(20).forward, truth[-1])[0]
        assert cat > seq

    def test_first_frame_near_identity(self, drift):
        for res in drift[4].values():
            assert res.frame(1).mean_displacement < 0.1

    def test_metrics_recorded(self, drift):
        for fr in drift[4]["sequential"].frames:
            assert fr.min_jacobian > 0 and fr.iterations > 0 and fr.seconds >= 0
            assert -1.0 <= fr.data_term <= 0.0

    def test_warm_start_provenance(self, drift):
        frames = drift[4]["sequential"].frames
        assert frames[0].init_digest is None
        for prev, cur in zip(frames, frames[1:]):
            assert cur.init_digest == prev.velocity_digest

    def test_pairwise_workers_do_not_change_results(self, rng):
        template, labels, frames, _ = translation_series(n_frames=4, seed=3)
        series = SeriesInput.from_frames(frames)
        a = filter_series(series, RegConfig(), "pairwise", workers=1)
        b = filter_series(series, RegConfig(), "pairwise", workers=3)
        for x, y in zip(a.frames, b.frames):
            assert x.index == y.index and np.array_equal(x.velocity.data, y.velocity.data)

    def test_pairwise_ignores_lambda2(self):
        _, _, frames, _ = translation_series(n_frames=3, seed=4)
        series = SeriesInput.from_frames(frames)
        a = filter_series(series, RegConfig(lambda2=5.0), "pairwise")
        b = filter_series(series, RegConfig(), "pairwise")
        assert all(np.array_equal(x.velocity.data, y.velocity.data) for x, y in zip(a.frames, b.frames))

    def test_truncation_matches_prefix(self):
        _, _, frames, _ = translation_series(n_frames=8, seed=5)
        full = filter_series(SeriesInput.from_frames(frames), RegConfig(), "sequential")
        head = filter_series(SeriesInput.from_frames(frames[:5]), RegConfig(), "sequential")
        for x, y in zip(head.frames, full.frames[:5]):
            assert np.array_equal(x.velocity.data, y.velocity.data)


class TestErrorsAndPlumbing:
    def test_reserved_and_unknown_modes(self, rng):
        t = smooth_volume(rng, (8, 8, 8))
        with pytest.raises(NotImplementedError):
            filter_series(SeriesInput(t, [t]), mode="smoothing")
        with pytest.raises(ValueError):
            filter_series(SeriesInput(t, [t]), mode="backward")

    def test_empty_series(self, rng):
        t = smooth_volume(rng, (8, 8, 8))
        with pytest.raises(DataError):
            filter_series(SeriesInput(t, []))

    def test_error_names_frame(self, rng):
        t = smooth_volume(rng, (12, 12, 12))
        bad = smooth_volume(rng, (12, 12, 10))
        with pytest.raises(RegistrationError) as info:
            filter_series(SeriesInput(t, [t, t, bad]), RegConfig(), "sequential")
        assert info.value.frame == 3 and "frame 3" in str(info.value)

    def test_callback_and_dropped_fields(self, rng):
        t = smooth_volume(rng, (12, 12, 12))
        seen = []
        res = filter_series(SeriesInput(t, [t, t]), RegConfig(), "sequential", keep_fields=False,
                            on_frame=lambda fr, v, f, i: seen.append((fr.index, v.dims, f.dims, i.dims)))
        assert [s[0] for s in seen] == [1, 2]
        assert res.frame(2).velocity is None and res.frame(2).forward is None
        with pytest.raises(DataError):
            propagate_labels(res, gen_template(PhantomSpec(dims=(16, 16, 16)))[1], [1])

    def test_frame_index_range(self, drift):
        res = drift[4]["sequential"]
        with pytest.raises(IndexError):
            res.frame(0)
        with pytest.raises(IndexError):
            propagate_labels(res, drift[1], [21])

    def test_propagate_first_frame(self, drift):
        labels = drift[1]
        moved = propagate_labels(drift[4]["sequential"], labels, [1])[0]
        for k in labels.labels():
            assert dice(moved, labels, k) > 0.99

    def test_streams_frames(self, rng):
        t = smooth_volume(rng, (12, 12, 12))
        alive = []

        class Counting(Sequence):
            peak = 0

            def __len__(self):
                return 12

            def __getitem__(self, i):
                vol = Volume3(t.data + 0.1 * np.random.default_rng(i).standard_normal(t.dims))
                alive.append(weakref.ref(vol))
                gc.collect()
                Counting.peak = max(Counting.peak, sum(r() is not None for r in alive))
                return vol

        filter_series(SeriesInput(t, Counting()), RegConfig(), "sequential", keep_fields=False)
        assert Counting.peak <= 2
