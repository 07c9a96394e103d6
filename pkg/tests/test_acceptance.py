"""Acceptance suite: each test checks one criterion and logs a PASS/FAIL line."""
import time

import numpy as np
import pytest

from conftest import blob, random_velocity, smooth_volume
from test_similarity import fd_check
from tempreg.cli import run_cli
from tempreg.deform import VelocityField, compose, exp_velocity, interior_mask, invert, jacobian_determinant
from tempreg.evaluation import build_report, dice, endpoint_error
from tempreg.phantom import PhantomSpec, make_phantom
from tempreg.registration import RegConfig, register_pair
from tempreg.similarity import local_cc
from tempreg.temporal import SeriesInput, filter_series
from tempreg.volume import Volume3, warp_volume

SEEDS = (0, 1, 2, 3, 4)
MODES = ("sequential", "pairwise", "concat")


def study_spec(seed):
    return PhantomSpec(dims=(48, 48, 48), n_frames=20, seed=seed, drift_amplitude=0.4,
                       jump_amplitude=3.0, jump_frames=(10,))


@pytest.fixture(scope="session")
def study():
    """Run every mode on every seeded phantom; keep only the numbers the criteria need."""
    out = {}
    for seed in SEEDS:
        ph = make_phantom(study_spec(seed))
        series = SeriesInput.from_frames(ph.frames, ph.labels)
        rec = {"seconds": {}, "epe": {}, "dice": {}}
        none = build_report({}, ph.labels, ph.gt_labels, modes=("none",))
        rec["dice"]["none"] = none.mean_dice("none")
        for mode in MODES:
            t0 = time.perf_counter()
            res = filter_series(series, RegConfig(), mode)
            rec["seconds"][mode] = time.perf_counter() - t0
            rep = build_report({mode: res}, ph.labels, ph.gt_labels, modes=(mode,))
            rec["dice"][mode] = rep.mean_dice(mode)
            rec["epe"][mode] = {n: endpoint_error(res.frame(n).forward, ph.gt_forward_fields[n - 1])[0]
                                for n in (5, 20)}
            if mode == "sequential" and seed == SEEDS[0]:
                rec["first10"] = [res.frame(n).velocity.data.copy() for n in range(1, 11)]
                rec["frames"] = ph.frames
            del res
        out[seed] = rec
    return out


def test_criterion_1_field_algebra(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    dims = (32, 32, 32)
    inner = interior_mask(dims, 4)
    worst_det, worst_ic = np.inf, 0.0
    for _ in range(100):
        v = random_velocity(rng, dims, rng.uniform(0.5, 5.0), sigma=rng.uniform(3.0, 6.0))
        fwd, inv = exp_velocity(v), exp_velocity(-v)
        worst_det = min(worst_det, jacobian_determinant(fwd).data.min(), jacobian_determinant(inv).data.min())
        r = compose(fwd, inv).data
        worst_ic = max(worst_ic, float(np.sqrt((r**2).sum(-1))[inner].mean()))
    # fixed-point inversion agrees with the negated-velocity inverse
    v = random_velocity(rng, dims, 3.0)
    inv_err = float(np.sqrt(((invert(exp_velocity(v)).data - exp_velocity(-v).data) ** 2).sum(-1))[inner].mean())
    seconds = time.perf_counter() - t0
    ok = worst_det > 0 and worst_ic < 0.1 and inv_err < 0.1 and seconds <= 60
    acceptance_log(1, "field algebra", ok, f"min det {worst_det:.3f}, worst inverse consistency {worst_ic:.4f} vx, "
                                           f"invert vs exp(-v) {inv_err:.4f} vx, {seconds:.1f}s")
    assert ok


def test_criterion_2_metric(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    in_range, affine_err = True, 0.0
    for _ in range(20):
        f = Volume3(rng.standard_normal((16, 16, 16)))
        w = Volume3(rng.standard_normal((16, 16, 16)) + rng.uniform(0, 2) * f.data)
        total, cmap = local_cc(f, w)
        in_range &= 0.0 <= total <= 1.0 and cmap.data.min() >= 0 and cmap.data.max() <= 1
    for a, b in ((3.0, 5.0), (0.2, -10.0), (-2.0, 1.0)):
        f = smooth_volume(rng, (16, 16, 16))
        affine_err = max(affine_err, abs(local_cc(f, f.like(a * f.data + b))[0] - local_cc(f, f)[0]))
    fd_err = max(fd_check(np.random.default_rng(100 + k)).max() for k in range(5))
    seconds = time.perf_counter() - t0
    ok = in_range and affine_err < 1e-6 and fd_err < 1e-3 and seconds <= 60
    acceptance_log(2, "metric", ok, f"range ok={in_range}, affine error {affine_err:.2e}, "
                                    f"worst FD rel error {fd_err:.2e} over 5x20 probes, {seconds:.1f}s")
    assert ok


def test_criterion_3_dice(acceptance_log):
    rng = np.random.default_rng(3)
    exact = True
    for _ in range(50):
        a = rng.random((9, 8, 7)) < rng.uniform(0.05, 0.9)
        b = rng.random((9, 8, 7)) < rng.uniform(0.05, 0.9)
        inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
        want = 2 * inter / (int(a.sum()) + int(b.sum())) if a.any() or b.any() else 1.0
        exact &= dice(a.astype(int), b.astype(int), 1) == want
    c1 = np.zeros((6, 4, 4), int)
    c1[1:3, 1:3, 1:3] = 1
    c2 = np.roll(c1, 1, axis=0)
    hand = dice(c1, c2, 1)
    ok = exact and hand == 0.5
    acceptance_log(3, "dice oracle", ok, f"50 random pairs exact={exact}, hand case {hand}")
    assert ok


def test_criterion_4_recovery(acceptance_log):
    t0 = time.perf_counter()
    dims = (64, 64, 64)
    template = blob(dims, (32, 32, 32), 12.0, base=10.0)
    shift = np.zeros(dims + (3,))
    shift[..., 0] = -2.0
    frame = warp_volume(template, VelocityField(shift), clamp=True)
    r = register_pair(template, frame)
    support = template.data > 10.0 + 50.0  # half-maximum region of the blob
    recovered = float(r.forward.data[support][:, 0].mean())
    cc = -r.data_term
    seconds = time.perf_counter() - t0
    ok = abs(recovered - 2.0) < 0.5 and cc > 0.95 and seconds <= 120
    acceptance_log(4, "blob recovery", ok, f"mean x-displacement {recovered:.3f} (truth 2.0), cc {cc:.4f}, "
                                           f"{seconds:.1f}s")
    assert ok


def test_criterion_5_temporal_benefit(study, acceptance_log):
    parts = []
    ok = True
    for seed, rec in study.items():
        d = rec["dice"]
        good = d["sequential"] >= d["pairwise"] and d["sequential"] >= 0.85 \
            and d["sequential"] > d["none"] and d["pairwise"] > d["none"]
        ok &= good
        parts.append(f"seed{seed}: seq {d['sequential']:.4f} pw {d['pairwise']:.4f} none {d['none']:.4f}"
                     f"{'' if good else ' (x)'}")
    minutes = sum(r["seconds"]["sequential"] + r["seconds"]["pairwise"] for r in study.values()) / 60
    ok &= minutes <= 15
    acceptance_log(5, "temporal-model benefit", ok, "; ".join(parts) + f"; {minutes:.1f} min")
    assert ok


def test_criterion_6_concat_drift(study, acceptance_log):
    parts = []
    ok = True
    for seed, rec in study.items():
        e = rec["epe"]
        good = e["concat"][20] > e["sequential"][20] and e["concat"][20] > e["concat"][5]
        ok &= good
        parts.append(f"seed{seed}: concat {e['concat'][5]:.3f}->{e['concat'][20]:.3f}, "
                     f"seq@20 {e['sequential'][20]:.3f}{'' if good else ' (x)'}")
    acceptance_log(6, "concatenation drift", ok, "; ".join(parts))
    assert ok


def test_criterion_7_truncation(study, acceptance_log):
    rec = study[SEEDS[0]]
    frames = rec["frames"][:10]
    head = filter_series(SeriesInput.from_frames(frames), RegConfig(), "sequential")
    same = [np.array_equal(head.frame(n).velocity.data, rec["first10"][n - 1]) for n in range(1, 11)]
    ok = all(same)
    acceptance_log(7, "causality/truncation", ok, f"{sum(same)}/10 frames bit-identical")
    assert ok


def test_criterion_8_cli_determinism(tmp_path, acceptance_log):
    def run(tag):
        d = tmp_path / tag
        assert run_cli(["phantom", "--seed", "11", "--out", str(d / "ph"), "n_frames=6"]) == 0
        assert run_cli(["register", str(d / "ph" / "manifest.txt"), "--mode", "sequential",
                        "--out", str(d / "res")]) == 0
        return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*.raw"))}

    a, b = run("a"), run("b")
    ok = a == b and len(a) > 0
    acceptance_log(8, "CLI determinism", ok, f"{len(a)} raw files compared, identical={a == b}")
    assert ok
