import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from tadiff import tgv
from tadiff.data import (CRT, TMZ, TREATMENTS, LongitudinalCase, Session, SynthConfig, eligible_slices,
                         generate_synthetic_case, list_case_dirs, load_case, load_cases, radius_trajectory,
                         save_case, zscore_normalize)
from tadiff.errors import ConfigError, DataError, FormatError


# -- z-score ----------------------------------------------------------------------

def test_zscore_identity_on_standardised(rng):
    x = rng.standard_normal((2, 32, 32))
    x = (x - x.mean(axis=(1, 2), keepdims=True)) / x.std(axis=(1, 2), keepdims=True)
    np.testing.assert_allclose(zscore_normalize(x), x, atol=1e-6)


def test_zscore_constant_channel(rng):
    x = np.stack([np.full((8, 8), 3.5), rng.standard_normal((8, 8))])
    out = zscore_normalize(x)
    assert np.all(out[0] == 0)
    assert out.dtype == np.float32


def test_zscore_random(rng):
    out = zscore_normalize(5 + 3 * rng.standard_normal((3, 40, 40))).astype(np.float64)
    assert np.all(np.abs(out.mean(axis=(1, 2))) < 1e-6)
    assert np.all(np.abs(out.std(axis=(1, 2)) - 1) < 1e-6)


# -- eligibility ----------------------------------------------------------------

def _case_with_masks(masks):
    sessions = [Session(np.zeros((1,) + m.shape, np.float32), m, CRT, d) for d, m in enumerate(masks)]
    return LongitudinalCase("x", sessions)


def test_eligible_slices():
    empty = np.zeros((16, 16, 3), np.uint8)
    exact = empty.copy()
    exact[:10, :10, 1] = 1
    case = _case_with_masks([empty, exact])
    assert eligible_slices(case, 100) == {1: [], 2: [1]}
    assert eligible_slices(case, 101) == {1: [], 2: []}
    assert eligible_slices(case, 0) == {1: [0, 1, 2], 2: [0, 1, 2]}
    with pytest.raises(ValueError):
        eligible_slices(case, -1)


def test_case_validation():
    m = np.zeros((4, 4), np.uint8)
    img = np.zeros((1, 4, 4), np.float32)
    with pytest.raises(DataError):
        LongitudinalCase("a", [Session(img, m, CRT, 0)])
    with pytest.raises(DataError):
        LongitudinalCase("a", [Session(img, m, CRT, 5), Session(img, m, CRT, 5)])
    with pytest.raises(DataError):
        LongitudinalCase("a", [Session(img, m, CRT, 0), Session(img, m, 7, 5)])
    with pytest.raises(DataError):
        LongitudinalCase("a", [Session(img, m, CRT, 0), Session(img[:, :2], m[:2], CRT, 5)])


# -- TGV --------------------------------------------------------------------------

def test_tgv_roundtrip_f32(tmp_path, rng):
    a = rng.standard_normal((3, 64, 64)).astype(np.float32)
    tgv.save_tgv(a, tmp_path / "a.tgv")
    b = tgv.load_tgv(tmp_path / "a.tgv")
    assert b.dtype == np.float32 and b.tobytes() == a.tobytes()


def test_tgv_header_layout():
    buf = tgv.encode(np.zeros((2, 3), np.uint8))
    assert buf[:4] == b"TGV1"
    assert buf[4] == 2 and buf[5] == 2
    assert buf[6:14] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 14 + 6
    assert tgv.encode(np.array([1.0], np.float32))[4] == 1
    assert tgv.encode(np.array([1.0], np.float32))[10:] == np.float32(1.0).tobytes()


def test_tgv_version_error():
    buf = b"TGV2" + tgv.encode(np.zeros(3, np.float32))[4:]
    with pytest.raises(FormatError, match="version") as exc:
        tgv.decode(buf)
    assert exc.value.offset == 0


def test_tgv_bad_magic_and_dtype():
    with pytest.raises(FormatError, match="magic"):
        tgv.decode(b"NOPE\x01\x01\x01\x00\x00\x00\x00\x00\x00\x00")
    buf = bytearray(tgv.encode(np.zeros(3, np.float32)))
    buf[4] = 9
    with pytest.raises(FormatError, match="dtype") as exc:
        tgv.decode(bytes(buf))
    assert exc.value.offset == 4


def test_tgv_truncation():
    buf = tgv.encode(np.zeros((4, 4), np.float32))
    with pytest.raises(FormatError, match="declares") as exc:
        tgv.decode(buf[:-1])
    assert exc.value.offset == 14
    with pytest.raises(FormatError):
        tgv.decode(buf + b"\0")
    with pytest.raises(FormatError):
        tgv.decode(buf[:8])


def test_tgv_rejects_other_dtypes():
    with pytest.raises(TypeError):
        tgv.encode(np.zeros(3, np.float64))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.uint8]),
                  hnp.array_shapes(min_dims=1, max_dims=4, min_side=0, max_side=6)))
def test_tgv_roundtrip_property(a):
    b = tgv.decode(tgv.encode(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_tgv_atomic_write_leaves_no_temp(tmp_path):
    tgv.save_tgv(np.ones(4, np.uint8), tmp_path / "x.tgv")
    assert [p.name for p in tmp_path.iterdir()] == ["x.tgv"]


# -- synthetic generator -----------------------------------------------------------

def test_radius_linear_ode():
    r = radius_trajectory(10.0, [0, 30], [CRT, CRT], {CRT: -0.2, TMZ: 0.05})
    assert r[-1] == pytest.approx(4.0, abs=1e-12)
    r = radius_trajectory(3.0, [0, 10, 30], [CRT, CRT, CRT], {CRT: -0.2, TMZ: 0.05})
    assert list(r) == [3.0, 1.0, 0.0]


def test_shrinking_case_areas_monotone():
    cfg = SynthConfig(growth_rates={CRT: -0.2, TMZ: 0.05}, crt_sessions=(8, 8), initial_radius=(10, 10),
                      day_gap=(3, 5), sessions=(6, 6))
    case = generate_synthetic_case(cfg, 0)
    areas = [int(s.mask.sum()) for s in case.sessions]
    assert all(b < a for a, b in zip(areas, areas[1:]))


def test_tmz_growth_strictly_increases_area():
    cfg = SynthConfig(growth_rates={CRT: -0.06, TMZ: 0.05}, crt_sessions=(0, 0), day_gap=(20, 40))
    for k in range(5):
        case = generate_synthetic_case(cfg, k)
        assert all(s.treatment == TMZ for s in case.sessions)
        areas = [int(s.mask.sum()) for s in case.sessions]
        assert all(b > a for a, b in zip(areas, areas[1:])), areas


def test_synthetic_determinism():
    cfg = SynthConfig(seed=7)
    a, b = generate_synthetic_case(cfg, 3), generate_synthetic_case(cfg, 3)
    assert a.case_id == b.case_id == "7-003"
    for s, t in zip(a.sessions, b.sessions):
        assert s.image.tobytes() == t.image.tobytes() and s.mask.tobytes() == t.mask.tobytes()
        assert (s.day, s.treatment) == (t.day, t.treatment)
    c = generate_synthetic_case(cfg, 4)
    assert c.sessions[0].image.tobytes() != a.sessions[0].image.tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 50))
def test_synthetic_invariants(seed, case_seed):
    cfg = SynthConfig(seed=seed, grid=32, initial_radius=(3, 6), max_radius=10)
    case = generate_synthetic_case(cfg, case_seed, normalize=False)
    days = [s.day for s in case.sessions]
    assert days[0] == 0 and all(b > a for a, b in zip(days, days[1:]))
    assert {s.treatment for s in case.sessions} <= set(TREATMENTS)
    tr = [s.treatment for s in case.sessions]
    assert tr == sorted(tr)  # CRT first, then TMZ
    for s in case.sessions:
        m = s.mask.astype(bool)
        assert set(np.unique(s.mask)) <= {0, 1}
        if not m.any():
            continue
        bg = s.image[:, ~m]
        thresh = bg.mean(axis=1) + bg.std(axis=1)
        bright = (s.image[1] > thresh[1]) | (s.image[2] > thresh[2])
        assert bright[m].all()


def test_synth_config_validation():
    with pytest.raises(ConfigError) as exc:
        SynthConfig(growth_rates={CRT: 0.1}).validate()
    assert exc.value.field == "growth_rates"
    with pytest.raises(ConfigError):
        SynthConfig(sessions=(1, 3)).validate()


# -- case directories -------------------------------------------------------------

def test_case_save_load(tmp_path):
    raw = generate_synthetic_case(SynthConfig(grid=32, initial_radius=(3, 6), max_radius=10), 0,
                                  normalize=False)
    d = save_case(raw, tmp_path)
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["case_id"] == raw.case_id
    assert set(manifest["sessions"][0]) == {"day", "treatment", "image", "mask"}
    back = load_case(d, normalize=False)
    for s, t in zip(raw.sessions, back.sessions):
        assert s.image.tobytes() == t.image.tobytes() and s.mask.tobytes() == t.mask.tobytes()
    normed = load_case(d)
    np.testing.assert_array_equal(normed.sessions[1].image, zscore_normalize(raw.sessions[1].image))
    assert list_case_dirs(tmp_path) == [d]
    assert len(load_cases(tmp_path)) == 1
    assert load_cases(tmp_path / "nothing") == []


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_case(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_case(tmp_path)
