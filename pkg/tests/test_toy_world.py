import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from garment_compose.errors import ParameterError
from garment_compose.toy_world import (
    CATEGORIES, PATTERNS, FigureParams, Part, TextPrompt, UVMap, caption_sample, default_figure,
    dress, generate_asset, generate_figure, random_figure, read_pgm, shear_rotate, vocabulary,
    write_pgm,
)

ARMS = (Part.LEFT_ARM, Part.RIGHT_ARM)
LIMBS = ARMS + (Part.LEFT_LEG, Part.RIGHT_LEG, Part.LEFT_FOOT, Part.RIGHT_FOOT)


def part_triples(uv: UVMap, parts):
    return uv.triples(np.isin(uv.part_id, [int(p) for p in parts]))


def test_figure_deterministic():
    p = default_figure()
    a, b = generate_figure(p), generate_figure(p)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1].as_tensor(), b[1].as_tensor())


def test_arm_rotation_keeps_uv_set():
    p = default_figure().with_angles(arms=(0.2, 0.4))
    q = p.with_angles(arms=(0.2 + math.radians(30), 0.4 + math.radians(30)))
    ua, ub = generate_figure(p)[1], generate_figure(q)[1]
    assert not np.array_equal(ua.part_id, ub.part_id)  # the pose really changed
    assert part_triples(ua, ARMS) == part_triples(ub, ARMS)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_uv_multiset_invariant_under_pose(s1, s2):
    base = default_figure((64, 48))
    r1, r2 = np.random.default_rng(s1), np.random.default_rng(s2)
    p = base.with_angles((r1.uniform(0, 1), r1.uniform(0, 1)), (r1.uniform(0, .35), r1.uniform(0, .35)))
    q = base.with_angles((r2.uniform(0, 1), r2.uniform(0, 1)), (r2.uniform(0, .35), r2.uniform(0, .35)))
    ua, ub = generate_figure(p)[1], generate_figure(q)[1]
    fa, fb = ua.foreground(), ub.foreground()
    key = lambda uv, m: sorted(zip(uv.part_id[m].tolist(), uv.u[m].tolist(), uv.v[m].tolist()))
    assert key(ua, fa) == key(ub, fb)


def test_uv_injective_within_parts():
    uv = generate_figure(default_figure().with_angles((0.7, 0.3), (0.2, 0.1)))[1]
    fg = uv.foreground()
    triples = list(zip(uv.part_id[fg].tolist(), uv.u[fg].tolist(), uv.v[fg].tolist()))
    assert len(triples) == len(set(triples))


def test_background_sentinel():
    uv = generate_figure(default_figure())[1]
    bg = uv.part_id == 0
    assert bg.any()
    assert np.all(uv.u[bg] == -1) and np.all(uv.v[bg] == -1)
    fg = ~bg
    assert uv.u[fg].min() > 0 and uv.u[fg].max() < 1


def test_head_radius_zero_has_no_face():
    p = FigureParams(**{**default_figure().to_dict(), "head_radius": 0})
    uv = generate_figure(p)[1]
    assert not (uv.part_id == Part.HEAD).any()


def test_figure_out_of_canvas():
    p = FigureParams(**{**default_figure().to_dict(), "anchor": (2, 24)})
    with pytest.raises(ParameterError):
        generate_figure(p)


def test_random_figures_valid(rng):
    for canvas in ((64, 48), (32, 24)):
        for _ in range(20):
            generate_figure(random_figure(rng, canvas))


def test_shear_rotation_is_lattice_bijection():
    dy, dx = np.meshgrid(np.arange(-6, 7), np.arange(-6, 7), indexing="ij")
    y, x = shear_rotate(dy.ravel(), dx.ravel(), 0.9)
    assert len(set(zip(y.tolist(), x.tolist()))) == dy.size


def test_figure_params_roundtrip():
    p = default_figure().with_angles((0.1, 0.2), (0.3, 0.0))
    assert FigureParams.from_dict(p.to_dict()) == p


# -- assets ---------------------------------------------------------------------

def test_solid_asset_constant():
    a = generate_asset("upper", "solid", 0.2, (8, 8))
    assert np.all(a.pixels[a.mask] == np.float32(0.2))


def test_stripes_alternate_in_blocks_of_two():
    a = generate_asset("lower", "stripes", 0.2, (8, 6))
    rows = a.pixels[..., 0]
    for r in range(8):
        expected = np.float32(0.2) if (r // 2) % 2 == 0 else np.float32(1) - np.float32(0.2)
        assert np.all(rows[r] == expected)


def test_asset_deterministic_with_seed():
    a, b = generate_asset("shoes", "dots", None, (4, 8), seed=3), generate_asset("shoes", "dots", None, (4, 8), seed=3)
    assert a.base == b.base and np.array_equal(a.pixels, b.pixels)


def test_asset_pixels_outside_mask_white():
    a = generate_asset("face", "checker", 0.3, (6, 6))
    assert np.all(a.pixels[~a.mask] == 1.0)


def test_asset_errors():
    with pytest.raises(ParameterError):
        generate_asset("upper", "plaid", 0.2)
    with pytest.raises(ParameterError):
        generate_asset("upper", "solid", 0.2, (3, 8))


# -- captions ---------------------------------------------------------------------

def test_caption_single():
    p = caption_sample([generate_asset("upper", "stripes", 0.1)])
    assert p.words() == ["a", "striped", "dark", "upper"]
    assert p.spans == [(0, 0, 4)]


def test_caption_empty():
    p = caption_sample([])
    assert p.tokens == [] and p.spans == []


def test_caption_orders_upper_then_lower():
    p = caption_sample([generate_asset("lower", "solid", 0.9), generate_asset("upper", "dots", 0.5)])
    assert p.words() == ["a", "dotted", "mid", "upper", ",", "a", "plain", "light", "lower"]
    assert p.spans == [(1, 0, 4), (0, 5, 9)]


def test_caption_duplicate_category():
    with pytest.raises(ParameterError):
        caption_sample([generate_asset("upper", "solid", 0.1), generate_asset("upper", "dots", 0.9)])


@given(st.lists(st.sampled_from(CATEGORIES), unique=True), st.data())
def test_spans_partition(cats, data):
    assets = [generate_asset(c, data.draw(st.sampled_from(PATTERNS)), 0.4) for c in cats]
    p = caption_sample(assets)
    assert sorted(a for a, _, _ in p.spans) == list(range(len(assets)))
    covered = []
    for _, s, e in sorted(p.spans, key=lambda x: x[1]):
        assert 0 <= s < e <= len(p.tokens)
        covered.extend(range(s, e))
    assert len(covered) == len(set(covered))


def test_prompt_roundtrip():
    p = caption_sample([generate_asset("shoes", "checker", 0.8)])
    assert TextPrompt.from_dict(p.to_dict()) == p


def test_vocabulary_fixed():
    v = vocabulary()
    assert len(v) == 64 and len(set(v)) == 64


# -- dressing ---------------------------------------------------------------------

def test_dressed_torso_matches_bbox_resample():
    fig = default_figure()
    uv = generate_figure(fig)[1]
    shirt = generate_asset("upper", "checker", 0.2, (24, 20))
    img = dress(uv, [shirt])[..., 0]
    rows, cols = np.nonzero(uv.part_id == Part.TORSO)
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    th, tw = r1 - r0, c1 - c0
    h, w = shirt.size
    for r in range(r0, r1):
        for c in range(c0, c1):
            ar = int((r - r0 + 0.5) * h / th)
            ac = int((c - c0 + 0.5) * w / tw)
            assert img[r, c] == shirt.pixels[ar, ac, 0]


def test_undressed_parts_and_background():
    uv = generate_figure(default_figure())[1]
    img = dress(uv, [])[..., 0]
    assert np.all(img[uv.part_id == 0] == 1.0)
    assert np.all(img[uv.part_id == Part.TORSO] == np.float32(0.5))


def test_pgm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(6, 5)) / 255.0
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert np.array_equal(np.round(back * 255), np.round(img * 255))
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n5 6\n255\n")
