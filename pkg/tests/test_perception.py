import io
from decimal import Decimal, getcontext
from fractions import Fraction

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from PIL import Image

from vragrl.grammar import Region
from vragrl.perception import (
    DegenerateRegion,
    EncodedView,
    EncoderProfile,
    ImageDocument,
    NoImageInContext,
    OutOfRange,
    ZeroDimension,
    apply_region_action,
    crop_and_reencode,
    denormalize,
    fit_to_budget,
    full_view,
    image_size,
    map_region_to_raw,
    render_view,
)

UNIT = EncoderProfile(max_pixels=1_000_000, patch_multiple=1)
DOC = ImageDocument("d7", 2000, 1500, None, "page seven")
VIEW_800 = EncodedView("d7", 800, 600, (0, 0), (2000, 1500), 2000, 1500)


def scale_floor_oracle(w, h, budget):
    """floor(w * sqrt(B / (w h))) in 50-digit decimal arithmetic."""
    getcontext().prec = 50
    s = (Decimal(budget) / (Decimal(w) * Decimal(h))).sqrt()
    eps = Decimal("1e-30")  # exact products like 1001 * (1000/1001) land a hair below the integer
    return int(Decimal(w) * s + eps), int(Decimal(h) * s + eps)


def exhaustive_best_area(w, h, budget, tol=0.005):
    best = 0
    for ww in range(1, int((budget * w / h) ** 0.5) + 3):
        hh = budget // ww
        while hh > 0 and abs((ww / hh) / (w / h) - 1) >= tol:
            hh -= 1
            if ww / max(hh, 1) > (w / h) * (1 + tol):
                hh = 0
        if hh:
            best = max(best, ww * hh)
    return best


def test_fit_example_4000x3000():
    assert fit_to_budget(4000, 3000, UNIT) == (1154, 866)
    assert scale_floor_oracle(4000, 3000, 1_000_000) == (1154, 866)
    best = exhaustive_best_area(4000, 3000, 1_000_000)
    assert 1154 * 866 <= 1_000_000
    assert 1154 * 866 >= 0.998 * best


def test_fit_under_budget():
    assert fit_to_budget(100, 100, UNIT) == (100, 100)
    assert fit_to_budget(100, 100, EncoderProfile()) == (112, 112)
    assert fit_to_budget(100, 100, UNIT, upscale=True) == (1000, 1000)


def test_fit_zero():
    with pytest.raises(ZeroDimension):
        fit_to_budget(0, 100, UNIT)
    with pytest.raises(ZeroDimension):
        ImageDocument("x", 0, 100)


@given(st.integers(1, 8000), st.integers(1, 8000))
def test_fit_matches_scale_oracle(w, h):
    assume(w * h > 1_000_000)
    assume(max(w, h) <= 300 * min(w, h))
    assert fit_to_budget(w, h, UNIT) == scale_floor_oracle(w, h, 1_000_000)


@given(st.integers(1, 8000), st.integers(1, 8000), st.sampled_from([1, 14, 28, 32]), st.booleans())
def test_fit_budget_and_aspect(w, h, p, upscale):
    assume(max(w, h) <= 20 * min(w, h))
    profile = EncoderProfile(max_pixels=1_000_000, patch_multiple=p)
    ew, eh = fit_to_budget(w, h, profile, upscale=upscale)
    assert ew * eh <= profile.max_pixels
    assert ew % p == 0 and eh % p == 0
    # each side is within one patch of the exact aspect-preserving size
    assert abs(ew * h - eh * w) <= p * max(w, h)


def test_denormalize_examples():
    assert denormalize([500, 500, 1000, 1000], 800, 600, 1000) == (400, 300, 800, 600)
    assert denormalize([0, 0, 1000, 1000], 800, 600, 1000) == (0, 0, 800, 600)
    with pytest.raises(OutOfRange):
        denormalize([0, 0, 1001, 10], 800, 600, 1000)


def test_denormalize_rounds_half_up():
    assert denormalize([1, 1, 2, 2], 3, 3, 2) == (2, 2, 3, 3)


def test_map_examples():
    assert map_region_to_raw([80, 60, 160, 120], VIEW_800, DOC) == (200, 150, 400, 300)
    assert map_region_to_raw([0, 0, 800, 600], VIEW_800, DOC) == (0, 0, 2000, 1500)
    assert map_region_to_raw([799, 599, 800, 600], VIEW_800, DOC) == (1998, 1498, 2000, 1500)


def test_map_clamps_within_tolerance():
    assert map_region_to_raw([-2, -1, 802, 601], VIEW_800, DOC) == (0, 0, 2000, 1500)
    with pytest.raises(OutOfRange):
        map_region_to_raw([0, 0, 803, 600], VIEW_800, DOC)
    with pytest.raises(OutOfRange):
        map_region_to_raw([-3, 0, 10, 10], VIEW_800, DOC)


def test_map_degenerate_after_clamp():
    with pytest.raises(DegenerateRegion):
        map_region_to_raw([800, 0, 802, 10], VIEW_800, DOC)


def test_crop_example_magnification():
    parent = full_view(DOC, UNIT)
    assert (parent.enc_width, parent.enc_height) == (1154, 866)
    child = crop_and_reencode(DOC, (0, 0, 500, 375), UNIT, parent)
    assert (child.enc_width, child.enc_height) == (1154, 866)
    assert child.magnification == pytest.approx(2.308, abs=1e-3)
    # relative to the page view the crop is 4x denser per side
    assert child.magnification / parent.magnification == pytest.approx(4.0, abs=1e-2)


def test_crop_whole_image_is_parent_size():
    parent = full_view(DOC, EncoderProfile())
    child = crop_and_reencode(DOC, (0, 0, 2000, 1500), EncoderProfile(), parent)
    assert (child.enc_width, child.enc_height) == (parent.enc_width, parent.enc_height)


def test_crop_zero_area():
    with pytest.raises(DegenerateRegion):
        crop_and_reencode(DOC, (10, 10, 10, 20), UNIT)


def test_apply_region_example():
    view = apply_region_action(Region((80, 60, 160, 120)), [VIEW_800], lambda d: DOC, UNIT)
    assert view.doc_id == "d7"
    assert view.raw_box == (200, 150, 400, 300)


def test_apply_region_no_image():
    with pytest.raises(NoImageInContext):
        apply_region_action(Region((0, 0, 10, 10)), [], lambda d: DOC, UNIT)


def test_apply_region_target_index():
    other = ImageDocument("d8", 1000, 1000)
    views = [VIEW_800, full_view(other, UNIT)]
    docs = {"d7": DOC, "d8": other}
    first = apply_region_action(Region((0, 0, 400, 300), 1), views, docs.__getitem__, UNIT)
    assert first.doc_id == "d7" and first.raw_box == (0, 0, 1000, 750)
    latest = apply_region_action(Region((0, 0, 400, 300)), views, docs.__getitem__, UNIT)
    assert latest.doc_id == "d8"
    with pytest.raises(OutOfRange):
        apply_region_action(Region((0, 0, 4, 3), 3), views, docs.__getitem__, UNIT)


def test_apply_region_normalized():
    profile = EncoderProfile(max_pixels=1_000_000, patch_multiple=1, normalization_scale=1000)
    view = apply_region_action(Region((100, 100, 200, 200)), [VIEW_800], lambda d: DOC, profile)
    assert view.raw_box == (200, 150, 400, 300)


@settings(max_examples=300)
@given(
    st.integers(50, 4000),
    st.integers(50, 4000),
    st.data(),
)
def test_full_box_round_trip_on_crops(w, h, data):
    doc = ImageDocument("p", w, h)
    profile = EncoderProfile()
    x0 = data.draw(st.integers(0, w - 1))
    y0 = data.draw(st.integers(0, h - 1))
    x1 = data.draw(st.integers(x0 + 1, w))
    y1 = data.draw(st.integers(y0 + 1, h))
    view = crop_and_reencode(doc, (x0, y0, x1, y1), profile)
    assert view.enc_width * view.enc_height <= profile.max_pixels
    assert map_region_to_raw([0, 0, view.enc_width, view.enc_height], view, doc) == view.raw_box


def compose_tolerance(view):
    """Rounding budget for normalized -> encoder -> raw: half an encoder pixel
    (in raw units) plus half a raw pixel, i.e. one pixel of the coarser grid."""
    return (
        Fraction(view.crop_extent[0], 2 * view.enc_width) + Fraction(1, 2),
        Fraction(view.crop_extent[1], 2 * view.enc_height) + Fraction(1, 2),
    )


@settings(max_examples=300)
@given(st.integers(50, 4000), st.integers(50, 4000), st.lists(st.integers(0, 1000), min_size=4, max_size=4))
def test_denormalize_compose_within_one_pixel(w, h, coords):
    x0, x1 = sorted(coords[:2])
    y0, y1 = sorted(coords[2:])
    assume(x0 < x1 and y0 < y1)
    doc = ImageDocument("p", w, h)
    view = full_view(doc, EncoderProfile())
    enc = denormalize((x0, y0, x1, y1), view.enc_width, view.enc_height, 1000)
    try:
        raw = map_region_to_raw(enc, view, doc)
    except DegenerateRegion:
        return
    tx, ty = compose_tolerance(view)
    direct = [Fraction(x0 * w, 1000), Fraction(y0 * h, 1000), Fraction(x1 * w, 1000), Fraction(y1 * h, 1000)]
    for got, want, tol in zip(raw, direct, (tx, ty, tx, ty)):
        assert abs(got - want) <= tol
    if view.enc_width >= w and view.enc_height >= h:
        assert all(abs(g - d) <= 1 for g, d in zip(raw, direct))


def test_render_view_sizes_and_cache():
    doc = ImageDocument("p", 640, 480, None, "alpha answer beta")
    view = crop_and_reencode(doc, (10, 10, 110, 85), EncoderProfile(max_pixels=200_000))
    png = render_view(doc, view)
    assert image_size(png) == (view.enc_width, view.enc_height)
    assert render_view(doc, view) == png


def test_render_from_bytes_source():
    buf = io.BytesIO()
    Image.new("RGB", (300, 200), "white").save(buf, format="PNG")
    doc = ImageDocument("b", 300, 200, buf.getvalue())
    view = full_view(doc, EncoderProfile())
    assert image_size(render_view(doc, view)) == (view.enc_width, view.enc_height)
