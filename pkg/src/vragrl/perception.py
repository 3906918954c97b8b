"""Coarse-to-fine perception geometry.

Raw document pages are fitted under the encoder pixel budget; region boxes
emitted in encoder (or normalized) coordinates are mapped back onto the raw
page, cropped, and re-fitted, which raises the pixel density of the crop.

All coordinate conversions round half-up and are done in exact rational
arithmetic so results do not depend on float behaviour.
"""

from __future__ import annotations

import hashlib
import io
import math
import random
import threading
from collections import OrderedDict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from PIL import Image, ImageDraw

from .grammar import Region


class PerceptionError(Exception):
    pass


class ZeroDimension(PerceptionError):
    pass


class OutOfRange(PerceptionError):
    pass


class DegenerateRegion(PerceptionError):
    pass


class NoImageInContext(PerceptionError):
    pass


@dataclass(frozen=True)
class EncoderProfile:
    max_pixels: int = 1_000_000
    patch_multiple: int = 28
    normalization_scale: Optional[int] = None
    clamp_tolerance: int = 2

    def __post_init__(self):
        if self.max_pixels <= 0:
            raise ValueError("max_pixels must be positive")
        if self.patch_multiple < 1:
            raise ValueError("patch_multiple must be >= 1")
        if self.patch_multiple * self.patch_multiple > self.max_pixels:
            raise ValueError("max_pixels smaller than a single patch")
        if self.normalization_scale is not None and self.normalization_scale <= 0:
            raise ValueError("normalization_scale must be positive")


@dataclass(frozen=True)
class ImageDocument:
    """A raw page. ``source`` is a file path, encoded bytes, or None for a
    procedurally drawn page whose content is ``text``."""

    doc_id: str
    width: int
    height: int
    source: Union[str, bytes, None] = None
    text: str = ""

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ZeroDimension(f"{self.doc_id}: {self.width}x{self.height}")


@dataclass(frozen=True)
class EncodedView:
    """An image as it sits in the context: a raw-space crop resized to
    ``enc_width`` x ``enc_height``."""

    doc_id: str
    enc_width: int
    enc_height: int
    crop_origin: tuple[int, int]
    crop_extent: tuple[int, int]
    raw_width: int
    raw_height: int

    @property
    def raw_box(self) -> tuple[int, int, int, int]:
        x, y = self.crop_origin
        w, h = self.crop_extent
        return (x, y, x + w, y + h)

    @property
    def is_full(self) -> bool:
        return self.crop_origin == (0, 0) and self.crop_extent == (self.raw_width, self.raw_height)

    @property
    def density(self) -> Fraction:
        """Encoded pixels per raw pixel (area ratio)."""
        return Fraction(self.enc_width * self.enc_height, self.crop_extent[0] * self.crop_extent[1])

    @property
    def magnification(self) -> float:
        """Linear encoded-pixels-per-raw-pixel."""
        return math.sqrt(self.density)


@dataclass(frozen=True)
class RegionBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    space: str = "encoder"

    def __post_init__(self):
        if self.space not in ("encoder", "normalized", "raw"):
            raise ValueError(f"unknown coordinate space {self.space!r}")
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise DegenerateRegion(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def round_half_up(q: Fraction) -> int:
    return math.floor(q + Fraction(1, 2))


def _floor_multiple(v: int, p: int) -> int:
    return (v // p) * p


def _ceil_multiple(q: Fraction, p: int) -> int:
    return math.ceil(q / p) * p


def fit_to_budget(w_raw: int, h_raw: int, profile: EncoderProfile, upscale: bool = False) -> tuple[int, int]:
    """Largest patch-aligned size with the raw aspect ratio and area <= max_pixels.

    Pages already under budget keep their size (snapped to the patch grid)
    unless ``upscale`` is set, which is how crops get zoomed.
    """
    if w_raw <= 0 or h_raw <= 0:
        raise ZeroDimension(f"{w_raw}x{h_raw}")
    p, budget = profile.patch_multiple, profile.max_pixels

    if w_raw * h_raw <= budget and not upscale:
        w = max(p, round_half_up(Fraction(w_raw, p)) * p)
        h = max(p, round_half_up(Fraction(h_raw, p)) * p)
        if w * h > budget:
            w, h = max(p, _floor_multiple(w_raw, p)), max(p, _floor_multiple(h_raw, p))
        return w, h

    # floor(w * sqrt(B / (w h))) == isqrt(floor(B w / h)), exact in integers
    w = max(p, _floor_multiple(math.isqrt(budget * w_raw // h_raw), p))
    h = max(p, _floor_multiple(math.isqrt(budget * h_raw // w_raw), p))
    # extreme aspect ratios where the patch floor kicked in
    if w * h > budget:
        if h == p:
            w = _floor_multiple(budget // h, p)
        else:
            h = _floor_multiple(budget // w, p)
    return w, h


def full_view(doc: ImageDocument, profile: EncoderProfile) -> EncodedView:
    w, h = fit_to_budget(doc.width, doc.height, profile)
    return EncodedView(doc.doc_id, w, h, (0, 0), (doc.width, doc.height), doc.width, doc.height)


def denormalize(box: Sequence[int], w: int, h: int, delta: int) -> tuple[int, int, int, int]:
    """Map a box normalized to [0, delta] onto a w x h frame."""
    if any(v < 0 or v > delta for v in box):
        raise OutOfRange(f"{tuple(box)} outside [0, {delta}]")
    x0, y0, x1, y1 = box
    return (
        round_half_up(Fraction(x0 * w, delta)),
        round_half_up(Fraction(y0 * h, delta)),
        round_half_up(Fraction(x1 * w, delta)),
        round_half_up(Fraction(y1 * h, delta)),
    )


def _clamp(v, lo, hi):
    return lo if v < lo else hi if v > hi else v


def map_region_to_raw(
    box: Sequence[int],
    view: EncodedView,
    image_doc: Optional[ImageDocument] = None,
    tolerance: int = 2,
) -> tuple[int, int, int, int]:
    """Scale an encoder-space box on ``view`` back to raw page pixels."""
    x0, y0, x1, y1 = (int(v) for v in box)
    ew, eh = view.enc_width, view.enc_height
    for v, hi in ((x0, ew), (y0, eh), (x1, ew), (y1, eh)):
        if v < -tolerance or v > hi + tolerance:
            raise OutOfRange(f"{tuple(box)} outside {ew}x{eh} view (tolerance {tolerance})")
    x0, x1 = _clamp(x0, 0, ew), _clamp(x1, 0, ew)
    y0, y1 = _clamp(y0, 0, eh), _clamp(y1, 0, eh)

    ox, oy = view.crop_origin
    cw, ch = view.crop_extent
    raw_w = image_doc.width if image_doc is not None else view.raw_width
    raw_h = image_doc.height if image_doc is not None else view.raw_height
    lo_x, hi_x = max(0, ox), min(raw_w, ox + cw)
    lo_y, hi_y = max(0, oy), min(raw_h, oy + ch)

    rx0 = _clamp(ox + round_half_up(Fraction(x0 * cw, ew)), lo_x, hi_x)
    rx1 = _clamp(ox + round_half_up(Fraction(x1 * cw, ew)), lo_x, hi_x)
    ry0 = _clamp(oy + round_half_up(Fraction(y0 * ch, eh)), lo_y, hi_y)
    ry1 = _clamp(oy + round_half_up(Fraction(y1 * ch, eh)), lo_y, hi_y)
    if (rx1 - rx0) * (ry1 - ry0) < 1 or rx1 <= rx0 or ry1 <= ry0:
        raise DegenerateRegion(f"{tuple(box)} maps to empty raw region")
    return (rx0, ry0, rx1, ry1)


def crop_and_reencode(
    image_doc: ImageDocument,
    raw_box: Sequence[int],
    profile: EncoderProfile,
    parent: Optional[EncodedView] = None,
) -> EncodedView:
    """Fit a raw crop to the encoder budget, zooming it in.

    The child never ends up with fewer encoded pixels per raw pixel than the
    parent view it was cut from; patch rounding alone could otherwise make a
    near-full crop slightly coarser.
    """
    x0, y0, x1, y1 = (int(v) for v in raw_box)
    if not (0 <= x0 < x1 <= image_doc.width and 0 <= y0 < y1 <= image_doc.height):
        raise DegenerateRegion(f"{tuple(raw_box)} not a region of {image_doc.width}x{image_doc.height}")
    cw, ch = x1 - x0, y1 - y0
    if (x0, y0, cw, ch) == (0, 0, image_doc.width, image_doc.height):
        return full_view(image_doc, profile)
    parent = parent or full_view(image_doc, profile)
    if (x0, y0, cw, ch) == (*parent.crop_origin, *parent.crop_extent):
        return parent

    w, h = fit_to_budget(cw, ch, profile, upscale=True)
    px0, py0, px1, py1 = parent.raw_box
    if px0 <= x0 and py0 <= y0 and x1 <= px1 and y1 <= py1:
        p = profile.patch_multiple
        pw = _ceil_multiple(Fraction(cw * parent.enc_width, parent.crop_extent[0]), p)
        ph = _ceil_multiple(Fraction(ch * parent.enc_height, parent.crop_extent[1]), p)
        if pw * ph > w * h:
            w, h = pw, ph
    return EncodedView(image_doc.doc_id, w, h, (x0, y0), (cw, ch), image_doc.width, image_doc.height)


def resolve_target(views: Sequence[EncodedView], target_index: Optional[int]) -> EncodedView:
    if not views:
        raise NoImageInContext("no image observation to crop")
    if target_index is None:
        return views[-1]
    if not 1 <= target_index <= len(views):
        raise OutOfRange(f"image {target_index} requested, {len(views)} in context")
    return views[target_index - 1]


def apply_region_action(
    action: Region,
    views: Sequence[EncodedView],
    lookup: Callable[[str], ImageDocument],
    profile: EncoderProfile,
) -> EncodedView:
    """Resolve, map, crop and re-encode one region action.

    ``views`` are the image observations in context, oldest first. The
    returned view carries its provenance (source doc and raw box).
    """
    target = resolve_target(views, action.target_index)
    box = action.bbox
    if profile.normalization_scale is not None:
        box = denormalize(box, target.enc_width, target.enc_height, profile.normalization_scale)
    doc = lookup(target.doc_id)
    raw = map_region_to_raw(box, target, doc, tolerance=profile.clamp_tolerance)
    return crop_and_reencode(doc, raw, profile, parent=target)


# --- pixels -----------------------------------------------------------------


class _LRU:
    def __init__(self, size: int):
        self.size = size
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get_or_make(self, key, make):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return self._data[key]
        value = make()
        with self._lock:
            self._data[key] = value
            while len(self._data) > self.size:
                self._data.popitem(last=False)
        return value


_RAW_CACHE = _LRU(64)
_PNG_CACHE = _LRU(1024)


def draw_page(doc: ImageDocument) -> Image.Image:
    """Deterministic synthetic page: coloured blocks plus the page text."""
    rng = random.Random(hashlib.sha256(doc.doc_id.encode()).digest())
    img = Image.new("RGB", (doc.width, doc.height), "white")
    draw = ImageDraw.Draw(img)
    for _ in range(6):
        x0, y0 = rng.randrange(doc.width), rng.randrange(doc.height)
        x1 = min(doc.width, x0 + rng.randrange(1, max(2, doc.width // 3)))
        y1 = min(doc.height, y0 + rng.randrange(1, max(2, doc.height // 4)))
        colour = tuple(rng.randrange(120, 256) for _ in range(3))
        draw.rectangle([x0, y0, x1, y1], fill=colour)
    words = doc.text.split()
    line_h = 12
    y = 4
    for i in range(0, len(words), 8):
        if y + line_h > doc.height:
            break
        draw.text((4, y), " ".join(words[i : i + 8]), fill="black")
        y += line_h
    return img


def _doc_key(doc: ImageDocument):
    src = hashlib.sha256(doc.source).hexdigest() if isinstance(doc.source, bytes) else doc.source
    return (doc.doc_id, src, doc.text)


def load_raw(doc: ImageDocument) -> Image.Image:
    def make():
        if doc.source is None:
            return draw_page(doc)
        if isinstance(doc.source, bytes):
            img = Image.open(io.BytesIO(doc.source))
        else:
            img = Image.open(Path(doc.source))
        img.load()
        return img.convert("RGB")

    return _RAW_CACHE.get_or_make(_doc_key(doc), make)


def render_view(doc: ImageDocument, view: EncodedView) -> bytes:
    """PNG bytes of ``view`` (crop then bilinear resize)."""

    def make():
        img = load_raw(doc).crop(view.raw_box).resize((view.enc_width, view.enc_height), Image.BILINEAR)
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()

    return _PNG_CACHE.get_or_make((_doc_key(doc), view), make)


def image_size(payload: bytes) -> tuple[int, int]:
    with Image.open(io.BytesIO(payload)) as img:
        return img.size
