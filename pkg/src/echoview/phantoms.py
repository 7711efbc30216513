"""Synthetic stand-ins for the fifteen views.

Each view is a parametric monochrome pattern drawn inside a "signal box" near
the image centre: dark chamber ellipses carved into bright tissue for the
b-mode views, spectral envelopes below a baseline for PW/CW, and wavy
horizontal layers for m-mode. Everything outside the box is nuisance: black
background with a smooth per-study haze and additive noise.

Variation mimics acquisition differences. Per study: gain, contrast, haze,
translation and zoom of the box. Per clip: a small extra offset and a cardiac
phase. Per frame: the phase advances (chambers breathe, traces drift) and fresh
noise is drawn. ``jitter`` scales all of it; at 0 every sample is its template.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .data import IMAGE_SHAPE, Dataset, DatasetManifest, SampleRecord
from .views import ALL_VIEWS, ViewLabel

BOX_SHAPE = (24, 32)
SUPERSAMPLE = 2

TISSUE = 0.70
CHAMBER = 0.06
BRIGHT = 0.95

# component lists in box coordinates (row, col in [0, 1]); later entries paint over earlier ones
_A4C = [
    ("ellipse", 0.50, 0.50, 0.48, 0.48, TISSUE),
    ("chamber", 0.28, 0.29, 0.16, 0.15),
    ("chamber", 0.28, 0.71, 0.16, 0.15),
    ("chamber", 0.74, 0.29, 0.14, 0.15),
    ("chamber", 0.74, 0.71, 0.14, 0.15),
    ("line", 0.51, 0.12, 0.51, 0.88, 0.035, BRIGHT),
]
# the region a5c adds to a4c
FIFTH_CHAMBER = (0.51, 0.50, 0.10, 0.10)

_A2C = [
    ("ellipse", 0.50, 0.50, 0.48, 0.48, TISSUE),
    ("chamber", 0.32, 0.45, 0.20, 0.20),
    ("chamber", 0.76, 0.45, 0.13, 0.17),
]
_A3C_OUTFLOW = ("chamber", 0.42, 0.80, 0.13, 0.09)

TEMPLATES: dict[ViewLabel, list[tuple]] = {
    ViewLabel.PLAX: [
        ("ellipse", 0.50, 0.50, 0.48, 0.48, TISSUE),
        ("chamber", 0.42, 0.38, 0.13, 0.30),
        ("chamber", 0.30, 0.80, 0.09, 0.12),
        ("chamber", 0.66, 0.78, 0.11, 0.12),
    ],
    ViewLabel.RV_INFLOW: [
        ("ellipse", 0.50, 0.50, 0.48, 0.48, TISSUE),
        ("tilted", 0.34, 0.40, 0.14, 0.28, 35.0),
        ("chamber", 0.72, 0.62, 0.15, 0.17),
        ("line", 0.52, 0.42, 0.58, 0.70, 0.035, BRIGHT),
    ],
    ViewLabel.SAX_BASAL: [
        ("ellipse", 0.50, 0.50, 0.48, 0.48, TISSUE),
        ("chamber", 0.50, 0.50, 0.24, 0.24),
        ("line", 0.50, 0.50, 0.27, 0.50, 0.04, BRIGHT),
        ("line", 0.50, 0.50, 0.62, 0.30, 0.04, BRIGHT),
        ("line", 0.50, 0.50, 0.62, 0.70, 0.04, BRIGHT),
    ],
    ViewLabel.SAX_MID: [
        ("ellipse", 0.50, 0.50, 0.48, 0.48, TISSUE),
        ("ellipse", 0.50, 0.50, 0.36, 0.34, BRIGHT),
        ("chamber", 0.50, 0.50, 0.30, 0.28),
        ("ellipse", 0.64, 0.38, 0.06, 0.05, BRIGHT),
        ("ellipse", 0.64, 0.62, 0.06, 0.05, BRIGHT),
    ],
    ViewLabel.A4C: _A4C,
    ViewLabel.A5C: _A4C + [("chamber",) + FIFTH_CHAMBER[:2] + (0.08, 0.08)],
    ViewLabel.A2C: _A2C,
    ViewLabel.A3C: _A2C + [_A3C_OUTFLOW],
    ViewLabel.SUB4C: [
        ("ellipse", 0.50, 0.50, 0.48, 0.48, TISSUE),
        ("chamber", 0.20, 0.50, 0.12, 0.13),
        ("chamber", 0.50, 0.22, 0.12, 0.13),
        ("chamber", 0.50, 0.78, 0.12, 0.13),
        ("chamber", 0.80, 0.50, 0.12, 0.13),
    ],
    ViewLabel.SUB_IVC: [
        ("ellipse", 0.50, 0.50, 0.48, 0.48, TISSUE),
        ("chamber", 0.58, 0.52, 0.08, 0.40),
        ("chamber", 0.28, 0.18, 0.12, 0.12),
    ],
    ViewLabel.SUB_AO: [
        ("ellipse", 0.50, 0.50, 0.48, 0.48, TISSUE),
        ("line", 0.06, 0.40, 0.94, 0.40, 0.04, BRIGHT),
        ("line", 0.06, 0.60, 0.94, 0.60, 0.04, BRIGHT),
        ("chamber", 0.50, 0.50, 0.42, 0.07),
    ],
    ViewLabel.SUP_AO: [
        ("ellipse", 0.50, 0.50, 0.48, 0.48, TISSUE),
        ("arch", 0.80, 0.50, 0.42, 0.26),
        ("line", 0.40, 0.36, 0.10, 0.30, 0.05, CHAMBER),
        ("line", 0.38, 0.50, 0.06, 0.50, 0.05, CHAMBER),
        ("line", 0.40, 0.64, 0.10, 0.70, 0.05, CHAMBER),
    ],
    ViewLabel.PW: [
        ("baseline", 0.28),
        ("spectrum", 0.28, 0.40, 4, 0.08, False),
    ],
    ViewLabel.CW: [
        ("baseline", 0.28),
        ("spectrum", 0.28, 0.62, 3, 0.13, True),
    ],
    ViewLabel.MMODE: [
        ("waves", 5),
    ],
}


# ---------------------------------------------------------------- rendering

def _line_distance(y, x, y0, x0, y1, x1):
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((y - y0) * dy + (x - x0) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
    return np.hypot(y - (y0 + t * dy), x - (x0 + t * dx))


def _paint(canvas: np.ndarray, u: np.ndarray, v: np.ndarray, comps: Sequence[tuple],
           phase: float, breathe: float) -> None:
    """Draw components on ``canvas`` at box coordinates (u rows, v cols)."""
    s = 1.0 + breathe * math.sin(phase)
    for comp in comps:
        kind = comp[0]
        if kind == "ellipse":
            _, cy, cx, ry, rx, val = comp
            canvas[((u - cy) / ry) ** 2 + ((v - cx) / rx) ** 2 <= 1.0] = val
        elif kind == "chamber":
            _, cy, cx, ry, rx = comp
            canvas[((u - cy) / (ry * s)) ** 2 + ((v - cx) / (rx * s)) ** 2 <= 1.0] = CHAMBER
        elif kind == "tilted":
            _, cy, cx, ry, rx, deg = comp
            a = math.radians(deg)
            du, dv = u - cy, v - cx
            pu = du * math.cos(a) - dv * math.sin(a)
            pv = du * math.sin(a) + dv * math.cos(a)
            canvas[(pu / (ry * s)) ** 2 + (pv / (rx * s)) ** 2 <= 1.0] = CHAMBER
        elif kind == "line":
            _, y0, x0, y1, x1, width, val = comp
            canvas[_line_distance(u, v, y0, x0, y1, x1) <= width] = val
        elif kind == "arch":
            _, cy, cx, r_out, r_in = comp
            r = np.hypot((u - cy) / 0.75, v - cx)
            canvas[(r <= r_out * s) & (r >= r_in) & (u <= cy)] = CHAMBER
        elif kind == "baseline":
            _, y = comp
            canvas[np.abs(u - y) <= 0.025] = BRIGHT * 0.8
        elif kind == "spectrum":
            _, base, depth, beats, half_width, filled = comp
            drift = 0.04 * math.sin(phase)
            for b in range(beats):
                cx = (b + 0.5) / beats + drift
                profile = np.clip(1.0 - np.abs(v - cx) / half_width, 0.0, None)
                edge = base + depth * profile
                inside = (u >= base) & (u <= edge) & (profile > 0)
                if filled:
                    canvas[inside] = 0.55 + 0.25 * (u[inside] - base) / depth
                else:
                    canvas[inside & (edge - u <= 0.08)] = BRIGHT
        elif kind == "waves":
            _, n = comp
            for k in range(n):
                centre = (k + 0.5) / n + 0.04 * np.sin(2 * np.pi * 2 * v + phase + k)
                band = np.abs(u - centre) <= 0.5 / n * 0.45
                canvas[band] = BRIGHT if k % 2 == 0 else 0.45
        else:
            raise ValueError(f"unknown component {kind!r}")


def _render(view: ViewLabel, top: float, left: float, scale: float, phase: float,
            breathe: float, shape=IMAGE_SHAPE) -> np.ndarray:
    """Area-averaged render of one template placed with its box at (top, left)."""
    h, w = shape
    k = SUPERSAMPLE
    rows = (np.arange(h * k) + 0.5) / k
    cols = (np.arange(w * k) + 0.5) / k
    bh, bw = BOX_SHAPE[0] * scale, BOX_SHAPE[1] * scale
    u = ((rows - top) / bh)[:, None] * np.ones((1, w * k))
    v = np.ones((h * k, 1)) * ((cols - left) / bw)[None, :]
    canvas = np.zeros((h * k, w * k))
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    sub = np.zeros(int(inside.sum()))
    _paint(sub, u[inside], v[inside], TEMPLATES[view], phase, breathe)
    canvas[inside] = sub
    return canvas.reshape(h, k, w, k).mean(axis=(1, 3))


def box_position(offset_y: float = 0.0, offset_x: float = 0.0, scale: float = 1.0) -> tuple[float, float]:
    h, w = IMAGE_SHAPE
    return (h - BOX_SHAPE[0] * scale) / 2 + offset_y, (w - BOX_SHAPE[1] * scale) / 2 + offset_x


def signal_box(top: float, left: float, scale: float = 1.0) -> tuple[int, int, int, int]:
    """Integer (top, left, height, width) rectangle covering the signal box."""
    t0, l0 = math.floor(top), math.floor(left)
    t1 = math.ceil(top + BOX_SHAPE[0] * scale)
    l1 = math.ceil(left + BOX_SHAPE[1] * scale)
    h, w = IMAGE_SHAPE
    t0, l0, t1, l1 = max(0, t0), max(0, l0), min(h, t1), min(w, l1)
    return (t0, l0, t1 - t0, l1 - l0)


def template(view: ViewLabel | str) -> np.ndarray:
    """The view's pattern with no jitter, centred."""
    view = ViewLabel(view)
    top, left = box_position()
    return _render(view, top, left, 1.0, 0.0, 0.0).astype(np.float32)


def box_mask(box: tuple[int, int, int, int], shape=IMAGE_SHAPE) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    t, l, h, w = box
    m[t:t + h, l:l + w] = True
    return m


# ---------------------------------------------------------------- nuisance

def _haze(rng: np.random.Generator, amplitude: float, shape=IMAGE_SHAPE) -> np.ndarray:
    """Smooth additive field: a tilted plane plus one broad Gaussian blob."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy / (h - 1)
    xx = xx / (w - 1)
    a, b = rng.uniform(-1, 1, 2)
    plane = 0.5 + 0.5 * (a * (yy - 0.5) + b * (xx - 0.5))
    cy, cx = rng.uniform(0, 1, 2)
    sig = rng.uniform(0.2, 0.45)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2))
    field = 0.5 * plane + 0.5 * blob
    return amplitude * field


def generate_phantoms(seed: int = 0, classes: int | Sequence[ViewLabel | str] = 15,
                      frames_per_clip: int = 10, clips_per_study: int = 1, studies: int = 20,
                      jitter: float = 1.0) -> Dataset:
    """Build a study-grouped phantom dataset.

    Every study holds ``clips_per_study`` clips of ``frames_per_clip`` frames
    for every class, so each class gets exactly
    ``studies * clips_per_study * frames_per_clip`` images. PW, CW and m-mode
    samples are independent stills (``clip_id`` None).
    """
    if isinstance(classes, int):
        if not 1 <= classes <= len(ALL_VIEWS):
            raise ValueError(f"classes must be in 1..{len(ALL_VIEWS)}")
        views = list(ALL_VIEWS[:classes])
    else:
        views = [ViewLabel(c) for c in classes]
    for name, n in (("frames_per_clip", frames_per_clip), ("clips_per_study", clips_per_study),
                    ("studies", studies)):
        if n < 1:
            raise ValueError(f"{name} must be >= 1")
    j = float(jitter)

    images, records = [], []
    for s in range(studies):
        srng = np.random.default_rng([seed, s])
        gain = 1.0 + j * srng.uniform(-0.25, 0.25)
        gamma = 1.0 + j * srng.uniform(-0.3, 0.3)
        haze = _haze(srng, j * srng.uniform(0.05, 0.35))
        off_y, off_x = j * srng.uniform(-3.0, 3.0, 2)
        zoom = 1.0 + j * srng.uniform(-0.08, 0.08)
        study_id = f"s{seed}-{s:04d}"
        for ci, view in enumerate(views):
            for clip in range(clips_per_study):
                crng = np.random.default_rng([seed, s, ALL_VIEWS.index(view), clip])
                cdy, cdx = j * crng.uniform(-1.0, 1.0, 2)
                phase0 = crng.uniform(0, 2 * math.pi)
                clip_id = f"{study_id}-{view.value}-{clip}" if view.is_video else None
                for f in range(frames_per_clip):
                    frng = np.random.default_rng([seed, s, ALL_VIEWS.index(view), clip, f])
                    if view.is_video:
                        phase = phase0 + 2 * math.pi * f / max(frames_per_clip, 2)
                        dy, dx = off_y + cdy, off_x + cdx
                    else:
                        # stills: every frame is its own acquisition
                        phase = frng.uniform(0, 2 * math.pi)
                        dy, dx = off_y + j * frng.uniform(-1, 1), off_x + j * frng.uniform(-1, 1)
                    top, left = box_position(dy, dx, zoom)
                    img = _render(view, top, left, zoom, j * phase, 0.07 * j)
                    img = gain * img ** gamma
                    img = img + haze
                    if j > 0:
                        img = img * (1.0 + 0.12 * j * frng.standard_normal(img.shape))
                        img = img + 0.03 * j * frng.standard_normal(img.shape)
                    images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
                    records.append(SampleRecord(study_id=study_id, view_label=view.value, clip_id=clip_id,
                                                frame_index=f, signal_box=signal_box(top, left, zoom)))
    man = DatasetManifest(records, tuple(v.value for v in views))
    return Dataset(np.stack(images), man)
