"""Minimal raster plotting: line charts, heatmaps, annotated images.

Deliberately tiny. Renders into uint8 RGB arrays and writes PNG (stdlib
zlib) or binary PGM; enough for the handful of diagnostic figures the CLI
emits, nothing more.
"""

import struct
import zlib

import numpy as np

# 3x5 bitmap glyphs, rows top to bottom, '1' = lit
_GLYPHS = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
    ".": ("000", "000", "000", "000", "010"),
    "-": ("000", "000", "111", "000", "000"),
    "+": ("000", "010", "111", "010", "000"),
    "e": ("000", "111", "110", "100", "111"),
    " ": ("000", "000", "000", "000", "000"),
    "x": ("000", "101", "010", "101", "000"),
    "y": ("000", "101", "010", "010", "100"),
    "f": ("011", "010", "111", "010", "010"),
    "m": ("000", "110", "111", "101", "101"),
    "s": ("000", "011", "110", "001", "110"),
    "r": ("000", "101", "110", "100", "100"),
    "b": ("100", "100", "111", "101", "111"),
    "i": ("010", "000", "010", "010", "010"),
    "n": ("000", "110", "101", "101", "101"),
    "t": ("010", "111", "010", "010", "011"),
    "d": ("001", "001", "111", "101", "111"),
    "k": ("100", "101", "110", "101", "101"),
    "a": ("000", "011", "101", "101", "011"),
    "g": ("000", "111", "101", "111", "001"),
    "h": ("100", "100", "111", "101", "101"),
    "o": ("000", "010", "101", "101", "010"),
    "u": ("000", "101", "101", "101", "111"),
    "l": ("010", "010", "010", "010", "011"),
    "c": ("000", "011", "100", "100", "011"),
    "p": ("000", "111", "101", "111", "100"),
    "v": ("000", "101", "101", "101", "010"),
    "w": ("000", "101", "101", "111", "101"),
    "=": ("000", "111", "000", "111", "000"),
    "/": ("001", "001", "010", "100", "100"),
}


def save_png(path, arr):
    """Write a uint8 grayscale (HxW) or RGB (HxWx3) array as PNG."""
    a = np.asarray(arr)
    if a.ndim == 2:
        a = np.stack([a, a, a], axis=-1)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("expected HxW or HxWx3 array")
    a = np.clip(a, 0, 255).astype(np.uint8)
    h, w, _ = a.shape
    raw = b"".join(b"\x00" + a[i].tobytes() for i in range(h))

    def chunk(tag, data):
        body = tag + data
        return (struct.pack(">I", len(data)) + body
                + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", ihdr))
        fh.write(chunk(b"IDAT", zlib.compress(raw, 6)))
        fh.write(chunk(b"IEND", b""))


def draw_text(img, x, y, text, color=(0, 0, 0), scale=2):
    h, w = img.shape[:2]
    cx = x
    for ch in str(text).lower():
        rows = _GLYPHS.get(ch, _GLYPHS[" "])
        for ry, row in enumerate(rows):
            for rx, bit in enumerate(row):
                if bit != "1":
                    continue
                y0, x0 = y + ry * scale, cx + rx * scale
                if 0 <= y0 < h - scale and 0 <= x0 < w - scale:
                    img[y0:y0 + scale, x0:x0 + scale] = color
        cx += 4 * scale


def draw_line(img, x0, y0, x1, y1, color):
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    keep = (xs >= 0) & (xs < img.shape[1]) & (ys >= 0) & (ys < img.shape[0])
    img[ys[keep], xs[keep]] = color


def draw_marker(img, x, y, color, radius=3):
    yy, xx = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    ring = np.abs(np.hypot(xx, yy) - radius) < 0.8
    for dy, dx in zip(*np.nonzero(ring)):
        py, px = int(y) + dy - radius, int(x) + dx - radius
        if 0 <= py < img.shape[0] and 0 <= px < img.shape[1]:
            img[py, px] = color


_PALETTE = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189),
            (255, 127, 14), (23, 190, 207)]


def _fmt(v):
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


def line_chart(series, size=(720, 480), title="", xlabel="", ylabel="",
               ylim=None):
    """Render [(label, x, y), ...] into an RGB array with axes and ticks."""
    wpx, hpx = size
    img = np.full((hpx, wpx, 3), 255, np.uint8)
    ml, mr, mt, mb = 70, 20, 30, 45
    x0, x1 = ml, wpx - mr
    y0, y1 = hpx - mb, mt

    allx = np.concatenate([np.asarray(s[1], float) for s in series])
    ally = np.concatenate([np.asarray(s[2], float) for s in series])
    xmin, xmax = float(allx.min()), float(allx.max())
    if ylim is not None:
        ymin, ymax = ylim
    else:
        ymin, ymax = float(ally.min()), float(ally.max())
    if xmax == xmin:
        xmax = xmin + 1.0
    if ymax == ymin:
        ymax = ymin + 1.0
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad

    def sx(v):
        return x0 + (v - xmin) / (xmax - xmin) * (x1 - x0)

    def sy(v):
        return y0 + (v - ymin) / (ymax - ymin) * (y1 - y0)

    axis = (60, 60, 60)
    draw_line(img, x0, y0, x1, y0, axis)
    draw_line(img, x0, y0, x0, y1, axis)
    for frac in np.linspace(0, 1, 5):
        tx = xmin + frac * (xmax - xmin)
        ty = ymin + frac * (ymax - ymin)
        px, py = int(sx(tx)), int(sy(ty))
        draw_line(img, px, y0, px, y0 + 4, axis)
        draw_line(img, x0 - 4, py, x0, py, axis)
        draw_text(img, px - 14, y0 + 8, _fmt(tx), axis, scale=1)
        draw_text(img, 8, py - 3, _fmt(ty), axis, scale=1)
    draw_text(img, ml, 8, title, (0, 0, 0), scale=2)
    draw_text(img, (x0 + x1) // 2 - 20, hpx - 18, xlabel, axis, scale=1)
    draw_text(img, 8, mt - 14, ylabel, axis, scale=1)

    for i, (label, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        xs = np.asarray(xs, float)
        ys = np.asarray(ys, float)
        order = np.argsort(xs)
        xs, ys = xs[order], ys[order]
        for j in range(len(xs) - 1):
            draw_line(img, sx(xs[j]), sy(ys[j]), sx(xs[j + 1]), sy(ys[j + 1]),
                      color)
        for j in range(len(xs)):
            draw_marker(img, sx(xs[j]), sy(ys[j]), color, radius=2)
        draw_text(img, x1 - 120, mt + 12 * i, label, color, scale=1)
    return img


def heatmap(z, size=(560, 480), title=""):
    """Render a 2D array as a blue-white-red heatmap with a value range."""
    z = np.asarray(z, float)
    lo, hi = float(np.nanmin(z)), float(np.nanmax(z))
    span = hi - lo if hi > lo else 1.0
    t = np.clip((z - lo) / span, 0, 1)
    # two-segment ramp: dark blue -> white -> dark red
    r = np.where(t < 0.5, 30 + t * 2 * 225, 255)
    b = np.where(t < 0.5, 255, 255 - (t - 0.5) * 2 * 225)
    g = np.where(t < 0.5, 60 + t * 2 * 195, 255 - (t - 0.5) * 2 * 195)
    rgb = np.stack([r, g, b], axis=-1).astype(np.uint8)

    wpx, hpx = size
    img = np.full((hpx, wpx, 3), 255, np.uint8)
    ml, mt, mb = 20, 30, 25
    cell_h = max((hpx - mt - mb) // z.shape[0], 1)
    cell_w = max((wpx - 2 * ml) // z.shape[1], 1)
    big = np.repeat(np.repeat(rgb, cell_h, axis=0), cell_w, axis=1)
    img[mt:mt + big.shape[0], ml:ml + big.shape[1]] = big
    draw_text(img, ml, 8, title, (0, 0, 0), scale=2)
    draw_text(img, ml, hpx - 14, f"{_fmt(lo)} .. {_fmt(hi)}", (60, 60, 60),
              scale=1)
    return img


def annotate_image(counts, markers, log_stretch=True):
    """Grayscale image with colored circles at marker positions.

    markers: iterable of (x, y, color); x right, y up relative to the
    counts array's index origin (row 0 drawn at the bottom).
    """
    z = np.asarray(counts, float)
    if log_stretch:
        z = np.log1p(z)
    top = z.max() if z.max() > 0 else 1.0
    gray = (z / top * 255).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    rgb = rgb[::-1].copy()  # row 0 at the bottom
    h = rgb.shape[0]
    for x, y, color in markers:
        draw_marker(rgb, x, h - 1 - y, color, radius=4)
    return rgb
