"""Plain-text PGM (P2) / PPM (P3) reading and writing.

Pixel values map linearly between ``0..maxval`` and ``[0, 1]``. Files are
written with maxval 255; values are clipped and rounded to the nearest level.
"""
from __future__ import annotations

import numpy as np

from .patching import FeatureMap


class PnmError(ValueError):
    pass


def _tokens(text: str):
    """Yield (token, line number), skipping ``#`` comments."""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0]
        for tok in line.split():
            yield tok, lineno


def parse_pnm(text: str) -> FeatureMap:
    toks = _tokens(text)

    def header_int(what):
        try:
            tok, lineno = next(toks)
        except StopIteration:
            raise PnmError(f"unexpected end of file reading {what}") from None
        try:
            v = int(tok)
        except ValueError:
            raise PnmError(f"line {lineno}: bad {what} {tok!r}") from None
        if v <= 0:
            raise PnmError(f"line {lineno}: {what} must be positive, got {v}")
        return v

    try:
        magic, lineno = next(toks)
    except StopIteration:
        raise PnmError("empty file") from None
    if magic not in ("P2", "P3"):
        raise PnmError(f"line {lineno}: unsupported magic {magic!r} (want P2 or P3)")
    channels = 1 if magic == "P2" else 3
    width = header_int("width")
    height = header_int("height")
    maxval = header_int("maxval")
    if maxval > 65535:
        raise PnmError(f"maxval {maxval} exceeds 65535")

    n = width * height * channels
    values = []
    for tok, lineno in toks:
        try:
            v = int(tok)
        except ValueError:
            raise PnmError(f"line {lineno}: bad sample {tok!r}") from None
        if not 0 <= v <= maxval:
            raise PnmError(f"line {lineno}: sample {v} outside 0..{maxval}")
        values.append(v)
    if len(values) != n:
        raise PnmError(f"expected {n} samples, found {len(values)}")
    data = np.array(values, dtype=np.float64).reshape(height, width, channels) / maxval
    return FeatureMap(data)


def read_pnm(path) -> FeatureMap:
    with open(path, "r", encoding="ascii") as fh:
        return parse_pnm(fh.read())


def format_pnm(img: FeatureMap, comment: str | None = None) -> str:
    if img.C not in (1, 3):
        raise PnmError(f"can only write 1 or 3 channels, got {img.C}")
    q = np.rint(np.clip(img.data, 0.0, 1.0) * 255).astype(int)
    lines = ["P2" if img.C == 1 else "P3"]
    if comment:
        lines.append(f"# {comment}")
    lines += [f"{img.W} {img.H}", "255"]
    for row in q:
        lines.append(" ".join(str(v) for v in row.reshape(-1)))
    return "\n".join(lines) + "\n"


def write_pnm(path, img: FeatureMap, comment: str | None = None):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_pnm(img, comment))
