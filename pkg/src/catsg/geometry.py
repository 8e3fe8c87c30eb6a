"""Binary mask codec, grounding extraction and mask-adjacency relations.

RLE layout: alternating run lengths over the row-major flattened mask, the
first run counting background pixels (possibly zero). As text the runs are
decimal integers joined by commas, e.g. ``"3,4,93"``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import TYPE_CHECKING

import numpy as np
from .errors import DimensionMismatch, EmptyMask, MissingMask, SchemaError

if TYPE_CHECKING:
    from .ontology import Ontology
    from .scenegraph import FrameSceneGraph, Grounding, RelationInstance


@dataclass(frozen=True)
class Mask:
    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise SchemaError(f"mask dimensions must be positive, got {self.width}x{self.height}")
        if any(r < 0 for r in self.runs):
            raise SchemaError("negative run length")
        if sum(self.runs) != self.width * self.height:
            raise SchemaError(
                f"runs sum to {sum(self.runs)}, expected {self.width * self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def to_string(self) -> str:
        return ",".join(str(r) for r in self.runs)

    @classmethod
    def from_string(cls, text: str, width: int, height: int) -> "Mask":
        try:
            runs = tuple(int(tok) for tok in text.split(",")) if text else ()
        except ValueError as exc:
            raise SchemaError(f"malformed RLE string {text[:40]!r}") from exc
        return cls(width, height, runs)

    def decode(self) -> np.ndarray:
        return decode(self)


def encode(arr: np.ndarray) -> Mask:
    """Run-length encode a 2-D binary array (height x width)."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected 2-D mask, got shape {arr.shape}")
    height, width = arr.shape
    flat = arr.reshape(-1).astype(bool)
    # change points between consecutive pixels, bracketed by the frame ends
    padded = np.concatenate(([False], flat, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds)
    # a trailing zero-length background run appears when the mask ends on foreground
    if runs.size > 1 and runs[-1] == 0:
        runs = runs[:-1]
    return Mask(width, height, tuple(int(r) for r in runs))


def decode(mask: Mask) -> np.ndarray:
    values = np.zeros(len(mask.runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, mask.runs)
    return flat.reshape(mask.height, mask.width)


def grounding_from_mask(mask: Mask | np.ndarray) -> "Grounding":
    """Centroid, area fraction and tight box of the foreground, all normalized.

    A pixel (x, y) covers [x, x+1) x [y, y+1); centroids are taken at pixel
    centres, so a full-frame mask has its centroid at (0.5, 0.5).
    """
    from .scenegraph import Grounding

    arr = mask.decode() if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(arr)
    if xs.size == 0:
        raise EmptyMask("mask has no foreground pixels")
    height, width = arr.shape
    return Grounding(
        cx=float((xs.mean() + 0.5) / width),
        cy=float((ys.mean() + 0.5) / height),
        area=float(xs.size / (width * height)),
        bbox=(
            float(xs.min() / width),
            float(ys.min() / height),
            float((xs.max() + 1) / width),
            float((ys.max() + 1) / height),
        ),
    )


def _as_array(m: Mask | np.ndarray) -> np.ndarray:
    return m.decode() if isinstance(m, Mask) else np.asarray(m, dtype=bool)


def _dilate(arr: np.ndarray, reach: int) -> np.ndarray:
    """Square (Chebyshev) dilation by ``reach`` pixels, as separable sliding maxima."""
    h, w = arr.shape
    padded = np.zeros((h + 2 * reach, w + 2 * reach), dtype=bool)
    padded[reach:reach + h, reach:reach + w] = arr
    rows = np.zeros((h, w + 2 * reach), dtype=bool)
    for dy in range(2 * reach + 1):
        rows |= padded[dy:dy + h]
    out = np.zeros((h, w), dtype=bool)
    for dx in range(2 * reach + 1):
        out |= rows[:, dx:dx + w]
    return out


def masks_adjacent(a: Mask | np.ndarray, b: Mask | np.ndarray, gap: int = 0) -> bool:
    """True iff some foreground pixels of ``a`` and ``b`` lie within Chebyshev
    distance ``1 + gap`` of each other."""
    if gap < 0:
        raise ValueError("gap must be >= 0")
    arr_a, arr_b = _as_array(a), _as_array(b)
    if arr_a.shape != arr_b.shape:
        raise DimensionMismatch(f"mask shapes differ: {arr_a.shape} vs {arr_b.shape}")
    if not arr_a.any() or not arr_b.any():
        return False
    return bool(np.any(_dilate(arr_a, 1 + gap) & arr_b))


def infer_close_to(
    frame: "FrameSceneGraph", gap: int = 0, ontology: "Ontology | None" = None
) -> list["RelationInstance"]:
    """Symmetric close_to relations for every pair of entities with adjacent masks.

    Each unordered pair is emitted as two directed records, lower instance id
    as subject first.
    """
    from .ontology import default_ontology
    from .scenegraph import RelationInstance

    onto = ontology or default_ontology()
    pred = onto.close_to.id
    ents = sorted(frame.entities, key=lambda e: e.instance_id)
    for e in ents:
        if e.mask is None:
            raise MissingMask(f"entity {e.instance_id} in frame {frame.frame_idx} has no mask")
    shapes = {e.mask.shape for e in ents}
    if len(shapes) > 1:
        raise DimensionMismatch(f"frame {frame.frame_idx} has masks of shapes {shapes}")

    out: list[RelationInstance] = []
    for i, j in adjacent_pairs([e.mask.decode() for e in ents], gap):
        a, b = ents[i].instance_id, ents[j].instance_id
        out.append(RelationInstance(a, b, pred))
        out.append(RelationInstance(b, a, pred))
    return out


def adjacent_pairs(arrays: list[np.ndarray], gap: int = 0) -> list[tuple[int, int]]:
    """Index pairs ``(i, j)``, ``i < j``, of masks within Chebyshev distance ``1 + gap``."""
    reach = 1 + gap
    boxes = []
    for arr in arrays:
        ys = np.flatnonzero(arr.any(axis=1))
        xs = np.flatnonzero(arr.any(axis=0))
        boxes.append(None if xs.size == 0 else (xs[0], ys[0], xs[-1], ys[-1]))
    pairs = []
    for i, j in combinations(range(len(arrays)), 2):
        bi, bj = boxes[i], boxes[j]
        if bi is None or bj is None:
            continue
        # box separation lower-bounds the pixel Chebyshev distance
        if bi[0] - bj[2] > reach or bj[0] - bi[2] > reach \
                or bi[1] - bj[3] > reach or bj[1] - bi[3] > reach:
            continue
        # only the overlap of the grown box of i with the box of j can hold a witness
        x0, y0 = max(bi[0] - reach, bj[0]), max(bi[1] - reach, bj[1])
        x1, y1 = min(bi[2] + reach, bj[2]), min(bi[3] + reach, bj[3])
        ax0, ay0 = max(x0 - reach, 0), max(y0 - reach, 0)
        win_a = arrays[i][ay0:y1 + reach + 1, ax0:x1 + reach + 1]
        grown = _dilate(win_a, reach)[y0 - ay0:y1 - ay0 + 1, x0 - ax0:x1 - ax0 + 1]
        if np.any(grown & arrays[j][y0:y1 + 1, x0:x1 + 1]):
            pairs.append((i, j))
    return pairs


@lru_cache(maxsize=8)
def _pixel_centres(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs + 0.5, ys + 0.5


def rasterize_ellipse(cx: float, cy: float, rx: float, ry: float,
                      width: int, height: int) -> np.ndarray:
    """Binary ellipse in pixel units; centre and radii are in pixels."""
    xs, ys = _pixel_centres(width, height)
    rx, ry = max(rx, 0.5), max(ry, 0.5)
    out = np.zeros((height, width), dtype=bool)
    x0, x1 = max(int(cx - rx) - 1, 0), min(int(cx + rx) + 2, width)
    y0, y1 = max(int(cy - ry) - 1, 0), min(int(cy + ry) + 2, height)
    if x0 < x1 and y0 < y1:
        win = (slice(y0, y1), slice(x0, x1))
        out[win] = ((xs[win] - cx) / rx) ** 2 + ((ys[win] - cy) / ry) ** 2 <= 1.0
    return out
