"""Information-ablation operators on retinal vessel maps, resizing and augmentation.

The ablation order follows the study pipeline: threshold, then (optionally)
binarize, then (optionally) skeletonize.
"""
import logging
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field

from rvm_audit.imagecore import MAXVAL, GrayImage, round_half_up

logger = logging.getLogger(__name__)

Variant = Literal['grayscale', 'binarized', 'skeletonized']
VARIANTS = ('grayscale', 'binarized', 'skeletonized')


class NonBinaryImageError(ValueError):
    pass


class ThresholdSpec(BaseModel):
    lower: int = Field(default=0, ge=0, le=256,
                       description="Keep pixels with PIV >= lower; 256 zeroes everything")
    upper: Optional[int] = Field(default=None, ge=0, le=255,
                                 description="If set, zero pixels with PIV > upper")

    @property
    def label(self) -> str:
        if self.upper is None:
            return "ge%d" % self.lower
        if self.lower == 0:
            return "le%d" % self.upper
        return "%dto%d" % (self.lower, self.upper)


class AugmentSpec(BaseModel):
    flip_h_prob: float = Field(default=0.5, ge=0, le=1, description="Horizontal flip probability")
    flip_v_prob: float = Field(default=0.5, ge=0, le=1, description="Vertical flip probability")
    rot90_prob: float = Field(default=0.5, ge=0, le=1,
                              description="Probability of rotating by k*90 degrees, k in {1,2,3}")
    zoom_prob: float = Field(default=0.0, ge=0, le=1, description="Random zoom-in probability")
    max_zoom: float = Field(default=1.2, ge=1, description="Largest zoom factor")
    seed: int = Field(default=0, description="Seed of the augmentation stream")

    def rng(self):
        return np.random.default_rng(self.seed)


NO_AUGMENT = AugmentSpec(flip_h_prob=0, flip_v_prob=0, rot90_prob=0, zoom_prob=0)


# ---------------------------------------------------------------------------
# ablation operators
# ---------------------------------------------------------------------------

def threshold(img: GrayImage, spec: ThresholdSpec) -> GrayImage:
    keep = img.pixels >= spec.lower
    if spec.upper is not None:
        keep &= img.pixels <= spec.upper
    return GrayImage(np.where(keep, img.pixels, 0))


def binarize(img: GrayImage) -> GrayImage:
    return GrayImage(np.where(img.pixels > 0, MAXVAL, 0))


def is_binary(img: GrayImage) -> bool:
    return bool(np.isin(img.pixels, (0, MAXVAL)).all())


# 8-neighbourhood in circular order: E, NE, N, NW, W, SW, S, SE (row axis points down)
_RING = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))
_EAST, _NORTH, _WEST, _SOUTH = 0, 2, 4, 6


def _connectivity_number(code: int) -> int:
    """Yokoi connectivity number for 8-connected foreground"""
    bg = [1 - ((code >> k) & 1) for k in range(8)]
    return sum(bg[k] - bg[k] * bg[(k + 1) % 8] * bg[(k + 2) % 8] for k in (0, 2, 4, 6))


# a pixel is simple when deleting it changes neither the 8-connected foreground
# components nor the 4-connected background components
_SIMPLE = np.array([_connectivity_number(c) == 1 for c in range(256)])
_NEIGHBOURS = np.array([bin(c).count('1') for c in range(256)])
_DELETABLE = _SIMPLE & (_NEIGHBOURS >= 2)


def _thinning_pass(fg, direction, parity):
    """Delete the deletable border pixels of one direction inside one 2x2 subfield

    Pixels of a subfield are never 8-adjacent, so each deletion leaves every
    other candidate's 3x3 window untouched and parallel deletion equals
    sequential deletion.
    """
    pr, pc = parity
    dr, dc = _RING[direction]
    h, w = fg.shape[0] - 2, fg.shape[1] - 2
    core = fg[1:h + 1, 1:w + 1][pr::2, pc::2]
    outside = fg[1 + dr:h + 1 + dr, 1 + dc:w + 1 + dc][pr::2, pc::2]
    rr, cc = np.nonzero(core & ~outside)
    if rr.size == 0:
        return 0
    rr = rr * 2 + pr + 1
    cc = cc * 2 + pc + 1
    code = np.zeros(rr.size, dtype=np.int64)
    for k, (nr, nc) in enumerate(_RING):
        code |= fg[rr + nr, cc + nc].astype(np.int64) << k
    delete = _DELETABLE[code]
    fg[rr[delete], cc[delete]] = False
    return int(delete.sum())


def skeletonize(img: GrayImage) -> GrayImage:
    """Topology-preserving thinning of a binary vessel mask

    Directional subiterations (N, S, E, W) over four subfields repeat until a full
    cycle deletes nothing.  End points (exactly one foreground neighbour) are kept
    so branches keep their length.
    """
    if not is_binary(img):
        raise NonBinaryImageError("skeletonize requires PIVs in {0, 255}")
    fg = np.pad(img.pixels > 0, 1)
    cycles = 0
    while True:
        removed = 0
        for direction in (_NORTH, _SOUTH, _EAST, _WEST):
            for parity in ((0, 0), (0, 1), (1, 0), (1, 1)):
                removed += _thinning_pass(fg, direction, parity)
        cycles += 1
        if removed == 0:
            break
    logger.debug("skeletonize: fixed point after %d cycles", cycles)
    return GrayImage(np.where(fg[1:-1, 1:-1], MAXVAL, 0))


def apply_variant(img: GrayImage, variant: str, spec: ThresholdSpec) -> GrayImage:
    """threshold -> binarize -> skeletonize, stopping where the variant asks"""
    if variant not in VARIANTS:
        raise ValueError("unknown variant %r, expected one of %s" % (variant, VARIANTS))
    out = threshold(img, spec)
    if variant in ('binarized', 'skeletonized'):
        out = binarize(out)
    if variant == 'skeletonized':
        out = skeletonize(out)
    return out


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _axis(n_in, n_out):
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear(arr, out_h: int, out_w: int):
    """Half-pixel-centre bilinear resampling over the last two axes (float output)"""
    arr = np.asarray(arr, dtype=np.float64)
    y0, y1, wy = _axis(arr.shape[-2], out_h)
    x0, x1, wx = _axis(arr.shape[-1], out_w)
    r0 = arr[..., y0, :]
    r1 = arr[..., y1, :]
    top = r0[..., x0] + wx * (r0[..., x1] - r0[..., x0])
    bottom = r1[..., x0] + wx * (r1[..., x1] - r1[..., x0])
    return top + wy[:, None] * (bottom - top)


def resize(img: GrayImage, w: int, h: int) -> GrayImage:
    if w < 1 or h < 1:
        raise ValueError("target size must be at least 1x1, got %dx%d" % (w, h))
    if (w, h) == (img.width, img.height):
        return GrayImage(img.pixels.copy())
    return GrayImage(np.clip(round_half_up(bilinear(img.pixels, h, w)), 0, MAXVAL))


def augment_array(arr, spec: AugmentSpec, draw: np.random.Generator):
    """Random flips, quarter-turn rotation and zoom-in over the last two axes

    Exactly seven variates are consumed per call whatever the probabilities, so
    the stream position only depends on how many images came before.
    """
    u_h, u_v, u_r = draw.random(3)
    k = int(draw.integers(1, 4))
    u_z, u_scale, u_y, u_x = draw.random(4)

    out = arr
    if u_h < spec.flip_h_prob:
        out = out[..., :, ::-1]
    if u_v < spec.flip_v_prob:
        out = out[..., ::-1, :]
    if u_r < spec.rot90_prob:
        out = np.rot90(out, k, axes=(-2, -1))
    if u_z < spec.zoom_prob:
        h, w = out.shape[-2:]
        zoom = 1.0 + u_scale * (spec.max_zoom - 1.0)
        ch = max(1, int(round(h / zoom)))
        cw = max(1, int(round(w / zoom)))
        top = int(u_y * (h - ch + 1))
        left = int(u_x * (w - cw + 1))
        out = bilinear(out[..., top:top + ch, left:left + cw], h, w)
    return np.ascontiguousarray(out)


def augment(img: GrayImage, spec: AugmentSpec, draw: np.random.Generator) -> GrayImage:
    out = augment_array(img.pixels, spec, draw)
    if out.dtype != np.uint8:
        out = np.clip(round_half_up(out), 0, MAXVAL)
    return GrayImage(out)
