"""Image value types, netpbm codecs, contrast preprocessing and channel histograms.

GrayImage holds retinal vessel maps (vessel probability = PIV/255), ColorImage
holds fundus photographs.  Files on disk are binary PGM (P5) and PPM (P6) with
maxval 255, written in the canonical header form "P{5|6}\\n<w> <h>\\n255\\n".

References
--------------
[1] Netpbm format description (pgm(5), ppm(5))
[2] Zuiderveld, contrast limited adaptive histogram equalization, Graphics Gems IV
"""
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAXVAL = 255
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
CHANNEL_NAMES = ('red', 'green', 'blue')


class NetpbmError(ValueError):
    """Base class for PGM/PPM parse errors"""


class HeaderError(NetpbmError):
    pass


class MaxvalError(NetpbmError):
    pass


class TruncatedPayloadError(NetpbmError):
    pass


class ExcessPayloadError(NetpbmError):
    pass


class WrongFormatError(NetpbmError):
    pass


class GeometryError(ValueError):
    pass


def _as_pixels(values, name='pixels'):
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError("%s must be a 2-D array, got shape %s" % (name, arr.shape))
    if arr.size and (arr.min() < 0 or arr.max() > MAXVAL):
        raise ValueError("%s out of range [0, 255]" % name)
    return np.ascontiguousarray(arr, dtype=np.uint8)


class GrayImage:
    """8-bit single channel image, rows x columns"""

    def __init__(self, pixels):
        self.pixels = _as_pixels(pixels)

    @classmethod
    def from_values(cls, width: int, height: int, values: Sequence[int]):
        values = np.asarray(values, dtype=np.int64)
        if values.size != width * height:
            raise ValueError("expected %d pixels for %dx%d, got %d"
                             % (width * height, width, height, values.size))
        return cls(values.reshape(height, width))

    @classmethod
    def zeros(cls, width: int, height: int):
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def nnz(self) -> int:
        return int(np.count_nonzero(self.pixels))

    def probabilities(self):
        """Vessel probability per pixel"""
        return self.pixels / float(MAXVAL)

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return "GrayImage(%dx%d, nnz=%d)" % (self.width, self.height, self.nnz())


class ColorImage:
    """8-bit RGB image stored as three planar channels"""

    def __init__(self, red, green, blue):
        self.red = _as_pixels(red, 'red')
        self.green = _as_pixels(green, 'green')
        self.blue = _as_pixels(blue, 'blue')
        if not (self.red.shape == self.green.shape == self.blue.shape):
            raise ValueError("channel shapes differ: %s %s %s"
                             % (self.red.shape, self.green.shape, self.blue.shape))

    @classmethod
    def from_planes(cls, planes):
        planes = np.asarray(planes)
        if planes.ndim != 3 or planes.shape[0] != 3:
            raise ValueError("expected planes of shape (3, h, w), got %s" % (planes.shape,))
        return cls(planes[0], planes[1], planes[2])

    @property
    def width(self) -> int:
        return self.red.shape[1]

    @property
    def height(self) -> int:
        return self.red.shape[0]

    @property
    def channels(self):
        return (self.red, self.green, self.blue)

    def planes(self):
        return np.stack(self.channels)

    def __eq__(self, other):
        if not isinstance(other, ColorImage):
            return NotImplemented
        return all(a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip(self.channels, other.channels))

    def __repr__(self):
        return "ColorImage(%dx%d)" % (self.width, self.height)


class ChannelHistogram:
    """256-bin intensity counts of one channel, pooled over a group of images"""

    def __init__(self, channel: str, group_label: str, bin_counts):
        counts = np.asarray(bin_counts, dtype=np.int64)
        if counts.shape != (MAXVAL + 1,) or (counts < 0).any():
            raise ValueError("bin_counts must be 256 non-negative integers")
        self.channel = channel
        self.group_label = group_label
        self.bin_counts = counts

    @property
    def total(self) -> int:
        return int(self.bin_counts.sum())

    def mean_bin(self) -> float:
        if self.total == 0:
            return float('nan')
        return float(np.dot(np.arange(MAXVAL + 1), self.bin_counts) / self.total)

    def __repr__(self):
        return "ChannelHistogram(%s, %s, total=%d)" % (self.channel, self.group_label, self.total)


# ---------------------------------------------------------------------------
# netpbm codecs
# ---------------------------------------------------------------------------

_WHITESPACE = b' \t\n\r\v\f'


def _next_token(data: bytes, pos: int):
    """Return (token, position after token); skips whitespace and # comments"""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c in (b'#',):
            end = data.find(b'\n', pos)
            if end < 0:
                raise HeaderError("unterminated comment in header")
            pos = end + 1
        elif c in _WHITESPACE and c != b'':
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos:pos + 1] not in _WHITESPACE and data[pos:pos + 1] != b'#':
        pos += 1
    if start == pos:
        raise HeaderError("header ended early")
    return data[start:pos], pos


def _parse_netpbm(data: bytes, magic: bytes, channels: int):
    if len(data) < 2:
        raise HeaderError("file too short for a netpbm header")
    if data[:2] != magic:
        if data[:1] == b'P' and data[1:2].isdigit():
            raise WrongFormatError("expected %s file, found %s" % (magic.decode(), data[:2].decode()))
        raise HeaderError("missing netpbm magic number")

    fields = []
    pos = 2
    for name in ('width', 'height', 'maxval'):
        token, pos = _next_token(data, pos)
        if not token.isdigit():
            raise HeaderError("%s is not a positive integer: %r" % (name, token))
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise HeaderError("image dimensions must be positive, got %dx%d" % (width, height))
    if maxval != MAXVAL:
        raise MaxvalError("maxval must be 255, got %d" % maxval)
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise HeaderError("missing whitespace before payload")
    pos += 1

    expected = width * height * channels
    payload = data[pos:]
    if len(payload) < expected:
        raise TruncatedPayloadError("payload holds %d bytes, header declares %d"
                                    % (len(payload), expected))
    if len(payload) > expected:
        raise ExcessPayloadError("payload holds %d bytes beyond the declared %d"
                                 % (len(payload) - expected, expected))
    return width, height, np.frombuffer(payload, dtype=np.uint8)


def _header(magic: str, width: int, height: int) -> bytes:
    return ("%s\n%d %d\n%d\n" % (magic, width, height, MAXVAL)).encode('ascii')


def read_gray(path) -> GrayImage:
    data = Path(path).read_bytes()
    width, height, payload = _parse_netpbm(data, b'P5', 1)
    logger.debug("read P5 %s (%dx%d)", path, width, height)
    return GrayImage(payload.reshape(height, width).copy())


def write_gray(img: GrayImage, path) -> None:
    Path(path).write_bytes(_header('P5', img.width, img.height) + img.pixels.tobytes())


def read_color(path) -> ColorImage:
    data = Path(path).read_bytes()
    width, height, payload = _parse_netpbm(data, b'P6', 3)
    logger.debug("read P6 %s (%dx%d)", path, width, height)
    interleaved = payload.reshape(height, width, 3)
    return ColorImage(interleaved[:, :, 0], interleaved[:, :, 1], interleaved[:, :, 2])


def write_color(img: ColorImage, path) -> None:
    interleaved = np.stack(img.channels, axis=-1)
    Path(path).write_bytes(_header('P6', img.width, img.height) + interleaved.tobytes())


# ---------------------------------------------------------------------------
# intensity operations
# ---------------------------------------------------------------------------

def round_half_up(values):
    """Round to nearest integer with .5 going up; numpy's round is half-to-even"""
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


def to_gray(img: ColorImage) -> GrayImage:
    """ITU-R 601 luma"""
    wr, wg, wb = LUMA_WEIGHTS
    luma = wr * img.red.astype(np.float64) + wg * img.green + wb * img.blue
    return GrayImage(np.clip(round_half_up(luma), 0, MAXVAL))


def _tile_mappings(padded, tiles, clip_limit):
    ty, tx = tiles
    th = padded.shape[0] // ty
    tw = padded.shape[1] // tx
    tile_pixels = th * tw
    clip = clip_limit * tile_pixels

    blocks = padded.reshape(ty, th, tx, tw).transpose(0, 2, 1, 3).reshape(ty, tx, tile_pixels)
    mappings = np.empty((ty, tx, MAXVAL + 1), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            hist = np.bincount(blocks[i, j], minlength=MAXVAL + 1).astype(np.float64)
            excess = np.maximum(hist - clip, 0.0).sum()
            if excess > 0:
                hist = np.minimum(hist, clip) + excess / (MAXVAL + 1)
            cdf = np.cumsum(hist)
            cdf_min = cdf[np.flatnonzero(hist)[0]]
            span = cdf[-1] - cdf_min
            if span <= 0:
                # single-level tile
                mappings[i, j] = np.arange(MAXVAL + 1)
            else:
                mappings[i, j] = np.clip(MAXVAL * (cdf - cdf_min) / span, 0, MAXVAL)
    return mappings, th, tw


def _axis_weights(size, tile_size, n_tiles):
    centre = (np.arange(size) + 0.5) / tile_size - 0.5
    centre = np.clip(centre, 0, n_tiles - 1)
    lo = np.floor(centre).astype(np.int64)
    hi = np.minimum(lo + 1, n_tiles - 1)
    return lo, hi, centre - lo


def clahe(img: GrayImage, tiles=(8, 8), clip_limit: float = 0.01) -> GrayImage:
    """Contrast limited adaptive histogram equalization

    tiles: (rows, columns) of the contextual region grid
    clip_limit: bin ceiling as a fraction of the tile pixel count; excess mass is
        spread uniformly over all 256 bins
    """
    ty, tx = int(tiles[0]), int(tiles[1])
    if ty < 1 or tx < 1:
        raise GeometryError("tile grid must be at least 1x1, got %sx%s" % (ty, tx))
    if not 0 < clip_limit <= 1:
        raise ValueError("clip_limit must lie in (0, 1], got %s" % clip_limit)
    if img.height < ty or img.width < tx:
        raise GeometryError("%dx%d image is smaller than one tile of a %dx%d grid"
                            % (img.width, img.height, tx, ty))

    th = -(-img.height // ty)
    tw = -(-img.width // tx)
    pad_y = th * ty - img.height
    pad_x = tw * tx - img.width
    padded = np.pad(img.pixels, ((0, pad_y), (0, pad_x)), mode='reflect')
    mappings, th, tw = _tile_mappings(padded, (ty, tx), clip_limit)

    y0, y1, wy = _axis_weights(img.height, th, ty)
    x0, x1, wx = _axis_weights(img.width, tw, tx)
    v = img.pixels.astype(np.int64)
    Y0, X0 = np.meshgrid(y0, x0, indexing='ij')
    Y1, X1 = np.meshgrid(y1, x1, indexing='ij')
    WY, WX = np.meshgrid(wy, wx, indexing='ij')

    ul = mappings[Y0, X0, v]
    ur = mappings[Y0, X1, v]
    bl = mappings[Y1, X0, v]
    br = mappings[Y1, X1, v]
    # lerp form keeps equal mappings exact
    top = ul + WX * (ur - ul)
    bottom = bl + WX * (br - bl)
    out = top + WY * (bottom - top)
    logger.debug("clahe: %dx%d tiles of %dx%d px, clip %.4f", tx, ty, tw, th, clip_limit)
    return GrayImage(np.clip(round_half_up(out), 0, MAXVAL))


def clahe_color(img: ColorImage, tiles=(8, 8), clip_limit: float = 0.01) -> ColorImage:
    """Luma CLAHE with the RGB channels rescaled by the per-pixel luma gain"""
    luma = to_gray(img)
    equalized = clahe(luma, tiles, clip_limit)
    gain = (equalized.pixels.astype(np.float64) + 1.0) / (luma.pixels.astype(np.float64) + 1.0)
    planes = img.planes().astype(np.float64) * gain
    return ColorImage.from_planes(np.clip(round_half_up(planes), 0, MAXVAL))


def channel_histograms(images: Iterable[ColorImage], group: str):
    """Per channel 256-bin counts pooled over images; returns (red, green, blue)"""
    images = list(images)
    if not images:
        raise ValueError("channel_histograms needs at least one image")
    totals = np.zeros((3, MAXVAL + 1), dtype=np.int64)
    for img in images:
        for c, channel in enumerate(img.channels):
            totals[c] += np.bincount(channel.ravel(), minlength=MAXVAL + 1)
    logger.debug("channel histograms for %s over %d images", group, len(images))
    return tuple(ChannelHistogram(name, group, totals[c]) for c, name in enumerate(CHANNEL_NAMES))
