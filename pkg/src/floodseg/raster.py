"""Grid data model, bit-exact raster formats, padding, patching, stitching.

Grids are planar (channel-major) arrays of float32 or int8 cell values,
frozen after construction so they can be shared freely. All operations
here are pure functions.

File formats:
  FGRD (magic ``FGRD1\\n``): little-endian header of dtype code
    (0 = float32, 1 = int8), u32 width, u32 height, u32 channels,
    followed by the planar row-major payload.
  Flood-map PPM: binary P6, pixels with flood probability >= 0.5 pure
    red (255,0,0), the rest pure blue (0,0,255).
"""

import struct
from dataclasses import dataclass

import numpy as np

_DTYPE_NAMES = {np.dtype(np.float32): "float32", np.dtype(np.int8): "int8"}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int8): 1}
_CODE_DTYPES = {0: np.float32, 1: np.int8}

FGRD_MAGIC = b"FGRD1\n"


class Grid:
    """A frozen W x H x channels raster; data laid out as (channels, height, width)."""

    __slots__ = ("data",)

    def __init__(self, data):
        a = np.asarray(data)
        if a.ndim == 2:
            a = a[None, :, :]
        if a.ndim != 3:
            raise ValueError("grid data must be 2D or (channels, height, width)")
        if a.dtype not in _DTYPE_NAMES:
            raise ValueError(f"unsupported grid dtype {a.dtype}; use float32 or int8")
        if a.shape[0] < 1 or a.shape[1] < 1 or a.shape[2] < 1:
            raise ValueError("grid dimensions must be >= 1")
        a = np.ascontiguousarray(a)
        a.setflags(write=False)
        self.data = a

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def dtype(self):
        return _DTYPE_NAMES[self.data.dtype]

    def plane(self, c=0):
        """One channel as a read-only 2D array view."""
        return self.data[c]

    def __repr__(self):
        return f"Grid({self.width}x{self.height}x{self.channels}, {self.dtype})"


class ElevationMap:
    """Single-channel float32 grid of terrain heights in meters; all finite."""

    __slots__ = ("grid",)

    def __init__(self, data):
        g = data if isinstance(data, Grid) else Grid(np.asarray(data, dtype=np.float32))
        if g.channels != 1 or g.dtype != "float32":
            raise ValueError("elevation map must be single-channel float32")
        if not np.isfinite(g.data).all():
            raise ValueError("elevation map contains non-finite values")
        self.grid = g

    @property
    def values(self):
        return self.grid.data[0]

    @property
    def width(self):
        return self.grid.width

    @property
    def height(self):
        return self.grid.height


class LabelMap:
    """Single-channel int8 grid of per-pixel ground truth.

    +1 flooded, -1 dry, 0 unlabeled.
    """

    __slots__ = ("grid",)

    def __init__(self, data):
        g = data if isinstance(data, Grid) else Grid(np.asarray(data, dtype=np.int8))
        if g.channels != 1 or g.dtype != "int8":
            raise ValueError("label map must be single-channel int8")
        if not np.isin(g.data, (-1, 0, 1)).all():
            raise ValueError("labels must be in {-1, 0, +1}")
        self.grid = g

    @property
    def values(self):
        return self.grid.data[0]

    @property
    def width(self):
        return self.grid.width

    @property
    def height(self):
        return self.grid.height


@dataclass(frozen=True)
class PatchLayout:
    """Minimal reflection padding taking an extent to a patch-size multiple.

    Padding splits as evenly as possible; the odd pixel goes to the
    right/bottom side.
    """

    width: int
    height: int
    patch_size: int
    pad_left: int
    pad_right: int
    pad_top: int
    pad_bottom: int
    rows: int
    cols: int

    @classmethod
    def for_extent(cls, width, height, patch_size=128):
        def split(d):
            total = (-d) % patch_size
            return total // 2, total - total // 2

        left, right = split(width)
        top, bottom = split(height)
        return cls(
            width=width,
            height=height,
            patch_size=patch_size,
            pad_left=left,
            pad_right=right,
            pad_top=top,
            pad_bottom=bottom,
            rows=(height + top + bottom) // patch_size,
            cols=(width + left + right) // patch_size,
        )

    @property
    def padded_width(self):
        return self.width + self.pad_left + self.pad_right

    @property
    def padded_height(self):
        return self.height + self.pad_top + self.pad_bottom

    @property
    def n_patches(self):
        return self.rows * self.cols


def reflect_pad(g, layout):
    """Pad a grid by mirroring about its boundary (boundary not duplicated)."""
    if g.width != layout.width or g.height != layout.height:
        raise ValueError("layout extent does not match grid")
    if (
        layout.pad_left >= g.width
        or layout.pad_right >= g.width
        or layout.pad_top >= g.height
        or layout.pad_bottom >= g.height
    ):
        raise ValueError("reflection exceeds extent")
    padded = np.pad(
        g.data,
        ((0, 0), (layout.pad_top, layout.pad_bottom), (layout.pad_left, layout.pad_right)),
        mode="reflect",
    )
    return Grid(padded)


def neighbor_pad_1(g):
    """Grow a grid by one reflected pixel on every side (8-neighborhood support)."""
    if g.width < 2 or g.height < 2:
        raise ValueError("reflection exceeds extent: grid must be at least 2x2")
    return Grid(np.pad(g.data, ((0, 0), (1, 1), (1, 1)), mode="reflect"))


def reflect_indices(n):
    """Source index for each position of a length n+2 one-pixel reflection pad.

    Degenerate n == 1 reflects onto itself.
    """
    idx = np.arange(-1, n + 1)
    idx[0] = 1 if n > 1 else 0
    idx[-1] = n - 2 if n > 1 else 0
    return idx


def split_patches(g, layout):
    """Cut a padded grid into rows x cols patches, row-major."""
    p = layout.patch_size
    if g.height != layout.padded_height or g.width != layout.padded_width:
        raise ValueError(
            f"grid {g.width}x{g.height} is not padded to layout "
            f"{layout.padded_width}x{layout.padded_height}"
        )
    if g.height % p or g.width % p:
        raise ValueError("padded dims not divisible by patch size")
    out = []
    for r in range(layout.rows):
        for c in range(layout.cols):
            out.append(Grid(g.data[:, r * p : (r + 1) * p, c * p : (c + 1) * p]))
    return out


def stitch_patches(patches, layout):
    """Inverse of split_patches, cropped back to the original extent."""
    p = layout.patch_size
    if len(patches) != layout.n_patches:
        raise ValueError(
            f"expected {layout.n_patches} patches, got {len(patches)}"
        )
    ch = patches[0].channels
    dt = patches[0].data.dtype
    for q in patches:
        if q.width != p or q.height != p or q.channels != ch:
            raise ValueError("patch dims/channels mismatch")
    full = np.empty((ch, layout.padded_height, layout.padded_width), dtype=dt)
    for r in range(layout.rows):
        for c in range(layout.cols):
            full[:, r * p : (r + 1) * p, c * p : (c + 1) * p] = patches[
                r * layout.cols + c
            ].data
    crop = full[
        :,
        layout.pad_top : layout.pad_top + layout.height,
        layout.pad_left : layout.pad_left + layout.width,
    ]
    return Grid(crop)


def write_grid(g, path):
    with open(path, "wb") as fh:
        fh.write(FGRD_MAGIC)
        fh.write(struct.pack("<B", _DTYPE_CODES[g.data.dtype]))
        fh.write(struct.pack("<III", g.width, g.height, g.channels))
        fh.write(g.data.tobytes())


def read_grid(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != FGRD_MAGIC:
        raise ValueError(f"bad magic in {path}")
    if len(blob) < 19:
        raise ValueError(f"truncated header in {path}")
    code = blob[6]
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code} in {path}")
    w, h, c = struct.unpack("<III", blob[7:19])
    dt = np.dtype(_CODE_DTYPES[code])
    need = w * h * c * dt.itemsize
    payload = blob[19:]
    if len(payload) < need:
        raise ValueError(f"truncated payload in {path}: need {need}, have {len(payload)}")
    if len(payload) > need:
        raise ValueError(f"trailing bytes in {path}")
    arr = np.frombuffer(payload, dtype=dt.newbyteorder("<")).reshape(c, h, w)
    return Grid(arr.astype(dt))


def minmax_normalize(e):
    """Rescale elevations to [0,1]; a constant map becomes all zeros."""
    if isinstance(e, ElevationMap):
        vals = e.values
    else:
        vals = np.asarray(e, dtype=np.float32)
    return Grid(minmax_scale(vals).astype(np.float32))


def minmax_scale(a):
    """Array-level min-max scaling with the constant-input-to-zeros rule."""
    a = np.asarray(a)
    lo = a.min()
    hi = a.max()
    if hi == lo:
        return np.zeros_like(a, dtype=np.float64 if a.dtype == np.float64 else np.float32)
    return ((a - lo) / (hi - lo)).astype(
        np.float64 if a.dtype == np.float64 else np.float32
    )


def write_flood_ppm(prob_flood, path):
    """Render a flood-probability plane as a red/blue P6 image."""
    p = np.asarray(prob_flood)
    if p.ndim != 2:
        raise ValueError("expected a single probability plane")
    h, w = p.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    flood = p >= 0.5
    rgb[flood] = (255, 0, 0)
    rgb[~flood] = (0, 0, 255)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
