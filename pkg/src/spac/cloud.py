"""Point cloud data model: PLY I/O, color spaces, set operations, normals, PSNR.

Geometry is integer voxel coordinates on a ``[0, 2**bitdepth)`` grid and is
always unique per cloud; colors are ``uint8`` RGB or real-valued YUV.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ColorspaceMismatch,
    CoordinateRange,
    DuplicatePoints,
    GeometryMismatch,
    MalformedPly,
    MissingAttribute,
)

RGB8 = "RGB8"
YUV = "YUV"

# BT.709 full-range, 128-centered chroma.
_KR, _KG, _KB = 0.2126, 0.7152, 0.0722
PSNR_CAP_DB = 100.0


@dataclass
class PointCloud:
    """Paired voxel geometry and per-point colors.

    ``geometry`` is ``(M, 3) int64``, unique rows, each in ``[0, 2**bitdepth)``.
    ``colors`` is ``(M, 3)``: ``uint8`` in RGB8 mode, ``float64`` in YUV mode.
    """

    geometry: np.ndarray
    colors: np.ndarray
    bitdepth: int = 10
    colorspace: str = RGB8

    def __post_init__(self):
        self.geometry = np.atleast_2d(np.asarray(self.geometry, dtype=np.int64))
        if self.geometry.size == 0:
            self.geometry = self.geometry.reshape(0, 3)
        if self.geometry.ndim != 2 or self.geometry.shape[1] != 3:
            raise ValueError(f"geometry must be (M, 3), got {self.geometry.shape}")
        if self.colorspace == RGB8:
            cols = np.asarray(self.colors)
            if cols.size and (cols.min() < 0 or cols.max() > 255):
                raise ValueError("RGB8 channel values must lie in [0, 255]")
            self.colors = cols.astype(np.uint8).reshape(-1, 3)
        elif self.colorspace == YUV:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        else:
            raise ValueError(f"unknown colorspace {self.colorspace!r}")
        if len(self.colors) != len(self.geometry):
            raise ValueError("geometry and colors must have equal point counts")
        if not 8 <= self.bitdepth <= 14:
            raise ValueError(f"bitdepth must be in [8, 14], got {self.bitdepth}")
        if self.geometry.size:
            if self.geometry.min() < 0 or self.geometry.max() >= (1 << self.bitdepth):
                raise CoordinateRange(
                    f"coordinates outside [0, 2^{self.bitdepth})"
                )
            if len(np.unique(self.geometry, axis=0)) != len(self.geometry):
                raise DuplicatePoints("duplicate voxel coordinates")

    def __len__(self) -> int:
        return len(self.geometry)

    def take(self, indices) -> "PointCloud":
        """Sub-cloud at ``indices``, geometry and colors copied verbatim."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
            raise IndexError("index out of range")
        return PointCloud(
            self.geometry[idx].copy(), self.colors[idx].copy(),
            self.bitdepth, self.colorspace,
        )


@dataclass
class NormalField:
    """Per-point unit normals with a degenerate-neighborhood flag."""

    normals: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.normals), dtype=bool)
        norms = np.linalg.norm(self.normals, axis=1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("normals must be unit length within 1e-6")


def _coord_keys(geometry: np.ndarray) -> np.ndarray:
    """Pack (x, y, z) into a single sortable int64 key (bitdepth <= 14)."""
    g = geometry.astype(np.int64)
    return (g[:, 0] << 42) | (g[:, 1] << 21) | g[:, 2]


# ---------------------------------------------------------------------------
# PLY I/O

_PLY_SCALAR = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def load_ply(path, bitdepth: int = 10, merge_duplicates: bool = False) -> PointCloud:
    """Load a PLY file with x,y,z and red,green,blue vertex properties.

    Fractional coordinates are rounded half to even. Duplicate coordinates
    raise unless ``merge_duplicates`` is set, in which case colors are merged
    by mean (rounded).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    head_end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or head_end < 0:
        raise MalformedPly(f"{path}: not a PLY file")
    head_end = raw.index(b"\n", head_end) + 1
    header = raw[:head_end].decode("ascii", errors="replace")

    fmt = None
    count = None
    props = []  # (name, struct code) in declaration order
    in_vertex = False
    for line in header.splitlines():
        tok = line.strip().split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise MalformedPly(f"{path}: list property in vertex element")
            if tok[1] not in _PLY_SCALAR:
                raise MalformedPly(f"{path}: unknown property type {tok[1]}")
            props.append((tok[2], _PLY_SCALAR[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedPly(f"{path}: unsupported format {fmt!r}")
    if count is None:
        raise MalformedPly(f"{path}: no vertex element")
    names = [p[0] for p in props]
    for req in ("x", "y", "z", "red", "green", "blue"):
        if req not in names:
            raise MissingAttribute(f"{path}: missing vertex property {req!r}")

    if fmt == "ascii":
        body = raw[head_end:].decode("ascii")
        values = body.split()
        need = count * len(props)
        if len(values) < need:
            raise MalformedPly(f"{path}: expected {need} values, got {len(values)}")
        table = np.array(values[:need], dtype=np.float64).reshape(count, len(props))
    else:
        rec = struct.Struct("<" + "".join(code for _, code in props))
        need = count * rec.size
        payload = raw[head_end:head_end + need]
        if len(payload) < need:
            raise MalformedPly(f"{path}: truncated binary payload")
        table = np.empty((count, len(props)), dtype=np.float64)
        for i, row in enumerate(rec.iter_unpack(payload)):
            table[i] = row

    cols = {name: table[:, i] for i, (name, _) in enumerate(props)}
    geom = np.rint(np.stack([cols["x"], cols["y"], cols["z"]], axis=1)).astype(np.int64)
    rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    if geom.size and (geom.min() < 0 or geom.max() >= (1 << bitdepth)):
        raise CoordinateRange(f"{path}: coordinates exceed {bitdepth}-bit grid")
    if merge_duplicates and len(geom):
        keys = _coord_keys(geom)
        order = np.argsort(keys, kind="stable")
        uniq, first, inverse = np.unique(
            keys[order], return_index=True, return_inverse=True
        )
        if len(uniq) != len(geom):
            sums = np.zeros((len(uniq), 3), dtype=np.float64)
            np.add.at(sums, inverse, rgb[order].astype(np.float64))
            counts = np.bincount(inverse, minlength=len(uniq))
            geom = geom[order][first]
            rgb = np.rint(sums / counts[:, None]).astype(np.uint8)
    return PointCloud(geom, rgb, bitdepth, RGB8)


def save_ply(pc: PointCloud, path, format: str = "binary") -> None:
    """Write ``pc`` as PLY; round trip is bitwise on geometry and RGB colors."""
    if pc.colorspace != RGB8:
        raise ColorspaceMismatch("save_ply requires an RGB8 cloud")
    if format not in ("ascii", "binary"):
        raise ValueError(f"format must be 'ascii' or 'binary', got {format!r}")
    fmt_line = "ascii 1.0" if format == "ascii" else "binary_little_endian 1.0"
    header = (
        "ply\n"
        f"format {fmt_line}\n"
        f"element vertex {len(pc)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if format == "ascii":
            for g, c in zip(pc.geometry, pc.colors):
                fh.write(
                    f"{g[0]} {g[1]} {g[2]} {c[0]} {c[1]} {c[2]}\n".encode("ascii")
                )
        else:
            rec = struct.Struct("<fffBBB")
            for g, c in zip(pc.geometry, pc.colors):
                fh.write(rec.pack(g[0], g[1], g[2], c[0], c[1], c[2]))


# ---------------------------------------------------------------------------
# Color space conversion

def rgb_to_yuv(pc: PointCloud) -> PointCloud:
    """Convert RGB8 to full-range BT.709 YUV with 128-centered chroma."""
    if pc.colorspace != RGB8:
        raise ColorspaceMismatch("rgb_to_yuv requires an RGB8 cloud")
    rgb = pc.colors.astype(np.float64)
    y = _KR * rgb[:, 0] + _KG * rgb[:, 1] + _KB * rgb[:, 2]
    u = (rgb[:, 2] - y) / (2.0 * (1.0 - _KB)) + 128.0
    v = (rgb[:, 0] - y) / (2.0 * (1.0 - _KR)) + 128.0
    return PointCloud(pc.geometry.copy(), np.stack([y, u, v], axis=1),
                      pc.bitdepth, YUV)


def yuv_to_rgb(pc: PointCloud) -> PointCloud:
    """Inverse of :func:`rgb_to_yuv`; channels rounded and clipped to [0, 255]."""
    if pc.colorspace != YUV:
        raise ColorspaceMismatch("yuv_to_rgb requires a YUV cloud")
    y = pc.colors[:, 0]
    u = pc.colors[:, 1] - 128.0
    v = pc.colors[:, 2] - 128.0
    r = y + v * (2.0 * (1.0 - _KR))
    b = y + u * (2.0 * (1.0 - _KB))
    g = (y - _KR * r - _KB * b) / _KG
    rgb = np.clip(np.rint(np.stack([r, g, b], axis=1)), 0, 255)
    return PointCloud(pc.geometry.copy(), rgb.astype(np.uint8), pc.bitdepth, RGB8)


# ---------------------------------------------------------------------------
# Geometry-keyed set operations

def set_difference(a: PointCloud, b: PointCloud) -> PointCloud:
    """Points of ``a`` absent from ``b``; requires b's geometry to be in a."""
    if len(b) == 0:
        return a.take(np.arange(len(a)))
    keys_a = _coord_keys(a.geometry)
    keys_b = _coord_keys(b.geometry)
    if not np.isin(keys_b, keys_a).all():
        raise GeometryMismatch("subtrahend has coordinates not in the minuend")
    keep = ~np.isin(keys_a, keys_b)
    return a.take(np.nonzero(keep)[0])


def map_attributes(source: PointCloud, indices) -> PointCloud:
    """Sub-cloud of ``source`` at ``indices``, in index order."""
    return source.take(indices)


def union(a: PointCloud, b: PointCloud) -> PointCloud:
    """Concatenation of two geometry-disjoint clouds (a's points first)."""
    if len(a) == 0:
        return b.take(np.arange(len(b)))
    if len(b) == 0:
        return a.take(np.arange(len(a)))
    return PointCloud(
        np.concatenate([a.geometry, b.geometry]),
        np.concatenate([a.colors, b.colors]),
        a.bitdepth, a.colorspace,
    )


# ---------------------------------------------------------------------------
# Normal estimation

def _morton_keys(geometry: np.ndarray, bits: int) -> np.ndarray:
    from .blocks import morton_code  # local import; blocks depends on cloud

    return morton_code(geometry[:, 0], geometry[:, 1], geometry[:, 2], bits)


def estimate_normals(pc: PointCloud, k: int = 16) -> NormalField:
    """Unit normals from PCA over the k nearest neighbors of each point.

    Neighbor ties at equal distance resolve by Morton code (coordinates are
    unique, so the index tie-break is never reached). The normal is the least
    eigenvector of the neighborhood covariance, sign-flipped so its largest-
    magnitude component is nonnegative. Neighborhoods whose two smallest
    covariance eigenvalues coincide are flagged degenerate and assigned the
    smallest-index coordinate axis orthogonal to the principal direction.
    """
    m = len(pc)
    if k < 3:
        raise ValueError("k must be at least 3")
    if m < k:
        raise ValueError(f"need at least k={k} points, got {m}")
    normals, degenerate = _knn_pca_normals(pc.geometry, k, pc.bitdepth)
    return NormalField(normals, degenerate)


def _knn_pca_normals(geometry: np.ndarray, k: int, bitdepth: int):
    m = len(geometry)
    order = np.argsort(_morton_keys(geometry, bitdepth), kind="stable")
    pts = geometry[order].astype(np.float64)

    neigh = np.empty((m, k), dtype=np.int64)
    chunk = max(1, min(512, int(2**25 // max(m, 1))))
    for start in range(0, m, chunk):
        block = pts[start:start + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        # stable sort on distance; column order is Morton, giving the tie rule
        neigh[start:start + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]

    nb = pts[neigh]                      # (m, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)   # ascending eigenvalues

    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1.0)
    degen = (evals[:, 1] - evals[:, 0]) <= 1e-9 * scale
    if degen.any():
        principal = evecs[degen, :, 2]
        axis = np.argmin(np.abs(principal), axis=1)
        repl = np.zeros((degen.sum(), 3))
        repl[np.arange(len(repl)), axis] = 1.0
        normals[degen] = repl

    flip_idx = np.argmax(np.abs(normals), axis=1)
    signs = np.sign(normals[np.arange(m), flip_idx])
    signs[signs == 0] = 1.0
    normals *= signs[:, None]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    inv = np.empty(m, dtype=np.int64)
    inv[order] = np.arange(m)
    return normals[inv], degen[inv]


# ---------------------------------------------------------------------------
# PSNR primitives

def _match_by_coordinate(ref: PointCloud, test: PointCloud):
    if len(ref) != len(test):
        raise GeometryMismatch("point counts differ")
    ka, kb = _coord_keys(ref.geometry), _coord_keys(test.geometry)
    oa, ob = np.argsort(ka), np.argsort(kb)
    if not np.array_equal(ka[oa], kb[ob]):
        raise GeometryMismatch("coordinate sets differ")
    return oa, ob


def channel_psnr(ref: PointCloud, test: PointCloud, channel: int) -> float:
    """PSNR in dB for one color channel; identical geometry sets required.

    Peak is 255; an exact match returns the 100 dB cap.
    """
    oa, ob = _match_by_coordinate(ref, test)
    a = ref.colors[oa, channel].astype(np.float64)
    b = test.colors[ob, channel].astype(np.float64)
    mse = float(np.mean((a - b) ** 2)) if len(a) else 0.0
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(255.0**2 / mse))
