"""Equirectangular image <-> focused-mesh signal resampling and dataset building."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from fimesh.mesh import (
    FOCUSED,
    TriMesh,
    equivalent_resolution,
    full_vertex_count,
    make_focused,
    make_full,
    refined_face_vertex_ids,
)
from fimesh.rotations import N_FACES, RotationTable, face_of_point

log = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])  # ITU-R BT.601
CHANNEL_MODES = ("luma", "rgb")
_SAMPLE_MAGIC = b"FISAMP01"


class ResampleError(ValueError):
    pass


@dataclass
class EquirectImage:
    """(H, W, C) float64 values in [0, 1], W = 2H."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ResampleError(f"expected (H, W, 1|3) image, got shape {v.shape}")
        if v.shape[1] != 2 * v.shape[0]:
            raise ResampleError(f"equirect width must be twice height, got {v.shape[1]}x{v.shape[0]}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ResampleError("pixel values must lie in [0, 1]")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def to_channels(self, mode: str) -> "EquirectImage":
        if mode == "rgb":
            if self.channels == 1:
                return EquirectImage(np.repeat(self.values, 3, axis=2))
            return self
        if mode == "luma":
            if self.channels == 1:
                return self
            return EquirectImage(np.clip(self.values @ LUMA_WEIGHTS, 0.0, 1.0))
        raise ResampleError(f"unknown channel mode {mode!r}")


def read_image(path) -> EquirectImage:
    """PNG / PPM / PGM, 8-bit, normalized to [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return EquirectImage(arr)


def write_image(img: EquirectImage, path) -> None:
    arr = np.round(np.clip(img.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def xyz_to_latlon(p: np.ndarray):
    lat = np.arcsin(np.clip(p[..., 2], -1.0, 1.0))
    lon = np.arctan2(p[..., 1], p[..., 0])
    return lat, lon


def latlon_to_xyz(lat, lon) -> np.ndarray:
    lat, lon = np.broadcast_arrays(np.asarray(lat, dtype=np.float64), np.asarray(lon, dtype=np.float64))
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def pixel_of(p: np.ndarray, width: int, height: int):
    """Nearest pixel (x, y) for unit vectors; x wraps, y clamps."""
    lat, lon = xyz_to_latlon(p)
    x = np.floor((lon + np.pi) / (2.0 * np.pi) * width).astype(np.int64) % width
    y = np.clip(np.floor((np.pi / 2.0 - lat) / np.pi * height).astype(np.int64), 0, height - 1)
    return x, y


def pixel_directions(width: int, height: int) -> np.ndarray:
    """(H, W, 3) unit vectors through pixel centres."""
    lon = (np.arange(width) + 0.5) / width * 2.0 * np.pi - np.pi
    lat = np.pi / 2.0 - (np.arange(height) + 0.5) / height * np.pi
    return latlon_to_xyz(lat[:, None], lon[None, :])


def _check_table(table: RotationTable, mesh: TriMesh):
    if mesh.kind != FOCUSED:
        raise ResampleError("resampling targets Focused meshes")
    if mesh.level > table.focused_level:
        raise ResampleError(
            f"table built for focused level {table.focused_level}, mesh is level {mesh.level}"
        )


def sample_to_mesh(img: EquirectImage, table: RotationTable, face: int, mesh: TriMesh) -> np.ndarray:
    """(C, V) nearest-pixel values at the focused vertices carried onto ``face``.

    A coarser focused mesh uses the prefix of the table's rotated vertices,
    so one table at the finest level serves every coarser level.
    """
    _check_table(table, mesh)
    if not 0 <= face < N_FACES:
        raise ResampleError(f"face index {face} out of range")
    pos = table.rotated_vertices[face, : mesh.n_vertices]
    x, y = pixel_of(pos, img.width, img.height)
    return np.ascontiguousarray(img.values[y, x, :].T)


def downscale_equirect(img: EquirectImage, width: int) -> EquirectImage:
    """Area-average (box filter) resize to (width, width/2)."""
    if width % 2 or width <= 0 or width > img.width:
        raise ResampleError(f"target width must be even and <= {img.width}, got {width}")
    if width == img.width:
        return EquirectImage(img.values.copy())
    ax = _box_matrix(img.width, width)
    ay = _box_matrix(img.height, width // 2)
    out = np.einsum("yh,hwc,xw->yxc", ay, img.values, ax)
    return EquirectImage(np.clip(out, 0.0, 1.0))


def _box_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input cells overlapping [i, i+1) * n_in / n_out."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / m.sum(axis=1, keepdims=True)


def render_to_equirect(
    signal: np.ndarray,
    table: RotationTable,
    faces,
    width: int,
    mesh: TriMesh | None = None,
) -> EquirectImage:
    """Paint per-face focused signals back onto an equirect canvas.

    ``signal`` is (80, C, V) or, when a single face is requested, (C, V).
    Each pixel in a requested face is pulled back through the inverse face
    map and takes the value of the nearest refined-face vertex.
    """
    mesh = mesh if mesh is not None else make_focused(table.focused_level)
    _check_table(table, mesh)
    faces = list(range(N_FACES)) if faces == "all" else [int(f) for f in faces]
    sig = np.asarray(signal, dtype=np.float64)
    if sig.ndim == 2:
        if len(faces) != 1:
            raise ResampleError("a (C, V) signal can only render one face")
        single = sig
        sig = np.zeros((N_FACES,) + single.shape)
        sig[faces[0]] = single
    nv = mesh.n_vertices
    if sig.shape[-1] != nv:
        raise ResampleError(f"signal has {sig.shape[-1]} vertices, mesh has {nv}")
    height = width // 2
    dirs = pixel_directions(width, height).reshape(-1, 3)
    owner = face_of_point(make_full(1), dirs)
    patch = refined_face_vertex_ids(mesh)
    tree = cKDTree(mesh.vertices[patch])
    out = np.zeros((height * width, sig.shape[1]))
    inv = table.inverse_maps()
    for f in faces:
        sel = np.flatnonzero(owner == f)
        if sel.size == 0:
            continue
        q = dirs[sel] @ inv[f].T
        q /= np.linalg.norm(q, axis=1)[:, None]
        _, nearest = tree.query(q)
        out[sel] = sig[f][:, patch[nearest]].T
    return EquirectImage(np.clip(out.reshape(height, width, -1), 0.0, 1.0))


def input_width(level_in: int) -> int:
    return equivalent_resolution(full_vertex_count(level_in))[0]


# -- datasets -----------------------------------------------------------------


@dataclass
class DatasetManifest:
    frames: list
    seed: int = 0
    split: dict = field(default_factory=lambda: {"train": 0.8, "test": 0.2})
    levels: tuple = (7, 9)
    channel_mode: str = "luma"

    def __post_init__(self):
        self.levels = tuple(int(v) for v in self.levels)
        if len(self.levels) != 2 or self.levels[0] >= self.levels[1] or self.levels[0] < 1:
            raise ResampleError(f"levels must be (L_in, L_out) with 1 <= L_in < L_out, got {self.levels}")
        if set(self.split) != {"train", "test"} or abs(sum(self.split.values()) - 1.0) > 1e-9:
            raise ResampleError(f"split fractions must be train/test summing to 1, got {self.split}")
        if self.channel_mode not in CHANNEL_MODES:
            raise ResampleError(f"channel_mode must be one of {CHANNEL_MODES}")

    @property
    def channels(self) -> int:
        return 1 if self.channel_mode == "luma" else 3

    def to_json(self) -> str:
        d = asdict(self)
        d["levels"] = list(self.levels)
        d["frames"] = [str(p) for p in self.frames]
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str, base_dir=None) -> "DatasetManifest":
        d = json.loads(text)
        frames = [str(p) for p in d.pop("frames")]
        if base_dir is not None:
            frames = [str(Path(base_dir) / p) if not Path(p).is_absolute() else p for p in frames]
        return cls(frames=frames, **d)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_json(path.read_text(), base_dir=path.parent)

    def split_of(self) -> dict[int, str]:
        """Frame id -> split. Frames are ranked by a keyed hash of (seed, frame id)."""
        n = len(self.frames)
        n_train = int(round(self.split["train"] * n))
        keys = [
            hashlib.blake2b(f"{self.seed}:{fid}".encode(), digest_size=8).digest()
            for fid in range(n)
        ]
        order = sorted(range(n), key=lambda i: keys[i])
        train = set(order[:n_train])
        return {fid: ("train" if fid in train else "test") for fid in range(n)}


@dataclass
class SampleItem:
    frame_id: int
    face: int
    level_in: int
    level_out: int
    input: np.ndarray  # (C, V_in)
    target: np.ndarray  # (C, V_out)

    def __post_init__(self):
        if self.input.shape[0] != self.target.shape[0]:
            raise ResampleError("input and target channel counts differ")
        if self.level_out <= self.level_in:
            raise ResampleError("target level must exceed input level")

    @property
    def channels(self) -> int:
        return self.input.shape[0]


def frame_items(
    frame_id: int, img: EquirectImage, manifest: DatasetManifest, table: RotationTable
) -> list[SampleItem]:
    l_in, l_out = manifest.levels
    mesh_in, mesh_out = make_focused(l_in), make_focused(l_out)
    img = img.to_channels(manifest.channel_mode)
    w_in = min(input_width(l_in), img.width - img.width % 2)
    low = downscale_equirect(img, w_in)
    items = []
    for face in range(N_FACES):
        items.append(
            SampleItem(
                frame_id=frame_id,
                face=face,
                level_in=l_in,
                level_out=l_out,
                input=sample_to_mesh(low, table, face, mesh_in),
                target=sample_to_mesh(img, table, face, mesh_out),
            )
        )
    return items


def build_dataset(
    manifest: DatasetManifest, table: RotationTable, threads: int = 1, split: str | None = None
) -> Iterator[SampleItem]:
    """Yield one item per (frame, face), frame-major then face-minor.

    Frames that cannot be opened are skipped with a warning; frames that open
    but fail to decode as an equirect image raise.
    """
    if table.focused_level < manifest.levels[1]:
        raise ResampleError("rotation table is coarser than the target level")
    assignment = manifest.split_of()
    ids = [i for i in range(len(manifest.frames)) if split is None or assignment[i] == split]

    def load(fid):
        path = Path(manifest.frames[fid])
        if not path.is_file():
            log.warning("skipping unreadable frame %s", path)
            return None
        return frame_items(fid, read_image(path), manifest, table)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            for items in pool.map(load, ids):
                if items is not None:
                    yield from items
    else:
        for fid in ids:
            items = load(fid)
            if items is not None:
                yield from items


def write_items(items, path) -> int:
    n = 0
    with open(path, "wb") as f:
        for it in items:
            f.write(_SAMPLE_MAGIC)
            f.write(struct.pack("<QBBBB", it.frame_id, it.face, it.channels, it.level_in, it.level_out))
            f.write(np.ascontiguousarray(it.input, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(it.target, dtype="<f4").tobytes())
            n += 1
    return n


def read_items(path) -> list[SampleItem]:
    from fimesh.mesh import focused_vertex_count

    data = Path(path).read_bytes()
    off, items = 0, []
    hdr = struct.calcsize("<QBBBB")
    while off < len(data):
        if data[off : off + 8] != _SAMPLE_MAGIC:
            raise ResampleError(f"{path}: bad record magic at byte {off}")
        off += 8
        fid, face, ch, l_in, l_out = struct.unpack_from("<QBBBB", data, off)
        off += hdr
        n_in, n_out = ch * focused_vertex_count(l_in), ch * focused_vertex_count(l_out)
        x = np.frombuffer(data, "<f4", n_in, off).reshape(ch, -1).astype(np.float64)
        off += 4 * n_in
        y = np.frombuffer(data, "<f4", n_out, off).reshape(ch, -1).astype(np.float64)
        off += 4 * n_out
        items.append(SampleItem(int(fid), int(face), int(l_in), int(l_out), x, y))
    return items


def stack_items(items) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([it.input for it in items]), np.stack([it.target for it in items])
