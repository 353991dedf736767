"""Dataset container, on-disk layout and raster formats.

Layout of a dataset directory::

    intrinsics.txt          fx/fy/cx/cy/width/height, one 'key value' per line
    meta.txt                near, far, scene_box, timestamps, train, test
    frames/%05d.ppm         binary P6, 8-bit
    masks/%05d.pgm          optional binary P5 tool masks (nonzero = tool)
    depth/%05d.bdep         optional reference z-depth, see read_bdep
    correspondences.txt     optional 'fa fb ua va ub vb confidence' rows
    oracle/poses.txt        optional 'frame r00 .. r22 tx ty tz' rows
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, SE3Pose

BDEP_MAGIC = b"BDEP"


class DatasetError(ValueError):
    pass


class ExportError(ValueError):
    pass


# ------------------------------------------------------------------ rasters


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ExportError(f"{path}: colour raster must be (H, W, 3), got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ExportError(f"{path}: raster contains non-finite values")
    q = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = q.shape
    _write(path, f"P6\n{w} {h}\n255\n".encode() + q.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ExportError(f"{path}: mask must be 2-D")
    q = (mask.astype(bool) * 255).astype(np.uint8)
    h, w = q.shape
    _write(path, f"P5\n{w} {h}\n255\n".encode() + q.tobytes())


def _write(path, payload: bytes) -> None:
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc


def _read_pnm(path, magic: bytes):
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise DatasetError(f"{path}: expected {magic.decode()} header, got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit rasters are supported")
    return buf[pos:], w, h


def read_ppm(path) -> np.ndarray:
    data, w, h = _read_pnm(path, b"P6")
    if len(data) < w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(data[:w * h * 3], np.uint8).reshape(h, w, 3) / 255.0


def read_pgm(path) -> np.ndarray:
    data, w, h = _read_pnm(path, b"P5")
    if len(data) < w * h:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(data[:w * h], np.uint8).reshape(h, w) > 0


def write_bdep(path, depth: np.ndarray) -> None:
    """'BDEP' | u32 width | u32 height | u32 reserved | f32 row-major; <= 0 means invalid."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ExportError(f"{path}: depth raster must be 2-D")
    if not np.all(np.isfinite(depth)):
        raise ExportError(f"{path}: raster contains non-finite values")
    h, w = depth.shape
    _write(path, BDEP_MAGIC + struct.pack("<III", w, h, 0) + depth.astype("<f4").tobytes())


def read_bdep(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or not buf.startswith(BDEP_MAGIC):
        raise DatasetError(f"{path}: not a BDEP depth file")
    w, h, _ = struct.unpack_from("<III", buf, 4)
    if len(buf) - 16 < 4 * w * h:
        raise DatasetError(f"{path}: truncated depth data")
    return np.frombuffer(buf, "<f4", count=w * h, offset=16).astype(np.float64).reshape(h, w)


# ------------------------------------------------------------ correspondences

CORR_DTYPE = np.dtype([("frame_a", np.int64), ("frame_b", np.int64), ("pixel_a", np.float64, 2),
                       ("pixel_b", np.float64, 2), ("confidence", np.float64)])


@dataclass
class CorrespondenceRecord:
    frame_a: int
    frame_b: int
    pixel_a: tuple
    pixel_b: tuple
    confidence: float = 1.0


def records_to_array(records) -> np.ndarray:
    out = np.zeros(len(records), CORR_DTYPE)
    for i, r in enumerate(records):
        out[i] = (r.frame_a, r.frame_b, r.pixel_a, r.pixel_b, r.confidence)
    return out


def write_correspondences(path, corr: np.ndarray) -> None:
    lines = [f"{r['frame_a']} {r['frame_b']} {float(r['pixel_a'][0])!r} {float(r['pixel_a'][1])!r} "
             f"{float(r['pixel_b'][0])!r} {float(r['pixel_b'][1])!r} {float(r['confidence'])!r}" for r in corr]
    _write(path, ("\n".join(lines) + ("\n" if lines else "")).encode())


def read_correspondences(path, threshold: float = 0.5, n_frames: int | None = None,
                         width: int | None = None, height: int | None = None) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise DatasetError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        try:
            fa, fb = int(parts[0]), int(parts[1])
            ua, va, ub, vb, conf = map(float, parts[2:])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        if fa == fb:
            raise DatasetError(f"{path}:{lineno}: frame_a equals frame_b")
        if n_frames is not None and not (0 <= fa < n_frames and 0 <= fb < n_frames):
            raise DatasetError(f"{path}:{lineno}: frame index out of range")
        if width is not None and not all(0 <= u <= width for u in (ua, ub)):
            raise DatasetError(f"{path}:{lineno}: pixel outside image")
        if height is not None and not all(0 <= v <= height for v in (va, vb)):
            raise DatasetError(f"{path}:{lineno}: pixel outside image")
        if conf >= threshold:
            rows.append((fa, fb, (ua, va), (ub, vb), conf))
    return np.array(rows, dtype=CORR_DTYPE)


# ------------------------------------------------------------------ dataset


@dataclass
class Frame:
    image: np.ndarray
    time: float
    tool_mask: np.ndarray | None = None
    ref_depth: np.ndarray | None = None
    gt_pose: SE3Pose | None = None

    @property
    def depth_valid(self) -> np.ndarray | None:
        return None if self.ref_depth is None else self.ref_depth > 0


@dataclass
class Dataset:
    frames: list[Frame]
    intrinsics: Intrinsics
    near: float
    far: float
    scene_box: np.ndarray
    train: list[int]
    test: list[int]
    correspondences: np.ndarray = field(default_factory=lambda: np.zeros(0, CORR_DTYPE))

    def __len__(self):
        return len(self.frames)

    @property
    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])

    @property
    def has_depth(self) -> bool:
        return all(f.ref_depth is not None for f in self.frames)

    @property
    def has_gt_poses(self) -> bool:
        return all(f.gt_pose is not None for f in self.frames)

    def validate(self, require_test: bool = False) -> None:
        intr = self.intrinsics
        shape = (intr.height, intr.width)
        if not 0 < self.near < self.far:
            raise DatasetError(f"invalid bounds near={self.near} far={self.far}")
        for i, f in enumerate(self.frames):
            if f.image.shape != shape + (3,):
                raise DatasetError(f"frame {i}: image {f.image.shape[:2]} does not match {shape}")
            if f.tool_mask is not None and f.tool_mask.shape != shape:
                raise DatasetError(f"frame {i}: tool mask resolution mismatch")
            if f.ref_depth is not None and f.ref_depth.shape != shape:
                raise DatasetError(f"frame {i}: depth resolution mismatch")
        t = self.times
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise DatasetError("timestamps are not strictly increasing")
        idx = set(range(len(self.frames)))
        if not set(self.train) <= idx or not set(self.test) <= idx:
            raise DatasetError("split references a missing frame")
        if set(self.train) & set(self.test):
            raise DatasetError("train and test splits overlap")
        if require_test and not self.test:
            raise DatasetError("evaluation requested but the test split is empty")

    def subsample(self, every: int) -> "Dataset":
        """Keep every ``every``-th frame; correspondences are remapped or dropped."""
        keep = list(range(0, len(self.frames), every))
        remap = {old: new for new, old in enumerate(keep)}
        corr = self.correspondences
        sel = np.array([a in remap and b in remap for a, b in zip(corr["frame_a"], corr["frame_b"])],
                       dtype=bool)
        corr = corr[sel].copy()
        corr["frame_a"] = [remap[a] for a in corr["frame_a"]]
        corr["frame_b"] = [remap[b] for b in corr["frame_b"]]
        return Dataset([self.frames[i] for i in keep], self.intrinsics, self.near, self.far,
                       self.scene_box, [remap[i] for i in self.train if i in remap],
                       [remap[i] for i in self.test if i in remap], corr)


def default_split(n: int, fraction: float = 0.1) -> tuple[list[int], list[int]]:
    """Evenly spaced interior test frames (about ``fraction`` of the sequence); frame 0 always trains."""
    n_test = max(1, int(round(fraction * n))) if n >= 3 else 0
    test = sorted({int((k + 1) * n / (n_test + 1)) for k in range(n_test)} - {0})
    return [i for i in range(n) if i not in test], test


def _fmt(xs) -> str:
    return " ".join(repr(float(x)) for x in xs)


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    ds.intrinsics.save(root / "intrinsics.txt")
    meta = [f"near {ds.near!r}", f"far {ds.far!r}",
            f"scene_box {_fmt(np.asarray(ds.scene_box).ravel())}",
            f"timestamps {_fmt(ds.times)}",
            "train " + " ".join(map(str, ds.train)), "test " + " ".join(map(str, ds.test))]
    (root / "meta.txt").write_text("\n".join(meta) + "\n")
    for i, f in enumerate(ds.frames):
        write_ppm(root / "frames" / f"{i:05d}.ppm", f.image)
        if f.tool_mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            write_pgm(root / "masks" / f"{i:05d}.pgm", f.tool_mask)
        if f.ref_depth is not None:
            (root / "depth").mkdir(exist_ok=True)
            write_bdep(root / "depth" / f"{i:05d}.bdep", f.ref_depth)
    if len(ds.correspondences):
        write_correspondences(root / "correspondences.txt", ds.correspondences)
    if ds.has_gt_poses:
        (root / "oracle").mkdir(exist_ok=True)
        lines = [f"{i} " + _fmt(np.concatenate([f.gt_pose.R.ravel(), f.gt_pose.t]))
                 for i, f in enumerate(ds.frames)]
        (root / "oracle" / "poses.txt").write_text("\n".join(lines) + "\n")


def _read_meta(path) -> dict:
    meta = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        meta[key] = (vals, lineno)
    for key in ("near", "far", "timestamps"):
        if key not in meta:
            raise DatasetError(f"{path}: missing '{key}'")
    return meta


def read_poses(path) -> dict[int, SE3Pose]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 13:
            raise DatasetError(f"{path}:{lineno}: expected frame index + 12 values")
        v = np.array(list(map(float, parts[1:])))
        out[int(parts[0])] = SE3Pose(v[:9].reshape(3, 3), v[9:])
    return out


def load_dataset(root, confidence_threshold: float = 0.5, require_test: bool = False) -> Dataset:
    root = Path(root)
    if not (root / "intrinsics.txt").exists():
        raise DatasetError(f"{root / 'intrinsics.txt'}: missing intrinsics")
    try:
        intr = Intrinsics.load(root / "intrinsics.txt")
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc
    if not (root / "meta.txt").exists():
        raise DatasetError(f"{root / 'meta.txt'}: missing metadata")
    meta = _read_meta(root / "meta.txt")
    times = [float(x) for x in meta["timestamps"][0]]
    for k in range(1, len(times)):
        if times[k] <= times[k - 1]:
            raise DatasetError(f"{root / 'meta.txt'}:{meta['timestamps'][1]}: "
                               f"timestamps not strictly increasing at index {k}")
    n = len(times)
    frame_files = sorted((root / "frames").glob("*.ppm"))
    if len(frame_files) != n:
        raise DatasetError(f"{root / 'frames'}: {len(frame_files)} images for {n} timestamps")
    shape = (intr.height, intr.width)
    oracle = read_poses(root / "oracle" / "poses.txt") if (root / "oracle" / "poses.txt").exists() else {}
    frames = []
    for i in range(n):
        img_path = root / "frames" / f"{i:05d}.ppm"
        if not img_path.exists():
            raise DatasetError(f"{img_path}: missing frame")
        image = read_ppm(img_path)
        if image.shape[:2] != shape:
            raise DatasetError(f"{img_path}: resolution {image.shape[1]}x{image.shape[0]} "
                               f"does not match intrinsics {intr.width}x{intr.height}")
        mask = depth = None
        mpath, dpath = root / "masks" / f"{i:05d}.pgm", root / "depth" / f"{i:05d}.bdep"
        if mpath.exists():
            mask = read_pgm(mpath)
            if mask.shape != shape:
                raise DatasetError(f"{mpath}: mask resolution does not match the image")
        if dpath.exists():
            depth = read_bdep(dpath)
            if depth.shape != shape:
                raise DatasetError(f"{dpath}: depth resolution {depth.shape[1]}x{depth.shape[0]} "
                                   f"does not match the image")
        frames.append(Frame(image, times[i], mask, depth, oracle.get(i)))
    if "train" in meta or "test" in meta:
        train = [int(x) for x in meta.get("train", ([], 0))[0]]
        test = [int(x) for x in meta.get("test", ([], 0))[0]]
    else:
        train, test = default_split(n)
    if "scene_box" in meta:
        box = np.array([float(x) for x in meta["scene_box"][0]]).reshape(2, 3)
    else:
        far = float(meta["far"][0][0])
        box = np.array([[-far, -far, 0.0], [far, far, far]])
    corr_path = root / "correspondences.txt"
    corr = (read_correspondences(corr_path, confidence_threshold, n, intr.width, intr.height)
            if corr_path.exists() else np.zeros(0, CORR_DTYPE))
    ds = Dataset(frames, intr, float(meta["near"][0][0]), float(meta["far"][0][0]), box,
                 train, test, corr)
    ds.validate(require_test=require_test)
    return ds


def lookup_depth(depth: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Reference z-depth at continuous pixels; NaN where unavailable.

    Inverse depth is interpolated bilinearly between pixel centres (with
    linear extrapolation at the border), which is exact for planar surfaces.
    """
    h, w = depth.shape
    pixels = np.atleast_2d(pixels)
    x, y = pixels[:, 0] - 0.5, pixels[:, 1] - 0.5
    i0 = np.clip(np.floor(x).astype(int), 0, max(w - 2, 0))
    j0 = np.clip(np.floor(y).astype(int), 0, max(h - 2, 0))
    i1, j1 = np.minimum(i0 + 1, w - 1), np.minimum(j0 + 1, h - 1)
    fx, fy = x - i0, y - j0
    corners = np.stack([depth[j0, i0], depth[j0, i1], depth[j1, i0], depth[j1, i1]])
    ok = np.all(corners > 0, axis=0)
    inv = 1.0 / np.where(corners > 0, corners, 1.0)
    val = ((1 - fy) * ((1 - fx) * inv[0] + fx * inv[1]) + fy * ((1 - fx) * inv[2] + fx * inv[3]))
    with np.errstate(divide="ignore"):
        z = 1.0 / val
    return np.where(ok & (val > 0), z, np.nan)
