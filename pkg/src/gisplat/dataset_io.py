"""TUM-RGBD directory ingestion and export.

Layout: ``rgb.txt``, ``depth.txt``, ``groundtruth.txt``, ``accelerometer.txt``
plus ``rgb/*.png`` and 16-bit ``depth/*.png`` (1 unit = 1/5000 m). Two optional
extension files are understood: ``gyroscope.txt`` ("t gx gy gz") and
``intrinsics.txt`` ("fx fy cx cy width height"); the public recordings have
neither.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DatasetParseError, InvalidArgument, UnreadableDataset
from .frame import Frame
from .geometry import Intrinsics, Pose
from .imu import ImuSample

log = logging.getLogger(__name__)

DEPTH_SCALE = 5000.0
DEFAULT_MAX_DT = 0.02

# published pinhole calibrations for the 640x480 Kinect sequences
INTRINSICS_PRESETS = {
    "fr1": Intrinsics(517.3, 516.5, 318.6, 255.3, 640, 480),
    "fr2": Intrinsics(520.9, 521.0, 325.1, 249.7, 640, 480),
    "fr3": Intrinsics(535.4, 539.2, 320.1, 247.6, 640, 480),
}


@dataclass
class LoadStats:
    rgb_parsed: int = 0
    depth_parsed: int = 0
    frames: int = 0
    dropped: int = 0
    imu_parsed: int = 0
    imu_attached: int = 0


@dataclass
class TumSequence:
    frames: list
    gt: list | None
    intrinsics: Intrinsics
    stats: LoadStats = field(default_factory=LoadStats)
    imu: list = field(default_factory=list)


def _rows(path: Path, ncols: int, numeric: bool = True) -> list[tuple[int, list]]:
    """Non-comment rows of a whitespace table as ``(lineno, fields)``; fields beyond ``ncols`` are ignored."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) < ncols:
                raise DatasetParseError(str(path), lineno, f"expected {ncols} fields, got {len(parts)}")
            if not numeric:
                out.append((lineno, parts[:ncols]))
                continue
            try:
                vals = [float(p) for p in parts[:ncols]]
            except ValueError as e:
                raise DatasetParseError(str(path), lineno, str(e)) from None
            if not np.all(np.isfinite(vals)):
                raise DatasetParseError(str(path), lineno, "non-finite value")
            out.append((lineno, vals))
    return out


def read_file_list(path) -> list[tuple[float, str]]:
    out = []
    for lineno, parts in _rows(Path(path), 2, numeric=False):
        try:
            t = float(parts[0])
        except ValueError:
            raise DatasetParseError(str(path), lineno, f"bad timestamp {parts[0]!r}") from None
        out.append((t, parts[1]))
    return out


def read_trajectory(path) -> list[tuple[float, Pose]]:
    """TUM trajectory file: ``t tx ty tz qx qy qz qw`` per line."""
    out = []
    for lineno, v in _rows(Path(path), 8):
        q = np.array(v[4:8])
        if np.linalg.norm(q) < 1e-12:
            raise DatasetParseError(str(path), lineno, "zero quaternion")
        out.append((v[0], Pose.from_quat(v[1:4], q)))
    return out


def write_trajectory(path, stamped: Sequence[tuple[float, Pose]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p in stamped:
            q = p.quat()
            f.write(f"{float(t)!r} " + " ".join(f"{x:.9f}" for x in (*p.translation, *q)) + "\n")


def read_imu(accel_path, gyro_path=None) -> list[ImuSample]:
    acc = [v for _, v in _rows(Path(accel_path), 4)]
    gyro = {}
    if gyro_path is not None and Path(gyro_path).exists():
        gyro = {v[0]: np.array(v[1:4]) for _, v in _rows(Path(gyro_path), 4)}
    samples = [ImuSample(v[0], np.array(v[1:4]), gyro.get(v[0])) for v in acc]
    samples.sort(key=lambda s: s.t)
    if gyro and any(s.gyro is None for s in samples):
        # a partial gyro stream is unusable; treat it as absent
        samples = [ImuSample(s.t, s.accel, None) for s in samples]
    return samples


def associate(a: Sequence[float], b: Sequence[float], max_dt: float = DEFAULT_MAX_DT) -> list[tuple[int, int]]:
    """Greedy mutual-nearest matching of two timestamp lists.

    Candidate pairs within ``max_dt`` are taken in order of increasing time
    difference (ties by index), each element at most once. Returns index pairs
    sorted by the first index.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return []
    order_b = np.argsort(b, kind="stable")
    bs = b[order_b]
    cands = []
    for i, t in enumerate(a):
        lo = np.searchsorted(bs, t - max_dt, side="left")
        hi = np.searchsorted(bs, t + max_dt, side="right")
        for jj in range(lo, hi):
            j = int(order_b[jj])
            d = abs(t - b[j])
            if d <= max_dt:
                cands.append((d, i, j))
    cands.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im)
    if raw.ndim != 2:
        raise InvalidArgument(f"{path}: depth image must be single channel")
    return raw.astype(np.float64) / DEPTH_SCALE


def write_rgb(path, rgb: np.ndarray) -> None:
    img = np.clip(np.rint(np.clip(rgb, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def write_depth(path, depth_m: np.ndarray) -> None:
    raw = np.clip(np.rint(np.asarray(depth_m) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def _guess_intrinsics(root: Path, width: int, height: int) -> Intrinsics:
    f = root / "intrinsics.txt"
    if f.exists():
        v = _rows(f, 6)[0][1]
        return Intrinsics(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]))
    name = root.name.lower()
    preset = "fr1"
    for key, tag in (("fr2", "freiburg2"), ("fr3", "freiburg3")):
        if tag in name or key in name:
            preset = key
    k = INTRINSICS_PRESETS[preset]
    if (k.width, k.height) == (width, height):
        return k
    sx, sy = width / k.width, height / k.height
    return Intrinsics(k.fx * sx, k.fy * sy, k.cx * sx, k.cy * sy, width, height)


def load_tum(root, max_dt: float = DEFAULT_MAX_DT, intrinsics: Intrinsics | None = None,
             load_depth: bool = True) -> TumSequence:
    """Load a TUM-RGBD style directory into time-ordered frames."""
    root = Path(root)
    if not (root / "rgb.txt").is_file():
        raise UnreadableDataset(f"{root}: rgb.txt not found")
    stats = LoadStats()
    rgb_list = sorted(read_file_list(root / "rgb.txt"))
    stats.rgb_parsed = len(rgb_list)
    depth_list = []
    if load_depth and (root / "depth.txt").is_file():
        depth_list = sorted(read_file_list(root / "depth.txt"))
        stats.depth_parsed = len(depth_list)
        pairs = associate([t for t, _ in rgb_list], [t for t, _ in depth_list], max_dt)
    else:
        pairs = [(i, None) for i in range(len(rgb_list))]
    stats.dropped = len(rgb_list) - len(pairs)
    if not pairs:
        raise UnreadableDataset(f"{root}: no usable frames")

    imu = []
    if (root / "accelerometer.txt").is_file():
        imu = read_imu(root / "accelerometer.txt", root / "gyroscope.txt")
        stats.imu_parsed = len(imu)
    imu_t = np.array([s.t for s in imu])

    frames = []
    prev_t = -np.inf
    k = intrinsics
    for n, (i, j) in enumerate(pairs):
        t, rel = rgb_list[i]
        try:
            rgb = read_rgb(root / rel)
            depth = read_depth(root / depth_list[j][1]) if j is not None else None
        except (OSError, ValueError) as e:
            raise UnreadableDataset(f"{root}: {e}") from None
        if k is None:
            k = _guess_intrinsics(root, rgb.shape[1], rgb.shape[0])
        sel = np.nonzero((imu_t > prev_t) & (imu_t <= t))[0] if imu else []
        frame = Frame(t, rgb, depth, [imu[s] for s in sel], n)
        frame.validate(k)
        frames.append(frame)
        stats.imu_attached += len(sel)
        prev_t = t
    stats.frames = len(frames)

    gt = read_trajectory(root / "groundtruth.txt") if (root / "groundtruth.txt").is_file() else None
    log.info("loaded %s: %d frames, %d dropped, %d imu samples", root, stats.frames, stats.dropped, stats.imu_parsed)
    return TumSequence(frames, gt, k, stats, imu)


def export_tum(root, frames: Sequence[Frame], k: Intrinsics, gt: Sequence[tuple[float, Pose]] | None = None,
               imu: Sequence[ImuSample] = ()) -> Path:
    """Write frames (and optionally ground truth and IMU) in the TUM-RGBD layout."""
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    have_depth = any(f.depth is not None for f in frames)
    if have_depth:
        (root / "depth").mkdir(exist_ok=True)
    rgb_lines, depth_lines = ["# timestamp filename"], ["# timestamp filename"]
    for f in frames:
        name = f"{f.t:.6f}.png"
        write_rgb(root / "rgb" / name, f.rgb)
        rgb_lines.append(f"{float(f.t)!r} rgb/{name}")
        if f.depth is not None:
            write_depth(root / "depth" / name, f.depth)
            depth_lines.append(f"{float(f.t)!r} depth/{name}")
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    if have_depth:
        (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    (root / "intrinsics.txt").write_text("# fx fy cx cy width height\n"
                                         f"{float(k.fx)!r} {float(k.fy)!r} {float(k.cx)!r} {float(k.cy)!r} {k.width} {k.height}\n")
    if gt is not None:
        write_trajectory(root / "groundtruth.txt", gt)
    if imu:
        acc = ["# timestamp ax ay az"] + [f"{float(s.t)!r} " + " ".join(repr(float(x)) for x in s.accel) for s in imu]
        (root / "accelerometer.txt").write_text("\n".join(acc) + "\n")
        if all(s.gyro is not None for s in imu):
            gyr = ["# timestamp gx gy gz"] + [f"{float(s.t)!r} " + " ".join(repr(float(x)) for x in s.gyro) for s in imu]
            (root / "gyroscope.txt").write_text("\n".join(gyr) + "\n")
    return root
