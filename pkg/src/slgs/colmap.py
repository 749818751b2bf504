"""Readers for COLMAP sparse reconstructions and dataset assembly.

Both the binary (``*.bin``) and text (``*.txt``) exports are supported. Parsers
take raw bytes and either return data or raise one of the typed errors in
:mod:`slgs.errors`; they never fail with a bare ``struct.error`` or
``IndexError``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyReconstruction, MalformedFile, UnsupportedCameraModel
from .scene import (
    DIFFUSE_DIMS, INIT_OPACITY, LATENT_INIT_RANGE, SPECULAR_DIMS, CameraView, GaussianCloud, logit,
    quat_to_rotmat,
)

# id -> (name, number of params), as defined by COLMAP
CAMERA_MODELS = {
    0: ("SIMPLE_PINHOLE", 3),
    1: ("PINHOLE", 4),
    2: ("SIMPLE_RADIAL", 4),
    3: ("RADIAL", 5),
    4: ("OPENCV", 8),
    5: ("OPENCV_FISHEYE", 8),
    6: ("FULL_OPENCV", 12),
    7: ("FOV", 5),
    8: ("SIMPLE_RADIAL_FISHEYE", 4),
    9: ("RADIAL_FISHEYE", 5),
    10: ("THIN_PRISM_FISHEYE", 12),
}
SUPPORTED_MODELS = ("SIMPLE_PINHOLE", "PINHOLE")
DEGENERATE_SCALE = 1e-4
TEST_EVERY = 8


@dataclass
class CameraIntrinsics:
    id: int
    model: str
    width: int
    height: int
    params: np.ndarray

    @property
    def focal(self) -> tuple[float, float]:
        if self.model == "SIMPLE_PINHOLE":
            return float(self.params[0]), float(self.params[0])
        return float(self.params[0]), float(self.params[1])

    @property
    def principal_point(self) -> np.ndarray:
        return np.asarray(self.params[-2:], dtype=np.float64)


@dataclass
class ImagePose:
    id: int
    qvec: np.ndarray
    tvec: np.ndarray
    camera_id: int
    name: str

    @property
    def world_to_camera(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_rotmat(self.qvec)
        m[:3, 3] = self.tvec
        return m


@dataclass
class SfmPoint:
    position: np.ndarray
    color: np.ndarray
    reprojection_error: float


@dataclass
class SparseReconstruction:
    cameras: dict[int, CameraIntrinsics]
    images: dict[str, ImagePose]
    points: list[SfmPoint]

    def __post_init__(self):
        for img in self.images.values():
            if img.camera_id not in self.cameras:
                raise MalformedFile(f"image {img.name!r} references unknown camera {img.camera_id}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.remaining() < size:
            raise MalformedFile(f"truncated stream at byte {self.pos} (need {size}, have {self.remaining()})")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def skip(self, n: int) -> None:
        if n < 0 or self.remaining() < n:
            raise MalformedFile(f"truncated stream at byte {self.pos} (skip {n}, have {self.remaining()})")
        self.pos += n

    def cstring(self) -> bytes:
        end = bytes(self.data[self.pos:]).find(b"\0")
        if end < 0:
            raise MalformedFile("unterminated image name")
        out = bytes(self.data[self.pos:self.pos + end])
        self.pos += end + 1
        return out

    def count(self, min_record: int) -> int:
        (n,) = self.unpack("<Q")
        if n * min_record > self.remaining():
            raise MalformedFile(f"record count {n} exceeds remaining {self.remaining()} bytes")
        return n

    def finish(self) -> None:
        if self.remaining():
            raise MalformedFile(f"{self.remaining()} trailing bytes")


def _is_text(data: bytes) -> bool:
    # a binary payload starts with a u64 count whose high bytes are zero
    return b"\0" not in bytes(data[:64])


def _text_lines(data: bytes) -> list[str]:
    try:
        text = data.decode("utf-8", errors="surrogateescape")
    except Exception as exc:  # pragma: no cover - surrogateescape accepts any bytes
        raise MalformedFile(str(exc)) from exc
    return [ln for ln in text.splitlines() if not ln.lstrip().startswith("#")]


def _finite(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise MalformedFile(f"non-finite value in {what}")
    return arr


def _make_camera(cam_id: int, model: str, width: int, height: int, params) -> CameraIntrinsics:
    if model not in SUPPORTED_MODELS:
        raise UnsupportedCameraModel(f"camera {cam_id}: model {model} is not supported "
                                     f"(undistort to PINHOLE first)")
    params = _finite(params, f"camera {cam_id} params")
    if width <= 0 or height <= 0:
        raise MalformedFile(f"camera {cam_id}: non-positive size {width}x{height}")
    return CameraIntrinsics(cam_id, model, width, height, params)


def parse_cameras(data: bytes, binary: bool | None = None) -> dict[int, CameraIntrinsics]:
    """Parse cameras.bin / cameras.txt content into intrinsics keyed by camera id."""
    if binary is None:
        binary = not _is_text(data)
    cameras = {}
    if binary:
        r = _Reader(data)
        for _ in range(r.count(24)):
            cam_id, model_id, width, height = r.unpack("<IiQQ")
            if model_id not in CAMERA_MODELS:
                raise UnsupportedCameraModel(f"camera {cam_id}: unknown model id {model_id}")
            name, n_params = CAMERA_MODELS[model_id]
            params = r.unpack(f"<{n_params}d")
            cameras[cam_id] = _make_camera(cam_id, name, width, height, params)
        r.finish()
        return cameras
    for line in _text_lines(data):
        parts = line.split()
        if not parts:
            continue
        try:
            cam_id, model, width, height = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (ValueError, IndexError) as exc:
            raise MalformedFile(f"bad camera line {line!r}") from exc
        known = {name: n for name, n in CAMERA_MODELS.values()}
        if model not in known:
            raise UnsupportedCameraModel(f"camera {cam_id}: unknown model {model}")
        if model in SUPPORTED_MODELS and len(params) != known[model]:
            raise MalformedFile(f"camera {cam_id}: expected {known[model]} params, got {len(params)}")
        cameras[cam_id] = _make_camera(cam_id, model, width, height, params)
    return cameras


def _decode_name(raw: bytes) -> str:
    return raw.decode("utf-8", errors="surrogateescape")


def _make_pose(image_id, q, t, camera_id, name) -> ImagePose:
    q = _finite(q, f"image {image_id} quaternion")
    t = _finite(t, f"image {image_id} translation")
    norm = np.linalg.norm(q)
    if norm == 0:
        raise MalformedFile(f"image {image_id}: zero quaternion")
    return ImagePose(image_id, q / norm, t, camera_id, name)


def parse_images(data: bytes, binary: bool | None = None) -> dict[str, ImagePose]:
    """Parse images.bin / images.txt content into poses keyed by image name."""
    if binary is None:
        binary = not _is_text(data)
    images = {}
    if binary:
        r = _Reader(data)
        for _ in range(r.count(8 + 4 + 56 + 4 + 1)):
            (image_id,) = r.unpack("<I")
            q = r.unpack("<4d")
            t = r.unpack("<3d")
            (camera_id,) = r.unpack("<I")
            name = _decode_name(r.cstring())
            (n_points,) = r.unpack("<Q")
            if n_points > r.remaining() // 24:
                raise MalformedFile(f"image {image_id}: truncated 2D point list")
            r.skip(24 * n_points)
            images[name] = _make_pose(image_id, q, t, camera_id, name)
        r.finish()
        return images
    lines = _text_lines(data)
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        try:
            image_id = int(parts[0])
            q = [float(v) for v in parts[1:5]]
            t = [float(v) for v in parts[5:8]]
            camera_id = int(parts[8])
            name = parts[9]
        except (ValueError, IndexError) as exc:
            raise MalformedFile(f"bad image line {lines[i - 1]!r}") from exc
        if len(q) != 4 or len(t) != 3:
            raise MalformedFile(f"bad image line {lines[i - 1]!r}")
        i += 1  # the 2D observation line follows, possibly empty
        images[name] = _make_pose(image_id, q, t, camera_id, name)
    return images


def parse_points3d(data: bytes, binary: bool | None = None) -> list[SfmPoint]:
    """Parse points3D.bin / points3D.txt content; track data is discarded."""
    if binary is None:
        binary = not _is_text(data)
    points = []
    if binary:
        r = _Reader(data)
        for _ in range(r.count(8 + 24 + 3 + 8 + 8)):
            r.unpack("<Q")
            xyz = r.unpack("<3d")
            rgb = r.unpack("<3B")
            (err,) = r.unpack("<d")
            (track_len,) = r.unpack("<Q")
            if track_len > r.remaining() // 8:
                raise MalformedFile("truncated point track")
            r.skip(8 * track_len)
            points.append(SfmPoint(_finite(xyz, "point position"), np.array(rgb, dtype=np.uint8), float(err)))
        r.finish()
        return points
    for line in _text_lines(data):
        parts = line.split()
        if not parts:
            continue
        try:
            xyz = [float(v) for v in parts[1:4]]
            rgb = [int(v) for v in parts[4:7]]
            err = float(parts[7])
        except (ValueError, IndexError) as exc:
            raise MalformedFile(f"bad point line {line!r}") from exc
        if len(xyz) != 3 or len(rgb) != 3 or any(not 0 <= c <= 255 for c in rgb):
            raise MalformedFile(f"bad point line {line!r}")
        points.append(SfmPoint(_finite(xyz, "point position"), np.array(rgb, dtype=np.uint8), err))
    return points


# ------------------------------------------------------------------ writers
# Used to build fixtures and synthetic datasets.

def write_cameras_bin(cameras: dict[int, CameraIntrinsics]) -> bytes:
    ids = {name: i for i, (name, _) in CAMERA_MODELS.items()}
    out = [struct.pack("<Q", len(cameras))]
    for cam in cameras.values():
        out.append(struct.pack("<IiQQ", cam.id, ids[cam.model], cam.width, cam.height))
        out.append(struct.pack(f"<{len(cam.params)}d", *cam.params))
    return b"".join(out)


def write_cameras_txt(cameras: dict[int, CameraIntrinsics]) -> bytes:
    lines = ["# Camera list with one line of data per camera:",
             "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for cam in cameras.values():
        params = " ".join(repr(float(p)) for p in cam.params)
        lines.append(f"{cam.id} {cam.model} {cam.width} {cam.height} {params}")
    return ("\n".join(lines) + "\n").encode()


def write_images_bin(images: dict[str, ImagePose]) -> bytes:
    out = [struct.pack("<Q", len(images))]
    for img in images.values():
        out.append(struct.pack("<I4d3dI", img.id, *img.qvec, *img.tvec, img.camera_id))
        out.append(img.name.encode("utf-8", errors="surrogateescape") + b"\0")
        out.append(struct.pack("<Q", 0))
    return b"".join(out)


def write_images_txt(images: dict[str, ImagePose]) -> bytes:
    lines = ["# Image list with two lines of data per image:"]
    for img in images.values():
        vals = " ".join(repr(float(v)) for v in (*img.qvec, *img.tvec))
        lines.append(f"{img.id} {vals} {img.camera_id} {img.name}")
        lines.append("")
    return ("\n".join(lines) + "\n").encode("utf-8", errors="surrogateescape")


def write_points3d_bin(points: list[SfmPoint]) -> bytes:
    out = [struct.pack("<Q", len(points))]
    for i, p in enumerate(points):
        out.append(struct.pack("<Q3d3Bd", i + 1, *p.position, *[int(c) for c in p.color], p.reprojection_error))
        out.append(struct.pack("<Q", 0))
    return b"".join(out)


def write_points3d_txt(points: list[SfmPoint]) -> bytes:
    lines = ["# 3D point list with one line of data per point:"]
    for i, p in enumerate(points):
        xyz = " ".join(repr(float(v)) for v in p.position)
        rgb = " ".join(str(int(c)) for c in p.color)
        lines.append(f"{i + 1} {xyz} {rgb} {float(p.reprojection_error)!r}")
    return ("\n".join(lines) + "\n").encode()


def write_sparse(directory: Path, rec: SparseReconstruction, binary: bool = True) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if binary:
        (directory / "cameras.bin").write_bytes(write_cameras_bin(rec.cameras))
        (directory / "images.bin").write_bytes(write_images_bin(rec.images))
        (directory / "points3D.bin").write_bytes(write_points3d_bin(rec.points))
    else:
        (directory / "cameras.txt").write_bytes(write_cameras_txt(rec.cameras))
        (directory / "images.txt").write_bytes(write_images_txt(rec.images))
        (directory / "points3D.txt").write_bytes(write_points3d_txt(rec.points))


def read_sparse(directory: Path) -> SparseReconstruction:
    """Load a sparse model directory, preferring binary files when both exist."""
    directory = Path(directory)
    parts = {}
    for stem, parser in (("cameras", parse_cameras), ("images", parse_images), ("points3D", parse_points3d)):
        for ext, binary in ((".bin", True), (".txt", False)):
            path = directory / (stem + ext)
            if path.exists():
                parts[stem] = parser(path.read_bytes(), binary=binary)
                break
        else:
            raise FileNotFoundError(f"missing {stem}.bin or {stem}.txt in {directory}")
    return SparseReconstruction(parts["cameras"], parts["images"], parts["points3D"])


# ------------------------------------------------------------------ initialization

def init_cloud(
    points: list[SfmPoint],
    rng: np.random.Generator | None = None,
    diffuse_dims: int = DIFFUSE_DIMS,
    specular_dims: int = SPECULAR_DIMS,
    sh_color: bool = False,
) -> GaussianCloud:
    """One isotropic Gaussian per SfM point, sized by its 3 nearest neighbours."""
    if not points:
        raise EmptyReconstruction("cannot initialize a cloud from zero points")
    rng = rng or np.random.default_rng(0)
    xyz = np.stack([p.position for p in points]).astype(np.float64)
    n = len(xyz)
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(xyz).query(xyz, k=k)
        mean_dist = dist[:, 1:].mean(axis=1)
    else:
        mean_dist = np.zeros(1)
    mean_dist = np.where(mean_dist > DEGENERATE_SCALE, mean_dist, DEGENERATE_SCALE)
    log_scales = np.repeat(np.log(mean_dist)[:, None], 3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1
    cloud = GaussianCloud(
        positions=xyz.astype(np.float32),
        opacity_logits=np.full(n, logit(INIT_OPACITY), dtype=np.float32),
        rotations=rotations.astype(np.float32),
        log_scales=log_scales.astype(np.float32),
        f_diffuse=rng.uniform(-LATENT_INIT_RANGE, LATENT_INIT_RANGE, (n, diffuse_dims)).astype(np.float32),
        f_specular=rng.uniform(-LATENT_INIT_RANGE, LATENT_INIT_RANGE, (n, specular_dims)).astype(np.float32),
    )
    if sh_color:
        sh = np.zeros((n, 16, 3), dtype=np.float32)
        colors = np.stack([p.color for p in points]).astype(np.float64) / 255.0
        sh[:, 0, :] = (colors - 0.5) / 0.28209479177387814
        cloud.sh_color = sh
    return cloud


# ------------------------------------------------------------------ datasets

def load_image(path: Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an 8-bit image as float32 RGB in [0, 1], optionally resized to (width, height)."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.BOX)
        return np.asarray(im, dtype=np.float32) / 255.0


def save_image(path: Path, rgb: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0, 1)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


@dataclass
class Dataset:
    views: list[CameraView]
    images: list[np.ndarray]
    points: list[SfmPoint]

    def __len__(self) -> int:
        return len(self.views)

    def split(self, test_every: int = TEST_EVERY) -> tuple[list[int], list[int]]:
        """Indices of (train, test) views; every ``test_every``-th by sorted name is held out."""
        order = sorted(range(len(self.views)), key=lambda i: self.views[i].name)
        if test_every <= 0:
            return order, []
        test = [idx for k, idx in enumerate(order) if k % test_every == 0]
        train = [idx for k, idx in enumerate(order) if k % test_every != 0]
        return train, test

    @property
    def scene_extent(self) -> float:
        """Radius of the camera centres around their mean, padded by 10%."""
        centers = np.stack([v.center for v in self.views])
        diag = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
        return float(max(diag, 1e-6) * 1.1)


def load_dataset(data_dir: Path, downscale: float = 1.0, images_dir: str = "images") -> Dataset:
    """Read ``<data>/sparse/0`` and ``<data>/images`` into views with loaded images."""
    data_dir = Path(data_dir)
    sparse = data_dir / "sparse" / "0"
    if not sparse.is_dir():
        raise FileNotFoundError(f"sparse model directory not found: {sparse}")
    rec = read_sparse(sparse)
    views, images = [], []
    for name in sorted(rec.images):
        pose = rec.images[name]
        cam = rec.cameras[pose.camera_id]
        fx, fy = cam.focal
        view = CameraView(cam.width, cam.height, fx, fy, cam.principal_point, pose.world_to_camera,
                          image_path=data_dir / images_dir / name, name=name)
        view.validate()
        if downscale != 1:
            view = view.scaled(downscale)
        if not Path(view.image_path).exists():
            raise FileNotFoundError(f"image not found: {view.image_path}")
        views.append(view)
        images.append(load_image(view.image_path, (view.width, view.height)))
    return Dataset(views, images, rec.points)

