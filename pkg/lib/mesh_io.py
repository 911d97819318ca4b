import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import trimesh

from optypes.match_types import DescriptorField, Shape, ShapeKind

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# tab20, cycled by node index
PALETTE = np.array(
    [
        [31, 119, 180], [174, 199, 232], [255, 127, 14], [255, 187, 120],
        [44, 160, 44], [152, 223, 138], [214, 39, 40], [255, 152, 150],
        [148, 103, 189], [197, 176, 213], [140, 86, 75], [196, 156, 148],
        [227, 119, 194], [247, 182, 210], [127, 127, 127], [199, 199, 199],
        [188, 189, 34], [219, 219, 141], [23, 190, 207], [158, 218, 229],
    ],
    dtype=np.uint8,
)
UNMATCHED_COLOR = np.array([0, 0, 0], dtype=np.uint8)


class ShapeIOError(Exception):
    """Base exception for shape file errors"""
    pass


class ShapeFormatError(ShapeIOError):
    """Raised when a file cannot be parsed or has an unsupported format"""
    pass


class ShapeValidationError(ShapeIOError):
    """Raised when a parsed shape violates geometric preconditions"""
    pass


@dataclass
class ShapeFile:
    """Structured view of an input path"""
    path: Path
    suffix: str

    SUPPORTED = ("off", "ply", "xyz")

    @classmethod
    def from_path(cls, path: PathLike) -> "ShapeFile":
        """Create from a path like 'david0.off'"""
        p = Path(path)
        if not p.is_file():
            raise ShapeIOError(f"No such file: {p}")
        suffix = p.suffix.lower().lstrip(".")
        if suffix not in cls.SUPPORTED:
            raise ShapeFormatError(
                f"Unsupported extension '.{suffix}' (expected one of {cls.SUPPORTED})"
            )
        return cls(path=p, suffix=suffix)


@dataclass
class RawShape:
    vertices: np.ndarray
    faces: Optional[np.ndarray] = None

    @property
    def is_mesh(self) -> bool:
        return self.faces is not None and len(self.faces) > 0


def read_raw_shape(path: PathLike) -> RawShape:
    """Parse OFF, ASCII PLY or XYZ into raw arrays.

    Raises:
        ShapeIOError: If the file is missing
        ShapeFormatError: If the content cannot be parsed
    """
    shape_file = ShapeFile.from_path(path)
    if shape_file.suffix == "xyz":
        return _read_xyz(shape_file.path)

    try:
        loaded = trimesh.load(
            str(shape_file.path), file_type=shape_file.suffix, process=False
        )
    except Exception as e:
        logger.error(f"Failed to parse {shape_file.path}: {e}")
        raise ShapeFormatError(f"Could not parse {shape_file.path}: {e}") from e

    if isinstance(loaded, trimesh.Scene):
        geometries = list(loaded.geometry.values())
        if len(geometries) != 1:
            raise ShapeFormatError(
                f"{shape_file.path} holds {len(geometries)} geometries, expected one"
            )
        loaded = geometries[0]

    vertices = np.asarray(loaded.vertices, dtype=np.float64)
    faces = getattr(loaded, "faces", None)
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    logger.debug(
        f"Read {shape_file.path}: {len(vertices)} vertices, "
        f"{0 if faces is None else len(faces)} faces"
    )
    return RawShape(vertices=vertices, faces=faces)


def _read_xyz(path: Path) -> RawShape:
    try:
        points = np.loadtxt(path, ndmin=2, usecols=(0, 1, 2), dtype=np.float64)
    except (ValueError, IndexError) as e:
        logger.error(f"Failed to parse XYZ file {path}: {e}")
        raise ShapeFormatError(f"Could not parse XYZ file {path}") from e
    return RawShape(vertices=points)


def write_colored_ply(path: PathLike, shape: Shape, colors: np.ndarray) -> None:
    """Write an ASCII PLY with per-vertex RGB."""
    rgba = np.hstack([colors.astype(np.uint8), np.full((len(colors), 1), 255, np.uint8)])
    if shape.kind is ShapeKind.MESH:
        geometry = trimesh.Trimesh(
            vertices=shape.vertices, faces=shape.faces, vertex_colors=rgba, process=False
        )
    else:
        geometry = trimesh.PointCloud(vertices=shape.vertices, colors=rgba)
    Path(path).write_bytes(geometry.export(file_type="ply", encoding="ascii"))


def write_xyz(path: PathLike, points: np.ndarray) -> None:
    np.savetxt(path, points, fmt="%.9g")


def label_colors(labels: np.ndarray, node_colors: np.ndarray) -> np.ndarray:
    """Map per-vertex node labels to RGB through a per-node color table."""
    return node_colors[labels]


def palette_for(n: int) -> np.ndarray:
    return PALETTE[np.arange(n) % len(PALETTE)]


def read_index_file(path: PathLike) -> np.ndarray:
    """One integer per line, line i = entry i."""
    p = Path(path)
    if not p.is_file():
        raise ShapeIOError(f"No such file: {p}")
    try:
        values = np.loadtxt(p, dtype=np.int64, ndmin=1)
    except ValueError as e:
        logger.error(f"Failed to parse index file {p}: {e}")
        raise ShapeFormatError(f"Could not parse index file {p}") from e
    return values.reshape(-1)


def write_index_file(path: PathLike, values: np.ndarray) -> None:
    np.savetxt(path, np.asarray(values, dtype=np.int64), fmt="%d")


def write_descriptor_csv(path: PathLike, field: DescriptorField) -> None:
    header = ",".join(f"t={t:.6g}" for t in field.times)
    np.savetxt(path, field.values, delimiter=",", header=header, comments="", fmt="%.12g")
