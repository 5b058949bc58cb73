"""Module for reading and writing frame datasets: PPM frames, PGM masks, times and truth files."""

import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.app.dynamics import Family
from src.app.errors import (
    ConfigurationError,
    DatasetError,
    FamilyMismatchError,
    ImageNotFoundError,
    InvalidImageError,
)
from src.app.renderer import PixelGrid

logger = logging.getLogger(__name__)

FRAMES_DIR = "frames"
MASKS_DIR = "masks"
COARSE_DIR = "coarse"
TIMES_FILE = "times.txt"
TRUTH_FILE = "truth.json"
SPLIT_FILE = "split.json"

_OBJECT_DIR = re.compile(r"^obj(\d+)$")
_FRAME_RANGE = re.compile(r"^\s*(\d+)\s*\.\.\s*(\d+)\s*$")


def frame_file(index: int) -> str:
    return f"{index:04d}.ppm"


def mask_file(index: int) -> str:
    return f"{index:04d}.pgm"


def _open(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise ImageNotFoundError(str(path))
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert(mode), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise InvalidImageError(f"Cannot read image {path}", details=str(e)) from e


def read_rgb(path: str | Path) -> np.ndarray:
    """RGB image as an (H, W, 3) float array in [0, 1]."""
    return _open(Path(path), "RGB")


def read_mask(path: str | Path) -> np.ndarray:
    """Grayscale image thresholded at 0.5 into a {0, 1} float array (H, W)."""
    return (_open(Path(path), "L") >= 0.5).astype(np.float64)


def _atomic_save(image: Image.Image, path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        os.close(fd)
    except OSError as e:
        raise DatasetError(f"Cannot write image {path}", details=str(e)) from e
    try:
        image.save(tmp, format="PPM")
        os.replace(tmp, path)
    except OSError as e:
        Path(tmp).unlink(missing_ok=True)
        raise DatasetError(f"Cannot write image {path}", details=str(e)) from e


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb(path: str | Path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) array in [0, 1] as binary PPM (P6)."""
    _atomic_save(Image.fromarray(to_uint8(rgb)), Path(path))


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a mask thresholded at 0.5 as binary PGM (P5) with values 0 and 255."""
    binary = (np.asarray(mask) >= 0.5).astype(np.uint8) * 255
    _atomic_save(Image.fromarray(binary), Path(path))


def _atomic_write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    except OSError as e:
        raise DatasetError(f"Cannot write file {path}", details=str(e)) from e
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except OSError as e:
        Path(tmp).unlink(missing_ok=True)
        raise DatasetError(f"Cannot write file {path}", details=str(e)) from e


def write_times(path: str | Path, times: Sequence[float]) -> None:
    _atomic_write_text(Path(path), "".join(f"{float(t)!r}\n" for t in times))


def read_times(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Missing timestamps file {path}", details=str(path))
    try:
        times = np.array([float(line) for line in path.read_text(encoding="utf-8").split()])
    except ValueError as e:
        raise DatasetError(f"Malformed timestamps in {path}", details=str(e)) from e
    if times.size == 0:
        raise DatasetError(f"No timestamps in {path}")
    if times.size > 1 and not np.all(np.diff(times) > 0):
        raise DatasetError("Timestamps must be strictly increasing", details=str(path))
    return times


def ensure_dir(path: str | Path) -> Path:
    """Create a directory and its parents; failures are dataset errors."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"Cannot create directory {path}", details=str(e)) from e
    return path


def write_json(path: str | Path, payload: dict[str, Any]) -> None:
    _atomic_write_text(Path(path), json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"Malformed JSON file {path}", details=str(e)) from e
    except OSError as e:
        raise DatasetError(f"Cannot read file {path}", details=str(e)) from e


def parse_frame_range(text: str) -> list[int]:
    """Inclusive `a..b` index range."""
    match = _FRAME_RANGE.match(text)
    if match is None:
        raise ConfigurationError(f"Malformed frame range '{text}'", details="expected a..b")
    start, stop = int(match.group(1)), int(match.group(2))
    if stop < start:
        raise ConfigurationError(f"Empty frame range '{text}'")
    return list(range(start, stop + 1))


@dataclass
class FrameDataset:
    """
    Timestamped frames with optional per-object masks and ground truth.

    masks[k] maps a frame index to the binary mask of object k; real captures may only
    carry masks for the first frames.
    """
    root: Path
    times: np.ndarray
    grid: PixelGrid
    frames: np.ndarray | None = None
    masks: list[dict[int, np.ndarray]] = field(default_factory=list)
    coarse_masks: list[np.ndarray] | None = None
    truth: dict[str, Any] | None = None
    train_indices: list[int] = field(default_factory=list)
    test_indices: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def family(self) -> Family | None:
        if self.truth is None or "family" not in self.truth:
            return None
        return Family.parse(self.truth["family"])

    @property
    def has_rgb(self) -> bool:
        return self.frames is not None

    @property
    def frame_interval(self) -> float:
        if self.times.size < 2:
            return 1.0
        return float(np.median(np.diff(self.times)))

    @property
    def n_objects(self) -> int:
        return len(self.masks)

    def mask_indices(self, obj: int = 0) -> list[int]:
        return sorted(self.masks[obj]) if obj < len(self.masks) else []

    def object_masks(self, obj: int, indices: Sequence[int] | None = None) -> list[np.ndarray]:
        available = self.masks[obj] if obj < len(self.masks) else {}
        wanted = sorted(available) if indices is None else list(indices)
        missing = [i for i in wanted if i not in available]
        if missing:
            raise DatasetError(f"Object {obj} has no mask for frame(s) {missing}",
                               details=str(self.root))
        return [available[i] for i in wanted]

    def union_mask(self, index: int) -> np.ndarray:
        """Union of all object masks of one frame."""
        if not self.masks:
            raise DatasetError("Dataset has no masks", details=str(self.root))
        union = np.zeros((self.grid.height, self.grid.width))
        for obj in range(self.n_objects):
            union = np.maximum(union, self.object_masks(obj, [index])[0])
        return union

    def has_full_masks(self, indices: Sequence[int]) -> bool:
        return bool(self.masks) and all(i in m for m in self.masks for i in indices)

    def times_for(self, indices: Sequence[int]) -> np.ndarray:
        """Timestamps of frame indices; indices past the last frame extrapolate."""
        last = len(self) - 1
        return np.array([self.times[i] if i <= last
                         else self.times[last] + (i - last) * self.frame_interval
                         for i in indices], dtype=np.float64)


def check_family(dataset: FrameDataset, family: Family) -> None:
    if dataset.family is not None and dataset.family is not family:
        raise FamilyMismatchError(
            f"Dataset holds a {dataset.family.value} scene but the run expects {family.value}",
            details=str(dataset.root))


def _load_masks(root: Path, n_frames: int) -> list[dict[int, np.ndarray]]:
    mask_root = root / MASKS_DIR
    if not mask_root.is_dir():
        return []
    objects = sorted((int(m.group(1)), p) for p in mask_root.iterdir()
                     if p.is_dir() and (m := _OBJECT_DIR.match(p.name)))
    if [k for k, _ in objects] != list(range(len(objects))):
        raise DatasetError("Mask directories must be obj0, obj1, ... without gaps",
                           details=str(mask_root))
    masks = []
    for _, directory in objects:
        per_frame = {}
        for index in range(n_frames):
            path = directory / mask_file(index)
            if path.exists():
                per_frame[index] = read_mask(path)
        masks.append(per_frame)
    return masks


def _load_split(root: Path, truth: dict[str, Any] | None, n_frames: int) -> tuple[list[int], list[int]]:
    split = None
    if truth is not None and "split" in truth:
        split = truth["split"]
    elif (root / SPLIT_FILE).exists():
        split = read_json(root / SPLIT_FILE)
    if split is None:
        return list(range(n_frames)), []
    train = [int(i) for i in split.get("train", [])]
    test = [int(i) for i in split.get("test", [])]
    if set(train) & set(test):
        raise DatasetError("Train and test frames overlap", details=str(sorted(set(train) & set(test))))
    if any(i < 0 or i >= n_frames for i in train + test):
        raise DatasetError("Split index out of range", details=f"{n_frames} frames")
    return train, test


def load_dataset(root: str | Path) -> FrameDataset:
    """
    Load a dataset directory.

    Layout: frames/NNNN.ppm, masks/obj{K}/NNNN.pgm, coarse/obj{K}.pgm, times.txt and the
    optional truth.json / split.json. Frames or masks may be absent, not both.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}", details=str(root))
    times = read_times(root / TIMES_FILE)
    n_frames = times.size

    frames = None
    if (root / FRAMES_DIR).is_dir():
        frames = np.stack([read_rgb(root / FRAMES_DIR / frame_file(i)) for i in range(n_frames)])
    masks = _load_masks(root, n_frames)
    if frames is None and not any(masks):
        raise DatasetError("Dataset has neither frames nor masks", details=str(root))

    if frames is not None:
        height, width = frames.shape[1:3]
    else:
        first = next(m for per_frame in masks for m in per_frame.values())
        height, width = first.shape
    for per_frame in masks:
        for index, mask in per_frame.items():
            if mask.shape != (height, width):
                raise DatasetError(f"Mask {index} has size {mask.shape[::-1]}, frames are "
                                   f"{(width, height)}", details=str(root))

    coarse = None
    coarse_root = root / COARSE_DIR
    if coarse_root.is_dir():
        coarse = [read_mask(coarse_root / f"obj{k}.pgm")
                  for k in range(len(list(coarse_root.glob("obj*.pgm"))))]

    truth = read_json(root / TRUTH_FILE) if (root / TRUTH_FILE).exists() else None
    train, test = _load_split(root, truth, n_frames)
    dataset = FrameDataset(root=root, times=times, grid=PixelGrid(width, height), frames=frames,
                           masks=masks, coarse_masks=coarse, truth=truth,
                           train_indices=train, test_indices=test)
    logger.info("Loaded %d frames (%dx%d, %s, %d mask object(s)) from %s", n_frames, width,
                height, "rgb" if frames is not None else "mask-only", len(masks), root)
    return dataset


def write_dataset(root: str | Path, times: Sequence[float], frames: Sequence[np.ndarray] | None,
                  masks: Sequence[Sequence[np.ndarray]], truth: dict[str, Any] | None = None,
                  coarse: Sequence[np.ndarray] | None = None) -> Path:
    """Write a dataset directory; masks[k][i] is object k in frame i."""
    root = ensure_dir(root)
    write_times(root / TIMES_FILE, times)
    if frames is not None:
        for index, frame in enumerate(frames):
            write_rgb(root / FRAMES_DIR / frame_file(index), frame)
    for obj, per_frame in enumerate(masks):
        for index, mask in enumerate(per_frame):
            write_mask(root / MASKS_DIR / f"obj{obj}" / mask_file(index), mask)
    for obj, mask in enumerate(coarse or []):
        write_mask(root / COARSE_DIR / f"obj{obj}.pgm", mask)
    if truth is not None:
        write_json(root / TRUTH_FILE, truth)
    logger.info("Wrote %d frames to %s", len(times), root)
    return root
