"""Module for evaluation metrics: PSNR, IoU, parameter errors and homography deviation."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from src.app.dataset import FrameDataset
from src.app.dynamics import Family
from src.app.errors import DatasetError, FamilyMismatchError, HomographyError
from src.app.renderer import PixelGrid, render_frames
from src.app.scene import SceneModel

logger = logging.getLogger(__name__)

PSNR_CAP = 120.0
MSE_FLOOR = 1e-12
_POINTS = ("pivot", "origin")


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DatasetError(f"{what}: shapes differ", details=f"{a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 120 dB."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two masks binarized at 0.5; two empty masks give 1."""
    a, b = np.asarray(a) >= 0.5, np.asarray(b) >= 0.5
    _same_shape(a, b, "iou")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class ParamReport:
    """Relative errors per parameter; `flagged` lists zero-valued truths reported as absolute."""
    errors: dict[str, float] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)


def param_report(values: dict[str, float], truth: dict[str, Any], family: Family,
                 grid: PixelGrid) -> ParamReport:
    """
    Compare fitted physical values with a ground-truth file.

    Args:
        values: Fitted values as returned by SceneModel.physical_values().
        truth: Parsed truth.json with `family` and `values`.
        family: Family of the fitted scene.
        grid: Image grid; point errors are distances over the image diagonal.
    """
    if Family.parse(truth.get("family", family.value)) is not family:
        raise FamilyMismatchError(f"Truth describes a {truth['family']} scene, fitted a "
                                  f"{family.value} scene")
    expected = truth.get("values", {})
    report = ParamReport()
    for point in _POINTS:
        keys = (f"{point}_x", f"{point}_y")
        if all(k in expected and k in values for k in keys):
            distance = math.hypot(values[keys[0]] - expected[keys[0]],
                                  values[keys[1]] - expected[keys[1]])
            report.errors[point] = distance / grid.diagonal
    for name, true_value in expected.items():
        if name not in values or name.startswith(_POINTS) or name.startswith("attach"):
            continue
        difference = abs(values[name] - float(true_value))
        if true_value == 0:
            report.errors[name] = difference
            report.flagged.append(name)
            logger.warning("True %s is zero; reporting the absolute error", name)
        else:
            report.errors[name] = difference / abs(float(true_value))
    return report


def homography_deviation(matrix: np.ndarray) -> float:
    """Frobenius norm of H - I."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 3) or not math.isclose(matrix[2, 2], 1.0, abs_tol=1e-12):
        raise HomographyError("Expected a 3x3 homography with H33 = 1", details=str(matrix))
    return float(np.linalg.norm(matrix - np.eye(3), ord="fro"))


@dataclass
class MetricsReport:
    """Evaluation of one checkpoint on a set of frames."""
    indices: list[int]
    psnr: list[float] = field(default_factory=list)
    psnr_mean: float | None = None
    iou: list[float] = field(default_factory=list)
    iou_mean: float | None = None
    param_errors: dict[str, float] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)
    homography_deviation: float = 0.0
    truth_homography_deviation: float | None = None
    wall_clock: float = 0.0
    config_hash: str = ""

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def evaluate(scene: SceneModel, dataset: FrameDataset, indices: Sequence[int],
             config_hash: str = "", wall_clock: float = 0.0) -> MetricsReport:
    """
    Render the scene at the given frames and score it against the dataset.

    PSNR is averaged per frame and skipped for mask-only data or scenes without a
    background; IoU compares the thresholded combined occupancy with the union of the
    ground-truth object masks.
    """
    indices = list(indices)
    if not indices:
        raise DatasetError("No frames to evaluate", details=str(dataset.root))
    frames = render_frames(dataset.times_for(indices), dataset.grid, scene)
    report = MetricsReport(indices=indices, wall_clock=wall_clock, config_hash=config_hash,
                           homography_deviation=homography_deviation(scene.homography.matrix()))

    if dataset.has_rgb and scene.background is not None:
        report.psnr = [psnr(frame.rgb, dataset.frames[i]) for frame, i in zip(frames, indices)]
        report.psnr_mean = float(np.mean(report.psnr))
    if dataset.has_full_masks(indices):
        report.iou = [iou(frame.occupancy, dataset.union_mask(i))
                      for frame, i in zip(frames, indices)]
        report.iou_mean = float(np.mean(report.iou))

    truth = dataset.truth
    if truth is not None:
        params = param_report(scene.physical_values(), truth, scene.family, dataset.grid)
        report.param_errors, report.flagged = params.errors, params.flagged
        if "homography" in truth:
            report.truth_homography_deviation = homography_deviation(np.asarray(truth["homography"]))

    logger.info("Evaluated %d frame(s): PSNR %s, IoU %s", len(indices),
                "n/a" if report.psnr_mean is None else f"{report.psnr_mean:.2f} dB",
                "n/a" if report.iou_mean is None else f"{report.iou_mean:.3f}")
    return report
