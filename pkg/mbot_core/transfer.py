# mbot_core/transfer.py - Incremental barycentric color transfer between images
import logging
import os
from dataclasses import dataclass

import cv2
import numpy as np
import pandas as pd

from mbot_core.core_ot import solve_exact_assignment
from mbot_core.distributions import CostSpec, DiscreteDistribution
from mbot_core.minibatch import MinibatchConfig, iterate_blocks, pair_source

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".ppm")
NORMALIZATIONS = ("paper_scaling", "per_pixel_mass")
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
PPM_SIGNATURE = b"P6"


class ImageFormatError(ValueError):
    """Unsupported, unreadable or truncated image"""


@dataclass
class PixelCloud:
    """Pixels as points of the RGB cube, row-major"""

    rgb: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 2 or self.rgb.shape[1] != 3:
            raise ValueError(f"Pixel colors must have shape (n, 3), got {self.rgb.shape}")
        if self.rgb.shape[0] != self.width * self.height:
            raise ValueError(f"{self.rgb.shape[0]} pixels do not fill a {self.width}x{self.height} image")
        if self.rgb.size and (self.rgb.min() < 0.0 or self.rgb.max() > 1.0 or not np.all(np.isfinite(self.rgb))):
            raise ValueError("Pixel channels must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.rgb.shape[0]

    def as_distribution(self) -> DiscreteDistribution:
        return DiscreteDistribution(self.rgb)


def _check_extension(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in IMAGE_EXTENSIONS:
        raise ImageFormatError(f"Unsupported image format '{ext}' for {path}; expected {IMAGE_EXTENSIONS}")
    return ext


def _check_signature(path, ext: str):
    with open(path, "rb") as f:
        head = f.read(len(PNG_SIGNATURE))
    if ext == ".png" and head != PNG_SIGNATURE:
        raise ImageFormatError(f"{path} is not a PNG file")
    if ext == ".ppm" and not head.startswith(PPM_SIGNATURE):
        raise ImageFormatError(f"{path} is not a binary (P6) PPM file")


def load_image(path) -> PixelCloud:
    """Read an 8-bit RGB PNG or binary PPM into [0, 1] channels"""
    ext = _check_extension(path)
    if not os.path.exists(path):
        raise ImageFormatError(f"Image file {path} does not exist")
    _check_signature(path, ext)
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise ImageFormatError(f"Could not decode {path} (corrupt or truncated)")
    if image.dtype != np.uint8:
        raise ImageFormatError(f"{path} has {image.dtype} samples; only 8-bit images are supported")
    if image.ndim == 2:
        image = cv2.cvtColor(image, cv2.COLOR_GRAY2BGR)
    elif image.shape[2] == 4:
        image = cv2.cvtColor(image, cv2.COLOR_BGRA2BGR)
    height, width = image.shape[:2]
    rgb = image[:, :, ::-1].reshape(-1, 3).astype(np.float64) / 255.0
    logger.info(f"Loaded {width}x{height} image from {path}")
    return PixelCloud(rgb, width, height)


def quantize(rgb: np.ndarray) -> np.ndarray:
    """Round half away from zero to 8-bit"""
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def save_image(cloud: PixelCloud, path):
    _check_extension(path)
    pixels = quantize(cloud.rgb).reshape(cloud.height, cloud.width, 3)
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(pixels[:, :, ::-1])):
        raise OSError(f"Failed to write image {path}")
    logger.info(f"Saved {cloud.width}x{cloud.height} image to {path}")


class TransferAccumulator:
    """Running sums Y (n x 3) and coupling mass per pixel for one side"""

    def __init__(self, n: int):
        self.Y = np.zeros((n, 3))
        self.mass = np.zeros(n)
        self.draws = 0

    @property
    def n(self) -> int:
        return self.mass.shape[0]

    def coverage(self) -> float:
        """Fraction of pixels that received mass"""
        return float(np.mean(self.mass > 0))

    def mapped(self, original: np.ndarray, normalization: str) -> np.ndarray:
        if normalization == "paper_scaling":
            out = self.Y * (self.n / max(self.draws, 1))
        else:
            out = original.copy()
            hit = self.mass > 0
            out[hit] = self.Y[hit] / self.mass[hit, None]
        return np.clip(out, 0.0, 1.0)


@dataclass
class TransferResult:
    source_mapped: PixelCloud
    target_mapped: PixelCloud
    source_acc: TransferAccumulator
    target_acc: TransferAccumulator
    normalization: str

    def __iter__(self):
        return iter((self.source_mapped, self.target_mapped))

    @property
    def coverage(self) -> dict:
        return {"source": self.source_acc.coverage(), "target": self.target_acc.coverage()}

    def write_mass_csv(self, path, side: str = "source"):
        acc = self.source_acc if side == "source" else self.target_acc
        frame = pd.DataFrame({"pixel_index": np.arange(acc.n), "mass": acc.mass})
        frame.to_csv(path, index=False, float_format="%.17g")


def incremental_transfer(src: PixelCloud, tgt: PixelCloud, cost: CostSpec, cfg: MinibatchConfig,
                         normalization: str = "per_pixel_mass") -> TransferResult:
    """Streaming barycentric mapping in both directions

    Only m x m batch problems are materialised; accumulation runs in draw
    order so the output does not depend on the number of workers.
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"Unknown normalization '{normalization}', expected one of {NORMALIZATIONS}")
    cfg.validate(src.n, tgt.n)
    Xs, Xt = src.rgb, tgt.rgb
    acc_s = TransferAccumulator(src.n)
    acc_t = TransferAccumulator(tgt.n)
    logger.info(f"Color transfer: {src.n} -> {tgt.n} pixels, m={cfg.m}, k={cfg.k}, loss={cfg.loss}")

    get_pairs = pair_source(cfg, src.n, tgt.n)
    for block in iterate_blocks(Xs, Xt, cost, cfg, get_pairs, cfg.k, want_plans=True):
        A, B, res = block.A, block.B, block.result
        if res.sigma is not None:
            matched = np.take_along_axis(B, res.sigma, axis=1)
            weight = 1.0 / cfg.m
            np.add.at(acc_s.Y, A, weight * Xt[matched])
            np.add.at(acc_t.Y, matched, weight * Xs[A])
            np.add.at(acc_s.mass, A, weight)
            np.add.at(acc_t.mass, matched, weight)
        else:
            plans = res.plans
            np.add.at(acc_s.Y, A, np.einsum("cij,cjd->cid", plans, Xt[B]))
            np.add.at(acc_t.Y, B, np.einsum("cij,cid->cjd", plans, Xs[A]))
            np.add.at(acc_s.mass, A, plans.sum(axis=2))
            np.add.at(acc_t.mass, B, plans.sum(axis=1))
        acc_s.draws += len(A)
        acc_t.draws += len(A)

    result = TransferResult(
        PixelCloud(acc_s.mapped(Xs, normalization), src.width, src.height),
        PixelCloud(acc_t.mapped(Xt, normalization), tgt.width, tgt.height),
        acc_s, acc_t, normalization,
    )
    uncovered = 1.0 - result.coverage["source"]
    if uncovered > 0:
        logger.warning(f"{uncovered:.1%} of source pixels received no mass after k={cfg.k} draws")
    return result


def dense_barycentric_map(src: PixelCloud, tgt: PixelCloud, cost: CostSpec) -> np.ndarray:
    """n * Pi * X_t with the full exact plan (equal sizes, small n only)"""
    _, plan = solve_exact_assignment(src.as_distribution(), tgt.as_distribution(), cost, tie_break_cap=0)
    return np.clip(src.n * plan.matrix @ tgt.rgb, 0.0, 1.0)
