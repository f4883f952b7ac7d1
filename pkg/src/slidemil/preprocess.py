"""Tissue segmentation and patch-grid extraction from pyramidal slide images.

Any reader exposing the PyramidalImage surface works (adapter seam for
vendor slide formats); ArrayPyramid wraps an in-memory RGB array for tests
and for plain image files. All coordinates handed to read_region and stored
in PatchManifests are level-0 pixel coordinates; region width/height are in
the coordinates of the level being read.
"""

import json
from dataclasses import dataclass, field

import cv2
import numpy as np

from . import kernels
from .bagio import PatchManifest
from .errors import (
    EmptyManifest, EmptyTissue, MagnificationUnavailable, OutOfBounds,
    UnreadableImage,
)


@dataclass
class SegmentationParams:
    saturation_threshold: int = 8
    median_blur_kernel: int = 7
    morph_close_kernel: int = 4
    min_contour_area: float = 0.005   # fraction of thumbnail area
    hole_area_max: float = 0.0005     # holes at least this fraction are kept
    thumbnail_level: int | None = None  # level index; None = coarsest level

    def to_dict(self):
        return {
            "saturation_threshold": self.saturation_threshold,
            "median_blur_kernel": self.median_blur_kernel,
            "morph_close_kernel": self.morph_close_kernel,
            "min_contour_area": self.min_contour_area,
            "hole_area_max": self.hole_area_max,
            "thumbnail_level": self.thumbnail_level,
        }


@dataclass
class TissueMask:
    """Foreground/hole polygons in thumbnail coordinates."""
    foreground: list            # list of (n, 2) float arrays
    holes: list                 # list of (n, 2) float arrays
    downsample: float           # thumbnail downsample relative to level 0
    params: dict = field(default_factory=dict)


class PyramidalImage:
    """Read interface for multi-resolution slide images.

    Attributes:
        levels: list of (downsample, width, height), level 0 first and
            highest-resolution, downsamples strictly increasing.
        base_magnification: objective magnification of level 0.

    read_region(level, x, y, w, h) returns an (h, w, 3) uint8 RGB block;
    x and y are level-0 coordinates, w and h are in level coordinates.
    """

    levels = ()
    base_magnification = None

    def read_region(self, level, x, y, w, h):
        raise NotImplementedError


def box_downsample(block, factor):
    """Average non-overlapping factor x factor pixel blocks (round half even)."""
    if factor == 1:
        return block
    h, w = block.shape[:2]
    hh, ww = h // factor, w // factor
    trimmed = block[: hh * factor, : ww * factor].astype(np.float64)
    pooled = trimmed.reshape(hh, factor, ww, factor, -1).mean(axis=(1, 3))
    return np.rint(pooled).astype(np.uint8)


class ArrayPyramid(PyramidalImage):
    """PyramidalImage over explicit in-memory level arrays.

    Levels must halve in size successively (factor-2 pyramid). Use
    from_base() to derive levels from a single array by box downsampling.
    """

    def __init__(self, level_arrays, base_magnification=20.0):
        if not level_arrays:
            raise UnreadableImage("no pyramid levels")
        self._arrays = [np.asarray(a, dtype=np.uint8) for a in level_arrays]
        for arr in self._arrays:
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise UnreadableImage(f"level array must be HxWx3, got {arr.shape}")
        h0, w0 = self._arrays[0].shape[:2]
        self.levels = []
        for i, arr in enumerate(self._arrays):
            h, w = arr.shape[:2]
            ds = 2 ** i
            if (w0 // ds != w) or (h0 // ds != h):
                raise UnreadableImage(
                    f"level {i} is {w}x{h}, expected ~{w0 // ds}x{h0 // ds}")
            self.levels.append((float(ds), w, h))
        self.base_magnification = float(base_magnification)

    @classmethod
    def from_base(cls, base_array, num_levels=1, base_magnification=20.0):
        arrays = [np.asarray(base_array, dtype=np.uint8)]
        for _ in range(num_levels - 1):
            arrays.append(box_downsample(arrays[-1], 2))
        return cls(arrays, base_magnification=base_magnification)

    def read_region(self, level, x, y, w, h):
        ds, lw, lh = self.levels[level]
        xl = int(round(x / ds))
        yl = int(round(y / ds))
        if xl < 0 or yl < 0 or xl + w > lw or yl + h > lh:
            raise OutOfBounds(
                f"region ({x},{y})+{w}x{h} at level {level} exceeds {lw}x{lh}")
        return self._arrays[level][yl:yl + h, xl:xl + w].copy()


def load_image_pyramid(path, base_magnification=20.0, num_levels=4):
    """Open a flat image file (PNG/TIFF/JPEG) as a factor-2 pyramid."""
    arr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if arr is None:
        raise UnreadableImage(f"cannot read image: {path}")
    rgb = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
    h, w = rgb.shape[:2]
    max_levels = max(1, min(num_levels, int(np.log2(min(h, w))) - 1))
    return ArrayPyramid.from_base(rgb, num_levels=max_levels,
                                  base_magnification=base_magnification)


# --- segmentation -----------------------------------------------------


def segment_tissue(img, params=None):
    """Find tissue contours on a thumbnail.

    Pipeline: HSV conversion, median blur of the saturation channel, binary
    threshold, morphological closing, contour extraction with an area filter.
    Holes whose area fraction is at least params.hole_area_max are kept as
    exclusion zones; smaller holes are filled.
    """
    params = params or SegmentationParams()
    if not img.levels:
        raise UnreadableImage("image has no levels")
    level = params.thumbnail_level
    if level is None:
        level = len(img.levels) - 1
    if not (0 <= level < len(img.levels)):
        raise UnreadableImage(f"thumbnail level {level} out of range")
    ds, w, h = img.levels[level]
    try:
        thumb = img.read_region(level, 0, 0, w, h)
    except OutOfBounds as exc:
        raise UnreadableImage(str(exc)) from exc
    if thumb is None or thumb.ndim != 3 or thumb.shape[2] != 3:
        raise UnreadableImage("thumbnail is not an RGB block")

    hsv = cv2.cvtColor(thumb, cv2.COLOR_RGB2HSV)
    sat = cv2.medianBlur(hsv[:, :, 1], params.median_blur_kernel)
    _, binary = cv2.threshold(sat, params.saturation_threshold, 255,
                              cv2.THRESH_BINARY)
    kernel = np.ones((params.morph_close_kernel, params.morph_close_kernel),
                     dtype=np.uint8)
    closed = cv2.morphologyEx(binary, cv2.MORPH_CLOSE, kernel)

    contours, hierarchy = cv2.findContours(closed, cv2.RETR_CCOMP,
                                           cv2.CHAIN_APPROX_NONE)
    thumb_area = float(w * h)
    foreground, holes = [], []
    if hierarchy is not None:
        hierarchy = hierarchy[0]
        kept_parents = set()
        for i, cnt in enumerate(contours):
            if hierarchy[i][3] != -1:
                continue  # hole, handled via its parent below
            area = cv2.contourArea(cnt)
            if area / thumb_area < params.min_contour_area:
                continue
            kept_parents.add(i)
            foreground.append(cnt.reshape(-1, 2).astype(np.float64))
        for i, cnt in enumerate(contours):
            parent = hierarchy[i][3]
            if parent == -1 or parent not in kept_parents:
                continue
            area = cv2.contourArea(cnt)
            if area / thumb_area >= params.hole_area_max:
                holes.append(cnt.reshape(-1, 2).astype(np.float64))
    if not foreground:
        raise EmptyTissue("no contour passed the area filter")
    return TissueMask(foreground=foreground, holes=holes, downsample=float(ds),
                      params=params.to_dict())


def _centers_in_mask(centers_thumb, mask):
    inside = np.zeros(centers_thumb.shape[0], dtype=bool)
    for poly in mask.foreground:
        inside |= kernels.points_in_polygon(centers_thumb, poly)
    for poly in mask.holes:
        inside &= ~kernels.points_in_polygon(centers_thumb, poly)
    return inside


def _target_downsample(img, magnification):
    base = img.base_magnification
    if base is None or magnification <= 0:
        raise MagnificationUnavailable(
            f"cannot derive {magnification}x (base magnification {base})")
    ratio = base / magnification
    if ratio < 1.0 - 1e-9:
        raise MagnificationUnavailable(
            f"requested {magnification}x exceeds base {base}x")
    rounded = round(ratio)
    if abs(ratio - rounded) > 1e-9:
        raise MagnificationUnavailable(
            f"{magnification}x is not an integer downsample of {base}x")
    return int(rounded)


def extract_patch_grid(img, mask, magnification, patch_size=256, stride=None):
    """Tile the requested magnification plane and keep tissue patches.

    A grid point survives when the patch center falls inside a foreground
    contour and outside every hole. Coordinates are stored in level-0 pixel
    space; the manifest's magnification field records the target plane.
    Order is row-major, top-left to bottom-right.
    """
    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    stride = stride or patch_size
    ds_t = _target_downsample(img, magnification)
    _, w0, h0 = img.levels[0]
    wt, ht = w0 // ds_t, h0 // ds_t
    xs = np.arange(0, wt - patch_size + 1, stride, dtype=np.int64)
    ys = np.arange(0, ht - patch_size + 1, stride, dtype=np.int64)
    if xs.size == 0 or ys.size == 0:
        raise EmptyManifest(
            f"target plane {wt}x{ht} cannot fit a {patch_size}px patch")
    gx, gy = np.meshgrid(xs, ys)          # row-major: y outer, x inner
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    centers0 = (grid + patch_size / 2.0) * ds_t      # level-0 coords
    centers_thumb = centers0 / mask.downsample
    keep = _centers_in_mask(centers_thumb, mask)
    if not keep.any():
        raise EmptyManifest("no patch center falls inside tissue")
    coords = [(int(x) * ds_t, int(y) * ds_t) for x, y in grid[keep]]
    return PatchManifest(
        slide_id=getattr(img, "slide_id", ""),
        magnification=float(magnification),
        patch_size=int(patch_size),
        coordinates=coords,
        segmentation_params=dict(mask.params),
    )


def crop_patches(img, manifest):
    """Yield (coordinate, patch block) pairs in manifest order.

    Each block is patch_size x patch_size x 3 uint8 at the manifest's
    magnification. When no pyramid level matches that plane, the patch is
    read from the finest level with an integer factor and box-downsampled.
    """
    ds_t = _target_downsample(img, manifest.magnification)
    p = manifest.patch_size
    _, w0, h0 = img.levels[0]
    read_level, read_factor = 0, ds_t
    for level, (ds, _, _) in enumerate(img.levels):
        ds = int(round(ds))
        if ds <= ds_t and ds_t % ds == 0:
            read_level, read_factor = level, ds_t // ds
    for (x, y) in manifest.coordinates:
        if x < 0 or y < 0 or x + p * ds_t > w0 or y + p * ds_t > h0:
            raise OutOfBounds(
                f"patch at ({x},{y}) spans {p * ds_t} level-0 px, "
                f"image is {w0}x{h0}")
        block = img.read_region(read_level, x, y, p * read_factor,
                                p * read_factor)
        yield (x, y), box_downsample(block, read_factor)


# --- manifest persistence ----------------------------------------------


def write_patch_manifest(manifest, path):
    payload = {
        "slide_id": manifest.slide_id,
        "magnification": manifest.magnification,
        "patch_size": manifest.patch_size,
        "coordinates": [[int(x), int(y)] for x, y in manifest.coordinates],
        "segmentation_params": manifest.segmentation_params,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_patch_manifest(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return PatchManifest(
        slide_id=payload["slide_id"],
        magnification=payload["magnification"],
        patch_size=payload["patch_size"],
        coordinates=[(int(x), int(y)) for x, y in payload["coordinates"]],
        segmentation_params=payload.get("segmentation_params", {}),
    )
