"""Equirectangular panorama geometry and perspective reprojection.

Conventions
-----------
Camera and world frames share axes: X right, Y down, Z forward. Image
row 0 of a panorama is straight up (latitude -pi/2 under the row mapping
``y = (lat / pi + 0.5) * (H - 1)``) and column 0 is longitude -pi. A
panorama box centred above the midline (``c_v < 0.5``) therefore pitches
the virtual camera upwards.

The view rotation applies pitch about the camera x-axis first and yaw about
the vertical axis second, ``R = R_y(yaw) @ R_x(pitch)`` acting on column
vectors. Written for row vectors (``v_row @ R.T``) this is the familiar
``R_x R_y`` product. This order keeps the box centre on the optical axis
and makes a change of yaw a pure longitude shift.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_CALIBRATION_C = 180.0


@dataclass(frozen=True)
class PanoBBox:
    c_u: float
    c_v: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if not 0.0 <= self.c_u < 1.0:
            raise ValueError(f"c_u must be in [0, 1), got {self.c_u}")
        if not 0.0 < self.c_v < 1.0:
            raise ValueError(f"c_v must be in (0, 1), got {self.c_v}")
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("bbox extent must be positive")


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    c_x: float
    c_y: float
    out_width: int
    out_height: int

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.c_x], [0.0, self.f, self.c_y], [0.0, 0.0, 1.0]])


@dataclass
class PerspectiveImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    bbox: PanoBBox
    aov_deg: float
    intrinsics: CameraIntrinsics
    pano_id: str = ""
    building_id: str = ""
    extra: dict = field(default_factory=dict)

    def provenance(self) -> dict:
        k = self.intrinsics
        return {
            "pano_id": self.pano_id,
            "building_id": self.building_id,
            "bbox": {
                "c_u": self.bbox.c_u,
                "c_v": self.bbox.c_v,
                "width_px": self.bbox.width_px,
                "height_px": self.bbox.height_px,
            },
            "aov_deg": self.aov_deg,
            "intrinsics": {"f": k.f, "c_x": k.c_x, "c_y": k.c_y},
            "output_dims": [k.out_width, k.out_height],
            **self.extra,
        }


def check_raster(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) raster, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("empty raster")
    return img


def check_panorama(pano: np.ndarray) -> np.ndarray:
    pano = check_raster(pano)
    h, w = pano.shape[:2]
    if w != 2 * h:
        raise ValueError(f"panorama must be 2:1 equirectangular, got {w}x{h}")
    return pano


# ----------------------------------------------------------------------------
# azimuths and crops


def azimuth_to_ratio(A_deg: float, H_deg: float, C_deg: float = DEFAULT_CALIBRATION_C) -> float:
    """Horizontal position (0..1) of compass bearing ``A_deg`` in a panorama
    captured with heading ``H_deg``."""
    r = ((A_deg - H_deg + C_deg) % 360.0) / 360.0
    return 0.0 if r >= 1.0 else r


def crop_aov(pano: np.ndarray, p_left: float, p_right: float) -> tuple[np.ndarray, int]:
    """Full-height slice running rightwards from ``p_left`` to ``p_right``,
    stitched across the seam when needed. Returns the crop and its left
    edge in panorama pixels."""
    pano = check_raster(pano)
    for p in (p_left, p_right):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"ratio {p} outside [0, 1)")
    w = pano.shape[1]
    left = int(round(p_left * w)) % w
    right = int(round(p_right * w)) % w
    width = (right - left) % w
    if width == 0:
        raise ValueError("zero-width crop")
    cols = (left + np.arange(width)) % w
    return pano[:, cols], left


def bbox_to_pano_coords(local_bbox, crop_offset_px: int, pano_dims: tuple[int, int]) -> PanoBBox:
    """Map a detector box ``(x0, y0, x1, y1)`` inside a crop back to panorama
    coordinates."""
    x0, y0, x1, y1 = (float(v) for v in local_bbox)
    W, H = pano_dims
    cx = (x0 + x1) / 2.0
    cy = (y0 + y1) / 2.0
    c_u = ((crop_offset_px + cx) % W) / W
    if c_u >= 1.0:
        c_u = 0.0
    return PanoBBox(
        c_u=c_u,
        c_v=cy / H,
        width_px=max(1, int(round(x1 - x0))),
        height_px=max(1, int(round(y1 - y0))),
    )


# ----------------------------------------------------------------------------
# camera model


def intrinsics_from_aov(aov_deg: float, out_width: int, out_height: int) -> CameraIntrinsics:
    if not 0.0 < aov_deg < 180.0:
        raise ValueError("invalid field of view")
    if out_width < 2 or out_height < 2:
        raise ValueError("output must be at least 2x2 pixels")
    f = (out_width / 2.0) / math.tan(math.radians(aov_deg / 2.0))
    return CameraIntrinsics(f, (out_width - 1) / 2.0, (out_height - 1) / 2.0, int(out_width), int(out_height))


def pixel_ray(k: CameraIntrinsics, x, y) -> np.ndarray:
    """Unit ray through pixel (x, y). Broadcasts; the last axis holds XYZ."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.stack(np.broadcast_arrays((x - k.c_x) / k.f, (y - k.c_y) / k.f, np.ones_like(x)), axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def project_to_pixel(k: CameraIntrinsics, v) -> np.ndarray:
    """Pinhole projection of camera-frame directions (Z > 0) to pixels."""
    v = np.asarray(v, dtype=float)
    x = k.f * v[..., 0] / v[..., 2] + k.c_x
    y = k.f * v[..., 1] / v[..., 2] + k.c_y
    return np.stack([x, y], axis=-1)


def rot_x(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def view_angles(c_u: float, c_v: float) -> tuple[float, float]:
    """(yaw, pitch) in degrees for a panorama box centre."""
    return (c_u - 0.5) * 360.0, (0.5 - c_v) * 180.0


def view_rotation(c_u: float, c_v: float) -> np.ndarray:
    yaw, pitch = view_angles(c_u, c_v)
    return rot_y(math.radians(yaw)) @ rot_x(math.radians(pitch))


# ----------------------------------------------------------------------------
# sphere <-> panorama


def direction_to_pano_pixel(v, w_pano: int, h_pano: int) -> np.ndarray:
    """Panorama pixel coordinates (x, y) for unit directions; last axis XYZ."""
    v = np.asarray(v, dtype=float)
    lam = np.arctan2(v[..., 0], v[..., 2])
    lat = np.arcsin(np.clip(v[..., 1], -1.0, 1.0))
    x = (lam / (2.0 * np.pi) + 0.5) * (w_pano - 1)
    y = (lat / np.pi + 0.5) * (h_pano - 1)
    return np.stack([x, y], axis=-1)


def pano_pixel_to_direction(xy, w_pano: int, h_pano: int) -> np.ndarray:
    """Inverse of :func:`direction_to_pano_pixel`."""
    xy = np.asarray(xy, dtype=float)
    lam = (xy[..., 0] / (w_pano - 1) - 0.5) * 2.0 * np.pi
    lat = (xy[..., 1] / (h_pano - 1) - 0.5) * np.pi
    c = np.cos(lat)
    return np.stack([c * np.sin(lam), np.sin(lat), c * np.cos(lam)], axis=-1)


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional (x, y): columns wrap, rows clamp."""
    h, w = img.shape[:2]
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64) % w
    x1 = (x0 + 1) % w
    y0 = y0.astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    src = img.astype(np.float64, copy=False)
    top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def sample_map(k: CameraIntrinsics, R: np.ndarray, w_pano: int, h_pano: int) -> np.ndarray:
    """Panorama coordinates for every output pixel, shape (H, W, 2)."""
    xs = np.arange(k.out_width, dtype=float)
    ys = np.arange(k.out_height, dtype=float)
    gx, gy = np.meshgrid(xs, ys)
    rays = pixel_ray(k, gx, gy)
    rotated = rays @ R.T
    return direction_to_pano_pixel(rotated, w_pano, h_pano)


def reproject(
    pano: np.ndarray,
    bbox: PanoBBox,
    aov_deg: float,
    pano_id: str = "",
    building_id: str = "",
) -> PerspectiveImage:
    """Render the panorama region around ``bbox`` through a virtual pinhole
    camera whose horizontal field of view is ``aov_deg``."""
    pano = check_panorama(pano)
    h_pano, w_pano = pano.shape[:2]
    if bbox.width_px > w_pano or bbox.height_px > h_pano:
        raise ValueError("bbox larger than panorama")
    k = intrinsics_from_aov(aov_deg, max(2, bbox.width_px), max(2, bbox.height_px))
    R = view_rotation(bbox.c_u, bbox.c_v)
    m = sample_map(k, R, w_pano, h_pano)
    out = bilinear_sample(pano, m[..., 0], m[..., 1])
    pixels = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return PerspectiveImage(pixels, bbox, float(aov_deg), k, pano_id, building_id)
