"""Color-difference evaluation: sRGB/Lab conversions, CIEDE2000, MSE,
angular error, and mean/median/trimean aggregation.

All accumulation happens in float64 regardless of image precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

# linear sRGB -> XYZ, D65 white, 2 degree observer
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])

_POW25_7 = 25.0**7


@dataclass(frozen=True)
class LabColor:
    """CIE L*a*b* triplet; L in [0,100] for in-gamut sRGB."""

    L: float
    a: float
    b: float

    def as_array(self):
        return np.array([self.L, self.a, self.b])


def srgb_to_linear(v):
    """IEC 61966-2-1 decoding, elementwise on [0,1] values."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v):
    """IEC 61966-2-1 encoding, elementwise on [0,1] values."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * np.maximum(v, 0.0) ** (1.0 / 2.4) - 0.055)


def srgb_to_lab(rgb):
    """Encoded sRGB [...,3] in [0,1] -> CIE Lab [...,3] (D65)."""
    linear = srgb_to_linear(rgb)
    xyz = linear @ _RGB_TO_XYZ.T
    t = xyz / _D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3.0 * delta**2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def delta_e_2000(x, y):
    """CIEDE2000 color difference (kL = kC = kH = 1, full hue-rotation term).

    Accepts LabColor values or Lab arrays [...,3]; returns a scalar or [...].
    """
    if isinstance(x, LabColor):
        x = x.as_array()
    if isinstance(y, LabColor):
        y = y.as_array()
    lab1 = np.asarray(x, dtype=np.float64)
    lab2 = np.asarray(y, dtype=np.float64)
    scalar = lab1.ndim == 1
    l1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    l2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    cbar7 = ((c1 + c2) / 2.0) ** 7
    g = 0.5 * (1.0 - np.sqrt(cbar7 / (cbar7 + _POW25_7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)

    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, h1p)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, h2p)

    dlp = l2 - l1
    dcp = c2p - c1p
    chroma_zero = c1p * c2p == 0
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, dh)
    dh = np.where(dh < -180.0, dh + 360.0, dh)
    dh = np.where(chroma_zero, 0.0, dh)
    dhp = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh) / 2.0)

    lbar = (l1 + l2) / 2.0
    cbar = (c1p + c2p) / 2.0
    hsum = h1p + h2p
    habs = np.abs(h1p - h2p)
    hbar = np.where(
        chroma_zero,
        hsum,
        np.where(
            habs <= 180.0,
            hsum / 2.0,
            np.where(hsum < 360.0, hsum / 2.0 + 180.0, hsum / 2.0 - 180.0),
        ),
    )

    t = (
        1.0
        - 0.17 * np.cos(np.radians(hbar - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * hbar))
        + 0.32 * np.cos(np.radians(3.0 * hbar + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * hbar - 63.0))
    )
    dtheta = 30.0 * np.exp(-(((hbar - 275.0) / 25.0) ** 2))
    cbar7 = cbar**7
    rc = 2.0 * np.sqrt(cbar7 / (cbar7 + _POW25_7))
    lm50 = (lbar - 50.0) ** 2
    sl = 1.0 + 0.015 * lm50 / np.sqrt(20.0 + lm50)
    sc = 1.0 + 0.045 * cbar
    sh = 1.0 + 0.015 * cbar * t
    rt = -np.sin(np.radians(2.0 * dtheta)) * rc

    fl = dlp / sl
    fc = dcp / sc
    fh = dhp / sh
    de = np.sqrt(fl**2 + fc**2 + fh**2 + rt * fc * fh)
    return float(de) if scalar else de


def image_delta_e(img, gt):
    """Mean per-pixel CIEDE2000 between two encoded sRGB images."""
    _check_image_pair(img, gt, "image_delta_e")
    return float(np.mean(delta_e_2000(srgb_to_lab(img), srgb_to_lab(gt))))


def mse(img, gt):
    """Mean squared error on the 8-bit scale (values x 255)."""
    _check_image_pair(img, gt, "mse")
    diff = (np.asarray(img, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) * 255.0
    return float(np.mean(diff * diff))


def mae_angular(img, gt, min_norm=1e-6):
    """Mean angle in degrees between per-pixel RGB vectors.

    Pixels where either vector has norm below `min_norm` are skipped.
    """
    _check_image_pair(img, gt, "mae_angular")
    a = np.asarray(img, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    keep = (na >= min_norm) & (nb >= min_norm)
    if not keep.any():
        return 0.0
    cos = np.sum(a[keep] * b[keep], axis=1) / (na[keep] * nb[keep])
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).mean())


def _check_image_pair(img, gt, op):
    img = np.asarray(img)
    gt = np.asarray(gt)
    if img.shape != gt.shape:
        raise ValueError(f"{op}: image shapes differ, {img.shape} vs {gt.shape}")
    if img.ndim < 1 or img.shape[-1] != 3:
        raise ValueError(f"{op}: expected RGB arrays [...,3], got {img.shape}")


def aggregate(values):
    """(mean, median, trimean) of a list of scalars.

    Quartiles use linear interpolation (inclusive method);
    trimean = (Q1 + 2*Q2 + Q3) / 4.
    """
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate: empty value list")
    q1, q2, q3 = np.percentile(v, [25.0, 50.0, 75.0])
    return float(v.mean()), float(q2), float((q1 + 2.0 * q2 + q3) / 4.0)


@dataclass
class MetricsReport:
    """Mean/median/trimean of each metric over an image set."""

    image_count: int
    de2000: tuple
    mse: tuple
    mae: tuple
    per_image: list

    METRIC_NAMES = ("de2000", "mse", "mae")

    def to_table(self, title="metrics"):
        lines = [f"{title}  ({self.image_count} images)"]
        lines.append(f"{'metric':<8}{'mean':>12}{'median':>12}{'trimean':>12}")
        for name, stats in (("dE2000", self.de2000), ("MSE", self.mse), ("MAE", self.mae)):
            lines.append(f"{name:<8}{stats[0]:>12.4f}{stats[1]:>12.4f}{stats[2]:>12.4f}")
        return "\n".join(lines)

    def to_records(self, split=""):
        summary = {"record": "summary", "split": split, "image_count": self.image_count}
        for name, stats in (("de2000", self.de2000), ("mse", self.mse), ("mae", self.mae)):
            summary[name] = {"mean": stats[0], "median": stats[1], "trimean": stats[2]}
        records = [
            {"record": "image", "id": r["id"], "de2000": r["de2000"], "mse": r["mse"], "mae": r["mae"]}
            for r in self.per_image
        ]
        return records + [summary]

    def to_json(self, split=""):
        return json.dumps(self.to_records(split), indent=2, sort_keys=True)


def compute_report(pairs):
    """Build a MetricsReport from (image_id, prediction, ground_truth) triples."""
    per_image = []
    for image_id, pred, gt in pairs:
        per_image.append(
            {
                "id": image_id,
                "de2000": image_delta_e(pred, gt),
                "mse": mse(pred, gt),
                "mae": mae_angular(pred, gt),
            }
        )
    if not per_image:
        raise ValueError("compute_report: no image pairs supplied")
    return MetricsReport(
        image_count=len(per_image),
        de2000=aggregate([r["de2000"] for r in per_image]),
        mse=aggregate([r["mse"] for r in per_image]),
        mae=aggregate([r["mae"] for r in per_image]),
        per_image=per_image,
    )
