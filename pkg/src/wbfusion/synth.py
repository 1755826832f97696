"""Synthetic multi-illuminant scene simulator.

Physically-motivated desk-scale stand-in for a captured dataset: Lambertian
reflectance fields lit by a smooth per-pixel mix of two (optionally three)
illuminants, rendered through von Kries white balance to sRGB under the five
camera presets, with ground truth from the exact per-pixel illuminant and a
gray-world AWB render used for brightness normalization.

All rendering runs in float64; disk images are 8-bit PNG.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .metrics import linear_to_srgb, srgb_to_linear
from .model import PRESET_NAMES, PresetStack

# preset correlated color temperatures (Kelvin); daylight/cloudy anchors are
# the photographic 5500K/6500K convention, the rest standard camera values
PRESET_CCT = {
    "tungsten": 2850.0,
    "fluorescent": 3800.0,
    "daylight": 5500.0,
    "cloudy": 6500.0,
    "shade": 7500.0,
}

_XYZ_TO_RGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)


def _cmf_xyz(lam):
    """Multi-lobe Gaussian fit of the CIE 1931 2-degree observer."""

    def lobe(mu, s1, s2):
        s = np.where(lam < mu, s1, s2)
        return np.exp(-0.5 * ((lam - mu) / s) ** 2)

    x = 1.056 * lobe(599.8, 37.9, 31.0) + 0.362 * lobe(442.0, 16.0, 26.7) - 0.065 * lobe(501.1, 20.4, 26.2)
    y = 0.821 * lobe(568.8, 46.9, 40.5) + 0.286 * lobe(530.9, 16.3, 31.1)
    z = 1.217 * lobe(437.0, 11.8, 36.0) + 0.681 * lobe(459.0, 26.0, 13.8)
    return x, y, z


def blackbody_chromaticity(cct):
    """Green-normalized linear-RGB color of a Planckian radiator at `cct` K."""
    lam = np.arange(380.0, 781.0, 2.0)
    lam_m = lam * 1e-9
    c2 = 1.4388e-2  # second radiation constant, m*K
    radiance = 1.0 / (lam_m**5 * np.expm1(c2 / (lam_m * cct)))
    xbar, ybar, zbar = _cmf_xyz(lam)
    xyz = np.array([(radiance * xbar).sum(), (radiance * ybar).sum(), (radiance * zbar).sum()])
    rgb = _XYZ_TO_RGB @ xyz
    rgb = np.maximum(rgb, 1e-6)
    return rgb / rgb[1]


def preset_table():
    """The five preset illuminant chromaticities, ordered as PRESET_NAMES."""
    return np.stack([blackbody_chromaticity(PRESET_CCT[name]) for name in PRESET_NAMES])


PRESET_CHROMA = preset_table()


@dataclass
class SceneSpec:
    """Everything needed to render one synthetic scene deterministically."""

    seed: int
    height: int
    width: int
    reflectance: np.ndarray  # [H,W,3] in [0.05, 0.95]
    illuminant_a: np.ndarray  # linear RGB, g = 1
    illuminant_b: np.ndarray
    mixing: np.ndarray  # [H,W] in [0,1], weight of illuminant_a
    exposure: float
    illuminant_c: np.ndarray | None = None  # optional third light
    mixing_c: np.ndarray | None = None


def generate_scene(seed, height, width, three_illuminants=False):
    """Random smooth reflectance + jittered preset-derived illuminant pair."""
    if height < 8 or width < 8:
        raise ValueError(f"scene size must be at least 8x8, got {height}x{width}")
    rng = np.random.default_rng(seed)

    ia, ib = rng.choice(len(PRESET_NAMES), size=2, replace=False)
    jitter = rng.uniform(0.85, 1.15, size=4)
    illum_a = PRESET_CHROMA[ia] * np.array([jitter[0], 1.0, jitter[1]])
    illum_b = PRESET_CHROMA[ib] * np.array([jitter[2], 1.0, jitter[3]])

    yy, xx = np.meshgrid(
        (np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij"
    )
    n_bumps = int(rng.integers(4, 9))
    reflectance = np.full((height, width, 3), 0.5)
    for _ in range(n_bumps):
        fx, fy = rng.uniform(0.2, 2.5, size=2)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.uniform(-0.22, 0.22, size=3)
        wave = np.cos(2.0 * math.pi * (fx * xx + fy * yy) + phase)
        reflectance += wave[:, :, None] * amp
    reflectance = np.clip(reflectance, 0.05, 0.95)

    theta = rng.uniform(0.0, 2.0 * math.pi)
    sharp = rng.uniform(5.0, 14.0)
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    ramp = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    mixing = 1.0 / (1.0 + np.exp(-sharp * ramp))

    exposure = float(rng.uniform(0.6, 0.9))

    illum_c = mixing_c = None
    if three_illuminants:
        ic = int(rng.integers(0, len(PRESET_NAMES)))
        jc = rng.uniform(0.85, 1.15, size=2)
        illum_c = PRESET_CHROMA[ic] * np.array([jc[0], 1.0, jc[1]])
        theta_c = rng.uniform(0.0, 2.0 * math.pi)
        sharp_c = rng.uniform(5.0, 14.0)
        cxc, cyc = rng.uniform(0.3, 0.7, size=2)
        ramp_c = (xx - cxc) * math.cos(theta_c) + (yy - cyc) * math.sin(theta_c)
        mixing_c = 0.5 / (1.0 + np.exp(-sharp_c * ramp_c))  # third light at most half

    return SceneSpec(
        seed=int(seed),
        height=height,
        width=width,
        reflectance=reflectance,
        illuminant_a=illum_a,
        illuminant_b=illum_b,
        mixing=mixing,
        exposure=exposure,
        illuminant_c=illum_c,
        mixing_c=mixing_c,
    )


def illumination_field(scene):
    """Per-pixel linear-RGB illuminant L(i), [H,W,3]."""
    mix = scene.mixing[:, :, None]
    # lerp written as b + m*(a-b) so a == b collapses exactly
    light = scene.illuminant_b + mix * (scene.illuminant_a - scene.illuminant_b)
    if scene.illuminant_c is not None:
        mc = scene.mixing_c[:, :, None]
        light = light + mc * (scene.illuminant_c - light)
    return light


def render_raw(scene):
    """Linear sensor image: exposure * reflectance * illumination."""
    return scene.exposure * scene.reflectance * illumination_field(scene)


def render_preset(scene, preset):
    """Von Kries white balance by `preset` gains, clipped and sRGB-encoded."""
    raw = render_raw(scene)
    return linear_to_srgb(np.clip(raw / np.asarray(preset), 0.0, 1.0))


def render_preset_stack(scene):
    return PresetStack(np.stack([render_preset(scene, chroma) for chroma in PRESET_CHROMA]))


def render_ground_truth(scene):
    """Perfect per-pixel white balance (the simulator knows L(i) exactly)."""
    raw = render_raw(scene)
    return linear_to_srgb(np.clip(raw / illumination_field(scene), 0.0, 1.0))


def render_awb(scene):
    """Gray-world global white balance, the brightness reference render."""
    raw = render_raw(scene)
    mean = raw.reshape(-1, 3).mean(axis=0)
    est = mean / mean[1]
    return linear_to_srgb(np.clip(raw / est, 0.0, 1.0))


def adjust_brightness(gt, awb, eps=1e-6):
    """Scale gt per pixel (in linear space) to match awb brightness.

    Brightness is the unweighted mean of the linear channels; pure scaling
    preserves per-pixel chromaticity except where clipping intervenes.
    """
    gt = np.asarray(gt)
    awb = np.asarray(awb)
    if gt.shape != awb.shape:
        raise ValueError(f"adjust_brightness: shape mismatch {gt.shape} vs {awb.shape}")
    gt_lin = srgb_to_linear(gt)
    awb_lin = srgb_to_linear(awb)
    scale = (awb_lin.mean(axis=-1) + eps) / (gt_lin.mean(axis=-1) + eps)
    adjusted = gt_lin * scale[..., None]
    return linear_to_srgb(np.clip(adjusted, 0.0, 1.0))


def _brightness_clip_count(gt, awb, eps=1e-6):
    gt_lin = srgb_to_linear(np.asarray(gt))
    awb_lin = srgb_to_linear(np.asarray(awb))
    scale = (awb_lin.mean(axis=-1) + eps) / (gt_lin.mean(axis=-1) + eps)
    return int(((gt_lin * scale[..., None]) > 1.0).any(axis=-1).sum())


@dataclass
class RenderedScene:
    scene_id: str
    spec: SceneSpec
    stack: PresetStack
    gt: np.ndarray
    awb: np.ndarray
    clipped_pixels: int
    split: str = ""


def render_scene(spec, scene_id=""):
    """Full render: preset stack, AWB reference, brightness-adjusted GT."""
    stack = render_preset_stack(spec)
    awb = render_awb(spec)
    gt_raw = render_ground_truth(spec)
    gt = adjust_brightness(gt_raw, awb)
    return RenderedScene(
        scene_id=scene_id,
        spec=spec,
        stack=stack,
        gt=gt,
        awb=awb,
        clipped_pixels=_brightness_clip_count(gt_raw, awb),
    )


# ---------------------------------------------------------------------------
# on-disk dataset


def split_sizes(n_scenes, ratios=(0.65, 0.15, 0.20)):
    """Scene counts per split: floor val/test, remainder goes to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n_val = int(n_scenes * ratios[1])
    n_test = int(n_scenes * ratios[2])
    return n_scenes - n_val - n_test, n_val, n_test


def to_uint8(img):
    return (np.clip(np.asarray(img), 0.0, 1.0) * 255.0).round().astype(np.uint8)


def save_png(path, img):
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path):
    """PNG -> float array in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


SCENE_IMAGE_NAMES = PRESET_NAMES + ("gt", "awb")


def build_dataset(n_scenes, height, width, seed, out_dir, split_ratios=(0.65, 0.15, 0.20), threads=1):
    """Generate, render, and write a scene-disjoint dataset.

    Layout: <out>/manifest.json plus one directory per scene holding the five
    preset renders, gt, awb (8-bit PNG) and a metadata.json sidecar. The build
    is a pure function of (n, height, width, seed).
    """
    if n_scenes < 1:
        raise ValueError(f"n_scenes must be >= 1, got {n_scenes}")
    n_train, n_val, n_test = split_sizes(n_scenes, split_ratios)
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2**31 - 1, size=n_scenes)

    os.makedirs(out_dir, exist_ok=True)
    splits = {"train": [], "val": [], "test": []}

    def build_one(index):
        scene_id = f"scene_{index:04d}"
        if index < n_train:
            split = "train"
        elif index < n_train + n_val:
            split = "val"
        else:
            split = "test"
        spec = generate_scene(int(scene_seeds[index]), height, width)
        scene = render_scene(spec, scene_id)
        scene_dir = os.path.join(out_dir, scene_id)
        os.makedirs(scene_dir, exist_ok=True)
        for name, img in zip(PRESET_NAMES, scene.stack.images):
            save_png(os.path.join(scene_dir, f"{name}.png"), img)
        save_png(os.path.join(scene_dir, "gt.png"), scene.gt)
        save_png(os.path.join(scene_dir, "awb.png"), scene.awb)
        metadata = {
            "scene_id": scene_id,
            "seed": int(scene_seeds[index]),
            "split": split,
            "illuminant_a": [float(v) for v in spec.illuminant_a],
            "illuminant_b": [float(v) for v in spec.illuminant_b],
            "exposure": spec.exposure,
            "clipped_pixel_count": scene.clipped_pixels,
        }
        with open(os.path.join(scene_dir, "metadata.json"), "w") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return scene_id, split

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(build_one, range(n_scenes)))
    else:
        results = [build_one(i) for i in range(n_scenes)]
    for scene_id, split in results:
        splits[split].append(scene_id)

    manifest = {
        "n_scenes": n_scenes,
        "height": height,
        "width": width,
        "seed": int(seed),
        "split_ratios": list(split_ratios),
        "splits": splits,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{data_dir}: no manifest.json (not a dataset directory)")
    with open(path) as fh:
        return json.load(fh)


def load_scene(data_dir, scene_id):
    """Read one scene back: (PresetStack, gt, awb) as float arrays."""
    scene_dir = os.path.join(data_dir, scene_id)
    presets = np.stack([load_png(os.path.join(scene_dir, f"{n}.png")) for n in PRESET_NAMES])
    gt = load_png(os.path.join(scene_dir, "gt.png"))
    awb = load_png(os.path.join(scene_dir, "awb.png"))
    return PresetStack(presets), gt, awb


def load_split(data_dir, split):
    """All scenes of a split as (scene_id, PresetStack, gt, awb) tuples."""
    manifest = load_manifest(data_dir)
    if split not in manifest["splits"]:
        raise ValueError(f"unknown split {split!r}; have {sorted(manifest['splits'])}")
    return [(sid, *load_scene(data_dir, sid)) for sid in manifest["splits"][split]]


def dataset_digest(data_dir):
    """SHA-256 over every file in the dataset tree, for determinism checks."""
    digest = hashlib.sha256()
    for root, dirs, files in sorted(os.walk(data_dir)):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(root, name)
            digest.update(os.path.relpath(path, data_dir).encode())
            with open(path, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()
