"""Procedural stereo scenes with an optional transparent layer.

Scenes are two fronto-parallel planes: an opaque background wall and an
optional glass-like layer covering a rectangular extent.  Every surface
is textured by an analytic, seeded pattern that can be evaluated at
arbitrary float coordinates, so the right view is rendered by sampling
the same pattern at column + disparity and the two views are exactly
warp-consistent (no resampling error in the ground truth).

Compositing inside the layer extent:

    t_local = transmittance * (1 - stain * stain_density)
    pixel = (1 - t_local) * layer + t_local * background + specular

Stains and speculars are anchored to the layer plane, which gives the
foreground surface matchable structure even at high transmittance.  The
specular pattern is additionally offset between the views by a fixed
sub-pixel shift, a mild view-dependent effect.

A layer with transmittance 0 is an opaque pane: the transparent mask is
empty and background pixels hidden behind the pane in the right view
are marked invalid (half-occlusion).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .losses import GroundTruth

TEXTURE_KINDS = ("noise", "stripes", "checker")
SPECULAR_VIEW_SHIFT = 0.75  # px, horizontal specular offset in the right view


@dataclass(frozen=True)
class CameraRig:
    """Rectified pair geometry; focal length in pixels, baseline in meters."""

    focal: float = 933.34
    baseline: float = 0.2
    width: int = 960
    height: int = 540

    def disparity_to_depth(self, d):
        return self.focal * self.baseline / d

    def depth_to_disparity(self, z):
        return self.focal * self.baseline / z


ROOM_RIG = CameraRig()
TABLETOP_RIG = CameraRig(baseline=0.1)
DESK_RIG = CameraRig(baseline=0.1, width=320, height=240)


@dataclass(frozen=True)
class LayerSpec:
    depth: float  # meters
    texture: str  # one of TEXTURE_KINDS
    seed: int
    transmittance: float = 0.0  # 0 = opaque
    stain_density: float = 0.0
    specular_strength: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    background: LayerSpec  # transmittance ignored; always opaque
    layer: LayerSpec | None
    extent: tuple[int, int, int, int] | None  # (row0, col0, row1, col1), left view
    seed: int


@dataclass
class RenderedSample:
    left: np.ndarray  # (H, W, 3) uint8
    right: np.ndarray
    gt: GroundTruth
    spec: SceneSpec
    rig: CameraRig


# ---------------------------------------------------------------------------
# analytic textures

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xC2B2AE3D27D4EB4F)
_MIX3 = np.uint64(0xD6E8FEB86659FD93)


def _hash_unit(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> [0, 1); splitmix-style finalizer."""
    with np.errstate(over="ignore"):
        h = (
            ix.astype(np.uint64) * _MIX1
            ^ iy.astype(np.uint64) * _MIX2
            ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _MIX3
        )
        h ^= h >> np.uint64(30)
        h *= _MIX3
        h ^= h >> np.uint64(27)
        h *= _MIX1
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _param(seed: int, salt: int) -> float:
    """One deterministic scalar in [0, 1) per (seed, salt)."""
    return float(_hash_unit(np.array(salt, dtype=np.int64), np.array(0), seed))


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def smoothstep(e0: float, e1: float, x: np.ndarray) -> np.ndarray:
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def value_noise(
    x: np.ndarray, y: np.ndarray, seed: int, cell: float, octaves: int = 2
) -> np.ndarray:
    """Smooth seeded noise in [0, 1], continuous over the whole plane."""
    total = np.zeros(np.broadcast(x, y).shape)
    amp_sum = 0.0
    amp = 1.0
    freq = 1.0 / cell
    for octave in range(octaves):
        px = np.asarray(x) * freq
        py = np.asarray(y) * freq
        ix = np.floor(px).astype(np.int64)
        iy = np.floor(py).astype(np.int64)
        fx = _fade(px - ix)
        fy = _fade(py - iy)
        s = seed + 7919 * octave
        c00 = _hash_unit(ix, iy, s)
        c10 = _hash_unit(ix + 1, iy, s)
        c01 = _hash_unit(ix, iy + 1, s)
        c11 = _hash_unit(ix + 1, iy + 1, s)
        top = c00 + (c10 - c00) * fx
        bot = c01 + (c11 - c01) * fx
        total += amp * (top + (bot - top) * fy)
        amp_sum += amp
        amp *= 0.5
        freq *= 2.0
    return total / amp_sum


def stripes(x: np.ndarray, y: np.ndarray, seed: int, period: float) -> np.ndarray:
    angle = 2.0 * np.pi * _param(seed, 1)
    phase = 2.0 * np.pi * _param(seed, 2)
    u = np.asarray(x) * np.cos(angle) + np.asarray(y) * np.sin(angle)
    return 0.5 + 0.5 * np.sin(2.0 * np.pi * u / period + phase)


def checker(x: np.ndarray, y: np.ndarray, seed: int, period: float) -> np.ndarray:
    p1 = 2.0 * np.pi * _param(seed, 3)
    p2 = 2.0 * np.pi * _param(seed, 4)
    s = np.sin(2.0 * np.pi * np.asarray(x) / period + p1) * np.sin(
        2.0 * np.pi * np.asarray(y) / period + p2
    )
    return 0.5 + 0.5 * np.tanh(3.0 * s)


def _warp(
    x: np.ndarray, y: np.ndarray, seed: int, period: float, amp: float = 2.0
) -> tuple[np.ndarray, np.ndarray]:
    """Smooth coordinate distortion of about two periods amplitude.

    The distortion varies over about 1.6 periods so the pattern's phase
    decoheres between pixels a few periods apart.
    """
    wx = value_noise(x, y, seed + 303, cell=1.6 * period) - 0.5
    wy = value_noise(x, y, seed + 404, cell=1.6 * period) - 0.5
    return x + amp * period * wx, y + amp * period * wy


def surface_pattern(spec: LayerSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Luminance pattern in [0, 1] for a surface, sampled at float coords.

    Periodic kinds are domain-warped and blended with noise: a strict
    period puts an equal-height ghost peak in the matching cost one
    period away, while the warp decoheres the phase over a few periods
    and keeps the local look.  The finest noise octave stays above ~4 px
    so point sampling at fractional disparities keeps the views
    correlated.
    """
    cell = 16.0 + 12.0 * _param(spec.seed, 5)
    base = value_noise(x, y, spec.seed, cell, octaves=3)
    if spec.texture == "noise":
        return base
    if spec.texture == "stripes":
        period = 18.0 + 22.0 * _param(spec.seed, 6)
        u, v = _warp(x, y, spec.seed, period)
        return 0.65 * base + 0.35 * stripes(u, v, spec.seed + 101, period)
    if spec.texture == "checker":
        period = 16.0 + 20.0 * _param(spec.seed, 7)
        u, v = _warp(x, y, spec.seed, period)
        return 0.65 * base + 0.35 * checker(u, v, spec.seed + 202, period)
    raise ValueError(f"unknown texture kind {spec.texture!r}")


def _base_color(seed: int) -> np.ndarray:
    return np.array(
        [0.35 + 0.65 * _param(seed, 11 + c) for c in range(3)], dtype=np.float64
    )


def _surface_rgb(spec: LayerSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    lum = 0.3 + 0.7 * surface_pattern(spec, x, y)
    return lum[:, :, None] * _base_color(spec.seed)[None, None, :]


def _stain(spec: LayerSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = value_noise(x, y, spec.seed + 977, cell=9.0, octaves=2)
    return smoothstep(0.52, 0.72, n)


def _specular(spec: LayerSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = value_noise(np.asarray(x) / 5.0, np.asarray(y) / 1.4, spec.seed + 1511, cell=4.0)
    return smoothstep(0.6, 0.85, n)


# ---------------------------------------------------------------------------
# rendering

def render(spec: SceneSpec, rig: CameraRig) -> RenderedSample:
    h, w = rig.height, rig.width
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    d_bg = rig.depth_to_disparity(spec.background.depth)

    views = []
    member_left = np.zeros((h, w), dtype=bool)
    d_fg = d_bg
    for is_right in (False, True):
        off = d_bg if is_right else 0.0
        img = _surface_rgb(spec.background, cols + off, rows)
        if spec.layer is not None:
            layer = spec.layer
            d_fg = rig.depth_to_disparity(layer.depth)
            if d_fg <= d_bg:
                raise ValueError("layer must be closer than the background")
            r0, c0, r1, c1 = spec.extent
            loff = d_fg if is_right else 0.0
            lx = cols + loff
            member = (rows >= r0) & (rows < r1) & (lx >= c0) & (lx < c1)
            if not is_right:
                member_left = member
            fg = _surface_rgb(layer, lx, rows)
            t_local = layer.transmittance * (
                1.0 - _stain(layer, lx, rows) * layer.stain_density
            )
            shade = (1.0 - t_local)[:, :, None] * fg + t_local[:, :, None] * img
            if layer.specular_strength > 0.0:
                sx = lx + (SPECULAR_VIEW_SHIFT if is_right else 0.0)
                shade = shade + (
                    layer.specular_strength * _specular(layer, sx, rows)
                )[:, :, None]
            img = np.where(member[:, :, None], shade, img)
        views.append(
            np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
        )

    fg_disp = np.where(member_left, d_fg, d_bg)
    transparent = member_left & (spec.layer is not None and spec.layer.transmittance > 0.0)
    bg_disp = np.where(transparent, d_bg, fg_disp)
    valid = cols >= fg_disp
    if spec.layer is not None and spec.layer.transmittance == 0.0:
        # background pixels hidden behind the opaque pane in the right view
        r0, c0, r1, c1 = spec.extent
        rx = cols - d_bg
        occluded = (
            ~member_left
            & (rows >= r0)
            & (rows < r1)
            & (rx >= c0 - d_fg)
            & (rx < c1 - d_fg)
        )
        valid &= ~occluded
    gt = GroundTruth(
        fg_disparity=fg_disp,
        bg_disparity=bg_disp,
        transparent_mask=transparent,
        valid=valid,
    )
    return RenderedSample(left=views[0], right=views[1], gt=gt, spec=spec, rig=rig)


# ---------------------------------------------------------------------------
# dataset generation

@dataclass(frozen=True)
class GeneratorConfig:
    preset: str = "two_layer"  # "two_layer" | "opaque" | "mixed"
    background_disparity: tuple[float, float] = (24.0, 40.0)
    separation: tuple[float, float] = (20.0, 46.0)
    transmittance: tuple[float, float] = (0.5, 0.9)
    # a clean pane is invisible to any matcher; stains and speculars are
    # the surface-anchored evidence that makes the glass estimable
    stain_density: tuple[float, float] = (0.35, 0.7)
    specular: tuple[float, float] = (0.05, 0.15)


def sample_scene_spec(
    seed: int, gcfg: GeneratorConfig, rig: CameraRig, with_layer: bool
) -> SceneSpec:
    rng = np.random.default_rng(seed)
    d_bg = rng.uniform(*gcfg.background_disparity)
    bg = LayerSpec(
        depth=rig.disparity_to_depth(d_bg),
        texture=str(rng.choice(TEXTURE_KINDS)),
        seed=int(rng.integers(1 << 31)),
    )
    if not with_layer:
        return SceneSpec(background=bg, layer=None, extent=None, seed=seed)
    d_fg = d_bg + rng.uniform(*gcfg.separation)
    layer = LayerSpec(
        depth=rig.disparity_to_depth(d_fg),
        texture=str(rng.choice(TEXTURE_KINDS)),
        seed=int(rng.integers(1 << 31)),
        transmittance=rng.uniform(*gcfg.transmittance),
        stain_density=rng.uniform(*gcfg.stain_density),
        specular_strength=rng.uniform(*gcfg.specular),
    )
    h, w = rig.height, rig.width
    r0 = int(rng.uniform(0.10, 0.28) * h)
    r1 = r0 + int(rng.uniform(0.42, 0.62) * h)
    c0 = int(rng.uniform(0.16, 0.34) * w)
    c1 = c0 + int(rng.uniform(0.36, 0.54) * w)
    return SceneSpec(
        background=bg,
        layer=layer,
        extent=(r0, c0, min(r1, h - 8), min(c1, w - 8)),
        seed=seed,
    )


def _spec_meta(sample: RenderedSample) -> list[tuple[str, str]]:
    spec, rig = sample.spec, sample.rig
    ff = fileio.format_float
    items = [
        ("seed", str(spec.seed)),
        ("rig.focal", ff(rig.focal)),
        ("rig.baseline", ff(rig.baseline)),
        ("background.depth", ff(spec.background.depth)),
        ("background.texture", spec.background.texture),
        ("background.seed", str(spec.background.seed)),
    ]
    if spec.layer is not None:
        items += [
            ("layer.depth", ff(spec.layer.depth)),
            ("layer.texture", spec.layer.texture),
            ("layer.seed", str(spec.layer.seed)),
            ("layer.transmittance", ff(spec.layer.transmittance)),
            ("layer.stain_density", ff(spec.layer.stain_density)),
            ("layer.specular_strength", ff(spec.layer.specular_strength)),
            ("layer.extent", " ".join(str(v) for v in spec.extent)),
        ]
    return items


def mask_to_png(gt: GroundTruth) -> np.ndarray:
    mask = np.full(gt.fg_disparity.shape, fileio.MASK_NORMAL, dtype=np.uint8)
    mask[gt.transparent_mask] = fileio.MASK_TRANSPARENT
    mask[~gt.valid_mask()] = fileio.MASK_INVALID
    return mask


def write_sample(root: Path, sample_id: str, sample: RenderedSample) -> fileio.SampleRecord:
    d = Path(root) / sample_id
    d.mkdir(parents=True, exist_ok=True)
    fileio.write_png(sample.left, d / "left.png")
    fileio.write_png(sample.right, d / "right.png")
    fileio.write_pfm(sample.gt.fg_disparity.astype(np.float32), d / "disp_fg.pfm")
    fileio.write_pfm(sample.gt.bg_disparity.astype(np.float32), d / "disp_bg.pfm")
    fileio.write_png(mask_to_png(sample.gt), d / "mask.png")
    fileio.write_kv(d / "meta", _spec_meta(sample))
    layer = sample.spec.layer
    transparent = layer is not None and layer.transmittance > 0.0
    return fileio.SampleRecord(
        sample_id=sample_id,
        left=f"{sample_id}/left.png",
        right=f"{sample_id}/right.png",
        disp_fg=f"{sample_id}/disp_fg.pfm",
        disp_bg=f"{sample_id}/disp_bg.pfm",
        mask=f"{sample_id}/mask.png",
        seed=sample.spec.seed,
        background_depth=sample.spec.background.depth,
        layer_depth=layer.depth if transparent else None,
        transmittance=layer.transmittance if transparent else None,
    )


def make_dataset(
    out_dir,
    count: int,
    seed: int,
    gcfg: GeneratorConfig | None = None,
    rig: CameraRig = DESK_RIG,
) -> fileio.DatasetManifest:
    """Render `count` scenes under out_dir and write the manifest."""
    gcfg = gcfg or GeneratorConfig()
    if gcfg.preset not in ("two_layer", "opaque", "mixed"):
        raise ValueError(f"unknown preset {gcfg.preset!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(seed)
    manifest = fileio.DatasetManifest(
        focal=rig.focal, baseline=rig.baseline, width=rig.width, height=rig.height
    )
    for i in range(count):
        sample_seed = int(master.integers(1 << 31))
        coin = master.random()
        if gcfg.preset == "two_layer":
            with_layer = True
        elif gcfg.preset == "opaque":
            with_layer = False
        else:
            with_layer = coin < 0.5
        spec = sample_scene_spec(sample_seed, gcfg, rig, with_layer)
        sample = render(spec, rig)
        manifest.samples.append(write_sample(out, f"{i:04d}", sample))
    fileio.write_manifest(manifest, out / "manifest.txt")
    return manifest


def load_sample(root, record: fileio.SampleRecord) -> tuple[np.ndarray, np.ndarray, GroundTruth]:
    """Read one dataset sample back as (left, right, ground truth)."""
    root = Path(root)
    left = fileio.read_png(root / record.left)
    right = fileio.read_png(root / record.right)
    fg = fileio.read_pfm(root / record.disp_fg).samples.astype(np.float64)
    bg = fileio.read_pfm(root / record.disp_bg).samples.astype(np.float64)
    mask = fileio.read_png(root / record.mask)
    gt = GroundTruth(
        fg_disparity=fg,
        bg_disparity=bg,
        transparent_mask=mask == fileio.MASK_TRANSPARENT,
        valid=mask != fileio.MASK_INVALID,
    )
    return left, right, gt
