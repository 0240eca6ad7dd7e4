"""Bit-exact file formats: PFM float maps, 8-bit PNGs, key-value text, PLY clouds.

PFM here is the single-channel "Pf" variant: a three-line ASCII header
(magic, "width height", scale) followed by raw 32-bit floats stored
bottom row first.  The sign of the scale encodes byte order (negative =
little-endian).  Write-then-read round trips are bit-exact.

The key-value grammar used for manifests and run configs:

    # comment lines and blank lines are ignored
    dotted.key = value

Keys match [a-z0-9_.]+; values are the rest of the line, stripped.
Writers emit keys in a stable order and format floats with %.9g.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# Mask PNG encoding shared by the dataset generator and the matcher output.
MASK_NORMAL = 0
MASK_TRANSPARENT = 128
MASK_INVALID = 255


class PfmFormatError(ValueError):
    """Malformed PFM header or payload."""


@dataclass(frozen=True)
class PfmImage:
    samples: np.ndarray  # (H, W) float32
    scale: float = -1.0

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]


def write_pfm(data, path, scale: float = -1.0) -> None:
    """Write a single-channel PFM; negative scale means little-endian."""
    arr = np.asarray(data.samples if isinstance(data, PfmImage) else data)
    if isinstance(data, PfmImage):
        scale = data.scale
    if arr.ndim != 2:
        raise PfmFormatError(f"PFM payload must be 2-D, got shape {arr.shape}")
    if scale == 0.0:
        raise PfmFormatError("PFM scale must be nonzero")
    arr = arr.astype(np.float32, copy=False)
    h, w = arr.shape
    dtype = "<f4" if scale < 0 else ">f4"
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{scale:.9g}\n".encode("ascii"))
        f.write(arr[::-1].astype(dtype).tobytes())


def read_pfm(path) -> PfmImage:
    """Read a single-channel PFM; rejects the 3-channel "PF" variant."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            raise PfmFormatError("3-channel PFM not supported (expected grayscale 'Pf')")
        if magic != b"Pf":
            raise PfmFormatError(f"bad PFM magic {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise PfmFormatError("bad PFM dimension line")
        try:
            w, h = int(dims[0]), int(dims[1])
        except ValueError as exc:
            raise PfmFormatError("bad PFM dimension line") from exc
        if w <= 0 or h <= 0:
            raise PfmFormatError(f"bad PFM dimensions {w}x{h}")
        try:
            scale = float(f.readline().strip())
        except ValueError as exc:
            raise PfmFormatError("bad PFM scale line") from exc
        if scale == 0.0:
            raise PfmFormatError("PFM scale must be nonzero")
        payload = f.read(4 * w * h)
        if len(payload) != 4 * w * h:
            raise PfmFormatError(
                f"truncated PFM payload: expected {4 * w * h} bytes, got {len(payload)}"
            )
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1]
    return PfmImage(np.ascontiguousarray(arr, dtype=np.float32), scale)


def write_png(arr: np.ndarray, path) -> None:
    """Write an 8-bit grayscale or RGB PNG."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"PNG writer expects uint8 data, got {arr.dtype}")
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path))


def format_float(x: float) -> str:
    return f"{x:.9g}"


def write_kv(path, items) -> None:
    """Write key-value lines in the given order; values must be strings."""
    lines = []
    pairs = items.items() if isinstance(items, dict) else items
    for key, value in pairs:
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path) -> dict[str, str]:
    """Parse key-value lines; duplicate keys are an error."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


@dataclass
class SampleRecord:
    sample_id: str
    left: str
    right: str
    disp_fg: str
    disp_bg: str
    mask: str
    seed: int
    background_depth: float
    layer_depth: float | None = None
    transmittance: float | None = None


@dataclass
class DatasetManifest:
    focal: float
    baseline: float
    width: int
    height: int
    samples: list[SampleRecord] = field(default_factory=list)
    schema: int = 1

    def to_items(self) -> list[tuple[str, str]]:
        items = [
            ("schema", str(self.schema)),
            ("rig.focal", format_float(self.focal)),
            ("rig.baseline", format_float(self.baseline)),
            ("rig.width", str(self.width)),
            ("rig.height", str(self.height)),
            ("count", str(len(self.samples))),
        ]
        for rec in self.samples:
            p = f"sample.{rec.sample_id}"
            items.append((f"{p}.left", rec.left))
            items.append((f"{p}.right", rec.right))
            items.append((f"{p}.disp_fg", rec.disp_fg))
            items.append((f"{p}.disp_bg", rec.disp_bg))
            items.append((f"{p}.mask", rec.mask))
            items.append((f"{p}.seed", str(rec.seed)))
            items.append((f"{p}.background_depth", format_float(rec.background_depth)))
            if rec.layer_depth is not None:
                items.append((f"{p}.layer_depth", format_float(rec.layer_depth)))
                items.append((f"{p}.transmittance", format_float(rec.transmittance)))
        return items


def write_manifest(manifest: DatasetManifest, path) -> None:
    write_kv(path, manifest.to_items())


def read_manifest(path) -> DatasetManifest:
    kv = read_kv(path)
    ids: list[str] = []
    for key in kv:
        if key.startswith("sample.") and key.endswith(".left"):
            ids.append(key[len("sample.") : -len(".left")])
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids in manifest")
    manifest = DatasetManifest(
        focal=float(kv["rig.focal"]),
        baseline=float(kv["rig.baseline"]),
        width=int(kv["rig.width"]),
        height=int(kv["rig.height"]),
        schema=int(kv.get("schema", "1")),
    )
    for sid in ids:
        p = f"sample.{sid}"
        manifest.samples.append(
            SampleRecord(
                sample_id=sid,
                left=kv[f"{p}.left"],
                right=kv[f"{p}.right"],
                disp_fg=kv[f"{p}.disp_fg"],
                disp_bg=kv[f"{p}.disp_bg"],
                mask=kv[f"{p}.mask"],
                seed=int(kv[f"{p}.seed"]),
                background_depth=float(kv[f"{p}.background_depth"]),
                layer_depth=float(kv[f"{p}.layer_depth"]) if f"{p}.layer_depth" in kv else None,
                transmittance=(
                    float(kv[f"{p}.transmittance"]) if f"{p}.transmittance" in kv else None
                ),
            )
        )
    if int(kv.get("count", len(manifest.samples))) != len(manifest.samples):
        raise ValueError("manifest count does not match sample records")
    return manifest


def validate_manifest(manifest: DatasetManifest, root) -> None:
    """Check that every referenced path exists under root."""
    root = Path(root)
    for rec in manifest.samples:
        for rel in (rec.left, rec.right, rec.disp_fg, rec.disp_bg, rec.mask):
            if not (root / rel).exists():
                raise FileNotFoundError(f"manifest references missing file {rel}")


def export_point_cloud(
    result,
    left: np.ndarray,
    rig,
    path,
    min_disparity: float = 1e-3,
    binary: bool = False,
) -> int:
    """Back-project a two-label disparity result to a labeled PLY cloud.

    Foreground points are emitted at every pixel with disparity above
    min_disparity; background points are additionally emitted inside the
    transparent mask, so transparent pixels contribute two points.  The
    camera model uses the image center as principal point:
    z = f*B/d, x = (c - cx)*z/f, y = (r - cy)*z/f.  Labels: 0 =
    foreground, 1 = background.  Returns the vertex count.
    """
    h, w = result.foreground.shape
    rgb = np.asarray(left)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[:, :, None], 3, axis=2)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))

    chunks = []
    for label, disp, region in (
        (0, result.foreground, np.ones((h, w), dtype=bool)),
        (1, result.background, result.transparent_mask),
    ):
        sel = region & (disp > min_disparity)
        z = rig.focal * rig.baseline / disp[sel]
        x = (cols[sel] - cx) * z / rig.focal
        y = (rows[sel] - cy) * z / rig.focal
        chunks.append((x, y, z, rgb[sel], np.full(sel.sum(), label, dtype=np.uint8)))

    count = sum(len(c[0]) for c in chunks)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {count}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "property uchar label\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for x, y, z, color, label in chunks:
            if binary:
                for i in range(len(x)):
                    f.write(
                        struct.pack(
                            "<fffBBBB",
                            x[i], y[i], z[i],
                            color[i, 0], color[i, 1], color[i, 2], label[i],
                        )
                    )
            else:
                for i in range(len(x)):
                    f.write(
                        (
                            f"{format_float(x[i])} {format_float(y[i])} "
                            f"{format_float(z[i])} "
                            f"{color[i, 0]} {color[i, 1]} {color[i, 2]} {label[i]}\n"
                        ).encode("ascii")
                    )
    return count
