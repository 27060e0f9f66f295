"""Synthetic multi-temporal scenes, frame selection, patching and sample I/O.

A scene is drawn at the super-resolved grid first: a smooth latent field of
random bumps thresholded at its median gives the binary label, the spectral
bands are synthesized from the label (near-infrared high and red low inside
the positive class, inverted outside, plus smooth textures), and each frame
then gets its own sub-pixel shift, radiometric jitter and optional cloud
blobs before a 4x box-filter brings it down to the low-resolution grid.
Everything is a pure function of the recipe, so identical recipes produce
bit-identical samples.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import serial
from .errors import ConfigError, FormatError, SelectionError, TruncationError, ValidationError, VersionError
from .rng import stream

_MAGIC = b"MTSP"
_FORMAT_VERSION = 1


@dataclass
class FrameMeta:
    cloud_fraction: float
    time_index: int


@dataclass
class MultiTemporalSample:
    """A low-resolution stack [T,C,H,W] with per-frame metadata and the
    high-resolution binary label [r*H, r*W]."""

    lr_stack: np.ndarray
    frame_meta: list
    label: np.ndarray
    band_roles: tuple
    upscale: int = 4
    recipe: dict | None = None
    name: str = ""

    @property
    def frames(self) -> int:
        return self.lr_stack.shape[0]

    def validate(self) -> "MultiTemporalSample":
        t, c, h, w = self.lr_stack.shape
        if len(self.frame_meta) != t:
            raise ValidationError(f"{t} frames but {len(self.frame_meta)} metadata records")
        if len(self.band_roles) != c:
            raise ValidationError(f"{c} bands but {len(self.band_roles)} roles")
        if self.label.shape != (h * self.upscale, w * self.upscale):
            raise ValidationError(
                f"label {self.label.shape} is not upscale x the stack extents ({h}x{w} x{self.upscale})"
            )
        for m in self.frame_meta:
            if not (0.0 <= m.cloud_fraction <= 1.0):
                raise ValidationError(f"cloud fraction {m.cloud_fraction} outside [0,1]")
        return self


@dataclass
class SceneRecipe:
    """Deterministic description of one synthetic scene (extents are LR pixels)."""

    seed: int = 0
    height: int = 32
    width: int = 32
    frames: int = 8
    n_blobs: int = 24
    blob_scale_min: float = 5.0
    blob_scale_max: float = 16.0
    shift_magnitude: float = 0.6
    jitter_std: float = 0.03
    cloud_prob: float = 0.15
    cloud_opacity: float = 0.85
    texture_std: float = 0.06
    upscale: int = 4
    band_roles: tuple = ("red", "nir", "other", "other")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band_roles"] = list(self.band_roles)
        return d


def _bump_field(rng, h, w, n_blobs, smin, smax):
    """Sum of random anisotropy-free gaussian bumps on an h x w grid."""
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((h, w), dtype=np.float64)
    for _ in range(n_blobs):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        sc = rng.uniform(smin, smax)
        amp = rng.uniform(0.5, 1.5) * (1.0 if rng.random() < 0.5 else -1.0)
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sc * sc))
    return out


def _smooth_noise(rng, h, w, cell=8):
    """Smooth random texture: coarse normal noise upsampled bilinearly."""
    ch = max(2, h // cell)
    cw = max(2, w // cell)
    coarse = rng.standard_normal((ch, cw))
    ys = np.linspace(0, ch - 1, h)
    xs = np.linspace(0, cw - 1, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, ch - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, cw - 2)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx + c * wy * (1 - wx) + d * wy * wx


def _translate(img, dy, dx):
    """Bilinear translation with edge clamping (sample at y-dy, x-dx)."""
    h, w = img.shape
    ys = np.arange(h, dtype=np.float64) - dy
    xs = np.arange(w, dtype=np.float64) - dx
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    ty = ys - y0
    tx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    row0 = img[y0c][:, x0c] * (1 - tx)[None, :] + img[y0c][:, x1c] * tx[None, :]
    row1 = img[y1c][:, x0c] * (1 - tx)[None, :] + img[y1c][:, x1c] * tx[None, :]
    return row0 * (1 - ty)[:, None] + row1 * ty[:, None]


def _box_down(hr, r):
    """r x r box-filter downsampling of [C, rH, rW] -> [C, H, W]."""
    c, hh, ww = hr.shape
    return hr.reshape(c, hh // r, r, ww // r, r).mean(axis=(2, 4), dtype=np.float64)


def generate_scene(recipe: SceneRecipe) -> MultiTemporalSample:
    """Synthesize one deterministic multi-temporal sample from the recipe."""
    r = recipe.upscale
    if recipe.height < 1 or recipe.width < 1 or recipe.frames < 1:
        raise ConfigError("scene extents and frame count must be >= 1")
    rh, rw = recipe.height * r, recipe.width * r
    rng = stream(recipe.seed, "scene")

    latent = _bump_field(rng, rh, rw, recipe.n_blobs, recipe.blob_scale_min, recipe.blob_scale_max)
    label = (latent >= np.median(latent)).astype(np.uint8)

    c = len(recipe.band_roles)
    hr_bands = np.empty((c, rh, rw), dtype=np.float64)
    lab = label.astype(np.float64)
    for bi, role in enumerate(recipe.band_roles):
        texture = recipe.texture_std * _smooth_noise(rng, rh, rw)
        if role == "nir":
            hr_bands[bi] = 0.15 + 0.6 * lab + texture
        elif role == "red":
            hr_bands[bi] = 0.15 + 0.6 * (1.0 - lab) + texture
        else:
            hr_bands[bi] = 0.35 + 0.25 * _smooth_noise(rng, rh, rw) * 0.5 + texture
    hr_bands = np.clip(hr_bands, 0.0, 1.0)

    frames = np.empty((recipe.frames, c, recipe.height, recipe.width), dtype=np.float32)
    meta = []
    for t in range(recipe.frames):
        dy = rng.uniform(-recipe.shift_magnitude, recipe.shift_magnitude) * r
        dx = rng.uniform(-recipe.shift_magnitude, recipe.shift_magnitude) * r
        gain = 1.0 + rng.normal(0.0, recipe.jitter_std, size=c)
        offset = rng.normal(0.0, recipe.jitter_std * 0.5, size=c)
        cloud_roll = rng.random()
        frame_hr = np.empty_like(hr_bands)
        for bi in range(c):
            frame_hr[bi] = _translate(hr_bands[bi], dy, dx) * gain[bi] + offset[bi]
        cloud_fraction = 0.0
        if cloud_roll < recipe.cloud_prob:
            n_clouds = int(rng.integers(1, 4))
            mask = np.zeros((rh, rw), dtype=np.float64)
            yy = np.arange(rh, dtype=np.float64)[:, None]
            xx = np.arange(rw, dtype=np.float64)[None, :]
            for _ in range(n_clouds):
                cy = rng.uniform(0, rh)
                cx = rng.uniform(0, rw)
                sc = rng.uniform(rh / 10.0, rh / 3.0)
                mask += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sc * sc))
            alpha = np.clip(mask, 0.0, 1.0) * recipe.cloud_opacity
            frame_hr = frame_hr * (1.0 - alpha) + 0.95 * alpha
            cloud_fraction = float((alpha > 0.4).mean())
        frames[t] = np.clip(_box_down(frame_hr, r), 0.0, 1.0).astype(np.float32)
        meta.append(FrameMeta(cloud_fraction=cloud_fraction, time_index=t))

    return MultiTemporalSample(
        lr_stack=frames,
        frame_meta=meta,
        label=label,
        band_roles=tuple(recipe.band_roles),
        upscale=r,
        recipe=recipe.to_dict(),
        name=f"scene-{recipe.seed:04d}",
    ).validate()


def select_frames(sample: MultiTemporalSample, max_cloud: float = 0.25, target_frames: int | None = None):
    """Keep frames with cloud fraction <= max_cloud; optionally keep only the
    ``target_frames`` least-cloudy ones (ties broken by ascending time index),
    preserving the temporal order of the survivors."""
    keep = [i for i, m in enumerate(sample.frame_meta) if m.cloud_fraction <= max_cloud]
    if not keep:
        raise SelectionError(f"no frame has cloud fraction <= {max_cloud}")
    if target_frames is not None:
        if target_frames < 1:
            raise ConfigError(f"target_frames must be >= 1, got {target_frames}")
        ranked = sorted(keep, key=lambda i: (sample.frame_meta[i].cloud_fraction, sample.frame_meta[i].time_index))
        keep = sorted(ranked[:target_frames])
    return MultiTemporalSample(
        lr_stack=sample.lr_stack[keep].copy(),
        frame_meta=[sample.frame_meta[i] for i in keep],
        label=sample.label,
        band_roles=sample.band_roles,
        upscale=sample.upscale,
        recipe=sample.recipe,
        name=sample.name,
    )


def extract_patches(sample: MultiTemporalSample, patch: int = 32, stride: int | None = None):
    """Tile the sample into LR patches (label patches cut at upscale x the
    coordinates). Full coverage: the last window in each axis is clamped to
    the border when the stride does not divide evenly."""
    t, c, h, w = sample.lr_stack.shape
    if patch > h or patch > w:
        raise ConfigError(f"patch {patch} larger than scene extents {h}x{w}")
    stride = patch if stride is None else stride
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")

    def starts(extent):
        s = list(range(0, extent - patch + 1, stride))
        if s[-1] + patch < extent:
            s.append(extent - patch)
        return s

    r = sample.upscale
    out = []
    for y in starts(h):
        for x in starts(w):
            out.append(
                MultiTemporalSample(
                    lr_stack=sample.lr_stack[:, :, y : y + patch, x : x + patch].copy(),
                    frame_meta=list(sample.frame_meta),
                    label=sample.label[r * y : r * (y + patch), r * x : r * (x + patch)].copy(),
                    band_roles=sample.band_roles,
                    upscale=r,
                    recipe=sample.recipe,
                    name=f"{sample.name}+{y}+{x}" if sample.name else f"patch+{y}+{x}",
                )
            )
    return out


# -- sample file format ---------------------------------------------------------------


def write_sample(sample: MultiTemporalSample, path: str) -> None:
    """Serialize to the MTSP container (see README for the byte layout)."""
    sample.validate()
    t, c, h, w = sample.lr_stack.shape
    meta = {
        "band_roles": list(sample.band_roles),
        "frames": [{"cloud_fraction": m.cloud_fraction, "time_index": m.time_index} for m in sample.frame_meta],
        "recipe": sample.recipe,
    }
    blob = serial.canonical_json(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        serial.write_u32(fh, _FORMAT_VERSION)
        for v in (t, c, h, w, sample.upscale):
            serial.write_u32(fh, v)
        fh.write(np.ascontiguousarray(sample.lr_stack, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes())
        serial.write_u32(fh, len(blob))
        fh.write(blob)


def read_sample(path: str) -> MultiTemporalSample:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise FormatError(f"bad sample magic {magic!r}")
        version = serial.read_u32(fh, "format version")
        if version != _FORMAT_VERSION:
            raise VersionError(f"unsupported sample version {version}")
        t = serial.read_u32(fh, "frame count")
        c = serial.read_u32(fh, "band count")
        h = serial.read_u32(fh, "height")
        w = serial.read_u32(fh, "width")
        r = serial.read_u32(fh, "upscale")
        stack_bytes = serial.read_exact(fh, t * c * h * w * 4, "stack payload")
        stack = np.frombuffer(stack_bytes, dtype="<f4").reshape(t, c, h, w).astype(np.float32)
        label_bytes = serial.read_exact(fh, (h * r) * (w * r), "label payload")
        label = np.frombuffer(label_bytes, dtype=np.uint8).reshape(h * r, w * r).copy()
        if not np.all(label <= 1):
            raise FormatError("label payload has values outside {0,1}")
        mlen = serial.read_u32(fh, "metadata length")
        blob = serial.read_exact(fh, mlen, "metadata blob")
        if fh.read(1):
            raise FormatError("trailing bytes after sample payload")
    try:
        meta = json.loads(blob.decode("utf-8"))
        roles = tuple(meta["band_roles"])
        frames = [FrameMeta(float(fm["cloud_fraction"]), int(fm["time_index"])) for fm in meta["frames"]]
        recipe = meta.get("recipe")
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable sample metadata: {e}") from None
    if len(roles) != c or len(frames) != t:
        raise FormatError("metadata does not match the declared extents")
    return MultiTemporalSample(
        lr_stack=stack,
        frame_meta=frames,
        label=label,
        band_roles=roles,
        upscale=r,
        recipe=recipe,
        name=os.path.splitext(os.path.basename(path))[0],
    ).validate()
