"""Physical image-degradation synthesis: scattering, low-light, overexposure.

Imaging models
--------------
Scattering (participating medium along the line of sight):
    I = J * t + A * (1 - t),   t = exp(-beta * min(d, d_max))
so each pixel is a convex blend between the clear image J and the global
atmospheric light A, weighted by the transmission t of its depth d.

Low light (sensor chain):
    signal  S = G * T * L,  L = B * J            (irradiance proxy)
    noise   N = N_shot + N_read
    output  I = CRF(clip(S + N, 0, 1))
Shot noise is Poisson with variance proportional to the signal; at these
signal levels it is modelled as heteroscedastic Gaussian with variance
alpha_shot * S. Read noise is signal-independent Gaussian; its Table value
is specified in 8-bit digital numbers and is divided by 255 here. The camera
response CRF(i) = i**gamma darkens a normalized signal for gamma > 1, which
is the convention used by default; set ``crf_inverse=True`` for i**(1/gamma).

Overexposure:
    I = CRF(clip(G * T_e * L + N_shot + N_read, 0, S_sat))
followed by bloom (Gaussian-blurred saturation mask added with strength B_s)
and a per-channel color shift.

All operators are deterministic per seed and map [0,1] images into [0,1].
Images are float64 arrays of shape (H, W, 3); depth maps are float64 (H, W)
in meters.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter


@dataclass
class ScatterParams:
    beta: float = 0.01                 # scattering coefficient [1/m]
    atmospheric_light: tuple[float, float, float] = (0.95, 0.95, 1.0)
    d_max: float = 200.0               # depth clamp [m]
    particle_size: float = 0.1        # recorded for provenance; not in the model

    def validate(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not all(0.0 <= a <= 1.0 for a in self.atmospheric_light):
            raise ValueError("atmospheric light components must lie in [0, 1]")
        return self


@dataclass
class LowLightParams:
    brightness: float = 0.15           # B: irradiance attenuation
    exposure_time: float = 0.15        # T
    gain: float = 8.0                  # G
    shot_noise: float = 0.4            # alpha_shot: variance = alpha_shot * S
    read_noise: float = 3.0            # sigma_read in 8-bit DN
    gamma: float = 2.2
    denoise_strength: float = 0.75     # D_s: blend toward the smoothed image
    detail_preservation: float = 0.7   # P_d: fraction of the original kept
    crf_inverse: bool = False          # use i**(1/gamma) instead of i**gamma
    seed: int = 0

    def validate(self):
        if self.exposure_time <= 0 or self.gain <= 0 or self.gamma <= 0:
            raise ValueError("exposure_time, gain, gamma must be > 0")
        if self.read_noise < 0 or self.shot_noise < 0:
            raise ValueError("noise levels must be >= 0")
        return self


@dataclass
class OverexposeParams:
    exposure_multiplier: float = 2.5   # T_e
    gain: float = 1.5                  # G
    saturation: float = 0.9            # S_sat: full-well clip level
    read_noise: float = 0.015          # sigma_read, already normalized
    gamma: float = 2.0
    bloom_strength: float = 0.3        # B_s
    color_shift: tuple[float, float, float] = (1.0, 0.96, 0.92)
    crf_inverse: bool = False
    seed: int = 0

    def validate(self):
        if not 0.0 < self.saturation <= 1.0:
            raise ValueError("saturation must lie in (0, 1]")
        if self.exposure_multiplier <= 0:
            raise ValueError("exposure multiplier must be > 0")
        return self


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {img.shape}")
    return img


def _crf(x: np.ndarray, gamma: float, inverse: bool) -> np.ndarray:
    return x ** (1.0 / gamma) if inverse else x ** gamma


def scatter(img: np.ndarray, depth: np.ndarray | None,
            params: ScatterParams = ScatterParams()) -> np.ndarray:
    """Blend toward atmospheric light by per-pixel transmission."""
    img = _check_image(img)
    params.validate()
    if depth is None:
        warnings.warn("no depth map; assuming constant depth d_max / 2")
        depth = np.full(img.shape[:2], params.d_max / 2.0)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != img.shape[:2]:
        raise ValueError(
            f"depth shape {depth.shape} does not match image {img.shape[:2]}")
    t = np.exp(-params.beta * np.minimum(depth, params.d_max))[..., None]
    a = np.asarray(params.atmospheric_light)[None, None, :]
    return np.clip(img * t + a * (1.0 - t), 0.0, 1.0)


def low_light(img: np.ndarray,
              params: LowLightParams = LowLightParams()) -> np.ndarray:
    """Darken through the sensor chain with signal-dependent noise."""
    img = _check_image(img)
    params.validate()
    rng = np.random.default_rng(params.seed)
    signal = params.gain * params.exposure_time * params.brightness * img
    shot = rng.standard_normal(img.shape) * np.sqrt(params.shot_noise * signal)
    read = rng.standard_normal(img.shape) * (params.read_noise / 255.0)
    noisy = _crf(np.clip(signal + shot + read, 0.0, 1.0), params.gamma,
                 params.crf_inverse)
    if params.denoise_strength > 0.0:
        smoothed = uniform_filter(noisy, size=(3, 3, 1), mode="nearest")
        blended = (params.detail_preservation * noisy
                   + (1.0 - params.detail_preservation) * smoothed)
        noisy = ((1.0 - params.denoise_strength) * noisy
                 + params.denoise_strength * blended)
    return np.clip(noisy, 0.0, 1.0)


def overexpose(img: np.ndarray,
               params: OverexposeParams = OverexposeParams()) -> np.ndarray:
    """Saturate the sensor, then add bloom and a warm color shift."""
    img = _check_image(img)
    params.validate()
    rng = np.random.default_rng(params.seed)
    signal = params.gain * params.exposure_multiplier * img
    # the overexposure block parameterizes only sigma_read; the
    # signal-proportional shot term reuses it as the variance coefficient
    shot = rng.standard_normal(img.shape) * np.sqrt(params.read_noise * signal)
    read = rng.standard_normal(img.shape) * params.read_noise
    s = np.clip(signal + shot + read, 0.0, params.saturation)
    if params.bloom_strength > 0.0:
        mask = (s >= params.saturation).astype(np.float64)
        glow = gaussian_filter(mask, sigma=(2.0, 2.0, 0.0), truncate=2.5,
                               mode="nearest")
        s = s + params.bloom_strength * glow
    s = s * np.asarray(params.color_shift)[None, None, :]
    return np.clip(_crf(np.clip(s, 0.0, 1.0), params.gamma,
                        params.crf_inverse), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Portable pixmap / graymap IO (8-bit PPM images, 16-bit PGM depth in mm)
# ---------------------------------------------------------------------------

class PnmError(ValueError):
    """Malformed or truncated PNM file; message carries the byte offset."""


def _read_header(data: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    if not data.startswith(magic):
        raise PnmError(f"{path}: expected {magic.decode()} header at byte 0")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PnmError(f"{path}: truncated header at byte {pos}")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise PnmError(f"{path}: bad header token at byte {start}") from None
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PnmError(f"{path}: nonpositive dimensions {width}x{height}")
    return width, height, maxval, pos


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write a [0,1] float image as 8-bit binary PPM (round(v * 255))."""
    img = _check_image(img)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def load_image(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    width, height, maxval, pos = _read_header(data, b"P6", path)
    if maxval != 255:
        raise PnmError(f"{path}: unsupported maxval {maxval} (only 255)")
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PnmError(f"{path}: truncated payload at byte {pos + len(payload)} "
                       f"(need {pos + need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0


def save_depth(path: str | Path, depth: np.ndarray) -> None:
    """Write a depth map in meters as 16-bit big-endian PGM in millimeters."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth must be 2-D, got shape {depth.shape}")
    if np.any(~np.isfinite(depth)) or np.any(depth < 0):
        raise ValueError("depth must be finite and non-negative")
    mm = np.round(np.clip(depth * 1000.0, 0, 65535)).astype(">u2")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(mm.tobytes())


def load_depth(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    width, height, maxval, pos = _read_header(data, b"P5", path)
    if maxval != 65535:
        raise PnmError(f"{path}: unsupported maxval {maxval} (only 65535)")
    need = width * height * 2
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PnmError(f"{path}: truncated payload at byte {pos + len(payload)} "
                       f"(need {pos + need} bytes)")
    mm = np.frombuffer(payload, dtype=">u2").reshape(height, width)
    return mm.astype(np.float64) / 1000.0


# ---------------------------------------------------------------------------
# Batch pipeline with manifest
# ---------------------------------------------------------------------------

MODE_DEFAULTS = {"scattering": ScatterParams, "lowlight": LowLightParams,
                 "overexposure": OverexposeParams}


def degrade_directory(mode: str, input_dir: str | Path, output_dir: str | Path,
                      depth_dir: str | Path | None = None, seed: int = 0,
                      overrides: dict | None = None) -> dict:
    """Degrade every .ppm image in a directory; returns the manifest.

    Each image gets its own RNG stream derived from (seed, image index), so
    outputs are byte-identical across reruns and independent of ordering.
    """
    if mode not in MODE_DEFAULTS:
        raise ValueError(f"mode must be one of {sorted(MODE_DEFAULTS)}")
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    images = sorted(input_dir.glob("*.ppm"))
    if not images:
        raise FileNotFoundError(f"no .ppm images under {input_dir}")
    output_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, src in enumerate(images):
        img = load_image(src)
        kwargs = dict(overrides or {})
        if mode == "scattering":
            params = ScatterParams(**kwargs)
            depth = None
            if depth_dir is not None:
                candidate = Path(depth_dir) / (src.stem + ".pgm")
                if candidate.exists():
                    depth = load_depth(candidate)
            out = scatter(img, depth, params)
        elif mode == "lowlight":
            params = LowLightParams(**kwargs, seed=_image_seed(seed, idx))
            out = low_light(img, params)
        else:
            params = OverexposeParams(**kwargs, seed=_image_seed(seed, idx))
            out = overexpose(img, params)
        dst = output_dir / src.name
        save_image(dst, out)
        record = {"input": str(src), "output": str(dst), "mode": mode,
                  "params": _jsonable(asdict(params))}
        entries.append(record)
    manifest = {"mode": mode, "seed": seed, "count": len(entries),
                "images": entries}
    (output_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
