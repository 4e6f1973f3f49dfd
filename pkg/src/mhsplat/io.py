"""File formats: binary PLY clouds, P6 PPM images, plain-text camera lists."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .scene import Camera, ContractError, GaussianCloud, ImageBuffer

PLY_PROPERTIES = (
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "red", "green", "blue",
    "opacity",
)
_PLY_DTYPE = np.dtype([(name, "<f4") for name in PLY_PROPERTIES])
_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}


class FormatError(ValueError):
    """Raised on malformed or unsupported files."""


# --------------------------------------------------------------------------- PLY

def write_ply(path, cloud: GaussianCloud) -> None:
    """Write ``cloud`` as little-endian binary PLY with float32 properties."""
    data = np.empty(len(cloud), dtype=_PLY_DTYPE)
    cols = np.concatenate(
        [cloud.positions, cloud.raw_scales, cloud.rotations, cloud.colors, cloud.raw_opacities[:, None]],
        axis=1,
    )
    for k, name in enumerate(PLY_PROPERTIES):
        data[name] = cols[:, k]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def read_ply(path) -> GaussianCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    count = None
    fields = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "element" and count is not None:
            break
        elif parts and parts[0] == "property" and count is not None:
            if parts[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unsupported property type {parts[1]}")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    dtype = np.dtype(fields)
    if len(body) < count * dtype.itemsize:
        raise FormatError(f"{path}: truncated vertex data")
    data = np.frombuffer(body, dtype=dtype, count=count)
    missing = [p for p in PLY_PROPERTIES if p not in dtype.names]
    if missing:
        raise FormatError(f"{path}: missing properties {missing}")

    def cols(*names):
        return np.stack([data[n].astype(np.float64) for n in names], axis=1)

    return GaussianCloud(
        cols("x", "y", "z"),
        cols("scale_0", "scale_1", "scale_2"),
        cols("rot_0", "rot_1", "rot_2", "rot_3"),
        cols("red", "green", "blue"),
        data["opacity"].astype(np.float64),
    )


# --------------------------------------------------------------------------- PPM

def write_ppm(path, image) -> None:
    """Write an (H, W, 3) float image in [0, 1] (or a 2-D grayscale map) as P6."""
    px = image.pixels if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    if px.ndim == 2:
        px = np.repeat(px[:, :, None], 3, axis=2)
    b = np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = b.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(b.tobytes())


def read_ppm(path) -> ImageBuffer:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: expected P6 magic")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    data = raw[pos + 1:pos + 1 + w * h * 3]
    if len(data) < w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    px = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0
    return ImageBuffer(px)


def write_png(path, image) -> None:
    import matplotlib.image

    px = image.pixels if isinstance(image, ImageBuffer) else np.asarray(image)
    matplotlib.image.imsave(str(path), np.clip(px, 0.0, 1.0))


def write_image(path, image) -> None:
    """Dispatch on suffix: ``.png`` or PPM otherwise."""
    if str(path).lower().endswith(".png"):
        write_png(path, image)
    else:
        write_ppm(path, image)


# ------------------------------------------------------------------- cameras.txt

CAMERAS_HEADER = (
    "# one camera per line:\n"
    "# index split width height fx fy cx cy near far r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n"
    "# R, t map world points into camera space (x right, y down, z forward): p_cam = R p + t\n"
)


def write_cameras(path, cameras, splits, extent: float) -> None:
    lines = [CAMERAS_HEADER, f"# extent {extent!r}\n"]
    for i, (cam, split) in enumerate(zip(cameras, splits)):
        vals = [cam.fx, cam.fy, cam.cx, cam.cy, cam.near, cam.far, *cam.R.ravel(), *cam.t]
        lines.append(f"{i} {split} {cam.width} {cam.height} " + " ".join(repr(float(v)) for v in vals) + "\n")
    Path(path).write_text("".join(lines))


def read_cameras(path):
    """Return ``(cameras, splits, extent)``."""
    cameras, splits, extent = [], [], None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            parts = s[1:].split()
            if parts[:1] == ["extent"]:
                extent = float(parts[1])
            continue
        parts = s.split()
        if len(parts) != 22:
            raise FormatError(f"{path}:{lineno}: expected 22 fields, got {len(parts)}")
        try:
            w, h = int(parts[2]), int(parts[3])
            v = [float(x) for x in parts[4:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if parts[1] not in ("train", "test"):
            raise FormatError(f"{path}:{lineno}: split must be train or test")
        cameras.append(Camera(np.reshape(v[6:15], (3, 3)), v[15:18], v[0], v[1], v[2], v[3], w, h, v[4], v[5]))
        splits.append(parts[1])
    if not cameras:
        raise ContractError(f"{path}: no cameras")
    return cameras, splits, extent
