"""Images, the toy CNN feature extractor, and the CAPF feature-file format.

Pretrained backbone features are ingested from CAPF files; the only feature
extractor implemented here is a small trainable CNN used for end-to-end
tests and toy experiments. Both produce FeatureMap values keyed by a source
name so downstream code treats them alike.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import (
    BadMagic,
    DuplicateImageId,
    ImageTooSmall,
    MalformedHeader,
    TruncatedPayload,
    ValidationError,
    UnsupportedVersion,
)

BACKBONES = (
    "resnet50",
    "resnet101",
    "efficientnetv2",
    "vgg16",
    "vgg19",
    "efficientnetb4",
    "resnet152",
    "regnetx120",
)
TINYCNN = "tinycnn"
SOURCES = BACKBONES + (TINYCNN,)

CAPF_MAGIC = b"CAPF"
CAPF_VERSION = 1

STANDARD_SIDE = 32


@dataclass
class Image:
    """RGB image, float32 values in [0, 1], shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValidationError(f"image must be (H, W, 3), got {p.shape}")
        if p.size == 0:
            raise ValidationError("empty image")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")
        self.pixels = np.ascontiguousarray(p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class FeatureMap:
    """One image's feature vector from a named source."""

    source: str
    values: np.ndarray

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"unknown feature source {self.source!r}")
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 1 or v.size == 0:
            raise ValidationError(f"feature vector must be rank 1 and non-empty, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("feature vector contains NaN/Inf")
        self.values = np.ascontiguousarray(v)

    @property
    def dim(self) -> int:
        return self.values.size


def augment_hflip(image: Image) -> Image:
    """Mirror left-right. Applying it twice returns the original pixels."""
    return Image(pixels=image.pixels[:, ::-1, :].copy())


def center_crop_square(image: Image) -> Image:
    """Crop to the centered square of the shorter side."""
    h, w = image.height, image.width
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return Image(pixels=image.pixels[top:top + side, left:left + side, :].copy())


def resize_nearest(image: Image, side: int) -> Image:
    """Nearest-neighbor resample to side x side."""
    h, w = image.height, image.width
    rows = (np.arange(side) * h // side).clip(0, h - 1)
    cols = (np.arange(side) * w // side).clip(0, w - 1)
    return Image(pixels=image.pixels[np.ix_(rows, cols)].copy())


def standardize(image: Image, side: int = STANDARD_SIDE) -> Image:
    """The fixed ingest policy: center crop to square, then nearest to 32x32."""
    return resize_nearest(center_crop_square(image), side)


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)


def load_ppm(data: bytes) -> Image:
    """Parse a binary P6 PPM with maxval 255."""
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeader("truncated PPM header")
        return data[start:pos]

    if next_token() != b"P6":
        raise MalformedHeader("not a P6 PPM")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise MalformedHeader(f"non-numeric PPM header field: {exc}") from None
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise MalformedHeader(f"unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos:pos + width * height * 3]
    if len(payload) < width * height * 3:
        raise TruncatedPayload(
            f"PPM payload holds {len(payload)} bytes, needs {width * height * 3}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(pixels=raw.astype(np.float32) / 255.0)


def dump_ppm(image: Image) -> bytes:
    """Inverse of load_ppm, used to build fixtures and toy datasets."""
    raw = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + raw.tobytes()


# ---------------------------------------------------------------------------
# tiny CNN: conv3x3 -> relu -> pool -> conv3x3 -> relu -> pool -> GAP -> proj

CNN_C1, CNN_C2 = 8, 16
MIN_IMAGE_SIDE = 8


@dataclass
class TinyCnnParams:
    conv1_k: nm.Tensor
    conv1_b: nm.Tensor
    conv2_k: nm.Tensor
    conv2_b: nm.Tensor
    proj_w: nm.Tensor
    proj_b: nm.Tensor

    @classmethod
    def create(cls, d_model: int, seed: int = 0) -> "TinyCnnParams":
        rng = np.random.default_rng(seed)

        def weight(shape, fan_in):
            std = np.sqrt(2.0 / fan_in)
            return nm.Tensor(rng.normal(0.0, std, size=shape).astype(np.float32),
                             requires_grad=True)

        return cls(
            conv1_k=weight((3, 3, 3, CNN_C1), 27),
            conv1_b=nm.Tensor(np.zeros(CNN_C1, dtype=np.float32), requires_grad=True),
            conv2_k=weight((3, 3, CNN_C1, CNN_C2), 9 * CNN_C1),
            conv2_b=nm.Tensor(np.zeros(CNN_C2, dtype=np.float32), requires_grad=True),
            proj_w=weight((CNN_C2, d_model), CNN_C2),
            proj_b=nm.Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True),
        )

    def parameters(self) -> dict[str, nm.Tensor]:
        return {
            "cnn.conv1_k": self.conv1_k,
            "cnn.conv1_b": self.conv1_b,
            "cnn.conv2_k": self.conv2_k,
            "cnn.conv2_b": self.conv2_b,
            "cnn.proj_w": self.proj_w,
            "cnn.proj_b": self.proj_b,
        }

    @property
    def d_model(self) -> int:
        return self.proj_w.shape[1]


def tinycnn_rows(image: Image, params: TinyCnnParams) -> nm.Tensor:
    """Differentiable forward pass. Returns a (1, d_model) tensor."""
    if image.height < MIN_IMAGE_SIDE or image.width < MIN_IMAGE_SIDE:
        raise ImageTooSmall(f"image {image.height}x{image.width} below "
                            f"{MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    x = nm.Tensor(image.pixels, dtype=params.conv1_k.dtype.type)
    x = nm.relu(nm.conv3x3(x, params.conv1_k, params.conv1_b))
    x = nm.maxpool2x2(x)
    x = nm.relu(nm.conv3x3(x, params.conv2_k, params.conv2_b))
    x = nm.maxpool2x2(x)
    pooled = nm.reshape(nm.spatial_mean(x), (1, CNN_C2))
    return nm.add(nm.matmul(pooled, params.proj_w), params.proj_b)


def tinycnn_forward(image: Image, params: TinyCnnParams) -> FeatureMap:
    """Plain-array feature extraction for the ingest path."""
    row = tinycnn_rows(image, params)
    return FeatureMap(source=TINYCNN, values=row.data.reshape(-1).copy())


# ---------------------------------------------------------------------------
# CAPF feature files
#
#   magic "CAPF" | u32 version | u32 entry count
#   per entry: u16 name length | name utf-8 | u32 dim | dim * f32
#   all integers little-endian


def write_feature_file(features: dict[str, FeatureMap]) -> bytes:
    out = bytearray()
    out += CAPF_MAGIC
    out += struct.pack("<II", CAPF_VERSION, len(features))
    for image_id, fm in features.items():
        name = image_id.encode("utf-8")
        if len(name) > 0xFFFF:
            raise ValidationError(f"image id too long: {image_id[:32]}...")
        out += struct.pack("<H", len(name))
        out += name
        out += struct.pack("<I", fm.dim)
        out += fm.values.astype("<f4").tobytes()
    return bytes(out)


def read_feature_file(data: bytes, source: str = TINYCNN) -> dict[str, FeatureMap]:
    """Parse CAPF bytes into image_id -> FeatureMap, preserving file order."""
    if data[:4] != CAPF_MAGIC:
        raise BadMagic(f"expected CAPF magic, got {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedPayload("CAPF header truncated")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CAPF_VERSION:
        raise UnsupportedVersion(f"CAPF version {version}, supported: {CAPF_VERSION}")
    pos = 12
    features: dict[str, FeatureMap] = {}
    for _ in range(count):
        if pos + 2 > len(data):
            raise TruncatedPayload("CAPF entry header truncated")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + name_len + 4 > len(data):
            raise TruncatedPayload("CAPF entry name/dim truncated")
        image_id = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (dim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        end = pos + 4 * dim
        if end > len(data):
            raise TruncatedPayload(f"CAPF payload for {image_id!r} truncated")
        values = np.frombuffer(data[pos:end], dtype="<f4").copy()
        pos = end
        if image_id in features:
            raise DuplicateImageId(f"duplicate CAPF entry {image_id!r}")
        features[image_id] = FeatureMap(source=source, values=values)
    return features
