"""
This module contains the binary PPM/PGM codec and the conversion between 8-bit rasters and floating-point image tensors.

An image tensor is a `numpy.ndarray` of shape (channels, height, width), float32, values nominally in [0, 1].
"""

import dataclasses
import logging
import typing

import numpy as np

from .utils import RbsrException

logger = logging.getLogger("rbsr.imageio")

ImageTensor = np.ndarray

_MAGIC_CHANNELS = {b"P6": 3, b"P5": 1}


class ImageFormatException(RbsrException):
    pass


class MalformedHeaderException(ImageFormatException):
    pass


class UnsupportedMaxvalException(ImageFormatException):
    pass


class TruncatedRasterException(ImageFormatException):
    pass


class InvalidImageException(RbsrException):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class RawImage:
    """
    8-bit raster, row-major and channel-interleaved: `data` has shape (height, width, channels).
    """

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise InvalidImageException(f"channels must be 1 or 3, got {self.channels}")
        if self.width < 1 or self.height < 1:
            raise InvalidImageException(f"empty image {self.width}x{self.height}")
        if self.data.dtype != np.uint8 or self.data.size != self.width * self.height * self.channels:
            raise InvalidImageException(
                f"raster of {self.data.size} {self.data.dtype} samples does not match "
                f"{self.width}x{self.height}x{self.channels}"
            )
        object.__setattr__(self, "data", self.data.reshape(self.height, self.width, self.channels))

    @classmethod
    def from_array(cls, array: np.ndarray) -> "RawImage":
        if array.ndim == 2:
            array = array[:, :, None]
        height, width, channels = array.shape
        return cls(width=width, height=height, channels=channels, data=np.ascontiguousarray(array, dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, RawImage):
            return NotImplemented
        return (
            (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
            and np.array_equal(self.data, other.data)
        )


def _read_header(data: bytes) -> typing.Tuple[int, int, int, int]:
    magic = data[:2]
    if magic not in _MAGIC_CHANNELS:
        raise MalformedHeaderException(f"bad magic {magic!r}, expected P6 or P5")
    pos = 2
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise MalformedHeaderException("magic must be followed by whitespace")
    values = []
    while len(values) < 3:
        if pos >= len(data):
            raise MalformedHeaderException("header ends before width, height and maxval")
        char = data[pos : pos + 1]
        if char.isspace():
            pos += 1
            continue
        if char == b"#":
            newline = data.find(b"\n", pos)
            if newline < 0:
                raise MalformedHeaderException("unterminated comment in header")
            pos = newline + 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise MalformedHeaderException(f"unexpected byte {char!r} at offset {pos} in header")
        values.append(int(data[start:pos]))
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise MalformedHeaderException("missing whitespace after maxval")
    width, height, maxval = values
    if width < 1 or height < 1:
        raise MalformedHeaderException(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxvalException(f"maxval {maxval} not supported, only 255")
    return _MAGIC_CHANNELS[magic], width, height, pos + 1


def decode_ppm(data: bytes) -> RawImage:
    """
    Decode a binary PPM (P6) or PGM (P5) file with maxval 255.

    Raises:
        MalformedHeaderException: magic, dimensions or header layout are invalid.
        UnsupportedMaxvalException: maxval is not 255.
        TruncatedRasterException: fewer raster bytes than the header declares.
    """
    channels, width, height, offset = _read_header(bytes(data))
    expected = width * height * channels
    raster = data[offset : offset + expected]
    if len(raster) < expected:
        raise TruncatedRasterException(f"raster has {len(raster)} bytes, header declares {expected}")
    if len(data) > offset + expected:
        logger.warning(f"Ignoring {len(data) - offset - expected} trailing bytes after raster")
    array = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels).copy()
    return RawImage(width=width, height=height, channels=channels, data=array)


def encode_ppm(image: RawImage) -> bytes:
    magic = "P6" if image.channels == 3 else "P5"
    header = f"{magic}\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image.data, dtype=np.uint8).tobytes()


def to_tensor(image: RawImage) -> ImageTensor:
    planar = np.transpose(image.data, (2, 0, 1)).astype(np.float32)
    return np.ascontiguousarray(planar / np.float32(255.0))


def to_raw(tensor: ImageTensor) -> RawImage:
    """
    Clamp to [0, 1], scale by 255 and round half away from zero.
    """
    if tensor.ndim == 2:
        tensor = tensor[None]
    values = np.nan_to_num(np.asarray(tensor, dtype=np.float64), nan=0.0)
    scaled = np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5)
    return RawImage.from_array(np.transpose(scaled.astype(np.uint8), (1, 2, 0)))


def read_image(path: str) -> ImageTensor:
    with open(path, "rb") as file:
        return to_tensor(decode_ppm(file.read()))


def write_image(path: str, tensor: ImageTensor):
    with open(path, "wb") as file:
        file.write(encode_ppm(to_raw(tensor)))
    logger.debug(f"Wrote {tensor.shape} image to {path}")
