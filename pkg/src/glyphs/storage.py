"""
Dataset file format.

Layout (little endian):
    magic          8 bytes  b"DEFLTRDS"
    header length  uint32
    header         UTF-8 JSON: version, canvas, polarity, seed, ratios, count,
                   font table, splits, metadata
    font index     uint32[count]   position in the font table
    labels         uint8[count]
    pixels         uint8[count, canvas*canvas/8]  bit-packed, 1 = ink
    checksum       32 bytes SHA-256 of everything above
"""

import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np

from src.errors import CorruptDataset, IoFailure
from src.glyphs.dataset import POLARITY, LabeledDataset
from src.glyphs.rasterize import BACKGROUND, INK

logger = logging.getLogger(__name__)

MAGIC = b"DEFLTRDS"
FORMAT_VERSION = 1
DIGEST_SIZE = 32


def dataset_to_bytes(ds: LabeledDataset) -> bytes:
    if ds.images.size and not np.isin(ds.images, (INK, BACKGROUND)).all():
        raise ValueError("Only binary (+1/-1) images can be stored")
    canvas = ds.images.shape[1] if len(ds) else int(ds.metadata.get("canvas", 64))
    font_table = sorted(set(ds.font_ids) | set().union(*ds.splits.values()))
    position = {f: i for i, f in enumerate(font_table)}

    header = {
        "version": FORMAT_VERSION,
        "canvas": canvas,
        "polarity": dict(POLARITY),
        "seed": ds.metadata.get("seed"),
        "ratios": ds.metadata.get("ratios"),
        "count": len(ds),
        "fonts": font_table,
        "splits": {name: sorted(fonts) for name, fonts in sorted(ds.splits.items())},
        "metadata": ds.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    font_index = np.array([position[f] for f in ds.font_ids], dtype="<u4")
    labels = ds.labels.astype(np.uint8)
    bits = np.packbits((ds.images > 0).reshape(len(ds), canvas * canvas), axis=1)

    body = b"".join([
        MAGIC,
        struct.pack("<I", len(header_bytes)),
        header_bytes,
        font_index.tobytes(),
        labels.tobytes(),
        bits.tobytes(),
    ])
    return body + hashlib.sha256(body).digest()


def dataset_from_bytes(data: bytes) -> LabeledDataset:
    if len(data) < len(MAGIC) + 4 + DIGEST_SIZE:
        raise CorruptDataset("Dataset file is truncated")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptDataset("Dataset checksum mismatch")
    if not body.startswith(MAGIC):
        raise CorruptDataset("Not a dataset file")

    try:
        offset = len(MAGIC)
        (header_len,) = struct.unpack_from("<I", body, offset)
        offset += 4
        header = json.loads(body[offset:offset + header_len].decode("utf-8"))
        offset += header_len
        if header["version"] != FORMAT_VERSION:
            raise CorruptDataset(f"Unsupported dataset version {header['version']}")

        count, canvas = header["count"], header["canvas"]
        row_bytes = canvas * canvas // 8
        font_index = np.frombuffer(body, dtype="<u4", count=count, offset=offset)
        offset += 4 * count
        labels = np.frombuffer(body, dtype=np.uint8, count=count, offset=offset)
        offset += count
        bits = np.frombuffer(body, dtype=np.uint8, count=count * row_bytes, offset=offset)
        offset += count * row_bytes
        if offset != len(body):
            raise CorruptDataset("Dataset file has trailing bytes")
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptDataset(f"Malformed dataset file: {exc}") from exc

    pixels = np.unpackbits(bits.reshape(count, row_bytes), axis=1)[:, :canvas * canvas]
    images = np.where(pixels.reshape(count, canvas, canvas) == 1, INK, BACKGROUND)
    fonts = header["fonts"]
    return LabeledDataset(
        images=images.astype(np.float32),
        labels=labels.astype(np.int64),
        font_ids=tuple(fonts[i] for i in font_index),
        splits={name: frozenset(f) for name, f in header["splits"].items()},
        metadata=header["metadata"],
    )


def dataset_checksum(ds: LabeledDataset) -> str:
    return dataset_to_bytes(ds)[-DIGEST_SIZE:].hex()


def save_dataset(ds: LabeledDataset, path: str | Path) -> str:
    """Write ds to path; returns the file's checksum."""
    data = dataset_to_bytes(ds)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"Cannot write dataset to {path}: {exc}") from exc
    logger.info("Saved %d images to %s", len(ds), path)
    return data[-DIGEST_SIZE:].hex()


def load_dataset(path: str | Path) -> LabeledDataset:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"Cannot read dataset {path}: {exc}") from exc
    return dataset_from_bytes(data)


def file_checksum(path: str | Path) -> str:
    """SHA-256 hex of any artifact file."""
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise IoFailure(f"Cannot read {path}: {exc}") from exc
