"""Binary containers and small text formats used across the pipeline.

* MCFT — per-image token features: magic ``MCFT``, u32 version=1, u32
  n_tokens, u32 dim, u32 flags (bit0: has penultimate tokens, bit1: has CLS),
  then little-endian f32 arrays in order [last, penultimate?, cls?],
  row-major.
* MCDE — per-class description embeddings: magic ``MCDE``, u32 version=1,
  u32 class count, u32 shared dim, then per class u32 M followed by
  M x dim little-endian f32.
* MCCK — training checkpoint: magic ``MCCK``, u32 version=1, u32 entry
  count, then per entry a length-prefixed utf-8 name, u32 ndim, u32 dims,
  and the little-endian f64 payload.
* PGM — P5 (binary, maxval 255) rasters for images, P2 (ascii) for masks.
* Manifest — one record per line: ``id<TAB>path<TAB>label_or_-1``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MCFT_MAGIC = b"MCFT"
MCDE_MAGIC = b"MCDE"
MCCK_MAGIC = b"MCCK"

FLAG_HAS_PENULT = 1
FLAG_HAS_CLS = 2


class FormatError(ValueError):
    pass


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError("truncated file")
    return data


def _read_u32(fh) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


# --- MCFT --------------------------------------------------------------------


def write_feature_record(
    path,
    x_patch_last: np.ndarray,
    x_patch_penult: np.ndarray | None = None,
    v_cls: np.ndarray | None = None,
) -> None:
    x_patch_last = np.asarray(x_patch_last, dtype=np.float32)
    n, dim = x_patch_last.shape
    flags = 0
    if x_patch_penult is not None:
        flags |= FLAG_HAS_PENULT
    if v_cls is not None:
        flags |= FLAG_HAS_CLS
    with open(path, "wb") as fh:
        fh.write(MCFT_MAGIC)
        fh.write(struct.pack("<IIII", 1, n, dim, flags))
        fh.write(x_patch_last.astype("<f4").tobytes())
        if x_patch_penult is not None:
            p = np.asarray(x_patch_penult, dtype="<f4")
            if p.shape != (n, dim):
                raise FormatError("penultimate token shape mismatch")
            fh.write(p.tobytes())
        if v_cls is not None:
            c = np.asarray(v_cls, dtype="<f4")
            if c.shape != (dim,):
                raise FormatError("cls vector shape mismatch")
            fh.write(c.tobytes())


def read_feature_record(path):
    """Returns (x_patch_last, x_patch_penult | None, v_cls | None) as f64."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MCFT_MAGIC:
            raise FormatError(f"{path}: bad magic")
        version = _read_u32(fh)
        if version != 1:
            raise FormatError(f"{path}: unsupported version {version}")
        n = _read_u32(fh)
        dim = _read_u32(fh)
        flags = _read_u32(fh)
        count = n * dim

        def read_block(num):
            raw = _read_exact(fh, 4 * num)
            return np.frombuffer(raw, dtype="<f4").astype(np.float64)

        last = read_block(count).reshape(n, dim)
        penult = read_block(count).reshape(n, dim) if flags & FLAG_HAS_PENULT else None
        cls = read_block(dim) if flags & FLAG_HAS_CLS else None
    return last, penult, cls


# --- MCDE --------------------------------------------------------------------


def write_descriptions(path, per_class: list[np.ndarray]) -> None:
    """``per_class[j]`` is an (M_j, dim) array of description embeddings."""
    if not per_class:
        raise FormatError("no classes")
    dim = np.asarray(per_class[0]).shape[1]
    with open(path, "wb") as fh:
        fh.write(MCDE_MAGIC)
        fh.write(struct.pack("<III", 1, len(per_class), dim))
        for emb in per_class:
            emb = np.asarray(emb, dtype="<f4")
            if emb.ndim != 2 or emb.shape[1] != dim:
                raise FormatError("description embedding shape mismatch")
            fh.write(struct.pack("<I", emb.shape[0]))
            fh.write(emb.tobytes())


def read_descriptions(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MCDE_MAGIC:
            raise FormatError(f"{path}: bad magic")
        version = _read_u32(fh)
        if version != 1:
            raise FormatError(f"{path}: unsupported version {version}")
        n_classes = _read_u32(fh)
        dim = _read_u32(fh)
        out = []
        for j in range(n_classes):
            m = _read_u32(fh)
            if m < 1:
                raise FormatError(f"class {j} has no descriptions")
            raw = _read_exact(fh, 4 * m * dim)
            out.append(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(m, dim))
    return out


# --- MCCK --------------------------------------------------------------------


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MCCK_MAGIC)
        fh.write(struct.pack("<II", 1, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MCCK_MAGIC:
            raise FormatError(f"{path}: bad magic")
        version = _read_u32(fh)
        if version != 1:
            raise FormatError(f"{path}: unsupported version {version}")
        count = _read_u32(fh)
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2))[0]
            name = _read_exact(fh, name_len).decode("utf-8")
            ndim = _read_u32(fh)
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim)) if ndim else ()
            num = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * num)
            tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return tensors


# --- PGM ----------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """P5 grayscale raster; float input in [0, 1] is quantized to u8."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Reads P5, returns float64 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a P5 raster")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    img = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / float(maxval)


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """P2 ascii raster with maxval 1 for binary saliency masks."""
    mask = np.asarray(mask, dtype=np.int64)
    h, w = mask.shape
    lines = [f"P2", f"{w} {h}", "1"]
    lines += [" ".join(str(int(v)) for v in row) for row in mask]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_mask_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if tokens[0] != "P2":
        raise FormatError(f"{path}: not a P2 raster")
    w, h = int(tokens[1]), int(tokens[2])
    values = np.array([int(t) for t in tokens[4 : 4 + w * h]], dtype=np.int64)
    return values.reshape(h, w)


# --- manifest ------------------------------------------------------------------


def write_manifest(path, records: list[tuple[str, str, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for image_id, rel_path, label in records:
            fh.write(f"{image_id}\t{rel_path}\t{label}\n")


def read_manifest(path) -> list[tuple[str, str, int]]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            records.append((parts[0], parts[1], int(parts[2])))
    return records
