"""Image IO (binary PPM, optional PNG) and the annotation index.

Index lines: ``image_file class_id x_min y_min x_max y_max``; class_id -1
marks an ignored region, which is blacked out when the image is loaded.
An image listed with no box fields (``image_file`` alone) is a background image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import GroundTruthBox, clip_box

IGNORE_CLASS = -1


class DataError(ValueError):
    pass


def read_ppm(path) -> np.ndarray:
    """8-bit binary PPM (P6) -> CHW float32 in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_ppm(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as e:  # optional dependency
            raise DataError("PNG support needs Pillow (pip install Pillow)") from e
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return np.ascontiguousarray(arr.transpose(2, 0, 1))
    return read_ppm(path)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(path)
    else:
        write_ppm(path, img)


@dataclass
class Record:
    image_path: str
    boxes: list = field(default_factory=list)
    ignored_regions: list = field(default_factory=list)
    image: np.ndarray | None = None


@dataclass
class DatasetIndex:
    records: list


def parse_index(text: str, source: str = "<index>") -> list[Record]:
    """Records in first-appearance order of their image file."""
    records: dict[str, Record] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        rec = records.setdefault(parts[0], Record(parts[0]))
        if len(parts) == 1:
            continue
        if len(parts) != 6:
            raise DataError(f"{source}:{lineno}: expected 'image class x_min y_min x_max y_max', got {raw!r}")
        try:
            cls = int(parts[1])
            box = tuple(float(v) for v in parts[2:])
        except ValueError:
            raise DataError(f"{source}:{lineno}: non-numeric field in {raw!r}") from None
        if not (box[2] > box[0] and box[3] > box[1]):
            raise DataError(f"{source}:{lineno}: empty box {box}")
        if cls == IGNORE_CLASS:
            rec.ignored_regions.append(box)
        elif cls < 0:
            raise DataError(f"{source}:{lineno}: negative class id {cls}")
        else:
            rec.boxes.append(GroundTruthBox(cls, *box))
    return list(records.values())


def format_index(records) -> str:
    lines = []
    for r in records:
        if not r.boxes and not r.ignored_regions:
            lines.append(r.image_path)
        for b in r.boxes:
            lines.append(f"{r.image_path} {b.class_id} {b.x_min!r} {b.y_min!r} {b.x_max!r} {b.y_max!r}")
        for g in r.ignored_regions:
            lines.append(f"{r.image_path} {IGNORE_CLASS} " + " ".join(repr(float(v)) for v in g))
    return "\n".join(lines) + "\n"


def blackout(img: np.ndarray, regions) -> np.ndarray:
    """Zero the pixels covered by each (x_min, y_min, x_max, y_max) region (pixel-cover rounding)."""
    img = img.copy()
    h, w = img.shape[-2:]
    for reg in regions:
        x0, y0, x1, y1 = clip_box(reg, w, h)
        img[..., int(np.floor(y0)):int(np.ceil(y1)), int(np.floor(x0)):int(np.ceil(x1))] = 0.0
    return img


def _clip_boxes(boxes, w, h) -> list:
    out = []
    for b in boxes:
        x0, y0, x1, y1 = clip_box(b.box, w, h)
        if x1 > x0 and y1 > y0:
            out.append(GroundTruthBox(b.class_id, x0, y0, x1, y1))
    return out


def load_dataset(index_path, image_dir, load_images: bool = True) -> DatasetIndex:
    index_path = Path(index_path)
    if not index_path.exists():
        raise DataError(f"annotation index {index_path} not found")
    records = parse_index(index_path.read_text(encoding="utf-8"), str(index_path))
    root = Path(image_dir) if image_dir else index_path.parent
    for r in records:
        path = root / r.image_path
        if not path.exists():
            raise DataError(f"image {path} referenced by {index_path} not found")
        if load_images:
            img = read_image(path)
            r.image = blackout(img, r.ignored_regions)
            r.boxes = _clip_boxes(r.boxes, img.shape[2], img.shape[1])
    return DatasetIndex(records)


def load_samples(index_path, image_dir, cfg, split: str = "train"):
    """Training samples from files: blurred copies from data.blurred_dir, else synthesized."""
    from .train import Sample, blur_samples

    ds = load_dataset(index_path, image_dir)
    hw = tuple(cfg.model.input_hw)
    for r in ds.records:
        if r.image.shape[1:] != hw:
            raise DataError(f"{r.image_path}: size {r.image.shape[1:]} != model.input_hw {hw}")
    if not cfg.data.blurred_dir:
        return blur_samples([(r.image, r.boxes) for r in ds.records], cfg, split)
    out = []
    for i, r in enumerate(ds.records):
        blurred = blackout(read_image(Path(cfg.data.blurred_dir) / r.image_path), r.ignored_regions)
        out.append(Sample(blurred, r.image, list(r.boxes), i))
    return out
