"""Vocabulary, tokenization, dataset files, batching and the synthetic scene generator."""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InputError

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
DEFAULT_MAX_LEN = 70


class Vocabulary:
    """Word <-> id table with the four reserved ids fixed at 0..3."""

    def __init__(self, words: Sequence[str]):
        self.itos = list(RESERVED) + list(words)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise InputError("vocabulary words must be unique and distinct from reserved tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def words(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    def word(self, idx: int) -> str:
        return self.itos[idx]

    def to_text(self) -> str:
        return "".join(w + "\n" for w in self.itos)

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.splitlines()
        if tuple(lines[:len(RESERVED)]) != RESERVED:
            raise FormatError(f"vocabulary header must list {RESERVED} on the first four lines", 0)
        return cls(lines[len(RESERVED):])

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def split_words(caption: str) -> list[str]:
    return caption.lower().split()


def build_vocab(captions: Iterable[str], max_size: int = 10000) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent words; ties go to the lexicographically smaller word."""
    counts: Counter[str] = Counter()
    seen = False
    for caption in captions:
        seen = True
        counts.update(split_words(caption))
    if not seen or not counts:
        raise InputError("cannot build a vocabulary from an empty caption stream")
    if max_size < len(RESERVED):
        raise ConfigurationError(f"max_size must be at least {len(RESERVED)}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([w for w, _ in ranked[:max_size - len(RESERVED)] if w not in RESERVED])


def tokenize(caption: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    if max_len < 1:
        raise ConfigurationError("max_len must be >= 1")
    return [START] + [vocab.id(w) for w in split_words(caption)[:max_len]] + [END]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.word(i) for i in ids if i not in (PAD, START, END))


# raster files

IMAGE_MAGIC = b"IMGR"


def write_raster(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as ``IMGR`` + width + height + RGB bytes."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"raster must be (H, W, 3), got {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<II", w, h) + image.tobytes())


def read_raster(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad raster magic {blob[:4]!r}", 0)
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated raster header", len(blob))
    w, h = struct.unpack_from("<II", blob, 4)
    need = 12 + w * h * 3
    if len(blob) < need:
        raise FormatError(f"{path}: raster payload truncated, expected {need} bytes", len(blob))
    return np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=12).reshape(h, w, 3).copy()


# examples and dataset files

@dataclass
class CaptionExample:
    id: str
    caption: str
    image: np.ndarray | None = None          # (H, W, 3) uint8
    features: np.ndarray | None = None       # (N, D_c)
    objects: list[dict] = field(default_factory=list)
    references: list[str] = field(default_factory=list)
    source: str = ""

    def all_references(self) -> list[str]:
        return self.references or [self.caption]


def save_dataset(examples: Sequence[CaptionExample], out_dir) -> Path:
    """Write ``dataset.jsonl`` plus one raster (or feature grid) per example under ``images/``."""
    from .vision import FeatureGrid, save_feature_grid

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for ex in examples:
        if ex.image is not None:
            rel = f"images/{ex.id}.imgr"
            write_raster(out_dir / rel, ex.image)
            record = {"id": ex.id, "caption": ex.caption, "image": rel}
        else:
            rel = f"images/{ex.id}.fgrd"
            d = int(round(np.sqrt(len(ex.features))))
            save_feature_grid(FeatureGrid(ex.features, d), out_dir / rel)
            record = {"id": ex.id, "caption": ex.caption, "features": rel}
        if ex.objects:
            record["objects"] = ex.objects
        lines.append(json.dumps(record, separators=(",", ":"), sort_keys=True))
    path = out_dir / "dataset.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_dataset(path) -> list[CaptionExample]:
    """Read a dataset file; ``image``/``features`` paths are relative to its directory."""
    from .vision import load_feature_grid

    path = Path(path)
    if path.is_dir():
        path = path / "dataset.jsonl"
    base = path.parent
    examples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ex = CaptionExample(id=str(rec["id"]), caption=rec["caption"],
                                objects=rec.get("objects", []),
                                references=rec.get("references", []))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if "image" in rec:
            ex.source = str(base / rec["image"])
            ex.image = read_raster(ex.source)
        elif "features" in rec:
            ex.source = str(base / rec["features"])
            ex.features = load_feature_grid(ex.source).vectors
        else:
            raise InputError(f"{path}:{lineno}: record has neither 'image' nor 'features'")
        examples.append(ex)
    if not examples:
        raise InputError(f"{path}: dataset is empty")
    return examples


# synthetic scenes

SHAPES = ("circle", "square", "triangle")
COLORS = {"red": (255, 0, 0), "green": (0, 255, 0), "blue": (0, 0, 255)}
RELATIONS = ("left of", "right of", "above", "below")


def relation(cell_a: tuple[int, int], cell_b: tuple[int, int]) -> str:
    """Spatial relation of object a to object b; cells are (row, col), rows grow downwards."""
    (ra, ca), (rb, cb) = cell_a, cell_b
    if ra != rb:
        return "above" if ra < rb else "below"
    return "left of" if ca < cb else "right of"


def scene_caption(obj_a: dict, obj_b: dict) -> str:
    rel = relation((obj_a["row"], obj_a["col"]), (obj_b["row"], obj_b["col"]))
    return f"a {obj_a['color']} {obj_a['shape']} is {rel} a {obj_b['color']} {obj_b['shape']}"


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    margin = max(1.0, size / 8)
    lo, hi = margin, size - margin
    if shape == "square":
        return (yy > lo) & (yy < hi) & (xx > lo) & (xx < hi)
    if shape == "circle":
        c, r = size / 2, size / 2 - margin
        return (yy - c) ** 2 + (xx - c) ** 2 <= r * r
    if shape == "triangle":
        # apex at top centre, base along the bottom margin
        frac = (yy - lo) / (hi - lo)
        half = frac * (hi - lo) / 2
        return (yy >= lo) & (yy <= hi) & (np.abs(xx - size / 2) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(objects: Sequence[dict], image_size: int, grid: int) -> np.ndarray:
    cell = image_size // grid
    image = np.zeros((image_size, image_size, 3), dtype=np.uint8)
    for obj in objects:
        mask = _shape_mask(obj["shape"], cell)
        y0, x0 = obj["row"] * cell, obj["col"] * cell
        patch = image[y0:y0 + cell, x0:x0 + cell]
        patch[mask] = COLORS[obj["color"]]
    return image


def generate_synthetic(seed: int, n: int, image_size: int = 32, grid: int = 4) -> list[CaptionExample]:
    """
    Deterministic two-object scenes captioned "a <color> <shape> is <relation> a <color> <shape>".

    The two objects differ in both color and shape and occupy distinct cells
    of a ``grid`` x ``grid`` layout over an ``image_size`` square raster.  The
    subject is the object whose color comes first in ``COLORS``, so every
    caption is a function of the rendered scene alone.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if grid * grid < 2:
        raise ConfigurationError(f"a {grid}x{grid} grid cannot hold two objects")
    if image_size % grid or image_size // grid < 3:
        raise ConfigurationError(f"image_size {image_size} must be a multiple of grid {grid} with cells >= 3 px")
    rng = np.random.default_rng(seed)
    colors = list(COLORS)
    examples = []
    for i in range(n):
        cells = rng.choice(grid * grid, size=2, replace=False)
        color_ids = np.sort(rng.choice(len(colors), size=2, replace=False))
        shape_ids = rng.choice(len(SHAPES), size=2, replace=False)
        objects = [{"color": colors[ci], "shape": SHAPES[si], "row": int(c // grid), "col": int(c % grid)}
                   for c, ci, si in zip(cells, color_ids, shape_ids)]
        examples.append(CaptionExample(
            id=f"s{seed}_{i:06d}", caption=scene_caption(*objects),
            image=render_scene(objects, image_size, grid), objects=objects))
    return examples


# batching

@dataclass
class Batch:
    tokens: np.ndarray      # (B, L) int64, PAD-filled
    targets: np.ndarray     # (B, L) tokens shifted left
    mask: np.ndarray        # (B, L) 1.0 where target is a real prediction
    examples: list[CaptionExample]

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    def images(self) -> np.ndarray | None:
        if self.examples[0].image is None:
            return None
        return np.stack([ex.image for ex in self.examples])

    def features(self) -> np.ndarray | None:
        if self.examples[0].features is None:
            return None
        return np.stack([ex.features for ex in self.examples])


def collate(examples: Sequence[CaptionExample], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> Batch:
    seqs = [tokenize(ex.caption, vocab, max_len) for ex in examples]
    width = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), width), PAD, dtype=np.int64)
    for b, s in enumerate(seqs):
        tokens[b, :len(s)] = s
    targets = np.full_like(tokens, PAD)
    targets[:, :-1] = tokens[:, 1:]
    mask = (targets != PAD).astype(np.float64)
    return Batch(tokens, targets, mask, list(examples))


def make_batches(dataset: Sequence[CaptionExample], vocab: Vocabulary, batch_size: int,
                 max_len: int = DEFAULT_MAX_LEN, shuffle_seed: int | None = 0) -> Iterator[Batch]:
    """One epoch of batches; ``shuffle_seed=None`` keeps dataset order."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise InputError("cannot batch an empty dataset")
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield collate([dataset[i] for i in order[start:start + batch_size]], vocab, max_len)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path

