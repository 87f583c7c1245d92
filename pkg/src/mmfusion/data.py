"""Image/report/label examples, manifest and PGM IO, and a synthetic generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .features import Tokenizer, encode_text
from .tensor import Rng

CLASS_NAMES = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged-Cardiomediastinum",
    "Fracture",
    "Lung-Lesion",
    "Lung-Opacity",
    "No-Finding",
    "Pleural-Effusion",
    "Pleural-Other",
    "Pneumonia",
    "Pneumothorax",
    "Support-Devices",
)
N_CLASSES = len(CLASS_NAMES)
NO_FINDING = 8
DISEASES = tuple(i for i in range(N_CLASSES) if i != NO_FINDING)
SPLITS = ("train", "validation", "test")


class DataError(ValueError):
    pass


def check_labels(labels: Sequence[int], where: str = "") -> None:
    prefix = f"{where}: " if where else ""
    if len(labels) != N_CLASSES:
        raise DataError(f"{prefix}expected {N_CLASSES} labels, got {len(labels)}")
    if any(v not in (0, 1) for v in labels):
        raise DataError(f"{prefix}labels must be 0 or 1")
    if labels[NO_FINDING] and any(labels[i] for i in DISEASES):
        raise DataError(f"{prefix}No-Finding set together with a finding label")


@dataclass
class Example:
    id: str
    image: np.ndarray
    report: str
    labels: tuple[int, ...]

    def __post_init__(self):
        self.labels = tuple(int(v) for v in self.labels)
        check_labels(self.labels, self.id)

    def __eq__(self, other):
        return (isinstance(other, Example) and self.id == other.id and self.report == other.report
                and self.labels == other.labels and np.array_equal(self.image, other.image))


@dataclass
class Dataset:
    examples: list[Example] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        seen = set()
        for ex in self.examples:
            if ex.id in seen:
                raise DataError(f"duplicate example id {ex.id!r} in split {self.split}")
            seen.add(ex.id)

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def labels(self) -> np.ndarray:
        return np.array([ex.labels for ex in self.examples], dtype=np.float64).reshape(-1, N_CLASSES)


# -- PGM ------------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def decode_pgm(buf: bytes) -> np.ndarray:
    magic, w, h, maxval = None, 0, 0, 0
    tokens, pos = _pgm_tokens(buf, 4)
    magic = tokens[0]
    if magic != b"P5":
        raise DataError(f"not a binary PGM (magic {magic!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if w != h:
        raise DataError(f"PGM must be square, got {w}x{h}")
    if maxval != 255:
        raise DataError(f"PGM maxval must be 255, got {maxval}")
    raster = buf[pos:pos + w * h]
    if len(raster) != w * h:
        raise DataError("truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w) / 255.0


def load_pgm(path: str | Path) -> np.ndarray:
    try:
        return decode_pgm(Path(path).read_bytes())
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def encode_pgm(image: np.ndarray) -> bytes:
    px = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def save_pgm(path: str | Path, image: np.ndarray):
    Path(path).write_bytes(encode_pgm(image))


# -- manifests --------------------------------------------------------------

def load_manifest(path: str | Path, split: str | None = None) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    examples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ex_id, image, report, labels = rec["id"], rec["image"], rec["report"], rec["labels"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed manifest line ({exc})") from None
        if not isinstance(labels, list):
            raise DataError(f"{path}:{lineno}: labels must be a list")
        try:
            check_labels(labels)
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        img_path = root / image
        if not img_path.is_file():
            raise FileNotFoundError(f"{path}:{lineno}: image not found: {img_path}")
        examples.append(Example(ex_id, load_pgm(img_path), report, labels))
    return Dataset(examples, split or path.stem)


def write_manifest(dataset: Dataset, path: str | Path, image_dir: str = "images"):
    """Write PGMs under ``<manifest dir>/<image_dir>`` and one JSON line per example."""
    path = Path(path)
    (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    lines = []
    for ex in dataset:
        rel = f"{image_dir}/{ex.id}.pgm"
        save_pgm(path.parent / rel, ex.image)
        rec = {"id": ex.id, "image": rel, "report": ex.report, "labels": list(ex.labels)}
        lines.append(json.dumps(rec, sort_keys=True) + "\n")
    path.write_text("".join(lines), encoding="utf-8")


# -- synthetic data ---------------------------------------------------------

THEME_WORDS = {
    0: "atelectasis",
    1: "cardiomegaly",
    2: "consolidation",
    3: "edema",
    4: "mediastinum",
    5: "fracture",
    6: "lesion",
    7: "opacity",
    9: "effusion",
    10: "thickening",
    11: "pneumonia",
    12: "pneumothorax",
    13: "device",
}

FILLERS = (
    "the lungs are expanded",
    "heart size is within limits",
    "bony structures are intact",
    "no acute distress noted",
    "comparison with prior study",
    "the trachea is midline",
)


@dataclass
class SyntheticSpec:
    n_train: int = 400
    n_val: int = 12
    n_test: int = 48
    side: int = 16
    patch_size: int = 8
    text_signal_classes: tuple[int, ...] = (0, 2, 4, 6, 10)
    vision_signal_classes: tuple[int, ...] = (1, 3, 5, 7, 12)
    both_signal_classes: tuple[int, ...] = (9, 11, 13)
    noise_rate: float = 0.05
    seed: int = 0
    disease_rate: float = 0.25
    background: float = 0.25
    n_fillers: int = 0
    theme_words: dict = field(default_factory=lambda: dict(THEME_WORDS))

    @classmethod
    def scaled(cls, n: int, **kw) -> "SyntheticSpec":
        """Train size ``n`` with validation/test at 3% / 12% of it (400 -> 12 / 48)."""
        return cls(n_train=n, n_val=round(0.03 * n), n_test=round(0.12 * n), **kw)

    def validate(self):
        parts = [set(self.text_signal_classes), set(self.vision_signal_classes),
                 set(self.both_signal_classes)]
        union = set().union(*parts)
        if sum(len(p) for p in parts) != len(union) or union != set(DISEASES):
            raise DataError("signal class subsets must partition the 13 disease classes")
        if self.side % self.patch_size:
            raise DataError("side must be divisible by patch_size")
        if (self.patch_size // 2) ** 2 < len(DISEASES):
            raise DataError("image geometry too small for one evidence region per class")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise DataError("noise_rate must lie in [0, 1]")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise DataError("split sizes must be non-negative")
        missing = [c for c in DISEASES if c not in self.theme_words]
        if missing:
            raise DataError(f"no theme word for classes {missing}")

    def has_text(self, c: int) -> bool:
        return c in self.text_signal_classes or c in self.both_signal_classes

    def has_vision(self, c: int) -> bool:
        return c in self.vision_signal_classes or c in self.both_signal_classes


def evidence_region(spec: SyntheticSpec, c: int) -> tuple[slice, slice]:
    """Pixel block marking class ``c``: a 2x2 block in its own patch.

    Each class also gets its own offset inside the patch, so the classes stay
    distinguishable after the patch embeddings are mean-pooled.
    """
    k = DISEASES.index(c)
    p = spec.patch_size
    g = spec.side // p
    per_row = p // 2
    pr, pc = divmod(k % (g * g), g)
    orow, ocol = divmod(k, per_row)
    r0 = pr * p + 2 * orow
    c0 = pc * p + 2 * ocol
    return slice(r0, r0 + 2), slice(c0, c0 + 2)


def _make_example(spec: SyntheticSpec, rng: Rng, ex_id: str) -> Example:
    draws = rng.uniform(len(DISEASES))
    labels = [0] * N_CLASSES
    for c, u in zip(DISEASES, draws):
        labels[c] = int(u < spec.disease_rate)
    if not any(labels):
        labels[NO_FINDING] = 1
    flips = rng.uniform((len(DISEASES), 2)) < spec.noise_rate
    text_evidence, vision_evidence = [], []
    for j, c in enumerate(DISEASES):
        if spec.has_text(c) and bool(labels[c]) != flips[j, 0]:
            text_evidence.append(c)
        if spec.has_vision(c) and bool(labels[c]) != flips[j, 1]:
            vision_evidence.append(c)

    image = np.round(rng.uniform((spec.side, spec.side)) * spec.background * 255) / 255
    for c in vision_evidence:
        rows, cols = evidence_region(spec, c)
        image[rows, cols] = 1.0

    filler_pick = rng.integers(0, len(FILLERS), size=spec.n_fillers)
    order = rng.permutation(len(text_evidence))
    words = [spec.theme_words[text_evidence[i]] for i in order]
    report = "findings : " + (" ".join(words) if words else "unremarkable") + " ."
    report += "".join(f" {FILLERS[i]} ." for i in filler_pick)
    return Example(ex_id, image, report, tuple(labels))


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic (train, validation, test) splits; use ``corpus(train)`` for the tokenizer."""
    spec.validate()
    rng = Rng(spec.seed)
    out = []
    for split, n in zip(SPLITS, (spec.n_train, spec.n_val, spec.n_test)):
        out.append(Dataset([_make_example(spec, rng, f"{split}-{i:05d}") for i in range(n)], split))
    return tuple(out)


def corpus(dataset: Dataset) -> list[str]:
    return [ex.report for ex in dataset]


@dataclass
class Batch:
    ids: list[str]
    token_ids: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)


def make_batch(examples: Sequence[Example], tokenizer: Tokenizer, seq_len: int) -> Batch:
    return Batch(
        [ex.id for ex in examples],
        np.array([encode_text(tokenizer, ex.report, seq_len) for ex in examples], dtype=np.int64),
        np.stack([ex.image for ex in examples]) if examples else np.zeros((0, 0, 0)),
        np.array([ex.labels for ex in examples], dtype=np.float64).reshape(-1, N_CLASSES),
    )


def batch_iter(d: Dataset, batch_size: int, tokenizer: Tokenizer, seq_len: int,
               shuffle: bool = False, rng: Rng | None = None) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(d)) if shuffle else np.arange(len(d))
    for start in range(0, len(d), batch_size):
        yield make_batch([d[int(i)] for i in order[start:start + batch_size]], tokenizer, seq_len)
