"""Dataset ingestion: IDX image/label files, a names corpus, synthetic stand-ins."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DTYPE, Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

ALPHABET = ".abcdefghijklmnopqrstuvwxyz"
BOUNDARY = "."
VOCAB_SIZE = len(ALPHABET)
_CHAR_TO_ID = {c: i for i, c in enumerate(ALPHABET)}


class IdxFormatError(ValueError):
    pass


class WrongMagicError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class EmptyCorpusError(ValueError):
    pass


@dataclass
class Dataset:
    """Inputs/targets with stable sample ids ``0..n-1``.

    Vision: inputs (n, 1, 28, 28) float32 in [0, 1], targets (n,) class ids.
    Text: inputs (n, T) token ids, targets (n, T) next-token ids.
    """

    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"
    task: str = "vision"

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids, dtype=np.int64)
        return Dataset(self.inputs[ids], self.targets[ids], self.split, self.task)

    def batches(self, batch_size: int, rng: Rng | None = None):
        """Yield ``(ids, inputs, targets)``; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            ids = order[start:start + batch_size]
            yield ids, self.inputs[ids], self.targets[ids]


# ----------------------------------------------------------------------- IDX


def _read_header(buf: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    if len(buf) < 4 * (1 + ndims):
        raise TruncatedPayloadError(f"{path}: header truncated ({len(buf)} bytes)")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise WrongMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", buf[4:4 + 4 * ndims])


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    n, rows, cols = _read_header(buf, IDX_IMAGES_MAGIC, 3, path)
    payload = buf[16:]
    need = n * rows * cols
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: expected {need} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n,) = _read_header(buf, IDX_LABELS_MAGIC, 1, path)
    payload = buf[8:]
    if len(payload) < n:
        raise TruncatedPayloadError(f"{path}: expected {n} label bytes, found {len(payload)}")
    labels = np.frombuffer(payload, dtype=np.uint8, count=n)
    if labels.size and labels.max() > 9:
        raise IdxFormatError(f"{path}: label {labels.max()} outside 0..9")
    return labels


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def load_idx_images(images_path, labels_path, split: str = "train") -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(DTYPE) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), split, "vision")


# --------------------------------------------------------------------- names


def normalize_name(name: str) -> str:
    return "".join(c for c in name.strip().lower() if "a" <= c <= "z")


def tokenize(text: str) -> list[int]:
    return [_CHAR_TO_ID[c] for c in text]


def detokenize(ids) -> str:
    return "".join(ALPHABET[int(i)] for i in ids)


def windows_from_names(names: list[str], context: int, split: str = "train") -> Dataset:
    """Sliding (window, next-char) pairs.

    Each name is padded with ``context`` leading boundary tokens and one
    trailing one, giving ``len(name) + 1`` windows. Targets hold the next token
    for every window position; the last column is the pair's next char.
    """
    xs, ys = [], []
    for name in names:
        seq = tokenize(BOUNDARY * context + name + BOUNDARY)
        for i in range(len(name) + 1):
            xs.append(seq[i:i + context])
            ys.append(seq[i + 1:i + context + 1])
    if not xs:
        raise EmptyCorpusError("no names to build windows from")
    return Dataset(np.asarray(xs, dtype=np.int64), np.asarray(ys, dtype=np.int64), split, "text")


def read_names(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    names = [n for n in (normalize_name(line) for line in text.split("\n")) if n]
    if not names:
        raise EmptyCorpusError(f"{path}: no names")
    return names


def load_names_corpus(path, context: int, split: str = "train") -> Dataset:
    return windows_from_names(read_names(path), context, split)


# ----------------------------------------------------------------- synthetic

# Horizontal bars for classes 0-4, vertical bars for 5-9; each band is 3 pixels.
BAR_BANDS = (0, 6, 12, 18, 24)
LABEL_NOISE = 0.05
NOISE_LEVEL = 0.35
N_BLOBS = 3


def _draw_sample(rng: Rng, cls: int) -> np.ndarray:
    img = rng.uniform(0.0, NOISE_LEVEL, (28, 28))
    band = BAR_BANDS[cls % 5]
    length = int(rng.integers(8, 29))
    start = int(rng.integers(0, 29 - length))
    level = rng.uniform(0.35, 0.8)
    if cls < 5:
        img[band:band + 3, start:start + length] += level
    else:
        img[start:start + length, band:band + 3] += level
    # distractor blobs that carry no class information
    yy, xx = np.mgrid[0:28, 0:28]
    for _ in range(N_BLOBS):
        cy, cx = rng.integers(2, 26, size=2)
        img += rng.uniform(0.3, 0.7) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 3.0)
    return np.clip(img, 0.0, 1.0)


def synthetic_vision(n: int, seed: int, split: str = "train") -> Dataset:
    """10-class 28x28 bar images with class-determined bar position.

    Class c < 5 has a horizontal bar in rows ``BAR_BANDS[c] .. +2``; class
    c >= 5 a vertical bar in the same column band. Training splits get 5%
    uniformly random label noise; test splits are clean.
    """
    if n < 10:
        raise ValueError("synthetic datasets need n >= 10")
    rng = Rng(seed)
    classes = np.arange(n) % 10
    classes = classes[rng.permutation(n)]
    images = np.stack([_draw_sample(rng, int(c)) for c in classes]).astype(DTYPE)
    labels = classes.copy()
    if split == "train":
        flip = rng.uniform(0, 1, n) < LABEL_NOISE
        labels[flip] = rng.integers(0, 10, int(flip.sum()))
    return Dataset(images[:, None], labels.astype(np.int64), split, "vision")


# Followers for each preceding character; sampling a uniform position in the
# string samples the bigram table. '.' marks the start/end of a name.
BIGRAMS = {
    ".": "aaaabbcddeejjkkllmmmnnprrsssttz",
    "a": "nnnnnrrrrlllliiyyhmmsdde.....",
    "b": "aaeeeirrolu",
    "c": "haaeeokki",
    "d": "aaeeeiioor.",
    "e": "lllnnnrrrsssyytta.....",
    "f": "aaeirr",
    "g": "aaeeiorh.",
    "h": "aaaaeeiio.",
    "i": "aaannnsssellcek.",
    "j": "aaaeoou",
    "k": "aaeeiy..",
    "l": "aaaeeeiiilloy...",
    "m": "aaaaeeiioy.",
    "n": "aaaeeiinndt.....",
    "o": "nnnrrrlsbmu..",
    "p": "aaeehir",
    "q": "uu",
    "r": "aaaeeeiiioyy...",
    "s": "aaeehhiotts...",
    "t": "aaeehhiioot..",
    "u": "nnrrssl",
    "v": "aaeeiio",
    "w": "aaeeiy",
    "x": "aaie.",
    "y": "aaalnnns....",
    "z": "aaeiy.",
}
MAX_NAME_LEN = 12


def synthetic_names(n: int, seed: int) -> list[str]:
    rng = Rng(seed)
    names = []
    while len(names) < n:
        prev, chars = BOUNDARY, []
        while len(chars) < MAX_NAME_LEN:
            followers = BIGRAMS[prev]
            nxt = followers[int(rng.integers(0, len(followers)))]
            if nxt == BOUNDARY:
                break
            chars.append(nxt)
            prev = nxt
        if len(chars) >= 2:
            names.append("".join(chars))
    return names


def synthetic_text(n: int, seed: int, context: int = 16, split: str = "train") -> Dataset:
    """Windows over ``n`` names sampled from the embedded bigram table."""
    if n < 10:
        raise ValueError("synthetic datasets need n >= 10")
    return windows_from_names(synthetic_names(n, seed), context, split)
