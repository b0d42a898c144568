"""Seeded synthetic tasks and the sequential-MNIST loader."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .exceptions import ConfigError, FormatError
from .lti import DiagonalSystem
from .scan import linear_scan

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    """Train/test split. ``featurize`` maps stored inputs to ``(batch, L, d_in)`` floats."""

    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    d_in: int
    d_out: int
    loss: str                      # "cross_entropy" | "mse"
    pooling: str = "mean"
    featurize: Callable = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.featurize is None:
            self.featurize = lambda x: np.asarray(x, dtype=float)

    @property
    def n_train(self):
        return self.train_x.shape[0]

    def batch(self, idx, split="train"):
        x = self.train_x if split == "train" else self.test_x
        y = self.train_y if split == "train" else self.test_y
        return self.featurize(x[idx]), y[idx]

    def batches(self, rng, batch_size):
        """Endless shuffled minibatches over the training split."""
        while True:
            order = rng.permutation(self.n_train)
            for i in range(0, self.n_train - batch_size + 1, batch_size):
                yield self.batch(order[i:i + batch_size])

    def test_batches(self, batch_size=256):
        n = self.test_x.shape[0]
        for i in range(0, n, batch_size):
            yield self.batch(np.arange(i, min(i + batch_size, n)), "test")


def _one_hot(V):
    eye = np.eye(V)

    def featurize(tokens):
        return eye[np.asarray(tokens, dtype=int)]
    return featurize


# --------------------------------------------------------------------------
# teacher-student regression


def make_teacher(rng, r_true, p=1, q=1, rmin=0.5, rmax=0.9):
    """Random stable complex-diagonal teacher with LRU output conventions."""
    mod = rng.uniform(rmin, rmax, r_true)
    phase = rng.uniform(0.2, np.pi - 0.2, r_true)
    a = mod * np.exp(1j * phase)
    # per-mode gains normalized so every mode carries comparable Hankel energy
    B = rng.standard_normal((r_true, p)) + 1j * rng.standard_normal((r_true, p))
    B *= (np.sqrt(1 - mod ** 2) / np.linalg.norm(B, axis=1))[:, None]
    C = rng.standard_normal((q, r_true)) + 1j * rng.standard_normal((q, r_true))
    C /= np.linalg.norm(C, axis=0, keepdims=True)
    return DiagonalSystem(a, B, C, np.zeros((q, p)), real_part_readout=True, post_update_readout=True)


def teacher_outputs(teacher: DiagonalSystem, x):
    """Batched simulation: ``x`` is ``(N, L, p)``, returns ``(N, L, q)``."""
    s = linear_scan(teacher.a, x @ teacher.B.T)
    return (s @ teacher.C.T).real + x @ teacher.D.T


def teacher_lti(seed=0, r_true=4, L=64, p=1, q=1, noise=0.0, n_train=1024, n_test=256, **_):
    rng = np.random.default_rng(seed)
    teacher = make_teacher(rng, r_true, p, q)
    x = rng.standard_normal((n_train + n_test, L, p))
    y = teacher_outputs(teacher, x)
    scale = np.std(y)
    teacher = DiagonalSystem(teacher.a, teacher.B / scale, teacher.C, teacher.D,
                             real_part_readout=True, post_update_readout=True)
    y = y / scale
    if noise:
        y = y + noise * rng.standard_normal(y.shape)
    return Dataset("teacher_lti", x[:n_train], y[:n_train], x[n_train:], y[n_train:],
                   p, q, "mse", pooling="none", info={"teacher": teacher, "r_true": r_true})


# --------------------------------------------------------------------------
# delayed copy


def delayed_copy(seed=0, L=256, k=64, V=8, n_train=4096, n_test=512, **_):
    """Classify the token at position ``L - k`` of a uniform random token string."""
    if not 1 <= k <= L:
        raise ConfigError(f"delay k={k} must lie in [1, L={L}]", "task.k")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, V, size=(n_train + n_test, L)).astype(np.int16)
    labels = tokens[:, L - k].astype(int)
    return Dataset("delayed_copy", tokens[:n_train], labels[:n_train], tokens[n_train:],
                   labels[n_train:], V, V, "cross_entropy", pooling="mean",
                   featurize=_one_hot(V), info={"k": k, "V": V})


# --------------------------------------------------------------------------
# sequential MNIST


def read_idx(path):
    """Parse an IDX image (0x803) or label (0x801) file, optionally gzipped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"IDX file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise FormatError(f"{path}: unknown IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    body = np.frombuffer(data, dtype=np.uint8, offset=header)
    if body.size != int(np.prod(dims)):
        raise FormatError(f"{path}: expected {int(np.prod(dims))} bytes of data, found {body.size}")
    return body.reshape(dims)


def _find(root: Path, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (root / name).is_file():
            return root / name
    return root / stem


def mnist_seq(root="data/mnist", row_stride=1, n_train=None, n_test=None, **_):
    """Pixel-by-pixel MNIST; ``row_stride > 1`` keeps every ``row_stride``-th image row."""
    root = Path(root)
    tr_x = read_idx(_find(root, "train-images-idx3-ubyte"))
    tr_y = read_idx(_find(root, "train-labels-idx1-ubyte"))
    te_x = read_idx(_find(root, "t10k-images-idx3-ubyte"))
    te_y = read_idx(_find(root, "t10k-labels-idx1-ubyte"))
    if n_train:
        tr_x, tr_y = tr_x[:n_train], tr_y[:n_train]
    if n_test:
        te_x, te_y = te_x[:n_test], te_y[:n_test]

    def flatten(imgs):
        return imgs[:, ::row_stride, :].reshape(imgs.shape[0], -1)

    def featurize(pixels):
        return (np.asarray(pixels, dtype=float) / 255.0)[..., None]

    return Dataset("mnist_seq", flatten(tr_x), tr_y.astype(int), flatten(te_x), te_y.astype(int),
                   1, 10, "cross_entropy", pooling="mean", featurize=featurize)


TASKS = {"teacher_lti": teacher_lti, "delayed_copy": delayed_copy, "mnist_seq": mnist_seq}


def make_task(spec: dict, seed: Optional[int] = None):
    """Build a dataset from ``{"name": ..., **params}``; keys may be kebab- or snake-case."""
    spec = {k.replace("-", "_"): v for k, v in spec.items()}
    name = spec.pop("name", None)
    if name not in TASKS:
        raise ConfigError(f"unknown task {name!r}", "task.name")
    if seed is not None and "seed" not in spec and name != "mnist_seq":
        spec["seed"] = seed
    return TASKS[name](**spec)
