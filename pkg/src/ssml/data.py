"""Subject datasets, the MSHD container format, LOSO/few-shot splitting and
a synthetic subject-shift generator.

MSHD layout (all little-endian)::

    b"MSHD"  u16 version  u32 n_subjects
    per subject:
        u16 id_len, id bytes (utf-8)
        u32 N, u32 C, u32 T, u32 n_classes
        N*C*T float32 samples, N int32 labels
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

MAGIC = b"MSHD"
VERSION = 1


class DataError(ValueError):
    """Invalid dataset contents or split request."""


class FormatError(DataError):
    """Malformed MSHD file."""


@dataclass
class SubjectDataset:
    subject_id: str
    samples: np.ndarray  # N x C x T float32
    labels: np.ndarray  # N int
    n_classes: int
    degenerate: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 3:
            raise DataError(f"subject {self.subject_id}: samples must be N x C x T, got {self.samples.shape}")
        if len(self.labels) == 0:
            raise DataError(f"subject {self.subject_id}: no samples")
        if len(self.samples) != len(self.labels):
            raise DataError(f"subject {self.subject_id}: {len(self.samples)} samples but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"subject {self.subject_id}: labels outside [0, {self.n_classes})")
        present = np.unique(self.labels)
        if len(present) < self.n_classes:
            self.degenerate = True

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape[1], self.samples.shape[2]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx: np.ndarray, suffix: str = "") -> "SubjectDataset":
        return SubjectDataset(self.subject_id + suffix, self.samples[idx], self.labels[idx], self.n_classes)

    def equals(self, other: "SubjectDataset") -> bool:
        return (self.subject_id == other.subject_id and self.n_classes == other.n_classes
                and np.array_equal(self.labels, other.labels)
                and self.samples.shape == other.samples.shape
                and self.samples.tobytes() == other.samples.tobytes())


# ---------------------------------------------------------------------------
# MSHD io
# ---------------------------------------------------------------------------


def save_datasets(path: str | Path, datasets: list[SubjectDataset]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(datasets)))
        for ds in datasets:
            sid = ds.subject_id.encode("utf-8")
            n, c, t = ds.samples.shape
            fh.write(struct.pack("<H", len(sid)) + sid)
            fh.write(struct.pack("<IIII", n, c, t, ds.n_classes))
            fh.write(np.ascontiguousarray(ds.samples, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())


def load_datasets(path: str | Path) -> list[SubjectDataset]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated while reading {what} (offset {pos}, need {n} bytes)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not an MSHD file (bad or missing magic)")
    pos = 4
    version, n_subjects = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported MSHD version {version} (expected {VERSION})")
    out = []
    for _ in range(n_subjects):
        (id_len,) = struct.unpack("<H", take(2, "subject id length"))
        sid = take(id_len, "subject id").decode("utf-8")
        n, c, t, k = struct.unpack("<IIII", take(16, f"subject {sid} header"))
        samples = np.frombuffer(take(4 * n * c * t, f"subject {sid} samples"), dtype="<f4").reshape(n, c, t)
        labels = np.frombuffer(take(4 * n, f"subject {sid} labels"), dtype="<i4")
        out.append(SubjectDataset(sid, samples.astype(np.float32), labels.astype(np.int64), k))
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes after last subject")
    return out


def save_dataset(path: str | Path, dataset: SubjectDataset) -> None:
    save_datasets(path, [dataset])


def load_dataset(path: str | Path) -> SubjectDataset:
    datasets = load_datasets(path)
    if len(datasets) != 1:
        raise FormatError(f"{path}: expected one subject, found {len(datasets)}")
    return datasets[0]


def export_labels_csv(path: str | Path, datasets: list[SubjectDataset]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "index", "label"])
        for ds in datasets:
            for i, y in enumerate(ds.labels):
                w.writerow([ds.subject_id, i, int(y)])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def loso_split(datasets: list[SubjectDataset], target_index: int) -> tuple[list[SubjectDataset], SubjectDataset]:
    if len(datasets) < 2:
        raise DataError(f"LOSO needs at least 2 subjects, got {len(datasets)}")
    if not 0 <= target_index < len(datasets):
        raise IndexError(f"target index {target_index} out of range for {len(datasets)} subjects")
    sources = [ds for i, ds in enumerate(datasets) if i != target_index]
    return sources, datasets[target_index]


@dataclass
class FewShotSplit:
    target: SubjectDataset
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    eval_idx: np.ndarray

    @property
    def labeled(self) -> tuple[np.ndarray, np.ndarray]:
        return self.target.samples[self.labeled_idx], self.target.labels[self.labeled_idx]

    @property
    def unlabeled(self) -> np.ndarray:
        return self.target.samples[self.unlabeled_idx]

    @property
    def eval(self) -> tuple[np.ndarray, np.ndarray]:
        return self.target.samples[self.eval_idx], self.target.labels[self.eval_idx]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for idx in (self.labeled_idx, self.unlabeled_idx, self.eval_idx):
            h.update(np.asarray(idx, dtype=np.int64).tobytes() + b"|")
        return h.hexdigest()


def few_shot_sample(target: SubjectDataset, n_shot: int, eval_fraction: float = 0.3, seed: int = 0) -> FewShotSplit:
    """Split a target subject into labeled / unlabeled / eval parts.

    Each class is permuted once per seed; its first ``round(eval_fraction * count)``
    samples are held out for scoring and the next ``n_shot`` become labeled. The
    eval part therefore does not depend on ``n_shot``, and labeled sets are nested
    across shot counts.
    """
    if n_shot < 0:
        raise DataError(f"n_shot must be >= 0, got {n_shot}")
    if not 0 <= eval_fraction < 1:
        raise DataError(f"eval_fraction must be in [0, 1), got {eval_fraction}")
    rng = np.random.default_rng(seed)
    labeled, unlabeled, held = [], [], []
    for cls in range(target.n_classes):
        idx = np.flatnonzero(target.labels == cls)
        n_eval = int(round(eval_fraction * len(idx)))
        if len(idx) < n_shot + 1 or len(idx) - n_eval < n_shot:
            raise DataError(f"class {cls} of subject {target.subject_id} has {len(idx)} samples; "
                            f"{n_shot}-shot with eval fraction {eval_fraction} needs more")
        idx = idx[rng.permutation(len(idx))]
        held.append(idx[:n_eval])
        labeled.append(idx[n_eval:n_eval + n_shot])
        unlabeled.append(idx[n_eval + n_shot:])
    return FewShotSplit(target, np.sort(np.concatenate(labeled)), np.sort(np.concatenate(unlabeled)),
                        np.sort(np.concatenate(held)))


def stratified_holdout(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask selecting ``round(fraction * count)`` samples of every label value."""
    mask = np.zeros(len(labels), dtype=bool)
    for value in np.unique(labels):
        idx = np.flatnonzero(labels == value)
        k = int(round(fraction * len(idx)))
        mask[rng.choice(idx, size=k, replace=False)] = True
    return mask


# ---------------------------------------------------------------------------
# synthetic subject-shift generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 8
    n_classes: int = 2
    channels: int = 32
    time_len: int = 128
    samples_per_subject: int = 144
    shift_scale: float = 1.0
    noise_sd: float = 1.0
    seed: int = 0
    class_sep: float = 0.5
    smooth: float = 4.0
    scale: float = 1.0
    bias_weight: float = 1.0
    common_weight: float = 1.0

    def __post_init__(self):
        if self.shift_scale < 0 or self.noise_sd < 0:
            raise DataError("shift_scale and noise_sd must be non-negative")
        if self.scale <= 0:
            raise DataError("scale must be positive")
        if self.samples_per_subject < self.n_classes:
            raise DataError(f"samples_per_subject ({self.samples_per_subject}) must be >= n_classes ({self.n_classes})")
        if min(self.n_subjects, self.n_classes, self.channels, self.time_len) < 1:
            raise DataError("n_subjects, n_classes, channels and time_len must be positive")


def _smooth_field(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    """Unit-RMS random field smoothed along the time axis."""
    f = rng.standard_normal(shape)
    if sigma > 0:
        f = gaussian_filter1d(f, sigma, axis=-1, mode="wrap")
    return f / np.sqrt(np.mean(f * f))


@dataclass
class SynthModel:
    """Latent structure of a synthetic benchmark: class prototypes and per-subject transforms.

    Sample ``x`` of class ``k`` from subject ``s`` is
    ``scale * (mix[s] @ prototypes[k] + bias[s] + noise)``.
    """

    config: SynthConfig
    prototypes: np.ndarray  # K x C x T
    mix: np.ndarray  # S x C x C
    bias: np.ndarray  # S x C x T
    datasets: list[SubjectDataset] = field(default_factory=list)

    def means(self, subject: int) -> np.ndarray:
        return self.config.scale * (np.matmul(self.mix[subject], self.prototypes) + self.bias[subject])

    def bayes_predict(self, subject: int, x: np.ndarray) -> np.ndarray:
        """Maximum-likelihood class under the generator's isotropic Gaussian noise."""
        mu = self.means(subject).reshape(self.config.n_classes, -1)
        flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        d = ((flat[:, None, :] - mu[None]) ** 2).sum(-1)
        return d.argmin(axis=1)


def synth_model(config: SynthConfig) -> SynthModel:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    C, T, K, S = cfg.channels, cfg.time_len, cfg.n_classes, cfg.n_subjects
    common = _smooth_field(rng, (C, T), cfg.smooth)
    distinct = _smooth_field(rng, (K, C, T), cfg.smooth)
    prototypes = cfg.common_weight * common[None] + cfg.class_sep * distinct
    mix = np.empty((S, C, C))
    bias = np.empty((S, C, T))
    for s in range(S):
        q, _ = np.linalg.qr(rng.standard_normal((C, C)))
        mix[s] = np.eye(C) + cfg.shift_scale * (q - np.eye(C)) / 2
        bias[s] = cfg.shift_scale * cfg.bias_weight * _smooth_field(rng, (C, T), cfg.smooth)
    model = SynthModel(cfg, prototypes, mix, bias)
    per_class = np.full(K, cfg.samples_per_subject // K)
    per_class[: cfg.samples_per_subject % K] += 1
    for s in range(S):
        labels = rng.permutation(np.repeat(np.arange(K), per_class))
        means = model.means(s)
        noise = rng.standard_normal((len(labels), C, T)) * (cfg.noise_sd * cfg.scale)
        samples = (means[labels] + noise).astype(np.float32)
        model.datasets.append(SubjectDataset(f"S{s + 1:02d}", samples, labels, K))
    return model


def synth_generate(config: SynthConfig) -> list[SubjectDataset]:
    """Deterministic synthetic subjects; see :class:`SynthModel` for the generative form."""
    return synth_model(config).datasets
