"""Synthetic two-view dataset with complementary class factors, plus
augmentation transforms and dataset file I/O.

Class identity factorizes as (a, b) with M = M1 * M2.  The latent code
concatenates a factor-a block and a factor-b block; view 1 amplifies
the a-block and attenuates the b-block, view 2 does the opposite, and
each view appends pure-noise nuisance dimensions.  By construction a
linear probe on raw view-1 inputs separates factor a well and factor b
poorly (and vice versa), so any benefit of training one view against
the other's assignments is measurable.

Each sample also stores a second realization drawn from the same class
latent; batch construction uses it for the second augmentation with a
configurable probability, standing in for sampling a different segment
of the same underlying instance.

On disk ("VCCD"): magic, version u16, then u32 counts (streams,
samples, one dim per stream, label count), per-stream float32 sample
blocks (each written as the dim x samples array in C order), then u32
labels.  Values are float32 on disk and widened to float64 in memory;
generated data is quantized to float32 at creation so save/load
round-trips are bit-exact.  An optional "ALTR" trailer after the labels
carries the alternate-realization blocks; files without it load with
the alternate aliased to the primary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fileio
from .numerics import Matrix, derive_rng

DATASET_MAGIC = b"VCCD"
DATASET_VERSION = 1
ALT_MAGIC = b"ALTR"


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    factor_split: tuple = (4, 2)
    samples_per_class: int = 256
    test_samples_per_class: int = 64
    latent_dim: int = 16
    view_dims: tuple = (32, 32)      # total per-stream dim, nuisance included
    nuisance_dims: int = 8
    view_noise_sd: float = 0.1
    latent_noise_sd: float = 0.35
    amplify: float = 1.0
    attenuate: float = 0.15
    seed: int = 7

    def __post_init__(self):
        m1, m2 = self.factor_split
        if m1 * m2 != self.num_classes:
            raise ValueError(
                f"factor split {m1}x{m2} does not produce {self.num_classes} classes"
            )
        if m1 < 2 or m2 < 2:
            raise ValueError("each factor needs at least 2 levels")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        for d in self.view_dims:
            if d - self.nuisance_dims < self.latent_dim:
                raise ValueError(
                    f"view dim {d} minus {self.nuisance_dims} nuisance dims must "
                    f"cover the {self.latent_dim}-dim latent"
                )
        if self.view_noise_sd < 0 or self.latent_noise_sd < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if self.samples_per_class < 1:
            raise ValueError("need at least one sample per class")


@dataclass(frozen=True)
class AugmentationSpec:
    additive_noise_sd: float = 0.1
    mask_prob: float = 0.05
    scale_jitter: float = 0.1
    temporal_prob: float = 0.5   # chance the second augmentation starts from the alternate realization

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        if not 0.0 <= self.temporal_prob <= 1.0:
            raise ValueError(f"temporal_prob must be in [0, 1], got {self.temporal_prob}")
        if self.additive_noise_sd < 0:
            raise ValueError("additive_noise_sd must be >= 0")
        if not 0.0 <= self.scale_jitter < 1.0:
            raise ValueError(f"scale_jitter must be in [0, 1), got {self.scale_jitter}")


@dataclass
class TwoStreamDataset:
    x1: Matrix            # d1 x N
    x2: Matrix            # d2 x N
    labels: np.ndarray    # N ints; used only by evaluation
    x1_alt: Matrix = None
    x2_alt: Matrix = None

    def __post_init__(self):
        if not (self.x1.shape[1] == self.x2.shape[1] == len(self.labels)):
            raise ValueError("streams and labels must share the sample count")
        if self.x1_alt is None:
            self.x1_alt = self.x1
        if self.x2_alt is None:
            self.x2_alt = self.x2

    @property
    def num_samples(self) -> int:
        return self.x1.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def has_alt(self) -> bool:
        return self.x1_alt is not self.x1


@dataclass
class TwoStreamBatch:
    x1_i: Matrix
    x1_j: Matrix
    x2_i: Matrix
    x2_j: Matrix
    labels: np.ndarray
    indices: np.ndarray


def factor_labels(labels: np.ndarray, factor_split) -> tuple:
    """Split combined class ids into (factor_a, factor_b) level arrays."""
    _, m2 = factor_split
    labels = np.asarray(labels)
    return labels // m2, labels % m2


def _orthonormal_columns(rows: int, cols: int, rng) -> Matrix:
    q, _ = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q[:, :cols]


def _f32_quantize(x: Matrix) -> Matrix:
    return x.astype("<f4").astype(np.float64)


def generate(spec: SyntheticSpec):
    """Build (train, test) splits; same spec and seed give identical bytes."""
    m1, m2 = spec.factor_split
    la = spec.latent_dim // 2
    lb = spec.latent_dim - la
    rng = derive_rng(spec.seed, 0)

    mu_a = rng.normal(size=(m1, la))
    mu_b = rng.normal(size=(m2, lb))
    for mu in (mu_a, mu_b):
        diff = mu[:, None, :] - mu[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() < 1e-6:
            raise ValueError("degenerate draw: factor means not pairwise distinct")

    sig1 = spec.view_dims[0] - spec.nuisance_dims
    sig2 = spec.view_dims[1] - spec.nuisance_dims
    a1 = _orthonormal_columns(sig1, spec.latent_dim, rng)
    a2 = _orthonormal_columns(sig2, spec.latent_dim, rng)
    emph1 = np.concatenate([np.full(la, spec.amplify), np.full(lb, spec.attenuate)])
    emph2 = np.concatenate([np.full(la, spec.attenuate), np.full(lb, spec.amplify)])

    def render(mix, emph, u, split_rng):
        signal = mix @ (emph[:, None] * u)
        signal = signal + spec.view_noise_sd * split_rng.normal(size=signal.shape)
        if spec.nuisance_dims:
            noise = split_rng.normal(size=(spec.nuisance_dims, u.shape[1]))
            return np.vstack([signal, noise])
        return signal

    def build_split(per_class: int, split_key: int) -> TwoStreamDataset:
        split_rng = derive_rng(spec.seed, 1, split_key)
        n = per_class * spec.num_classes
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        fa, fb = factor_labels(labels, spec.factor_split)
        mu = np.vstack([mu_a[fa].T, mu_b[fb].T])          # latent x N
        u = mu + spec.latent_noise_sd * split_rng.normal(size=(spec.latent_dim, n))
        u_alt = mu + spec.latent_noise_sd * split_rng.normal(size=(spec.latent_dim, n))
        x1 = render(a1, emph1, u, split_rng)
        x2 = render(a2, emph2, u, split_rng)
        x1_alt = render(a1, emph1, u_alt, split_rng)
        x2_alt = render(a2, emph2, u_alt, split_rng)
        return TwoStreamDataset(
            x1=_f32_quantize(x1), x2=_f32_quantize(x2), labels=labels,
            x1_alt=_f32_quantize(x1_alt), x2_alt=_f32_quantize(x2_alt),
        )

    return build_split(spec.samples_per_class, 0), build_split(spec.test_samples_per_class, 1)


def augment(x: Matrix, spec: AugmentationSpec, rng) -> Matrix:
    """One independent stochastic view of x (per-column jitter, additive
    noise, coordinate dropout).  An all-zero spec is the identity."""
    out = np.array(x, dtype=np.float64, copy=True)
    if spec.scale_jitter > 0:
        scales = rng.uniform(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter,
                             size=out.shape[1])
        out *= scales
    if spec.additive_noise_sd > 0:
        out += spec.additive_noise_sd * rng.normal(size=out.shape)
    if spec.mask_prob > 0:
        out[rng.random(out.shape) < spec.mask_prob] = 0.0
    return out


def iterate_batches(ds: TwoStreamDataset, batch_size: int,
                    aug: AugmentationSpec, rng):
    """Yield augmented four-view batches over one shuffled epoch.

    One shared permutation drives all four view tensors and the labels;
    a trailing partial batch is dropped so batch size stays constant.
    """
    if ds.num_samples < batch_size:
        raise ValueError(
            f"batch size {batch_size} exceeds dataset size {ds.num_samples}"
        )
    perm = rng.permutation(ds.num_samples)
    for start in range(0, ds.num_samples - batch_size + 1, batch_size):
        idx = perm[start:start + batch_size]
        use_alt = rng.random(batch_size) < aug.temporal_prob
        base1 = np.where(use_alt, ds.x1_alt[:, idx], ds.x1[:, idx])
        base2 = np.where(use_alt, ds.x2_alt[:, idx], ds.x2[:, idx])
        yield TwoStreamBatch(
            x1_i=augment(ds.x1[:, idx], aug, rng),
            x1_j=augment(base1, aug, rng),
            x2_i=augment(ds.x2[:, idx], aug, rng),
            x2_j=augment(base2, aug, rng),
            labels=ds.labels[idx],
            indices=idx,
        )


def save_dataset(ds: TwoStreamDataset, path) -> None:
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(fileio.pack_u16(DATASET_VERSION))
        f.write(fileio.pack_u32(2))
        f.write(fileio.pack_u32(ds.num_samples))
        f.write(fileio.pack_u32(ds.x1.shape[0]))
        f.write(fileio.pack_u32(ds.x2.shape[0]))
        f.write(fileio.pack_u32(ds.num_classes))
        f.write(ds.x1.astype("<f4").tobytes(order="C"))
        f.write(ds.x2.astype("<f4").tobytes(order="C"))
        f.write(np.asarray(ds.labels, dtype="<u4").tobytes())
        if ds.has_alt:
            f.write(ALT_MAGIC)
            f.write(ds.x1_alt.astype("<f4").tobytes(order="C"))
            f.write(ds.x2_alt.astype("<f4").tobytes(order="C"))


def load_dataset(path) -> TwoStreamDataset:
    with open(path, "rb") as f:
        rd = fileio.Reader(f.read(), name=str(path))
    rd.expect_magic(DATASET_MAGIC)
    version = rd.u16()
    if version != DATASET_VERSION:
        raise fileio.FileFormatError(f"{path}: unsupported dataset version {version}")
    streams = rd.dim("stream count")
    if streams != 2:
        raise fileio.FileFormatError(f"{path}: expected 2 streams, found {streams}")
    samples = rd.dim("sample count")
    dims = [rd.dim("stream dim") for _ in range(streams)]
    label_count = rd.dim("label count")

    def block(d):
        raw = rd.take(4 * d * samples)
        return np.frombuffer(raw, dtype="<f4").reshape(d, samples).astype(np.float64)

    x1 = block(dims[0])
    x2 = block(dims[1])
    labels = np.frombuffer(rd.take(4 * samples), dtype="<u4").astype(np.int64)
    if samples and labels.max() >= label_count:
        raise fileio.FileFormatError(
            f"{path}: label {labels.max()} out of range for {label_count} classes"
        )
    x1_alt = x2_alt = None
    if rd.remaining():
        rd.expect_magic(ALT_MAGIC)
        x1_alt = block(dims[0])
        x2_alt = block(dims[1])
    return TwoStreamDataset(x1=x1, x2=x2, labels=labels,
                            x1_alt=x1_alt, x2_alt=x2_alt)


def load_dataset_csv(path) -> TwoStreamDataset:
    """Import hand-made fixtures: header ``stream,x0,...,x{d-1},label``,
    one row per (sample, stream), samples paired by order within stream."""
    rows = {1: [], 2: []}
    labels = {1: [], 2: []}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if len(header) < 3 or header[0] != "stream" or header[-1] != "label":
            raise fileio.FileFormatError(
                f"{path}: expected header 'stream,x0,...,label', got {header!r}"
            )
        width = len(header) - 2
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != width + 2:
                raise fileio.FileFormatError(
                    f"{path}:{lineno}: expected {width + 2} fields, got {len(parts)}"
                )
            stream = int(parts[0])
            if stream not in (1, 2):
                raise fileio.FileFormatError(
                    f"{path}:{lineno}: stream must be 1 or 2, got {stream}"
                )
            rows[stream].append([np.float32(v) for v in parts[1:-1]])
            labels[stream].append(int(parts[-1]))
    if len(rows[1]) != len(rows[2]):
        raise fileio.FileFormatError(
            f"{path}: stream 1 has {len(rows[1])} rows but stream 2 has {len(rows[2])}"
        )
    if labels[1] != labels[2]:
        raise fileio.FileFormatError(f"{path}: per-sample labels differ across streams")
    x1 = np.asarray(rows[1], dtype=np.float64).T
    x2 = np.asarray(rows[2], dtype=np.float64).T
    return TwoStreamDataset(x1=x1, x2=x2, labels=np.asarray(labels[1], dtype=np.int64))
