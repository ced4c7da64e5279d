"""Dataset ingestion and the synthetic causal image generator.

Real data follows the OCTDL layout: a directory of images plus a CSV
manifest whose column names and value dictionaries come from configuration.
The synthetic generator renders a retina-like bright band whose appearance
is driven by three latent factors wired as a known causal graph, giving a
desk-scale dataset with ground truth for every evaluation path.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from gcvamd.errors import ImageDecodeError
from gcvamd.graph import BinaryGraph
from gcvamd.seeding import numpy_rng

__all__ = [
    "SampleRecord",
    "SynthConfig",
    "DatasetBundle",
    "MappingConfig",
    "load_octdl",
    "preprocess",
    "bilinear_resize",
    "sample_splits",
    "synth_generate",
]


@dataclass(frozen=True)
class SampleRecord:
    """One labelled scan: u0 neovascularization, u1 drusen, u2 severity 0-3."""

    image: object  # path string or in-memory H x W (x C) array
    u0: int
    u1: int
    u2: int
    disease: str

    def __post_init__(self):
        if self.u0 not in (0, 1) or self.u1 not in (0, 1):
            raise ValueError("u0 and u1 must be binary")
        if self.u2 not in (0, 1, 2, 3):
            raise ValueError("u2 must lie in 0..3")
        if self.disease == "Normal" and (self.u0, self.u1, self.u2) != (0, 0, 0):
            raise ValueError("normal records must carry labels (0, 0, 0)")
        if self.disease == "AMD" and self.u2 < 1:
            raise ValueError("AMD records must have severity >= 1")

    @property
    def labels(self):
        return (self.u0, self.u1, self.u2)


@dataclass
class DatasetBundle:
    """Images N x H x W x C in [0, 1], integer labels N x 3, optional truth graph."""

    images: np.ndarray
    labels: np.ndarray
    truth: BinaryGraph = None
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on sample count")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices, split=None):
        return DatasetBundle(
            images=self.images[indices],
            labels=self.labels[indices],
            truth=self.truth,
            split=self.split if split is None else split,
        )

    def save(self, path):
        from gcvamd.checkpoint import Footer, write_container
        from gcvamd.graph import AugLagState

        arrays = {"images": self.images, "labels": self.labels.astype(np.int64)}
        if self.truth is not None:
            arrays["truth"] = self.truth.adjacency()
        write_container(path, arrays, Footer(seed=0, phase=0, epoch=0, dual=AugLagState()))

    @classmethod
    def load(cls, path, split=""):
        from gcvamd.checkpoint import read_container

        arrays, _ = read_container(path)
        truth = None
        if "truth" in arrays:
            adj = arrays["truth"]
            edges = frozenset(zip(*np.nonzero(adj)))
            truth = BinaryGraph(d=adj.shape[0], edges=edges)
        return cls(images=arrays["images"], labels=arrays["labels"], truth=truth, split=split)


# -- OCTDL ingestion --------------------------------------------------------


@dataclass(frozen=True)
class MappingConfig:
    """Column names and value dictionaries of the metadata manifest.

    Nothing about the manifest schema is hardcoded; `value_maps` holds one
    dictionary per labelled column translating raw cell text to label values.
    Disease text must map to "AMD" or "Normal"; unmapped diseases are skipped.
    """

    file_col: str = "file_name"
    disease_col: str = "disease"
    neo_col: str = "neovascularization"
    drusen_col: str = "drusen"
    severity_col: str = "severity"
    value_maps: dict = field(
        default_factory=lambda: {
            "disease": {"AMD": "AMD", "NO": "Normal"},
            "neovascularization": {"No": 0, "Suspected": 1, "Yes": 1, "": 0},
            "drusen": {"No": 0, "Yes": 1, "": 0},
            "severity": {"None": 0, "Early": 1, "Intermediate": 2, "Late": 3, "": 0},
        }
    )


@dataclass
class LoadReport:
    skipped_diseases: dict = field(default_factory=dict)
    missing_files: list = field(default_factory=list)
    bad_rows: list = field(default_factory=list)


def load_octdl(root, manifest_path, mapping=None):
    """Read the manifest into SampleRecords; returns (records, report).

    Rows outside the AMD/Normal cohort are counted and skipped; rows whose
    image file is missing are collected into the report rather than raising.
    A structurally broken CSV (missing mapped columns) is a hard error.
    """
    mapping = mapping or MappingConfig()
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError("manifest has no header row")
        needed = {
            mapping.file_col,
            mapping.disease_col,
            mapping.neo_col,
            mapping.drusen_col,
            mapping.severity_col,
        }
        missing_cols = needed - set(reader.fieldnames)
        if missing_cols:
            raise ValueError(f"manifest is missing columns: {sorted(missing_cols)}")
        rows = list(reader)

    maps = mapping.value_maps
    records = []
    report = LoadReport()
    for idx, row in enumerate(rows):
        disease_raw = row[mapping.disease_col].strip()
        disease = maps["disease"].get(disease_raw)
        if disease is None:
            report.skipped_diseases[disease_raw] = (
                report.skipped_diseases.get(disease_raw, 0) + 1
            )
            continue
        path = os.path.join(root, row[mapping.file_col])
        if not os.path.exists(path):
            report.missing_files.append(path)
            continue
        try:
            if disease == "Normal":
                u0 = u1 = u2 = 0
            else:
                u0 = maps["neovascularization"][row[mapping.neo_col].strip()]
                u1 = maps["drusen"][row[mapping.drusen_col].strip()]
                u2 = maps["severity"][row[mapping.severity_col].strip()]
                u2 = max(u2, 1)  # AMD cohort carries severity >= 1
            records.append(SampleRecord(path, u0, u1, u2, disease))
        except (KeyError, ValueError) as exc:
            report.bad_rows.append((idx, repr(exc)))
    return records, report


def bilinear_resize(image, height, width):
    """Classic half-pixel-center bilinear resampling with edge clamping."""
    src = np.asarray(image, dtype=np.float64)
    sh, sw = src.shape[:2]
    ys = (np.arange(height) + 0.5) * sh / height - 0.5
    xs = (np.arange(width) + 0.5) * sw / width - 0.5
    y0 = np.clip(np.floor(ys), 0, sh - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, sw - 1).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)
    if src.ndim == 2:
        src = src[:, :, None]
    top = src[y0][:, x0] * (1 - wx)[None, :, None] + src[y0][:, x1] * wx[None, :, None]
    bot = src[y1][:, x0] * (1 - wx)[None, :, None] + src[y1][:, x1] * wx[None, :, None]
    out = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    return out


def preprocess(image, height=224, width=224):
    """Decode/resize to H x W x 3 in [0, 1]; grayscale replicated to 3 channels."""
    if isinstance(image, (str, os.PathLike)):
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(image) as img:
                arr = np.asarray(img.convert("RGB"))
        except (UnidentifiedImageError, OSError) as exc:
            raise ImageDecodeError(f"cannot decode {image}: {exc}") from exc
    else:
        arr = np.asarray(image)
    out = bilinear_resize(arr.astype(np.float64), height, width)
    if out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    elif out.shape[2] != 3:
        out = np.repeat(out.mean(axis=2, keepdims=True), 3, axis=2)
    return np.clip(out / 255.0, 0.0, 1.0)


def sample_splits(records, rng, n_train_amd=150, n_train_normal=150):
    """Disjoint train/test split mirroring the published protocol.

    Train: n_train_amd + n_train_normal random records. Test: every normal
    not used for training plus an equal number of AMD records sampled from
    the remaining pool. Deterministic given the rng.
    """
    amd = [r for r in records if r.disease == "AMD"]
    normal = [r for r in records if r.disease == "Normal"]
    if len(amd) < n_train_amd:
        raise ValueError(
            f"need {n_train_amd} AMD records for training, have {len(amd)} "
            f"(short by {n_train_amd - len(amd)})"
        )
    if len(normal) <= n_train_normal:
        raise ValueError(
            f"need more than {n_train_normal} normal records, have {len(normal)}"
        )
    amd_order = rng.permutation(len(amd))
    normal_order = rng.permutation(len(normal))
    train = [amd[i] for i in amd_order[:n_train_amd]]
    train += [normal[i] for i in normal_order[:n_train_normal]]
    test_normal = [normal[i] for i in normal_order[n_train_normal:]]
    amd_pool = amd_order[n_train_amd:]
    if len(amd_pool) < len(test_normal):
        raise ValueError(
            f"need {len(test_normal)} held-out AMD records, have {len(amd_pool)} "
            f"(short by {len(test_normal) - len(amd_pool)})"
        )
    test = test_normal + [amd[i] for i in amd_pool[: len(test_normal)]]
    return train, test


# -- synthetic causal images -------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic OCT surrogate with a known two-cause graph.

    Latents s0 (bump + bright blob), s1 (band undulation) and
    s2 = w02*s0 + w12*s1 + noise (global brightness + speckle) drive the
    rendering; labels threshold the latents. The truth graph is {0->2, 1->2}.
    """

    size: int = 64
    channels: int = 3
    n: int = 300
    w02: float = 0.8
    w12: float = 0.6
    noise_scale: float = 0.1
    seed: int = 0
    threshold0: float = 0.5
    threshold1: float = 0.5

    def truth_graph(self):
        return BinaryGraph(d=3, edges=frozenset({(0, 2), (1, 2)}))


def render_frame(s0, s1, s2_norm, speckle, size):
    """One grayscale frame from latent factors and a fixed speckle field.

    s0 lifts the band into a bump and lights a blob above it, s1 undulates
    the band, s2_norm scales global brightness and speckle contrast. Total
    brightness in the bump region is non-decreasing in each factor.
    """
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    band_center = 0.55 * size
    band_width = 0.09 * size
    bump_col = 0.5 * size
    undulation = 0.08 * size * s1 * np.sin(2 * np.pi * 3 * cols / size)
    bump = 0.18 * size * s0 * np.exp(-0.5 * ((cols - bump_col) / (0.12 * size)) ** 2)
    center = band_center + undulation - bump
    band = np.exp(-0.5 * ((rows - center) / band_width) ** 2)
    blob = s0 * np.exp(
        -0.5
        * (
            ((cols - bump_col) / (0.06 * size)) ** 2
            + ((rows - (band_center - 0.22 * size)) / (0.06 * size)) ** 2
        )
    )
    frame = (0.35 + 0.65 * s2_norm) * band + 0.8 * blob
    frame = frame * (1.0 + 0.12 * s2_norm * speckle)
    return np.clip(frame, 0.0, 1.0)


def synth_generate(config=None):
    """Render the synthetic bundle; bit-identical for identical configs."""
    config = config or SynthConfig()
    rng = numpy_rng(config.seed, "synth")
    n, size = config.n, config.size
    s0 = rng.uniform(0, 1, size=n)
    s1 = rng.uniform(0, 1, size=n)
    s2 = config.w02 * s0 + config.w12 * s1 + config.noise_scale * rng.normal(size=n)
    s2_norm = np.clip(s2 / (config.w02 + config.w12), 0.0, 1.0)

    speckle = rng.uniform(-1.0, 1.0, size=(n, size, size))
    images = np.empty((n, size, size, config.channels), dtype=np.float64)
    for k in range(n):
        images[k] = render_frame(s0[k], s1[k], s2_norm[k], speckle[k], size)[:, :, None]

    u0 = (s0 > config.threshold0).astype(np.int64)
    u1 = (s1 > config.threshold1).astype(np.int64)
    u2 = np.clip(np.floor(4.0 * s2_norm), 0, 3).astype(np.int64)
    # Normal-cohort convention: no risk factors and low severity means (0,0,0).
    u2[(u0 == 0) & (u1 == 0) & (s2_norm < 0.5)] = 0
    labels = np.stack([u0, u1, u2], axis=1)
    return DatasetBundle(
        images=images, labels=labels, truth=config.truth_graph(), split="synth"
    )
