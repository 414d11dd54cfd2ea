"""Input embeddings: a deterministic synthetic scene generator and an adapter for
externally computed image/text features.

The synthetic generator plants one unit vector per class.  Image embeddings on
the token grid are the planted vector of the cell's class plus isotropic
Gaussian noise (per-component std ``noise_sigma``); text embeddings are the
planted vectors themselves.
Pairwise cosines between planted vectors equal ``fg_confusability`` exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .core import ConfigError, EmbeddingPair, ShapeError, ValidationError

PROMPT_TEMPLATE = "A photo of a {}"
OUTPUT_STRIDE = 4  # decoder upsamples the grid by 2 x 2


@dataclass(frozen=True)
class DatasetSpec:
    n_scenes: int = 64
    n_classes: int = 3
    image_size: int = 48
    fg_confusability: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    grid: int = 12
    d_enc: int = 32

    def __post_init__(self):
        if self.n_scenes <= 0 or self.n_classes < 2 or self.grid <= 0:
            raise ConfigError("n_scenes > 0, n_classes >= 2 and grid > 0 are required")
        if self.image_size % self.grid:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of grid {self.grid}")
        out = self.grid * OUTPUT_STRIDE
        if self.image_size % out and out % self.image_size:
            raise ConfigError(f"image_size {self.image_size} and output size {out} must divide one another")
        if not 0.0 <= self.fg_confusability <= 1.0:
            raise ConfigError("fg_confusability must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.d_enc < self.n_classes:
            raise ConfigError("d_enc must be >= n_classes to plant distinct class vectors")

    @property
    def output_size(self) -> int:
        return self.grid * OUTPUT_STRIDE

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(f"class{i}" for i in range(self.n_classes))


@dataclass(frozen=True)
class SyntheticScene:
    layout: np.ndarray  # int [image_size, image_size]
    class_vectors: np.ndarray  # [N_C, D_enc], unit rows
    fg_confusability: float
    noise_sigma: float

    def __post_init__(self):
        if self.layout.max() >= self.class_vectors.shape[0]:
            raise ValidationError("layout references a class id >= N_C")


@dataclass(frozen=True)
class SceneSample:
    scene: SyntheticScene
    pair: EmbeddingPair
    guidance: tuple[torch.Tensor, torch.Tensor]  # stand-ins for shallow/deep encoder features
    gt_grid: torch.Tensor  # int64 [grid, grid]
    gt_full: torch.Tensor  # int64 [4 grid, 4 grid]


def planted_class_vectors(n_classes: int, d_enc: int, confusability: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Unit vectors whose pairwise cosine is exactly ``confusability``.

    The target Gram matrix ``(1-c) I + c 11^T`` is factored through its
    eigendecomposition and mapped onto a random orthonormal basis of R^d_enc.
    """
    gram = (1.0 - confusability) * np.eye(n_classes) + confusability * np.ones((n_classes, n_classes))
    evals, evecs = np.linalg.eigh(gram)
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))  # root @ root.T == gram
    basis, _ = np.linalg.qr(rng.standard_normal((d_enc, n_classes)))
    vecs = root @ basis.T
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def _rasterize_layout(size: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Class 0 fills a ``size x size`` canvas; 1-3 ellipses/rectangles of other classes are painted on top."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    yy, xx = yy / size, xx / size
    layout = np.zeros((size, size), dtype=np.int64)
    for _ in range(rng.integers(1, 4)):
        cls = rng.integers(1, n_classes)
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        ry, rx = rng.uniform(0.12, 0.35, size=2)
        if rng.random() < 0.5:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        layout[inside] = cls
    return layout


def majority_pool(labels: np.ndarray, block: int, n_classes: int) -> np.ndarray:
    """Block-wise majority label; ties go to the lowest class id."""
    h, w = labels.shape
    blocks = labels.reshape(h // block, block, w // block, block).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // block, w // block, block * block)
    counts = np.stack([(blocks == c).sum(-1) for c in range(n_classes)], axis=-1)
    return counts.argmax(-1)


def _resample_to_output(layout: np.ndarray, out: int, n_classes: int) -> np.ndarray:
    size = layout.shape[0]
    if size >= out:
        return majority_pool(layout, size // out, n_classes)
    rep = out // size
    return np.repeat(np.repeat(layout, rep, axis=0), rep, axis=1)


def generate_scene(spec: DatasetSpec, index: int) -> SceneSample:
    """Deterministic scene ``index`` of the synthetic dataset described by ``spec``."""
    if not 0 <= index < spec.n_scenes:
        raise IndexError(f"scene index {index} outside [0, {spec.n_scenes})")
    class_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC1A55]))
    vectors = planted_class_vectors(spec.n_classes, spec.d_enc, spec.fg_confusability, class_rng)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    # shapes are drawn on the token grid so every label boundary is resolvable from the embeddings
    coarse = _rasterize_layout(spec.grid, spec.n_classes, rng)
    rep = spec.image_size // spec.grid
    layout = np.repeat(np.repeat(coarse, rep, axis=0), rep, axis=1)
    gt_full = _resample_to_output(layout, spec.output_size, spec.n_classes)
    gt_grid = majority_pool(gt_full, OUTPUT_STRIDE, spec.n_classes)

    clean = vectors[gt_grid]
    noisy = [clean + spec.noise_sigma * rng.standard_normal(clean.shape) for _ in range(3)]

    as_t = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))  # noqa: E731
    pair = EmbeddingPair(as_t(noisy[0]), as_t(vectors), spec.class_names)
    scene = SyntheticScene(layout, vectors, spec.fg_confusability, spec.noise_sigma)
    return SceneSample(scene, pair, (as_t(noisy[1]), as_t(noisy[2])),
                       torch.from_numpy(gt_grid), torch.from_numpy(gt_full))


def prompts(class_names) -> list[str]:
    return [PROMPT_TEMPLATE.format(c) for c in class_names]


def embed_external(image_features, text_features, class_names=(), d_enc: Optional[int] = None,
                   grid: Optional[tuple[int, int]] = None) -> EmbeddingPair:
    """Wrap precomputed features (e.g. from a real VLM) without transforming them."""
    image = torch.as_tensor(image_features)
    text = torch.as_tensor(text_features)
    if image.dim() != 3 or text.dim() != 2:
        raise ShapeError("image features must be [H,W,D], text features [N_C,D]")
    if d_enc is not None and (image.shape[-1] != d_enc or text.shape[-1] != d_enc):
        raise ShapeError(f"expected embedding width {d_enc}")
    if grid is not None and tuple(image.shape[:2]) != tuple(grid):
        raise ShapeError(f"expected grid {grid}, got {tuple(image.shape[:2])}")
    return EmbeddingPair(image, text, tuple(class_names))


def load_external_dir(path: str | Path) -> list[tuple[str, EmbeddingPair]]:
    """Read every ``*.npz`` in ``path``; each holds ``image``, ``text`` and optional ``class_names``."""
    out = []
    for f in sorted(Path(path).glob("*.npz")):
        with np.load(f, allow_pickle=False) as z:
            names = tuple(str(s) for s in z["class_names"]) if "class_names" in z.files else ()
            out.append((f.stem, embed_external(z["image"], z["text"], names)))
    return out


class SceneDataset:
    """Lazily generated, cached view of a DatasetSpec.

    Inputs and labels are served by separate methods so inference code can be
    audited for label access: ``label_hook`` is called on every label read.
    """

    def __init__(self, spec: DatasetSpec, label_hook: Optional[Callable[[int], None]] = None):
        self.spec = spec
        self.label_hook = label_hook
        self._cache: dict[int, SceneSample] = {}

    def __len__(self) -> int:
        return self.spec.n_scenes

    def sample(self, index: int) -> SceneSample:
        if index not in self._cache:
            self._cache[index] = generate_scene(self.spec, index)
        return self._cache[index]

    def inputs(self, index: int) -> tuple[EmbeddingPair, tuple[torch.Tensor, torch.Tensor]]:
        s = self.sample(index)
        return s.pair, s.guidance

    def labels(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        if self.label_hook is not None:
            self.label_hook(index)
        s = self.sample(index)
        return s.gt_grid, s.gt_full


def dataset_digest(spec: DatasetSpec) -> str:
    """SHA-256 over every generated array, used to check cross-process determinism."""
    h = hashlib.sha256()
    for i in range(spec.n_scenes):
        s = generate_scene(spec, i)
        for t in (s.pair.image, s.pair.text, *s.guidance, s.gt_grid, s.gt_full):
            h.update(t.numpy().tobytes())
    return h.hexdigest()
