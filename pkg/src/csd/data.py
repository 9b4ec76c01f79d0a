"""Paired LR/HR data: bicubic resampler, patch sampling, augmentation, negatives.

Images are ``3 x H x W`` float tensors in ``[0, 1]``; batches add a leading
dimension.
"""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp")


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def cubic(x, a=-0.5):
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax ** 2, ax ** 3
    return (((a + 2) * ax3 - (a + 3) * ax2 + 1) * (ax <= 1)
            + (a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a) * ((ax > 1) & (ax <= 2)))


@lru_cache(maxsize=64)
def resize_matrix(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """Dense ``out_len x in_len`` interpolation matrix (float64).

    Pixel centres are aligned as in MATLAB ``imresize``; out-of-range taps are
    clamped to the edge pixel. When shrinking with ``antialias`` the kernel is
    stretched by the inverse scale.
    """
    scale = out_len / in_len
    if scale < 1 and antialias:
        def kernel(x):
            return scale * cubic(scale * x)
        width = 4.0 / scale
    else:
        kernel = cubic
        width = 4.0
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - idx)
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(np.int64) - 1
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, idx.ravel()), weights.ravel())
    return mat


def bicubic_resize(img: torch.Tensor, out_h: int, out_w: int, antialias: bool = True) -> torch.Tensor:
    """Resize the last two dimensions of ``img``; linear and differentiable."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.clone()
    out = img
    if out_h != h:
        mh = torch.as_tensor(resize_matrix(h, out_h, antialias), dtype=img.dtype, device=img.device)
        out = torch.matmul(mh, out)
    if out_w != w:
        mw = torch.as_tensor(resize_matrix(w, out_w, antialias), dtype=img.dtype, device=img.device)
        out = torch.matmul(out, mw.t())
    return out


def downsample(hr, scale):
    h, w = hr.shape[-2:]
    return bicubic_resize(hr, h // scale, w // scale)


def upsample(lr, scale):
    h, w = lr.shape[-2:]
    return bicubic_resize(lr, h * scale, w * scale)


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def read_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """``3 x H x W`` in [0, 1] to ``H x W x 3`` uint8, rounding half away from zero."""
    arr = img.detach().cpu().double().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0
    return np.floor(arr + 0.5).astype(np.uint8)


def write_image(img: torch.Tensor, path):
    Image.fromarray(to_uint8(img)).save(path)


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Round to the 8-bit grid, staying in float."""
    return torch.floor(img.clamp(0, 1) * 255.0 + 0.5) / 255.0


def crop_to_multiple(hr: torch.Tensor, scale: int) -> torch.Tensor:
    h, w = hr.shape[-2:]
    return hr[..., : h - h % scale, : w - w % scale]


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def data_root(configured=None) -> Path | None:
    root = configured or os.environ.get("CSD_DATA_ROOT")
    return Path(root) if root else None


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

class PairedDataset:
    """HR/LR image pairs, file-backed or in memory.

    When no LR images are given, LR is synthesized from the HR image (cropped to
    a multiple of ``scale``) by antialiased bicubic downsampling.
    """

    def __init__(self, hr, lr=None, scale=4, name="", cache=True):
        self.hr = list(hr)
        self.lr = list(lr) if lr else []
        if self.lr and len(self.lr) != len(self.hr):
            raise ValueError(f"{len(self.hr)} HR images but {len(self.lr)} LR images")
        self.scale = scale
        self.name = name
        self.cache = cache
        self._cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    @property
    def on_the_fly(self):
        return not self.lr

    @classmethod
    def from_folder(cls, root, name, scale, **kwargs):
        """Load ``<root>/<name>/HR`` and, if present, ``<root>/<name>/LR_x{scale}``."""
        base = Path(root) / name
        hr_dir = base / "HR"
        if not hr_dir.is_dir():
            raise FileNotFoundError(f"missing HR directory {hr_dir}")
        lr_dir = base / f"LR_x{scale}"
        lr = list_images(lr_dir) if lr_dir.is_dir() else None
        return cls(list_images(hr_dir), lr, scale, name=name, **kwargs)

    def __len__(self):
        return len(self.hr)

    def _load(self, item):
        return read_image(item) if isinstance(item, (str, Path)) else item

    def __getitem__(self, i):
        if i in self._cache:
            return self._cache[i]
        hr = crop_to_multiple(self._load(self.hr[i]), self.scale)
        if self.lr:
            lr = self._load(self.lr[i])
            lh, lw = lr.shape[-2:]
            hr = hr[..., : lh * self.scale, : lw * self.scale]
            if hr.shape[-2:] != (lh * self.scale, lw * self.scale):
                raise ValueError(f"pair {i}: LR {tuple(lr.shape)} does not match HR at x{self.scale}")
        else:
            lr = downsample(hr, self.scale)
        if self.cache:
            self._cache[i] = (lr, hr)
        return lr, hr


@dataclass
class PatchBatch:
    lr: torch.Tensor
    hr: torch.Tensor
    negatives: torch.Tensor | None = None
    neg_index: np.ndarray | None = None

    def __len__(self):
        return self.lr.shape[0]


def sample_patch(pair, scale: int, patch: int, rng: np.random.Generator):
    """Aligned random crop: HR ``patch x patch``, LR ``patch/scale`` square.

    Returns ``None`` (with a warning) when the image is smaller than the patch.
    """
    lr, hr = pair
    if patch % scale:
        raise ValueError(f"patch size {patch} is not a multiple of scale {scale}")
    lp = patch // scale
    lh, lw = lr.shape[-2:]
    if lh < lp or lw < lp:
        warnings.warn(f"image {lh}x{lw} (LR) smaller than patch {lp}; skipped", stacklevel=2)
        return None
    y = int(rng.integers(0, lh - lp + 1))
    x = int(rng.integers(0, lw - lp + 1))
    lr_p = lr[..., y: y + lp, x: x + lp]
    hr_p = hr[..., scale * y: scale * (y + lp), scale * x: scale * (x + lp)]
    return lr_p, hr_p


def augment(item, rng: np.random.Generator | None = None, hflip=None, rot90=None):
    """Apply the same random horizontal flip and 90-degree rotation to LR and HR."""
    if hflip is None:
        hflip = bool(rng.random() < 0.5)
    if rot90 is None:
        rot90 = bool(rng.random() < 0.5)
    out = []
    for img in item:
        if hflip:
            img = img.flip(-1)
        if rot90:
            img = img.rot90(1, dims=(-2, -1))
        out.append(img.contiguous())
    return tuple(out)


def negative_indices(b: int, k: int, rng: np.random.Generator, shared=False) -> np.ndarray:
    """``b x k`` array of batch indices; row ``i`` never contains ``i`` when ``b - 1 >= k``."""
    if b < 2:
        raise ValueError("negatives need a batch of at least 2 images")
    if k < 1:
        raise ValueError("number of negatives must be >= 1")
    if shared and b - 1 >= k:
        # one pool for the whole batch; an anchor inside the pool swaps in a spare
        pool = rng.permutation(b)[: k + 1]
        common, spare = pool[:k], pool[k]
        idx = np.tile(common, (b, 1))
        for pos, j in enumerate(common):
            idx[j, pos] = spare
        return idx
    idx = np.empty((b, k), dtype=np.int64)
    for i in range(b):
        others = np.delete(np.arange(b), i)
        idx[i] = rng.choice(others, size=k, replace=b - 1 < k)
    return idx


def make_negatives(lr: torch.Tensor, k: int, scale: int, rng: np.random.Generator, shared=False):
    """Bicubic-upsampled LR patches from other batch items: ``(K x B x 3 x sH x sW, index)``."""
    idx = negative_indices(lr.shape[0], k, rng, shared)
    up = upsample(lr, scale)
    negs = up[torch.from_numpy(idx.T.copy())]
    return negs, idx


class PatchLoader:
    """Deterministic patch batches: batch ``(epoch, step)`` depends only on the seed."""

    def __init__(self, dataset: PairedDataset, batch_size=16, patch=192, k=10, seed=0,
                 steps_per_epoch=1000, augment=True, shared_negatives=False):
        if len(dataset) == 0:
            raise ValueError("training dataset is empty")
        self.dataset = dataset
        self.batch_size = batch_size
        self.patch = patch
        self.k = k
        self.seed = seed
        self.steps_per_epoch = steps_per_epoch
        self.augment = augment
        self.shared_negatives = shared_negatives

    def batch(self, epoch: int, step: int) -> PatchBatch:
        rng = np.random.default_rng([self.seed, epoch, step])
        scale = self.dataset.scale
        lrs, hrs = [], []
        tries = 0
        while len(lrs) < self.batch_size:
            tries += 1
            if tries > 100 * self.batch_size:
                raise ValueError(f"no image in {self.dataset.name or 'dataset'} fits patch {self.patch}")
            item = sample_patch(self.dataset[int(rng.integers(len(self.dataset)))],
                                scale, self.patch, rng)
            if item is None:
                continue
            if self.augment:
                item = augment(item, rng)
            lrs.append(item[0])
            hrs.append(item[1])
        lr, hr = torch.stack(lrs), torch.stack(hrs)
        negs = idx = None
        if self.k > 0:
            negs, idx = make_negatives(lr, self.k, scale, rng, self.shared_negatives)
        return PatchBatch(lr, hr, negs, idx)

    def epoch(self, epoch: int, start_step: int = 0):
        for step in range(start_step, self.steps_per_epoch):
            yield self.batch(epoch, step)


# ---------------------------------------------------------------------------
# synthetic images
# ---------------------------------------------------------------------------

def synthetic_image(size: int, rng: np.random.Generator) -> torch.Tensor:
    """Random urban-like test image: facades with window grids over a colour gradient."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c0, c1 = rng.random(3), rng.random(3)
    t = (xx * rng.random() + yy * rng.random()) / (2 * size)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(int(rng.integers(3, 6))):
        x0, y0 = rng.integers(0, max(1, size - 8), size=2)
        w, h = rng.integers(8, size // 2 + 8, size=2)
        facade = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        img = np.where(facade[None], rng.random(3)[:, None, None], img)
        period = int(rng.integers(4, 9))
        pane = int(rng.integers(2, period))
        inner = (xx >= x0 + 1) & (xx < x0 + w - 1) & (yy >= y0 + 1) & (yy < y0 + h - 1)
        windows = inner & ((xx - x0) % period < pane) & ((yy - y0) % period < pane)
        img = np.where(windows[None], rng.random(3)[:, None, None], img)
    return torch.from_numpy(img.astype(np.float32))


def synthetic_dataset(n: int, size: int, scale: int, seed: int = 0, name="synthetic") -> PairedDataset:
    rng = np.random.default_rng(seed)
    return PairedDataset([synthetic_image(size, rng) for _ in range(n)], scale=scale, name=name)
