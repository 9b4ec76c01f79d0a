"""Y-channel PSNR/SSIM, self-ensemble inference, benchmark tables and plots."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import correlate1d

from csd import data as data_mod
from csd.arch import parameter_count

log = logging.getLogger(__name__)

Y_COEFFS = (65.481, 128.553, 24.966)


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def rgb_to_y(img) -> np.ndarray:
    """BT.601 luma of a ``3 x H x W`` image in [0, 1], returned in [16/255, 235/255]."""
    img = _as_array(img)
    r, g, b = img[0], img[1], img[2]
    return (Y_COEFFS[0] * r + Y_COEFFS[1] * g + Y_COEFFS[2] * b + 16.0) / 255.0


def _shave(a, shave):
    if shave == 0:
        return a
    return a[shave:-shave, shave:-shave]


def psnr(a, b, shave: int = 0) -> float:
    """PSNR in dB on [0, 1] planes; ``inf`` for identical inputs."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if shave < 0 or min(a.shape[-2:]) <= 2 * shave:
        raise ValueError(f"cannot shave {shave} pixels from a {a.shape} plane")
    mse = np.mean((_shave(a, shave) - _shave(b, shave)) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, window=11, sigma=1.5) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"SSIM needs 2-D planes of at least {window}x{window}, got {a.shape}")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = gaussian_window(window, sigma)
    half = window // 2

    def filt(x):
        x = correlate1d(x, g, axis=0, mode="constant")
        x = correlate1d(x, g, axis=1, mode="constant")
        return x[half:-half, half:-half]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def dihedral(x, k, flip):
    if flip:
        x = x.flip(-1)
    return x.rot90(k, dims=(-2, -1))


def inverse_dihedral(x, k, flip):
    x = x.rot90(-k, dims=(-2, -1))
    if flip:
        x = x.flip(-1)
    return x


@torch.no_grad()
def self_ensemble(net, img, r=1.0):
    """Average of the 8 dihedral views, each mapped back before averaging."""
    single = img.dim() == 3
    x = img.unsqueeze(0) if single else img
    acc = None
    for flip in (False, True):
        for k in range(4):
            y = inverse_dihedral(net(dihedral(x, k, flip), r), k, flip)
            acc = y if acc is None else acc + y
    out = acc / 8
    return out.squeeze(0) if single else out


@torch.no_grad()
def super_resolve(net, lr, r=1.0, ensemble=False):
    x = lr.unsqueeze(0)
    out = self_ensemble(net, x, r) if ensemble else net(x, r)
    return out.squeeze(0).clamp(0, 1)


def image_metrics(sr, hr, shave):
    """PSNR and SSIM of two RGB images on the shaved Y channel, after 8-bit rounding."""
    y_sr = rgb_to_y(data_mod.quantize(sr))
    y_hr = rgb_to_y(data_mod.quantize(hr))
    y_sr, y_hr = _shave(y_sr, shave), _shave(y_hr, shave)
    return psnr(y_sr, y_hr), ssim(y_sr, y_hr)


# ---------------------------------------------------------------------------
# benchmark tables
# ---------------------------------------------------------------------------

@dataclass
class MetricResult:
    dataset: str
    method: str
    width: float
    psnr_db: float
    ssim: float
    params: int
    ms_per_image: float
    psnr_per_image: list[float] = field(default_factory=list)
    ssim_per_image: list[float] = field(default_factory=list)


DATASET_DIRS = {
    "set5": "Set5", "set14": "Set14", "bsd100": "B100", "urban100": "Urban100",
    "div2k-val": "DIV2K_valid", "div2k-train": "DIV2K_train",
}


def resolve_datasets(names, scale, root=None):
    """Map dataset names to folders under the data root; missing ones are skipped."""
    root = data_mod.data_root(root)
    out = []
    for name in names:
        if root is None:
            log.warning("no data root configured; skipping %s", name)
            continue
        folder = DATASET_DIRS.get(name.lower(), name)
        try:
            ds = data_mod.PairedDataset.from_folder(root, folder, scale, cache=False)
        except FileNotFoundError as exc:
            log.warning("skipping dataset %s: %s", name, exc)
            continue
        ds.name = name
        out.append(ds)
    return out


def _timed(fn, warmup, passes):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(passes):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, statistics.median(times) * 1000.0


def evaluate_dataset(net, dataset, r=1.0, ensemble=False, method=None, passes=1, warmup=0):
    net.eval()
    shave = dataset.scale
    psnrs, ssims, times = [], [], []
    for i in range(len(dataset)):
        lr, hr = dataset[i]
        warm = warmup if i == 0 else 0
        sr, ms = _timed(lambda: super_resolve(net, lr, r, ensemble), warm, max(passes, 1))
        p, s = image_metrics(sr, hr, shave)
        psnrs.append(p)
        ssims.append(s)
        times.append(ms)
    return MetricResult(
        dataset=dataset.name, method=method or ("teacher" if r == 1.0 else "student"),
        width=float(r), psnr_db=float(np.mean(psnrs)), ssim=float(np.mean(ssims)),
        params=parameter_count(net, r), ms_per_image=float(np.mean(times)),
        psnr_per_image=psnrs, ssim_per_image=ssims)


def bicubic_baseline(dataset) -> MetricResult:
    psnrs, ssims = [], []
    for i in range(len(dataset)):
        lr, hr = dataset[i]
        sr = data_mod.upsample(lr, dataset.scale).clamp(0, 1)
        p, s = image_metrics(sr, hr, dataset.scale)
        psnrs.append(p)
        ssims.append(s)
    return MetricResult(dataset.name, "bicubic", 0.0, float(np.mean(psnrs)),
                        float(np.mean(ssims)), 0, 0.0, psnrs, ssims)


def benchmark(net, datasets, widths, ensemble=False, passes=3, warmup=2, root=None):
    """One row per (dataset, width). ``datasets`` holds names or :class:`PairedDataset` objects."""
    names = [d for d in datasets if isinstance(d, str)]
    resolved = {d.name: d for d in resolve_datasets(names, net.scale, root)}
    results = []
    for d in datasets:
        ds = resolved.get(d) if isinstance(d, str) else d
        if ds is None:
            continue
        if len(ds) == 0:
            log.warning("dataset %s is empty; skipped", ds.name)
            continue
        for r in widths:
            res = evaluate_dataset(net, ds, r, ensemble, passes=passes, warmup=warmup)
            log.info("%s r=%.3g: %.2f dB / %.4f", ds.name, r, res.psnr_db, res.ssim)
            results.append(res)
    return results


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

CSV_FIELDS = ["dataset", "method", "width", "params", "ms_per_image", "psnr", "ssim",
              "psnr_per_image", "ssim_per_image"]


def write_results_csv(results, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in results:
            w.writerow([r.dataset, r.method, repr(r.width), r.params, repr(r.ms_per_image),
                        repr(r.psnr_db), repr(r.ssim),
                        " ".join(map(repr, r.psnr_per_image)),
                        " ".join(map(repr, r.ssim_per_image))])


def read_results(path) -> list[MetricResult]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(MetricResult(
                dataset=row["dataset"], method=row["method"], width=float(row["width"]),
                psnr_db=float(row["psnr"]), ssim=float(row["ssim"]), params=int(row["params"]),
                ms_per_image=float(row["ms_per_image"]),
                psnr_per_image=[float(v) for v in row["psnr_per_image"].split()],
                ssim_per_image=[float(v) for v in row["ssim_per_image"].split()]))
    return out


def _scatter(results, xattr, xlabel, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name in dict.fromkeys(r.dataset for r in results):
        rows = [r for r in results if r.dataset == name]
        ax.scatter([getattr(r, xattr) for r in rows], [r.psnr_db for r in rows], label=name)
        for r in rows:
            ax.annotate(f"{r.method} {r.width:g}x", (getattr(r, xattr), r.psnr_db), fontsize=7)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(results, out_dir) -> dict[str, Path]:
    """Write ``results.csv``, ``psnr_params.png`` and ``psnr_speed.png``."""
    if not results:
        raise ValueError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "results.csv", "params": out_dir / "psnr_params.png",
             "speed": out_dir / "psnr_speed.png"}
    write_results_csv(results, paths["csv"])
    _scatter(results, "params", "parameters", paths["params"])
    _scatter(results, "ms_per_image", "ms / image", paths["speed"])
    return paths
