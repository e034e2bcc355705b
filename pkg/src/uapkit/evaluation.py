"""Attack metrics and studies: success rate, distortion report, cross-model
transfer, budget ablation grid, training-set-size study, and file emission
(CSV tables, PNG plots, example image triplets)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .backbone import LabeledDataset, TargetModel
from .generator import GeneratorArch
from .trainer import TrainConfig, UniversalPerturbation, freeze_perturbation, make_seed_pattern, train


def attack_success_rate(
    pert: UniversalPerturbation,
    dataset: LabeledDataset,
    model: TargetModel,
    batch_size: int = 512,
    initially_correct_only: bool = False,
) -> float:
    """Fraction of images whose prediction changes under the perturbation.

    By default every image counts toward the denominator. With
    ``initially_correct_only`` the rate is computed only over images the model
    classified correctly before the attack (requires ground-truth labels).
    The result is a pure count ratio, so it is invariant to image order and
    to batch size.
    """
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    changed = 0
    considered = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start : start + batch_size]
            clean = model.logits(x).argmax(dim=1)
            adv = model.logits(pert.apply(x)).argmax(dim=1)
            flips = adv != clean
            if initially_correct_only:
                mask = clean == dataset.labels[start : start + batch_size]
                changed += (flips & mask).sum().item()
                considered += mask.sum().item()
            else:
                changed += flips.sum().item()
                considered += x.shape[0]
    if considered == 0:
        raise ValueError("no initially correct images to evaluate on")
    return changed / considered


@dataclass
class L2Report:
    mean: float
    values: np.ndarray  # (n,) per-image distances

    def summary(self) -> dict[str, float]:
        return {
            "l2_mean": self.mean,
            "l2_min": float(self.values.min()),
            "l2_max": float(self.values.max()),
        }


def l2_report(pert: UniversalPerturbation, dataset: LabeledDataset, batch_size: int = 512) -> L2Report:
    """Per-image Euclidean distance between clean and perturbed images on the
    8-bit 0-255 scale (images are quantized with round-to-nearest first, the
    same discretization a saved PNG would have)."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    values = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start : start + batch_size]
            adv = pert.apply(x)
            a = torch.round(x * 255.0)
            b = torch.round(adv * 255.0)
            diff = (a - b).flatten(1)
            values.append(diff.norm(dim=1).cpu().numpy())
    allvals = np.concatenate(values).astype(np.float64)
    return L2Report(mean=float(allvals.mean()), values=allvals)


@dataclass
class EvalReport:
    asr: float
    asr_initially_correct: float
    clean_accuracy: float
    l2: L2Report
    per_class_asr: np.ndarray  # (num_classes,) indexed by ground-truth label
    num_images: int

    def rows(self) -> list[tuple[str, float]]:
        out = [
            ("asr", self.asr),
            ("asr_initially_correct", self.asr_initially_correct),
            ("clean_accuracy", self.clean_accuracy),
            ("l2_mean", self.l2.mean),
            ("num_images", float(self.num_images)),
        ]
        out += [(f"asr_class_{i}", float(v)) for i, v in enumerate(self.per_class_asr)]
        return out


def evaluate(
    pert: UniversalPerturbation, dataset: LabeledDataset, model: TargetModel, batch_size: int = 512
) -> EvalReport:
    """Full evaluation: overall and per-class success rates, clean accuracy,
    and the distortion report. Per-class rates are grouped by ground-truth
    label with the all-images denominator convention."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    num_classes = dataset.num_classes
    changed_by_class = np.zeros(num_classes, dtype=np.int64)
    count_by_class = np.zeros(num_classes, dtype=np.int64)
    changed = 0
    correct = 0
    flips_correct = 0
    n_correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start : start + batch_size]
            y = dataset.labels[start : start + batch_size]
            clean = model.logits(x).argmax(dim=1)
            adv = model.logits(pert.apply(x)).argmax(dim=1)
            flips = (adv != clean).numpy()
            labels = y.numpy()
            changed += int(flips.sum())
            correct += int((clean == y).sum().item())
            mask = (clean == y).numpy()
            flips_correct += int((flips & mask).sum())
            n_correct += int(mask.sum())
            np.add.at(changed_by_class, labels, flips)
            np.add.at(count_by_class, labels, 1)
    per_class = np.divide(
        changed_by_class, count_by_class,
        out=np.full(num_classes, np.nan), where=count_by_class > 0,
    )
    return EvalReport(
        asr=changed / len(dataset),
        asr_initially_correct=(flips_correct / n_correct) if n_correct else float("nan"),
        clean_accuracy=correct / len(dataset),
        l2=l2_report(pert, dataset, batch_size),
        per_class_asr=per_class,
        num_images=len(dataset),
    )


@dataclass
class TransferMatrix:
    """Success rates of perturbations trained on row models, applied to column models."""

    model_ids: list[str]
    asr: np.ndarray  # (k, k); NaN marks an invalid pairing
    errors: list[str]

    def column_averages(self, include_diagonal: bool = True) -> np.ndarray:
        if include_diagonal:
            return np.nanmean(self.asr, axis=0)
        off = self.asr.copy()
        np.fill_diagonal(off, np.nan)
        return np.nanmean(off, axis=0)


def transfer_matrix(
    perturbations: list[UniversalPerturbation],
    models: list[TargetModel],
    dataset: LabeledDataset,
) -> TransferMatrix:
    """Evaluate every perturbation (trained per row model) on every column model.

    Pairings that cannot be evaluated (for example an input-shape mismatch)
    are recorded as NaN with a note instead of aborting the whole matrix.
    """
    if len(perturbations) != len(models):
        raise ValueError("need exactly one perturbation per model")
    k = len(models)
    grid = np.full((k, k), np.nan)
    errors: list[str] = []
    for i, pert in enumerate(perturbations):
        for j, model in enumerate(models):
            try:
                grid[i, j] = attack_success_rate(pert, dataset, model)
            except (ValueError, RuntimeError) as exc:
                errors.append(f"{models[i].identifier} -> {model.identifier}: {exc}")
    return TransferMatrix([m.identifier for m in models], grid, errors)


@dataclass
class AblationGrid:
    epsilons: list[float]
    taus: list[float]
    asr: np.ndarray  # (len(taus), len(epsilons)); rows are taus
    errors: list[str]


def ablation_grid(
    dataset: LabeledDataset,
    target: TargetModel,
    cfg: TrainConfig,
    heldout: LabeledDataset,
    epsilons: list[float],
    taus: list[float],
    arch: GeneratorArch | None = None,
    verbose: bool = False,
) -> AblationGrid:
    """Train one perturbation per (epsilon, tau) cell with a shared seed and
    config, and measure heldout success rate. Failed cells become NaN plus a
    note; the (0, 0) cell is a true identity perturbation and is reported, not
    skipped."""
    grid = np.full((len(taus), len(epsilons)), np.nan)
    errors: list[str] = []
    for ti, tau in enumerate(taus):
        for ei, eps in enumerate(epsilons):
            try:
                cell_cfg = replace(cfg, epsilon=eps, tau=tau)
                gen, _ = train(dataset, target, cell_cfg, arch=arch)
                pattern = make_seed_pattern(gen.arch, cell_cfg.seed)
                pert = freeze_perturbation(gen, pattern, cell_cfg.budget, target.identifier)
                grid[ti, ei] = attack_success_rate(pert, heldout, target)
            except (ValueError, RuntimeError) as exc:
                errors.append(f"epsilon={eps} tau={tau}: {exc}")
            if verbose:
                print(f"cell epsilon={eps} tau={tau}: asr={grid[ti, ei]:.4f}")
    return AblationGrid(list(epsilons), list(taus), grid, errors)


def sample_size_study(
    dataset: LabeledDataset,
    target: TargetModel,
    cfg: TrainConfig,
    heldout: LabeledDataset,
    sizes: list[int],
    arch: GeneratorArch | None = None,
    verbose: bool = False,
) -> list[tuple[int, float]]:
    """Heldout success rate as a function of training-set size.

    Sizes must be ascending and within the dataset; subsets are nested
    prefixes of the (pre-shuffled) training split so each larger run extends
    the smaller one."""
    if sorted(sizes) != list(sizes) or len(set(sizes)) != len(sizes):
        raise ValueError("sizes must be strictly ascending")
    if sizes[0] < 1 or sizes[-1] > len(dataset):
        raise ValueError(f"sizes must lie in [1, {len(dataset)}]")
    results = []
    for size in sizes:
        subset = dataset.take(size)
        gen, _ = train(subset, target, cfg, arch=arch)
        pattern = make_seed_pattern(gen.arch, cfg.seed)
        pert = freeze_perturbation(gen, pattern, cfg.budget, target.identifier)
        asr = attack_success_rate(pert, heldout, target)
        results.append((size, asr))
        if verbose:
            print(f"train size {size}: heldout asr {asr:.4f}")
    return results


# ---------------------------------------------------------------------------
# Emission


def write_eval_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in report.rows():
            writer.writerow([name, f"{value:.6f}"])


def write_transfer_csv(matrix: TransferMatrix, path: str | Path) -> None:
    """Rows are source models, columns victim models, plus two labeled
    column-average rows (with and without the self-attack diagonal)."""

    def fmt(v: float) -> str:
        return "nan" if np.isnan(v) else f"{v:.6f}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source\\victim", *matrix.model_ids])
        for i, row_id in enumerate(matrix.model_ids):
            writer.writerow([row_id, *(fmt(v) for v in matrix.asr[i])])
        writer.writerow(["Average (incl. self)", *(fmt(v) for v in matrix.column_averages(True))])
        writer.writerow(["Average (excl. self)", *(fmt(v) for v in matrix.column_averages(False))])


def write_grid_csv(grid: AblationGrid, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau\\epsilon", *(f"{e:g}" for e in grid.epsilons)])
        for ti, tau in enumerate(grid.taus):
            writer.writerow(
                [f"{tau:g}", *("nan" if np.isnan(v) else f"{v:.6f}" for v in grid.asr[ti])]
            )


def write_curve_csv(points: list[tuple[int, float]], path: str | Path,
                    x_name: str = "train_size", y_name: str = "heldout_asr") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([x_name, y_name])
        for x, y in points:
            writer.writerow([x, f"{y:.6f}"])


def _agg_backend():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_grid_heatmap(grid: AblationGrid, path: str | Path) -> None:
    plt = _agg_backend()
    fig, ax = plt.subplots(figsize=(1.2 * len(grid.epsilons) + 2, 1.0 * len(grid.taus) + 2))
    im = ax.imshow(grid.asr, origin="lower", aspect="auto", cmap="viridis", vmin=0.0)
    ax.set_xticks(range(len(grid.epsilons)), [f"{e:g}" for e in grid.epsilons])
    ax.set_yticks(range(len(grid.taus)), [f"{t:g}" for t in grid.taus])
    ax.set_xlabel("epsilon (noise sup-norm)")
    ax.set_ylabel("tau (flow budget)")
    for ti in range(len(grid.taus)):
        for ei in range(len(grid.epsilons)):
            v = grid.asr[ti, ei]
            ax.text(ei, ti, "n/a" if np.isnan(v) else f"{v:.2f}",
                    ha="center", va="center", color="white", fontsize=8)
    fig.colorbar(im, ax=ax, label="heldout success rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_curve_png(points: list[tuple[int, float]], path: str | Path,
                   xlabel: str = "training images", ylabel: str = "heldout success rate") -> None:
    plt = _agg_backend()
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_xscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_transfer_heatmap(matrix: TransferMatrix, path: str | Path) -> None:
    plt = _agg_backend()
    k = len(matrix.model_ids)
    fig, ax = plt.subplots(figsize=(1.4 * k + 2, 1.2 * k + 2))
    im = ax.imshow(matrix.asr, cmap="viridis", vmin=0.0)
    ax.set_xticks(range(k), matrix.model_ids, rotation=30, ha="right")
    ax.set_yticks(range(k), matrix.model_ids)
    ax.set_xlabel("victim model")
    ax.set_ylabel("source model")
    for i in range(k):
        for j in range(k):
            v = matrix.asr[i, j]
            ax.text(j, i, "n/a" if np.isnan(v) else f"{v:.2f}",
                    ha="center", va="center", color="white", fontsize=8)
    fig.colorbar(im, ax=ax, label="success rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _to_png_array(img: torch.Tensor) -> np.ndarray:
    arr = np.rint(img.detach().cpu().numpy() * 255.0).clip(0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def export_image_triplets(
    pert: UniversalPerturbation, dataset: LabeledDataset, outdir: str | Path, count: int = 4
) -> list[Path]:
    """Write (clean, warped-only, final) PNG triplets for the first ``count``
    images, showing the geometric and the additive stage separately."""
    from PIL import Image

    from .flowwarp import bilinear_warp

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    count = min(count, len(dataset))
    if count == 0:
        raise ValueError("empty evaluation set")
    x = dataset.images[:count]
    with torch.no_grad():
        warped = bilinear_warp(x, pert.flow)
        final = pert.apply(x)
    written = []
    for i in range(count):
        for stage, batch in (("clean", x), ("warped", warped), ("final", final)):
            arr = _to_png_array(batch[i])
            mode = "RGB" if arr.shape[2] == 3 else "L"
            img = Image.fromarray(arr.squeeze() if mode == "L" else arr, mode=mode)
            fpath = outdir / f"sample{i:03d}_{stage}.png"
            img.save(fpath)
            written.append(fpath)
    return written
