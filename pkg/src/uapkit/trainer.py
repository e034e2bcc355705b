"""Training loop for the perturbation generator, perturbation freezing, and
persistence of both frozen perturbations and generator checkpoints.

The loop optimizes only the generator; the target classifier stays frozen.
Each step: draw a pattern z, run the generator, normalize flow and noise to
their budgets, compose adversarial images, and descend the negated scaled
cross entropy against the target's own clean predictions.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .backbone import LabeledDataset, TargetModel
from .errors import (
    DigestMismatchError,
    FileFormatError,
    TrainingDiverged,
    TruncatedFileError,
    VersionMismatchError,
)
from .flowwarp import flow_budget, scale_flow
from .generator import GeneratorArch, PerturbationGenerator, SeedPattern, init_generator, make_seed_pattern
from .ioformats import load_named_tensors, save_named_tensors
from .objective import adversarial_loss, cross_entropy_per_sample
from .perturb import AttackBudget, compose_adversarial, scale_noise

ARTIFACT_MAGIC = b"GUAP"
ARTIFACT_VERSION = 1
_SHA256_BYTES = 32

LOSS_VARIANTS = ("scaled_ce", "plain_ce")
PATTERN_POLICIES = ("resample", "fixed")
OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    epsilon: float = 0.04
    tau: float = 0.0
    optimizer: str = "adam"
    learning_rate: float = 2e-4
    weight_decay: float = 0.0
    seed: int = 0
    # "scaled_ce" is the default objective; "plain_ce" (negated mean cross
    # entropy, no log scaling) exists for convergence comparisons.
    loss_variant: str = "scaled_ce"
    # "resample" draws a fresh pattern every minibatch; "fixed" reuses the
    # deployment pattern throughout training.
    pattern_policy: str = "resample"
    # Cap on how many training images the per-epoch success-rate probe sees.
    asr_probe_limit: int = 2048

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.pattern_policy not in PATTERN_POLICIES:
            raise ValueError(f"pattern_policy must be one of {PATTERN_POLICIES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        self.budget = AttackBudget(self.epsilon, self.tau)  # validates ranges


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    train_asr: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    final_heldout_asr: float | None = None

    def to_csv(self, path: str | Path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "train_asr", "seconds"])
            for row in self.epochs:
                writer.writerow([row.epoch, f"{row.mean_loss:.6f}", f"{row.train_asr:.6f}", f"{row.seconds:.3f}"])
            if self.final_heldout_asr is not None:
                writer.writerow(["final_heldout_asr", f"{self.final_heldout_asr:.6f}", "", ""])


@dataclass
class UniversalPerturbation:
    """A frozen universal perturbation: one flow field plus one noise map."""

    flow: Tensor  # (2, h, w) float32
    noise: Tensor  # (c, h, w) float32
    budget: AttackBudget
    seed_digest: bytes  # sha256 of the pattern that generated it
    target_id: str = ""
    degenerate_flow: bool = False
    created: str = ""  # ISO timestamp; informational, not persisted

    def apply(self, images: Tensor) -> Tensor:
        return compose_adversarial(images, self.flow, self.noise)

    def validate(self, flow_tol: float = 1e-5, noise_tol: float = 1e-7) -> None:
        """Check the frozen fields actually meet their recorded budgets."""
        fb = flow_budget(self.flow).item()
        if self.budget.tau == 0.0 or self.degenerate_flow:
            if fb != 0.0:
                raise ValueError(f"flow should be identically zero, has budget {fb}")
        elif abs(fb - self.budget.tau) > flow_tol:
            raise ValueError(f"flow budget {fb} deviates from tau {self.budget.tau}")
        ninf = self.noise.abs().max().item()
        if self.budget.epsilon == 0.0:
            if ninf != 0.0:
                raise ValueError(f"noise should be identically zero, has norm {ninf}")
        elif ninf > 1e-12 and abs(ninf - self.budget.epsilon) > noise_tol:
            raise ValueError(f"noise norm {ninf} deviates from epsilon {self.budget.epsilon}")


def _dataset_asr(
    pert: UniversalPerturbation, dataset: LabeledDataset, target: TargetModel, batch_size: int = 512
) -> float:
    """Fraction of images whose predicted class changes under the perturbation.

    Private probe used for per-epoch logging; the public metric with the same
    definition lives in evaluation.attack_success_rate.
    """
    changed = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start : start + batch_size]
            clean = target.logits(x).argmax(dim=1)
            adv = target.logits(pert.apply(x)).argmax(dim=1)
            changed += (adv != clean).sum().item()
    return changed / len(dataset)


def freeze_perturbation(
    generator: PerturbationGenerator,
    pattern: SeedPattern,
    budget: AttackBudget,
    target_id: str = "",
) -> UniversalPerturbation:
    """Run the generator once on the fixed pattern and normalize to budget.

    Deterministic: the same generator weights, pattern, and budget always
    produce byte-identical flow and noise tensors.
    """
    generator.eval()
    with torch.no_grad():
        raw_noise, raw_flow = generator(pattern.data)
    flow, degenerate = scale_flow(raw_flow, budget.tau)
    noise = scale_noise(raw_noise, budget.epsilon)
    pert = UniversalPerturbation(
        flow=flow.float(),
        noise=noise.float(),
        budget=budget,
        seed_digest=pattern.digest(),
        target_id=target_id,
        degenerate_flow=degenerate,
        created=datetime.now(timezone.utc).isoformat(),
    )
    pert.validate()
    return pert


def random_perturbation(
    shape: tuple[int, int, int], budget: AttackBudget, seed: int = 0
) -> UniversalPerturbation:
    """Budget-normalized uniform-random baseline with no training."""
    c, h, w = shape
    gen = torch.Generator().manual_seed(seed)
    raw_noise = torch.rand(c, h, w, generator=gen) * 2 - 1
    raw_flow = torch.rand(2, h, w, generator=gen) * 2 - 1
    flow, degenerate = scale_flow(raw_flow, budget.tau)
    noise = scale_noise(raw_noise, budget.epsilon)
    pert = UniversalPerturbation(
        flow=flow.float(),
        noise=noise.float(),
        budget=budget,
        seed_digest=hashlib.sha256(f"random-{seed}".encode()).digest(),
        target_id="",
        degenerate_flow=degenerate,
        created=datetime.now(timezone.utc).isoformat(),
    )
    pert.validate()
    return pert


def train(
    dataset: LabeledDataset,
    target: TargetModel,
    cfg: TrainConfig,
    arch: GeneratorArch | None = None,
    heldout: LabeledDataset | None = None,
    step_hook=None,
    verbose: bool = False,
) -> tuple[PerturbationGenerator, TrainLog]:
    """Optimize a perturbation generator against a frozen target classifier.

    Returns the trained generator and a log with per-epoch mean loss, a
    training-set success-rate probe, wall-clock seconds, and (when a heldout
    split is given) the final heldout success rate of the frozen perturbation.

    ``step_hook(step, flow, noise, loss)`` is called after each optimizer step
    with detached budget-normalized fields, for invariant monitoring.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    c, h, w = dataset.shape
    if arch is None:
        arch = GeneratorArch(in_channels=c, height=h, width=w)
    if (arch.in_channels, arch.height, arch.width) != (c, h, w):
        raise ValueError(
            f"generator arch {arch.in_channels}x{arch.height}x{arch.width} "
            f"does not match dataset images {c}x{h}x{w}"
        )
    target.freeze()
    generator = init_generator(arch, cfg.seed)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(generator.parameters(), lr=cfg.learning_rate,
                               weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(generator.parameters(), lr=cfg.learning_rate,
                              momentum=0.9, weight_decay=cfg.weight_decay)

    budget = cfg.budget
    deploy_pattern = make_seed_pattern(arch, cfg.seed)
    pattern_rng = torch.Generator().manual_seed(cfg.seed + 1)
    order_rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        generator.train()
        losses = []
        order = order_rng.permutation(len(dataset))
        for start in range(0, len(dataset), cfg.batch_size):
            idx = torch.as_tensor(order[start : start + cfg.batch_size], dtype=torch.long)
            x = dataset.images[idx]
            if cfg.pattern_policy == "resample":
                z = torch.randn(c, h, w, generator=pattern_rng)
            else:
                z = deploy_pattern.data
            raw_noise, raw_flow = generator(z)
            flow, _ = scale_flow(raw_flow, cfg.tau)
            noise = scale_noise(raw_noise, cfg.epsilon)
            x_adv = compose_adversarial(x, flow, noise)
            with torch.no_grad():
                clean_labels = target.logits(x).argmax(dim=1)
            adv_logits = target.logits(x_adv)
            if not torch.isfinite(adv_logits).all():
                raise TrainingDiverged(f"target logits became non-finite at epoch {epoch} step {step}")
            if cfg.loss_variant == "scaled_ce":
                loss = adversarial_loss(adv_logits, clean_labels)
            else:
                loss = -cross_entropy_per_sample(adv_logits, clean_labels).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch} step {step}")
            opt.zero_grad()
            # With epsilon = tau = 0 (or a degenerate generator output) the
            # composition is constant in the parameters; the true gradient is
            # zero, so there is simply no step to take.
            if loss.requires_grad:
                loss.backward()
                opt.step()
            losses.append(loss.item())
            if step_hook is not None:
                step_hook(step, flow.detach(), noise.detach(), loss.item())
            step += 1
        probe = freeze_perturbation(generator, deploy_pattern, budget, target.identifier)
        probe_set = dataset if len(dataset) <= cfg.asr_probe_limit else dataset.take(cfg.asr_probe_limit)
        stats = EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            train_asr=_dataset_asr(probe, probe_set, target),
            seconds=time.perf_counter() - tic,
        )
        log.epochs.append(stats)
        if verbose:
            print(f"epoch {stats.epoch}: loss {stats.mean_loss:.4f} "
                  f"train_asr {stats.train_asr:.4f} ({stats.seconds:.1f}s)")
    if heldout is not None:
        final = freeze_perturbation(generator, deploy_pattern, budget, target.identifier)
        log.final_heldout_asr = _dataset_asr(final, heldout, target)
    return generator, log


# ---------------------------------------------------------------------------
# Perturbation artifact format
#
# magic "GUAP" | version u32 | epsilon f64 | tau f64 | c u32 | h u32 | w u32
# | target_id_len u32 | target_id utf-8 | seed digest (32 bytes)
# | flow payload (2*h*w little-endian float32) | noise payload (c*h*w float32)
# | sha256 of everything before it


def save_perturbation(pert: UniversalPerturbation, path: str | Path) -> None:
    target_bytes = pert.target_id.encode("utf-8")
    if len(pert.seed_digest) != _SHA256_BYTES:
        raise ValueError(f"seed digest must be {_SHA256_BYTES} bytes, got {len(pert.seed_digest)}")
    c, h, w = pert.noise.shape
    if pert.flow.shape != (2, h, w):
        raise ValueError("flow and noise spatial shapes disagree")
    blob = bytearray()
    blob += ARTIFACT_MAGIC
    blob += struct.pack("<I", ARTIFACT_VERSION)
    blob += struct.pack("<dd", pert.budget.epsilon, pert.budget.tau)
    blob += struct.pack("<III", c, h, w)
    blob += struct.pack("<I", len(target_bytes)) + target_bytes
    blob += pert.seed_digest
    blob += pert.flow.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
    blob += pert.noise.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
    blob += hashlib.sha256(blob).digest()
    Path(path).write_bytes(bytes(blob))


def load_perturbation(path: str | Path) -> UniversalPerturbation:
    """Parse and verify a perturbation artifact.

    Raises FileFormatError (bad magic or malformed header),
    VersionMismatchError, TruncatedFileError (byte count disagrees with the
    header), or DigestMismatchError (checksum failure).
    """
    path = Path(path)
    data = path.read_bytes()
    fixed_head = len(ARTIFACT_MAGIC) + 4 + 16 + 12 + 4
    if len(data) < fixed_head:
        raise TruncatedFileError(f"{path}: {len(data)} bytes is too short for a header")
    if data[: len(ARTIFACT_MAGIC)] != ARTIFACT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {data[:len(ARTIFACT_MAGIC)]!r}")
    off = len(ARTIFACT_MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != ARTIFACT_VERSION:
        raise VersionMismatchError(f"{path}: artifact version {version}, expected {ARTIFACT_VERSION}")
    epsilon, tau = struct.unpack_from("<dd", data, off)
    off += 16
    c, h, w = struct.unpack_from("<III", data, off)
    off += 12
    (id_len,) = struct.unpack_from("<I", data, off)
    off += 4
    expected = off + id_len + _SHA256_BYTES + 4 * (2 * h * w + c * h * w) + _SHA256_BYTES
    if len(data) != expected:
        raise TruncatedFileError(f"{path}: header implies {expected} bytes, file has {len(data)}")
    checksum = hashlib.sha256(data[:-_SHA256_BYTES]).digest()
    if checksum != data[-_SHA256_BYTES:]:
        raise DigestMismatchError(f"{path}: checksum mismatch, file is corrupt")
    try:
        target_id = data[off : off + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FileFormatError(f"{path}: target id is not valid UTF-8") from exc
    off += id_len
    seed_digest = data[off : off + _SHA256_BYTES]
    off += _SHA256_BYTES
    flow_bytes = 4 * 2 * h * w
    flow = np.frombuffer(data[off : off + flow_bytes], dtype="<f4").astype(np.float32)
    off += flow_bytes
    noise = np.frombuffer(data[off : off + 4 * c * h * w], dtype="<f4").astype(np.float32)
    try:
        budget = AttackBudget(epsilon, tau)
    except ValueError as exc:
        raise FileFormatError(f"{path}: invalid budget in header: {exc}") from exc
    flow_t = torch.from_numpy(flow.reshape(2, h, w).copy())
    noise_t = torch.from_numpy(noise.reshape(c, h, w).copy())
    if not (torch.isfinite(flow_t).all() and torch.isfinite(noise_t).all()):
        raise FileFormatError(f"{path}: payload contains non-finite values")
    degenerate = tau > 0.0 and flow_t.abs().max().item() == 0.0
    return UniversalPerturbation(
        flow=flow_t,
        noise=noise_t,
        budget=budget,
        seed_digest=seed_digest,
        target_id=target_id,
        degenerate_flow=degenerate,
    )


# ---------------------------------------------------------------------------
# Generator checkpoints


def save_generator(generator: PerturbationGenerator, path: str | Path) -> None:
    """Persist generator weights and architecture as a named-tensor container."""
    arch = generator.arch
    tensors = {
        name: tensor.detach().cpu().contiguous().numpy()
        for name, tensor in generator.state_dict().items()
    }
    meta = {
        "kind": "generator",
        "in_channels": arch.in_channels,
        "height": arch.height,
        "width": arch.width,
        "base_width": arch.base_width,
        "num_resnet_blocks": arch.num_resnet_blocks,
        "signed_flow": arch.signed_flow,
    }
    save_named_tensors(path, tensors, meta)


def load_generator(path: str | Path) -> PerturbationGenerator:
    tensors, meta = load_named_tensors(path)
    if meta.get("kind") != "generator":
        raise ValueError(f"{path}: not a generator checkpoint (kind={meta.get('kind')!r})")
    arch = GeneratorArch(
        in_channels=meta["in_channels"],
        height=meta["height"],
        width=meta["width"],
        base_width=meta["base_width"],
        num_resnet_blocks=meta["num_resnet_blocks"],
        signed_flow=meta["signed_flow"],
    )
    generator = PerturbationGenerator(arch)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    generator.load_state_dict(state)
    generator.eval()
    return generator
