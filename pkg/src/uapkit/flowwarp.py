"""Differentiable image warping by a shared flow field, plus flow smoothness metrics.

Conventions used throughout:
  * images are (n, c, h, w) tensors with values in [0, 1],
  * a flow field is a (2, h, w) tensor of displacements in pixel units,
    channel 0 moves along rows (vertical), channel 1 along columns,
  * warping is backward sampling: output pixel p reads the input at p + flow(p),
    so the same field is shared by every image and every color channel.
"""

from __future__ import annotations

import torch
from torch import Tensor

# Below this RMS displacement a raw flow cannot be rescaled to a target budget
# without numerical blow-up and is treated as degenerate (identity transform).
DEGENERATE_FLOW_BUDGET = 1e-12


def _check_flow(flow: Tensor) -> None:
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must have shape (2, h, w), got {tuple(flow.shape)}")
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")


def bilinear_warp(images: Tensor, flow: Tensor) -> Tensor:
    """Resample a batch of images at coordinates displaced by a shared flow field.

    Output pixel (i, j) is the bilinear interpolation of the input at
    (i + flow[0, i, j], j + flow[1, i, j]). Source coordinates falling outside
    the image are clamped to the border, which replicates edge pixels. The
    operation is differentiable in both ``images`` and ``flow``.

    Args:
        images: (n, c, h, w) batch.
        flow: (2, h, w) displacement field in pixel units.

    Returns:
        Warped batch with the same shape as ``images``.
    """
    if images.ndim != 4:
        raise ValueError(f"images must have shape (n, c, h, w), got {tuple(images.shape)}")
    _check_flow(flow)
    n, c, h, w = images.shape
    if flow.shape[1] != h or flow.shape[2] != w:
        raise ValueError(
            f"flow spatial size {tuple(flow.shape[1:])} does not match images {(h, w)}"
        )

    rows = torch.arange(h, dtype=flow.dtype, device=flow.device)
    cols = torch.arange(w, dtype=flow.dtype, device=flow.device)
    base_r, base_c = torch.meshgrid(rows, cols, indexing="ij")
    src_r = (base_r + flow[0]).clamp(0, h - 1)
    src_c = (base_c + flow[1]).clamp(0, w - 1)

    r0 = src_r.floor()
    c0 = src_c.floor()
    # Keep the 4-neighbor stencil inside the image; at the high border r0 == h-1
    # would otherwise pair with a row h that does not exist.
    r0 = r0.clamp(0, h - 2) if h > 1 else torch.zeros_like(r0)
    c0 = c0.clamp(0, w - 2) if w > 1 else torch.zeros_like(c0)
    fr = src_r - r0
    fc = src_c - c0

    r0i = r0.long()
    c0i = c0.long()
    r1i = (r0i + 1).clamp(max=h - 1)
    c1i = (c0i + 1).clamp(max=w - 1)

    flat = images.reshape(n, c, h * w)

    def gather(ri: Tensor, ci: Tensor) -> Tensor:
        idx = (ri * w + ci).reshape(1, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).reshape(n, c, h, w)

    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    out = (
        gather(r0i, c0i) * w00
        + gather(r0i, c1i) * w01
        + gather(r1i, c0i) * w10
        + gather(r1i, c1i) * w11
    )
    return out.to(images.dtype) if out.dtype != images.dtype else out


def _neighbor_diffs(flow: Tensor) -> Tensor:
    """Per-pixel flow differences to the 4 axis neighbors, replicate-padded.

    Returns a (4, 2, h, w) tensor; with replicate padding the difference to an
    out-of-image neighbor is zero, so border pixels never inflate the metrics.
    """
    padded = torch.nn.functional.pad(flow.unsqueeze(0), (1, 1, 1, 1), mode="replicate")[0]
    h, w = flow.shape[1], flow.shape[2]
    up = padded[:, 0:h, 1 : w + 1]
    down = padded[:, 2 : h + 2, 1 : w + 1]
    left = padded[:, 1 : h + 1, 0:w]
    right = padded[:, 1 : h + 1, 2 : w + 2]
    return torch.stack([flow - up, flow - down, flow - left, flow - right])


def flow_budget(flow: Tensor) -> Tensor:
    """Smoothness budget of a flow field: worst-direction RMS neighbor difference.

    For each of the 4 axis directions, take the mean over all pixels of the
    squared flow difference to that neighbor (both components summed), then
    return the square root of the largest of the 4 means. Computing sqrt(max)
    rather than max(sqrt) keeps the value identical while avoiding NaN
    gradients from the branches the max does not select.
    """
    _check_flow(flow)
    diffs = _neighbor_diffs(flow)
    mean_sq = diffs.pow(2).sum(dim=1).mean(dim=(1, 2))
    return mean_sq.max().sqrt()


def flow_tv_loss(flow: Tensor) -> Tensor:
    """Total variation of a flow field: sum over pixels and 4 neighbors of the
    Euclidean norm of the flow difference. Diagnostic only; not used as a
    training objective here, and not differentiable where a difference is
    exactly zero.
    """
    _check_flow(flow)
    diffs = _neighbor_diffs(flow)
    return diffs.pow(2).sum(dim=1).sqrt().sum()


def scale_flow(raw_flow: Tensor, tau: float) -> tuple[Tensor, bool]:
    """Rescale a raw flow so its budget equals ``tau`` exactly.

    Returns the scaled flow and a degeneracy flag. ``tau == 0`` yields the
    all-zero flow (identity warp) without flagging; a raw flow whose budget is
    below DEGENERATE_FLOW_BUDGET cannot be normalized and also yields the
    zero flow, with the flag set. The scaled flow stays differentiable with
    respect to ``raw_flow`` in the regular case.
    """
    _check_flow(raw_flow)
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    if tau == 0.0:
        return torch.zeros_like(raw_flow), False
    budget = flow_budget(raw_flow)
    if budget.item() <= DEGENERATE_FLOW_BUDGET:
        return torch.zeros_like(raw_flow), True
    return raw_flow * (tau / budget), False
