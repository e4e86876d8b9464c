"""Finite-difference verification of analytic gradients.

Every suite builds a scalar loss in float64 from a fixed random instance,
computes analytic gradients by backpropagation, and compares them against
central differences (f(x+eps) - f(x-eps)) / (2 eps) with eps = 1e-5.

The reported relative error per coordinate is

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)

i.e. coordinates whose gradient magnitude is below the 1e-3 floor are
compared absolutely at that scale, which keeps finite-difference roundoff
(~1e-9 here) from dominating near-zero gradients.

For the refinement-loss suites the batch partition and the FN/FP centers
are computed once from the unperturbed instance and then held fixed: the
partition is piecewise constant in the inputs, and centers are constants
under differentiation by design, so both sides of the comparison must treat
them as frozen.

Large tensors are checked on a seeded random subset of coordinates to keep
the full run under a minute on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import protoref
from .net import BranchConfig, NetConfig, TwoStreamNet
from .xfuse import CrossModalFusion, FusionConfig

EPS = 1e-5
TOL = 1e-4
REL_FLOOR = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_coords: int
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} "
                f"over {self.n_coords} coords (tol {self.tol:.0e})")


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    name: str,
    make_loss: Callable[[], torch.Tensor],
    leaves: dict[str, torch.Tensor],
    eps: float = EPS,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare backprop gradients of make_loss() against central differences.

    `leaves` maps names to float64 tensors with requires_grad=True;
    make_loss must rebuild the loss from their current values on every call.
    """
    for lname, leaf in leaves.items():
        if leaf.dtype != torch.float64:
            raise ValueError(f"leaf {lname} must be float64 for finite differences")

    loss = make_loss()
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=False)
    analytic = {lname: g.detach().clone() for lname, g in zip(leaves, grads)}

    rng = np.random.default_rng(seed)
    max_err = 0.0
    n_checked = 0
    with torch.no_grad():
        for lname, leaf in leaves.items():
            flat = leaf.data.view(-1)
            numel = flat.numel()
            if max_coords is not None and numel > max_coords:
                coords = rng.choice(numel, size=max_coords, replace=False)
            else:
                coords = range(numel)
            grad_flat = analytic[lname].view(-1)
            for idx in coords:
                idx = int(idx)
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = make_loss().item()
                flat[idx] = orig - eps
                down = make_loss().item()
                flat[idx] = orig
                numeric = (up - down) / (2 * eps)
                max_err = max(max_err, relative_error(grad_flat[idx].item(), numeric))
                n_checked += 1
    return GradCheckResult(name=name, max_rel_err=max_err, n_coords=n_checked)


def randomize_module_(module: torch.nn.Module, seed: int, scale: float = 0.4) -> None:
    """Replace every parameter with seeded Gaussian noise (breaks zero inits)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            param.copy_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * scale)


# ---------------------------------------------------------------------------
# suites; instance sizes follow the acceptance setup: N=6, K=3, D=8, C'=5, T'=4

_N, _K, _D = 6, 3, 8


def _loss_instance(seed: int):
    gen = torch.Generator().manual_seed(seed)
    feats = torch.randn(_N, _D, generator=gen, dtype=torch.float64, requires_grad=True)
    logits = torch.randn(_N, _K, generator=gen, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 1, 2, 0, 1, 2])
    return feats, logits, labels


def suite_cross_entropy(seed: int = 11) -> GradCheckResult:
    feats, logits, labels = _loss_instance(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    w = torch.randn(_K, _D, generator=gen, dtype=torch.float64, requires_grad=True)
    b = torch.randn(_K, generator=gen, dtype=torch.float64, requires_grad=True)

    def make_loss():
        return torch.nn.functional.cross_entropy(feats @ w.t() + b, labels)

    return check_gradients("cross_entropy", make_loss,
                           {"feats": feats, "w": w, "b": b}, seed=seed)


def _refinement_setup(seed: int):
    feats, logits, _ = _loss_instance(seed)
    bank = protoref.PrototypeBank.random_init(_K, _D, rho=0.9, seed=seed + 2,
                                              dtype=torch.float64)
    with torch.no_grad():
        probs0 = torch.softmax(logits, dim=1)
        preds = probs0.argmax(dim=1)
    # label even rows as predicted (anchors) and odd rows off by one (FN/FP),
    # so every seed yields a TP/FN/FP mixture
    labels = torch.where(torch.arange(_N) % 2 == 0, preds, (preds + 1) % _K)
    part = protoref.partition_batch(probs0, labels.numpy())
    # freeze partition and centers from the unperturbed instance
    part = protoref.ambiguous_centers(part, feats.detach())
    return feats, logits, labels, bank, part


def suite_refinement_loss(seed: int = 11) -> GradCheckResult:
    feats, logits, _, bank, part = _refinement_setup(seed)

    def make_loss():
        probs = torch.softmax(logits, dim=1)
        return protoref.proto_loss(bank, part, feats, probs, tau=0.1)

    return check_gradients("refinement_loss", make_loss,
                           {"feats": feats, "logits": logits}, seed=seed)


def suite_total_loss(seed: int = 11, alpha: float = 0.5) -> GradCheckResult:
    feats, logits, labels, bank, part = _refinement_setup(seed)

    def make_loss():
        probs = torch.softmax(logits, dim=1)
        ce = torch.nn.functional.cross_entropy(logits, labels)
        return ce + alpha * protoref.proto_loss(bank, part, feats, probs, tau=0.1)

    return check_gradients("total_loss", make_loss,
                           {"feats": feats, "logits": logits}, seed=seed)


def suite_fusion(seed: int = 11) -> GradCheckResult:
    cfg = FusionConfig(hidden_dim=5, lateral_channels=3)
    module = CrossModalFusion(cfg, rgb_channels=6, pose_channels=7,
                              rgb_t=4, stride_ratio=2).double()
    randomize_module_(module, seed)
    gen = torch.Generator().manual_seed(seed + 5)
    in_rgb = torch.randn(_N, 6, 4, 5, 5, generator=gen, dtype=torch.float64,
                         requires_grad=True)
    in_pose = torch.randn(_N, 7, 8, 5, 5, generator=gen, dtype=torch.float64,
                          requires_grad=True)

    def make_loss():
        state = module(in_rgb, in_pose)
        return 0.5 * (state.out_rgb.square().mean() + state.out_pose.square().mean())

    leaves = {"in_rgb": in_rgb, "in_pose": in_pose}
    leaves.update({f"param.{n}": p for n, p in module.named_parameters()})
    return check_gradients("fusion_module", make_loss, leaves,
                           max_coords=160, seed=seed)


def suite_encoder(seed: int = 11) -> GradCheckResult:
    cfg = NetConfig(
        num_classes=3, t_rgb=4, t_pose=8,
        rgb=BranchConfig(in_channels=3, stage_channels=(4, 8), embed_dim=8),
        pose=BranchConfig(in_channels=2, stage_channels=(4, 8), embed_dim=8),
        fusion=FusionConfig(hidden_dim=5, lateral_channels=4),
    )
    torch.manual_seed(seed)
    model = TwoStreamNet(cfg).double()
    randomize_module_(model, seed + 7, scale=0.3)
    gen = torch.Generator().manual_seed(seed + 8)
    rgb = torch.randn(2, 3, 4, 8, 8, generator=gen, dtype=torch.float64)
    pose = torch.randn(2, 2, 8, 8, 8, generator=gen, dtype=torch.float64)
    labels = torch.tensor([0, 2])

    def make_loss():
        out_rgb, out_pose = model.encode(rgb, pose)
        return (torch.nn.functional.cross_entropy(out_rgb.logits, labels)
                + torch.nn.functional.cross_entropy(out_pose.logits, labels))

    leaves = {f"param.{n}": p for n, p in model.named_parameters()}
    return check_gradients("encoder_cross_entropy", make_loss, leaves,
                           max_coords=24, seed=seed)


def run_all(seed: int = 11) -> list[GradCheckResult]:
    """Run every finite-difference suite; order matches the report output."""
    return [
        suite_cross_entropy(seed),
        suite_refinement_loss(seed),
        suite_total_loss(seed),
        suite_fusion(seed),
        suite_encoder(seed),
    ]


__all__ = [
    "EPS",
    "TOL",
    "REL_FLOOR",
    "GradCheckResult",
    "relative_error",
    "check_gradients",
    "randomize_module_",
    "suite_cross_entropy",
    "suite_refinement_loss",
    "suite_total_loss",
    "suite_fusion",
    "suite_encoder",
    "run_all",
]
