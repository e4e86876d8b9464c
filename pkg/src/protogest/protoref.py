"""Prototype-based refinement of ambiguous samples.

Within a training batch, samples split per class k into confident samples
(TP: predicted correctly) and ambiguous ones (FN: class-k samples predicted
as something else; FP: other samples predicted as k). Each class keeps a
persistent unit-norm prototype, EMA-updated from the normalized features of
its TP samples.

For every confident anchor i of class k the refinement loss pulls its
feature toward the class prototype relative to the other prototypes, with
two correction terms in the anchor's own softmax logit:

    phi    = 1 - cos(F_i, center of the class's FN samples)   (compensation)
    varphi = 1 + cos(F_i, center of the class's FP samples)   (penalty)

scaled by (1 - p_ik), so well-calibrated anchors (p_ik -> 1) feel no
correction. Centers and prototypes are constants under differentiation:
prototypes live outside the gradient path (EMA), centers are batch
statistics of non-anchor samples.

"Distance" here is cosine similarity: the similarity-to-prototype term sits
in the softmax numerator, where larger must mean closer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, NumericalError, ValidationError


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _to_torch(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def cosine_sim(a, b) -> float:
    """Cosine similarity of two vectors; errors on zero-norm input."""
    a = _to_numpy(a).astype(np.float64).ravel()
    b = _to_numpy(b).astype(np.float64).ravel()
    if a.shape != b.shape:
        raise ValidationError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity of a zero vector is undefined")
    return float(a @ b / (na * nb))


@dataclass
class BatchPartition:
    """Per-class confident/ambiguous index sets for one batch.

    Centers are raw feature means over the FN/FP sets (filled in by
    ambiguous_centers); rows of classes with empty sets are zero and flagged
    absent in has_fn/has_fp.
    """

    num_classes: int
    tp: tuple[tuple[int, ...], ...]
    fn: tuple[tuple[int, ...], ...]
    fp: tuple[tuple[int, ...], ...]
    mu_fn: torch.Tensor | None = None
    has_fn: torch.Tensor | None = None
    mu_fp: torch.Tensor | None = None
    has_fp: torch.Tensor | None = None

    def n_tp(self, k: int) -> int:
        return len(self.tp[k])

    def n_fn(self, k: int) -> int:
        return len(self.fn[k])

    def n_fp(self, k: int) -> int:
        return len(self.fp[k])

    def anchors(self) -> list[tuple[int, int]]:
        """(sample index, class) pairs of confident samples, in batch order."""
        pairs = [(i, k) for k in range(self.num_classes) for i in self.tp[k]]
        return sorted(pairs)


def partition_batch(probs, labels) -> BatchPartition:
    """Split a batch by argmax predictions vs labels (probs or logits)."""
    probs = _to_numpy(probs)
    labels = _to_numpy(labels).astype(np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValidationError(f"need a nonempty (N, K) matrix, got shape {probs.shape}")
    n, k = probs.shape
    if labels.shape != (n,):
        raise ValidationError("labels must have one entry per row")
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError("label out of range")
    preds = probs.argmax(axis=1)
    tp: list[list[int]] = [[] for _ in range(k)]
    fn: list[list[int]] = [[] for _ in range(k)]
    fp: list[list[int]] = [[] for _ in range(k)]
    for i in range(n):
        lab, pred = int(labels[i]), int(preds[i])
        if pred == lab:
            tp[lab].append(i)
        else:
            fn[lab].append(i)
            fp[pred].append(i)
    return BatchPartition(
        num_classes=k,
        tp=tuple(tuple(s) for s in tp),
        fn=tuple(tuple(s) for s in fn),
        fp=tuple(tuple(s) for s in fp),
    )


def ambiguous_centers(part: BatchPartition, feats) -> BatchPartition:
    """Fill in FN/FP centers as raw feature means (detached constants)."""
    feats_t = _to_torch(feats).detach()
    if feats_t.ndim != 2:
        raise ValidationError(f"features must be (N, D), got {tuple(feats_t.shape)}")
    k, d = part.num_classes, feats_t.shape[1]
    mu_fn = feats_t.new_zeros((k, d))
    mu_fp = feats_t.new_zeros((k, d))
    has_fn = torch.zeros(k, dtype=torch.bool)
    has_fp = torch.zeros(k, dtype=torch.bool)
    for cls in range(k):
        if part.fn[cls]:
            mu_fn[cls] = feats_t[list(part.fn[cls])].mean(dim=0)
            has_fn[cls] = True
        if part.fp[cls]:
            mu_fp[cls] = feats_t[list(part.fp[cls])].mean(dim=0)
            has_fp[cls] = True
    return dataclasses.replace(part, mu_fn=mu_fn, has_fn=has_fn, mu_fp=mu_fp, has_fp=has_fp)


def ema_combine(p_pre: torch.Tensor, tp_mean: torch.Tensor, rho: float) -> torch.Tensor:
    """Pre-normalization EMA step: (1 - rho) * tp_mean + rho * p_pre."""
    return (1.0 - rho) * tp_mean + rho * p_pre


class PrototypeBank:
    """K unit-norm class prototypes with EMA momentum rho."""

    def __init__(self, protos: torch.Tensor, rho: float = 0.9):
        protos = _to_torch(protos)
        if protos.ndim != 2:
            raise ValidationError(f"prototypes must be (K, D), got {tuple(protos.shape)}")
        if not 0.0 <= rho <= 1.0:
            raise ValidationError(f"rho must be in [0, 1], got {rho}")
        norms = protos.norm(dim=1)
        if (norms - 1.0).abs().max().item() > 1e-4:
            raise ValidationError("prototype rows must be unit-norm")
        self.protos = protos.detach().clone()
        self.rho = rho

    @classmethod
    def random_init(cls, num_classes: int, dim: int, rho: float = 0.9,
                    seed: int = 0, dtype=torch.float32) -> "PrototypeBank":
        gen = torch.Generator().manual_seed(seed)
        protos = torch.randn(num_classes, dim, generator=gen, dtype=dtype)
        return cls(F.normalize(protos, dim=1), rho=rho)

    @property
    def num_classes(self) -> int:
        return self.protos.shape[0]

    @property
    def dim(self) -> int:
        return self.protos.shape[1]

    def clone(self) -> "PrototypeBank":
        return PrototypeBank(self.protos.clone(), self.rho)

    @torch.no_grad()
    def update(self, part: BatchPartition, feats) -> None:
        """EMA-update each prototype from its class's normalized TP features.

        Classes with no TP samples in the batch are left untouched bitwise.
        The update rebinds a fresh tensor (never mutates rows in place), so
        a loss graph built from the pre-update prototypes stays valid.
        """
        feats_t = _to_torch(feats).detach().to(self.protos.dtype)
        norms = feats_t.norm(dim=1, keepdim=True)
        new_protos = self.protos.clone()
        for k in range(part.num_classes):
            idx = list(part.tp[k])
            if not idx:
                continue
            if (norms[idx] == 0).any():
                raise ValidationError(f"zero-norm TP feature for class {k}")
            mean_k = (feats_t[idx] / norms[idx]).mean(dim=0)
            combined = ema_combine(self.protos[k], mean_k, self.rho)
            norm = combined.norm()
            if norm == 0:
                raise NumericalError(f"degenerate prototype update for class {k}")
            new_protos[k] = combined / norm
        self.protos = new_protos

    def cosines_to(self, feats) -> torch.Tensor:
        """(N, K) cosine similarities of features to every prototype."""
        feats_t = _to_torch(feats)
        return F.normalize(feats_t, dim=1) @ self.protos.to(feats_t.dtype).t()

    def drift_from(self, initial: torch.Tensor) -> np.ndarray:
        """Per-class cosine similarity of current prototypes to `initial`."""
        cur = F.normalize(self.protos, dim=1)
        ref = F.normalize(_to_torch(initial).to(self.protos.dtype), dim=1)
        return (cur * ref).sum(dim=1).cpu().numpy()


def calibration_terms(part: BatchPartition, feats, i: int, k: int) -> tuple[float, float]:
    """(phi, varphi) for confident anchor i of class k.

    phi    = 1 - cos(F_i, mu_FN^k) when the class has FN samples, else 0;
    varphi = 1 + cos(F_i, mu_FP^k) when the class has FP samples, else 0.
    """
    if i not in part.tp[k]:
        raise ContractError(f"sample {i} is not a confident sample of class {k}")
    if part.mu_fn is None:
        part = ambiguous_centers(part, feats)
    feats_np = _to_numpy(feats)
    phi = 0.0
    varphi = 0.0
    if bool(part.has_fn[k]):
        phi = 1.0 - cosine_sim(feats_np[i], part.mu_fn[k])
    if bool(part.has_fp[k]):
        varphi = 1.0 + cosine_sim(feats_np[i], part.mu_fp[k])
    return phi, varphi


@dataclass
class AnchorTerms:
    index: int
    cls: int
    phi: float
    varphi: float
    term_penalty: float       # softmax term with the varphi correction
    term_compensation: float  # softmax term with the phi correction


def proto_loss(
    bank: PrototypeBank,
    part: BatchPartition,
    feats,
    probs,
    tau: float,
    return_details: bool = False,
):
    """Prototypical refinement loss, averaged over confident anchors.

    Differentiable w.r.t. feats and probs; prototypes and FN/FP centers are
    constants. Returns a scalar tensor (0 when the batch has no anchors), or
    (loss, [AnchorTerms]) with return_details.
    """
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    feats_t = _to_torch(feats)
    probs_t = _to_torch(probs)
    anchors = part.anchors()
    if not anchors:
        zero = feats_t.new_zeros(())
        return (zero, []) if return_details else zero

    if (feats_t.norm(dim=1) == 0).any():
        raise ValidationError("zero-norm feature row")
    if part.mu_fn is None:
        part = ambiguous_centers(part, feats_t)

    feats_n = F.normalize(feats_t, dim=1)
    sims = feats_n @ bank.protos.to(feats_t.dtype).t()  # (N, K) cosines

    idx = torch.tensor([i for i, _ in anchors], dtype=torch.long)
    cls = torch.tensor([k for _, k in anchors], dtype=torch.long)
    a = torch.arange(len(anchors))

    mu_fn_n = F.normalize(part.mu_fn.to(feats_t.dtype), dim=1)
    mu_fp_n = F.normalize(part.mu_fp.to(feats_t.dtype), dim=1)
    anchor_f = feats_n[idx]
    phi = torch.where(
        part.has_fn[cls], 1.0 - (anchor_f * mu_fn_n[cls]).sum(dim=1),
        feats_t.new_zeros(len(anchors)),
    )
    varphi = torch.where(
        part.has_fp[cls], 1.0 + (anchor_f * mu_fp_n[cls]).sum(dim=1),
        feats_t.new_zeros(len(anchors)),
    )

    p_anchor = probs_t[idx, cls]
    z = sims[idx] / tau  # (A, K)

    def corrected_term(correction: torch.Tensor) -> torch.Tensor:
        zc = z.clone()
        zc[a, cls] = z[a, cls] - (1.0 - p_anchor) * correction
        return -(zc[a, cls] - torch.logsumexp(zc, dim=1))

    term_pen = corrected_term(varphi)
    term_comp = corrected_term(phi)
    loss = (term_pen + term_comp).mean()
    if not torch.isfinite(loss):
        raise NumericalError("prototypical refinement loss is non-finite")

    if return_details:
        details = [
            AnchorTerms(
                index=int(idx[j]), cls=int(cls[j]),
                phi=float(phi[j]), varphi=float(varphi[j]),
                term_penalty=float(term_pen[j]), term_compensation=float(term_comp[j]),
            )
            for j in range(len(anchors))
        ]
        return loss, details
    return loss


@dataclass
class LossReport:
    loss_ce: float
    loss_pr: float
    loss_total: float
    alpha: float
    tau: float
    per_anchor: tuple[AnchorTerms, ...] = ()


def total_loss(
    loss_ce: float,
    loss_pr: float,
    alpha: float,
    tau: float = float("nan"),
    per_anchor: tuple[AnchorTerms, ...] = (),
) -> LossReport:
    """Combine the cross-entropy and refinement losses: total = ce + alpha * pr."""
    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}")
    if not (np.isfinite(loss_ce) and np.isfinite(loss_pr)):
        raise NumericalError("loss terms must be finite")
    return LossReport(
        loss_ce=float(loss_ce),
        loss_pr=float(loss_pr),
        loss_total=float(loss_ce) + alpha * float(loss_pr),
        alpha=float(alpha),
        tau=float(tau),
        per_anchor=per_anchor,
    )


__all__ = [
    "cosine_sim",
    "BatchPartition",
    "partition_batch",
    "ambiguous_centers",
    "ema_combine",
    "PrototypeBank",
    "calibration_terms",
    "AnchorTerms",
    "proto_loss",
    "LossReport",
    "total_loss",
]
