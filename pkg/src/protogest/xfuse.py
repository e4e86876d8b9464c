"""Cross-modal fusion between the RGB and pose pathways.

The exchange runs in four steps on the stage-1 feature maps:

1. pool_project: each map is projected to a shared hidden channel width C'
   (the pose projection also strides time down to the RGB temporal length
   T'), then spatially max-pooled to a per-channel descriptor of shape
   (N, C', T').
2. channel_cross_attention: attention where the *channels* are the tokens
   (sequence length C', token dim T'). Queries come from one modality and,
   in the default "cross" wiring, keys/values come from the other, so
   channel statistics flow between streams. "self" keeps Q/K/V within a
   modality.
3. gate_modulate: the attended descriptor is averaged over time and mapped
   to per-channel gates g; the branch map becomes g * x + x (residual
   channel reweighting).
4. lateral_concat: each branch's modulated map is concatenated with a
   temporally resampled projection of the other branch's raw map (strided
   conv pose->rgb, transposed conv rgb->pose).

Gate and lateral layers are zero-initialized so a freshly attached fusion
block perturbs pretrained branches as little as possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ContractError, ValidationError


@dataclass
class FusionConfig:
    hidden_dim: int = 16             # C', shared channel width of the descriptors
    attention_source: str = "cross"  # {"cross", "self"}: where K/V come from
    gate_activation: str = "sigmoid"  # {"sigmoid", "identity"}
    lateral_channels: int = 16       # channels added by each lateral connection

    def validate(self) -> None:
        if self.hidden_dim < 1:
            raise ValidationError("hidden_dim must be >= 1")
        if self.attention_source not in ("cross", "self"):
            raise ValidationError(f"unknown attention_source {self.attention_source!r}")
        if self.gate_activation not in ("sigmoid", "identity"):
            raise ValidationError(f"unknown gate_activation {self.gate_activation!r}")
        if self.lateral_channels < 1:
            raise ValidationError("lateral_channels must be >= 1")


@dataclass
class FusionState:
    """All intermediates of one exchange, for tests and diagnostics."""

    in_rgb: torch.Tensor          # (N, C1, T1, H, W)
    in_pose: torch.Tensor         # (N, C2, T2, H, W)
    desc_rgb: torch.Tensor        # (N, C', T')
    desc_pose: torch.Tensor       # (N, C', T')
    attn_weights_rgb: torch.Tensor   # (N, C', C'), rows sum to 1
    attn_weights_pose: torch.Tensor  # (N, C', C')
    attn_rgb: torch.Tensor        # (N, C', T')
    attn_pose: torch.Tensor       # (N, C', T')
    mod_rgb: torch.Tensor         # (N, C1, T1, H, W), same shape as in_rgb
    mod_pose: torch.Tensor        # (N, C2, T2, H, W)
    out_rgb: torch.Tensor         # (N, C1 + lateral, T1, H, W)
    out_pose: torch.Tensor        # (N, C2 + lateral, T2, H, W)


class CrossModalFusion(nn.Module):
    """Channel-attention exchange between stage-1 RGB and pose features."""

    def __init__(
        self,
        cfg: FusionConfig,
        rgb_channels: int,
        pose_channels: int,
        rgb_t: int,
        stride_ratio: int,
    ):
        super().__init__()
        cfg.validate()
        if stride_ratio < 1:
            raise ValidationError("stride_ratio must be >= 1")
        self.cfg = cfg
        self.rgb_channels = rgb_channels
        self.pose_channels = pose_channels
        self.rgb_t = rgb_t  # T', the common descriptor length
        self.stride_ratio = stride_ratio
        c = cfg.hidden_dim

        self.proj_rgb = nn.Conv3d(rgb_channels, c, kernel_size=1)
        self.proj_pose = nn.Conv3d(
            pose_channels, c,
            kernel_size=(stride_ratio, 1, 1), stride=(stride_ratio, 1, 1),
        )
        self.q_rgb = nn.Linear(rgb_t, rgb_t)
        self.k_rgb = nn.Linear(rgb_t, rgb_t)
        self.v_rgb = nn.Linear(rgb_t, rgb_t)
        self.q_pose = nn.Linear(rgb_t, rgb_t)
        self.k_pose = nn.Linear(rgb_t, rgb_t)
        self.v_pose = nn.Linear(rgb_t, rgb_t)
        self.gate_rgb = nn.Linear(c, rgb_channels)
        self.gate_pose = nn.Linear(c, pose_channels)
        self.lateral_down = nn.Conv3d(
            pose_channels, cfg.lateral_channels,
            kernel_size=(stride_ratio, 1, 1), stride=(stride_ratio, 1, 1),
        )
        self.lateral_up = nn.ConvTranspose3d(
            rgb_channels, cfg.lateral_channels,
            kernel_size=(stride_ratio, 1, 1), stride=(stride_ratio, 1, 1),
        )
        for layer in (self.gate_rgb, self.gate_pose, self.lateral_down, self.lateral_up):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def _check_input(self, x: torch.Tensor, which: str) -> None:
        channels = self.rgb_channels if which == "rgb" else self.pose_channels
        t = self.rgb_t if which == "rgb" else self.rgb_t * self.stride_ratio
        if x.ndim != 5 or x.shape[1] != channels or x.shape[2] != t:
            raise ValidationError(
                f"{which} feature map has shape {tuple(x.shape)}, "
                f"expected (N, {channels}, {t}, H, W)"
            )

    def pool_project(self, x: torch.Tensor, which: str) -> torch.Tensor:
        """Project to C' channels at T' frames, spatial max-pool -> (N, C', T')."""
        self._check_input(x, which)
        proj = self.proj_rgb if which == "rgb" else self.proj_pose
        return proj(x).amax(dim=(3, 4))

    def channel_cross_attention(
        self, desc_rgb: torch.Tensor, desc_pose: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Attention over channel tokens.

        Returns (attn_rgb, attn_pose, weights_rgb, weights_pose); weights are
        the post-softmax (N, C', C') matrices with rows summing to 1.
        """
        if desc_rgb.shape != desc_pose.shape or desc_rgb.ndim != 3:
            raise ValidationError(
                f"descriptor shapes differ: {tuple(desc_rgb.shape)} vs {tuple(desc_pose.shape)}"
            )
        q_r, k_r, v_r = self.q_rgb(desc_rgb), self.k_rgb(desc_rgb), self.v_rgb(desc_rgb)
        q_p, k_p, v_p = self.q_pose(desc_pose), self.k_pose(desc_pose), self.v_pose(desc_pose)
        if self.cfg.attention_source == "cross":
            kv_for_rgb, kv_for_pose = (k_p, v_p), (k_r, v_r)
        else:
            kv_for_rgb, kv_for_pose = (k_r, v_r), (k_p, v_p)
        scale = 1.0 / math.sqrt(desc_rgb.shape[-1])
        w_r = torch.softmax(q_r @ kv_for_rgb[0].transpose(1, 2) * scale, dim=-1)
        w_p = torch.softmax(q_p @ kv_for_pose[0].transpose(1, 2) * scale, dim=-1)
        return w_r @ kv_for_rgb[1], w_p @ kv_for_pose[1], w_r, w_p

    def gate_modulate(self, attn: torch.Tensor, x: torch.Tensor, which: str) -> torch.Tensor:
        """Per-channel gates from the attended descriptor: g * x + x."""
        self._check_input(x, which)
        gate = self.gate_rgb if which == "rgb" else self.gate_pose
        g = gate(attn.mean(dim=2))
        if self.cfg.gate_activation == "sigmoid":
            g = torch.sigmoid(g)
        return g[:, :, None, None, None] * x + x

    def lateral_concat(
        self,
        in_rgb: torch.Tensor,
        in_pose: torch.Tensor,
        mod_rgb: torch.Tensor,
        mod_pose: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Concatenate each modulated map with the other branch's resampled map."""
        if in_pose.shape[2] != self.stride_ratio * in_rgb.shape[2]:
            raise ContractError(
                f"temporal contract violated: pose T {in_pose.shape[2]} != "
                f"{self.stride_ratio} * rgb T {in_rgb.shape[2]}"
            )
        down = self.lateral_down(in_pose)
        up = self.lateral_up(in_rgb)
        out_rgb = torch.cat([down, mod_rgb], dim=1)
        out_pose = torch.cat([up, mod_pose], dim=1)
        return out_rgb, out_pose

    def forward(self, in_rgb: torch.Tensor, in_pose: torch.Tensor) -> FusionState:
        desc_rgb = self.pool_project(in_rgb, "rgb")
        desc_pose = self.pool_project(in_pose, "pose")
        attn_rgb, attn_pose, w_rgb, w_pose = self.channel_cross_attention(desc_rgb, desc_pose)
        mod_rgb = self.gate_modulate(attn_rgb, in_rgb, "rgb")
        mod_pose = self.gate_modulate(attn_pose, in_pose, "pose")
        out_rgb, out_pose = self.lateral_concat(in_rgb, in_pose, mod_rgb, mod_pose)
        return FusionState(
            in_rgb=in_rgb, in_pose=in_pose,
            desc_rgb=desc_rgb, desc_pose=desc_pose,
            attn_weights_rgb=w_rgb, attn_weights_pose=w_pose,
            attn_rgb=attn_rgb, attn_pose=attn_pose,
            mod_rgb=mod_rgb, mod_pose=mod_pose,
            out_rgb=out_rgb, out_pose=out_pose,
        )

    def exchange(self, in_rgb: torch.Tensor, in_pose: torch.Tensor) -> FusionState:
        return self.forward(in_rgb, in_pose)


__all__ = ["FusionConfig", "FusionState", "CrossModalFusion"]
