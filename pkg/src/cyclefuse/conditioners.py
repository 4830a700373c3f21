"""Condition-stream extractors: identity, expression deviation, landmarks.

All three share a small convolutional trunk that ends in a [d, 7, 7] feature
map (adaptive pooling makes the 7x7 stage resolution-independent), flattened
to 49 tokens of width d. GroupNorm everywhere: no batch statistics, so eval
and train modes compute identically and extraction is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

Tensor = torch.Tensor


def norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def _check_images(x: Tensor, resolution: int | None = None) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] images, got shape {tuple(x.shape)}")
    if resolution is not None and (x.shape[-1] != resolution or x.shape[-2] != resolution):
        raise ValueError(
            f"expected {resolution}x{resolution} input, got {x.shape[-2]}x{x.shape[-1]}"
        )


class ConvTrunk(nn.Module):
    """Strided conv encoder ending in a [out_channels, 7, 7] map."""

    def __init__(self, in_channels: int, width: int, out_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.GroupNorm(norm_groups(width), width),
            nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.GroupNorm(norm_groups(width * 2), width * 2),
            nn.SiLU(),
            nn.Conv2d(width * 2, out_channels, 3, padding=1),
            nn.GroupNorm(norm_groups(out_channels), out_channels),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d((7, 7)),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


def _tokens(fmap: Tensor) -> Tensor:
    """[B, d, 7, 7] -> [B, 49, d]."""
    return fmap.flatten(2).transpose(1, 2)


class IdentityEncoder(nn.Module):
    """Identity features: a pooled id vector plus 49 spatial tokens.

    The token matrix is the flattened 7x7 trunk map plus a learned positional
    table; the vector comes from a linear head on the pooled map. The two are
    returned separately: tokens feed the fusion stage, the vector rides the
    denoiser's timestep pathway.
    """

    def __init__(self, resolution: int, token_dim: int, width: int = 32):
        super().__init__()
        self.resolution = resolution
        self.token_dim = token_dim
        self.trunk = ConvTrunk(3, width, token_dim)
        self.pos_embed = nn.Parameter(torch.randn(49, token_dim) * 0.02)
        self.head = nn.Linear(token_dim, token_dim)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        _check_images(x, self.resolution)
        fmap = self.trunk(x)
        tokens = _tokens(fmap) + self.pos_embed
        vector = self.head(fmap.mean(dim=(2, 3)))
        return vector, tokens

    def embed(self, x: Tensor) -> Tensor:
        """Identity vector only (used as the consistency-loss embedding)."""
        return self.forward(x)[0]


class ExpressionEncoder(nn.Module):
    """Identity-invariant expression tokens via twin-trunk deviation.

    Two trunks of identical architecture encode the same image; their
    difference isolates expression, and a 1x1 channel-alignment convolution
    maps the deviation to the token width. The id trunk is meant to be frozen
    at identity-classifier weights after pretraining.
    """

    def __init__(self, resolution: int, token_dim: int, width: int = 32):
        super().__init__()
        self.resolution = resolution
        self.token_dim = token_dim
        self.face_trunk = ConvTrunk(3, width, token_dim)
        self.id_trunk = ConvTrunk(3, width, token_dim)
        self.align = nn.Conv2d(token_dim, token_dim, kernel_size=1)

    def deviation(self, x: Tensor) -> Tensor:
        """Pre-alignment deviation map [B, d, 7, 7]."""
        face = self.face_trunk(x)
        ident = self.id_trunk(x)
        if face.shape != ident.shape:
            raise ValueError(
                f"twin trunk outputs disagree: {tuple(face.shape)} vs {tuple(ident.shape)}"
            )
        return face - ident

    def forward(self, x: Tensor) -> Tensor:
        _check_images(x, self.resolution)
        return _tokens(self.align(self.deviation(x)))


class LandmarkNet(nn.Module):
    """Keypoint detector and landmark-feature trunk with shared weights.

    `detect` regresses num_points normalized (x, y) coordinates through a
    sigmoid, so outputs live in (0, 1) and stay differentiable with respect
    to the input image. `features` taps the trunk's last spatial stage as
    49 tokens, head removed.
    """

    def __init__(self, resolution: int, token_dim: int, num_points: int, width: int = 32):
        super().__init__()
        self.resolution = resolution
        self.token_dim = token_dim
        self.num_points = num_points
        self.trunk = ConvTrunk(3, width, token_dim)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(token_dim * 49, 256),
            nn.SiLU(),
            nn.Linear(256, num_points * 2),
        )

    def features(self, x: Tensor) -> Tensor:
        _check_images(x, self.resolution)
        return _tokens(self.trunk(x))

    def detect(self, x: Tensor) -> Tensor:
        _check_images(x, self.resolution)
        out = torch.sigmoid(self.head(self.trunk(x)))
        return out.view(-1, self.num_points, 2)


class EvalBackbone(nn.Module):
    """Embedding network for metric computation, with taps on each stage.

    `embed` yields one feature row per image; `layers` exposes the three
    intermediate activations for multi-layer perceptual distances.
    """

    def __init__(self, resolution: int, feature_dim: int = 64, width: int = 16):
        super().__init__()
        self.resolution = resolution
        self.feature_dim = feature_dim
        self.width = width

        def stage(c_in, c_out):
            return nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                nn.GroupNorm(norm_groups(c_out), c_out),
                nn.SiLU(),
            )

        self.stage1 = stage(3, width)
        self.stage2 = stage(width, width * 2)
        self.stage3 = stage(width * 2, width * 4)
        self.head = nn.Linear(width * 4, feature_dim)

    def layers(self, x: Tensor) -> list[Tensor]:
        _check_images(x, self.resolution)
        h1 = self.stage1(x)
        h2 = self.stage2(h1)
        h3 = self.stage3(h2)
        return [h1, h2, h3]

    def embed(self, x: Tensor) -> Tensor:
        h3 = self.layers(x)[-1]
        return self.head(h3.mean(dim=(2, 3)))

    def forward(self, x: Tensor) -> Tensor:
        return self.embed(x)


@dataclass
class ConditionBundle:
    """The three condition token sets plus the identity vector.

    All token matrices are [B, 49, d] with one shared d; `lm_tokens` is None
    when landmark conditioning is ablated.
    """

    id_vector: Tensor
    id_tokens: Tensor
    exp_tokens: Tensor
    lm_tokens: Tensor | None

    def validate(self) -> None:
        d = self.id_vector.shape[-1]
        sets = {"id": self.id_tokens, "exp": self.exp_tokens}
        if self.lm_tokens is not None:
            sets["lm"] = self.lm_tokens
        for name, tok in sets.items():
            if tok.ndim != 3 or tok.shape[1] != 49 or tok.shape[2] != d:
                raise ValueError(
                    f"{name}_tokens must be [B, 49, {d}], got {tuple(tok.shape)}"
                )
            if not torch.isfinite(tok).all():
                raise ValueError(f"{name}_tokens contain non-finite values")
        if not torch.isfinite(self.id_vector).all():
            raise ValueError("id_vector contains non-finite values")


def build_bundle(
    id_encoder: IdentityEncoder,
    exp_encoder: ExpressionEncoder,
    lm_net: LandmarkNet,
    x_id: Tensor,
    x0: Tensor,
    use_landmarks: bool = True,
) -> ConditionBundle:
    """Extract all condition streams: identity from x_id, the rest from x0."""
    id_vector, id_tokens = id_encoder(x_id)
    exp_tokens = exp_encoder(x0)
    lm_tokens = lm_net.features(x0) if use_landmarks else None
    return ConditionBundle(id_vector, id_tokens, exp_tokens, lm_tokens)
