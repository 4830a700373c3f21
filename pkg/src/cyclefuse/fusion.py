"""Cyclic cross-attention exchange over the condition token sets.

Each token set is projected into per-head query/key/value spaces; then each
set's queries attend over the *next* set's keys/values in a fixed cycle
(id -> exp -> lm -> id; with landmarks ablated, id -> exp -> id). The attended
blocks are re-projected to the token width and concatenated in cycle order.

Disabling the module degenerates to a raw concatenation of the token sets
with no attention (the fusion ablation contract); the toggle lives in this
one code path.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .conditioners import ConditionBundle

Tensor = torch.Tensor


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic attention matrix Softmax(q k^T / sqrt(d_k)).

    The softmax runs over the key axis; logits are max-subtracted per row
    before exponentiation for numerical stability.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"query dim {q.shape[-1]} != key dim {k.shape[-1]}"
        )
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    logits = logits - logits.amax(dim=-1, keepdim=True)
    return torch.softmax(logits, dim=-1)


def cross_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Attend q over (k, v): Softmax(q k^T / sqrt(d_k)) v.

    Accepts any leading batch/head axes; q is [..., n, d_k] and k, v are
    [..., m, d_k] / [..., m, d_v] with matching m.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"key count {k.shape[-2]} != value count {v.shape[-2]}"
        )
    return attention_weights(q, k) @ v


class QKVProjector(nn.Module):
    """Bias-free linear maps into per-head query/key/value spaces.

    Each head owns a distinct d x d_k slice of the projection matrices;
    head_count must divide the token dim exactly.
    """

    def __init__(self, dim: int, head_count: int):
        super().__init__()
        if dim % head_count != 0:
            raise ValueError(f"head_count {head_count} must divide token dim {dim}")
        self.dim = dim
        self.head_count = head_count
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.view(b, n, self.head_count, d // self.head_count).transpose(1, 2)

    def forward(self, tokens: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """[B, n, d] -> (q, k, v), each [B, head_count, n, d/head_count]."""
        if tokens.ndim == 2:
            tokens = tokens.unsqueeze(0)
        return (
            self._split(self.q(tokens)),
            self._split(self.k(tokens)),
            self._split(self.v(tokens)),
        )


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dk)


class CrossFusion(nn.Module):
    """Cyclic exchange producing the fused conditioning sequence.

    Output is [B, 49 * n_sets, d]: the attended blocks in fixed cycle order
    (id-attended, exp-attended, lm-attended). With `enabled=False` the raw
    token sets are concatenated instead, same order, no attention.
    """

    def __init__(
        self,
        dim: int,
        head_count: int,
        *,
        enabled: bool = True,
        use_landmarks: bool = True,
    ):
        super().__init__()
        self.dim = dim
        self.head_count = head_count
        self.enabled = enabled
        self.sets = ("id", "exp", "lm") if use_landmarks else ("id", "exp")
        self.proj = nn.ModuleDict(
            {name: QKVProjector(dim, head_count) for name in self.sets}
        )
        self.out = nn.ModuleDict(
            {name: nn.Linear(dim, dim, bias=False) for name in self.sets}
        )

    def _gather(self, bundle: ConditionBundle) -> list[Tensor]:
        tokens = [bundle.id_tokens, bundle.exp_tokens]
        if "lm" in self.sets:
            if bundle.lm_tokens is None:
                raise ValueError("bundle has no lm_tokens but fusion expects them")
            tokens.append(bundle.lm_tokens)
        return tokens

    def forward(self, bundle: ConditionBundle) -> Tensor:
        bundle.validate()
        tokens = self._gather(bundle)
        if not self.enabled:
            return torch.cat(tokens, dim=1)
        qkv = {name: self.proj[name](tok) for name, tok in zip(self.sets, tokens)}
        blocks = []
        for i, name in enumerate(self.sets):
            peer = self.sets[(i + 1) % len(self.sets)]
            q = qkv[name][0]
            _, k, v = qkv[peer]
            attended = _merge_heads(cross_attention(q, k, v))
            blocks.append(self.out[name](attended))
        return torch.cat(blocks, dim=1)
