"""Layers, initialisation and the two-axis categorical action head.

Everything runs in float64; see :data:`DTYPE`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from pushgrid.env import N_BINS, Action
from pushgrid.errors import InvalidInputError

DTYPE = torch.float64
HIDDEN_GAIN = math.sqrt(2.0)
POLICY_GAIN = 0.01
VALUE_GAIN = 1.0


def init_linear(layer: nn.Module, gain: float) -> nn.Module:
    """Orthogonal weights with the given gain, zero biases."""
    w = layer.weight
    nn.init.orthogonal_(w.view(w.shape[0], -1), gain=gain)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class MLP(nn.Module):
    """Stack of affine layers with tanh between them.

    ``activate_last`` also applies tanh to the output layer, which is what the
    feature extractors want; heads leave it linear.
    """

    def __init__(self, sizes: Sequence[int], activate_last: bool = True, out_gain: float = HIDDEN_GAIN):
        super().__init__()
        if len(sizes) < 2:
            raise InvalidInputError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.activate_last = activate_last
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(init_linear(nn.Linear(a, b, dtype=DTYPE), out_gain if last else HIDDEN_GAIN))
        self.layers = nn.ModuleList(layers)

    @property
    def in_features(self) -> int:
        return self.sizes[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1 or self.activate_last:
                x = torch.tanh(x)
        return x


def mlp_forward(mlp: MLP, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != mlp.in_features:
        raise InvalidInputError(f"MLP expects {mlp.in_features} input features, got {x.shape[-1]}")
    return mlp(x)


def make_lstm(input_size: int, hidden_size: int) -> nn.LSTMCell:
    cell = nn.LSTMCell(input_size, hidden_size, dtype=DTYPE)
    for name, p in cell.named_parameters():
        if name.startswith("weight"):
            # Gate blocks are initialised independently.
            for block in p.data.chunk(4, dim=0):
                nn.init.orthogonal_(block, gain=1.0)
        else:
            nn.init.zeros_(p)
    return cell


def lstm_step(cell: nn.LSTMCell, x: torch.Tensor, state: tuple[torch.Tensor, torch.Tensor]):
    """One LSTM step; returns ``(output, (h, c))`` where output is ``h``."""
    h, c = state
    if x.shape[-1] != cell.input_size:
        raise InvalidInputError(f"LSTM expects {cell.input_size} input features, got {x.shape[-1]}")
    if h.shape[-1] != cell.hidden_size or c.shape != h.shape or h.shape[:-1] != x.shape[:-1]:
        raise InvalidInputError("LSTM state does not match the input batch or hidden size")
    h, c = cell(x, (h, c))
    return h, (h, c)


# -- categorical pair -------------------------------------------------------------


@dataclass
class CategoricalPair:
    """Two independent categoricals over the x and y velocity bins."""

    logits: torch.Tensor  # (..., 2 * N_BINS)

    def __post_init__(self):
        if self.logits.shape[-1] != 2 * N_BINS:
            raise InvalidInputError(f"expected {2 * N_BINS} logits, got {self.logits.shape[-1]}")

    @classmethod
    def from_heads(cls, logits_x, logits_y) -> CategoricalPair:
        lx = torch.as_tensor(logits_x, dtype=DTYPE)
        ly = torch.as_tensor(logits_y, dtype=DTYPE)
        return cls(torch.cat([lx, ly], dim=-1))

    @property
    def logits_x(self) -> torch.Tensor:
        return self.logits[..., :N_BINS]

    @property
    def logits_y(self) -> torch.Tensor:
        return self.logits[..., N_BINS:]

    def log_probs(self) -> torch.Tensor:
        """Per-axis log-probabilities, shape (..., 2, N_BINS)."""
        heads = self.logits.reshape(*self.logits.shape[:-1], 2, N_BINS)
        return torch.log_softmax(heads, dim=-1)

    def probs(self) -> torch.Tensor:
        return self.log_probs().exp()


def log_prob(dist: CategoricalPair, actions) -> torch.Tensor:
    """Joint log-probability log p(bin_x) + log p(bin_y); actions (..., 2) int."""
    a = torch.as_tensor(np.asarray(actions), dtype=torch.long)
    lp = dist.log_probs()
    if a.shape != lp.shape[:-1]:
        raise InvalidInputError(f"actions of shape {tuple(a.shape)} do not match {tuple(lp.shape[:-1])}")
    return lp.gather(-1, a.unsqueeze(-1)).squeeze(-1).sum(-1)


def entropy(dist: CategoricalPair) -> torch.Tensor:
    lp = dist.log_probs()
    return -(lp.exp() * lp).sum(dim=(-1, -2))


def mode(dist: CategoricalPair) -> np.ndarray:
    """Per-axis argmax; ties go to the lowest bin."""
    lp = dist.log_probs().detach().cpu().numpy()
    return np.argmax(lp, axis=-1)


def sample_bins(dist: CategoricalPair, rng: np.random.Generator) -> np.ndarray:
    """Independent draws per axis by inverse-CDF sampling; returns (..., 2) int64."""
    p = dist.probs().detach().cpu().numpy()
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1] + (1,)) * cdf[..., -1:]
    bins = np.sum(cdf <= u, axis=-1)
    return np.minimum(bins, N_BINS - 1).astype(np.int64)


def sample_action(dist: CategoricalPair, rng: np.random.Generator):
    """Draw one action from an unbatched pair: ``(Action, log_prob)``."""
    if dist.logits.dim() != 1:
        raise InvalidInputError("sample_action takes a single distribution; use sample_bins for batches")
    bins = sample_bins(dist, rng)
    return Action(int(bins[0]), int(bins[1])), float(log_prob(dist, bins))


def joint_log_probs(dist: CategoricalPair) -> torch.Tensor:
    """(..., N_BINS, N_BINS) table of log p(x) + log p(y)."""
    lp = dist.log_probs()
    return lp[..., 0, :, None] + lp[..., 1, None, :]
