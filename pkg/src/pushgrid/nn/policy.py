"""Recurrent policy and value networks.

Each network is extractor -> [grid feature (64), state feature (64)] -> LSTM
(256) -> MLP (128) -> output.  The policy outputs 22 logits (11 per axis), the
value network one scalar; they share topology but not weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from pushgrid import scene
from pushgrid.env import N_BINS
from pushgrid.errors import InvalidInputError
from pushgrid.nn.core import DTYPE, MLP, POLICY_GAIN, VALUE_GAIN, CategoricalPair, make_lstm
from pushgrid.nn.extractors import FEATURE_DIM, make_extractor

LSTM_SIZE = 256
HEAD_SIZE = 128
STATE_FEATURES = 10


def encode_state(state: torch.Tensor, workspace: scene.Workspace = scene.Workspace()) -> torch.Tensor:
    """Map raw (..., 8) observations to the 10 inputs of the state MLP.

    Positions are centred on the workspace and scaled to [-1, 1]; headings
    become (cos, sin) so the wrap at +-pi is invisible to the network.
    """
    cx, cy = workspace.center
    hx, hy = workspace.width / 2.0, workspace.height / 2.0

    def xy(i):
        return [(state[..., i] - cx) / hx, (state[..., i + 1] - cy) / hy]

    cols = [
        *xy(0), torch.cos(state[..., 2]), torch.sin(state[..., 2]),
        *xy(3), torch.cos(state[..., 5]), torch.sin(state[..., 5]),
        *xy(6),
    ]
    return torch.stack(cols, dim=-1)


@dataclass
class ObsBatch:
    """Network input for B scenes: raw state (B, 8) and patches (B, n, 256)."""

    state: torch.Tensor
    patches: torch.Tensor

    @classmethod
    def from_numpy(cls, state: np.ndarray, patches: np.ndarray) -> ObsBatch:
        return cls(torch.from_numpy(np.ascontiguousarray(state, dtype=np.float64)),
                   torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float64)))

    @classmethod
    def from_vec(cls, obs) -> ObsBatch:
        return cls.from_numpy(obs.state, obs.patches)

    def __len__(self):
        return self.state.shape[0]


class PushNet(nn.Module):
    def __init__(self, extractor: str, out_dim: int, out_gain: float,
                 workspace: scene.Workspace = scene.Workspace()):
        super().__init__()
        self.extractor_kind = extractor
        self.workspace = workspace
        self.extractor = make_extractor(extractor)
        self.state_mlp = MLP((STATE_FEATURES, FEATURE_DIM))
        self.lstm = make_lstm(2 * FEATURE_DIM, LSTM_SIZE)
        self.head = MLP((LSTM_SIZE, HEAD_SIZE))
        self.out = MLP((HEAD_SIZE, out_dim), activate_last=False, out_gain=out_gain)
        origins = scene.patch_origins(workspace, scene.RESOLUTION, workspace.grid_shape(scene.RESOLUTION))
        self.register_buffer("origins", torch.from_numpy(origins).to(DTYPE), persistent=False)

    def features(self, obs: ObsBatch) -> torch.Tensor:
        """(B, 128) LSTM input."""
        s = obs.state
        g = self.extractor(obs.patches, self.origins, s[:, 0:2], s[:, 3:5])
        return torch.cat([g, self.state_mlp(encode_state(s, self.workspace))], dim=-1)

    def step(self, obs: ObsBatch, h: torch.Tensor, c: torch.Tensor):
        h, c = self.lstm(self.features(obs), (h, c))
        return self.out(self.head(h)), h, c

    def sequence(self, feats: torch.Tensor, starts: torch.Tensor, h: torch.Tensor, c: torch.Tensor):
        """Unroll over precomputed features (T, B, 128).

        ``starts[t]`` marks scenes whose episode begins at step t; their
        recurrent state is zeroed before that step.
        """
        outs = []
        for t in range(feats.shape[0]):
            keep = (~starts[t]).to(DTYPE)[:, None]
            h, c = self.lstm(feats[t], (h * keep, c * keep))
            outs.append(h)
        return self.out(self.head(torch.stack(outs)))


@dataclass
class RecurrentState:
    """LSTM (h, c) of the policy and value networks for B scenes."""

    tensor: torch.Tensor  # (B, 4, 256): policy h, policy c, value h, value c

    @classmethod
    def zeros(cls, n: int) -> RecurrentState:
        return cls(torch.zeros(n, 4, LSTM_SIZE, dtype=DTYPE))

    def parts(self):
        t = self.tensor
        return t[:, 0], t[:, 1], t[:, 2], t[:, 3]

    def reset(self, mask) -> RecurrentState:
        """Zero the scenes where ``mask`` is true."""
        keep = torch.as_tensor(~np.asarray(mask, dtype=bool)).to(DTYPE)[:, None, None]
        return RecurrentState(self.tensor * keep)

    def select(self, idx) -> RecurrentState:
        return RecurrentState(self.tensor[idx])

    def __len__(self):
        return self.tensor.shape[0]


class ActorCritic(nn.Module):
    def __init__(self, extractor: str = "attention", workspace: scene.Workspace = scene.Workspace()):
        super().__init__()
        self.extractor_kind = extractor
        self.policy = PushNet(extractor, 2 * N_BINS, POLICY_GAIN, workspace)
        self.value = PushNet(extractor, 1, VALUE_GAIN, workspace)

    def step(self, obs: ObsBatch, state: RecurrentState):
        """One control step: ``(dist, value (B,), next_state)``."""
        ph, pc, vh, vc = state.parts()
        logits, ph, pc = self.policy.step(obs, ph, pc)
        v, vh, vc = self.value.step(obs, vh, vc)
        return CategoricalPair(logits), v.squeeze(-1), RecurrentState(torch.stack([ph, pc, vh, vc], dim=1))

    def value_only(self, obs: ObsBatch, state: RecurrentState) -> torch.Tensor:
        _, _, vh, vc = state.parts()
        v, _, _ = self.value.step(obs, vh, vc)
        return v.squeeze(-1)

    def evaluate_sequence(self, obs: ObsBatch, starts: torch.Tensor, init: RecurrentState, T: int):
        """Replay a (T, B) rollout slice with stored initial states.

        ``obs`` is flattened time-major (T * B rows).  Returns logits-based
        distribution (T, B, 22) and values (T, B).
        """
        B = len(init)
        if len(obs) != T * B:
            raise InvalidInputError(f"expected {T * B} observations, got {len(obs)}")
        ph, pc, vh, vc = init.parts()
        pf = self.policy.features(obs).reshape(T, B, -1)
        vf = self.value.features(obs).reshape(T, B, -1)
        logits = self.policy.sequence(pf, starts, ph, pc)
        values = self.value.sequence(vf, starts, vh, vc).squeeze(-1)
        return CategoricalPair(logits), values


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
