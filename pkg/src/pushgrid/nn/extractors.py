"""Occupancy-grid feature extractors.

All three map (patches, patch origins, object xy, target xy) to a 64-dim
feature per scene, so they are interchangeable inside the policy.

* ``attention``: per-patch embedding plus positional context, a softmax over
  per-patch scores, and the weighted sum of per-patch features.
* ``cnn``: three strided convolutions over the reassembled padded grid.
* ``mlp``: the attention pipeline up to the per-patch features, which are then
  concatenated and compressed by a wide MLP (no attention weights).
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from pushgrid import scene
from pushgrid.errors import InvalidInputError
from pushgrid.nn.core import DTYPE, HIDDEN_GAIN, MLP, init_linear

FEATURE_DIM = 64
CONTEXT_DIM = 4
PATCH_CELLS = scene.PATCH_SIZE ** 2
EMBED_SIZES = (192, 128)
ATTN_SIZES = (128, 100, 64)
CNN_CHANNELS = (16, 32, 12)
CNN_KERNEL = 5
CNN_STRIDE = 2
ABLATION_SIZES = (2048, 512, 64)

KINDS = ("attention", "cnn", "mlp")


def default_patch_grid(workspace: scene.Workspace = scene.Workspace()) -> tuple[int, int]:
    rows, cols = workspace.grid_shape(scene.RESOLUTION)
    p = scene.PATCH_SIZE
    return -(-rows // p), -(-cols // p)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _context(origins: torch.Tensor, obj_xy: torch.Tensor, tgt_xy: torch.Tensor) -> torch.Tensor:
    """(B, n, 4): object and target position relative to each patch origin."""
    return torch.cat([obj_xy[:, None, :] - origins[None], tgt_xy[:, None, :] - origins[None]], dim=-1)


def _context_mlp(mlp: MLP, emb: torch.Tensor, inverse: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
    """``mlp(concat(emb[inverse], ctx))`` with the embedding half of the first
    layer applied once per distinct patch."""
    first = mlp.layers[0]
    d = emb.shape[-1]
    pre = (emb @ first.weight[:, :d].T)[inverse].reshape(*ctx.shape[:-1], -1)
    x = torch.tanh(pre + ctx @ first.weight[:, d:].T + first.bias)
    n = len(mlp.layers)
    for i, layer in enumerate(mlp.layers[1:], start=1):
        x = layer(x)
        if i < n - 1 or mlp.activate_last:
            x = torch.tanh(x)
    return x


class PatchFeatures(nn.Module):
    """Shared front end: patch embedding, then a context-conditioned MLP."""

    def __init__(self):
        super().__init__()
        self.embed = MLP((PATCH_CELLS, *EMBED_SIZES))
        self.feature = MLP((EMBED_SIZES[-1] + CONTEXT_DIM, *ATTN_SIZES))

    def embed_patches(self, patches: torch.Tensor):
        """Embed the distinct rows of (B, n, 256) patches.

        Returns the (U, 128) embeddings and the (B * n,) index of each patch's
        row among them.
        """
        B, n, _ = patches.shape
        flat = patches.reshape(B * n, PATCH_CELLS)
        rows = flat.detach().cpu().numpy()
        first: dict[bytes, int] = {}
        inverse = np.array([first.setdefault(r.tobytes(), len(first)) for r in rows], dtype=np.int64)
        keep = np.zeros(len(first), dtype=np.int64)
        keep[inverse] = np.arange(len(rows))
        return self.embed(flat[torch.from_numpy(keep)]), torch.from_numpy(inverse)

    def forward(self, patches, origins, obj_xy, tgt_xy):
        emb, inverse = self.embed_patches(patches)
        parts = (emb, inverse, _context(origins, obj_xy, tgt_xy))
        return parts, _context_mlp(self.feature, *parts)


class AttentionExtractor(nn.Module):
    kind = "attention"

    def __init__(self):
        super().__init__()
        self.front = PatchFeatures()
        self.score = MLP((EMBED_SIZES[-1] + CONTEXT_DIM, *ATTN_SIZES))
        self.score_head = init_linear(nn.Linear(ATTN_SIZES[-1], 1, dtype=DTYPE), 1.0)

    def forward(self, patches, origins, obj_xy, tgt_xy, return_weights: bool = False):
        parts, f = self.front(patches, origins, obj_xy, tgt_xy)
        s = self.score_head(_context_mlp(self.score, *parts)).squeeze(-1)
        w = torch.softmax(s, dim=-1)
        out = torch.einsum("bn,bnf->bf", w, f)
        return (out, w) if return_weights else out


class CNNExtractor(nn.Module):
    kind = "cnn"

    def __init__(self, patch_grid: tuple[int, int] | None = None):
        super().__init__()
        self.patch_grid = tuple(patch_grid or default_patch_grid())
        p = scene.PATCH_SIZE
        h, w = self.patch_grid[0] * p, self.patch_grid[1] * p
        convs, cin = [], 1
        for cout in CNN_CHANNELS:
            convs.append(init_linear(nn.Conv2d(cin, cout, CNN_KERNEL, stride=CNN_STRIDE, dtype=DTYPE), HIDDEN_GAIN))
            h, w = (h - CNN_KERNEL) // CNN_STRIDE + 1, (w - CNN_KERNEL) // CNN_STRIDE + 1
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.flat_dim = cin * h * w
        self.out = init_linear(nn.Linear(self.flat_dim, FEATURE_DIM, dtype=DTYPE), HIDDEN_GAIN)

    def grid_from_patches(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, n, 256) row-major patches -> (B, 1, H, W) padded grid."""
        B = patches.shape[0]
        pr, pc = self.patch_grid
        p = scene.PATCH_SIZE
        if patches.shape[1] != pr * pc:
            raise InvalidInputError(f"expected {pr * pc} patches, got {patches.shape[1]}")
        g = patches.reshape(B, pr, pc, p, p).permute(0, 1, 3, 2, 4)
        return g.reshape(B, 1, pr * p, pc * p)

    def forward_grid(self, grid: torch.Tensor) -> torch.Tensor:
        x = grid
        for conv in self.convs:
            x = torch.tanh(conv(x))
        return torch.tanh(self.out(x.flatten(1)))

    def forward(self, patches, origins=None, obj_xy=None, tgt_xy=None):
        # Static scenes repeat one grid for a whole episode; convolve each once.
        uniq, inverse = torch.unique(patches.flatten(1), dim=0, return_inverse=True)
        if uniq.shape[0] == patches.shape[0]:
            return self.forward_grid(self.grid_from_patches(patches))
        feats = self.forward_grid(self.grid_from_patches(uniq.reshape(-1, *patches.shape[1:])))
        return feats[inverse]


class MLPAblationExtractor(nn.Module):
    kind = "mlp"

    def __init__(self, n_patches: int | None = None):
        super().__init__()
        if n_patches is None:
            pr, pc = default_patch_grid()
            n_patches = pr * pc
        self.n_patches = n_patches
        self.front = PatchFeatures()
        self.compress = MLP((n_patches * ATTN_SIZES[-1], *ABLATION_SIZES))

    @property
    def concat_dim(self) -> int:
        return self.n_patches * ATTN_SIZES[-1]

    def forward(self, patches, origins, obj_xy, tgt_xy):
        _, f = self.front(patches, origins, obj_xy, tgt_xy)
        return self.compress(f.flatten(1))


def make_extractor(kind: str) -> nn.Module:
    if kind == "attention":
        return AttentionExtractor()
    if kind == "cnn":
        return CNNExtractor()
    if kind == "mlp":
        return MLPAblationExtractor()
    raise InvalidInputError(f"unknown extractor {kind!r}; choose from {', '.join(KINDS)}")


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# Single-scene functional forms over scene.PatchSet / OccupancyGrid.


def _batch_inputs(patches: scene.PatchSet, object_pos, target_pos):
    return (
        _as_tensor(patches.patches)[None],
        _as_tensor(patches.origins),
        _as_tensor(object_pos)[None],
        _as_tensor(target_pos)[None],
    )


def attention_extract(model: AttentionExtractor, patches: scene.PatchSet, object_pos, target_pos,
                      return_weights: bool = False):
    out = model(*_batch_inputs(patches, object_pos, target_pos), return_weights=return_weights)
    if return_weights:
        return out[0][0], out[1][0]
    return out[0]


def cnn_extract(model: CNNExtractor, grid: scene.OccupancyGrid) -> torch.Tensor:
    pr, pc = model.patch_grid
    p = scene.PATCH_SIZE
    padded = np.zeros((pr * p, pc * p))
    padded[: grid.rows, : grid.cols] = grid.cells
    return model.forward_grid(_as_tensor(padded)[None, None])[0]


def mlp_ablation_extract(model: MLPAblationExtractor, patches: scene.PatchSet, object_pos, target_pos):
    return model(*_batch_inputs(patches, object_pos, target_pos))[0]
