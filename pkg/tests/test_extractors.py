import numpy as np
import pytest
import torch

from pushgrid import scene
from pushgrid.nn import extractors as X
from pushgrid.scene import OccupancyGrid, Workspace

import gradcheck

D = torch.float64
WS = Workspace()
ORIGINS = torch.from_numpy(scene.patch_origins(WS, scene.RESOLUTION, WS.grid_shape()))


def random_inputs(gen, batch=2, n=63, density=0.3):
    patches = (torch.rand(batch, n, 256, generator=gen, dtype=D) < density).to(D)
    # Repeat some patches so the deduplicated embedding path is exercised.
    patches[:, : n // 3] = 0.0
    obj = torch.rand(batch, 2, generator=gen, dtype=D) * torch.tensor([0.7, 0.5], dtype=D)
    tgt = torch.rand(batch, 2, generator=gen, dtype=D) * torch.tensor([0.7, 0.5], dtype=D)
    return patches, obj, tgt


@pytest.fixture(scope="module")
def attention():
    torch.manual_seed(0)
    return X.AttentionExtractor()


@pytest.fixture(scope="module")
def ablation():
    torch.manual_seed(1)
    return X.MLPAblationExtractor()


# -- attention ---------------------------------------------------------------------------


def test_singleton_patch_weight_is_one(attention):
    cells = (np.random.default_rng(0).random((16, 16)) < 0.5).astype(np.uint8)
    ws = Workspace(16 * scene.RESOLUTION, 16 * scene.RESOLUTION)
    ps = scene.decompose_patches(OccupancyGrid(cells, scene.RESOLUTION, ws))
    out, w = X.attention_extract(attention, ps, (0.02, 0.03), (0.05, 0.01), return_weights=True)
    assert w.shape == (1,) and float(w.detach()[0]) == 1.0
    _, f = attention.front(torch.from_numpy(ps.patches).to(D)[None], torch.from_numpy(ps.origins),
                           torch.tensor([[0.02, 0.03]], dtype=D), torch.tensor([[0.05, 0.01]], dtype=D))
    assert torch.allclose(out, f[0, 0], atol=1e-15, rtol=0)


def test_weights_normalised_and_output_in_convex_hull(attention):
    gen = torch.Generator().manual_seed(2)
    for _ in range(20):
        patches, obj, tgt = random_inputs(gen, batch=3)
        out, w = attention(patches, ORIGINS, obj, tgt, return_weights=True)
        assert torch.all((w.sum(-1) - 1.0).abs() <= 1e-9)
        assert torch.all(w > 0)
        _, f = attention.front(patches, ORIGINS, obj, tgt)
        assert torch.all(out >= f.min(dim=1).values - 1e-15)
        assert torch.all(out <= f.max(dim=1).values + 1e-15)
        assert out.shape == (3, X.FEATURE_DIM)


def test_attention_permutation_invariant(attention):
    gen = torch.Generator().manual_seed(3)
    for _ in range(20):
        patches, obj, tgt = random_inputs(gen, batch=1)
        perm = torch.randperm(63, generator=gen)
        a = attention(patches, ORIGINS, obj, tgt)
        b = attention(patches[:, perm], ORIGINS[perm], obj, tgt)
        assert torch.max((a - b).abs()) <= 1e-12


def test_dedup_matches_naive_embedding(attention):
    gen = torch.Generator().manual_seed(4)
    patches, obj, tgt = random_inputs(gen, batch=2)
    emb, inverse = attention.front.embed_patches(patches)
    naive = attention.front.embed(patches.reshape(-1, 256))
    assert torch.allclose(emb[inverse], naive, atol=1e-14, rtol=0)
    ctx = torch.cat([obj[:, None] - ORIGINS[None], tgt[:, None] - ORIGINS[None]], dim=-1)
    full = attention.front.feature(torch.cat([naive.reshape(2, 63, -1), ctx], dim=-1))
    _, f = attention.front(patches, ORIGINS, obj, tgt)
    assert torch.allclose(f, full, atol=1e-13, rtol=0)


def test_attention_layer_sizes(attention):
    assert [l.out_features for l in attention.front.embed.layers] == [192, 128]
    assert [(l.in_features, l.out_features) for l in attention.front.feature.layers] == [(132, 128), (128, 100), (100, 64)]
    assert [(l.in_features, l.out_features) for l in attention.score.layers] == [(132, 128), (128, 100), (100, 64)]
    assert (attention.score_head.in_features, attention.score_head.out_features) == (64, 1)


# -- CNN -----------------------------------------------------------------------------------


def test_cnn_zero_grid_gives_zero_feature():
    cnn = X.CNNExtractor()
    out = X.cnn_extract(cnn, scene.rasterize([], WS))
    assert torch.equal(out, torch.zeros(64, dtype=D))


def test_cnn_grid_reassembly_matches_padded_grid():
    cnn = X.CNNExtractor()
    rng = np.random.default_rng(5)
    cells = (rng.random((100, 140)) < 0.2).astype(np.uint8)
    ps = scene.decompose_patches(OccupancyGrid(cells, scene.RESOLUTION, WS))
    g = cnn.grid_from_patches(torch.from_numpy(ps.patches).to(D)[None])[0, 0]
    assert g.shape == (112, 144)
    assert torch.equal(g[:100, :140], torch.from_numpy(cells).to(D))
    assert not g[100:].any() and not g[:, 140:].any()
    assert torch.allclose(cnn(torch.from_numpy(ps.patches).to(D)[None])[0], X.cnn_extract(
        cnn, OccupancyGrid(cells, scene.RESOLUTION, WS)), atol=1e-15, rtol=0)


def test_cnn_repeated_grids_match_plain_forward():
    cnn = X.CNNExtractor()
    gen = torch.Generator().manual_seed(10)
    patches, _, _ = random_inputs(gen, batch=3)
    rep = patches[[0, 1, 0, 2, 1, 0]]
    plain = cnn.forward_grid(cnn.grid_from_patches(rep))
    assert torch.allclose(cnn(rep), plain, atol=1e-14, rtol=0)


def test_cnn_capacity_close_to_attention(attention):
    a = X.parameter_count(attention)
    c = X.parameter_count(X.CNNExtractor())
    assert abs(c - a) <= 0.1 * a


# -- MLP ablation -------------------------------------------------------------------------


def test_ablation_concat_dim(ablation):
    assert ablation.concat_dim == 63 * 64 == 4032
    assert ablation.compress.layers[0].in_features == 4032
    assert [l.out_features for l in ablation.compress.layers] == [2048, 512, 64]


def test_ablation_zero_params_zero_output():
    m = X.MLPAblationExtractor(n_patches=63)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    patches, obj, tgt = random_inputs(torch.Generator().manual_seed(6))
    assert torch.equal(m(patches, ORIGINS, obj, tgt), torch.zeros(2, 64, dtype=D))


def test_ablation_is_permutation_sensitive(ablation):
    gen = torch.Generator().manual_seed(7)
    for _ in range(20):
        patches, obj, tgt = random_inputs(gen, batch=1)
        perm = torch.randperm(63, generator=gen)
        a = ablation(patches, ORIGINS, obj, tgt)
        b = ablation(patches[:, perm], ORIGINS[perm], obj, tgt)
        assert torch.max((a - b).abs()) > 1e-6


# -- gradients -------------------------------------------------------------------------------


def extractor_gradient_error(model, gen, instances=20, coords=6):
    worst = 0.0
    for _ in range(instances):
        gradcheck.random_reparameterize(model, gen)
        patches, obj, tgt = random_inputs(gen, batch=2)
        obj.requires_grad_(True)
        tgt.requires_grad_(True)
        r = gradcheck.projection((2, 64), gen)
        tensors = [obj, tgt, *model.parameters()]
        worst = max(worst, gradcheck.check(lambda: (model(patches, ORIGINS, obj, tgt) * r).sum(),
                                           tensors, coords=coords, gen=gen))
    return worst


@pytest.mark.parametrize("kind", X.KINDS)
def test_extractor_gradients(kind):
    torch.manual_seed(8)
    model = X.make_extractor(kind)
    # The acceptance suite runs the full 20 instances; a handful suffices here.
    assert extractor_gradient_error(model, torch.Generator().manual_seed(9), instances=5) < 1e-5


def test_unknown_extractor():
    from pushgrid.errors import InvalidInputError
    with pytest.raises(InvalidInputError):
        X.make_extractor("transformer")
