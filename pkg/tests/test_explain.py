import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist
from sklearn.metrics import silhouette_score
from torch import nn

from covidcxr.corpus import ImageRecord, Label, Source
from covidcxr.explain import (
    EmbeddingPoint, TooFewPoints, grad_cam, grad_cam_raw, penultimate_features, project_2d,
    read_points_csv, render_overlay, tsne, write_points_csv,
)
from covidcxr.model import NetworkConfig, build_network


class ToyNet(nn.Module):
    """One conv layer; class 0 scores the sum of channel 0, the rest are constants."""

    def __init__(self, offset=0.0):
        super().__init__()
        torch.manual_seed(0)
        self.conv = nn.Conv2d(3, 2, 3, padding=1).double()
        self.offset = offset

    def forward_features(self, x):
        return torch.relu(self.conv(x))

    def head(self, maps):
        s0 = maps[:, 0].sum(dim=(1, 2)) + self.offset
        const = torch.zeros_like(s0)
        return torch.stack([s0, const, const + 1.0], dim=1)

    def forward(self, x):
        return self.head(self.forward_features(x))


class FrozenHead(ToyNet):
    def __init__(self):
        super().__init__()
        self.bias = nn.Parameter(torch.tensor([0.3, -0.1, 2.0], dtype=torch.float64))

    def head(self, maps):
        return self.bias.expand(maps.shape[0], 3)


def toy_input(seed=0, size=12):
    return np.random.default_rng(seed).standard_normal((3, size, size))


def test_constant_head_gives_zero_map():
    for target in range(3):
        assert not grad_cam(FrozenHead(), toy_input(), target).any()
    # classes 1 and 2 of the toy ignore the maps entirely
    assert not grad_cam(ToyNet(), toy_input(), 2).any()


def test_single_channel_toy_matches_activation():
    net = ToyNet()
    x = toy_input(1)
    with torch.no_grad():
        a0 = net.forward_features(torch.as_tensor(x)[None])[0, 0].numpy()
    raw = grad_cam_raw(net, x, 0)
    assert np.allclose(raw, a0, rtol=1e-6, atol=0)
    heat = grad_cam(net, x, 0)
    expected = a0 / a0.max()
    nz = expected > 0
    assert np.all(np.abs(heat[nz] - expected[nz]) / expected[nz] < 1e-6)
    assert np.array_equal(heat == 0, ~nz)


def test_constant_on_logit_changes_nothing():
    x = toy_input(2)
    assert np.array_equal(grad_cam(ToyNet(), x, 0), grad_cam(ToyNet(offset=17.5), x, 0))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 2))
def test_heat_map_range_and_size(seed, target):
    net = build_network(NetworkConfig(backbone_channels=(4, 4), dense_sizes=(8, 6), input_size=32),
                        seed=seed % 7)
    x = np.random.default_rng(seed).standard_normal((3, 32, 32)).astype(np.float32)
    assert (grad_cam_raw(net, x, target) >= 0).all()
    heat = grad_cam(net, x, target)
    assert heat.shape == (32, 32)
    assert heat.min() >= 0 and (heat.max() == 1.0 or not heat.any())


def test_default_size_heat_map():
    net = build_network(seed=0)
    heat = grad_cam(net, np.zeros((3, 224, 224), np.float32), 2)
    assert heat.shape == (224, 224)


def test_overlay_is_rgb():
    gray = np.linspace(0, 1, 64 * 64).reshape(64, 64)
    rgb = render_overlay(gray, np.ones((16, 16)) * 0.5)
    assert rgb.shape == (64, 64, 3) and rgb.dtype == np.uint8


def test_penultimate_contract():
    cfg = NetworkConfig(backbone_channels=(4, 4), dense_sizes=(8, 6), input_size=16)
    net = build_network(cfg, seed=1)
    x = np.random.default_rng(0).standard_normal((3, 16, 16)).astype(np.float32)
    a, b = penultimate_features(net, x), penultimate_features(net, x)
    assert a.shape == (6,) and np.array_equal(a, b)
    for p in net.parameters():
        nn.init.zeros_(p)
    assert not penultimate_features(net, np.zeros((3, 16, 16), np.float32)).any()


# --- t-SNE -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def blobs():
    rng = np.random.default_rng(0)
    shift = np.zeros(50)
    shift[0] = 8.0
    X = np.vstack([rng.standard_normal((100, 50)), rng.standard_normal((100, 50)) + shift])
    return X, np.repeat([0, 1], 100)


@pytest.fixture(scope="module")
def blob_embedding(blobs):
    return tsne(blobs[0], perplexity=30, iterations=1000, seed=0)


def test_tsne_separates_blobs(blobs, blob_embedding):
    assert silhouette_score(blob_embedding.embedding, blobs[1]) >= 0.5


def test_tsne_kl_settles(blob_embedding):
    tail = np.diff(blob_embedding.kl_history[-50:])
    assert np.all(tail <= 0)


def test_tsne_permutation_equivariant(blobs, blob_embedding):
    perm = np.random.default_rng(3).permutation(200)
    again = tsne(blobs[0][perm], perplexity=30, iterations=1000, seed=0)
    assert np.array_equal(again.embedding, blob_embedding.embedding[perm])


def test_tsne_duplicates_stay_together():
    base = np.random.default_rng(1).standard_normal((60, 20))
    emb = tsne(np.vstack([base, base]), seed=1).embedding
    gap = np.linalg.norm(emb[:60] - emb[60:], axis=1)
    assert gap.max() <= np.percentile(pdist(emb), 5)


def test_tsne_small_inputs():
    assert np.array_equal(tsne(np.ones((1, 4))).embedding, np.zeros((1, 2)))
    with pytest.raises(TooFewPoints):
        tsne(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        tsne(np.ones((5, 2)), perplexity=1.5)
    res = tsne(np.random.default_rng(0).standard_normal((10, 3)), perplexity=30, iterations=50)
    assert res.perplexity == 3.0 and np.isfinite(res.embedding).all()


def test_tsne_seed_changes_layout():
    X = np.random.default_rng(4).standard_normal((30, 5))
    a = tsne(X, perplexity=5, iterations=300, seed=0).embedding
    assert np.array_equal(a, tsne(X, perplexity=5, iterations=300, seed=0).embedding)
    assert not np.array_equal(a, tsne(X, perplexity=5, iterations=300, seed=1).embedding)


def test_points_carry_metadata(tmp_path):
    X = np.random.default_rng(0).standard_normal((12, 4))
    recs = [ImageRecord(f"r{i}", "x.png", Label(i % 3), f"p{i}", Source.HM) for i in range(12)]
    pts = project_2d(X, recs, perplexity=3, iterations=100)
    assert pts[4].record_id == "r4" and pts[4].label == "Pneumonia" and pts[4].source == "HM"
    write_points_csv(pts, tmp_path / "p.csv")
    assert read_points_csv(tmp_path / "p.csv") == pts
    assert isinstance(project_2d(X, perplexity=3, iterations=10)[0], EmbeddingPoint)
