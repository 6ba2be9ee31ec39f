import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

import vpr_extractor.cli as cli_mod
import vpr_extractor.extraction as extraction_mod
from vpr_extractor.models import MODEL_REGISTRY, ModelSpec

TINY = ModelSpec("tiny-vit", patch_size=16, depth=3, dim=8, hub_repo="", hub_name="")


class Attention(nn.Module):
    """Multi-head self-attention with the fused qkv projection layout."""

    def __init__(self, dim, heads):
        super().__init__()
        self.num_heads = heads
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        head_dim = d // self.num_heads
        qkv = (
            self.qkv(x)
            .reshape(b, n, 3, self.num_heads, head_dim)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * head_dim**-0.5
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim)
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TinyVit(nn.Module):
    """Same module paths as the real backbones: patch_embed, cls_token,
    blocks[i].attn.qkv, final norm; forward returns the CLS embedding."""

    MAX_TOKENS = 4097

    def __init__(self, patch=16, dim=8, heads=2, depth=3):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.randn(1, self.MAX_TOKENS, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        assert x.shape[1] <= self.MAX_TOKENS
        x = x + self.pos_embed[:, : x.shape[1]]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, 0]


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return TinyVit(TINY.patch_size, TINY.dim, 2, TINY.depth).eval()


@pytest.fixture
def registered_tiny(tiny_model, monkeypatch):
    """Puts tiny-vit in the registry and short-circuits weight loading."""
    monkeypatch.setitem(MODEL_REGISTRY, TINY.name, TINY)
    loader = lambda spec, device="cpu": tiny_model
    monkeypatch.setattr(extraction_mod, "load_backbone", loader)
    monkeypatch.setattr(cli_mod, "load_backbone", loader)
    return tiny_model


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def save_image(path, rng, width=64, height=48, array=None):
    if array is None:
        array = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    Image.fromarray(array, "RGB").save(path)
    return np.asarray(array)
