import copy

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msvp import numcore as nc
from msvp.backbones import (BackboneSpec, BasicBlock, ViTSettings, build_backbone, count_params, unwrap,
                            wrap_with_msvp)
from msvp.prompt import FUSIONS, PromptScales, count_msvp_params, init_prompts

FAMILIES = ["cnn4", "resnet18_small", "vit_tiny"]
SMALL_VIT = ViTSettings(embed_dim=24, depth=2, heads=3)


def spec(family, c=1, res=28, vit=None):
    return BackboneSpec(family, c, res, 10, vit or ViTSettings())


@pytest.fixture(scope="module")
def models():
    return {(f, c): build_backbone(spec(f, c, 32 if c == 3 else 28)) for f in FAMILIES for c in (1, 3)}


# -- shapes and counts ------------------------------------------------------

@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("c,res", [(1, 28), (3, 32)])
def test_logit_shape(models, family, c, res):
    m = models[(family, c)].eval()
    with torch.no_grad():
        assert m(torch.randn(8 if family == "cnn4" else 2, c, res, res)).shape[1] == 10


def test_cnn4_spatial_trace():
    m = build_backbone(spec("cnn4"))
    sizes = []
    x = torch.randn(1, 1, 28, 28)
    m.eval()
    with torch.no_grad():
        for block in m.blocks:
            x = block(x)
            sizes.append(x.shape[-1])
    assert sizes == [14, 7, 3, 1]
    assert [b.conv.out_channels for b in m.blocks] == [32, 64, 128, 256]


def test_cnn4_count_is_exact_and_in_band():
    m = build_backbone(spec("cnn4", 3, 32))
    convs = sum(cin * cout * 9 + cout + 2 * cout for cin, cout in [(3, 32), (32, 64), (64, 128), (128, 256)])
    assert count_params(m) == convs + 2570
    assert 350_000 <= count_params(m) <= 1_500_000


def test_primitive_counts():
    assert count_params(torch.nn.Linear(256, 10)) == 2570
    assert count_params(torch.nn.Conv2d(3, 32, 3)) == 896


def test_resnet_count():
    n = count_params(build_backbone(spec("resnet18_small", 3, 32)))
    assert abs(n - 11.17e6) <= 0.1e6


def test_resnet_stem_keeps_resolution():
    m = build_backbone(spec("resnet18_small", 3, 32)).eval()
    with torch.no_grad():
        x = m.stem(torch.randn(1, 3, 32, 32))
    assert x.shape[-2:] == (32, 32)


def test_zero_branch_basic_block_is_identity():
    blk = BasicBlock(8, 8).eval()
    with torch.no_grad():
        for p in list(blk.conv1.parameters()) + list(blk.conv2.parameters()):
            p.zero_()
    x = torch.rand(2, 8, 6, 6)  # nonnegative so the final relu is transparent
    with torch.no_grad():
        assert torch.allclose(blk(x), x, atol=1e-6)


def test_vit_tokens_and_count():
    assert build_backbone(spec("vit_tiny", 1, 28)).n_tokens == 17
    m = build_backbone(spec("vit_tiny", 3, 32))
    assert m.n_tokens == 65
    assert 4.5e6 <= count_params(m) <= 6.0e6


def test_vit_validation():
    assert spec("vit_tiny", 1, 28, ViTSettings(patch=5)).validate()
    assert spec("vit_tiny", 1, 28, ViTSettings(embed_dim=100, heads=3)).validate()
    with pytest.raises(ValueError):
        build_backbone(spec("vit_tiny", 1, 28, ViTSettings(patch=5)))
    assert spec("mlp").validate()


# -- init -------------------------------------------------------------------

def test_init_rules():
    m = build_backbone(spec("vit_tiny", 3, 32, SMALL_VIT), seed=42)
    p = dict(m.named_parameters())
    assert torch.equal(p["norm.weight"], torch.ones(24))
    assert torch.equal(p["head.bias"], torch.zeros(10))
    bound = (6 / p["head.weight"].shape[1]) ** 0.5
    assert p["head.weight"].abs().max() <= bound
    assert abs(p["pos_embed"].std().item() - 0.02) < 0.005


def test_init_is_seeded():
    a = build_backbone(spec("cnn4"), seed=42).state_dict()
    b = build_backbone(spec("cnn4"), seed=42).state_dict()
    c = build_backbone(spec("cnn4"), seed=43).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["head.weight"], c["head.weight"])


def test_names_unique_and_stable():
    a = [n for n, _ in build_backbone(spec("resnet18_small")).named_parameters()]
    b = [n for n, _ in build_backbone(spec("resnet18_small")).named_parameters()]
    assert a == b and len(set(a)) == len(a)


# -- eval behaviour ---------------------------------------------------------

@pytest.mark.parametrize("family", FAMILIES)
def test_eval_deterministic(models, family):
    m = models[(family, 1)].eval()
    x = torch.randn(3, 1, 28, 28)
    with torch.no_grad():
        assert torch.equal(m(x), m(x))


@settings(max_examples=5, deadline=None)
@given(st.permutations(list(range(4))), st.sampled_from(["cnn4", "resnet18_small"]))
def test_batch_permutation_permutes_logits(perm, family):
    m = build_backbone(spec(family)).eval()
    x = torch.randn(4, 1, 28, 28, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.allclose(m(x[list(perm)]), m(x)[list(perm)], atol=1e-5)


def test_vit_single_token_attention_is_linear():
    d = 6
    x = torch.randn(2, 1, d, dtype=torch.float64)
    wqkv, bqkv = torch.randn(3 * d, d, dtype=torch.float64), torch.randn(3 * d, dtype=torch.float64)
    wo, bo = torch.randn(d, d, dtype=torch.float64), torch.randn(d, dtype=torch.float64)
    out = nc.multi_head_attention(x, wqkv, bqkv, wo, bo, 2)
    assert torch.allclose(out, (x @ wqkv[2 * d:].T + bqkv[2 * d:]) @ wo.T + bo)


# -- wrapping ---------------------------------------------------------------

@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("fusion", FUSIONS)
def test_wrapped_identity_and_registry_delta(models, family, fusion):
    base = models[(family, 3)]
    wrapped = wrap_with_msvp(copy.deepcopy(base), init_prompts(3, fusion=fusion, resolution=32))
    assert count_params(wrapped) - count_params(base) == count_msvp_params(3, PromptScales(), fusion)
    assert unwrap(wrapped) is not base and isinstance(unwrap(wrapped), type(base))
    names = [n for n, _ in wrapped.named_parameters()]
    assert all(n.startswith(("msvp.", "backbone.")) for n in names)
    x = torch.randn(2, 3, 32, 32)
    base.eval()
    wrapped.eval()
    with torch.no_grad():
        assert torch.equal(wrapped(x), base(x))
