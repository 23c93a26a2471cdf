import pytest
import torch

from cdre.backbones import (
    CNN_DIMS,
    TRANSFORMER_DIMS,
    BackboneSpec,
    Downstream,
    backbone_forward,
    stage_shapes,
)
from cdre.config import RunConfig
from cdre.embedding import EmbeddingFeatureSet
from cdre.pipeline import Bundle


@pytest.mark.parametrize("family", ["cnn", "transformer"])
def test_stage_shapes_match_declared(family):
    torch.manual_seed(0)
    model = Downstream(BackboneSpec.default(family)).eval()
    feats, logits = backbone_forward(model, torch.rand(3, 64, 64))
    assert [tuple(f.shape) for f in feats] == stage_shapes(model.spec)
    assert tuple(logits.shape) == (10,)


def test_cnn_stage_shapes_literal():
    assert stage_shapes(BackboneSpec.default("cnn")) == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    assert stage_shapes(BackboneSpec.default("transformer")) == [(256, 24), (64, 48), (16, 96), (4, 192)]


@pytest.mark.parametrize("family", ["cnn", "transformer"])
def test_embedding_dims_audit(family):
    """Every stage's decoded distortion feature lines up with the stage output."""
    torch.manual_seed(0)
    b = Bundle.from_config(RunConfig().replace(**{"backbone.family": family})).eval()
    x = torch.rand(2, 3, 64, 64)
    _, _, _, dset = b.cdre(x, x)
    feats, _ = b.downstream(x)
    assert len(dset) == 4
    for f, d in zip(feats, dset.features):
        if family == "cnn":
            assert d.shape == f.shape
        else:
            assert d.shape[-1] == f.shape[-1]


def test_family_mismatch():
    model = Downstream(BackboneSpec.default("transformer"))
    emb = EmbeddingFeatureSet("cnn", [torch.zeros(16, 16, 16)])
    with pytest.raises(ValueError, match="does not match backbone family"):
        backbone_forward(model, torch.rand(3, 64, 64), emb, torch.nn.ModuleList())


def test_small_image_rejected():
    with pytest.raises(ValueError, match=">= 32"):
        backbone_forward(Downstream(BackboneSpec.default("cnn")), torch.rand(3, 16, 64))


def test_spec_validation():
    for dims in [(16, 32, 64), (32, 16, 64, 128), (0, 16, 32, 64)]:
        with pytest.raises(ValueError):
            BackboneSpec("cnn", dims)
    with pytest.raises(ValueError):
        BackboneSpec("rnn", CNN_DIMS)
    assert BackboneSpec.default("transformer").stage_dims == TRANSFORMER_DIMS
    assert BackboneSpec.default("cnn").stage_strides == (4, 8, 16, 32)


@pytest.mark.parametrize("family", ["cnn", "transformer"])
def test_identity_at_init_and_depth(family):
    torch.manual_seed(1)
    b = Bundle.from_config(RunConfig().replace(**{"backbone.family": family})).eval()
    x, xh = torch.rand(3, 3, 64, 64), torch.rand(3, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(b.cdre_logits(x, xh)[0], b.baseline_logits(xh))


def test_depth_limits_embedded_stages():
    torch.manual_seed(2)
    b = Bundle.from_config(RunConfig().replace(**{"cdre.embedding_depth": 1})).eval()
    for m in b.cdre.embed:
        torch.nn.init.normal_(m.proj.weight)
    x = torch.rand(1, 3, 64, 64)
    _, _, _, dset = b.cdre(x, x)
    assert len(dset) == 1
    seen = []

    def hook(i, f):
        seen.append(i)
        return f

    # stage 1 output changes, the rest run the plain stage on that input
    plain = b.downstream(x)[0]
    from cdre.backbones import embedding_hook

    emb = b.downstream(x, embedding_hook(dset, b.cdre.embed))[0]
    assert not torch.equal(emb[0], plain[0])
    b.downstream(x, hook)
    assert seen == [0, 1, 2, 3]


def test_forward_deterministic():
    torch.manual_seed(3)
    m = Downstream(BackboneSpec.default("transformer")).eval()
    x = torch.rand(2, 3, 64, 64)
    assert torch.equal(m(x)[1], m(x)[1])
