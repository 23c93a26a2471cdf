"""End-to-end CDRE model assembly: encoder side, decoder side and downstream."""

from __future__ import annotations

from torch import nn

from .backbones import BackboneSpec, Downstream, embedding_hook
from .config import RunConfig
from .distortion import (
    DECODED_CHANNELS,
    CNNDistortionDecoder,
    DistortionEncoder,
    Modulation,
    TokenDistortionDecoder,
    binarize,
)
from .embedding import EmbeddingFeatureSet, build_embed, build_transform, check_depth
from .extractor import EXTRACTOR_CHANNELS, SensitiveExtractor

CDRE_GROUPS = ("extractor", "dist_enc", "modulation", "dist_dec", "transform", "embed")
DOWNSTREAM_GROUPS = ("backbone", "head")
GROUPS = CDRE_GROUPS + DOWNSTREAM_GROUPS
ENCODER_SIDE = ("extractor", "dist_enc", "modulation")


class CDRE(nn.Module):
    """Distortion extraction, compression and embedding modules for one backbone family."""

    def __init__(
        self,
        family="cnn",
        stage_dims=(16, 32, 64, 128),
        latent_channels=6,
        depth=4,
        multi_scale=True,
        modulation=True,
        heads=2,
    ):
        super().__init__()
        self.family = family
        self.stage_dims = tuple(stage_dims)
        self.depth = check_depth(depth)
        self.extractor = SensitiveExtractor(multi_scale=multi_scale)
        n_scales = len(self.extractor.blocks)
        self.dist_enc = DistortionEncoder(latent_channels)
        self.modulation = Modulation(
            EXTRACTOR_CHANNELS[:n_scales], mode="film" if modulation else "concat"
        )
        if family == "cnn":
            self.dist_dec = CNNDistortionDecoder(latent_channels, DECODED_CHANNELS)
        else:
            self.dist_dec = TokenDistortionDecoder(self.stage_dims[0], latent_channels)
        self.transform = build_transform(family, self.stage_dims, DECODED_CHANNELS)
        self.embed = build_embed(family, self.stage_dims, heads)

    def encode(self, x, x_hat):
        """Latent ``y`` plus the two extractor pyramids (for the regularizer)."""
        feats_o = self.extractor(x)
        feats_c = self.extractor(x_hat)
        y = self.dist_enc(x, x_hat, feats_o, feats_c, self.modulation)
        return y, feats_o, feats_c

    def decode(self, bits, source_h, source_w) -> EmbeddingFeatureSet:
        if self.family == "cnn":
            d0 = self.dist_dec(bits, source_h, source_w)
        else:
            d0 = self.dist_dec(bits)
        return EmbeddingFeatureSet(self.family, self.transform(d0, self.depth))

    def forward(self, x, x_hat):
        y, feats_o, feats_c = self.encode(x, x_hat)
        bits = binarize(y)
        return bits, feats_o, feats_c, self.decode(bits, x.shape[-2], x.shape[-1])


class Bundle(nn.Module):
    """Downstream model plus CDRE modules, addressable by parameter group."""

    def __init__(self, downstream: Downstream, cdre: CDRE):
        super().__init__()
        self.downstream = downstream
        self.cdre = cdre

    @classmethod
    def from_config(cls, cfg: RunConfig):
        dims = cfg.stage_dims()
        spec = BackboneSpec(cfg.backbone.family, dims)
        c = cfg.cdre
        return cls(
            Downstream(spec, image_size=cfg.dataset.image_size),
            CDRE(
                cfg.backbone.family,
                dims,
                latent_channels=c.latent_channels,
                depth=c.embedding_depth,
                multi_scale=c.multi_scale,
                modulation=c.modulation,
                heads=c.heads,
            ),
        )

    def group(self, name) -> nn.Module:
        if name in CDRE_GROUPS:
            return getattr(self.cdre, name)
        if name == "backbone":
            return self.downstream.backbone
        if name == "head":
            return self.downstream.head
        raise KeyError(f"unknown parameter group {name!r} (known: {', '.join(GROUPS)})")

    def baseline_logits(self, x_hat):
        return self.downstream(x_hat)[1]

    def cdre_logits(self, x, x_hat):
        """Logits on ``x_hat`` with distortion embedding; returns ``(logits, bits, feats_o, feats_c)``."""
        bits, feats_o, feats_c, dset = self.cdre(x, x_hat)
        _, logits = self.downstream(x_hat, embedding_hook(dset, self.cdre.embed))
        return logits, bits, feats_o, feats_c
