"""Full network assembly: encoder, prediction head, identity classifier.

``DipModel.forward`` maps a batch of images to per-image part features,
predicted positions/weightings, and constructed implicit positions. With
``M == 0`` the model degrades to the global-feature baseline: retrieval and
the triplet loss then use the [CLS] feature with Euclidean distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import head as hd
from . import positions as pos
from .autodiff import Tensor
from .encoder import PatchConfig, _trunc_normal


@dataclass
class BatchOutput:
    """Everything the losses and the retrieval extractor consume."""

    f_cls: Tensor          # (B, D)
    patch_features: Tensor  # (B, N_H, N_W, D)
    dip_features: Tensor   # (B, M, D)
    pred_positions: Tensor  # (B, M, 2)
    pred_weights: Tensor   # (B, M)
    impl_positions: Tensor  # (B, M, 2), differentiable
    score_maps: Tensor     # (B, M, N)


class DipModel:
    """Parameter container plus the batched forward pass."""

    def __init__(self, config: PatchConfig, num_classes, seed=0, params=None):
        self.config = config
        self.num_classes = num_classes
        if params is None:
            rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD1F)))
            params = enc.init_encoder_params(config, rng)
            if config.M > 0:
                params.update(hd.init_head_params(config.D, rng))
            params["cls_w"] = Tensor(
                _trunc_normal(rng, (config.D, num_classes)), requires_grad=True
            )
            params["cls_b"] = Tensor(np.zeros(num_classes), requires_grad=True)
        self.params = params

    def parameter_names(self):
        return sorted(self.params)

    def forward(self, images, rng=None):
        """(B, H, W, C) images in [0, 1] -> :class:`BatchOutput`."""
        cfg = self.config
        arr = np.ascontiguousarray(images, dtype=ad.default_dtype())
        patches = Tensor(enc.patchify_batch(arr, cfg))
        tokens = enc.embed_batch(patches, self.params, cfg)
        f_cls, patch_feats, dips = enc.encode_batch(tokens, self.params, cfg, rng=rng)
        B = arr.shape[0]
        if cfg.M == 0:
            empty2 = Tensor(np.zeros((B, 0, 2), dtype=f_cls.dtype))
            return BatchOutput(
                f_cls=f_cls,
                patch_features=patch_feats,
                dip_features=dips,
                pred_positions=empty2,
                pred_weights=Tensor(np.zeros((B, 0), dtype=f_cls.dtype)),
                impl_positions=empty2,
                score_maps=Tensor(np.zeros((B, 0, cfg.n_patches), dtype=f_cls.dtype)),
            )
        pred_pos, pred_w = hd.predict_batch(dips, self.params)
        impl_pos, maps = pos.implicit_positions_batch(dips, patch_feats)
        return BatchOutput(
            f_cls=f_cls,
            patch_features=patch_feats,
            dip_features=dips,
            pred_positions=pred_pos,
            pred_weights=pred_w,
            impl_positions=impl_pos,
            score_maps=maps,
        )
