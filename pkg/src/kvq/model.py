"""The full quality model: trunk, final norm, dual heads, saliency ensemble."""

from typing import Dict, List, Mapping

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, init_backbone_params, subparams
from .errors import ConfigError
from .heads import (
    QualityMaps,
    aggregate_quality,
    block_significance,
    ensemble_saliency,
    init_ensemble_weights,
    init_head_params,
    saliency_head,
    texture_head,
)
from .tensor import Tensor


class KVQModel:
    """Parameters live in a flat ``{dotted.path: Tensor}`` dict."""

    def __init__(self, cfg: BackboneConfig, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: BackboneConfig, seed: int = 0, dtype=None) -> "KVQModel":
        dtype = dtype or T.get_default_dtype()
        rng = np.random.default_rng(seed)
        params = {f"backbone.{k}": v for k, v in init_backbone_params(cfg, rng, dtype).items()}
        c = cfg.channels[-1]
        params["head.norm.gamma"] = Tensor(np.ones(c), requires_grad=True, dtype=dtype)
        params["head.norm.beta"] = Tensor(np.zeros(c), requires_grad=True, dtype=dtype)
        for name in ("texture", "saliency"):
            for k, v in init_head_params(c, rng, dtype).items():
                params[f"{name}.{k}"] = v
        params["ensemble.weights"] = init_ensemble_weights(cfg.num_blocks, dtype)
        return cls(cfg, params)

    @property
    def dtype(self):
        return self.params["texture.weight"].dtype

    def parameter_names(self) -> List[str]:
        return sorted(self.params)

    def parameters(self) -> List[Tensor]:
        return [self.params[k] for k in self.parameter_names()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"checkpoint shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k] = Tensor(v, requires_grad=True, dtype=self.params[k].dtype)

    def features(self, video, clamp: bool = False):
        feats, bundles = backbone_forward(video, subparams(self.params, "backbone"), self.cfg, clamp=clamp)
        feats = T.layer_norm(feats, self.params["head.norm.gamma"], self.params["head.norm.beta"])
        return feats, bundles

    def texture_map(self, video, clamp: bool = False) -> Tensor:
        """Texture map only; the path used for independent per-patch evaluation."""
        feats, _ = self.features(video, clamp=clamp)
        return texture_head(feats, subparams(self.params, "texture"))

    def forward(self, video, clamp: bool = False) -> QualityMaps:
        feats, bundles = self.features(video, clamp=clamp)
        grid = feats.shape[1:4]
        texture = texture_head(feats, subparams(self.params, "texture"))
        logits = saliency_head(feats, subparams(self.params, "saliency"))
        significance = block_significance(bundles, grid)
        saliency = ensemble_saliency(logits, significance, self.params["ensemble.weights"])
        quality = aggregate_quality(saliency, texture)
        return QualityMaps(saliency, texture, quality, logits, significance, bundles)

    __call__ = forward
