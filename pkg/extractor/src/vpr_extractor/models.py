"""Known backbones and how to load their pretrained weights."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import torch

from .errors import WeightsError

log = logging.getLogger(__name__)

WEIGHTS_ENV = "VPR_WEIGHTS_DIR"


@dataclass(frozen=True)
class ModelSpec:
    """Static facts about one backbone needed before any weights load."""

    name: str
    patch_size: int
    depth: int
    dim: int
    hub_repo: str
    hub_name: str


MODEL_REGISTRY: dict[str, ModelSpec] = {
    spec.name: spec
    for spec in (
        ModelSpec("dino-vits8", 8, 12, 384, "facebookresearch/dino:main", "dino_vits8"),
        ModelSpec("dinov2-vits14", 14, 12, 384, "facebookresearch/dinov2", "dinov2_vits14"),
        ModelSpec("dinov2-vitb14", 14, 12, 768, "facebookresearch/dinov2", "dinov2_vitb14"),
        ModelSpec("dinov2-vitg14", 14, 40, 1536, "facebookresearch/dinov2", "dinov2_vitg14"),
    )
}


def load_backbone(spec: ModelSpec, device: str = "cpu") -> torch.nn.Module:
    """Fetch pretrained weights via torch.hub and return the eval-mode model.

    $VPR_WEIGHTS_DIR overrides the hub cache directory, so air-gapped runs
    can point at a pre-populated cache. Missing weights are fatal.
    """
    cache = os.environ.get(WEIGHTS_ENV)
    if cache:
        torch.hub.set_dir(cache)
        log.info("weights cache: %s", cache)
    try:
        model = torch.hub.load(spec.hub_repo, spec.hub_name, verbose=False)
    except Exception as e:  # hub raises many types; all mean "no weights"
        raise WeightsError(
            f"could not obtain weights for {spec.name} "
            f"({spec.hub_repo}/{spec.hub_name}): {e}"
        ) from e
    return model.to(device).eval()
