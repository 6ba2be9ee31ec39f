"""Intermediate-layer facet capture and the two export operations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import formats
from .errors import ConfigError
from .models import MODEL_REGISTRY, ModelSpec, load_backbone

log = logging.getLogger(__name__)

FACETS = ("query", "key", "value", "token")
DEFAULT_SHORT_SIDE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ExtractConfig:
    """What to pull out of which backbone, and how images are sized.

    `resize` forces an exact (height, width); when None the shorter side is
    scaled to 224 and both sides center-cropped down to patch multiples.
    """

    model: str
    layer: int = 31
    facet: str = "value"
    resize: tuple[int, int] | None = None
    device: str = "cpu"
    batch_size: int = 8
    discard_cls: bool = True

    def __post_init__(self):
        if self.model not in MODEL_REGISTRY:
            known = ", ".join(sorted(MODEL_REGISTRY))
            raise ConfigError(f"unknown model {self.model!r}, expected one of {known}")
        spec = self.spec
        if self.layer < 0 or self.layer >= spec.depth:
            raise ConfigError(
                f"layer {self.layer} out of range for {self.model} "
                f"(depth {spec.depth})"
            )
        if self.facet not in FACETS:
            raise ConfigError(f"facet must be one of {FACETS}, got {self.facet!r}")
        if self.resize is not None:
            h, w = self.resize
            if h < spec.patch_size or w < spec.patch_size:
                raise ConfigError(f"resize {h}x{w} smaller than one patch")
            if h % spec.patch_size or w % spec.patch_size:
                raise ConfigError(
                    f"resize {h}x{w} not a multiple of patch size {spec.patch_size}"
                )
        if not self.discard_cls:
            raise ConfigError("the CLS token is always discarded from feature maps")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def spec(self) -> ModelSpec:
        return MODEL_REGISTRY[self.model]


def preprocess(image: Image.Image, patch_size: int, resize: tuple[int, int] | None) -> torch.Tensor:
    """Decode to a normalized float tensor whose sides are patch multiples."""
    image = image.convert("RGB")
    if resize is not None:
        target_h, target_w = resize
        image = image.resize((target_w, target_h), Image.BICUBIC)
    else:
        w, h = image.size
        scale = DEFAULT_SHORT_SIDE / min(w, h)
        w, h = max(1, round(w * scale)), max(1, round(h * scale))
        image = image.resize((w, h), Image.BICUBIC)
        crop_h = (h // patch_size) * patch_size
        crop_w = (w // patch_size) * patch_size
        top, left = (h - crop_h) // 2, (w - crop_w) // 2
        image = image.crop((left, top, left + crop_w, top + crop_h))
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN)) / np.asarray(IMAGENET_STD)
    return torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)


class FacetCapture:
    """Forward hook on one block capturing one activation family.

    query/key/value are the fused qkv projection's three equal chunks (each
    already the concatenation of all heads); token is the block's output.
    """

    def __init__(self, model: torch.nn.Module, layer: int, facet: str):
        blocks = getattr(model, "blocks", None)
        if blocks is None:
            raise ConfigError("model has no .blocks; not a supported ViT")
        if layer >= len(blocks):
            raise ConfigError(f"layer {layer} out of range, model has {len(blocks)}")
        self.facet = facet
        self.grabbed: torch.Tensor | None = None
        if facet == "token":
            target = blocks[layer]
        else:
            attn = getattr(blocks[layer], "attn", None)
            if attn is None or not hasattr(attn, "qkv"):
                raise ConfigError("block has no fused attn.qkv projection")
            target = attn.qkv
        self._handle = target.register_forward_hook(self._hook)

    def _hook(self, module, args, output):
        out = output[0] if isinstance(output, tuple) else output
        if self.facet != "token":
            dim = out.shape[-1] // 3
            idx = ("query", "key", "value").index(self.facet)
            out = out[..., idx * dim : (idx + 1) * dim]
        self.grabbed = out.detach().to("cpu", torch.float32)

    def take(self) -> torch.Tensor:
        if self.grabbed is None:
            raise ConfigError("hooked layer never ran; wrong layer index?")
        out, self.grabbed = self.grabbed, None
        return out

    def close(self) -> None:
        self._handle.remove()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _special_token_count(model: torch.nn.Module) -> int:
    # CLS plus any register tokens (present on some newer checkpoints)
    return 1 + int(getattr(model, "num_register_tokens", 0) or 0)


def tokens_to_grid(
    tokens: torch.Tensor, grid_h: int, grid_w: int, n_special: int
) -> np.ndarray:
    """Drop the special tokens and lay patches out row-major as (h, w, d)."""
    n_patches = tokens.shape[1] - n_special
    if n_patches != grid_h * grid_w:
        raise ConfigError(
            f"{n_patches} patch tokens do not fill a {grid_h}x{grid_w} grid"
        )
    kept = tokens[:, n_special:, :]
    return kept.reshape(tokens.shape[0], grid_h, grid_w, -1).numpy()


@dataclass
class ExtractReport:
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.skipped


def _load_images(
    paths: list[Path], patch: int, resize: tuple[int, int] | None
) -> tuple[list[tuple[str, torch.Tensor]], list[str]]:
    ids = [p.stem for p in paths]
    dupes = {i for i in ids if ids.count(i) > 1}
    if dupes:
        raise ConfigError(f"duplicate image ids from file stems: {sorted(dupes)}")
    loaded, skipped = [], []
    for path in paths:
        try:
            with Image.open(path) as img:
                tensor = preprocess(img, patch, resize)
        except (OSError, ValueError) as e:
            log.warning("skipping %s: %s", path, e)
            skipped.append(path.stem)
            continue
        loaded.append((path.stem, tensor))
    return loaded, skipped


def _batches(loaded, batch_size):
    """Consecutive same-shape runs, at most batch_size long."""
    batch = []
    for image_id, tensor in loaded:
        if batch and (
            len(batch) == batch_size or batch[-1][1].shape != tensor.shape
        ):
            yield batch
            batch = []
        batch.append((image_id, tensor))
    if batch:
        yield batch


def extract(
    images: list[str | Path],
    cfg: ExtractConfig,
    out_dir: str | Path,
    model: torch.nn.Module | None = None,
) -> ExtractReport:
    """Write one `.anyf` map per decodable image plus a manifest stub.

    Returns the written/skipped ids; callers exit nonzero when any image
    was skipped. `model` overrides weight loading (tests, preloaded runs).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = cfg.spec
    loaded, skipped = _load_images([Path(p) for p in images], spec.patch_size, cfg.resize)
    report = ExtractReport(skipped=skipped)
    if loaded:
        if model is None:
            model = load_backbone(spec, cfg.device)
        n_special = _special_token_count(model)
        with FacetCapture(model, cfg.layer, cfg.facet) as capture, torch.inference_mode():
            for batch in _batches(loaded, cfg.batch_size):
                stacked = torch.stack([t for _, t in batch]).to(cfg.device)
                model(stacked)
                tokens = capture.take()
                grid_h = stacked.shape[2] // spec.patch_size
                grid_w = stacked.shape[3] // spec.patch_size
                maps = tokens_to_grid(tokens, grid_h, grid_w, n_special)
                for (image_id, _), fmap in zip(batch, maps):
                    formats.write_feature_map(fmap, out_dir / f"{image_id}.anyf")
                    report.written.append(image_id)
    formats.write_manifest_stub(
        report.written, out_dir.name or "extracted", out_dir / "manifest-stub.yaml"
    )
    return report


def extract_cls(
    images: list[str | Path],
    cfg: ExtractConfig,
    out_path: str | Path,
    model: torch.nn.Module | None = None,
) -> ExtractReport:
    """Write final-layer CLS embeddings as an `.anyd` set tagged "cls".

    The CLS vector is token 0 of the final LayerNorm output, the standard
    whole-image embedding of these backbones.
    """
    spec = cfg.spec
    loaded, skipped = _load_images([Path(p) for p in images], spec.patch_size, cfg.resize)
    report = ExtractReport(skipped=skipped)
    vectors: dict[str, np.ndarray] = {}
    dim = spec.dim
    if loaded:
        if model is None:
            model = load_backbone(spec, cfg.device)
        norm = getattr(model, "norm", None)
        if norm is None:
            raise ConfigError("model has no final .norm; cannot take CLS output")
        grabbed: list[torch.Tensor] = []
        handle = norm.register_forward_hook(
            lambda module, args, output: grabbed.append(
                output.detach().to("cpu", torch.float32)
            )
        )
        try:
            with torch.inference_mode():
                for batch in _batches(loaded, cfg.batch_size):
                    stacked = torch.stack([t for _, t in batch]).to(cfg.device)
                    grabbed.clear()
                    model(stacked)
                    if not grabbed:
                        raise ConfigError("final norm never ran during forward")
                    cls = grabbed[-1][:, 0, :].numpy()
                    for (image_id, _), vec in zip(batch, cls):
                        vectors[image_id] = vec
        finally:
            handle.remove()
        dim = next(iter(vectors.values())).shape[0]
        report.written = list(vectors)
    formats.write_descriptor_set(vectors, dim, "cls", out_path)
    return report
