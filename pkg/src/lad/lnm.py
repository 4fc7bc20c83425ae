"""Label noising module.

The label is one-hot encoded, every class channel is scaled by its own random
weight and the channels are summed (class-wise noising); per-pixel Gaussian
noise scaled by ``alpha`` is then added (pixel-wise noising). The result is
appended to the RGB image as a fourth input channel for the teacher.

All functions accept a single map ``(H, W)`` or a batch ``(B, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

IGNORE = 255


class InvalidLabelError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseParams:
    """One realization of the noising transform.

    ``class_weights`` has shape ``(..., C)`` and ``pixel_noise`` ``(..., H, W)``
    with matching leading (batch) dimensions.
    """

    class_weights: torch.Tensor
    pixel_noise: torch.Tensor
    alpha: float

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[-1]


def _check_label(label: torch.Tensor, num_classes: int) -> None:
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if label.dim() < 2:
        raise ValueError(f"label must be (H, W) or (B, H, W), got shape {tuple(label.shape)}")
    if label.dtype.is_floating_point:
        raise InvalidLabelError("label must hold integer class ids")
    bad = (label != IGNORE) & ((label < 0) | (label >= num_classes))
    if bool(bad.any()):
        raise InvalidLabelError(
            f"label value {int(label[bad][0])} outside [0, {num_classes}) and not IGNORE ({IGNORE})"
        )


def one_hot(label: torch.Tensor, num_classes: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """One-hot encode ``(..., H, W)`` into ``(..., C, H, W)``; IGNORE pixels get an all-zero row."""
    _check_label(label, num_classes)
    valid = label != IGNORE
    safe = torch.where(valid, label, torch.zeros_like(label)).long()
    oh = torch.nn.functional.one_hot(safe, num_classes).to(dtype)
    oh = oh * valid.unsqueeze(-1).to(dtype)
    return oh.movedim(-1, -3)


def sample_noise_params(
    num_classes: int,
    height: int,
    width: int,
    alpha: float,
    generator: torch.Generator,
    batch: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> NoiseParams:
    """Draw class weights and pixel noise from standard Gaussians.

    With ``batch`` set, every sample in the batch gets its own independent draw.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if num_classes < 1 or height < 1 or width < 1:
        raise ValueError("num_classes, height and width must be >= 1")
    lead = () if batch is None else (batch,)
    weights = torch.randn(*lead, num_classes, generator=generator, dtype=dtype)
    noise = torch.randn(*lead, height, width, generator=generator, dtype=dtype)
    return NoiseParams(weights, noise, float(alpha))


def apply_lnm(label: torch.Tensor, params: NoiseParams) -> torch.Tensor:
    """Noised label ``W[y] + alpha * Z``; IGNORE pixels carry only ``alpha * Z``."""
    num_classes = params.num_classes
    _check_label(label, num_classes)
    if params.pixel_noise.shape != label.shape:
        raise ValueError(
            f"pixel noise shape {tuple(params.pixel_noise.shape)} != label shape {tuple(label.shape)}"
        )
    if params.class_weights.shape[:-1] != label.shape[:-2]:
        raise ValueError("class_weights batch dims do not match the label")
    weights = params.class_weights
    valid = label != IGNORE
    safe = torch.where(valid, label, torch.zeros_like(label)).long()
    if label.dim() == 2:
        picked = weights[safe]
    else:
        flat = safe.reshape(safe.shape[0], -1)
        picked = torch.gather(weights, 1, flat).reshape(safe.shape)
    picked = torch.where(valid, picked, torch.zeros_like(picked))
    return picked + params.alpha * params.pixel_noise


def normalized_label(label: torch.Tensor, num_classes: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Class ids rescaled to [0, 1] (IGNORE -> 0); the no-class-wise-noising input."""
    _check_label(label, num_classes)
    valid = label != IGNORE
    scale = max(num_classes - 1, 1)
    out = label.to(dtype) / scale
    return torch.where(valid, out, torch.zeros_like(out))


def noise_label(
    label: torch.Tensor,
    num_classes: int,
    alpha: float,
    generator: torch.Generator,
    class_wise: bool = True,
) -> torch.Tensor:
    """Sample fresh parameters and noise ``label`` in one go.

    ``class_wise=False`` skips the random class weights: the label is
    normalized to [0, 1] and only the pixel noise is added. With ``alpha=0``
    that is the clean-label input.
    """
    batch = label.shape[0] if label.dim() == 3 else None
    h, w = label.shape[-2:]
    params = sample_noise_params(num_classes, h, w, alpha, generator, batch=batch)
    if class_wise:
        return apply_lnm(label, params)
    return normalized_label(label, num_classes) + params.alpha * params.pixel_noise


def concat_input(image: torch.Tensor, noised: torch.Tensor) -> torch.Tensor:
    """Append the noised label as the last channel: ``(..., 3, H, W) -> (..., 4, H, W)``."""
    if image.shape[-2:] != noised.shape[-2:] or image.shape[:-3] != noised.shape[:-2]:
        raise ValueError(
            f"image {tuple(image.shape)} and noised label {tuple(noised.shape)} do not match spatially"
        )
    return torch.cat([image, noised.unsqueeze(-3).to(image.dtype)], dim=-3)
