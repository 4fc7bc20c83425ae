"""mIoU, output-stability (KL_mean) and input-saliency diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from lad.lnm import IGNORE, concat_input, noise_label

SALIENCY_CAP = 1e6


class ConfusionMatrix:
    """Rows are ground truth, columns predictions; IGNORE pixels are skipped."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = counts

    def update(self, pred, label) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1)
        label = np.asarray(label).reshape(-1)
        if pred.shape != label.shape:
            raise ValueError("prediction and label sizes differ")
        keep = label != IGNORE
        idx = self.num_classes * label[keep].astype(np.int64) + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(conf: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with non-empty union; absent classes are NaN in the vector."""
    tp = np.diag(conf.counts).astype(np.float64)
    union = conf.counts.sum(0) + conf.counts.sum(1) - tp
    present = union > 0
    if not present.any():
        raise ValueError("no class present in ground truth or predictions")
    iou = np.full(conf.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return float(iou[present].mean()), iou


def teacher_input(image, label, num_classes, alpha, generator, class_wise=True):
    noised = noise_label(label, num_classes, alpha, generator, class_wise=class_wise)
    return concat_input(image, noised)


@torch.no_grad()
def predict(
    net: torch.nn.Module,
    images: torch.Tensor,
    labels: torch.Tensor | None = None,
    alpha: float = 0.0,
    generator: torch.Generator | None = None,
    class_wise: bool = True,
    batch_size: int = 50,
) -> torch.Tensor:
    """Argmax predictions ``(N, H, W)``; label-assisted nets get freshly noised labels."""
    net.eval()
    needs_label = net.config.in_channels == 4
    if needs_label and (labels is None or generator is None):
        raise ValueError("a 4-channel net needs labels and a noise generator")
    out = []
    for i in range(0, len(images), batch_size):
        x = images[i : i + batch_size]
        if needs_label:
            y = labels[i : i + batch_size]
            x = teacher_input(x, y, net.config.num_classes, alpha, generator, class_wise)
        out.append(net(x).argmax(1))
    return torch.cat(out)


def evaluate_miou(net, images, labels, alpha=0.0, generator=None, class_wise=True) -> tuple[float, np.ndarray]:
    pred = predict(net, images, labels, alpha, generator, class_wise)
    conf = ConfusionMatrix(net.config.num_classes).update(pred.numpy(), labels.numpy())
    return miou(conf)


@dataclass
class StabilityReport:
    kl_mean: float
    m: int
    per_image: list[float] = field(default_factory=list)

    @property
    def kl_mean_x100(self) -> float:
        return 100.0 * self.kl_mean


def pairwise_kl(logits: torch.Tensor) -> torch.Tensor:
    """``(m, C, H, W)`` logits -> ``(m, m)`` matrix of KL(p_k || p_j), softmax over classes, mean over pixels."""
    logp = F.log_softmax(logits.double(), dim=1)
    p = logp.exp()
    # sum_c p_k log p_k - sum_c p_k log p_j
    self_term = (p * logp).sum(1).mean((-2, -1))
    cross = torch.einsum("kchw,jchw->kj", p, logp) / (logits.shape[-1] * logits.shape[-2])
    kl = (self_term[:, None] - cross).clamp_min(0.0)
    # the two sums differ by rounding on the diagonal, which is exactly zero by definition
    return kl.fill_diagonal_(0.0)


@torch.no_grad()
def kl_mean(
    teacher: torch.nn.Module,
    image: torch.Tensor,
    label: torch.Tensor,
    m: int = 3,
    alpha: float = 0.01,
    generator: torch.Generator | None = None,
    class_wise: bool = True,
) -> StabilityReport:
    """Mean pairwise KL over ``m`` noise resamplings of the teacher output for one image.

    Averaged over all m*m ordered pairs, diagonal (zero) terms included.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if teacher.config.in_channels != 4:
        raise ValueError("kl_mean needs a label-assisted (4-channel) net")
    teacher.eval()
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    images = image.unsqueeze(0).expand(m, *image.shape)
    labels = label.unsqueeze(0).expand(m, *label.shape)
    x = teacher_input(images, labels, teacher.config.num_classes, alpha, generator, class_wise)
    kl = pairwise_kl(teacher(x))
    value = float(kl.sum() / (m * m))
    return StabilityReport(value, m, [value])


def stability(teacher, images, labels, m=3, alpha=0.01, generator=None, class_wise=True) -> StabilityReport:
    """KL_mean averaged over a set of images, keeping the per-image values."""
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    per = [kl_mean(teacher, x, y, m, alpha, generator, class_wise).kl_mean for x, y in zip(images, labels)]
    return StabilityReport(float(np.mean(per)), m, per)


def saliency_ratio(
    teacher: torch.nn.Module,
    image: torch.Tensor,
    label: torch.Tensor,
    alpha: float = 0.01,
    generator: torch.Generator | None = None,
    draws: int = 4,
    class_wise: bool = True,
) -> float:
    """How strongly predictions depend on the label channel relative to RGB.

    The objective is the sum over pixels of the max-class logit. The ratio is
    mean |d objective / d label channel| over mean |d objective / d RGB|,
    averaged over ``draws`` noise samples; a zero RGB gradient is capped at
    ``SALIENCY_CAP``.
    """
    if teacher.config.in_channels != 4:
        raise ValueError("saliency_ratio needs a label-assisted (4-channel) net")
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    teacher.eval()
    ratios = []
    for _ in range(draws):
        x = teacher_input(image.unsqueeze(0), label.unsqueeze(0), teacher.config.num_classes,
                          alpha, generator, class_wise)
        x = x.detach().requires_grad_(True)
        logits = teacher(x)
        objective = logits.max(1).values.sum()
        if not objective.requires_grad:
            raise RuntimeError("model output is not differentiable w.r.t. its input")
        (grad,) = torch.autograd.grad(objective, x)
        lab = grad[0, 3].abs().mean().item()
        rgb = grad[0, :3].abs().mean().item()
        if rgb == 0.0:
            ratios.append(SALIENCY_CAP if lab > 0 else 0.0)
        else:
            ratios.append(min(lab / rgb, SALIENCY_CAP))
    return float(np.mean(ratios))
