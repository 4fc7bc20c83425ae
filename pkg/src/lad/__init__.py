"""Label-assisted distillation (LAD) for semantic segmentation.

A lightweight teacher sees the RGB image plus a randomly noised copy of the
ground-truth label; an RGB-only student is then distilled from it.
"""

from lad.lnm import IGNORE

__version__ = "0.1.0"
__all__ = ["IGNORE", "__version__"]
