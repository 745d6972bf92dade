"""Label denoising for source-free domain-adaptive semantic segmentation."""

__all__ = ["__version__"]
__version__ = "0.1.0"
