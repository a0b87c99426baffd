"""dcq: surrogate prediction of lossy-compression quality metrics.

Predicts compression ratio, PSNR, and SSIM for volumetric float data and an
error bound, for two built-in error-bounded codecs, via a two-stage model
(shared 3D-CNN feature backbone + per-(codec, metric) prediction heads).
"""

__version__ = "0.1.0"
