"""Two-stage GAN pipeline for EM image synthesis with a skip-patch discriminator.

Stage 1 samples segmentation masks from noise; stage 2 translates masks into
EM-like images with a conditional U-Net GAN. Everything runs on a small
numpy autodiff engine (``skippatch.autodiff``).
"""

__version__ = "0.1.0"
