"""Dual-branch conditional diffusion for virtual IHC staining.

Subpackages cover the DDPM math core, the conditional denoising networks,
the multitask training systems, a synthetic paired-histology generator,
stain deconvolution, patch tiling, and a generative evaluation suite.
"""

__version__ = "0.1.0"
