"""Few-shot segmentation with guidance pooled from point annotations.

A small fully convolutional network is conditioned on a latent task
representation extracted from annotated support images; queries are then
segmented without revisiting the support. Includes synthetic data,
episodic training, evaluation, an interactive annotation service, and a
command-line interface.
"""

__version__ = "0.1.0"
