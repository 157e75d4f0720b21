"""Age-informed unsupervised anomaly detection on 3D volumes.

Library + CLI for training volumetric variational autoencoders (plain,
age-conditioned latent, multi-task age prediction), fusing anomaly scores
with a validation grid search, and evaluating with ROC/PR metrics and BCa
bootstrap confidence intervals. A synthetic aging-phantom generator stands
in for clinical data at desk scale.
"""

__version__ = "0.1.0"
