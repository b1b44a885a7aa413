"""Affordance-space world models in a 2-D micro-kitchen.

Pipeline: pretrain a latent world model and an affordance model on scripted
interaction clips, finetune on unsupervised robot episodes, then plan to goal
images with affordance- and GMM-seeded CEM.
"""

__version__ = "0.1.0"
