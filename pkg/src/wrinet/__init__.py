"""Wide residual-inception networks built from exact numpy kernels.

The package covers the full desk-scale pipeline: tensor plumbing, hand-written
differentiable layers, residual/bottleneck/inception unit builders, whole-network
assembly, static cost analysis (parameters, MACs, receptive fields), SGD training
with Nesterov momentum, CIFAR/KITTI dataset I/O, and SSD-style multibox detection
mechanics with mAP/mAR evaluation.
"""

__version__ = "0.1.0"
