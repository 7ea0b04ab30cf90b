# Gaussian-attention point cloud matcher
__version__ = "0.1.0"
