"""Point-voxel convolution: voxel bridge, neural ops, a toy PVCNN and locality benchmarks."""

from .cloud import NormalizedCloud, PointCloud, SyntheticSpec, generate_synthetic, load_cloud, normalize, save_cloud
from .model import PVCNNConfig, build_pvcnn, pvcnn_forward, pvconv_forward, toy_config
from .voxel import (count_distinguishable, devoxelize_nearest, devoxelize_trilinear, trilinear_weights,
                    voxelize)

__version__ = "0.1.0"
