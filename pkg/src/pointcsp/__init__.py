"""Cross-sample semantic propagation for point-cloud self-supervised learning."""

from .config import TrainingConfig
from .pointcloud import PointCloud, SceneSpec, augment, generate_corpus

__version__ = "0.1.0"

__all__ = ["TrainingConfig", "PointCloud", "SceneSpec", "augment", "generate_corpus"]
