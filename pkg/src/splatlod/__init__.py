"""Level-of-detail hierarchies for 3D Gaussian splatting."""

from .model import (
    Aabb,
    CameraModel,
    CutEntry,
    Gaussian,
    GaussianArrays,
    Hierarchy,
    HierarchyNode,
    SceneManifest,
    SfmPointSet,
)

__version__ = "0.1.0"
