"""tacshape: watertight mesh reconstruction from sparse tactile contact patches.

The toolkit simulates gel-sensor touches on a ground-truth mesh, converts the
contact depth maps into virtual-camera ray observations, optimizes a trainable
signed-distance field under local tactile constraints plus global guidance
gradients, refines the result on an explicit tetrahedral grid, and extracts a
triangle mesh.
"""

__version__ = "0.1.0"

from .geometry import Pose, Ray, TriangleMesh, load_mesh, save_mesh
from .field import GridSDF
from .tetra import TetGrid, marching_tetrahedra

__all__ = [
    "Pose",
    "Ray",
    "TriangleMesh",
    "load_mesh",
    "save_mesh",
    "GridSDF",
    "TetGrid",
    "marching_tetrahedra",
    "__version__",
]
