"""Quadtree scaled-boundary polygon solver for 2D elastic stress and fracture
analysis.

The pipeline is: implicit signed-distance geometry (:mod:`qtsbfem.geometry`)
-> boundary-conforming quadtree polygon mesh (:mod:`qtsbfem.mesher`)
-> per-cell scaled-boundary solution (:mod:`qtsbfem.sbfem`)
-> global assembly, solve and post-processing (:mod:`qtsbfem.assembly`)
-> configuration, orchestration and export (:mod:`qtsbfem.analysis`,
:mod:`qtsbfem.cli`).
"""

from qtsbfem.geometry import (
    Circle,
    ConvexPolygon,
    CrackPath,
    Difference,
    HalfPlane,
    Intersection,
    Rectangle,
    Union,
    sdf_eval,
)
from qtsbfem.sbfem import MaterialModel

__version__ = "0.1.0"

__all__ = [
    "Circle",
    "ConvexPolygon",
    "CrackPath",
    "Difference",
    "HalfPlane",
    "Intersection",
    "MaterialModel",
    "Rectangle",
    "Union",
    "sdf_eval",
    "__version__",
]
