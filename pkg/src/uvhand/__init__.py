"""uvhand: UV position-map codec, reconstruction networks and evaluation
metrics for 3D hand meshes."""

from .errors import FitError, FormatError, MeshError, ShapeError, TemplateError, UVHandError
from .mesh import (
    EdgeSet,
    HandTopology,
    TriMesh,
    compute_edges,
    edge_unpool,
    load_joint_rules,
    load_obj,
    regress_joints,
    save_joint_rules,
    save_obj,
)
from .uvmap import (
    NormalizationCube,
    UVPositionMap,
    UVTemplate,
    denormalize_coords,
    load_template,
    make_fallback_template,
    make_template,
    normalize_coords,
    rasterize_mesh_to_uv,
    read_uvp,
    sample_uv_to_mesh,
    save_template,
    save_uv_png,
    subdivide_template,
    write_uvp,
)
from .warp import Camera, SampleGrid, affine_connection, grid_sample, project_uv_to_grid

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "EdgeSet",
    "FitError",
    "FormatError",
    "HandTopology",
    "MeshError",
    "NormalizationCube",
    "SampleGrid",
    "ShapeError",
    "TemplateError",
    "TriMesh",
    "UVHandError",
    "UVPositionMap",
    "UVTemplate",
    "affine_connection",
    "compute_edges",
    "denormalize_coords",
    "edge_unpool",
    "grid_sample",
    "load_joint_rules",
    "load_obj",
    "load_template",
    "make_fallback_template",
    "make_template",
    "normalize_coords",
    "project_uv_to_grid",
    "rasterize_mesh_to_uv",
    "read_uvp",
    "regress_joints",
    "sample_uv_to_mesh",
    "save_joint_rules",
    "save_obj",
    "save_template",
    "save_uv_png",
    "subdivide_template",
    "write_uvp",
]
