"""Linear 3D morphable face model toolkit.

Shape synthesis and scaled orthographic projection (:mod:`morphface.model`),
landmark fitting (:mod:`morphface.fitting`), eye-based rigid alignment
(:mod:`morphface.alignment`), texture extraction (:mod:`morphface.texture`),
image/mesh quality metrics (:mod:`morphface.metrics`) and file formats
(:mod:`morphface.io`).
"""

from morphface.errors import (
    ChecksumError,
    ConfigurationError,
    DegenerateGeometryError,
    EmptyTextureError,
    FormatError,
    MorphFaceError,
    SchemaError,
    TruncatedFileError,
    UnderConstrainedError,
    UnsupportedFormatError,
    VersionMismatchError,
    BadMagicError,
)
from morphface.model import (
    FaceMesh,
    ModelParams,
    MorphableBasis,
    landmark_positions,
    project_model,
    project_vertices,
    rotation_from_euler,
    synthesize_shape,
)

__version__ = "0.1.0"

__all__ = [
    "BadMagicError",
    "ChecksumError",
    "ConfigurationError",
    "DegenerateGeometryError",
    "EmptyTextureError",
    "FaceMesh",
    "FormatError",
    "ModelParams",
    "MorphFaceError",
    "MorphableBasis",
    "SchemaError",
    "TruncatedFileError",
    "UnderConstrainedError",
    "UnsupportedFormatError",
    "VersionMismatchError",
    "landmark_positions",
    "project_model",
    "project_vertices",
    "rotation_from_euler",
    "synthesize_shape",
]
