"""Range-aware unsigned distance fields with a surface-oriented semantic head."""
from .errors import (DegenerateGeometryError, EmptyMeshError, EmptySetError, ExtractionError,
                     FormatError, ShapeError, TruncatedFileError, ValidationError)
from .geomcore import SpatialIndex, TriangleMesh, load_mesh, nearest_on_mesh, normalize_unit_cube
from .metrics import chamfer, fscore, reconstruction_report, seg_metrics
from .model import ModelConfig, RangeUDFParams, predict
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
