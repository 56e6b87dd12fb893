"""Reference modality servers: relational, image and vector."""

from .common import PAGE_SIZE, ResultStore, run_fragment
from .relational import make_relational_server, rel_execute
from .storage import LakeStore, SchemaError, Table, UnknownTableError
from .vector import VectorDataset, VectorService, make_vector_server, sem_match
from .vision import (ImagePredicate, LabelOracle, NoisyOracle, PredicateCompileError, RemoteModel,
                     compile_predicate, image_match, make_image_server)

__all__ = [
    "PAGE_SIZE", "ResultStore", "run_fragment", "make_relational_server", "rel_execute", "LakeStore",
    "SchemaError", "Table", "UnknownTableError", "VectorDataset", "VectorService", "make_vector_server",
    "sem_match", "ImagePredicate", "LabelOracle", "NoisyOracle", "PredicateCompileError", "RemoteModel",
    "compile_predicate", "image_match", "make_image_server",
]
