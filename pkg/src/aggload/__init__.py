"""aggload: aggregated safetensors loading onto (simulated) device memory.

Instead of deserializing tensors one by one through host memory, files are
bulk-copied onto a device backend in large parallel blocks, tensors are
instantiated as zero-copy views over those buffers, and multi-rank setups
redistribute them with broadcast/scatter collectives.
"""

from .collective import ProcessGroup, ShardSpec, SingleGroup, partition
from .errors import AggloadError
from .format import DType, FileHeader, TensorMetadata, parse_header, read_header, validate, write_file
from .loader import FilesBufferOnDevice, LoaderConfig, SafeTensorsFileLoader
from .tensorview import TensorView, compute_strides

__all__ = [
    "AggloadError",
    "DType",
    "FileHeader",
    "FilesBufferOnDevice",
    "LoaderConfig",
    "ProcessGroup",
    "SafeTensorsFileLoader",
    "ShardSpec",
    "SingleGroup",
    "TensorMetadata",
    "TensorView",
    "compute_strides",
    "parse_header",
    "partition",
    "read_header",
    "validate",
    "write_file",
]

__version__ = "0.1.0"
