"""Variable-rate compression of Gaussian scenes."""

from .cascade import CompressOptions, compress, compress_levels, decompress, uncompressed_bytes
from .coded_scene import FILE_SUFFIX, CodedScene, read_coded_scene, write_coded_scene
from .pruning import finetune, finetune_with_history, prune
from .quantization import QuantParams, dequantize, quantize
from .range_coder import build_frequency_table, entropy_decode, entropy_encode
from .schedule import LevelSchedule, level_schedule

__all__ = [
    'FILE_SUFFIX', 'CodedScene', 'CompressOptions', 'LevelSchedule', 'QuantParams',
    'build_frequency_table', 'compress', 'compress_levels', 'decompress', 'dequantize',
    'entropy_decode', 'entropy_encode', 'finetune', 'finetune_with_history', 'level_schedule',
    'prune', 'quantize', 'read_coded_scene', 'uncompressed_bytes', 'write_coded_scene',
]
