from .config import ModelConfig, FULL_SCALE, parse_config, parse_config_text
from .grid import VoxelGrid, read_sscv, write_sscv, encode_sscv, decode_sscv
from .kitti import read_semantickitti_voxels, load_class_map
from .labels import LabelSpace, SYNTHETIC, SEMANTIC_KITTI
from .synthetic import SceneSample, generate_synthetic

__all__ = [
    "ModelConfig", "FULL_SCALE", "parse_config", "parse_config_text",
    "VoxelGrid", "read_sscv", "write_sscv", "encode_sscv", "decode_sscv",
    "read_semantickitti_voxels", "load_class_map",
    "LabelSpace", "SYNTHETIC", "SEMANTIC_KITTI",
    "SceneSample", "generate_synthetic",
]
