from .datasets import LAYOUTS, DatasetSplit, Sample, format_split, load_dataset, parse_split
from .pnm import (decode_pnm, encode_pnm, quantize_prob, read_mask, read_pnm, read_probmap,
                  read_rgb, write_mask, write_pnm, write_probmap, write_rgb)
from .synth import SynthFundus, synth_fundus, synth_geometry
from .weights import load_weights, read_weight_file, save_weights, write_weight_file
from .atomic import atomic_write

__all__ = [
    "LAYOUTS", "DatasetSplit", "Sample", "SynthFundus", "atomic_write", "decode_pnm",
    "encode_pnm", "format_split", "load_dataset", "load_weights", "parse_split",
    "quantize_prob", "read_mask", "read_pnm", "read_probmap", "read_rgb",
    "read_weight_file", "save_weights", "synth_fundus", "synth_geometry", "write_mask",
    "write_pnm", "write_probmap", "write_rgb", "write_weight_file",
]
