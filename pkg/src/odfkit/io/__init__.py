from .clouds import read_point_cloud, write_point_cloud
from .glyphs import export_glyphs, glyph_segments
from .odffile import decode_odf, encode_odf, read_odf, write_odf
from .synthetic import SyntheticDatasetSpec, generate_synthetic_dataset

__all__ = [
    "read_point_cloud", "write_point_cloud", "export_glyphs", "glyph_segments",
    "decode_odf", "encode_odf", "read_odf", "write_odf",
    "SyntheticDatasetSpec", "generate_synthetic_dataset",
]
