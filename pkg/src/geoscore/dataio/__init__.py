"""Image decoding, preprocessing, raster/manifest formats, synthetic corpus."""

from geoscore.dataio.images import (
    DecodeError,
    PreprocessPolicy,
    augment,
    decode_image,
    encode_image,
    preprocess,
    resize_bilinear,
    z_normalize,
)
from geoscore.dataio.manifest import ImageRecord, ManifestError, read_manifest, resolve_path, write_manifest
from geoscore.dataio.raster import (
    NightlightRaster,
    RasterFormatError,
    load_nightlight_raster,
    save_nightlight_raster,
)
from geoscore.dataio.synth import CorpusPaths, SynthConfig, synth_corpus

__all__ = [
    "CorpusPaths",
    "DecodeError",
    "ImageRecord",
    "ManifestError",
    "NightlightRaster",
    "PreprocessPolicy",
    "RasterFormatError",
    "SynthConfig",
    "augment",
    "decode_image",
    "encode_image",
    "load_nightlight_raster",
    "preprocess",
    "read_manifest",
    "resize_bilinear",
    "resolve_path",
    "save_nightlight_raster",
    "synth_corpus",
    "write_manifest",
    "z_normalize",
]
