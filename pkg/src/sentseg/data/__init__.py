"""Dataset generation, file formats and loading."""

from .formats import (
    ANNOTATION_HEADER,
    FLOW_OFFSET,
    FLOW_SCALE,
    read_annotations,
    read_flow,
    read_manifest,
    read_mask,
    read_pair_scores,
    read_pgm,
    read_ppm,
    write_annotations,
    write_flow,
    write_manifest,
    write_mask,
    write_pgm,
    write_ppm,
)
from .shapeworld import (
    ACTIONS,
    COLORS,
    SHAPES,
    AnnotatedSample,
    ShapeWorldSpec,
    generate,
    generate_video,
    load_dataset,
    make_sentence,
    oracle_pair_scores,
    pair_label_map,
    pair_vocabulary,
    rasterize,
    write_dataset,
)

__all__ = [
    "ACTIONS", "ANNOTATION_HEADER", "COLORS", "FLOW_OFFSET", "FLOW_SCALE",
    "SHAPES", "AnnotatedSample", "ShapeWorldSpec", "generate", "generate_video",
    "load_dataset", "make_sentence", "oracle_pair_scores", "pair_label_map",
    "pair_vocabulary", "rasterize", "read_annotations", "read_flow",
    "read_manifest", "read_mask", "read_pair_scores", "read_pgm", "read_ppm",
    "write_annotations", "write_dataset", "write_flow", "write_manifest",
    "write_mask", "write_pgm", "write_ppm",
]
