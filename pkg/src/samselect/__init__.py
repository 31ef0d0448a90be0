"""samselect: find the most salient 3-channel visualization of a multiband scene.

The search enumerates band composites and spectral indices, renders each
candidate, prompts a promptable segmenter with points derived from user
annotations, and ranks candidates by segmentation IoU against the
annotation masks.

Typical use:

    from samselect import (
        Dataset, MockSegmenter, SearchConfig, load_scene, load_annotations,
        extract_patches, run_search,
    )

    scene = load_scene("scene.tif", band_order=[...], wavelengths=wl)
    ann = load_annotations("debris.geojson", scene)
    dataset = Dataset(tuple(extract_patches(scene, ann)), "site", wl)
    report = run_search(dataset, MockSegmenter(), modes={"BC", "NDI", "SSI", "SIC"})
    print(report.argmax.viz_expr)
"""

from .errors import BackendError, ConfigError, DataError, SamSelectError, VizExprError
from .raster import (
    AnnotationSet,
    Patch,
    Scene,
    WavelengthTable,
    extract_patches,
    load_annotations,
    load_scene,
    write_scene,
)
from .viz import (
    BandComposite,
    IndexComposite,
    IndexImage,
    NormalizedDifference,
    PcaComposite,
    RenderedVisualization,
    SpectralShape,
    VisualizationSpec,
    compute_ndi,
    compute_ssi,
    enumerate_search_space,
    format_viz_expr,
    normalize_percentile,
    parse_viz_expr,
    render,
    virtual_band,
)
from .prompts import (
    KMeansConfig,
    PromptSet,
    add_background_prompts,
    prompts_centroid,
    prompts_kmeans,
    prompts_manual,
    prompts_skeleton,
    skeletonize,
)
from .segmenter import (
    EmbeddingCache,
    ImageEmbedding,
    MockSegmenter,
    OnnxSamSegmenter,
    SegmentationResult,
    SegmenterBackend,
    embedding_cache_get_or_compute,
    mock_region_grow,
    predict,
)
from .search import (
    Dataset,
    ScoreRecord,
    SearchConfig,
    SearchReport,
    evaluate_viz,
    iou,
    pca_baseline,
    run_search,
    runtime_profile,
)
from .synth import SynthSpec, TargetDisk, TargetRect, generate_scene, synthetic_wavelengths

__version__ = "0.1.0"
