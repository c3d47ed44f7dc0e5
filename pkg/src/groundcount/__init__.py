"""Detection-grounded VQA evaluation toolkit."""

from .evaluator import (
    ABLATIONS,
    ConfigError,
    RecordResult,
    Report,
    ResultRow,
    RunSpec,
    odm_only_answer,
    odm_only_eval,
    parse_count_assertion,
    run_eval,
    score,
)
from .fusion import (
    FusionDims,
    FusionInputs,
    FusionParams,
    cross_attn_branch,
    film_branch,
    fuse_backward,
    fuse_forward,
    gate,
    gradient_check,
    toy_train,
)
from .grounding import (
    GroundedPrompt,
    GroundingConfig,
    assign_cell,
    augment_user_prompt,
    filter_detections,
    order_detections,
    overlay_boxes,
    render_prompt,
    render_training_target,
)
from .ingest import (
    IngestError,
    load_annotations,
    load_benchmark,
    load_detections,
    serialize_benchmark,
    serialize_detections,
)
from .odm_backend import (
    CachedDetections,
    FileProvider,
    PrefilterError,
    ServiceProvider,
    UnknownImageError,
)
from .report import emit_report
from .schema import AnnotationSet, Detection, DetectionSet, GroundTruthObject, VqaRecord
from .vlm_client import (
    BackendConfig,
    BackendError,
    HttpBackend,
    MockBackend,
    VlmResponse,
    extract_verdict,
    mock_backend,
    send,
    strip_thinking,
)

__version__ = "0.1.0"
