"""Class-balanced, weather-diverse prompt plans and synthetic image generation for driving scenes."""
from .errors import (
    BackendUnavailable,
    DegenerateDistribution,
    DuplicateIndex,
    EmptyCompletion,
    EmptyInput,
    FormatError,
    IoError,
    LockHeld,
    ParseError,
    ProtocolError,
    RefusesResume,
    TransportError,
    ValidationError,
    WeatherGenError,
)
from .labels import (
    ClassConfig,
    ClassDistribution,
    ClassInfo,
    PixelCounts,
    default_class_config,
    load_class_config,
    load_counts,
    scan_label_maps,
    thing_distribution,
)
from .sampler import (
    ConditionGrid,
    GenerationPlan,
    PlanItem,
    SamplingTable,
    derive_seed,
    make_plan,
    read_plan,
    read_table,
    sample_class,
    sampling_probabilities,
    write_plan,
    write_table,
)
from .prompts import (
    BasePrompt,
    DescriptorBank,
    EnrichedPrompt,
    PromptSpec,
    PromptTemplate,
    compose_scene,
    enrich,
    generate_prompt,
)
from .backends import (
    ChatCompletionBackend,
    DescriptorRequest,
    HttpImageBackend,
    ImageRequest,
    MockImageBackend,
)
from .retry import RetryPolicy
from .orchestrator import BackendConfig, EngineConfig, ImageArtifact, RunReport, request_image, run
from .manifest import DistributionReport, ManifestEntry, build_report, report

__version__ = "0.1.0"
