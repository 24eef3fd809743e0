"""Negation dataset construction: region selection, caption generation, alignment and filters."""

from .builder import BuildConfig, BuildResult, DatasetBuilder, build_dataset, write_records
from .clients import BoundedClient, ClientRequest, HttpClient, MockClient, OllamaClient
from .generation import align, generate_pair, verify_pair
from .overlay import PillowRenderer, render_overlay
from .regions import select_regions
from .stats import corpus_stats

__all__ = [
    "BoundedClient",
    "BuildConfig",
    "BuildResult",
    "ClientRequest",
    "DatasetBuilder",
    "HttpClient",
    "MockClient",
    "OllamaClient",
    "PillowRenderer",
    "align",
    "build_dataset",
    "corpus_stats",
    "generate_pair",
    "render_overlay",
    "select_regions",
    "verify_pair",
    "write_records",
]
