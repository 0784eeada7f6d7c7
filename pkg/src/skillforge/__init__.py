"""skillforge: skill taxonomies, skill-conditioned CoT annotation, and expert routing."""

__version__ = "0.1.0"

from .corpus import AnnotatedExample, DatasetManifest, VideoQAExample  # noqa: F401
from .embedding import EmbeddingVector, EncoderSpec  # noqa: F401
from .taxonomy import SkillTaxonomy  # noqa: F401
from .experts import ExpertPartition, ToyExpertModel, ToyModelConfig  # noqa: F401
