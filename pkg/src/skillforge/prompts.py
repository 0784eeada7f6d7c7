"""Default prompt templates.

The templates ship as plain ``templates/*.txt`` files inside the package
so deployments can copy and edit them; ``--templates DIR`` on the CLI
points at such an edited set.  The file stem is the template name.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

from .llmclient import PromptTemplate, TemplateRegistry

SKILL_DESCRIBE = "skill_describe"
SKILL_SELECT_SUBQA = "skill_select_subqa"
MERGE_COT = "merge_cot"
FILTER_COT = "filter_cot"

DEFAULT_TEMPLATE_NAMES = (SKILL_DESCRIBE, SKILL_SELECT_SUBQA, MERGE_COT, FILTER_COT)


def default_registry() -> TemplateRegistry:
    """Registry loaded from the packaged template files."""
    registry = TemplateRegistry()
    root = resources.files("skillforge").joinpath("templates")
    for name in DEFAULT_TEMPLATE_NAMES:
        body = root.joinpath(f"{name}.txt").read_text(encoding="utf-8")
        registry.register(PromptTemplate.from_body(name, body))
    return registry


def registry_from_dir(directory: Path | str) -> TemplateRegistry:
    """Registry from a user-edited template directory (falls back per name)."""
    registry = default_registry()
    for path in sorted(Path(directory).glob("*.txt")):
        registry.register(PromptTemplate.from_body(path.stem, path.read_text(encoding="utf-8")))
    return registry
