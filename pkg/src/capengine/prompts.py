"""Deterministic prompt builders for the captioner and refiner backends.

Every template here is normative for the engine and frozen by golden-file
tests (tests/golden/prompts). The rendered texts are also published in
docs/prompts.md; changing a template means regenerating both.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

from .errors import EmptyCategory, NoRegions
from .geometry import ImageDims

if TYPE_CHECKING:
    from .backends import OcrLine
    from .paragraph import DenseCaption

PromptText = str

SENTIMENTS = ("positive", "negative", "neutral")
FACTUALITIES = ("factual", "imagination")

_REFINER_TEMPLATE = (
    "Revise the following image caption so that it {directives}. "
    "Reply with only the revised caption.\nCaption: {raw_caption}"
)
_DEFAULT_DIRECTIVE = "keeps a neutral, factual tone"
_COT_CATEGORY_PROMPT = "Question: What is the name of the object in this image? Answer:"
_COT_CAPTION_TEMPLATE = "Question: Describe the {category} in this image in one sentence. Answer:"
_PARAGRAPH_INSTRUCTION = (
    "Summarize the regions and scene text above into one coherent paragraph "
    "describing the whole image. Do not invent objects."
)
_CHAT_SYSTEM_TEMPLATE = """You are assisting a user with questions about one selected object in an image of {width}x{height} pixels.
Selected object: {caption}
Available tools: {tools}.
To consult a tool, reply with exactly two lines:
Action: <tool>
Action Input: <text>
Each tool result arrives on a line starting with "Observation:".
When you are ready to answer the user, reply with one line:
Final Answer: <text>"""


@dataclass(frozen=True)
class LanguageControls:
    """Caption-style directives; every field defaults to "no constraint"."""

    sentiment: str = "neutral"
    length: int | None = None
    language: str = "en"
    factuality: str = "factual"

    def __post_init__(self) -> None:
        if self.sentiment not in SENTIMENTS:
            raise ValueError(f"sentiment must be one of {SENTIMENTS}")
        if self.factuality not in FACTUALITIES:
            raise ValueError(f"factuality must be one of {FACTUALITIES}")
        if self.length is not None and self.length < 1:
            raise ValueError("length budget must be >= 1")
        if not self.language or not self.language.isascii():
            raise ValueError("language tag must be non-empty ASCII")


def _finish(text: str) -> PromptText:
    # str.format raises on unknown placeholders, so full substitution is
    # guaranteed by construction; only non-emptiness needs a check here.
    assert text, "prompt must be non-empty"
    return text


def build_refiner_prompt(raw_caption: str, controls: LanguageControls) -> PromptText:
    """Render the style-revision instruction around the raw caption.

    Directives are emitted comma-joined in the fixed order sentiment,
    factuality, length, language; each is omitted at its default value and
    the all-defaults case falls back to a neutral/factual clause.
    """
    if not raw_caption:
        raise ValueError("raw_caption must be non-empty")
    clauses: list[str] = []
    if controls.sentiment != "neutral":
        clauses.append(f"has a {controls.sentiment} sentiment")
    if controls.factuality != "factual":
        clauses.append("adds imaginative flourish")
    if controls.length is not None:
        clauses.append(f"uses at most {controls.length} words")
    if controls.language != "en":
        clauses.append(f'is written in language "{controls.language}"')
    directives = ", ".join(clauses) if clauses else _DEFAULT_DIRECTIVE
    return _finish(_REFINER_TEMPLATE.format(directives=directives, raw_caption=raw_caption))


def build_cot_category_prompt() -> PromptText:
    """Step-1 question: name the object in the whitened image."""
    return _finish(_COT_CATEGORY_PROMPT)


def build_cot_caption_prompt(category: str) -> PromptText:
    """Step-2 question: describe the named object in the margin crop."""
    category = category.strip().lower()
    if not category:
        raise EmptyCategory("category is empty after trimming")
    return _finish(_COT_CAPTION_TEMPLATE.format(category=category))


def build_chat_system_prompt(
    object_caption: str, image_dims: ImageDims, tool_names: Sequence[str]
) -> PromptText:
    """System prompt seeding an object-centric chat with the action grammar."""
    if not object_caption:
        raise ValueError("object_caption must be non-empty")
    tools = ", ".join(tool_names) if tool_names else "none"
    return _finish(
        _CHAT_SYSTEM_TEMPLATE.format(
            width=image_dims.width,
            height=image_dims.height,
            caption=object_caption,
            tools=tools,
        )
    )


def build_paragraph_prompt(
    dense: Sequence["DenseCaption"], ocr: Sequence["OcrLine"]
) -> PromptText:
    """Merge numbered region captions and scene text into the summary prompt."""
    if not dense:
        raise NoRegions("paragraph prompt needs at least one region caption")
    lines = [
        f"Region {i} [{d.bbox.x0},{d.bbox.y0},{d.bbox.x1},{d.bbox.y1}]: {d.caption}"
        for i, d in enumerate(dense, start=1)
    ]
    if ocr:
        quoted = "; ".join(f'"{line.text}"' for line in ocr)
        lines.append(f"Scene text: {quoted}")
    lines.append(_PARAGRAPH_INSTRUCTION)
    return _finish("\n".join(lines))
