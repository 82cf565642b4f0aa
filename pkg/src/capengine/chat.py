"""Object-centric chat: a bounded tool-calling loop around the refiner LLM.

The refiner sees a system prompt seeded with the object's caption plus the
running transcript, and may answer directly (`Final Answer: ...`) or request
a tool (`Action: <tool>` / `Action Input: <text>`). Tool output is fed back
as an `Observation:` line. At most max_tool_calls tools run per turn; after
that the last observation (or a fixed apology) becomes the reply.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .backends import BackendSet
from .errors import SessionBusy
from .geometry import (
    MARGIN_RATIO,
    ImageDims,
    RleMask,
    crop_image,
    crop_window,
    mask_bbox,
    raster_dims,
    rle_decode,
)
from .prompts import build_chat_system_prompt

MAX_TOOL_CALLS = 3
APOLOGY = "Sorry, I could not determine an answer from the available tools."

ToolFn = Callable[[str], str]


@dataclass
class ChatMessage:
    role: str  # user | assistant | tool
    text: str

    def __post_init__(self) -> None:
        if self.role not in ("user", "assistant", "tool"):
            raise ValueError(f"unknown role {self.role!r}")
        if not self.text:
            raise ValueError("message text must be non-empty")


@dataclass
class ChatSession:
    session_id: str
    image_id: str
    mask: RleMask
    seed_caption: str
    system_prompt: str
    messages: list[ChatMessage] = field(default_factory=list)
    busy: bool = False


@dataclass(frozen=True)
class ToolCall:
    tool: str
    input: str
    output: str


@dataclass(frozen=True)
class ToolDirective:
    tool: str
    input: str


@dataclass(frozen=True)
class FinalAnswer:
    text: str


def start_session(
    image_id: str,
    dims: ImageDims,
    mask: RleMask,
    seed_caption: str,
    tool_names: Sequence[str] = ("vqa",),
    session_id: str | None = None,
) -> ChatSession:
    """Open a session whose system prompt embeds the object's caption."""
    if not seed_caption:
        raise ValueError("seed caption must be non-empty")
    if mask.dims != dims:
        raise ValueError(f"mask dims {mask.dims} do not match image {dims}")
    return ChatSession(
        session_id=session_id or uuid.uuid4().hex,
        image_id=image_id,
        mask=mask,
        seed_caption=seed_caption,
        system_prompt=build_chat_system_prompt(seed_caption, dims, tool_names),
    )


def parse_action(llm_output: str) -> ToolDirective | FinalAnswer:
    """Total grammar parse: first complete construct wins, scanning lines.

    `Final Answer: <rest>` captures everything from the marker to the end of
    the output. `Action: <tool>` matches only with a non-empty
    `Action Input: <text>` within the next two lines. Anything else falls
    back to a FinalAnswer carrying the entire output.
    """
    lines = llm_output.splitlines()
    for i, line in enumerate(lines):
        stripped = line.lstrip()
        if stripped.startswith("Final Answer:"):
            head = stripped[len("Final Answer:") :].strip()
            tail = "\n".join(lines[i + 1 :]).strip()
            text = f"{head}\n{tail}".strip() if tail else head
            return FinalAnswer(text)
        if stripped.startswith("Action:"):
            tool = stripped[len("Action:") :].strip()
            if not tool:
                continue
            for j in (i + 1, i + 2):
                if j >= len(lines):
                    break
                follow = lines[j].lstrip()
                if follow.startswith("Action Input:"):
                    value = follow[len("Action Input:") :].strip()
                    if value:
                        return ToolDirective(tool=tool, input=value)
                    break
    return FinalAnswer(llm_output)


def default_tools(
    image: np.ndarray,
    mask: RleMask,
    backends: BackendSet,
    margin_ratio: float = MARGIN_RATIO,
) -> dict[str, ToolFn]:
    """The standard registry: VQA over the object's margin crop."""
    dims = raster_dims(image)
    window = crop_window(mask_bbox(rle_decode(mask)), margin_ratio, dims)
    crop = crop_image(image, window)
    return {"vqa": lambda question: backends.vqa.vqa(crop, question)}


def _assemble_transcript(
    session: ChatSession, user_msg: str, scratch: Sequence[tuple[str, str]]
) -> str:
    parts = [session.system_prompt, ""]
    prefixes = {"user": "User: ", "assistant": "Assistant: ", "tool": ""}
    for msg in session.messages:
        parts.append(prefixes[msg.role] + msg.text)
    parts.append(f"User: {user_msg}")
    for llm_output, observation in scratch:
        parts.append(llm_output)
        parts.append(f"Observation: {observation}")
    parts.append("Assistant:")
    return "\n".join(parts)


def chat_turn(
    session: ChatSession,
    user_msg: str,
    image: np.ndarray,
    backends: BackendSet,
    *,
    tools: Mapping[str, ToolFn] | None = None,
    max_tool_calls: int = MAX_TOOL_CALLS,
    margin_ratio: float = MARGIN_RATIO,
) -> tuple[str, list[ToolCall], ChatSession]:
    """Run one user turn; returns (reply, tool calls, updated session).

    The session history gains exactly one user and one assistant message,
    with one tool message per executed call in between.
    """
    if session.busy:
        raise SessionBusy(f"session {session.session_id} has a turn in flight")
    if not user_msg:
        raise ValueError("user message must be non-empty")
    session.busy = True
    try:
        if tools is None:
            tools = default_tools(image, session.mask, backends, margin_ratio)
        scratch: list[tuple[str, str]] = []
        tool_calls: list[ToolCall] = []
        reply: str | None = None
        for _ in range(max_tool_calls):
            llm_output = backends.refiner.refine(
                _assemble_transcript(session, user_msg, scratch)
            )
            action = parse_action(llm_output)
            if isinstance(action, ToolDirective) and action.tool not in tools:
                action = FinalAnswer(llm_output)
            if isinstance(action, FinalAnswer):
                reply = action.text.strip() or APOLOGY
                break
            answer = tools[action.tool](action.input)
            tool_calls.append(ToolCall(action.tool, action.input, answer))
            scratch.append((llm_output, answer))
        if reply is None:
            reply = tool_calls[-1].output if tool_calls else APOLOGY

        session.messages.append(ChatMessage("user", user_msg))
        for call in tool_calls:
            session.messages.append(ChatMessage("tool", f"Observation: {call.output}"))
        session.messages.append(ChatMessage("assistant", reply))
        return reply, tool_calls, session
    finally:
        session.busy = False
