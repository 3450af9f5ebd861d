"""Deterministic stand-ins for the critic, solver, and extractor roles.

These run the full pipeline offline: same input text, same reply, every
time. The critic recognizes which template it was called through by marker
phrases, the solver hash-picks among the offered choices, and the extractor
routes lines to sections with plain heading rules.
"""

from __future__ import annotations

import hashlib
import re
from typing import Mapping, Sequence

from .backends import ChatTurn, CriticBackend, GenerationParams
from .schema import SectionKind

_SECTION_NAME_RE = re.compile(r"^Section name: (.+)$", re.MULTILINE)
_CHOICE_LINE_RE = re.compile(r"^([A-Z])\. ", re.MULTILINE)
_LIST_PREFIX_RE = re.compile(r"^\s*(?:[-*]|\d+[.)])\s")

_DEFAULT_DIRECTIVES: dict[SectionKind, tuple[str, ...]] = {
    SectionKind.SYSTEM_ROLE: ("State the assistant's area of expertise in one sentence.",),
    SectionKind.RELEVANT_CONTEXT: ("Mention that questions may come from any subject area.",),
    SectionKind.TASK_DETAILS: ("Ask for the single best answer to each question.",),
    SectionKind.CONSTRAINTS: ("Require the reply to contain only the chosen answer letter.",),
    SectionKind.OUTPUT_FORMAT: (
        "Require the final line to follow the pattern 'Answer: X' where X is the letter.",
    ),
}

_BY_DISPLAY_NAME = {kind.display_name: kind for kind in SectionKind}


class MockCritic(CriticBackend):
    """Fixed-rule critic covering critique, consolidation, and rewrite calls.

    Critique calls get one bulleted directive per section kind (override per
    kind via ``directives``; an empty tuple means "reply nothing", which the
    loop reads as no change). Consolidation calls get the section content
    with exact duplicate lines dropped. Rewrite calls echo the prompt back
    unchanged.
    """

    name = "mock"
    model = "fixed-rules"

    def __init__(self, directives: Mapping[SectionKind, tuple[str, ...]] | None = None) -> None:
        table = dict(_DEFAULT_DIRECTIVES)
        if directives:
            table.update(directives)
        self._directives = table

    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> str:
        text = turns[-1].content
        if "Propose concrete improvements" in text:
            return self._critique(text)
        if "Remove duplicated" in text:
            return self._consolidate(text)
        if "Critique and rewrite the prompt below" in text:
            return _between_markers(text)
        return ""

    def _critique(self, text: str) -> str:
        match = _SECTION_NAME_RE.search(text)
        if not match:
            return ""
        kind = _BY_DISPLAY_NAME.get(match.group(1).strip())
        if kind is None:
            return ""
        return "\n".join(f"- {directive}" for directive in self._directives[kind])

    @staticmethod
    def _consolidate(text: str) -> str:
        lines = text.splitlines()
        try:
            start = lines.index("Section content:") + 1
        except ValueError:
            return ""
        end = next(
            (i for i, line in enumerate(lines) if line.startswith("Remove duplicated")),
            len(lines),
        )
        content = lines[start:end]
        while content and not content[-1].strip():
            content.pop()
        kept: list[str] = []
        seen: set[str] = set()
        for line in content:
            if line.strip() and line in seen:
                continue
            seen.add(line)
            kept.append(line)
        return "\n".join(kept)


class MockSolver(CriticBackend):
    """Answers multiple-choice questions by hashing the posed text.

    The pick is uniform over the offered letters and changes whenever the
    posed text changes, so different prompts genuinely score differently.
    """

    name = "mock"
    model = "hash-pick"

    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> str:
        text = turns[-1].content
        letters = _CHOICE_LINE_RE.findall(text)
        if not letters:
            return "Answer: A"
        digest = int(hashlib.sha256(text.encode("utf-8")).hexdigest(), 16)
        return f"Answer: {letters[digest % len(letters)]}"


# Heading keyword -> section routing, checked in order; first match wins.
# "task" goes last because it shows up inside otherwise-specific headings.
_HEADING_ROUTES: tuple[tuple[tuple[str, ...], SectionKind], ...] = (
    (("role", "persona"), SectionKind.SYSTEM_ROLE),
    (("context", "background"), SectionKind.RELEVANT_CONTEXT),
    (("output", "format", "structure"), SectionKind.OUTPUT_FORMAT),
    (("constraint", "rule", "instruction"), SectionKind.CONSTRAINTS),
    (("task",), SectionKind.TASK_DETAILS),
)


class HeadingRuleExtractor(CriticBackend):
    """Splits an unstructured prompt into sections by heading keywords.

    A heading is a non-list line with a colon whose pre-colon prefix is at
    most ten words and names a known topic (role, context, output, rules,
    tasks). The heading line itself is dropped; anything after its colon and
    every following line lands in the matched section. Text before the first
    heading is treated as context. Blank lines are dropped, so each section
    comes out as one contiguous block even when its lines were gathered from
    separate parts of the source. Output is the tagged wire format, so the
    result always parses.
    """

    name = "mock"
    model = "heading-rules"

    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> str:
        source = _between_markers(turns[-1].content)
        buckets: dict[SectionKind, list[str]] = {kind: [] for kind in SectionKind}
        target = SectionKind.RELEVANT_CONTEXT
        for line in source.splitlines():
            if not line.strip():
                continue
            routed = _route_heading(line)
            if routed is None:
                buckets[target].append(line)
                continue
            target, inline = routed
            if inline:
                buckets[target].append(inline)
        blocks = []
        for kind in SectionKind:
            content = "\n".join(buckets[kind]).strip()
            blocks.append(f"<{kind.display_name}>\n{content}" if content else f"<{kind.display_name}>")
        return "\n\n".join(blocks) + "\n"


def _route_heading(line: str) -> tuple[SectionKind, str] | None:
    if _LIST_PREFIX_RE.match(line) or ":" not in line:
        return None
    prefix, _, rest = line.partition(":")
    words = prefix.lower().split()
    if not words or len(words) > 10:
        return None
    for keywords, kind in _HEADING_ROUTES:
        if any(any(word.startswith(keyword) for word in words) for keyword in keywords):
            return kind, rest.strip()
    return None


def _between_markers(text: str) -> str:
    """Text between the PROMPT START and PROMPT END marker lines, if present."""
    lines = text.splitlines()
    starts = [i for i, line in enumerate(lines) if line.strip() == "PROMPT START"]
    ends = [i for i, line in enumerate(lines) if line.strip() == "PROMPT END"]
    if starts and ends and starts[0] + 1 <= ends[-1]:
        return "\n".join(lines[starts[0] + 1 : ends[-1]])
    return text
