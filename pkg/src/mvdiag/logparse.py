"""Fixed-depth (Drain) log template mining.

Each message is masked, split on whitespace and routed through a prefix tree
keyed first by token count and then by the leading tokens. At the leaf the
most similar template is reused when its token similarity reaches the
threshold; otherwise a new template is created.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["WILDCARD", "DrainConfig", "LogTemplate", "DrainParser", "EmptyState", "DEFAULT_MASKS"]

WILDCARD = "<*>"

# Order matters: composite patterns before plain numbers.
DEFAULT_MASKS: tuple[tuple[str, str], ...] = (
    (r"\b[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}\b", WILDCARD),
    (r"(?<![\w.])\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?(?![\w.])", WILDCARD),
    (r"\b0x[0-9a-fA-F]+\b", WILDCARD),
    (r"\b(?=[0-9a-fA-F]*\d)(?=[0-9a-fA-F]*[a-fA-F])[0-9a-fA-F]{4,}\b", WILDCARD),
    (r"(?<![\w.\-])[-+]?\d+(?:\.\d+)?(?![\w\-]|\.\d)", WILDCARD),
)


class EmptyState(RuntimeError):
    """No message has been parsed yet."""


@dataclass
class DrainConfig:
    tree_depth: int = 4
    similarity_threshold: float = 0.4
    max_children: int = 100
    mask_rules: tuple[tuple[str, str], ...] = DEFAULT_MASKS

    def __post_init__(self):
        if self.tree_depth < 3:
            raise ValueError("tree_depth must be >= 3")
        if not 0.0 < self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must lie in (0, 1]")
        if self.max_children < 2:
            raise ValueError("max_children must be >= 2")
        self.mask_rules = tuple((str(p), str(r)) for p, r in self.mask_rules)


@dataclass
class LogTemplate:
    template_id: int
    tokens: list[str]
    match_count: int = 0

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class _Node:
    children: dict[str, "_Node"] = field(default_factory=dict)
    clusters: list[int] = field(default_factory=list)


def _has_digit(tok: str) -> bool:
    return any(c.isdigit() for c in tok)


class DrainParser:
    """Mutable Drain parse tree. Single writer: callers serialize ``parse``."""

    def __init__(self, config: DrainConfig | None = None):
        self.config = config or DrainConfig()
        self._masks = [(re.compile(p), r) for p, r in self.config.mask_rules]
        self._root = _Node()
        self.templates: list[LogTemplate] = []
        self._exact: dict[tuple[str, ...], int] = {}

    # -- preprocessing -----------------------------------------------------

    def tokenize(self, message: str) -> list[str]:
        for pat, rep in self._masks:
            message = pat.sub(rep, message)
        return message.split()

    # -- tree search -------------------------------------------------------

    def _leaf(self, tokens: list[str], create: bool) -> _Node | None:
        node = self._root.children.get(str(len(tokens)))
        if node is None:
            if not create:
                return None
            node = self._root.children.setdefault(str(len(tokens)), _Node())
        prefix_len = min(self.config.tree_depth - 2, len(tokens))
        for tok in tokens[:prefix_len]:
            key = WILDCARD if _has_digit(tok) else tok
            nxt = node.children.get(key)
            if nxt is None and not create:
                nxt = node.children.get(WILDCARD)
                if nxt is None:
                    return None
            elif nxt is None:
                # max_children caps literal fan-out; overflow funnels into the wildcard child
                if len(node.children) + 1 < self.config.max_children or key == WILDCARD:
                    nxt = node.children.setdefault(key, _Node())
                else:
                    nxt = node.children.setdefault(WILDCARD, _Node())
            node = nxt
        return node

    @staticmethod
    def _similarity(template: list[str], tokens: list[str]) -> tuple[float, int]:
        same = 0
        params = 0
        for a, b in zip(template, tokens):
            if a == WILDCARD:
                params += 1
            elif a == b:
                same += 1
        return same / len(tokens) if tokens else 1.0, params

    def _best(self, leaf: _Node, tokens: list[str]) -> int | None:
        best, best_key = None, (-1.0, -1)
        for tid in leaf.clusters:
            sim, params = self._similarity(self.templates[tid].tokens, tokens)
            if (sim, params) > best_key:
                best, best_key = tid, (sim, params)
        if best is not None and best_key[0] >= self.config.similarity_threshold:
            return best
        return None

    # -- public API --------------------------------------------------------

    def match(self, message: str) -> int | None:
        """Template id for ``message`` without mutating state (None if unmatched)."""
        tokens = self.tokenize(message)
        hit = self._exact.get(tuple(tokens))
        if hit is not None:
            return hit
        leaf = self._leaf(tokens, create=False)
        if leaf is None:
            return None
        return self._best(leaf, tokens)

    def parse(self, message: str) -> int:
        tokens = self.tokenize(message)
        key = tuple(tokens)
        tid = self._exact.get(key)
        if tid is None:
            leaf = self._leaf(tokens, create=False)
            tid = self._best(leaf, tokens) if leaf is not None else None
            if tid is None:
                tid = len(self.templates)
                self.templates.append(LogTemplate(tid, list(tokens)))
                self._leaf(tokens, create=True).clusters.append(tid)
            else:
                tpl = self.templates[tid].tokens
                for i, (a, b) in enumerate(zip(tpl, tokens)):
                    if a != b:
                        tpl[i] = WILDCARD
            self._exact[key] = tid
        self.templates[tid].match_count += 1
        return tid

    def frequency_table(self) -> dict[int, int]:
        total = sum(t.match_count for t in self.templates)
        if total == 0:
            raise EmptyState("no messages parsed")
        return {t.template_id: t.match_count for t in self.templates}

    def template_text(self, template_id: int) -> str:
        return self.templates[template_id].text

    # -- persistence -------------------------------------------------------

    def to_json(self) -> list[dict]:
        return [{"id": t.template_id, "template": t.text, "count": t.match_count} for t in self.templates]

    @classmethod
    def from_json(cls, data: list[dict], config: DrainConfig | None = None) -> "DrainParser":
        parser = cls(config)
        for i, row in enumerate(sorted(data, key=lambda r: r["id"])):
            if row["id"] != i:
                raise ValueError("template ids must be contiguous from 0")
            tokens = row["template"].split()
            parser.templates.append(LogTemplate(i, tokens, int(row["count"])))
            parser._leaf(tokens, create=True).clusters.append(i)
        return parser

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path, config: DrainConfig | None = None) -> "DrainParser":
        return cls.from_json(json.loads(Path(path).read_text()), config)
