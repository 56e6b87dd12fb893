"""Natural language to operator expressions.

An agent client turns a question plus a catalog summary into one operator
expression. :class:`RuleStub` does this with a fixed keyword grammar (for
tests and offline use); :class:`RemoteAgent` asks a chat-completion
endpoint. :func:`translate_nl` parses the output and, when it does not
parse, gives the agent exactly one chance to repair it.
"""

from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Mapping, Optional, Protocol

from . import algebra as A
from .language import ExpressionError, parse_expression
from .servers.vision import COLORS, COUNT_WORDS, plural, singular

GRAMMAR = """\
pipeline  := stage ('|' stage)*
stage     := scan(<dataset>) | filter(<predicate>) | project(<column>, ...) | limit(<int>)
           | join(<pipeline>, <column> == <column>)
           | sem_match(<modality>, "<text>" [, <threshold>])
           | sem_join(<pipeline>, <modality>, "<text>" [, <threshold>])
           | sem_extract(<modality>, <field>, ...)
predicate := comparisons (== != < <= > >= contains) combined with and / or / not
modality  := relational | semistructured | text | image | vector"""

PROMPT_TEMPLATE = """\
You translate questions about a multi-modal data lake into ONE operator expression.
Reply with the expression only: no prose, no code fences.

Grammar:
{grammar}

Catalog:
{catalog}

Rules: start every pipeline with scan; use filter for conditions on table columns;
use sem_match(image, "images with ...") for conditions that need looking at photos.
{repair}
Question: {query}
Expression:"""


class AgentUnreachable(ConnectionError):
    pass


class UntranslatableError(ValueError):
    def __init__(self, query: str, attempts: list[tuple[str, str]]):
        detail = "; ".join(f"{out!r}: {err}" for out, err in attempts) or "no output"
        super().__init__(f"could not translate {query!r} ({detail})")
        self.query = query
        self.attempts = attempts


class AgentClient(Protocol):
    def translate(self, query: str, catalog: str, repair: Optional[str] = None) -> str: ...


def catalog_summary(catalog: Mapping[str, A.DatasetRef]) -> str:
    lines = []
    for name in sorted(catalog):
        ds = catalog[name]
        cols = ", ".join(f"{c}:{t}" for c, t in ds.schema) or "-"
        lines.append(f"- {name} ({ds.modality.token}): {cols}")
    return "\n".join(lines)


MATERIALS = ("leather", "wood", "wooden", "metal", "glass", "fabric", "velvet", "oak", "pine",
             "rattan", "plastic", "marble", "wicker")
_COUNT_NAMES = {1: "a", **{v: k for k, v in COUNT_WORDS.items() if v > 1}}
_STOP = {"find", "show", "me", "get", "list", "search", "for", "of", "with", "the", "some", "any",
         "please", "i", "want", "need", "looking", "all"}


@dataclass(frozen=True)
class RuleStub:
    """Deterministic keyword translator for furniture questions.

    Count words and colours describe what must be visible in a photo;
    materials and the word "set" become column filters on ``base_table``; a
    single named object also filters ``category``. Anything visual is checked
    by a SemMatch on the photos reached through ``link_table``.
    """

    base_table: str = "furniture"
    link_table: str = "image"
    link_keys: tuple[str, str] = ("furniture.id", "image.fid")
    threshold: float = 0.5

    def analyse(self, query: str) -> tuple[list[str], Optional[str]]:
        words = re.findall(r"[a-z0-9]+", query.lower())
        rel: list[str] = []
        terms: list[tuple[Optional[int], Optional[str], str]] = []
        objects: list[str] = []
        count: Optional[int] = None
        color: Optional[str] = None
        for w in words:
            if w in COUNT_WORDS or w.isdigit():
                count = int(w) if w.isdigit() else COUNT_WORDS[w]
            elif w in COLORS:
                color = w
            elif w in MATERIALS:
                mat = "wood" if w == "wooden" else w
                rel.append(f'material == "{mat}"')
            elif w in ("set", "sets"):
                rel.append('title contains "set"')
                count = None
            elif singular(w) is not None:
                obj = singular(w)
                terms.append((count, color, obj))
                objects.append(obj)
                count, color = None, None
            elif w == "and" or w in _STOP:
                continue
        if len(set(objects)) == 1:
            rel.insert(0, f'category == "{objects[0]}"')
        if not terms:
            return rel, None
        rendered = []
        for n, c, obj in terms:
            parts = []
            if n is not None:
                parts.append(_COUNT_NAMES.get(n, str(n)))
            if c:
                parts.append(c)
            parts.append(plural(obj) if (n or 1) > 1 else obj)
            rendered.append(" ".join(parts))
        return rel, "images with " + " and ".join(rendered)

    def translate(self, query: str, catalog: str = "", repair: Optional[str] = None) -> str:
        rel, image_pred = self.analyse(query)
        if not rel and image_pred is None:
            return ""
        expr = f"scan({self.base_table})"
        if rel:
            expr += f" | filter({' and '.join(rel)})"
        if image_pred is not None:
            a, b = self.link_keys
            expr += (f" | join(scan({self.link_table}), {a} == {b})"
                     f" | sem_match(image, {json.dumps(image_pred)}, {self.threshold})")
        return expr


def strip_fences(text: str) -> str:
    text = text.strip()
    m = re.match(r"^```[a-zA-Z]*\n(.*?)\n?```$", text, re.S)
    if m:
        text = m.group(1).strip()
    if text.lower().startswith("expression:"):
        text = text[len("expression:"):].strip()
    return text


class RemoteAgent:
    """Chat-completion client.

    Endpoint, key and model come from ``TAIJI_AGENT_URL``,
    ``TAIJI_AGENT_KEY`` and ``TAIJI_AGENT_MODEL`` unless given.
    """

    def __init__(self, endpoint: Optional[str] = None, api_key: Optional[str] = None,
                 model: Optional[str] = None, timeout: float = 60.0):
        self.endpoint = endpoint or os.environ.get("TAIJI_AGENT_URL", "")
        self.api_key = api_key if api_key is not None else os.environ.get("TAIJI_AGENT_KEY")
        self.model = model or os.environ.get("TAIJI_AGENT_MODEL", "default")
        self.timeout = timeout

    def prompt(self, query: str, catalog: str, repair: Optional[str] = None) -> str:
        note = f"\nYour previous answer did not parse: {repair}\nFix it.\n" if repair else ""
        return PROMPT_TEMPLATE.format(grammar=GRAMMAR, catalog=catalog, repair=note, query=query)

    def translate(self, query: str, catalog: str, repair: Optional[str] = None) -> str:
        if not self.endpoint:
            raise AgentUnreachable("no agent endpoint configured (TAIJI_AGENT_URL)")
        body = {"model": self.model, "temperature": 0,
                "messages": [{"role": "user", "content": self.prompt(query, catalog, repair)}]}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, json.dumps(body).encode(), headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                doc = json.loads(resp.read())
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise AgentUnreachable(f"{self.endpoint}: {exc}") from exc
        try:
            return strip_fences(doc["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError) as exc:
            raise AgentUnreachable(f"unexpected agent response shape: {exc}") from exc


MAX_REPAIRS = 1


def translate_nl(query: str, client: AgentClient, catalog: Mapping[str, A.DatasetRef]) -> A.QueryPlan:
    summary = catalog_summary(catalog)
    attempts: list[tuple[str, str]] = []
    repair = None
    for _ in range(1 + MAX_REPAIRS):
        text = client.translate(query, summary, repair)
        try:
            return parse_expression(text, catalog)
        except (ExpressionError, A.InvalidPlanError) as exc:
            repair = f"{exc} in {text!r}"
            attempts.append((text, str(exc)))
    raise UntranslatableError(query, attempts)
