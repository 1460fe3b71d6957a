"""Turn free-form model output into stage objects without ever raising.

Repair ladder, each rung recorded as a flag on the outcome:

1. the whole text parses as a JSON object (no flag);
2. the first balanced ``{...}`` block parses, possibly after dropping
   trailing commas (``extracted``, ``repaired``);
3. per-field regex salvage of ``label`` / ``confidence`` / text fields
   (``salvaged``).

Values are then normalised: numeric strings become floats (``coerced``),
confidences are clamped into [0, 1] (``clamped``) and label synonyms map to
0/1. If nothing usable survives the outcome is ``parse_failure``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Any

# Stage names, shared by the reasoner, the store layout and the mock provider.
OBJECTIVE = "objective"
HATE = "hate"
NONHATE = "nonhate"
NEUTRAL = "neutral"
META = "meta"
SIMPLE = "simple"
COT_FRAMES = "cot_frames"
COT_TRANSCRIPT = "cot_transcript"
COT_INTEGRATE = "cot_integrate"
COT_SINGLE = "cot_single"

DESCRIPTION_SCHEMA = "description"
HYPOTHESIS_SCHEMA = "hypothesis"
DECISION_SCHEMA = "decision"

STAGE_SCHEMA = {
    OBJECTIVE: DESCRIPTION_SCHEMA,
    COT_FRAMES: DESCRIPTION_SCHEMA,
    COT_TRANSCRIPT: DESCRIPTION_SCHEMA,
    HATE: HYPOTHESIS_SCHEMA,
    NONHATE: HYPOTHESIS_SCHEMA,
    NEUTRAL: HYPOTHESIS_SCHEMA,
    META: DECISION_SCHEMA,
    SIMPLE: DECISION_SCHEMA,
    COT_INTEGRATE: DECISION_SCHEMA,
    COT_SINGLE: DECISION_SCHEMA,
}

PARSE_FAILURE = "parse_failure"

_POSITIVE = {"hateful", "hate", "yes", "1", "true", "hate speech", "offensive"}
_NEGATIVE = {
    "non hateful", "nonhateful", "not hateful", "non hate", "nonhate", "not hate",
    "no", "0", "false", "normal", "benign",
}


@dataclass
class ParseOutcome:
    data: dict[str, Any] | None
    flags: set[str] = field(default_factory=set)

    @property
    def ok(self) -> bool:
        return self.data is not None and PARSE_FAILURE not in self.flags


def map_label(value: Any) -> int | None:
    """Map a label value (string, bool or number) to 0/1, or None if unrecognised."""
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return int(value) if value in (0, 1) else None
    if not isinstance(value, str):
        return None
    key = re.sub(r"[\s_\-]+", " ", value.strip().strip(".!\"'").lower())
    if key in _POSITIVE:
        return 1
    if key in _NEGATIVE:
        return 0
    return None


def first_balanced_object(text: str) -> str | None:
    """Return the first ``{...}`` span whose braces balance, ignoring braces inside strings."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for pos in range(start, len(text)):
            ch = text[pos]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
            elif ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start : pos + 1]
        start = text.find("{", start + 1)
    return None


_TRAILING_COMMA = re.compile(r",\s*([}\]])")


def _loads_object(text: str) -> dict | None:
    try:
        value = json.loads(text)
    except (ValueError, RecursionError):
        return None
    return value if isinstance(value, dict) else None


def _field_regex(name: str) -> re.Pattern:
    return re.compile(
        rf"""["']?{name}["']?\s*[:=]\s*(?:"((?:[^"\\]|\\.)*)"?|'([^']*)'?|([^\s,}}\]]+))""",
        re.IGNORECASE,
    )


_SALVAGE_FIELDS = {
    DESCRIPTION_SCHEMA: ("description",),
    HYPOTHESIS_SCHEMA: ("evidence", "reasoning", "confidence"),
    DECISION_SCHEMA: ("label", "confidence", "rationale"),
}


def _salvage(text: str, schema: str) -> dict | None:
    found = {}
    for name in _SALVAGE_FIELDS[schema]:
        m = _field_regex(name).search(text)
        if m:
            found[name] = next(g for g in m.groups() if g is not None)
    return found or None


def _to_confidence(value: Any, flags: set[str]) -> float | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, str):
        text = value.strip().rstrip("%")
        try:
            number = float(text)
        except ValueError:
            return None
        if value.strip().endswith("%"):
            number /= 100.0
        flags.add("coerced")
    elif isinstance(value, (int, float)):
        number = float(value)
    else:
        return None
    if math.isnan(number):
        return None
    if number < 0.0 or number > 1.0:
        flags.add("clamped")
        number = min(1.0, max(0.0, number))
    return number


def _text(value: Any, flags: set[str]) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    flags.add("coerced")
    if isinstance(value, list):
        return "\n".join(_text(v, flags) for v in value)
    return json.dumps(value, ensure_ascii=False, sort_keys=True)


def _normalise(obj: dict, schema: str, flags: set[str]) -> dict | None:
    lowered = {str(k).strip().lower(): v for k, v in obj.items()}
    if schema == DESCRIPTION_SCHEMA:
        desc = _text(lowered.get("description"), flags).strip()
        return {"description": desc} if desc else None

    if schema == HYPOTHESIS_SCHEMA:
        if not any(k in lowered for k in ("evidence", "reasoning", "confidence")):
            return None
        conf = _to_confidence(lowered.get("confidence"), flags)
        if conf is None:
            flags.add("missing_confidence")
            conf = 0.0
        return {
            "evidence": _text(lowered.get("evidence"), flags),
            "reasoning": _text(lowered.get("reasoning"), flags),
            "confidence": conf,
        }

    label_value = lowered.get("label", lowered.get("prediction", lowered.get("answer")))
    label = map_label(label_value)
    if label is None:
        return None
    if not isinstance(label_value, str):
        flags.add("coerced")
    conf = _to_confidence(lowered.get("confidence"), flags)
    if conf is None:
        flags.add("missing_confidence")
        conf = 0.0
    factors = lowered.get("key_factors", [])
    if isinstance(factors, str):
        flags.add("coerced")
        factors = [f.strip() for f in re.split(r"[;\n]", factors) if f.strip()]
    elif not isinstance(factors, list):
        flags.add("coerced")
        factors = [_text(factors, flags)]
    return {
        "label": label,
        "confidence": conf,
        "key_factors": [_text(f, flags) for f in factors],
        "rationale": _text(lowered.get("rationale"), flags),
    }


def parse_stage_output(raw: Any, schema: str) -> ParseOutcome:
    """Parse raw model text against ``schema`` (description/hypothesis/decision).

    Never raises; a failed parse yields ``ParseOutcome(None, {"parse_failure", ...})``.
    """
    if schema not in _SALVAGE_FIELDS:
        raise ValueError(f"unknown schema {schema!r}")
    flags: set[str] = set()
    try:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8", "replace")
            flags.add("coerced")
        text = raw if isinstance(raw, str) else str(raw)

        candidates: list[tuple[dict, set[str]]] = []
        whole = _loads_object(text.strip())
        if whole is not None:
            candidates.append((whole, set()))
        else:
            block = first_balanced_object(text)
            if block is not None:
                obj = _loads_object(block)
                if obj is not None:
                    candidates.append((obj, {"extracted"}))
                else:
                    obj = _loads_object(_TRAILING_COMMA.sub(r"\1", block))
                    if obj is not None:
                        candidates.append((obj, {"extracted", "repaired"}))

        for obj, rung_flags in candidates:
            local = set(rung_flags)
            data = _normalise(obj, schema, local)
            if data is not None:
                return ParseOutcome(data, flags | local)

        salvaged = _salvage(text, schema)
        if salvaged is not None:
            local = {"salvaged"}
            data = _normalise(salvaged, schema, local)
            if data is not None:
                return ParseOutcome(data, flags | local)
    except Exception:  # noqa: BLE001 - the parser contract is "never crash"
        flags.add("parser_error")
    flags.add(PARSE_FAILURE)
    return ParseOutcome(None, flags)
