from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from errors import ConfigError

PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")
KNOWN_SLOTS = ("system", "user", "assistant")
DEFAULT_TEMPLATE = "S:{system}\nU:{user}\nA:{assistant}"


@dataclass(frozen=True)
class ChatTemplate:
    """Plain {system}/{user}/{assistant} substitution; a deliberate subset of template languages.

    Text after {assistant} is only rendered when a response is given.
    """

    source: str
    slots: tuple[str, ...] = field(init=False, default=())

    def __post_init__(self):
        found = [m.group(1) for m in PLACEHOLDER_RE.finditer(self.source)]
        unknown = sorted(set(found) - set(KNOWN_SLOTS))
        if unknown:
            raise ConfigError(f"chat template has unknown placeholder(s): {', '.join(unknown)}")
        for required in ("user", "assistant"):
            if found.count(required) != 1:
                raise ConfigError(f"chat template must contain exactly one {{{required}}} placeholder")
        object.__setattr__(self, "slots", tuple(found))

    @classmethod
    def from_file(cls, path: str | Path) -> "ChatTemplate":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"chat template file not found: {path}")
        return cls(path.read_text(encoding="utf-8"))

    def _substitute(self, text: str, values: dict[str, str]) -> str:
        return PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], text)

    def render(self, system: str, user: str, assistant: Optional[str] = None) -> tuple[str, tuple[int, int]]:
        head, tail = self.source.split("{assistant}", 1)
        values = {"system": system, "user": user}
        prefix = self._substitute(head, values)
        start = len(prefix.encode("utf-8"))
        if assistant is None:
            return prefix, (start, start)
        text = prefix + assistant + self._substitute(tail, values)
        return text, (start, start + len(assistant.encode("utf-8")))

    @property
    def ends_with_response(self) -> bool:
        return self.source.endswith("{assistant}")


def apply_chat_template(template: ChatTemplate, system: str, user: str,
                        assistant: Optional[str] = None) -> tuple[str, tuple[int, int]]:
    """Rendered conversation and the byte span of the assistant response."""
    return template.render(system, user, assistant)
