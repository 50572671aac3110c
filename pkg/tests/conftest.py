import json
import logging
import pathlib
import sys

import httpx
import pytest

# Ensure src/ is on sys.path so "controllers", "models", "services", "views" resolve.
SRC_DIR = pathlib.Path(__file__).resolve().parents[1] / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from models.chat_template import ChatTemplate  # noqa: E402
from models.tinylm import ModelConfig  # noqa: E402

FIXTURES = pathlib.Path(__file__).resolve().parent / "fixtures"
TINY_TEMPLATE = "U:{user}\nA:{assistant}"


def chat_body(content):
    return {
        "id": "chatcmpl-test",
        "object": "chat.completion",
        "created": 0,
        "model": "teacher",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    }


def sse_body(content, pieces=3):
    step = max(1, len(content) // pieces)
    parts = [content[i:i + step] for i in range(0, len(content), step)] or [""]
    lines = []
    for p in parts:
        chunk = {"id": "chatcmpl-test", "object": "chat.completion.chunk", "created": 0, "model": "teacher",
                 "choices": [{"index": 0, "delta": {"content": p}, "finish_reason": None}]}
        lines.append(f"data: {json.dumps(chunk)}\n\n")
    lines.append("data: [DONE]\n\n")
    return "".join(lines).encode()


class MockTeacher:
    """Chat-completions endpoint stand-in.

    `reply(user_text)` returns the completion text, or an httpx.Response to send as is.
    """

    def __init__(self, reply):
        self.reply = reply
        self.requests = []

    def handler(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        self.requests.append({"body": body, "headers": dict(request.headers)})
        out = self.reply(body["messages"][-1]["content"])
        if isinstance(out, httpx.Response):
            return out
        if body.get("stream"):
            return httpx.Response(200, content=sse_body(out), headers={"content-type": "text/event-stream"})
        return httpx.Response(200, json=chat_body(out))

    def client(self) -> httpx.Client:
        return httpx.Client(transport=httpx.MockTransport(self.handler))


class ScriptedClient:
    """In-process TeacherClient answering from a function of the prompt."""

    config_hash = "scripted"

    def __init__(self, reply):
        self.reply = reply
        self.prompts = []

    def complete(self, user, system=None, seed=None):
        self.prompts.append(user)
        return self.reply(user)


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=48, seed=0)


@pytest.fixture
def tiny_template():
    return ChatTemplate(TINY_TEMPLATE)


@pytest.fixture
def sample_config():
    def read(name: str) -> str:
        return (FIXTURES / f"{name}.json").read_text(encoding="utf-8")
    return read


@pytest.fixture
def mock_teacher():
    return MockTeacher


@pytest.fixture
def scripted_client():
    return ScriptedClient


@pytest.fixture(autouse=True)
def _no_env_key(monkeypatch):
    monkeypatch.delenv("ED_API_KEY", raising=False)


@pytest.fixture(autouse=True)
def _restore_root_logging():
    # main() reconfigures the root logger
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for h in root.handlers:
        if h not in handlers:
            root.removeHandler(h)
    for h in handlers:
        if h not in root.handlers:
            root.addHandler(h)
    root.setLevel(level)
