"""Prompt construction, chat-completions transport, transcripts and response parsing."""

from __future__ import annotations

import base64
import datetime as dt
import enum
import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx
import numpy as np

from .dsp import FeatureVector
from .errors import (
    AuthError,
    DuplicateStageExample,
    EmptyInput,
    EndpointError,
    MalformedResponse,
    PayloadKindMismatch,
    RateLimited,
    ReplayMiss,
    ServerError,
    Timeout,
    UnknownLabel,
    WrongExampleCount,
)
from .ingest import AttentionState, SleepStage
from .psqi import PSQIResponse, SleepQuality, to_prompt_text

log = logging.getLogger(__name__)


class Task(enum.Enum):
    ATTENTION = "attention"
    SLEEP_STAGE = "sleep_stage"
    SLEEP_QUALITY_PSQI = "sleep_quality_psqi"
    SLEEP_QUALITY_ACTIVITY = "sleep_quality_activity"
    FEEDBACK = "feedback"


class PayloadKind(enum.Enum):
    FEATURES = "features"
    WAVEFORM_IMAGE = "waveform_image"
    SPECTROGRAM_IMAGE = "spectrogram_image"
    PSQI_TEXT = "psqi_text"
    ACTOGRAM_IMAGE = "actogram_image"
    AVG_ACTIVITY_IMAGE = "avg_activity_image"

    @property
    def is_image(self) -> bool:
        return self.value.endswith("_image")


LEGAL_PAYLOADS = {
    Task.ATTENTION: {PayloadKind.FEATURES, PayloadKind.WAVEFORM_IMAGE, PayloadKind.SPECTROGRAM_IMAGE},
    Task.SLEEP_STAGE: {PayloadKind.FEATURES, PayloadKind.WAVEFORM_IMAGE, PayloadKind.SPECTROGRAM_IMAGE},
    Task.SLEEP_QUALITY_PSQI: {PayloadKind.PSQI_TEXT},
    Task.SLEEP_QUALITY_ACTIVITY: {PayloadKind.ACTOGRAM_IMAGE, PayloadKind.AVG_ACTIVITY_IMAGE},
}

EXPECTED_SCHEMA = {
    Task.ATTENTION: ("state", "confidence", "explanation"),
    Task.SLEEP_STAGE: ("description", "stage", "confidence", "explanation"),
    Task.SLEEP_QUALITY_PSQI: ("quality", "confidence", "explanation", "suggestions"),
    Task.SLEEP_QUALITY_ACTIVITY: ("quality", "confidence", "explanation", "suggestions"),
    Task.FEEDBACK: (),
}

LABEL_FIELD = {
    Task.ATTENTION: "state",
    Task.SLEEP_STAGE: "stage",
    Task.SLEEP_QUALITY_PSQI: "quality",
    Task.SLEEP_QUALITY_ACTIVITY: "quality",
}

# ---------------------------------------------------------------------------
# Payloads and bundles


@dataclass(frozen=True)
class ImageRef:
    media_type: str
    data_b64: str
    name: str = ""

    def __post_init__(self):
        if not self.media_type or not self.data_b64:
            raise ValueError("image parts need a media type and a base64 payload")

    @classmethod
    def from_png(cls, png: bytes, name: str = "") -> "ImageRef":
        return cls("image/png", base64.b64encode(png).decode("ascii"), name)

    @property
    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{self.data_b64}"


@dataclass(frozen=True)
class TextPart:
    text: str


def format_features(features, precision: int = 6) -> str:
    """One ``name: value`` line per feature, values at ``precision`` significant digits."""
    if isinstance(features, FeatureVector):
        items = zip(features.column_names(), features.all_values())
    else:
        items = features.items()
    return "\n".join(f"{name}: {float(value):.{precision}g}" for name, value in items)


@dataclass(frozen=True)
class Payload:
    kind: PayloadKind
    text: str | None = None
    image: ImageRef | None = None

    def __post_init__(self):
        if self.kind.is_image != (self.image is not None) or (self.text is None) == (self.image is None):
            raise PayloadKindMismatch(f"{self.kind.value} payload must carry exactly one matching body")

    @classmethod
    def features(cls, features) -> "Payload":
        return cls(PayloadKind.FEATURES, text=format_features(features))

    @classmethod
    def png(cls, kind: PayloadKind | str, png: bytes, name: str = "") -> "Payload":
        return cls(PayloadKind(kind), image=ImageRef.from_png(png, name))

    @classmethod
    def psqi(cls, response: PSQIResponse | str) -> "Payload":
        text = response if isinstance(response, str) else to_prompt_text(response)
        return cls(PayloadKind.PSQI_TEXT, text=text)

    def part(self):
        return self.image if self.image is not None else TextPart(self.text)


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_parts: tuple
    task: Task
    expected_schema: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "user_parts", tuple(self.user_parts))
        if not self.user_parts:
            raise ValueError("a prompt needs at least one user part")
        for p in self.user_parts:
            if not isinstance(p, (TextPart, ImageRef)):
                raise TypeError(f"unsupported prompt part {type(p).__name__}")

    @property
    def text(self) -> str:
        texts = [self.system_text] if self.system_text else []
        texts += [p.text for p in self.user_parts if isinstance(p, TextPart)]
        return "\n".join(texts)

    @property
    def images(self) -> list[ImageRef]:
        return [p for p in self.user_parts if isinstance(p, ImageRef)]

    def to_dict(self) -> dict:
        parts = []
        for p in self.user_parts:
            if isinstance(p, TextPart):
                parts.append({"type": "text", "text": p.text})
            else:
                parts.append({"type": "image", "media_type": p.media_type, "data": p.data_b64, "name": p.name})
        return {
            "system": self.system_text,
            "user": parts,
            "task": self.task.value,
            "expected_schema": list(self.expected_schema),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PromptBundle":
        parts = []
        for p in d["user"]:
            if p["type"] == "text":
                parts.append(TextPart(p["text"]))
            else:
                parts.append(ImageRef(p["media_type"], p["data"], p.get("name", "")))
        return cls(d["system"], tuple(parts), Task(d["task"]), tuple(d.get("expected_schema", ())))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def messages(self) -> list[dict]:
        out = [{"role": "system", "content": self.system_text}] if self.system_text else []
        if not self.images:
            out.append({"role": "user", "content": "\n\n".join(p.text for p in self.user_parts)})
            return out
        content = []
        for p in self.user_parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                content.append({"type": "image_url", "image_url": {"url": p.data_url}})
        out.append({"role": "user", "content": content})
        return out


# ---------------------------------------------------------------------------
# Templates

ANALYST_ROLE = "You are a data analyst who reviews EEG data and helps interpret participant’s conditions."
JSON_REQUEST = "Please return your response in JSON format."

ATTENTION_ZERO_SHOT = {
    PayloadKind.SPECTROGRAM_IMAGE: (
        "Please review the power spectrum data of EEG data.\n"
        "The data has an x-axis of time and a y-axis of frequency (0-40 Hz).\n"
    ),
    PayloadKind.WAVEFORM_IMAGE: (
        "Please review the EEG waveform data.\n"
        "The data has an x-axis of time and a y-axis of amplitude.\n"
    ),
    PayloadKind.FEATURES: "Please review the following features computed from a 10-s epoch of EEG data.\n",
}
ATTENTION_TAIL = (
    "The data is collected from healthy participants who went through cognitive tasks.\n"
    "We would like to classify the user state into 2 categories: focused or unfocused,\n"
    "confidence level (0-100%), and explanations.\n" + JSON_REQUEST
)

SLEEP_AXES = {
    PayloadKind.WAVEFORM_IMAGE: "The data has an x axis of time and a y axis of amplitude.\n",
    PayloadKind.SPECTROGRAM_IMAGE: "The data has an x axis of time and a y axis of frequency (0-40 Hz).\n",
}
STAGE_CODES = "return a number from 0 to 5 (0:wake, 1: stage 1, 2: stage 2, 3: stage 3 or 4, 4: REM, 5: unknown or movement)"

SLEEP_IN_CONTEXT_IMAGES = (
    "Please review the following 6 EEG data.\n"
    "{axes}"
    "The data is collected from healthy participants who went through sleep.\n"
    "The first 5 images were collected during wake state (W), stage 1, stage 2, stage 3&4, and REM sleep. Please provide\n"
    "1. a description of each image\n"
    "2. estimate the sleep stage of the 6th (last) image and " + STAGE_CODES + "\n"
    "3. confidence level (0-100%)\n"
    "4. explanations\n"
    "in JSON format."
)
SLEEP_ZERO_SHOT_IMAGE = (
    "Please review the following EEG data.\n"
    "{axes}"
    "The data is collected from healthy participants who went through sleep.\n"
    "Please provide\n"
    "1. a description of the image\n"
    "2. estimate the sleep stage of the image and " + STAGE_CODES + "\n"
    "3. confidence level (0-100%)\n"
    "4. explanations\n"
    "in JSON format."
)
SLEEP_FEATURES = (
    "Please review the following features computed from a 30-s epoch of EEG data.\n"
    "The data is collected from healthy participants who went through sleep.\n"
    "Please provide\n"
    "1. estimate the sleep stage and " + STAGE_CODES + "\n"
    "2. confidence level (0-100%)\n"
    "3. explanations\n"
    "in JSON format."
)

PSQI_ROLE = "You are a data analyst helping a neurologist understand human sleep data."
PSQI_TASK = (
    "Task: This is the data collected from users who fill out the Pittsburgh Sleep Quality Index questionnaire.\n"
    "Based on this data, please give me the following information.\n"
    "(1) if this person has good sleep quality or poor quality\n"
    "(2) confident level (0-100%)\n"
    "(3) explanations for the decision.\n"
    "(4) suggestions to improve sleep quality."
)

ACTIVITY_AXES = {
    PayloadKind.ACTOGRAM_IMAGE: "The data has an x-axis of time (midnight to midnight) and a y-axis of date.",
    PayloadKind.AVG_ACTIVITY_IMAGE: (
        "The data has an x-axis of time (midnight to midnight) and a y-axis of activity level averaged over days."
    ),
}
ACTIVITY_TEMPLATE = (
    "Please review the following graph made from smartphone activity sensor data.\n"
    "{axes} For each hour, we computed the mean of activities where 0: Stationary, 1: Walking, 2:Running, 3:Unknown. "
    "Please describe\n"
    "(1) estimated sleep quality (good or poor)\n"
    "(2) confidence (0-100%)\n"
    "(3) explanations\n"
    "(4) suggestions to improve sleep quality\n"
    "in JSON format."
)


def _check_kind(task: Task, payload: Payload):
    if task not in LEGAL_PAYLOADS or payload.kind not in LEGAL_PAYLOADS[task]:
        raise PayloadKindMismatch(f"{payload.kind.value} payload is not valid for task {task.value}")


def build_zero_shot(task: Task | str, payload: Payload) -> PromptBundle:
    task = Task(task)
    _check_kind(task, payload)
    schema = EXPECTED_SCHEMA[task]
    if task is Task.ATTENTION:
        text = ATTENTION_ZERO_SHOT[payload.kind] + ATTENTION_TAIL
        return PromptBundle(ANALYST_ROLE, (TextPart(text), payload.part()), task, schema)
    if task is Task.SLEEP_STAGE:
        if payload.kind is PayloadKind.FEATURES:
            return PromptBundle("", (TextPart(SLEEP_FEATURES), payload.part()), task, schema)
        text = SLEEP_ZERO_SHOT_IMAGE.format(axes=SLEEP_AXES[payload.kind])
        return PromptBundle("", (TextPart(text), payload.part()), task, schema)
    if task is Task.SLEEP_QUALITY_PSQI:
        # the questionnaire template asks for no format, so the JSON request follows the data
        return PromptBundle(PSQI_ROLE, (TextPart(PSQI_TASK), payload.part(), TextPart(JSON_REQUEST)), task, schema)
    text = ACTIVITY_TEMPLATE.format(axes=ACTIVITY_AXES[payload.kind])
    return PromptBundle("", (TextPart(text), payload.part()), task, schema)


def label_text(label) -> str:
    return getattr(label, "text", str(label))


def _ordinal(n: int) -> str:
    suffix = "th" if 10 <= n % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def _feature_examples(examples, query: Payload) -> str:
    blocks = []
    for i, (payload, label) in enumerate(examples, 1):
        blocks.append(f"Example {i}:\n{payload.text}\n→ {label_text(label)}")
    blocks.append(f"Query:\n{query.text}\n→ ?")
    return "\n\n".join(blocks)


def build_in_context(task: Task | str, examples: Sequence[tuple[Payload, object]], query: Payload) -> PromptBundle:
    """Prompt with labelled exemplars ahead of the query.

    The sleep-stage image variant takes exactly one exemplar per stage W, 1, 2,
    3&4 and REM; they are placed in that order whatever order they arrive in.
    """
    task = Task(task)
    examples = list(examples)
    if not examples:
        raise WrongExampleCount("in-context prompts need at least one example")
    _check_kind(task, query)
    for payload, _ in examples:
        if payload.kind is not query.kind:
            raise PayloadKindMismatch("examples and query must share a payload kind")
    schema = EXPECTED_SCHEMA[task]

    if task is Task.SLEEP_STAGE and query.kind.is_image:
        if len(examples) != 5:
            raise WrongExampleCount(f"expected 5 stage exemplars, got {len(examples)}")
        by_stage = {}
        for payload, label in examples:
            stage = SleepStage.parse(label)
            if stage in by_stage:
                raise DuplicateStageExample(f"two exemplars for stage {stage.short}")
            by_stage[stage] = payload
        wanted = [SleepStage.WAKE, SleepStage.STAGE1, SleepStage.STAGE2, SleepStage.STAGE34, SleepStage.REM]
        if set(by_stage) != set(wanted):
            raise WrongExampleCount("exemplars must cover W, 1, 2, 3&4 and REM")
        text = SLEEP_IN_CONTEXT_IMAGES.format(axes=SLEEP_AXES[query.kind])
        parts = [TextPart(text)] + [by_stage[s].part() for s in wanted] + [query.part()]
        return PromptBundle("", tuple(parts), task, schema)

    if query.kind is PayloadKind.FEATURES:
        if task is Task.ATTENTION:
            head = ATTENTION_ZERO_SHOT[PayloadKind.FEATURES] + ATTENTION_TAIL
            system = ANALYST_ROLE
        elif task is Task.SLEEP_STAGE:
            head, system = SLEEP_FEATURES, ""
        else:
            raise PayloadKindMismatch(f"feature exemplars are not defined for {task.value}")
        intro = "Labelled examples follow, each as feature lines then → label. Classify the query the same way."
        body = _feature_examples(examples, query)
        return PromptBundle(system, (TextPart(head), TextPart(intro), TextPart(body)), task, schema)

    if task is Task.ATTENTION:
        n = len(examples)
        states = ", ".join(label_text(AttentionState.parse(l)) for _, l in examples)
        axes = ATTENTION_ZERO_SHOT[query.kind].split("\n", 1)[1]
        text = (
            f"Please review the following {n + 1} EEG data.\n"
            f"{axes}"
            "The data is collected from healthy participants who went through cognitive tasks.\n"
            f"The first {n} images were collected during these states in order: {states}.\n"
            f"We would like to classify the user state of the {_ordinal(n + 1)} (last) image into 2 categories: "
            "focused or unfocused,\n"
            "confidence level (0-100%), and explanations.\n" + JSON_REQUEST
        )
        parts = [TextPart(text)] + [p.part() for p, _ in examples] + [query.part()]
        return PromptBundle(ANALYST_ROLE, tuple(parts), task, schema)

    raise PayloadKindMismatch(f"no in-context template for {task.value} with {query.kind.value}")


def select_exemplars(labels: Sequence, wanted: Sequence, seed: int = 0) -> list[int]:
    """Indices of one seeded pick per wanted label from a labelled pool."""
    rng = np.random.default_rng(seed)
    picks = []
    for label in wanted:
        pool = [i for i, l in enumerate(labels) if l == label]
        if not pool:
            raise UnknownLabel(f"no candidate exemplar with label {label_text(label)!r}")
        picks.append(int(pool[rng.integers(len(pool))]))
    return picks


# ---------------------------------------------------------------------------
# Fine-tune export


def canonical_label(task: Task, label) -> str:
    if task is Task.ATTENTION:
        return AttentionState.parse(label).text
    if task is Task.SLEEP_STAGE:
        return SleepStage.parse(label).text
    return SleepQuality.parse(label).text


def finetune_bundle(task: Task | str, payload: Payload) -> PromptBundle:
    """The chat layout used both for fine-tuning examples and for querying the tuned model."""
    task = Task(task)
    if task not in (Task.ATTENTION, Task.SLEEP_STAGE) or payload.kind is not PayloadKind.FEATURES:
        raise PayloadKindMismatch("fine-tuning covers the feature-based detection tasks only")
    zero = build_zero_shot(task, payload)
    instruction = "\n".join(t for t in (zero.system_text, zero.user_parts[0].text) if t)
    return PromptBundle(instruction, (payload.part(),), task, EXPECTED_SCHEMA[task])


def export_finetune_jsonl(rows: Iterable[tuple[object, object]], task: Task | str) -> bytes:
    """Chat-format fine-tuning examples, one JSON object per line, in input order.

    ``rows`` pairs feature data (a FeatureVector or a name -> value mapping) with its label.
    """
    task = Task(task)
    lines = []
    for features, label in rows:
        msg = finetune_bundle(task, Payload.features(features)).messages()
        msg.append({"role": "assistant", "content": canonical_label(task, label)})
        lines.append(json.dumps({"messages": msg}, ensure_ascii=False))
    if not lines:
        raise EmptyInput("nothing to export")
    return ("\n".join(lines) + "\n").encode("utf-8")


def finetune_labels(data: bytes, task: Task | str) -> list:
    task = Task(task)
    parse = AttentionState.parse if task is Task.ATTENTION else SleepStage.parse
    out = []
    for line in data.decode("utf-8").splitlines():
        if line.strip():
            out.append(parse(json.loads(line)["messages"][-1]["content"]))
    return out


# ---------------------------------------------------------------------------
# Transport


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4"
    api_key_env_var: str = "OPENAI_API_KEY"
    max_parallel: int = 4
    timeout_s: int = 60
    max_retries: int = 3
    temperature: float = 0.0
    backoff_s: float = 1.0

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be at least 1")
        if self.timeout_s < 1 or self.max_retries < 0:
            raise ValueError("timeout_s must be positive and max_retries non-negative")

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env_var, "")
        if not key:
            raise AuthError(f"environment variable {self.api_key_env_var} is not set")
        return key


@dataclass
class ChatResult:
    content: str
    status: int
    attempts: int
    request: dict = field(repr=False)


def request_body(bundle: PromptBundle, endpoint: EndpointConfig) -> dict:
    return {"model": endpoint.model_name, "messages": bundle.messages(), "temperature": endpoint.temperature}


def _content(payload) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise MalformedResponse("response has no choices[0].message.content") from None
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise MalformedResponse("message content is not text")
    return content


def chat_complete_detailed(
    bundle: PromptBundle,
    endpoint: EndpointConfig,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> ChatResult:
    body = request_body(bundle, endpoint)
    headers = {"Authorization": f"Bearer {endpoint.api_key()}"}
    own = client is None
    if own:
        client = httpx.Client(timeout=endpoint.timeout_s)
    try:
        attempt = 0
        while True:
            attempt += 1
            try:
                resp = client.post(endpoint.url, json=body, headers=headers, timeout=endpoint.timeout_s)
            except httpx.TimeoutException as exc:
                if attempt > endpoint.max_retries:
                    raise Timeout(f"no response within {endpoint.timeout_s} s") from exc
                sleep(endpoint.backoff_s * 2 ** (attempt - 1))
                continue
            except httpx.HTTPError as exc:
                raise EndpointError(f"request failed: {exc}") from exc
            status = resp.status_code
            if status in (401, 403):
                raise AuthError(f"endpoint rejected credentials ({status})")
            if status == 429 or status >= 500:
                if attempt > endpoint.max_retries:
                    err = RateLimited if status == 429 else ServerError
                    raise err(f"giving up after {attempt} attempts (last status {status})")
                log.info("status %d, retrying (attempt %d)", status, attempt)
                sleep(endpoint.backoff_s * 2 ** (attempt - 1))
                continue
            if status >= 400:
                raise EndpointError(f"endpoint returned {status}: {resp.text[:200]}")
            try:
                payload = resp.json()
            except ValueError:
                raise MalformedResponse("response body is not JSON") from None
            return ChatResult(_content(payload), status, attempt, body)
    finally:
        if own:
            client.close()


def chat_complete(bundle: PromptBundle, endpoint: EndpointConfig, client: httpx.Client | None = None,
                  sleep: Callable[[float], None] = time.sleep) -> str:
    return chat_complete_detailed(bundle, endpoint, client, sleep).content


class TranscriptWriter:
    """Append-only JSONL log of requests and raw responses, safe to share between threads."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, bundle: PromptBundle, request: dict | None, status: int | None, response: str | None,
               error: str | None = None):
        record = {
            "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(),
            "bundle_hash": bundle.digest,
            "task": bundle.task.value,
            "request": request,
            "status": status,
            "response": response,
            "error": error,
        }
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def transcript_record(bundle: PromptBundle, response: str, status: int = 200) -> dict:
    """A transcript entry for a known response, used to build replay fixtures."""
    return {"timestamp": "", "bundle_hash": bundle.digest, "task": bundle.task.value, "request": None,
            "status": status, "response": response, "error": None}


def write_transcript(path, records: Iterable[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


class Transcript:
    """Replay source: the last successful response recorded for each bundle hash."""

    def __init__(self, responses: Mapping[str, str]):
        self.responses = dict(responses)

    @classmethod
    def load(cls, path) -> "Transcript":
        responses = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec.get("response") is not None:
                    responses[rec["bundle_hash"]] = rec["response"]
        return cls(responses)

    def __len__(self):
        return len(self.responses)

    def replay(self, bundle: PromptBundle) -> str:
        try:
            return self.responses[bundle.digest]
        except KeyError:
            raise ReplayMiss(f"no recorded response for bundle {bundle.digest[:12]}") from None


def run_batch(
    bundles: Sequence[PromptBundle],
    endpoint: EndpointConfig,
    transcript: TranscriptWriter | None = None,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list:
    """Send every bundle with at most ``max_parallel`` requests in flight.

    Returns one entry per bundle in input order: the response text, or the
    EndpointError raised for it. Auth failures abort the batch.
    """
    endpoint.api_key()
    own = client is None
    if own:
        limits = httpx.Limits(max_connections=endpoint.max_parallel)
        client = httpx.Client(timeout=endpoint.timeout_s, limits=limits)

    def one(bundle):
        try:
            res = chat_complete_detailed(bundle, endpoint, client, sleep)
        except AuthError:
            raise
        except EndpointError as exc:
            if transcript:
                transcript.append(bundle, request_body(bundle, endpoint), None, None, f"{type(exc).__name__}: {exc}")
            return exc
        if transcript:
            transcript.append(bundle, res.request, res.status, res.content)
        return res.content

    try:
        with ThreadPoolExecutor(max_workers=endpoint.max_parallel) as pool:
            return list(pool.map(one, bundles))
    finally:
        if own:
            client.close()


# ---------------------------------------------------------------------------
# Response parsing

REFUSAL_PATTERNS = (
    "cannot assist",
    "do not have the capability",
    "i'm unable",
    "requires machine learning models",
)

LABEL_SYNONYMS = {
    Task.ATTENTION: {
        "focused": AttentionState.FOCUSED,
        "focus": AttentionState.FOCUSED,
        "attentive": AttentionState.FOCUSED,
        "unfocused": AttentionState.UNFOCUSED,
        "not focused": AttentionState.UNFOCUSED,
        "drowsy": AttentionState.UNFOCUSED,
        "distracted": AttentionState.UNFOCUSED,
    },
    Task.SLEEP_STAGE: {
        "0": SleepStage.WAKE,
        "wake": SleepStage.WAKE,
        "1": SleepStage.STAGE1,
        "2": SleepStage.STAGE2,
        "3": SleepStage.STAGE34,
        "4": SleepStage.REM,
        "5": SleepStage.UNKNOWN_OR_MOVEMENT,
        "stage 3 or 4": SleepStage.STAGE34,
        "rem": SleepStage.REM,
    },
    Task.SLEEP_QUALITY_PSQI: {"good": SleepQuality.GOOD, "poor": SleepQuality.POOR, "bad": SleepQuality.POOR},
    Task.SLEEP_QUALITY_ACTIVITY: {"good": SleepQuality.GOOD, "poor": SleepQuality.POOR, "bad": SleepQuality.POOR},
}

_LABEL_KEYS = {
    Task.ATTENTION: ("state", "user_state", "attention_state", "attention", "classification", "category"),
    Task.SLEEP_STAGE: ("stage", "sleep_stage", "estimated_sleep_stage", "estimated_stage"),
    Task.SLEEP_QUALITY_PSQI: ("quality", "sleep_quality", "estimated_sleep_quality"),
    Task.SLEEP_QUALITY_ACTIVITY: ("quality", "sleep_quality", "estimated_sleep_quality"),
}
_GENERIC_LABEL_KEYS = ("label", "prediction", "class", "result")
_STEMS = {Task.ATTENTION: "state", Task.SLEEP_STAGE: "stage",
          Task.SLEEP_QUALITY_PSQI: "quality", Task.SLEEP_QUALITY_ACTIVITY: "quality"}
_PARSERS = {Task.ATTENTION: AttentionState.parse, Task.SLEEP_STAGE: SleepStage.parse,
            Task.SLEEP_QUALITY_PSQI: SleepQuality.parse, Task.SLEEP_QUALITY_ACTIVITY: SleepQuality.parse}


@dataclass(frozen=True)
class LLMInference:
    label: object | None
    confidence: int | None
    explanation: str
    refusal: bool = False
    raw: str = field(default="", compare=False)
    unparseable: bool = False

    def __post_init__(self):
        if self.refusal and self.label is not None:
            raise ValueError("a refusal carries no label")
        if self.confidence is not None and not 0 <= self.confidence <= 100:
            raise ValueError("confidence must lie in 0-100")


def _norm_key(key) -> str:
    return re.sub(r"[^a-z0-9]+", "_", str(key).lower()).strip("_")


def first_json_object(text: str) -> dict | None:
    """The first decodable JSON object in ``text``; fences and surrounding prose are skipped."""
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except ValueError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _walk(obj: dict):
    """Key/value pairs of a JSON object, breadth first through nested objects."""
    queue = [obj]
    while queue:
        cur = queue.pop(0)
        for k, v in cur.items():
            yield _norm_key(k), v
            if isinstance(v, dict):
                queue.append(v)


def _map_label(value, task: Task, synonyms: Mapping):
    if isinstance(value, bool) or value is None or isinstance(value, (dict, list)):
        return None
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    key = re.sub(r"\s+", " ", str(value).strip().lower())
    if key in synonyms:
        return synonyms[key]
    try:
        return _PARSERS[task](key)
    except UnknownLabel:
        return None


def _find_label(obj: dict, task: Task, synonyms: Mapping):
    pairs = list(_walk(obj))
    for keys in (_LABEL_KEYS[task], _GENERIC_LABEL_KEYS):
        for k, v in pairs:
            if k in keys:
                label = _map_label(v, task, synonyms)
                if label is not None:
                    return label
    stem = _STEMS[task]
    for k, v in pairs:
        if stem in k and "confiden" not in k and "description" not in k:
            label = _map_label(v, task, synonyms)
            if label is not None:
                return label
    return None


def _find_confidence(obj: dict) -> int | None:
    for k, v in _walk(obj):
        if "confiden" not in k or isinstance(v, bool):
            continue
        if isinstance(v, (int, float)):
            number = float(v)
        else:
            m = re.search(r"-?\d+(?:\.\d+)?", str(v))
            if not m:
                continue
            number = float(m.group())
        return int(round(min(100.0, max(0.0, number))))
    return None


def _find_explanation(obj: dict) -> str:
    for k, v in _walk(obj):
        if "explanation" in k or "reason" in k or "rationale" in k:
            if isinstance(v, str):
                return v
            if isinstance(v, list):
                return " ".join(str(x) for x in v)
            return json.dumps(v, sort_keys=True)
    return ""


def is_refusal_text(text: str, patterns: Sequence[str] = REFUSAL_PATTERNS) -> bool:
    low = text.lower().replace("’", "'")
    return any(p.lower() in low for p in patterns)


def parse_inference(
    raw: str,
    task: Task | str,
    synonyms: Mapping | None = None,
    refusal_patterns: Sequence[str] = REFUSAL_PATTERNS,
) -> LLMInference:
    task = Task(task)
    table = {**LABEL_SYNONYMS.get(task, {}), **(synonyms or {})}
    obj = first_json_object(raw)
    label = confidence = None
    explanation = ""
    if obj is not None:
        label = _find_label(obj, task, table)
        confidence = _find_confidence(obj)
        explanation = _find_explanation(obj)
    if label is not None:
        return LLMInference(label, confidence, explanation, False, raw)
    if is_refusal_text(raw, refusal_patterns):
        return LLMInference(None, None, raw.strip(), True, raw)
    if obj is None:
        explanation = raw.strip()
    return LLMInference(None, confidence, explanation, False, raw, unparseable=True)


def serialize_inference(inf: LLMInference, task: Task | str) -> str:
    task = Task(task)
    if inf.refusal:
        return inf.explanation
    out = {}
    if inf.label is not None:
        value = inf.label.text
        out[LABEL_FIELD[task]] = int(value) if task is Task.SLEEP_STAGE else value
    if inf.confidence is not None:
        out["confidence"] = inf.confidence
    out["explanation"] = inf.explanation
    return json.dumps(out, ensure_ascii=False)
