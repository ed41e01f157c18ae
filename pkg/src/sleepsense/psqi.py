"""Pittsburgh Sleep Quality Index: responses, component scoring and text rendering."""

from __future__ import annotations

import csv
import datetime as dt
import enum
from dataclasses import dataclass, fields
from typing import Sequence

from .errors import DataError, EmptyEvaluation, IncompleteResponse, LengthMismatch, MissingColumn, UnknownLabel


class SleepQuality(enum.IntEnum):
    GOOD = 0
    POOR = 1

    @property
    def text(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "SleepQuality":
        if isinstance(value, SleepQuality):
            return value
        key = str(value).strip().lower()
        if key in ("good", "good sleeper", "good sleep quality", "good quality", "0"):
            return cls.GOOD
        if key in ("poor", "bad", "poor sleeper", "poor sleep quality", "poor quality", "1"):
            return cls.POOR
        raise UnknownLabel(f"unrecognised sleep quality {value!r}")


FREQUENCY_ANSWERS = (
    "Not during the past month",
    "Less than once a week",
    "Once or twice a week",
    "Three or more times a week",
)
QUALITY_ANSWERS = ("Very good", "Fairly good", "Fairly bad", "Very bad")
PROBLEM_ANSWERS = (
    "No problem at all",
    "Only a very slight problem",
    "Somewhat of a problem",
    "A very big problem",
)

DISTURBANCE_ITEMS = (
    "wake_middle_night",
    "bathroom",
    "cannot_breathe",
    "cough_snore",
    "too_cold",
    "too_hot",
    "bad_dreams",
    "pain",
    "other_frequency",
)

ORDINAL_ITEMS = ("cannot_sleep_30min",) + DISTURBANCE_ITEMS + (
    "subjective_quality",
    "medication",
    "trouble_staying_awake",
    "enthusiasm_problem",
)


@dataclass(frozen=True)
class PSQIResponse:
    """One completed questionnaire. Ordinal items are 0-3 codes."""

    bedtime: str | None = None  # "HH:MM"
    latency_min: float | None = None
    waketime: str | None = None
    sleep_hours: float | None = None
    cannot_sleep_30min: int | None = None
    wake_middle_night: int | None = None
    bathroom: int | None = None
    cannot_breathe: int | None = None
    cough_snore: int | None = None
    too_cold: int | None = None
    too_hot: int | None = None
    bad_dreams: int | None = None
    pain: int | None = None
    other_frequency: int | None = None
    subjective_quality: int | None = None
    medication: int | None = None
    trouble_staying_awake: int | None = None
    enthusiasm_problem: int | None = None
    other_reason: str | None = None

    def __post_init__(self):
        for name in ORDINAL_ITEMS:
            v = getattr(self, name)
            if v is not None and v not in (0, 1, 2, 3):
                raise DataError(f"{name} must be an ordinal code 0-3, got {v!r}")
        if self.sleep_hours is not None and not 0 <= self.sleep_hours <= 24:
            raise DataError("sleep_hours must lie in [0, 24]")
        if self.latency_min is not None and self.latency_min < 0:
            raise DataError("latency_min must be non-negative")
        for name in ("bedtime", "waketime"):
            if getattr(self, name) is not None:
                _clock_minutes(getattr(self, name))

    def missing(self) -> list[str]:
        # "other" frequency is optional when no other reason was given
        optional = {"other_reason"} | ({"other_frequency"} if not self.other_reason else set())
        return [f.name for f in fields(self) if f.name not in optional and getattr(self, f.name) is None]

    def require_complete(self) -> None:
        missing = self.missing()
        if missing:
            raise IncompleteResponse(missing)

    def replace(self, **changes) -> "PSQIResponse":
        return PSQIResponse(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **changes})


def _clock_minutes(text) -> int:
    if isinstance(text, dt.time):
        return text.hour * 60 + text.minute
    try:
        t = dt.datetime.strptime(str(text).strip(), "%H:%M")
    except ValueError:
        raise DataError(f"clock time {text!r} is not HH:MM") from None
    return t.hour * 60 + t.minute


def time_in_bed_hours(bedtime: str, waketime: str) -> float:
    minutes = (_clock_minutes(waketime) - _clock_minutes(bedtime)) % (24 * 60)
    # equal bed and wake times means a full day in bed rather than none
    return (minutes or 24 * 60) / 60.0


@dataclass(frozen=True)
class PSQIScore:
    subjective_quality: int
    latency: int
    duration: int
    efficiency: int
    disturbances: int
    medication: int
    daytime_dysfunction: int

    def __post_init__(self):
        for name in self.component_names():
            if getattr(self, name) not in (0, 1, 2, 3):
                raise DataError(f"component {name} must lie in 0-3")

    @staticmethod
    def component_names() -> tuple:
        return tuple(f.name for f in fields(PSQIScore))

    @property
    def components(self) -> tuple:
        return tuple(getattr(self, n) for n in self.component_names())

    @property
    def global_score(self) -> int:
        return sum(self.components)


# (upper bound inclusive, component value); the last row catches everything above
_LATENCY_MINUTES = ((15, 0), (30, 1), (60, 2), (float("inf"), 3))
_LATENCY_SUM = ((0, 0), (2, 1), (4, 2), (6, 3))
_DISTURBANCE_SUM = ((0, 0), (9, 1), (18, 2), (27, 3))
_DYSFUNCTION_SUM = ((0, 0), (2, 1), (4, 2), (6, 3))
# (lower bound inclusive, component value), checked in order
_DURATION_HOURS = ((7, 0), (6, 1), (5, 2), (float("-inf"), 3))
_EFFICIENCY_PCT = ((85, 0), (75, 1), (65, 2), (float("-inf"), 3))


def _band_upper(value, table) -> int:
    for bound, score in table:
        if value <= bound:
            return score
    raise DataError(f"value {value} outside scoring table")


def _band_lower(value, table, strict_first=False) -> int:
    for i, (bound, score) in enumerate(table):
        if (value > bound) if (strict_first and i == 0) else (value >= bound):
            return score
    raise DataError(f"value {value} outside scoring table")


def sleep_efficiency_pct(resp: PSQIResponse) -> float:
    return 100.0 * resp.sleep_hours / time_in_bed_hours(resp.bedtime, resp.waketime)


def score_components(resp: PSQIResponse) -> PSQIScore:
    resp.require_complete()
    latency = _band_upper(resp.latency_min, _LATENCY_MINUTES) + resp.cannot_sleep_30min
    disturbance_sum = sum(getattr(resp, n) or 0 for n in DISTURBANCE_ITEMS)
    return PSQIScore(
        subjective_quality=resp.subjective_quality,
        latency=_band_upper(latency, _LATENCY_SUM),
        # more than 7 h scores 0; exactly 7 h falls in the 6-7 h band
        duration=_band_lower(resp.sleep_hours, _DURATION_HOURS, strict_first=True),
        efficiency=_band_lower(sleep_efficiency_pct(resp), _EFFICIENCY_PCT),
        disturbances=_band_upper(disturbance_sum, _DISTURBANCE_SUM),
        medication=resp.medication,
        daytime_dysfunction=_band_upper(resp.trouble_staying_awake + resp.enthusiasm_problem, _DYSFUNCTION_SUM),
    )


POOR_SLEEPER_CUTOFF = 5


def classify_sleeper(score: PSQIScore | int) -> SleepQuality:
    """Global score above 5 marks a poor sleeper."""
    total = score if isinstance(score, int) else score.global_score
    if not 0 <= total <= 21:
        raise DataError(f"global PSQI score {total} outside 0-21")
    return SleepQuality.POOR if total > POOR_SLEEPER_CUTOFF else SleepQuality.GOOD


_QUESTIONS = (
    ("bedtime", "During the past month, what time have you usually gone to bed at night?"),
    ("latency_min", "During the past month, how long (in minutes) has it usually taken you to fall asleep each night?"),
    ("waketime", "During the past month, what time have you usually gotten up in the morning?"),
    ("sleep_hours", "During the past month, how many hours of actual sleep did you get at night?"),
    ("cannot_sleep_30min", "During the past month, how often have you had trouble sleeping because you cannot get to sleep within 30 minutes?"),
    ("wake_middle_night", "During the past month, how often have you had trouble sleeping because you wake up in the middle of the night or early morning?"),
    ("bathroom", "During the past month, how often have you had trouble sleeping because you have to get up to use the bathroom?"),
    ("cannot_breathe", "During the past month, how often have you had trouble sleeping because you cannot breathe comfortably?"),
    ("cough_snore", "During the past month, how often have you had trouble sleeping because you cough or snore loudly?"),
    ("too_cold", "During the past month, how often have you had trouble sleeping because you feel too cold?"),
    ("too_hot", "During the past month, how often have you had trouble sleeping because you feel too hot?"),
    ("bad_dreams", "During the past month, how often have you had trouble sleeping because you had bad dreams?"),
    ("pain", "During the past month, how often have you had trouble sleeping because you have pain?"),
    ("other_frequency", None),
    ("subjective_quality", "During the past month, how would you rate your sleep quality overall?"),
    ("medication", "During the past month, how often have you taken medicine to help you sleep (prescribed or \"over the counter\")?"),
    ("trouble_staying_awake", "During the past month, how often have you had trouble staying awake while driving, eating meals, or engaging in social activity?"),
    ("enthusiasm_problem", "During the past month, how much of a problem has it been for you to keep up enough enthusiasm to get things done?"),
)


def _number(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def to_prompt_text(resp: PSQIResponse) -> str:
    """Question-by-question rendering of a complete response, one line per item."""
    resp.require_complete()
    lines = []
    for name, question in _QUESTIONS:
        value = getattr(resp, name)
        if name == "other_frequency":
            if not resp.other_reason:
                continue
            question = (
                "During the past month, how often have you had trouble sleeping because of another reason, "
                f"described as \"{resp.other_reason}\"?"
            )
            answer = FREQUENCY_ANSWERS[value] if value is not None else "Not stated"
        elif name == "subjective_quality":
            answer = QUALITY_ANSWERS[value]
        elif name == "enthusiasm_problem":
            answer = PROBLEM_ANSWERS[value]
        elif name in ORDINAL_ITEMS:
            answer = FREQUENCY_ANSWERS[value]
        elif name == "latency_min":
            answer = f"{_number(value)} minutes"
        elif name == "sleep_hours":
            answer = f"{_number(value)} hours"
        else:
            answer = str(value)
        lines.append(f"{question}: {answer}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# CSV ingest

PSQI_COLUMNS = {
    "participant_id": None,
    "administration": None,
    "bedtime": "bedtime",
    "latency_min": "latency_min",
    "waketime": "waketime",
    "sleep_hours": "sleep_hours",
    "q5a": "cannot_sleep_30min",
    "q5b": "wake_middle_night",
    "q5c": "bathroom",
    "q5d": "cannot_breathe",
    "q5e": "cough_snore",
    "q5f": "too_cold",
    "q5g": "too_hot",
    "q5h": "bad_dreams",
    "q5i": "pain",
    "q5j": "other_frequency",
    "q5j_reason": "other_reason",
    "q6": "subjective_quality",
    "q7": "medication",
    "q8": "trouble_staying_awake",
    "q9": "enthusiasm_problem",
}

_ANSWER_CODES = {
    a.lower(): i
    for table in (FREQUENCY_ANSWERS, QUALITY_ANSWERS, PROBLEM_ANSWERS)
    for i, a in enumerate(table)
}


def _ordinal(text: str):
    text = text.strip()
    if text == "":
        return None
    if text.lower() in _ANSWER_CODES:
        return _ANSWER_CODES[text.lower()]
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"unrecognised PSQI answer {text!r}") from None
    if not value.is_integer():
        raise DataError(f"ordinal PSQI answer {text!r} is not an integer code")
    return int(value)


@dataclass(frozen=True)
class PSQIRecord:
    participant_id: str
    administration: str
    response: PSQIResponse


def load_psqi_csv(path) -> list[PSQIRecord]:
    """One row per participant per administration (e.g. ``pre`` / ``post``)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in PSQI_COLUMNS if c not in header and c != "q5j_reason"]
        if missing:
            raise MissingColumn(f"{path}: missing PSQI columns {missing}")
        out = []
        for row in reader:
            row = {k.strip(): (v or "") for k, v in row.items()}
            kwargs = {}
            for col, attr in PSQI_COLUMNS.items():
                if attr is None:
                    continue
                text = row.get(col, "").strip()
                if attr in ("bedtime", "waketime", "other_reason"):
                    kwargs[attr] = text or None
                elif attr in ("latency_min", "sleep_hours"):
                    kwargs[attr] = float(text) if text else None
                else:
                    kwargs[attr] = _ordinal(text)
            out.append(PSQIRecord(row["participant_id"].strip(), row["administration"].strip(), PSQIResponse(**kwargs)))
    return out


def write_psqi_csv(path, records: Sequence[PSQIRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(PSQI_COLUMNS))
        for rec in records:
            row = [rec.participant_id, rec.administration]
            for col, attr in PSQI_COLUMNS.items():
                if attr is None:
                    continue
                v = getattr(rec.response, attr)
                row.append("" if v is None else _number(v))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Agreement between questionnaire scoring and model answers


@dataclass(frozen=True)
class AgreementTable:
    counts: dict  # (scored, predicted) -> n

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def agreement(self) -> float:
        agree = sum(n for (s, p), n in self.counts.items() if s == p)
        return agree / self.total

    def to_text(self, model_name: str = "LLM response") -> str:
        head = ("PSQI scoring", model_name, "# of participants")
        order = [(SleepQuality.GOOD, SleepQuality.GOOD), (SleepQuality.POOR, SleepQuality.POOR),
                 (SleepQuality.GOOD, SleepQuality.POOR), (SleepQuality.POOR, SleepQuality.GOOD)]
        rows = [(s.text, p.text, str(self.counts.get((s, p), 0))) for s, p in order]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(3)]
        lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [head] + rows]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        lines.append(f"Overall agreement: {100 * self.agreement:.1f}% ({self.total} participants)")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "counts": [
                {"psqi": s.text, "model": p.text, "n": self.counts.get((s, p), 0)}
                for s in SleepQuality
                for p in SleepQuality
            ],
            "agreement": self.agreement,
            "total": self.total,
        }


def agreement_table(scored: Sequence[SleepQuality], predicted: Sequence[SleepQuality]) -> AgreementTable:
    if len(scored) != len(predicted):
        raise LengthMismatch("scored and predicted lists differ in length")
    if not scored:
        raise EmptyEvaluation("no participants to compare")
    counts = {(s, p): 0 for s in SleepQuality for p in SleepQuality}
    for s, p in zip(scored, predicted):
        counts[(SleepQuality(s), SleepQuality(p))] += 1
    return AgreementTable(counts)
