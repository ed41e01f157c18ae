"""Personalised sleep-improvement prompts and checks on generated imagery scripts."""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dsp import FEATURE_NAMES, FeatureVector
from .errors import DataError, EmptyProfile
from .llm_bridge import ImageRef, PromptBundle, Task, TextPart, format_features
from .psqi import PSQIResponse, to_prompt_text

THERAPIST_ROLE = "You are a sleep therapist."

SUGGESTION_REQUEST = (
    "Reflecting on the participant's profile, please generate suggestions to help the participant sleep better.\n"
    "Ground each suggestion in established sleep hygiene practice."
)
IMAGERY_REQUEST = (
    "Reflecting on the participant's profile, please generate a guided imagery script "
    "to help the participant sleep better."
)
EEG_IMAGERY_TEMPLATE = (
    "Please generate a guided imagery script based on the following 30-s epoch EEG features,\n"
    "alpha, beta, delta, theta, gamma power, alpha delta ratio, theta alpha ratio, delta theta ratio, "
    "mean, standard deviation, kurtosis, 90th percentile of amplitude.\n"
    "Do not include actual numerical EEG features, brain waves, power spectrum, or different frequencies of waves "
    "in the script but include the state estimated from the features."
)
SAFETY_CUE = (
    "The participant has experienced trauma. Present the setting as a safe, protected place "
    "and avoid imagery that could be startling or threatening."
)
TRAUMA_TERMS = ("ptsd", "trauma")

PREFERENCE_TITLES = {"environments": "Favorite environments", "animals": "Favorite animals", "hobbies": "Hobbies"}


@dataclass(frozen=True)
class UserProfile:
    gender: str | None = None
    age_group: str | None = None
    ethnicity: str | None = None
    health_issues: tuple = ()
    preferences: Mapping = field(default_factory=dict)
    psqi: PSQIResponse | None = None
    actogram: ImageRef | None = None
    eeg_features: FeatureVector | None = None

    def __post_init__(self):
        object.__setattr__(self, "health_issues", tuple(self.health_issues))
        prefs = {k: tuple(v) for k, v in dict(self.preferences).items() if v}
        object.__setattr__(self, "preferences", prefs)
        if self.is_empty():
            raise EmptyProfile("profile has no non-empty field")

    def is_empty(self) -> bool:
        return not any(
            [self.gender, self.age_group, self.ethnicity, self.health_issues, self.preferences,
             self.psqi is not None, self.actogram is not None, self.eeg_features is not None]
        )

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | None = None) -> "UserProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown profile fields: {sorted(unknown)}")
        psqi = PSQIResponse(**d["psqi"]) if d.get("psqi") else None
        actogram = _image_from_json(d["actogram"], base_dir) if d.get("actogram") else None
        eeg = features_from_json(d["eeg_features"]) if d.get("eeg_features") else None
        return cls(
            gender=d.get("gender") or None,
            age_group=d.get("age_group") or None,
            ethnicity=d.get("ethnicity") or None,
            health_issues=tuple(d.get("health_issues") or ()),
            preferences={k: tuple(v) for k, v in (d.get("preferences") or {}).items()},
            psqi=psqi,
            actogram=actogram,
            eeg_features=eeg,
        )

    def to_dict(self) -> dict:
        out = {}
        for name in ("gender", "age_group", "ethnicity"):
            if getattr(self, name):
                out[name] = getattr(self, name)
        if self.health_issues:
            out["health_issues"] = list(self.health_issues)
        if self.preferences:
            out["preferences"] = {k: list(v) for k, v in self.preferences.items()}
        if self.psqi is not None:
            out["psqi"] = {f.name: getattr(self.psqi, f.name) for f in fields(self.psqi)}
        if self.actogram is not None:
            out["actogram"] = {"media_type": self.actogram.media_type, "data": self.actogram.data_b64}
        if self.eeg_features is not None:
            out["eeg_features"] = {c: self.eeg_features.channel_dict(c) for c in self.eeg_features.channels}
        return out


def _image_from_json(value, base_dir: Path | None) -> ImageRef:
    if isinstance(value, Mapping):
        return ImageRef(value.get("media_type", "image/png"), value["data"], value.get("name", ""))
    path = Path(value)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return ImageRef("image/png", base64.b64encode(path.read_bytes()).decode("ascii"), path.name)


def features_from_json(value: Mapping) -> FeatureVector:
    """``{channel: {feature: value}}`` into a FeatureVector; all 11 features are required."""
    values = {}
    for ch, feats in value.items():
        missing = [f for f in FEATURE_NAMES if f not in feats]
        if missing:
            raise DataError(f"channel {ch} lacks features {missing}")
        values[ch] = np.array([float(feats[f]) for f in FEATURE_NAMES])
    if not values:
        raise DataError("eeg_features has no channels")
    return FeatureVector(tuple(values), values)


def load_profiles(path) -> list[UserProfile]:
    """A JSON document holding one profile object or a list of them."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    items = doc if isinstance(doc, list) else [doc]
    return [UserProfile.from_dict(d, path.parent) for d in items]


# ---------------------------------------------------------------------------
# Prompt text


def _psqi_lines(resp: PSQIResponse) -> str:
    if not resp.missing():
        return to_prompt_text(resp)
    return "\n".join(f"{f.name}: {getattr(resp, f.name)}" for f in fields(resp) if getattr(resp, f.name) is not None)


_BANDS = ("delta", "theta", "alpha", "beta")


def eeg_summary(features: FeatureVector) -> str:
    """Qualitative description of relative band activity, free of any numbers."""
    powers = np.array([[features.get(c, f"{b}_pow") for b in _BANDS] for c in features.channels])
    mean = powers.mean(axis=0)
    order = np.argsort(-mean, kind="stable")
    return (
        f"EEG recordings show the strongest activity in the {_BANDS[order[0]]} band "
        f"and the weakest in the {_BANDS[order[-1]]} band."
    )


def describe_profile(profile: UserProfile, eeg_numeric: bool = False) -> str:
    lines = []
    if profile.gender:
        lines.append(f"Gender: {profile.gender}")
    if profile.age_group:
        lines.append(f"Age group: {profile.age_group}")
    if profile.ethnicity:
        lines.append(f"Ethnicity: {profile.ethnicity}")
    if profile.health_issues:
        lines.append("Health issues: " + "; ".join(profile.health_issues))
    for key, items in profile.preferences.items():
        title = PREFERENCE_TITLES.get(key, f"Favorite {key}")
        lines.append(f"{title}: " + ", ".join(items))
    if profile.psqi is not None:
        lines.append("Pittsburgh Sleep Quality Index answers:\n" + _psqi_lines(profile.psqi))
    if profile.actogram is not None:
        lines.append("Activity: see the attached actogram of hourly activity levels.")
    if profile.eeg_features is not None and not eeg_numeric:
        lines.append(eeg_summary(profile.eeg_features))
    return "\n".join(lines)


def _with_actogram(parts: list, profile: UserProfile) -> tuple:
    if profile.actogram is not None:
        parts.append(profile.actogram)
    return tuple(parts)


def build_suggestion_prompt(profile: UserProfile) -> PromptBundle:
    """Therapist prompt asking for sleep suggestions; EEG data enters only as a qualitative summary."""
    if profile.is_empty():
        raise EmptyProfile("profile has no non-empty field")
    text = "The participant is described as follows.\n" + describe_profile(profile) + "\n" + SUGGESTION_REQUEST
    return PromptBundle(THERAPIST_ROLE, _with_actogram([TextPart(text)], profile), Task.FEEDBACK)


def _steering(profile: UserProfile) -> list[str]:
    out = []
    envs = profile.preferences.get("environments")
    if envs:
        out.append(f"Set the scene in a {envs[0]} setting" + (f" (other favorites: {', '.join(envs[1:])})." if
                                                               len(envs) > 1 else "."))
    extras = [f"{k}: {', '.join(v)}" for k, v in profile.preferences.items() if k != "environments"]
    if extras:
        out.append("Weave in the participant's other preferences where natural (" + "; ".join(extras) + ").")
    if profile.health_issues:
        out.append("Acknowledge the participant's issues gently: " + "; ".join(profile.health_issues) + ".")
    if any(t in issue.lower() for issue in profile.health_issues for t in TRAUMA_TERMS):
        out.append(SAFETY_CUE)
    return out


def build_imagery_prompt(profile: UserProfile) -> PromptBundle:
    """Guided-imagery prompt steered by preferences and issues.

    With EEG features present the feature values are supplied as context and the
    script is told to convey only the estimated state, never the numbers.
    """
    if profile.is_empty():
        raise EmptyProfile("profile has no non-empty field")
    parts = []
    if profile.eeg_features is not None:
        parts.append(TextPart(EEG_IMAGERY_TEMPLATE))
        parts.append(TextPart(format_features(profile.eeg_features)))
    rest = describe_profile(profile, eeg_numeric=True)
    if rest:
        body = "The participant is described as follows.\n" + rest + "\n" + IMAGERY_REQUEST
        steer = _steering(profile)
        if steer:
            body += "\n" + "\n".join(steer)
        parts.append(TextPart(body))
    return PromptBundle(THERAPIST_ROLE, _with_actogram(parts, profile), Task.FEEDBACK)


# ---------------------------------------------------------------------------
# Script validation

BANNED_TERMS = ("alpha wave", "beta wave", "delta wave", "theta wave", "power spectrum", "Hz", "ratio of")
_NUMBER = r"\d+(?:\.\d+)?"


@dataclass(frozen=True)
class ImageryValidation:
    passed: bool
    leaked_tokens: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "leaked_tokens", tuple(self.leaked_tokens))
        if self.passed != (not self.leaked_tokens):
            raise ValueError("passed must hold exactly when nothing leaked")


def value_renderings(value: float) -> set[str]:
    """Positional renderings of ``|value|`` at 1-6 significant digits.

    Only renderings with a decimal point, or integers of three or more digits,
    are kept; short integers are too easily ordinary counts in a script.
    """
    v = abs(float(value))
    if not np.isfinite(v) or v == 0.0:
        return set()
    out = set()
    for digits in range(1, 7):
        s = np.format_float_positional(v, precision=digits, unique=False, fractional=False, trim="-")
        if "." in s or len(s) >= 3:
            out.add(s)
    return out


def _term_pattern(term: str) -> str:
    body = re.escape(term)
    if term == "ratio of":
        body += rf"(?:\s+-?{_NUMBER})?"
    return rf"(?<![a-z]){body}(?![a-z])" if term == "Hz" else rf"(?<![a-z]){body}"


def validate_imagery(script: str, features: FeatureVector | None = None,
                     banned_terms: Sequence[str] = BANNED_TERMS) -> ImageryValidation:
    """Find banned band vocabulary and renderings of the supplied feature values in a script.

    Overlapping matches are merged, so "ratio of 2.3" is reported once.
    """
    spans = []
    for term in banned_terms:
        for m in re.finditer(_term_pattern(term), script, flags=re.IGNORECASE):
            spans.append((m.start(), m.end()))
    if features is not None:
        targets = set()
        for v in features.all_values():
            targets |= value_renderings(v)
        for m in re.finditer(rf"(?<![\d.]){_NUMBER}(?![\d])", script):
            if m.group() in targets:
                spans.append((m.start(), m.end()))
    spans.sort()
    merged = []
    for s, e in spans:
        if merged and s < merged[-1][1]:
            merged[-1] = (merged[-1][0], max(e, merged[-1][1]))
        else:
            merged.append((s, e))
    leaked = [script[s:e] for s, e in merged]
    return ImageryValidation(not leaked, leaked)


# Keyword checklist for generated suggestions. Heuristic only: a hit says a
# theme is mentioned, not that the advice is sound.
SUGGESTION_THEMES = {
    "consistent_schedule": ("same time", "consistent", "regular sleep schedule", "routine", "schedule"),
    "avoid_late_activities": ("screen", "before bed", "late-night", "late night", "stimulating", "electronic"),
    "avoid_fluids": ("fluid", "drink", "water", "bathroom"),
    "relaxation": ("relax", "meditat", "mindful", "breathing", "yoga", "imagery"),
    "sleep_environment": ("dark", "quiet", "temperature", "cool", "mattress", "bedroom", "comfortable"),
    "caffeine_meals_alcohol": ("caffeine", "coffee", "alcohol", "heavy meal", "large meal"),
    "exercise": ("exercise", "physical activity", "workout"),
}


def theme_checklist(text: str) -> dict[str, bool]:
    low = text.lower()
    return {theme: any(k in low for k in keys) for theme, keys in SUGGESTION_THEMES.items()}
