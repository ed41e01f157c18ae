"""Experiment orchestration and the ``sleepsense`` command line."""

from __future__ import annotations

import argparse
import base64
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import os
import statistics
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import yaml

from . import __version__
from .classify import (
    EvalReport,
    GBTModel,
    GBTParams,
    MajorityClassifier,
    evaluate,
    feature_importance,
    format_results_table,
    majority_baseline,
    train_gbt,
)
from .dsp import (
    extract_features,
    filter_recording,
    read_feature_matrix,
    wavelet_spectrogram,
    write_feature_matrix,
)
from .errors import (
    ConfigConflict,
    ConfigError,
    DataError,
    EmptyEvaluation,
    EndpointError,
    IncompleteResponse,
    SleepSenseError,
)
from .feedback import (
    UserProfile,
    build_imagery_prompt,
    build_suggestion_prompt,
    load_profiles,
    theme_checklist,
    validate_imagery,
)
from .ingest import (
    AttentionState,
    ColumnSchema,
    Epoch,
    SleepStage,
    SplitSpec,
    load_activity_csv,
    load_attention_mat,
    load_signal_csv,
    make_splits,
    parse_hypnogram,
    read_edf,
    segment_epochs,
)
from .llm_bridge import (
    EndpointConfig,
    Payload,
    PayloadKind,
    PromptBundle,
    Task,
    Transcript,
    TranscriptWriter,
    build_in_context,
    build_zero_shot,
    export_finetune_jsonl,
    finetune_bundle,
    parse_inference,
    run_batch,
    select_exemplars,
)
from .psqi import (
    SleepQuality,
    agreement_table,
    classify_sleeper,
    load_psqi_csv,
    score_components,
)
from .render import (
    ImageSpec,
    build_actogram,
    image_filename,
    render_actogram,
    render_avg_activity,
    render_confusion,
    render_spectrogram,
    render_waveform,
)

log = logging.getLogger("sleepsense")

REPORT_SCHEMA_VERSION = 1
MODELS = ("gbt", "majority", "llm_zero_shot", "llm_in_context", "llm_finetune_export")
DETECTION_TASKS = (Task.ATTENTION, Task.SLEEP_STAGE)

# Model/payload pairs evaluated per task; anything else is rejected when the config is parsed.
_DETECTION_ROWS = {
    ("gbt", "features"),
    ("majority", "features"),
    ("llm_finetune_export", "features"),
    ("llm_zero_shot", "features"),
    ("llm_in_context", "features"),
}
LEGAL_COMBINATIONS = (
    {("attention", m, p) for m, p in _DETECTION_ROWS}
    | {("attention", m, "spectrogram_image") for m in ("llm_zero_shot", "llm_in_context")}
    | {("sleep_stage", m, p) for m, p in _DETECTION_ROWS}
    | {("sleep_stage", m, "waveform_image") for m in ("llm_zero_shot", "llm_in_context")}
    | {
        ("sleep_quality_psqi", "llm_zero_shot", "psqi_text"),
        ("sleep_quality_activity", "llm_zero_shot", "actogram_image"),
        ("sleep_quality_activity", "llm_zero_shot", "avg_activity_image"),
        ("feedback", "llm_zero_shot", None),
    }
)

DEFAULT_EPOCH_S = {Task.ATTENTION: 10.0, Task.SLEEP_STAGE: 30.0}
DEFAULT_CHANNELS = {Task.SLEEP_STAGE: ("EEG Fpz-Cz",)}
LABEL_PARSERS = {
    Task.ATTENTION: AttentionState.parse,
    Task.SLEEP_STAGE: SleepStage.parse,
    Task.SLEEP_QUALITY_PSQI: SleepQuality.parse,
    Task.SLEEP_QUALITY_ACTIVITY: SleepQuality.parse,
}
DATA_KEYS = ("attention_dir", "sleep_edf_dir", "signal_dir", "features_dir", "psqi_csv", "activity_dir", "profiles")
SPLITS = ("train", "validation", "test")


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ExperimentConfig:
    task: Task
    model: str
    payload: PayloadKind | None
    output_dir: str
    data: Mapping = field(default_factory=dict)
    split: Mapping = field(default_factory=lambda: {"train": 0.7, "validation": 0.15, "test": 0.15, "seed": 0})
    channels: tuple | None = None
    image_channel: str | None = None
    epoch_s: float | None = None
    trim_wake_min: float | None = 30.0
    filter: Mapping | None = field(default_factory=lambda: {"cutoff_hz": 40.0, "order": 128})
    gbt: Mapping = field(default_factory=dict)
    image: Mapping = field(default_factory=dict)
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    transcript: str | None = None
    replay: bool = False
    examples_per_class: int = 1
    example_seed: int = 0
    tz: str = "UTC"
    administration: str | None = None
    name: str | None = None

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def transcript_path(self) -> Path:
        return Path(self.transcript) if self.transcript else self.out / "transcript.jsonl"

    @property
    def seed(self) -> int:
        return int(self.split.get("seed", 0))

    @property
    def epoch_length(self) -> float:
        return self.epoch_s or DEFAULT_EPOCH_S[self.task]

    @property
    def channel_list(self) -> tuple | None:
        return self.channels or DEFAULT_CHANNELS.get(self.task)

    def image_spec(self) -> ImageSpec:
        return ImageSpec(**self.image)

    def gbt_params(self) -> GBTParams:
        return GBTParams(**{**self.gbt, "seed": self.gbt.get("seed", self.seed)})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["task"] = self.task.value
        d["payload"] = self.payload.value if self.payload else None
        d["endpoint"] = dataclasses.asdict(self.endpoint)
        d["channels"] = list(self.channels) if self.channels else None
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _set_path(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {k} is not a mapping")
    node[keys[-1]] = value


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key.sub=value`` overrides; values are read as YAML scalars."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        _set_path(raw, key.strip(), yaml.safe_load(text))
    return raw


def parse_config(raw: Mapping) -> ExperimentConfig:
    raw = dict(raw)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("task", "model", "output_dir"):
        if not raw.get(key):
            raise ConfigError(f"config needs {key!r}")
    try:
        task = Task(raw["task"])
    except ValueError:
        raise ConfigError(f"unknown task {raw['task']!r}") from None
    model = raw["model"]
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; choose from {MODELS}")
    payload_text = raw.get("payload")
    try:
        payload = PayloadKind(payload_text) if payload_text else None
    except ValueError:
        raise ConfigError(f"unknown payload kind {payload_text!r}") from None
    if (task.value, model, payload_text or None) not in LEGAL_COMBINATIONS:
        raise ConfigConflict(f"{task.value} with {model} on {payload_text} is not a supported combination")

    data = dict(raw.get("data") or {})
    bad = set(data) - set(DATA_KEYS)
    if bad:
        raise ConfigError(f"unknown data keys: {sorted(bad)}")
    split = {"train": 0.7, "validation": 0.15, "test": 0.15, "seed": 0, **(raw.get("split") or {})}
    if set(split) - {"train", "validation", "test", "seed"}:
        raise ConfigError("split accepts train, validation, test and seed")
    try:
        endpoint = EndpointConfig(**(raw.get("endpoint") or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad endpoint settings: {exc}") from None

    kwargs = {k: raw[k] for k in known if k in raw}
    kwargs.update(task=task, model=model, payload=payload, data=data, split=split, endpoint=endpoint)
    if raw.get("channels"):
        kwargs["channels"] = tuple(raw["channels"])
    kwargs["output_dir"] = str(raw["output_dir"])
    try:
        cfg = ExperimentConfig(**kwargs)
        cfg.image_spec()
        cfg.gbt_params()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return parse_config(apply_overrides(raw, overrides))


# ---------------------------------------------------------------------------
# Run bookkeeping


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    command: str
    seed: int
    started: str
    finished: str = ""
    input_digests: dict = field(default_factory=dict)

    def write(self, path: Path):
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_digests(config: ExperimentConfig) -> dict:
    out = {}
    for key in sorted(config.data):
        root = Path(config.data[key])
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for p in files:
            if p.exists():
                out[str(p)] = file_digest(p)
    if config.replay and config.transcript_path.exists():
        out[str(config.transcript_path)] = file_digest(config.transcript_path)
    return out


class RunLock:
    """Exclusive ownership of an output directory for one run."""

    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.path.parent} is in use by another run (remove {self.path} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Datasets


def _sleep_edf_pairs(root: Path) -> list[tuple[Path, Path]]:
    psg = sorted(root.rglob("*-PSG.edf"))
    hyp = {p.name[:7]: p for p in root.rglob("*-Hypnogram.edf")}
    pairs = [(p, hyp[p.name[:7]]) for p in psg if p.name[:7] in hyp]
    if not pairs:
        raise DataError(f"no PSG/Hypnogram pairs under {root}")
    return pairs


def iter_recordings(config: ExperimentConfig) -> Iterator[tuple[str, object, Sequence | None]]:
    """``(recording_id, Recording, annotations)`` for the task's dataset, one at a time."""
    data = config.data
    if config.task is Task.SLEEP_STAGE and data.get("sleep_edf_dir"):
        for psg, hyp in _sleep_edf_pairs(Path(data["sleep_edf_dir"])):
            rid = psg.name.split("-")[0]
            rec = read_edf(psg, subject_id=rid)
            yield rid, rec, parse_hypnogram(hyp.read_bytes())
        return
    if config.task is Task.ATTENTION and data.get("attention_dir"):
        files = sorted(Path(data["attention_dir"]).glob("*.mat"))
        if not files:
            raise DataError(f"no .mat recordings in {data['attention_dir']}")
        for p in files:
            rec = load_attention_mat(p)
            yield p.stem, rec, rec.annotations
        return
    if data.get("signal_dir"):
        root = Path(data["signal_dir"])
        schema = ColumnSchema.from_file(root / "schema.yaml")
        files = sorted(root.glob("*.csv"))
        if not files:
            raise DataError(f"no signal CSVs in {root}")
        for p in files:
            rec = load_signal_csv(p, dataclasses.replace(schema, subject_id=schema.subject_id or p.stem))
            yield p.stem, rec, rec.annotations
        return
    raise ConfigError(f"no dataset configured for {config.task.value}")


def _trim_wake(epochs: list[Epoch], margin_epochs: int) -> list[Epoch]:
    asleep = [i for i, e in enumerate(epochs) if e.label not in (SleepStage.WAKE, SleepStage.UNKNOWN_OR_MOVEMENT)]
    if not asleep:
        return []
    lo, hi = max(0, asleep[0] - margin_epochs), asleep[-1] + margin_epochs
    return epochs[lo : hi + 1]


def iter_epochs(config: ExperimentConfig, keys: set | None = None) -> Iterator[list[Epoch]]:
    """Filtered, segmented epochs per recording, optionally restricted to ``keys``."""
    for rid, rec, spans in iter_recordings(config):
        if config.channel_list:
            rec = rec.select(config.channel_list)
        if config.filter:
            rec = filter_recording(rec, **config.filter)
        epochs = segment_epochs(rec, config.epoch_length, spans, recording_id=rid, on_uncovered="drop")
        if config.task is Task.SLEEP_STAGE and config.trim_wake_min is not None:
            epochs = _trim_wake(epochs, int(round(config.trim_wake_min * 60 / config.epoch_length)))
        if keys is not None:
            epochs = [e for e in epochs if e.key in keys]
        yield epochs


def resolve_split(split: Mapping, n: int) -> SplitSpec:
    """Counts from a split mapping; values summing to 1 are read as fractions of ``n``."""
    parts = [split[k] for k in SPLITS]
    if all(isinstance(v, (int, float)) and v >= 0 for v in parts) and abs(sum(parts) - 1.0) < 1e-9 and any(
        isinstance(v, float) for v in parts
    ):
        test = int(round(split["test"] * n))
        val = int(round(split["validation"] * n))
        return SplitSpec(n - test - val, val, test, int(split.get("seed", 0)))
    return SplitSpec(int(split["train"]), int(split["validation"]), int(split["test"]), int(split.get("seed", 0)))


@dataclass
class PreparedData:
    splits: dict  # split name -> list of signal-free Epochs
    features: dict  # split name -> list of FeatureVector


def prepare(config: ExperimentConfig, with_features: bool = True) -> PreparedData:
    """Segment the dataset, extract features and draw the seeded splits."""
    light, vectors = [], {}
    for epochs in iter_epochs(config):
        for e in epochs:
            if with_features and not e.excluded:
                vectors[e.key] = extract_features(e)
            light.append(dataclasses.replace(e, signal={}))
    n = sum(1 for e in light if not e.excluded)
    ss = make_splits(light, resolve_split(config.split, n))
    splits = {"train": ss.train, "validation": ss.validation, "test": ss.test}
    feats = {k: [vectors[e.key] for e in v] for k, v in splits.items()} if with_features else {}
    return PreparedData(splits, feats)


def _label_counts(epochs: Sequence[Epoch]) -> dict:
    counts = {}
    for e in epochs:
        k = getattr(e.label, "text", str(e.label))
        counts[k] = counts.get(k, 0) + 1
    return dict(sorted(counts.items()))


def cmd_ingest(config: ExperimentConfig) -> dict:
    prep = prepare(config, with_features=False)
    summary = {
        "task": config.task.value,
        "epoch_s": config.epoch_length,
        "seed": config.seed,
        "splits": {k: {"n": len(v), "labels": _label_counts(v)} for k, v in prep.splits.items()},
    }
    _write_json(config.out / "ingest.json", summary)
    return summary


def feature_paths(config: ExperimentConfig) -> dict:
    root = Path(config.data["features_dir"]) if config.data.get("features_dir") else config.out / "features"
    return {k: root / f"{k}.csv" for k in SPLITS}


def cmd_features(config: ExperimentConfig) -> dict:
    prep = prepare(config)
    paths = {k: config.out / "features" / f"{k}.csv" for k in SPLITS}
    paths["train"].parent.mkdir(parents=True, exist_ok=True)
    for k in SPLITS:
        if prep.splits[k]:
            write_feature_matrix(paths[k], prep.splits[k], prep.features[k])
    return {k: str(p) for k, p in paths.items()}


def load_matrices(config: ExperimentConfig) -> dict:
    paths = feature_paths(config)
    if not paths["train"].exists():
        cmd_features(config)
        paths = {k: config.out / "features" / f"{k}.csv" for k in SPLITS}
    parse = LABEL_PARSERS[config.task]
    out = {}
    for k, p in paths.items():
        if p.exists():
            m = read_feature_matrix(p)
            m.labels = [parse(x) for x in m.labels]
            out[k] = m
    if "test" not in out:
        raise DataError("no test features available")
    return out


# ---------------------------------------------------------------------------
# Classical models


def cmd_train(config: ExperimentConfig):
    mats = load_matrices(config)
    train = mats["train"]
    if config.model == "majority":
        clf = majority_baseline(train.labels)
        doc = json.dumps({"format": "sleepsense-majority", "label": clf.label.text}, indent=1)
        (config.out / "model.json").write_text(doc + "\n", encoding="utf-8")
        return clf
    if config.model != "gbt":
        raise ConfigError(f"train applies to gbt and majority models, not {config.model}")
    val = mats.get("validation")
    model = train_gbt(
        train.X, [l.text for l in train.labels],
        val.X if val else None, [l.text for l in val.labels] if val else None,
        config.gbt_params(), feature_names=train.columns,
    )
    (config.out / "model.json").write_text(model.to_json() + "\n", encoding="utf-8")
    return model


def load_model(config: ExperimentConfig):
    path = config.out / "model.json"
    if not path.exists():
        raise DataError(f"{path} not found; run train first")
    text = path.read_text(encoding="utf-8")
    doc = json.loads(text)
    if doc.get("format") == "sleepsense-majority":
        return MajorityClassifier(LABEL_PARSERS[config.task](doc["label"]))
    return GBTModel.from_json(text)


def row_name(config: ExperimentConfig) -> str:
    if config.name:
        return config.name
    payload = {"features": "features", "spectrogram_image": "spectrogram", "waveform_image": "EEG signals",
               "psqi_text": "PSQI answers", "actogram_image": "actogram",
               "avg_activity_image": "averaged activity"}.get(config.payload.value if config.payload else "", "")
    model = config.endpoint.model_name
    return {
        "gbt": f"GBT ({payload})",
        "majority": "Baseline (majority vote)",
        "llm_zero_shot": f"Zero-shot {model} ({payload})",
        "llm_in_context": f"In-context {model} ({payload})",
        "llm_finetune_export": f"Finetuned {model} ({payload})",
    }[config.model]


def _labels_for(truth, preds) -> list:
    return sorted({*truth, *(p for p in preds if p is not None)})


def write_report(config: ExperimentConfig, report: EvalReport, extra: Mapping | None = None,
                 note: str = "") -> dict:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "task": config.task.value,
        "model": config.model,
        "payload": config.payload.value if config.payload else None,
        "row": row_name(config),
        "metrics": report.to_dict(),
        **(extra or {}),
    }
    _write_json(config.out / "report.json", doc)
    table = format_results_table([(row_name(config), report, note)])
    (config.out / "table.txt").write_text(table, encoding="utf-8")
    if report.confusion.counts.size:
        (config.out / "confusion.png").write_bytes(render_confusion(report.confusion, config.image_spec()))
    return doc


def evaluate_classical(config: ExperimentConfig) -> EvalReport:
    mats = load_matrices(config)
    test = mats["test"]
    model = load_model(config)
    parse = LABEL_PARSERS[config.task]
    preds = [parse(p) for p in model.predict_labels(test.X)]
    report = evaluate(preds, test.labels, _labels_for(test.labels, preds))
    extra = {}
    if isinstance(model, GBTModel):
        imp = feature_importance(model)
        extra["feature_importance"] = {k: v for k, v in sorted(imp.items(), key=lambda kv: (-kv[1], kv[0])) if v}
        extra["rounds"] = model.n_rounds
    write_report(config, report, extra)
    return report


# ---------------------------------------------------------------------------
# LLM items


@dataclass(frozen=True)
class Item:
    key: str
    truth: object
    bundle: PromptBundle


def _image_payload(config: ExperimentConfig, epoch: Epoch) -> Payload:
    spec = config.image_spec()
    channel = config.image_channel or epoch.channel_names[0]
    kind = config.payload
    if kind is PayloadKind.SPECTROGRAM_IMAGE:
        png = render_spectrogram(wavelet_spectrogram(epoch, channel), spec)
    else:
        png = render_waveform(epoch, channel, spec)
    name = image_filename(epoch.recording_id or epoch.subject_id, f"{epoch.index:05d}", kind.value.split("_")[0])
    return Payload.png(kind, png, name)


def _epoch_key_text(key: tuple) -> str:
    return f"{key[0]}/{key[1]}/{key[2]}"


def detection_items(config: ExperimentConfig) -> list[Item]:
    task = config.task
    if config.payload is PayloadKind.FEATURES:
        mats = load_matrices(config)
        test = mats["test"]

        def payload(m, i):
            return Payload.features(dict(zip(m.columns, m.X[i])))

        examples = []
        if config.model == "llm_in_context":
            train = mats["train"]
            wanted = sorted(set(train.labels)) * config.examples_per_class
            idx = select_exemplars(train.labels, wanted, config.example_seed)
            examples = [(payload(train, i), train.labels[i]) for i in idx]
        items = []
        for i in range(len(test.labels)):
            q = payload(test, i)
            if config.model == "llm_zero_shot":
                bundle = build_zero_shot(task, q)
            elif config.model == "llm_in_context":
                bundle = build_in_context(task, examples, q)
            else:
                bundle = finetune_bundle(task, q)
            key = f"{test.subject_ids[i]}/{test.epoch_indices[i]}"
            items.append(Item(key, test.labels[i], bundle))
        return items

    prep = prepare(config, with_features=False)
    test = prep.splits["test"]
    ex_keys = []
    if config.model == "llm_in_context":
        train = prep.splits["train"]
        labels = [e.label for e in train]
        if task is Task.SLEEP_STAGE:
            wanted = [SleepStage.WAKE, SleepStage.STAGE1, SleepStage.STAGE2, SleepStage.STAGE34, SleepStage.REM]
        else:
            wanted = sorted(set(labels)) * config.examples_per_class
        ex_keys = [train[i].key for i in select_exemplars(labels, wanted, config.example_seed)]
    wanted_keys = {e.key for e in test} | set(ex_keys)
    full = {e.key: e for epochs in iter_epochs(config, wanted_keys) for e in epochs}
    examples = [(_image_payload(config, full[k]), full[k].label) for k in ex_keys]
    images_dir = config.out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    items = []
    for e in test:
        q = _image_payload(config, full[e.key])
        (images_dir / q.image.name).write_bytes(base64.b64decode(q.image.data_b64))
        bundle = build_zero_shot(task, q) if config.model == "llm_zero_shot" else build_in_context(task, examples, q)
        items.append(Item(_epoch_key_text(e.key), e.label, bundle))
    return items


def _psqi_ground_truth(config: ExperimentConfig) -> list:
    if not config.data.get("psqi_csv"):
        raise ConfigError("data.psqi_csv is required")
    records = []
    for rec in load_psqi_csv(config.data["psqi_csv"]):
        try:
            score = score_components(rec.response)
        except IncompleteResponse as exc:
            log.warning("skipping %s/%s: %s", rec.participant_id, rec.administration, exc)
            continue
        records.append((rec, classify_sleeper(score)))
    return records


def psqi_items(config: ExperimentConfig) -> list[Item]:
    return [
        Item(f"{rec.participant_id}/{rec.administration}", truth, build_zero_shot(Task.SLEEP_QUALITY_PSQI,
                                                                                  Payload.psqi(rec.response)))
        for rec, truth in _psqi_ground_truth(config)
    ]


def activity_items(config: ExperimentConfig) -> list[Item]:
    if not config.data.get("activity_dir"):
        raise ConfigError("data.activity_dir is required")
    truth = {}
    for rec, quality in _psqi_ground_truth(config):
        if config.administration and rec.administration != config.administration:
            continue
        truth[rec.participant_id] = quality  # later administrations win
    spec = config.image_spec()
    images_dir = config.out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    items = []
    for path in sorted(Path(config.data["activity_dir"]).glob("*.csv")):
        uid = path.stem.split("_")[-1]
        if uid not in truth:
            log.warning("no PSQI ground truth for %s; skipped", uid)
            continue
        series = load_activity_csv(path, tz=config.tz, subject_id=uid)
        if len(series) == 0:
            continue
        if config.payload is PayloadKind.ACTOGRAM_IMAGE:
            png, kind = render_actogram(build_actogram(series), spec), "actogram"
        else:
            png, kind = render_avg_activity(series, spec), "avgactivity"
        name = image_filename(uid, "all", kind)
        (images_dir / name).write_bytes(png)
        bundle = build_zero_shot(Task.SLEEP_QUALITY_ACTIVITY, Payload.png(config.payload, png, name))
        items.append(Item(uid, truth[uid], bundle))
    return items


def build_items(config: ExperimentConfig) -> list[Item]:
    if config.task in DETECTION_TASKS:
        return detection_items(config)
    if config.task is Task.SLEEP_QUALITY_PSQI:
        return psqi_items(config)
    if config.task is Task.SLEEP_QUALITY_ACTIVITY:
        return activity_items(config)
    raise ConfigError(f"no prompt items for task {config.task.value}")


def cmd_prompt_export(config: ExperimentConfig) -> Path:
    if config.model == "llm_finetune_export":
        mats = load_matrices(config)
        for k in ("train", "validation"):
            if k in mats and mats[k].labels:
                rows = [(dict(zip(mats[k].columns, x)), l) for x, l in zip(mats[k].X, mats[k].labels)]
                (config.out / f"finetune_{k}.jsonl").write_bytes(export_finetune_jsonl(rows, config.task))
    items = build_items(config)
    path = config.out / "prompts.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            rec = {"key": it.key, "truth": getattr(it.truth, "text", str(it.truth)), "bundle": it.bundle.to_dict()}
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    return path


def load_items(config: ExperimentConfig) -> list[Item]:
    path = config.out / "prompts.jsonl"
    if not path.exists():
        cmd_prompt_export(config)
    parse = LABEL_PARSERS[config.task]
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                items.append(Item(rec["key"], parse(rec["truth"]), PromptBundle.from_dict(rec["bundle"])))
    return items


def obtain_responses(config: ExperimentConfig, bundles: Sequence[PromptBundle]) -> list:
    """Replay from the transcript, or call the endpoint and append to it."""
    if config.replay:
        transcript = Transcript.load(config.transcript_path)
        return [transcript.replay(b) for b in bundles]
    config.transcript_path.parent.mkdir(parents=True, exist_ok=True)
    return run_batch(list(bundles), config.endpoint, TranscriptWriter(config.transcript_path))


def cmd_llm_run(config: ExperimentConfig) -> list:
    items = load_items(config)
    return obtain_responses(dataclasses.replace(config, replay=False), [it.bundle for it in items])


def score_inferences(config: ExperimentConfig, items: Sequence[Item], responses: Sequence) -> tuple:
    inferences = []
    failed = 0
    for r in responses:
        if isinstance(r, Exception):
            failed += 1
            inferences.append(None)
        else:
            inferences.append(parse_inference(r, config.task))
    truth = [it.truth for it in items]
    preds = [inf.label if inf else None for inf in inferences]
    if not truth:
        raise EmptyEvaluation("no items to evaluate")
    report = evaluate(preds, truth, _labels_for(truth, preds))
    n = len(truth)
    refusals = sum(1 for inf in inferences if inf and inf.refusal)
    report = dataclasses.replace(report, refusal_rate=refusals / n)
    confidences = [inf.confidence for inf in inferences if inf and inf.confidence is not None]
    extra = {
        "refusals": refusals,
        "unparseable": sum(1 for inf in inferences if inf and inf.unparseable),
        "failed": failed,
        "confidence": {
            "n": len(confidences),
            "mean": statistics.fmean(confidences) if confidences else None,
            "median": statistics.median(confidences) if confidences else None,
        },
        "predictions": {
            it.key: (getattr(p, "text", None) if p is not None else None) for it, p in zip(items, preds)
        },
    }
    return report, extra, inferences


def evaluate_llm(config: ExperimentConfig) -> EvalReport:
    items = load_items(config)
    responses = obtain_responses(config, [it.bundle for it in items])
    report, extra, _ = score_inferences(config, items, responses)
    note = ""
    if extra["unparseable"] or extra["failed"]:
        note = f"{extra['unparseable']} unparseable, {extra['failed']} failed"
    write_report(config, report, extra, note)
    return report


# ---------------------------------------------------------------------------
# Experiment entry points


def run_detection(config: ExperimentConfig) -> EvalReport | None:
    """Ingest, featurise or render, run the configured model and write the report."""
    if config.task not in (*DETECTION_TASKS, Task.SLEEP_QUALITY_ACTIVITY):
        raise ConfigError(f"run_detection does not handle {config.task.value}")
    config.out.mkdir(parents=True, exist_ok=True)
    if config.model in ("gbt", "majority"):
        cmd_train(config)
        return evaluate_classical(config)
    cmd_prompt_export(config)
    if config.model == "llm_finetune_export" and not config.replay:
        log.info("fine-tuning data exported; evaluate the tuned model with llm-run then llm-replay")
        return None
    return evaluate_llm(config)


def run_quality_agreement(config: ExperimentConfig):
    """Questionnaire scoring versus model answers as a 2x2 agreement table."""
    if config.task is not Task.SLEEP_QUALITY_PSQI:
        raise ConfigError("agreement needs task sleep_quality_psqi")
    config.out.mkdir(parents=True, exist_ok=True)
    cmd_prompt_export(config)
    items = load_items(config)
    if not items:
        raise EmptyEvaluation("no PSQI responses to compare")
    responses = obtain_responses(config, [it.bundle for it in items])
    report, extra, inferences = score_inferences(config, items, responses)
    pairs = [(it.truth, inf.label) for it, inf in zip(items, inferences) if inf is not None and inf.label is not None]
    if not pairs:
        raise EmptyEvaluation("no usable model answers")
    table = agreement_table([p[0] for p in pairs], [p[1] for p in pairs])
    name = config.endpoint.model_name
    _write_json(config.out / "agreement.json", {"schema_version": REPORT_SCHEMA_VERSION, **table.to_dict(),
                                                "excluded": len(items) - len(pairs)})
    (config.out / "agreement.txt").write_text(table.to_text(f"{name} response"), encoding="utf-8")
    write_report(config, report, extra)
    return table


@dataclass
class FeedbackOutcome:
    index: int
    suggestion: str | None
    script: str | None
    passed: bool | None
    leaked: tuple = ()
    themes: dict = field(default_factory=dict)


def run_feedback(config: ExperimentConfig, profiles: Sequence[UserProfile] | None = None) -> list[FeedbackOutcome]:
    """Suggestion and imagery prompts per profile, with imagery scripts checked for numeric leakage."""
    if profiles is None:
        if not config.data.get("profiles"):
            raise ConfigError("data.profiles is required")
        profiles = load_profiles(config.data["profiles"])
    config.out.mkdir(parents=True, exist_ok=True)
    if not profiles:
        log.warning("no profiles given; nothing to do")
        _write_json(config.out / "feedback.json", {"schema_version": REPORT_SCHEMA_VERSION, "profiles": [],
                                                   "passed": 0, "failed": 0})
        return []
    bundles = []
    for p in profiles:
        bundles += [build_suggestion_prompt(p), build_imagery_prompt(p)]
    responses = obtain_responses(config, bundles)
    outcomes = []
    for i, p in enumerate(profiles):
        sugg, script = responses[2 * i], responses[2 * i + 1]
        sugg = None if isinstance(sugg, Exception) else sugg
        script = None if isinstance(script, Exception) else script
        passed, leaked = None, ()
        if script is not None:
            v = validate_imagery(script, p.eeg_features)
            passed, leaked = v.passed, v.leaked_tokens
        themes = theme_checklist(sugg) if sugg is not None else {}
        outcomes.append(FeedbackOutcome(i, sugg, script, passed, leaked, themes))
    summary = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "passed": sum(1 for o in outcomes if o.passed),
        "failed": sum(1 for o in outcomes if o.passed is False),
        "profiles": [
            {"index": o.index, "passed": o.passed, "leaked_tokens": list(o.leaked), "themes": o.themes,
             "suggestion_prompt": bundles[2 * o.index].digest, "imagery_prompt": bundles[2 * o.index + 1].digest}
            for o in outcomes
        ],
    }
    _write_json(config.out / "feedback.json", summary)
    return outcomes


def cmd_psqi_score(config: ExperimentConfig) -> Path:
    path = config.out / "psqi_scores.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["participant_id,administration,c1,c2,c3,c4,c5,c6,c7,global,quality"]
    for rec, quality in _psqi_ground_truth(config):
        s = score_components(rec.response)
        comps = ",".join(str(c) for c in s.components)
        lines.append(f"{rec.participant_id},{rec.administration},{comps},{s.global_score},{quality.text}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def cmd_render(config: ExperimentConfig) -> list[Path]:
    if config.task is Task.SLEEP_QUALITY_ACTIVITY:
        activity_items(config)
        return sorted((config.out / "images").glob("*.png"))
    if config.task not in DETECTION_TASKS:
        raise ConfigError(f"nothing to render for {config.task.value}")
    prep = prepare(config, with_features=False)
    keys = {e.key for e in prep.splits["test"]}
    spec = config.image_spec()
    out = config.out / "images"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for epochs in iter_epochs(config, keys):
        for e in epochs:
            channel = config.image_channel or e.channel_names[0]
            sid = e.recording_id or e.subject_id
            for kind, png in (
                ("waveform", render_waveform(e, channel, spec)),
                ("spectrogram", render_spectrogram(wavelet_spectrogram(e, channel), spec)),
            ):
                path = out / image_filename(sid, f"{e.index:05d}", kind)
                path.write_bytes(png)
                written.append(path)
    return written


# ---------------------------------------------------------------------------
# Command line


def cmd_run(config: ExperimentConfig):
    if config.task is Task.SLEEP_QUALITY_PSQI:
        return run_quality_agreement(config)
    if config.task is Task.FEEDBACK:
        return run_feedback(config)
    return run_detection(config)


def cmd_eval(config: ExperimentConfig):
    if config.model in ("gbt", "majority"):
        return evaluate_classical(config)
    return evaluate_llm(config)


COMMANDS = {
    "ingest": (cmd_ingest, "segment the dataset and draw the seeded splits"),
    "features": (cmd_features, "extract per-epoch features into train/validation/test CSVs"),
    "render": (cmd_render, "render waveform/spectrogram or activity images"),
    "train": (cmd_train, "train the gbt or majority model on the training features"),
    "eval": (cmd_eval, "evaluate the configured model on the test split"),
    "prompt-export": (cmd_prompt_export, "write prompt bundles (and fine-tuning JSONL) for the test split"),
    "llm-run": (cmd_llm_run, "send exported prompts to the endpoint, appending to the transcript"),
    "llm-replay": (lambda c: evaluate_llm(dataclasses.replace(c, replay=True)), "score responses from a transcript"),
    "psqi-score": (cmd_psqi_score, "score PSQI questionnaires into components and classes"),
    "agreement": (run_quality_agreement, "PSQI scoring versus model answers (2x2 table)"),
    "feedback": (run_feedback, "generate suggestion and imagery prompts and validate scripts"),
    "run": (cmd_run, "run the whole experiment described by the config"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sleepsense", description=__doc__)
    parser.add_argument("--version", action="version", version=f"sleepsense {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True, help="experiment YAML file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. split.seed=3 (repeatable)")
        p.add_argument("-o", "--output-dir", help="override output_dir")
        p.add_argument("--replay", action="store_true", help="answer LLM prompts from the transcript only")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _summary(result) -> str:
    if isinstance(result, EvalReport):
        acc = "-" if result.accuracy is None else f"{100 * result.accuracy:.1f}%"
        f1 = "-" if result.weighted_f1 is None else f"{result.weighted_f1:.3f}"
        return f"accuracy {acc}, weighted F1 {f1}, refusals {100 * result.refusal_rate:.1f}%"
    if hasattr(result, "agreement"):
        return f"agreement {100 * result.agreement:.1f}% over {result.total}"
    if isinstance(result, list) and result and isinstance(result[0], FeedbackOutcome):
        return f"{sum(1 for o in result if o.passed)} of {len(result)} imagery scripts passed"
    if isinstance(result, dict):
        return json.dumps(result, sort_keys=True)
    return "" if result is None else str(result)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.output_dir:
            overrides.append(f"output_dir={args.output_dir}")
        if args.replay:
            overrides.append("replay=true")
        config = load_config(args.config, overrides)
        func = COMMANDS[args.command][0]
        with RunLock(config.out):
            manifest = RunManifest(config.digest(), __version__, args.command, config.seed, _now(),
                                   input_digests=input_digests(config))
            result = func(config)
            manifest.finished = _now()
            manifest.write(config.out / "manifest.json")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EndpointError.exit_code
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except SleepSenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    text = _summary(result)
    if text:
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
