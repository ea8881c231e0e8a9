"""CSV tables, schema files and the JSON model artifact."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import (
    DEFAULT_ALPHABET,
    DataError,
    Dataset,
    Encoder,
    FeatureSchema,
    FeatureSpec,
    MarginalSet,
    Quantizer,
    normalize_kind,
)
from .pipeline import FittedModel
from .solver import FitReport, SolverConfig
from .tensor_model import FactorModel

FORMAT_VERSION = 1
MISSING_MARKERS = ("", "NA")


class ArtifactError(ValueError):
    """Malformed or unsupported model file."""


@dataclass(frozen=True)
class ColumnRole:
    name: str
    role: str
    alphabet: Optional[int] = None


@dataclass(frozen=True)
class SchemaFile:
    """Parsed schema file: predictor and response columns in declaration order."""

    columns: tuple

    @property
    def predictors(self) -> tuple:
        return tuple(c for c in self.columns if c.role not in ("response", "ignore"))

    @property
    def responses(self) -> tuple:
        return tuple(c.name for c in self.columns if c.role == "response")

    def alphabets(self, default: int = DEFAULT_ALPHABET) -> dict:
        return {c.name: c.alphabet or default for c in self.predictors}


def parse_schema(text: str, source: str = "<schema>") -> SchemaFile:
    """Parse ``name = kind [alphabet]`` lines; ``#`` starts a comment.

    ``kind`` is a predictor kind, ``response``, or ``ignore``.
    """
    columns, seen = [], set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected 'column = kind', got {raw.strip()!r}")
        name, value = (part.strip() for part in line.split("=", 1))
        words = value.split()
        if not name or not words:
            raise DataError(f"{source}:{lineno}: empty column name or kind")
        role = words[0].lower()
        if role not in ("response", "ignore"):
            try:
                role = normalize_kind(role)
            except ValueError:
                raise DataError(f"{source}:{lineno}: unknown kind {words[0]!r}") from None
        alphabet = None
        if len(words) > 2 or (len(words) == 2 and role != "continuous"):
            raise DataError(f"{source}:{lineno}: only continuous columns take an alphabet size")
        if len(words) == 2:
            try:
                alphabet = int(words[1])
            except ValueError:
                raise DataError(f"{source}:{lineno}: bad alphabet size {words[1]!r}") from None
            if alphabet < 2:
                raise DataError(f"{source}:{lineno}: alphabet size must be at least 2")
        if name in seen:
            raise DataError(f"{source}:{lineno}: column {name!r} declared twice")
        seen.add(name)
        columns.append(ColumnRole(name, role, alphabet))
    schema = SchemaFile(tuple(columns))
    if not schema.predictors:
        raise DataError(f"{source}: no predictor columns declared")
    return schema


def read_schema(path) -> SchemaFile:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read schema file {os.fspath(path)!r}: {exc.strerror}") from None
    return parse_schema(text, os.fspath(path))


def _number(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {column!r}: cannot parse {text!r} as a number") \
            from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {column!r}: non-finite value {text!r}")
    return value


def read_table(path_or_file, schema: SchemaFile, responses: str = "required") -> Dataset:
    """Load a CSV into a :class:`Dataset` ordered as the schema declares.

    ``responses`` is ``"required"``, ``"optional"`` (absent columns become
    NaN) or ``"ignore"``. Row numbers in error messages count the header as
    row 1.
    """
    if hasattr(path_or_file, "read"):
        return _read_rows(path_or_file, schema, responses, "<stream>")
    try:
        with open(path_or_file, newline="", encoding="utf-8") as fh:
            return _read_rows(fh, schema, responses, os.fspath(path_or_file))
    except OSError as exc:
        raise DataError(f"cannot read {os.fspath(path_or_file)!r}: {exc.strerror}") from None


def _read_rows(fh, schema, responses, source):
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        raise DataError(f"{source}: empty file, expected a header row")
    header = [h.strip() for h in header]
    declared = {c.name for c in schema.columns}
    unknown = [h for h in header if h not in declared]
    if unknown:
        raise DataError(f"{source}: columns {unknown} are not declared in the schema")
    position = {h: j for j, h in enumerate(header)}
    absent = [c.name for c in schema.predictors if c.name not in position]
    if responses == "required":
        absent += [r for r in schema.responses if r not in position]
    if absent:
        raise DataError(f"{source}: schema columns {absent} are missing from the header")

    preds = schema.predictors
    raw = {c.name: [] for c in preds}
    ys = {r: [] for r in schema.responses}
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not field.strip() for field in row):
            continue
        if len(row) != len(header):
            raise DataError(
                f"{source}: row {rowno} has {len(row)} fields, header has {len(header)}"
            )
        for c in preds:
            text = row[position[c.name]].strip()
            if text in MISSING_MARKERS:
                raw[c.name].append(None)
            elif c.role == "categorical":
                raw[c.name].append(text)
            else:
                raw[c.name].append(_number(text, rowno, c.name))
        for r in schema.responses:
            if r not in position or responses == "ignore":
                ys[r].append(math.nan)
                continue
            text = row[position[r]].strip()
            if text in MISSING_MARKERS:
                if responses == "required":
                    raise DataError(f"{source}: row {rowno} has no value for response {r!r}")
                ys[r].append(math.nan)
            else:
                ys[r].append(_number(text, rowno, r))

    columns = []
    for c in preds:
        values = raw[c.name]
        if c.role == "categorical":
            columns.append(np.array(values, dtype=object))
        else:
            columns.append(np.array([math.nan if v is None else v for v in values], dtype=float))
    n_rows = len(raw[preds[0].name])
    y = np.array([ys[r] for r in schema.responses], dtype=float).T if schema.responses \
        else np.full((n_rows, 1), math.nan)
    y = y.reshape(n_rows, max(len(schema.responses), 1))
    names = schema.responses or ("y",)
    return Dataset(tuple(c.name for c in preds), tuple(c.role for c in preds),
                   tuple(columns), y, tuple(names))


def write_table(fh, header, rows) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                         for v in row])


# --------------------------------------------------------------------------
# Model artifact


def _matrix(a):
    return [[float(x) for x in row] for row in np.asarray(a)]


def artifact_dict(fitted: FittedModel) -> dict:
    schema = fitted.schema
    features = []
    for spec in schema.features:
        entry = {"name": spec.name, "kind": spec.kind, "alphabet_size": spec.alphabet_size}
        if spec.label_map is not None:
            entry["labels"] = sorted(spec.label_map, key=spec.label_map.get)
        q = fitted.encoder.quantizers.get(spec.name)
        if q is not None:
            entry["levels"] = [float(x) for x in q.levels]
            entry["boundaries"] = [float(x) for x in q.boundaries]
            entry["distortion_trace"] = [float(x) for x in q.distortion_trace]
        features.append(entry)
    cfg = asdict(fitted.config)
    if not np.isscalar(cfg["mu"]):
        cfg["mu"] = [float(m) for m in cfg["mu"]]
    model = fitted.model
    return {
        "format_version": FORMAT_VERSION,
        "features": features,
        "responses": list(schema.responses),
        "factors": [_matrix(a) for a in model.factors],
        "output_factor": None if model.output_factor is None else _matrix(model.output_factor),
        "marginals": [[float(x) for x in p] for p in fitted.marginals.pmfs],
        "config": cfg,
        "missing": fitted.missing,
        "report": _finite_report(fitted.report.to_dict()),
    }


def _finite_report(report: dict) -> dict:
    # diverged restarts have non-finite objectives, which JSON cannot hold
    report["restart_objectives"] = [
        x if math.isfinite(x) else None for x in report["restart_objectives"]
    ]
    return report


def artifact_from_dict(doc: dict) -> FittedModel:
    try:
        version = doc["format_version"]
    except (KeyError, TypeError):
        raise ArtifactError("model file has no format_version") from None
    if not isinstance(version, int) or version < 1:
        raise ArtifactError(f"invalid format_version {version!r}")
    if version > FORMAT_VERSION:
        raise ArtifactError(
            f"model file format {version} is newer than supported ({FORMAT_VERSION})"
        )
    try:
        specs, quantizers = [], {}
        for entry in doc["features"]:
            labels = entry.get("labels")
            label_map = None if labels is None else {lab: i for i, lab in enumerate(labels, 1)}
            specs.append(FeatureSpec(entry["name"], entry["kind"], entry["alphabet_size"],
                                     label_map))
            if "levels" in entry:
                quantizers[entry["name"]] = Quantizer(
                    np.array(entry["levels"], dtype=float),
                    np.array(entry["boundaries"], dtype=float),
                    tuple(entry.get("distortion_trace", ())),
                )
        schema = FeatureSchema(tuple(specs), tuple(doc["responses"]))
        v = doc["output_factor"]
        model = FactorModel(
            tuple(np.array(a, dtype=float) for a in doc["factors"]),
            None if v is None else np.array(v, dtype=float),
        )
        if model.shape != schema.shape:
            raise ArtifactError("factor shapes do not match the feature alphabets")
        marginals = MarginalSet(tuple(np.array(p, dtype=float) for p in doc["marginals"]))
        cfg = dict(doc["config"])
        if isinstance(cfg.get("mu"), list):
            cfg["mu"] = tuple(cfg["mu"])
        report = dict(doc["report"])
        report["restart_objectives"] = [
            math.nan if x is None else x for x in report["restart_objectives"]
        ]
        report = FitReport(**report)
        return FittedModel(Encoder(schema, quantizers), model, marginals,
                           SolverConfig(**cfg), report, doc.get("missing", "drop"))
    except ArtifactError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"malformed model file: {exc}") from None


def dumps_artifact(fitted: FittedModel) -> str:
    return json.dumps(artifact_dict(fitted), indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_artifact(fitted: FittedModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_artifact(fitted))


def load_artifact(path) -> FittedModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ArtifactError(f"cannot read model file {os.fspath(path)!r}: {exc.strerror}") \
            from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"model file {os.fspath(path)!r} is not valid JSON: {exc}") from None
    return artifact_from_dict(doc)
