"""Labeled-flow CSV, key=value config files and atomic output."""
from __future__ import annotations

import contextlib
import csv
import os
import tempfile
from dataclasses import fields, replace

from .errors import InvalidConfig, MalformedRow, MissingHeader
from .model import (
    FLOW_FIELDS,
    FlowClass,
    LabeledFlow,
    LabelSource,
    RejectReason,
    Thresholds,
    validate_flow,
)
from .netflow import _row_to_flow, flow_row

LABELED_FIELDS = FLOW_FIELDS + ("label", "reason", "label_source")
CLASSIFIED_FIELDS = FLOW_FIELDS + ("class", "bytes_vote", "packets_vote", "bpp_vote")


@contextlib.contextmanager
def atomic_output(path, mode="w", newline=""):
    """Write to a temporary sibling of ``path``; rename into place on success."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"newline": newline})) as fh:
            yield fh
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_labeled_csv(labels, stream):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(LABELED_FIELDS)
    for lf in labels:
        writer.writerow(flow_row(lf.flow) + [
            lf.label.label,
            lf.reason.value if lf.reason else "",
            lf.label_source.value,
        ])


def read_labeled_csv(stream, errors=None):
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != LABELED_FIELDS:
        raise MissingHeader("labeled CSV must start with: " + ",".join(LABELED_FIELDS))
    n = len(FLOW_FIELDS)
    for row in reader:
        if not row:
            continue
        try:
            if len(row) != len(LABELED_FIELDS):
                raise ValueError(f"expected {len(LABELED_FIELDS)} columns, got {len(row)}")
            flow = validate_flow(_row_to_flow(row[:n]))
            label = FlowClass.parse(row[n])
            reason = RejectReason.from_code(row[n + 1]) if row[n + 1] else None
            yield LabeledFlow(flow, label, reason, LabelSource(row[n + 2]))
        except (ValueError, KeyError) as exc:
            err = MalformedRow(reader.line_num, str(exc))
            if errors is None:
                raise err from None
            errors.append(err)


def read_key_values(stream) -> dict:
    """Parse ``key = value`` lines; ``#`` comments and blank lines are ignored."""
    out = {}
    for lineno, line in enumerate(stream, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep or not key.strip():
            raise InvalidConfig(f"line {lineno}", f"expected key=value, got {text!r}")
        out[key.strip()] = value.strip()
    return out


def _number(text):
    value = float(text)
    return int(value) if value.is_integer() else value


def thresholds_from_mapping(values: dict, base: Thresholds = Thresholds()) -> Thresholds:
    known = {f.name for f in fields(Thresholds)}
    unknown = set(values) - known
    if unknown:
        raise InvalidConfig(sorted(unknown)[0], "unknown threshold")
    try:
        return replace(base, **{k: _number(v) for k, v in values.items()})
    except ValueError as exc:
        raise InvalidConfig("thresholds", str(exc)) from None


def write_thresholds(t: Thresholds, stream):
    for key, value in t.to_dict().items():
        stream.write(f"{key}={value}\n")


def synth_config_from_mapping(values: dict):
    """Build a :class:`SynthConfig` (or :class:`EnsembleConfig`) from key=value pairs.

    Besides plain field names this accepts ``ensemble=true``,
    ``reason.<CODE>=weight``, ``sizes.<field>=value``, ``servers=ip:w,ip:w``
    and comma-separated tuples for the mix and peak-hour fields.
    """
    from .synth import REASONS, EnsembleConfig, SizeModel, SynthConfig

    values = dict(values)
    ensemble = values.pop("ensemble", "false").lower() in ("1", "true", "yes")
    cls = EnsembleConfig if ensemble else SynthConfig
    plain = {f.name: f for f in fields(cls)}
    kwargs, reasons, sizes = {}, {}, {}
    for key, raw in values.items():
        try:
            if key.startswith("reason."):
                reasons[RejectReason.from_code(key[len("reason."):])] = float(raw)
            elif key.startswith("sizes."):
                name = key[len("sizes."):]
                if name not in {f.name for f in fields(SizeModel)}:
                    raise InvalidConfig(key, "unknown size parameter")
                sizes[name] = _number(raw)
            elif key == "servers":
                pairs = []
                for item in raw.split(","):
                    addr, _, weight = item.strip().partition(":")
                    pairs.append((addr, float(weight or 1.0)))
                kwargs["servers"] = tuple(pairs)
            elif key in ("spam_mix", "ham_mix", "diurnal_peak_hours"):
                kwargs[key] = tuple(float(x) for x in raw.split(","))
            elif key in plain:
                kwargs[key] = _number(raw)
            else:
                raise InvalidConfig(key, "unknown synth parameter")
        except ValueError as exc:
            if isinstance(exc, InvalidConfig):
                raise
            raise InvalidConfig(key, str(exc)) from None
    if reasons:
        kwargs["reason_weights"] = {r: reasons.get(r, 0.0) for r in REASONS}
    if sizes:
        kwargs["sizes"] = SizeModel(**sizes)
    return cls(**kwargs).validate()
