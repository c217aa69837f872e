"""Command-line entry point: ``smtpflow <subcommand> ...``.

Exit codes: 0 success, 1 internal error, 2 bad input or usage.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import queue
import socket
import sys
import threading

import numpy as np

from . import aggregate, logcorr, synth
from .classifier import calibrate_arrays, combine_votes, feature_votes
from .errors import SmtpFlowError
from .fileio import (
    CLASSIFIED_FIELDS,
    atomic_output,
    read_key_values,
    read_labeled_csv,
    synth_config_from_mapping,
    thresholds_from_mapping,
    write_labeled_csv,
    write_thresholds,
)
from .lists import ListKind, label_by_lists, load_list, write_list
from .model import FlowClass, Thresholds
from .netflow import (
    flow_row,
    iter_v5_stream,
    parse_v5,
    paused_gc,
    read_csv,
    read_csv_chunks,
    write_csv,
)

log = logging.getLogger("smtpflow")

CHUNK = 65_536
EXIT_OK, EXIT_INTERNAL, EXIT_BAD_INPUT = 0, 1, 2


class UsageError(Exception):
    """Bad invocation; reported with exit code 2."""


def _require_file(path):
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    return path


def _load_thresholds(path):
    if path is None:
        return Thresholds()
    with open(_require_file(path)) as fh:
        return thresholds_from_mapping(read_key_values(fh))


def _parse_hostport(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _report_row_errors(errors, strict):
    for err in errors:
        print(f"malformed input: {err}", file=sys.stderr)
    if errors and strict:
        raise SmtpFlowError(f"{len(errors)} malformed record(s) with --strict")


# -- flow sources ---------------------------------------------------------

def udp_batches(host, port, max_packets=None, timeout=None, ready=None):
    """Receive v5 datagrams on one reader thread; yield decoded flow batches in arrival order.

    Undecodable datagrams are logged and dropped. Stops after
    ``max_packets`` datagrams or ``timeout`` seconds of silence.
    """
    batches = queue.Queue(maxsize=1024)
    done = object()
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind((host, port))
    sock.settimeout(timeout)
    if ready is not None:
        ready(sock.getsockname())

    def reader():
        received = 0
        try:
            while max_packets is None or received < max_packets:
                try:
                    data, peer = sock.recvfrom(65535)
                except socket.timeout:
                    break
                received += 1
                try:
                    batches.put(parse_v5(data)[1])
                except SmtpFlowError as exc:
                    log.warning("dropped datagram from %s: %s", peer, exc)
        finally:
            sock.close()
            batches.put(done)

    thread = threading.Thread(target=reader, name="v5-reader", daemon=True)
    thread.start()
    while (batch := batches.get()) is not done:
        yield batch
    thread.join()


def _input_format(args):
    source, fmt = args.input, args.format
    if fmt == "auto":
        if source.startswith("udp:"):
            return "udp"
        return "csv" if source.lower().endswith(".csv") else "v5"
    return fmt


def _flow_source(args, errors):
    """Iterate :class:`FlowRecord` objects from the configured input."""
    source, fmt = args.input, _input_format(args)
    if fmt == "udp":
        host, port = _parse_hostport(source.removeprefix("udp:"))
        return itertools.chain.from_iterable(
            udp_batches(host, port, args.max_packets, args.timeout))
    _require_file(source)
    if fmt == "csv":
        def rows():
            with open(source, newline="") as fh:
                yield from read_csv(fh, errors)
        return rows()

    def datagrams():
        with open(source, "rb") as fh:
            for _, flows in iter_v5_stream(fh):
                yield from flows
    return datagrams()


def _row_chunks(args, errors):
    """Like :func:`_flow_source` but yields ``(rows, values)`` blocks for bulk work."""
    if _input_format(args) == "csv":
        with open(_require_file(args.input), newline="") as fh:
            yield from read_csv_chunks(fh, errors, CHUNK)
        return
    flows = _flow_source(args, errors)
    while chunk := list(itertools.islice(flows, CHUNK)):
        rows = [flow_row(f) for f in chunk]
        yield rows, np.array([r[2:] for r in rows], dtype=np.int64)


# -- subcommands ----------------------------------------------------------

def cmd_classify(args):
    t = _load_thresholds(args.thresholds)
    errors = []
    names = [c.label for c in FlowClass]
    with atomic_output(args.output) as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CLASSIFIED_FIELDS)
        for rows, values in _row_chunks(args, errors):
            # values columns: src_port dst_port protocol start end packets bytes flags
            X = values[:, [6, 5]].astype(np.float64)
            votes = feature_votes(X, t)
            decided = combine_votes(votes)
            with paused_gc():
                writer.writerows(
                    row + [names[c], names[v[0]], names[v[1]], names[v[2]]]
                    for row, c, v in zip(rows, decided.tolist(), votes.tolist())
                )
        _report_row_errors(errors, args.strict)
    return EXIT_OK


def cmd_label(args):
    has_log = args.log is not None
    has_lists = args.black is not None or args.white is not None
    if has_log and has_lists:
        raise UsageError("BothSourcesGiven: use either --log or --black/--white")
    if not has_log and not has_lists:
        raise UsageError("NoSourceGiven: need --log or --black/--white")
    errors = []
    flows = _flow_source(args, errors)
    with atomic_output(args.output) as out:
        if has_log:
            with open(_require_file(args.log)) as fh:
                entries = logcorr.parse_log(fh)
            cfg = logcorr.MatchConfig(args.window_ms, not args.any_server)
            labels = logcorr.match(flows, entries, cfg)
        else:
            lists = {}
            for kind, path in ((ListKind.BLACK, args.black), (ListKind.WHITE, args.white)):
                if path is None:
                    lists[kind] = load_list([], kind)
                else:
                    with open(_require_file(path)) as fh:
                        lists[kind] = load_list(fh, kind)
            labels = label_by_lists(flows, lists[ListKind.BLACK], lists[ListKind.WHITE])
        write_labeled_csv(labels, out)
        _report_row_errors(errors, args.strict)
    return EXIT_OK


def _read_labels(path):
    with open(_require_file(path), newline="") as fh:
        return list(read_labeled_csv(fh))


def cmd_report(args):
    labels = _read_labels(args.input)
    report = aggregate.build_report(labels, args.bucket_ms, args.spike_factor,
                                    args.spike_window, args.min_count)
    stem = args.output[:-5] if args.output.endswith(".json") else args.output
    for cls in FlowClass:
        sizes = [lf.flow.bytes for lf in labels if lf.label is cls]
        if sizes:
            with atomic_output(f"{stem}.{cls.label}.cdf.csv") as out:
                aggregate.write_cdf_csv(aggregate.compute_cdf(sizes), out)
    with atomic_output(args.output) as out:
        json.dump(report, out, indent=2, sort_keys=True)
        out.write("\n")
    for line in report["diagnostics"]:
        print(f"note: {line}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args):
    values = {}
    if args.config:
        with open(_require_file(args.config)) as fh:
            values = read_key_values(fh)
    if args.ensemble:
        values["ensemble"] = "true"
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.sessions is not None:
        values["n_sessions"] = str(args.sessions)
    cfg = synth_config_from_mapping(values)
    result = synth.generate(cfg)
    black, white = synth.sender_lists(cfg)
    prefix = args.output

    labeled = result.labeled()
    with atomic_output(f"{prefix}.flows.csv") as out:
        write_csv((lf.flow for lf in labeled), out)
    with atomic_output(f"{prefix}.log") as out:
        logcorr.write_log(result.log_entries(), out)
    with atomic_output(f"{prefix}.truth.csv") as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["flow_id", "true_class", "reason"])
        for i, lf in enumerate(labeled):
            writer.writerow([i, lf.label.label, lf.reason.value if lf.reason else ""])
    with atomic_output(f"{prefix}.labeled.csv") as out:
        write_labeled_csv(labeled, out)
    with atomic_output(f"{prefix}.black.txt") as out:
        write_list(black, out)
    with atomic_output(f"{prefix}.white.txt") as out:
        write_list(white, out)
    return EXIT_OK


def _label_arrays(labels):
    X = np.array([(lf.flow.bytes, lf.flow.packets) for lf in labels], dtype=np.float64).reshape(-1, 2)
    y = np.array([int(lf.label) for lf in labels], dtype=np.int64)
    return X, y


def cmd_calibrate(args):
    X, y = _label_arrays(_read_labels(args.input))
    t = calibrate_arrays(X, y)
    with atomic_output(args.output) as out:
        write_thresholds(t, out)
    return EXIT_OK


def confusion_matrix(y_true, y_pred):
    m = np.zeros((3, 3), dtype=np.int64)
    np.add.at(m, (y_true, y_pred), 1)
    return m


def cmd_eval(args):
    X, y = _label_arrays(_read_labels(args.input))
    if len(y) == 0:
        raise SmtpFlowError("no labeled flows to evaluate")
    pred = combine_votes(feature_votes(X, _load_thresholds(args.thresholds)))
    m = confusion_matrix(y, pred)
    names = [c.label for c in FlowClass]
    print("truth \\ predicted " + " ".join(f"{n:>10}" for n in names))
    for name, row in zip(names, m):
        print(f"{name:<18}" + " ".join(f"{v:>10d}" for v in row))
    print(f"accuracy {np.trace(m) / m.sum():.6f}")
    return EXIT_OK


def cmd_collect(args):
    host, port = _parse_hostport(args.listen)
    with atomic_output(args.output) as out:
        batches = udp_batches(host, port, args.max_packets, args.timeout)
        write_csv(itertools.chain.from_iterable(batches), out)
    return EXIT_OK


# -- parser ---------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="smtpflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def flow_input(p):
        p.add_argument("--input", required=True,
                       help="flow CSV, binary NetFlow v5 file, or udp:HOST:PORT")
        p.add_argument("--format", choices=["auto", "csv", "v5", "udp"], default="auto")
        p.add_argument("--max-packets", type=int, default=None, help="udp: stop after N datagrams")
        p.add_argument("--timeout", type=float, default=None, help="udp: stop after S idle seconds")
        p.add_argument("--strict", action="store_true", help="fail on any malformed record")

    p = sub.add_parser("classify", help="label flows from header features")
    flow_input(p)
    p.add_argument("--output", required=True)
    p.add_argument("--thresholds", help="key=value thresholds file")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("label", help="ground-truth labels from a server log or lists")
    flow_input(p)
    p.add_argument("--output", required=True)
    p.add_argument("--log")
    p.add_argument("--black")
    p.add_argument("--white")
    p.add_argument("--window-ms", type=int, default=60_000)
    p.add_argument("--any-server", action="store_true", help="match on client address only")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("report", help="aggregate labeled flows into a JSON report")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--bucket-ms", type=int, default=aggregate.QUARTER_HOUR_MS)
    p.add_argument("--spike-factor", type=float, default=5.0)
    p.add_argument("--spike-window", type=int, default=96)
    p.add_argument("--min-count", type=int, default=100)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate synthetic flows, log and ground truth")
    p.add_argument("--config", help="key=value generator config")
    p.add_argument("--output", required=True, help="output path prefix")
    p.add_argument("--seed", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--ensemble", action="store_true", help="multi-server list-validation traffic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="fit thresholds to labeled flows")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="confusion matrix of the classifier on labeled flows")
    p.add_argument("--input", required=True)
    p.add_argument("--thresholds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("collect", help="receive NetFlow v5 over UDP and write flow CSV")
    p.add_argument("--listen", required=True, help="HOST:PORT")
    p.add_argument("--output", required=True)
    p.add_argument("--max-packets", type=int)
    p.add_argument("--timeout", type=float, default=None)
    p.set_defaults(func=cmd_collect)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_BAD_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, SmtpFlowError, OSError) as exc:
        print(f"smtpflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"smtpflow {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
