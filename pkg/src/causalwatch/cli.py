"""Command line entry point.

Subcommands are file pipelines run in-process; ``detect --server`` instead
streams the rows to a running ``causalwatch serve`` instance.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DatasetError, PreprocessConfig, load_csv
from .detector import (DetectorError, StreamState, ThresholdMatrix, calibrate,
                       scores_from_squared_errors)
from .discovery import CausalModel, DiscoveryConfig, discover
from .evaluation import DetectionMetrics, alarm_intervals, evaluate, report
from .synth import (AnomalySpec, VarProcessSpec, generate_var, inject_anomaly,
                    write_fixture)

log = logging.getLogger("causalwatch")

EXIT_ALARM = 2


class CliError(Exception):
    pass


def _load_model(path) -> CausalModel:
    try:
        return CausalModel.load(path)
    except FileNotFoundError:
        raise CliError(f"no such model file: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"malformed model file {path}: {exc}") from None


def _load_thresholds(path, model) -> ThresholdMatrix:
    try:
        return ThresholdMatrix.load(path, model)
    except FileNotFoundError:
        raise CliError(f"no such thresholds file: {path}") from None
    except (json.JSONDecodeError, ValueError) as exc:
        raise CliError(f"malformed thresholds file {path}: {exc}") from None


def _read_jsonl(path) -> list[dict]:
    out = []
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{lineno}: {exc}") from None
    return out


def _write(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- learn / calibrate ------------------------------------------------------

def cmd_learn(args) -> int:
    ds = load_csv(args.input, timestamp_column=args.timestamp_column, fill=args.fill)
    pcfg = PreprocessConfig(tau_cap=args.tau_cap, t_s=args.t_s, tau_max=args.tau_max,
                            literal_constant_test=args.literal_constant_test)
    dcfg = DiscoveryConfig(alpha=args.alpha, pc_alpha=args.pc_alpha,
                           max_conds_dim=args.max_conds_dim, prune=not args.no_prune)
    model = discover(ds, pcfg, dcfg)
    model.save(args.out)
    if args.dot:
        Path(args.dot).write_text(model.to_dot())
    log.info("wrote %s: %d links, %d of %d variables in the model", args.out,
             len(model.links), len(model.variables_in_model()), ds.N)
    return 0


def cmd_calibrate(args) -> int:
    model = _load_model(args.model)
    ds = load_csv(args.input, timestamp_column=args.timestamp_column, fill=args.fill)
    columns = model.preprocess.columns or model.preprocess.kept
    try:
        ds = ds.select(columns)
    except DatasetError as exc:
        raise CliError(f"calibration data does not match the model: {exc}") from None
    thr = calibrate(ds, model, window=args.window)
    thr.save(args.out, model)
    return 0


# -- detect -----------------------------------------------------------------

def _row_source(fh, follow: bool, idle_timeout: float):
    """Yield CSV records; in follow mode keep polling for appended lines."""
    buffer = ""
    idle_since = time.monotonic()
    while True:
        line = fh.readline()
        if line:
            buffer += line
            if not line.endswith("\n"):
                continue
            idle_since = time.monotonic()
            yield from csv.reader([buffer])
            buffer = ""
            continue
        if buffer:
            yield from csv.reader([buffer])
            buffer = ""
        if not follow or time.monotonic() - idle_since > idle_timeout:
            return
        time.sleep(0.05)


def _rows(records, columns):
    header = next(records, None)
    if header is None:
        return
    header = [h.strip() for h in header]
    try:
        idx = [header.index(c) for c in columns]
    except ValueError as exc:
        raise CliError(f"stream header lacks a model column: {exc}") from None
    for lineno, rec in enumerate(records, 2):
        if not rec or all(not c.strip() for c in rec):
            continue
        try:
            yield np.array([float(rec[k]) for k in idx])
        except (ValueError, IndexError):
            raise CliError(f"stream row {lineno} is malformed") from None


def _open_stream(args):
    if args.input in (None, "-"):
        return sys.stdin
    try:
        return open(args.input, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise CliError(f"no such file: {args.input}") from None


def cmd_detect(args) -> int:
    model = _load_model(args.model)
    thr = _load_thresholds(args.thresholds, model)
    columns = model.preprocess.columns or model.preprocess.kept
    fh = _open_stream(args)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        rows = _rows(_row_source(fh, args.follow, args.idle_timeout), columns)
        if args.server:
            fired = _detect_remote(args, model, thr, rows, out)
        else:
            fired = _detect_local(args, model, thr, rows, out)
    finally:
        if fh is not sys.stdin:
            fh.close()
        if out is not sys.stdout:
            out.close()
    return EXIT_ALARM if fired else 0


def _emit(record: dict, out) -> None:
    out.write(json.dumps(record) + "\n")
    out.flush()


def _detect_local(args, model, thr, rows, out) -> bool:
    try:
        state = StreamState(model, thr, window=args.window,
                            stop_on_first=args.stop_on_first, side=args.side)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    for row in rows:
        alarm = state.push_sample(row)
        if alarm is not None:
            _emit(alarm.to_dict(model), out)
        if state.stopped:
            return True
    alarm = state.finish()
    if alarm is not None:
        _emit(alarm.to_dict(model), out)
    return False


client_factory = None  # tests swap in an in-process client


def _http_client(base_url):
    if client_factory is not None:
        return client_factory(base_url)
    import httpx
    return httpx.Client(base_url=base_url, timeout=30.0)


def _detect_remote(args, model, thr, rows, out, batch: int = 256) -> bool:
    client = _http_client(args.server)

    def call(method, url, **kw):
        resp = client.request(method, url, **kw)
        if resp.status_code >= 400:
            raise CliError(f"server error {resp.status_code} on {url}: {resp.text}")
        return resp.json()

    model_id = call("POST", "/models/import", json=model.to_dict())["model_id"]
    call("PUT", f"/models/{model_id}/thresholds", json={"thresholds": thr.to_dict(model)})
    stream_id = call("POST", "/streams", json={
        "model_id": model_id, "stop_on_first": args.stop_on_first,
        "window": args.window, "side": args.side})["stream_id"]
    pending, sent = [], 0
    stopped = False

    def flush():
        nonlocal stopped, sent
        res = call("POST", f"/streams/{stream_id}/samples",
                   json={"rows": [r.tolist() for r in pending], "source_index": sent})
        sent += len(pending)
        pending.clear()
        for rec in res["alarms"]:
            _emit(rec, out)
        stopped = res["stopped"]

    for row in rows:
        pending.append(row)
        if len(pending) >= batch:
            flush()
            if stopped:
                return True
    if pending:
        flush()
        if stopped:
            return True
    for rec in call("POST", f"/streams/{stream_id}/close")["alarms"]:
        _emit(rec, out)
    return False


# -- explain / eval / report / synth --------------------------------------------

def cmd_explain(args) -> int:
    model = _load_model(args.model)
    records = _read_jsonl(args.alarm_log)
    index = {n: k for k, n in enumerate(model.names)}
    sq: dict = {}
    try:
        for rec in records:
            for b in rec["broken"]:
                key = (index[b["src"]], index[b["dst"]], int(b["lag"]))
                sq[key] = sq.get(key, 0.0) + float(b["error"]) ** 2
    except KeyError as exc:
        raise CliError(f"alarm log does not match the model: {exc}") from None
    ranking = scores_from_squared_errors(model, sq, args.side)
    if args.json:
        _write(json.dumps([{"var": model.names[v], "score": s} for v, s in ranking]) + "\n",
               args.out)
        return 0
    width = max(len(n) for n in model.names)
    lines = [f"{'rank':>4}  {'variable':<{width}}  score"]
    for r, (v, s) in enumerate(ranking, 1):
        lines.append(f"{r:>4}  {model.names[v]:<{width}}  {s:.6g}")
    _write("\n".join(lines) + "\n", args.out)
    return 0


def _read_labels(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None
    if not rows:
        raise CliError(f"{path}: empty labels file")
    header = [h.strip() for h in rows[0]]
    col = header.index("label") if "label" in header else len(header) - 1
    try:
        return np.array([int(float(r[col])) for r in rows[1:] if r], dtype=bool)
    except (ValueError, IndexError):
        raise CliError(f"{path}: labels must be 0/1") from None


def cmd_eval(args) -> int:
    records = _read_jsonl(args.alarms)
    labels = _read_labels(args.labels)
    try:
        metrics = evaluate(alarm_intervals(records), labels, grace=args.grace,
                           point_level=args.point_level)
    except (KeyError, ValueError) as exc:
        raise CliError(str(exc)) from None
    _write(json.dumps(metrics.to_dict(), indent=1) + "\n", args.out)
    return 0


def cmd_report(args) -> int:
    try:
        metrics = DetectionMetrics.from_dict(json.loads(Path(args.metrics).read_text()))
    except FileNotFoundError:
        raise CliError(f"no such file: {args.metrics}") from None
    except (json.JSONDecodeError, TypeError) as exc:
        raise CliError(f"malformed metrics file: {exc}") from None
    _write(report(metrics, args.format), args.out)
    return 0


def cmd_synth(args) -> int:
    try:
        spec = VarProcessSpec.from_dict(json.loads(Path(args.spec).read_text()))
        attack = (AnomalySpec.from_dict(json.loads(Path(args.attack).read_text()))
                  if args.attack else None)
    except FileNotFoundError as exc:
        raise CliError(f"no such file: {exc.filename}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"malformed spec: {exc}") from None
    normal = generate_var(spec, args.T, args.seed)
    labeled = None
    if attack is not None:
        attack_seed = args.seed + 1 if args.attack_seed is None else args.attack_seed
        base = generate_var(spec, args.T, attack_seed)
        labeled = inject_anomaly(base, spec, attack, attack_seed)
    paths = write_fixture(args.out_dir, spec, normal, args.seed, labeled,
                          prefix=args.prefix, T=args.T)
    for kind, path in paths.items():
        print(f"{kind}\t{path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    uvicorn.run("causalwatch.service.app:app", host=args.host, port=args.port)
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causalwatch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=json.dumps({"name": "causalwatch", "version": __version__}))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_opts(sp):
        sp.add_argument("--timestamp-column", default=None,
                        help="column holding ISO-8601 or integer-second timestamps")
        sp.add_argument("--fill", choices=["reject", "ffill"], default="reject",
                        help="how to treat empty cells")

    sp = sub.add_parser("learn", help="learn the normal causal model")
    sp.add_argument("--input", required=True, help="normal recording (CSV)")
    sp.add_argument("--out", required=True, help="model JSON to write")
    sp.add_argument("--alpha", type=float, default=0.05, help="MCI significance level")
    sp.add_argument("--pc-alpha", type=float, default=None,
                    help="condition-selection significance (default: alpha)")
    sp.add_argument("--tau-cap", type=int, default=20, help="upper bound on the lag bound")
    sp.add_argument("--t-s", type=int, default=None,
                    help="fixed subsampling interval in rows (default: spectral)")
    sp.add_argument("--tau-max", type=int, default=None,
                    help="fixed lag bound (default: spectral)")
    sp.add_argument("--max-conds-dim", type=int, default=None,
                    help="cap on condition-selection set size")
    sp.add_argument("--no-prune", action="store_true",
                    help="keep links weaker than the mean |coefficient|")
    sp.add_argument("--literal-constant-test", action="store_true",
                    help="drop columns with mean < 0.01 * std instead of std < 0.01 * |mean|")
    sp.add_argument("--dot", default=None, help="also write a Graphviz file")
    data_opts(sp)
    sp.set_defaults(func=cmd_learn)

    sp = sub.add_parser("calibrate", help="compute per-link alarm thresholds")
    sp.add_argument("--input", required=True, help="normal recording (CSV)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True, help="thresholds JSON to write")
    sp.add_argument("--window", type=int, default=None,
                    help="sliding regression window in subsampled rows (default: expanding)")
    data_opts(sp)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("detect", help="monitor a stream and emit alarm JSON lines")
    sp.add_argument("--model", required=True)
    sp.add_argument("--thresholds", required=True)
    sp.add_argument("--input", default=None, help="stream CSV (default: stdin)")
    sp.add_argument("--out", default=None, help="alarm log (default: stdout)")
    sp.add_argument("--follow", action="store_true", help="keep reading appended rows")
    sp.add_argument("--idle-timeout", type=float, default=5.0,
                    help="seconds without new rows before --follow gives up")
    sp.add_argument("--stop-on-first", action="store_true",
                    help="exit with status 2 at the first alarm")
    sp.add_argument("--window", type=int, default=None,
                    help="sliding window; must match calibration")
    sp.add_argument("--side", choices=["parent", "child"], default="parent",
                    help="root-cause aggregation side")
    sp.add_argument("--server", default=None,
                    help="URL of a running service to stream rows to")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("explain", help="rank root-cause variables from an alarm log")
    sp.add_argument("--alarm-log", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--side", choices=["parent", "child"], default="parent")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("eval", help="precision / recall / F1 of an alarm log")
    sp.add_argument("--alarms", required=True)
    sp.add_argument("--labels", required=True, help="CSV with a 0/1 'label' column")
    sp.add_argument("--grace", type=int, default=0, help="steps allowed after an episode")
    sp.add_argument("--point-level", action="store_true")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="generate a synthetic VAR fixture")
    sp.add_argument("--spec", required=True, help="process spec JSON")
    sp.add_argument("--T", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--attack", default=None, help="anomaly spec JSON")
    sp.add_argument("--attack-seed", type=int, default=None,
                    help="seed of the attacked realization (default: seed + 1)")
    sp.add_argument("--out-dir", default="fixtures")
    sp.add_argument("--prefix", default="var")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("report", help="render a metrics file")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--format", choices=["md", "json"], default="md")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("serve", help="run the HTTP service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DatasetError, DetectorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
