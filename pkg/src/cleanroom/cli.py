"""Command-line entry points.

Every subcommand takes ``--config file.json`` plus any number of
``--set dotted.key=value`` overrides and writes its outputs, together with a
``manifest.json`` recording the resolved config, seeds and versions, under
``--out``. Exit codes: 0 success, 1 usage or config error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

import cleanroom
from cleanroom import audit, data, metrics, model, privacy, protocol, training
from cleanroom.compression import Codec

log = logging.getLogger("cleanroom")

FEATURES, MODEL, LABELS = "data.cvrd", "model.cvrm", "data.labels.csv"

_SESSION = {
    "batch_size": 256,
    "codec": "none",
    "dp": {"mode": "off", "epsilon": None},
    "debias": True,
    "reduction": "sum",
    "report_loss": False,
    "seed": 0,
}
_ADAPTER = {"id": "adv", "rank": 1, "layers": None, "alpha": None, "seed": 0}
_OPTIMIZER = {"kind": "sgd", "lr": 0.001, "momentum": 0.0, "beta1": 0.9, "beta2": 0.999, "adam_epsilon": 1e-8}

DEFAULTS: dict[str, dict] = {
    "gen-data": data.GeneratorConfig().to_dict(),
    "pretrain": {"hidden": [64, 32], "seed": 0, "epochs": 3, "batch_size": 512, "lr": 3e-3},
    "serve-cleanroom": {"session": _SESSION},
    "split-train": {
        "session": _SESSION, "adapter": _ADAPTER, "optimizer": _OPTIMIZER,
        "epochs": 1, "batch_seed": 0, "max_steps": None,
    },
    "local-train": {
        "trainable": "adapter", "adapter": _ADAPTER, "optimizer": _OPTIMIZER,
        "dp": {"mode": "off", "epsilon": None}, "debias": True, "flip_seed": 0, "reduction": "sum",
        "batch_size": 256, "epochs": 1, "batch_seed": 0, "max_steps": None,
    },
    "eval": {"adapter": None},
    "audit-leakage": {
        "b_values": [8, 16, 32, 64, 128, 256], "d": 16, "hidden": [32, 16], "rank": 1, "layers": None,
        "codecs": ["none"], "epsilons": [None], "trials": 3, "positive_rate": 0.5, "seed": 0,
    },
    "report": {},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config ------------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg: dict, key: str, value, defaults: dict) -> None:
    parts = key.split(".")
    node, ref = cfg, defaults
    for i, part in enumerate(parts):
        if not isinstance(ref, dict) or part not in ref:
            raise UsageError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
        if i == len(parts) - 1:
            node[part] = value
        else:
            node, ref = node[part], ref[part]


def _merge(cfg: dict, update: dict, defaults: dict, prefix: str = "") -> None:
    for k, v in update.items():
        if k not in defaults:
            raise UsageError(f"unknown config key {prefix + k!r}")
        if isinstance(defaults[k], dict) and isinstance(v, dict):
            _merge(cfg[k], v, defaults[k], f"{prefix}{k}.")
        else:
            cfg[k] = v


def resolve_config(subcommand: str, path: str | None, overrides: list[str]) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides; unknown keys are errors."""
    defaults = DEFAULTS[subcommand]
    cfg = copy.deepcopy(defaults)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        _merge(cfg, loaded, defaults)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        _set_dotted(cfg, key.strip(), _parse_value(value), defaults)
    return cfg


def _seeds(cfg, prefix="") -> dict:
    out = {}
    for k, v in cfg.items():
        if isinstance(v, dict):
            out.update(_seeds(v, f"{prefix}{k}."))
        elif "seed" in k:
            out[prefix + k] = v
    return out


def session_from(cfg: dict, param_count: int = 1, signature: bytes = bytes(32)) -> protocol.SessionConfig:
    dp = cfg["dp"]
    budget = privacy.PrivacyBudget(dp["mode"], dp.get("epsilon"))
    return protocol.SessionConfig(
        int(cfg["batch_size"]), param_count, Codec.parse(cfg["codec"]), budget, bool(cfg["debias"]),
        cfg["reduction"], bool(cfg["report_loss"]), int(cfg["seed"]), signature,
    )


def _optimizer(cfg: dict) -> training.OptimizerConfig:
    return training.OptimizerConfig(**cfg)


# -- file access guard ------------------------------------------------------------------

_denied: tuple[str, ...] = ()
_hook_installed = False


def _audit_hook(event, args):
    if event == "open" and _denied and isinstance(args[0], (str, bytes, os.PathLike)):
        name = os.fsdecode(args[0])
        if name.endswith(_denied):
            raise PermissionError(f"this party may not open {name}")


def deny_reads(*suffixes: str) -> None:
    """Refuse, for the rest of this command, to open files of the other party's kind."""
    global _denied, _hook_installed
    if not _hook_installed:
        sys.addaudithook(_audit_hook)
        _hook_installed = True
    _denied = suffixes


# -- helpers ----------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, bytes):
        return o.hex()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _dataset_stem(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        return p / "data"
    return p.with_suffix("") if p.suffix == ".cvrd" else p


def _features_path(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        return p / FEATURES
    return p if p.suffix == ".cvrd" else p.with_suffix(".cvrd")


def _model_path(path: str) -> Path:
    p = Path(path)
    return p / MODEL if p.is_dir() else p


class Run:
    """Per-invocation state: output directory, manifest and recorded outputs."""

    def __init__(self, args, cfg, argv):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "subcommand": args.command,
            "argv": list(argv),
            "config": cfg,
            "seeds": _seeds(cfg),
            "versions": {
                "cleanroom": cleanroom.__version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "inputs": {},
            "outputs": {},
            "status": "running",
            "partial": False,
        }

    def input(self, path: Path) -> None:
        self.manifest["inputs"][str(path)] = _sha256(path)

    def output(self, name: str) -> Path:
        return self.out / name

    def record(self, *names: str) -> None:
        for name in names:
            self.manifest["outputs"][name] = _sha256(self.out / name)

    def finish(self, status: str, error: str = "", partial: bool = False) -> None:
        self.manifest.update(status=status, partial=partial)
        if error:
            self.manifest["error"] = error
        _write_json(self.out / "manifest.json", self.manifest)


# -- subcommands --------------------------------------------------------------------------


def cmd_gen_data(args, cfg, run: Run) -> None:
    try:
        gcfg = data.GeneratorConfig.from_dict(cfg)
    except (TypeError, data.DataError) as e:
        raise UsageError(str(e)) from None
    ds = data.generate(gcfg)
    data.save(ds, run.output("data"))
    run.manifest["digest"] = ds.digest()
    run.manifest["base_rate"] = ds.base_rate
    run.record(FEATURES, LABELS)
    print(ds.digest())


def cmd_pretrain(args, cfg, run: Run) -> None:
    stem = _dataset_stem(args.data)
    run.input(stem.with_suffix(".cvrd"))
    run.input(stem.with_suffix(".labels.csv"))
    ds = data.load(stem)
    base = training.pretrain(ds, tuple(cfg["hidden"]), int(cfg["seed"]), int(cfg["epochs"]),
                             int(cfg["batch_size"]), float(cfg["lr"]))
    model.save_model(base, run.output(MODEL))
    run.manifest["base_checksum"] = base.checksum()
    run.record(MODEL)


def _ensure_adapter(m: model.AdaptedModel, acfg: dict) -> str:
    aid = acfg["id"]
    if aid not in m.adapters:
        m.add_adapter(aid, acfg["layers"], acfg["rank"], acfg["alpha"], int(acfg["seed"]))
    return aid


def cmd_serve_cleanroom(args, cfg, run: Run) -> None:
    deny_reads(".cvrd")
    if not args.labels:
        raise UsageError("serve-cleanroom needs --labels")
    labels_path = Path(args.labels)
    run.input(labels_path)
    store = data.load_labels(labels_path)
    room = protocol.CleanRoom(store, session_from(cfg["session"]), adopt_model=True)
    host, port = protocol.parse_address(args.listen)
    server = protocol.TcpCleanRoomServer(room, host, port)
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    summaries = server.serve(args.sessions)
    _write_json(run.output("cleanroom.json"), [vars(s) for s in summaries])
    run.record("cleanroom.json")
    run.manifest["sessions"] = len(summaries)


def cmd_split_train(args, cfg, run: Run) -> None:
    transport_spec = args.transport
    if transport_spec != "loopback":
        if not transport_spec.startswith("tcp:"):
            raise UsageError("--transport must be loopback or tcp:HOST:PORT")
        if args.labels:
            raise UsageError("--labels is only meaningful with the loopback transport")
        # the feature party has no business with label files
        deny_reads(".csv")
    elif not args.labels:
        raise UsageError("the loopback transport hosts the clean room in-process and needs --labels")
    feat = _features_path(args.features)
    run.input(feat)
    ds = data.load_features(feat)
    model_path = _model_path(args.model)
    run.input(model_path)
    m = model.load_model(model_path)
    m.base.freeze()
    aid = _ensure_adapter(m, cfg["adapter"])
    session = session_from(cfg["session"], m.param_count(aid), m.signature(aid))
    if transport_spec == "loopback":
        labels_path = Path(args.labels)
        run.input(labels_path)
        transport, thread = protocol.start_loopback_cleanroom(data.load_labels(labels_path), session)
    else:
        transport = protocol.TcpTransport.connect(*protocol.parse_address(transport_spec[4:]))
        thread = None
    try:
        report = training.split_train(
            m, aid, ds, session, _optimizer(cfg["optimizer"]), transport,
            epochs=int(cfg["epochs"]), batch_seed=int(cfg["batch_seed"]), max_steps=cfg["max_steps"],
        )
    except training.TrainingAborted as e:
        _write_json(run.output("train_report.json"), e.report.to_dict())
        run.record("train_report.json")
        raise
    finally:
        if thread is not None:
            thread.join(5)
    model.save_model(m, run.output(MODEL))
    _write_json(run.output("train_report.json"), report.to_dict())
    run.record(MODEL, "train_report.json")
    run.manifest["checksum"] = report.checksum


def cmd_local_train(args, cfg, run: Run) -> None:
    stem = _dataset_stem(args.data)
    run.input(stem.with_suffix(".cvrd"))
    run.input(stem.with_suffix(".labels.csv"))
    ds = data.load(stem)
    model_path = _model_path(args.model)
    run.input(model_path)
    m = model.load_model(model_path)
    budget = privacy.PrivacyBudget(cfg["dp"]["mode"], cfg["dp"]["epsilon"])
    labels = ds.labels
    q = budget.keep_prob
    if q < 1.0:
        # same one-shot flip the clean room applies: sorted ids, flip seed
        order = np.argsort(ds.sample_ids)
        flipped = privacy.flip_labels(ds.labels[order], q, int(cfg["flip_seed"])).labels
        labels = np.empty_like(flipped)
        labels[order] = flipped
    mode = privacy.LossMode(q if cfg["debias"] and q < 1.0 else None, cfg["reduction"])
    if cfg["trainable"] == "all_params":
        m = model.AdaptedModel(m.base.unfrozen_copy())
        trainable = training.ALL_PARAMS
    elif cfg["trainable"] == "adapter":
        m.base.freeze()
        trainable = _ensure_adapter(m, cfg["adapter"])
    else:
        raise UsageError("trainable must be 'adapter' or 'all_params'")
    report = training.local_train(
        m, trainable, ds, _optimizer(cfg["optimizer"]), mode, batch_size=int(cfg["batch_size"]),
        epochs=int(cfg["epochs"]), batch_seed=int(cfg["batch_seed"]), max_steps=cfg["max_steps"], labels=labels,
    )
    if trainable == training.ALL_PARAMS:
        m.base.freeze()
    model.save_model(m, run.output(MODEL))
    _write_json(run.output("train_report.json"), report.to_dict())
    run.record(MODEL, "train_report.json")
    run.manifest["checksum"] = report.checksum


def cmd_eval(args, cfg, run: Run) -> None:
    stem = _dataset_stem(args.data)
    run.input(stem.with_suffix(".cvrd"))
    run.input(stem.with_suffix(".labels.csv"))
    ds = data.load(stem)
    model_path = _model_path(args.model)
    run.input(model_path)
    m = model.load_model(model_path)
    aid = cfg["adapter"]
    if aid is not None and aid not in m.adapters:
        raise UsageError(f"model has no adapter {aid!r}")
    rep = metrics.evaluate(privacy.sigmoid(m.forward(ds.X, aid)), ds.labels)
    report_path = Path(args.report) if args.report else run.output("eval.json")
    _write_json(report_path, rep.to_dict())
    run.manifest["outputs"][str(report_path)] = _sha256(report_path)
    run.manifest["metrics"] = rep.to_dict()


def cmd_audit_leakage(args, cfg, run: Run) -> None:
    rows = audit.leakage_sweep(
        [int(b) for b in cfg["b_values"]], int(cfg["d"]), tuple(cfg["hidden"]), int(cfg["rank"]), cfg["layers"],
        [Codec.parse(c) for c in cfg["codecs"]], cfg["epsilons"], int(cfg["trials"]),
        float(cfg["positive_rate"]), int(cfg["seed"]),
    )
    audit.write_sweep_csv(rows, run.output("leakage.csv"))
    _write_json(run.output("leakage.json"), audit.sweep_to_dicts(rows))
    run.record("leakage.csv", "leakage.json")


def cmd_report(args, cfg, run: Run) -> None:
    runs = []
    for d in args.runs:
        mpath = Path(d) / "manifest.json"
        if not mpath.exists():
            raise UsageError(f"{d} has no manifest.json")
        man = json.loads(mpath.read_text())
        entry = {"dir": str(d), "subcommand": man["subcommand"], "status": man["status"], "partial": man["partial"]}
        for key in ("metrics", "checksum", "digest"):
            if key in man:
                entry[key] = man[key]
        tr = Path(d) / "train_report.json"
        if tr.exists():
            t = json.loads(tr.read_text())
            entry["train"] = {k: t[k] for k in ("steps", "epochs", "bytes_up", "bytes_down", "wall_time")}
            if t["loss_curve"]:
                entry["train"]["final_loss"] = t["loss_curve"][-1]
        lk = Path(d) / "leakage.json"
        if lk.exists():
            entry["leakage"] = json.loads(lk.read_text())
        runs.append(entry)
    _write_json(run.output("report.json"), {"runs": runs})
    run.record("report.json")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "serve-cleanroom": cmd_serve_cleanroom,
    "split-train": cmd_split_train,
    "local-train": cmd_local_train,
    "eval": cmd_eval,
    "audit-leakage": cmd_audit_leakage,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cleanroom", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text, out_required=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path; value parsed as JSON when possible)")
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    add("gen-data", "generate a synthetic dataset")
    sp = add("pretrain", "train and freeze a base model")
    sp.add_argument("--data", required=True, help="dataset directory or stem")
    sp = add("serve-cleanroom", "run the label-side clean room over TCP")
    sp.add_argument("--labels", help="label CSV (sample_id,label)")
    sp.add_argument("--listen", default="127.0.0.1:7001", help="HOST:PORT (port 0 picks a free port)")
    sp.add_argument("--sessions", type=int, default=1, help="sessions to serve before exiting")
    sp = add("split-train", "fine-tune an adapter against a clean room")
    sp.add_argument("--model", required=True)
    sp.add_argument("--features", required=True, help="feature file (.cvrd) or dataset directory")
    sp.add_argument("--transport", default="loopback", help="loopback or tcp:HOST:PORT")
    sp.add_argument("--labels", help="label CSV for the in-process clean room (loopback only)")
    sp = add("local-train", "train with local labels (baseline and oracle)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp = add("eval", "score a model on a labelled dataset", out_required=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", help="where to write the metrics JSON")
    add("audit-leakage", "label-recovery sweep against the aggregate")
    sp = add("report", "collect run directories into one summary")
    sp.add_argument("runs", nargs="+", help="run output directories")
    return p


def _setup_logging() -> None:
    level = os.environ.get("CVR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def run(argv: list[str] | None = None) -> int:
    global _denied
    argv = sys.argv[1:] if argv is None else list(argv)
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command == "eval" and args.out is None:
            args.out = str(Path(args.report).parent) if args.report else "."
        cfg = resolve_config(args.command, args.config, args.set)
    except UsageError as e:
        print(f"cleanroom: error: {e}", file=sys.stderr)
        return 1
    r = Run(args, cfg, argv)
    t0 = time.perf_counter()
    try:
        COMMANDS[args.command](args, cfg, r)
    except UsageError as e:
        r.finish("usage_error", str(e))
        print(f"cleanroom: error: {e}", file=sys.stderr)
        return 1
    except training.TrainingAborted as e:
        r.finish("error", str(e), partial=True)
        print(f"cleanroom: training aborted: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every failure maps to exit code 2
        log.debug("command failed", exc_info=True)
        r.finish("error", f"{type(e).__name__}: {e}")
        print(f"cleanroom: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    finally:
        _denied = ()
    r.manifest["wall_time"] = time.perf_counter() - t0
    r.finish("ok")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
