"""``herdlife`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
Failures print one line to stderr: ``herdlife: error=<kind> exit=<code> reason=<text>``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import ingestion as ing
from . import metrics as mt
from . import sequencing as sq
from . import synth
from . import workflow as wf
from .checkpoint import CheckpointError
from .baselines import ForestConfig
from .transformer import ModelConfig, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
COMMANDS = ("generate", "ingest", "train", "evaluate", "predict", "sweep", "compare")

DEFAULTS = {"seed": 0, "model": "transformer", "task": "regression", "seq_len": 10, "out_dir": "out",
            "cows": 2000, "signal_mode": "nonlinear-sequential", "data_dir": None, "checkpoint": None,
            "epochs": None, "lengths": "5,10,20,40", "eval_k": "1,5,10,20,40"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="herdlife", description="Herd-life prediction from dairy event records.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file; any flag may be set there, command-line flags win")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", choices=wf.MODELS)
    p.add_argument("--task", choices=("regression", "classification"))
    p.add_argument("--seq-len", type=int, dest="seq_len")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--cows", type=int)
    p.add_argument("--signal-mode", dest="signal_mode", choices=synth.SIGNAL_MODES)
    p.add_argument("--data-dir", dest="data_dir", help="directory holding ds102.csv ... ds202.csv")
    p.add_argument("--checkpoint")
    p.add_argument("--epochs", type=int, help="cap on transformer training epochs")
    p.add_argument("--lengths", help="sweep: comma-separated training lengths")
    p.add_argument("--eval-k", dest="eval_k", help="sweep: comma-separated evaluation k values")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args: argparse.Namespace) -> tuple[dict, dict]:
    """Merge defaults < config file < flags. Returns (flags, extra config sections)."""
    file_cfg: dict = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
    extra = {k: file_cfg.pop(k) for k in ("generator", "model_config", "forest_config") if k in file_cfg}
    unknown = set(file_cfg) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    flags = dict(DEFAULTS)
    flags.update(file_cfg)
    flags.update({k: v for k, v in vars(args).items() if k in DEFAULTS and v is not None})
    return flags, extra


def _ints(text: str, name: str) -> list[int]:
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"--{name} expects comma-separated integers") from e
    if not vals or min(vals) < 1:
        raise UsageError(f"--{name} needs positive integers")
    return vals


def _need(flags: dict, key: str, command: str) -> str:
    if not flags.get(key):
        raise UsageError(f"{command} needs --{key.replace('_', '-')}")
    return flags[key]


def _section(extra: dict, name: str, cls) -> dict:
    cfg = dict(extra.get(name) or {})
    unknown = set(cfg) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise UsageError(f"unknown {name} keys: {sorted(unknown)}")
    return cfg


def _model_config(flags: dict, extra: dict) -> dict:
    cfg = _section(extra, "model_config", ModelConfig)
    if flags.get("epochs"):
        cfg["epochs"] = flags["epochs"]
    return cfg


def _forest_config(extra: dict) -> dict:
    return _section(extra, "forest_config", ForestConfig)


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    flags, extra = resolve(args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(flags["out_dir"])
    cmd = args.command
    seed = int(flags["seed"])
    record = {"command": cmd, "seed": seed, "flags": flags, **extra}

    if cmd == "generate":
        gen = dict(extra.get("generator", {}))
        gen.update({"n_cows": flags["cows"], "signal_mode": flags["signal_mode"], "seed": seed})
        try:
            cfg = synth.default_config(**gen)
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad generator config: {e}") from e
        data = synth.generate(cfg)
        data.write(out)
        wf.dump_json(synth.marginal_report(data.tables, cfg), out / "marginal_report.json")
    elif cmd == "ingest":
        data_dir = _need(flags, "data_dir", cmd)
        raw = ing.load_tables(data_dir)
        histories, report = ing.run_pipeline(raw)
        out.mkdir(parents=True, exist_ok=True)
        ing.write_report(report, out / "cleansing_report.json")
        ing.write_histories_csv(histories, out / "histories.csv")
        wf.dump_json(sq.record_count_summary(histories) if histories else {}, out / "record_counts.json")
    elif cmd == "train":
        data_dir = _need(flags, "data_dir", cmd)
        prep = wf.prepare(data_dir, seed)
        t = wf.train_model(prep, flags["model"], flags["task"], int(flags["seq_len"]), seed,
                           _model_config(flags, extra), _forest_config(extra))
        out.mkdir(parents=True, exist_ok=True)
        wf.save_trained(t, prep, out / "model.ckpt", seed, int(flags["seq_len"]))
        if t.history is not None:
            from .transformer import write_history
            write_history(t.history, out / "history.csv")
    elif cmd in ("evaluate", "predict"):
        ckpt = _need(flags, "checkpoint", cmd)
        data_dir = _need(flags, "data_dir", cmd)
        if not Path(ckpt).is_file():
            raise UsageError(f"checkpoint {ckpt} does not exist")
        t, info = wf.load_trained(ckpt)
        std = ing.Standardizer.from_dict(info["standardizer"]) if info.get("standardizer") else None
        seq_len = int(info.get("seq_len") or flags["seq_len"])
        out.mkdir(parents=True, exist_ok=True)
        if cmd == "evaluate":
            prep = wf.prepare(data_dir, int(info.get("split_seed", 0)), standardizer=std)
            pred = wf.predict(t, prep.test, seq_len)
            rep, farms = wf.evaluate_predictions(prep.test, pred, p=None if t.kind == "transformer" else 16)
            (out / "eval_report.json").write_text(rep.to_json() + "\n")
            mt.write_per_farm_csv(farms, out / "per_farm.csv")
            if rep.confusion is not None:
                mt.write_confusion_csv(rep.confusion, out / "confusion.csv")
        else:
            raw = ing.load_tables(data_dir)
            histories, _ = ing.run_pipeline(raw, require_target=False)
            if std is None:
                raise UsageError("checkpoint carries no standardiser")
            histories = ing.apply_standardizer(std, histories)
            if not histories:
                raise ing.DataError("no cows with usable records")
            wf.write_predictions_csv(wf.predict(t, histories, seq_len), out / "predictions.csv")
    elif cmd == "sweep":
        data_dir = _need(flags, "data_dir", cmd)
        lengths, ks = _ints(flags["lengths"], "lengths"), _ints(flags["eval_k"], "eval-k")
        cfg = ModelConfig(**_model_config(flags, extra))
        prep = wf.prepare(data_dir, seed)
        rows = mt.length_sweep(prep.train, prep.test, lengths, ks, cfg, seed)
        out.mkdir(parents=True, exist_ok=True)
        mt.write_sweep_csv(rows, out / "sweep.csv")
    elif cmd == "compare":
        data_dir = _need(flags, "data_dir", cmd)
        prep = wf.prepare(data_dir, seed)
        rows, reports = wf.compare(prep, seed, int(flags["seq_len"]), _model_config(flags, extra),
                                   _forest_config(extra))
        out.mkdir(parents=True, exist_ok=True)
        wf.dump_json({"rows": rows, "reports": {k: v.to_dict() for k, v in reports.items()}},
                     out / "compare.json")
        with open(out / "compare.csv", "w") as fh:
            fh.write("model,task,r2,accuracy\n")
            for r in rows:
                fh.write(f"{r['model']},{r['task']},{'' if r['r2'] is None else repr(r['r2'])},"
                         f"{'' if r['accuracy'] is None else repr(r['accuracy'])}\n")
    out.mkdir(parents=True, exist_ok=True)
    wf.dump_json(record, out / f"run_{cmd}.json")
    return EXIT_OK


def _fail(kind: str, code: int, reason: str) -> int:
    reason = " ".join(str(reason).split())
    print(f"herdlife: error={kind} exit={code} reason={reason}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except UsageError as e:
        return _fail("usage", EXIT_USAGE, e)
    except TrainingDiverged as e:
        return _fail("diverged", EXIT_DIVERGED, e)
    except (ing.DataError, CheckpointError, ValueError, OSError) as e:
        return _fail("data", EXIT_DATA, e)


if __name__ == "__main__":
    sys.exit(main())
