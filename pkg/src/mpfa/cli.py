"""Command-line entry point.

Exit codes: 0 success, 1 numeric/runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .baselines import EdgeBankScorer, RandomScorer
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigurationError,
    MPFAError,
    NumericError,
    ParameterError,
    ParseError,
    ProtocolError,
)
from .events import chronological_split, inductive_mask, load_csv, synth_recurrent, write_csv
from .model import MPFA, get_ablation
from .seeds import derive_seed
from .training import (
    MPFAScorer,
    TrainConfig,
    evaluate_linkpred,
    node_classification,
    run_ablations,
    run_id,
    sweep,
    sweep_neighbors,
    train,
    warm_state,
)

log = logging.getLogger("mpfa")

TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
RUN_DEFAULTS = {
    "data": None, "header": True, "bipartite": None, "out": "runs/latest", "model": "mpfa",
    "repeats": 1, "window": None, "checkpoint": None, "task": "linkpred",
    "k_list": [1, 2, 3, 5, 10, 20, 30], "param": None, "values": None,
    "num_nodes": 100, "num_events": 10_000, "recurrence_prob": 0.9, "noise": 0.1, "feat_dim": 4,
    "max_events": None, "nc_epochs": 50,
}


class UsageError(MPFAError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def build_run_config(args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` JSON file, then explicit flags."""
    config = {**TrainConfig().to_dict(), **RUN_DEFAULTS}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = json.loads(path.read_text())
        unknown = set(loaded) - set(config)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        config.update(loaded)
    for key in config:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    config["command"] = args.command
    return config


def recorded(config: dict) -> dict:
    """Config as written into artifacts; the output directory does not identify a run."""
    return {k: v for k, v in config.items() if k != "out"}


def train_config(config: dict) -> TrainConfig:
    return TrainConfig.from_dict({k: config[k] for k in TRAIN_KEYS})


def load_stream(config: dict):
    if not config["data"]:
        raise UsageError("--data is required")
    return load_csv(config["data"], header=config["header"], bipartite=config["bipartite"])


def make_plan(stream, config: dict, mode: str | None = None):
    plan = chronological_split(stream, config["train_frac"], config["val_frac"])
    if (mode or config["mode"]) == "inductive":
        plan = inductive_mask(stream, plan, config["inductive_fraction"],
                              derive_seed(config["seed"], "inductive-mask"))
    return plan


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

class Output:
    """Collects artifacts under one directory and writes the manifest."""

    def __init__(self, directory: str | Path, config: dict):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = recorded(config)
        self.files: list[str] = []
        self.volatile: list[str] = []

    def path(self, name: str) -> Path:
        return self.dir / name

    def json(self, name: str, payload: dict, volatile: bool = False) -> None:
        self.path(name).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        (self.volatile if volatile else self.files).append(name)

    def csv(self, name: str, rows: list[dict], fieldnames: list[str] | None = None) -> None:
        buf = io.StringIO()
        buf.write("# run_config=" + json.dumps(self.config, sort_keys=True) + "\n")
        fieldnames = fieldnames or (list(rows[0]) if rows else [])
        if fieldnames:
            w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        self.path(name).write_text(buf.getvalue())
        self.files.append(name)

    def register(self, name: str) -> None:
        self.files.append(name)

    def finish(self) -> None:
        entries = {name: hashlib.sha256(self.path(name).read_bytes()).hexdigest() for name in self.files}
        manifest = {"run_config": self.config, "run_id": run_id(self.config), "files": entries,
                    "unhashed": sorted(self.volatile)}
        self.path("manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _report_payload(report, config: dict) -> dict:
    payload = report.to_dict()
    payload["config"] = recorded(config)
    payload["run_id"] = run_id(recorded(config))
    return payload


def _baseline_eval(stream, plan, config: dict, mode: str):
    scorer = EdgeBankScorer(config["window"]) if config["model"] == "edgebank" else \
        RandomScorer(derive_seed(config["seed"], "random-scores"))
    scorer.warm(stream, plan.train_events(), plan.train.stop)
    evaluate_linkpred(scorer, stream, plan.val, plan, mode, config["batch_size"],
                      derive_seed(config["seed"], "val-negatives"))
    return evaluate_linkpred(scorer, stream, plan.test, plan, mode, config["batch_size"],
                             derive_seed(config["seed"], "test-negatives"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(config: dict) -> int:
    stream = load_stream(config)
    plan = make_plan(stream, config)
    out = Output(config["out"], config)
    start = time.perf_counter()
    if config["model"] != "mpfa":
        report = _baseline_eval(stream, plan, config, config["mode"])
        out.json("report.json", _report_payload(report, config))
    else:
        cfg = train_config(config)
        runs = []
        for rep in range(config["repeats"]):
            seed = cfg.seed if rep == 0 else derive_seed(cfg.seed, "repeat", rep)
            result = train(stream, plan, replace(cfg, seed=seed))
            runs.append(result)
        first = runs[0]
        payload = _report_payload(first.report, config)
        if len(runs) > 1:
            stats = {}
            for metric in ("ap", "auc", "acc"):
                vals = np.array([r.report.metrics()[metric] for r in runs])
                stats[metric] = {"mean": float(vals.mean()), "std": float(vals.std()), "runs": vals.tolist()}
            payload["repeats"] = stats
        out.json("report.json", payload)
        state = first.model.new_state()
        state.restore(first.test_state)
        save_checkpoint(out.path("checkpoint.json"), first.model, state, first.report.config,
                        {"run_config": recorded(config), "mode": plan.mode})
        out.register("checkpoint.json")
        curve = first.report.curves
        out.csv("loss_curve.csv", [
            {"epoch": e, "train_loss": curve["train_loss"][e], "val_ap": curve["val_ap"][e],
             "val_auc": curve["val_auc"][e], "val_acc": curve["val_acc"][e]}
            for e in range(len(curve["train_loss"]))
        ])
    out.json("timing.json", {"seconds": time.perf_counter() - start}, volatile=True)
    out.finish()
    report_doc = json.loads(out.path("report.json").read_text())
    print(json.dumps({k: report_doc[k] for k in ("ap", "auc", "acc")}))
    return 0


def cmd_eval(config: dict) -> int:
    stream = load_stream(config)
    out = Output(config["out"], config)
    mode = config["mode"]
    if config["task"] == "nodeclass":
        if not config["checkpoint"]:
            raise UsageError("--checkpoint is required for node classification")
        ckpt = load_checkpoint(config["checkpoint"])
        plan = make_plan(stream, config, "transductive")
        report = node_classification(stream, plan, ckpt.model, epochs=config["nc_epochs"],
                                     batch_size=config["batch_size"], seed=config["seed"])
    elif config["model"] != "mpfa":
        plan = make_plan(stream, config, mode)
        report = _baseline_eval(stream, plan, config, mode)
    else:
        if not config["checkpoint"]:
            raise UsageError("--checkpoint is required for --model mpfa")
        ckpt = load_checkpoint(config["checkpoint"])
        plan = make_plan(stream, config, mode)
        state = ckpt.state
        if state is None:
            state = ckpt.model.new_state()
            warm_state(ckpt.model, state, stream, range(plan.test.start), config["batch_size"])
            state.cursor = plan.test.start
        seed = ckpt.train_config.get("seed", config["seed"])
        report = evaluate_linkpred(MPFAScorer(ckpt.model, state), stream, plan.test, plan, mode,
                                   config["batch_size"], derive_seed(seed, "test-negatives"))
    out.json("report.json", _report_payload(report, config))
    out.finish()
    print(json.dumps(report.metrics()))
    return 0


def cmd_ablate(config: dict) -> int:
    stream = load_stream(config)
    plan = make_plan(stream, config)
    out = Output(config["out"], config)
    out.csv("ablations.csv", run_ablations(stream, plan, train_config(config)))
    out.finish()
    return 0


def cmd_sweep_neighbors(config: dict) -> int:
    stream = load_stream(config)
    plan = make_plan(stream, config)
    out = Output(config["out"], config)
    out.csv("sweep_neighbors.csv", sweep_neighbors(stream, plan, train_config(config), config["k_list"]))
    out.finish()
    return 0


def cmd_sweep(config: dict) -> int:
    if not config["param"] or not config["values"]:
        raise UsageError("sweep needs --param and --values")
    if config["param"] not in TRAIN_KEYS:
        raise ConfigurationError(f"cannot sweep {config['param']!r}")
    stream = load_stream(config)
    plan = make_plan(stream, config)
    kind = type(TrainConfig().to_dict()[config["param"]] or 0)
    values = [kind(v) for v in config["values"]]
    out = Output(config["out"], config)
    out.csv(f"sweep_{config['param']}.csv", sweep(stream, plan, train_config(config), config["param"], values))
    out.finish()
    return 0


def cmd_synth(config: dict) -> int:
    stream = synth_recurrent(config["num_nodes"], config["num_events"], config["recurrence_prob"],
                             config["noise"], config["seed"], config["feat_dim"])
    out = Output(config["out"], config)
    write_csv(stream, out.path("synth.csv"), comment="run_config=" + json.dumps(recorded(config), sort_keys=True))
    out.register("synth.csv")
    out.finish()
    print(out.path("synth.csv"))
    return 0


def cmd_export_attention(config: dict) -> int:
    stream = load_stream(config)
    if config["max_events"]:
        stream = stream.subset(np.arange(min(len(stream), config["max_events"])))
    if config["checkpoint"]:
        model = load_checkpoint(config["checkpoint"]).model
    else:
        cfg = train_config(config)
        model = MPFA(cfg.model_config(stream), seed=derive_seed(cfg.seed, "init"))
    rows = attention_rows(model, stream, config["batch_size"])
    out = Output(config["out"], config)
    out.csv("attention.csv", rows, ATTENTION_FIELDS)
    out.finish()
    return 0


ATTENTION_FIELDS = ["event_index", "node", "perspective", "neighbor_rank", "dt", "weight"]


def attention_rows(model: MPFA, stream, batch_size: int = 200) -> list[dict]:
    """One row per (event, perspective, neighbor) for each event's source node.

    Evolving weights are averaged over the two heads; rank 0 is the most
    recent neighbor.
    """
    from .events import make_batches

    state = model.new_state()
    rows = []
    for idx in make_batches(range(len(stream)), batch_size):
        res = model.score(state, stream.src[idx], stream.dst[idx], stream.t[idx])
        dump = res.attention
        for row, event in enumerate(idx.tolist()):
            valid = np.nonzero(dump.mask[row])[0]
            for perspective, weights in (("evolving", None if dump.evolving is None else dump.evolving.mean(axis=0)),
                                         ("raw", dump.raw)):
                if weights is None:
                    continue
                for col in valid[::-1]:
                    rows.append({"event_index": event, "node": int(dump.nodes[row]), "perspective": perspective,
                                 "neighbor_rank": int(valid[-1] - col), "dt": float(dump.dt[row, col]),
                                 "weight": float(weights[row, col])})
        state.ingest(stream.src[idx], stream.dst[idx], stream.t[idx], stream.edge_feat[idx],
                     res.z_src.data, res.z_dst.data)
    return rows


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-neighbors": cmd_sweep_neighbors,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
    "export-attention": cmd_export_attention,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _csv_list(kind):
    def parse(text: str):
        return [kind(x) for x in text.split(",") if x.strip()]
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--config", help="JSON file with run configuration; flags override it")
    g.add_argument("--data", help="interaction CSV (optionally .gz)")
    g.add_argument("--no-header", dest="header", action="store_false", default=None)
    g.add_argument("--bipartite", dest="bipartite", action="store_true", default=None)
    g.add_argument("--unipartite", dest="bipartite", action="store_false")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--model", choices=["mpfa", "edgebank", "random"])
    g.add_argument("--checkpoint")
    g.add_argument("--mode", choices=["transductive", "inductive"])
    t = common.add_argument_group("training")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--k-neighbors", dest="k_neighbors", type=int)
    t.add_argument("--emb-dim", dest="emb_dim", type=int)
    t.add_argument("--mem-dim", dest="mem_dim", type=int)
    t.add_argument("--time-dim", dest="time_dim", type=int)
    t.add_argument("--ablate", dest="ablation")
    t.add_argument("--train-frac", dest="train_frac", type=float)
    t.add_argument("--val-frac", dest="val_frac", type=float)
    t.add_argument("--inductive-fraction", dest="inductive_fraction", type=float)
    t.add_argument("--repeats", type=int)
    t.add_argument("--window", type=float, help="EdgeBank time window (default: unlimited)")
    t.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mpfa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model (or run a baseline) and test it")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or baseline")
    p.add_argument("--task", choices=["linkpred", "nodeclass"])
    p.add_argument("--nc-epochs", dest="nc_epochs", type=int)
    sub.add_parser("ablate", parents=[common], help="train every ablation variant")
    p = sub.add_parser("sweep-neighbors", parents=[common], help="AP versus number of neighbors")
    p.add_argument("--k-list", dest="k_list", type=_csv_list(int))
    p = sub.add_parser("sweep", parents=[common], help="AP versus one hyperparameter")
    p.add_argument("--param")
    p.add_argument("--values", type=_csv_list(str))
    p = sub.add_parser("synth", parents=[common], help="write a synthetic recurrent stream")
    p.add_argument("--num-nodes", dest="num_nodes", type=int)
    p.add_argument("--num-events", dest="num_events", type=int)
    p.add_argument("--recurrence-prob", dest="recurrence_prob", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--feat-dim", dest="feat_dim", type=int)
    p = sub.add_parser("export-attention", parents=[common], help="dump attention weights per event")
    p.add_argument("--max-events", dest="max_events", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_run_config(args)
        if config["model"] == "mpfa" and config["ablation"]:
            get_ablation(config["ablation"])
        return COMMANDS[args.command](config)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigurationError, ParameterError, ParseError, CheckpointError, ProtocolError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except MPFAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
