"""``ssmgen`` command line: dataset generation, measurement, rescaling,
training and the experiment drivers.

Exit codes: 0 on success, 2 when training diverges, 1 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import experiments as ex
from .initialization import InitConfig, init_hippo, rescale_all_layers
from .measure import measure_model
from .seqgen import ProcessSpec, load_dataset, sample_batch, save_dataset
from .ssm import SSMLayerParams, load_model, model_hash, save_model
from .train import TrainConfig, TrainingDiverged, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 is reserved for divergence here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def _split(cfg: dict, *targets) -> list[dict]:
    """Distribute flat config keys over dataclasses by field name."""
    names = [{f.name for f in dataclasses.fields(t)} for t in targets]
    known = set().union(*names)
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return [{k: v for k, v in cfg.items() if k in n} for n in names]


def _build(cls, kw: dict):
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _profile_defaults(profile: str) -> dict:
    return ex.PROFILES[profile]


def _seeded(kw: dict, args) -> dict:
    if args.seed is not None:
        kw = {**kw, "seed": args.seed}
    return kw


# -- subcommands ------------------------------------------------------------


@dataclasses.dataclass
class _GenerateExtra:
    n: int = 100


def cmd_generate(args, cfg) -> int:
    (pkw, extra) = _split(cfg, ProcessSpec, _GenerateExtra)
    pkw.setdefault("length", _profile_defaults(args.profile)["length"])
    spec = _build(ProcessSpec, _seeded(pkw, args))
    n = int(extra.get("n", args.n))
    if n < 1:
        raise UsageError("n must be >= 1")
    ds = sample_batch(spec, n)
    path = save_dataset(ds, _out(args))
    print(json.dumps({"out": str(path), "n": ds.n, "digest": ds.digest()}, sort_keys=True))
    return EXIT_OK


def _load_model_arg(path: str) -> list[SSMLayerParams]:
    try:
        return load_model(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load model {path}: {exc}") from exc


def _load_data_arg(path: str):
    try:
        return load_dataset(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}") from exc


def _check_dims(model, ds):
    if model[0].d != ds.inputs.shape[2]:
        raise UsageError(f"model has d={model[0].d} channels but the data has {ds.inputs.shape[2]}")


def cmd_measure(args, cfg) -> int:
    model = _load_model_arg(args.model)
    ds = _load_data_arg(args.data)
    _check_dims(model, ds)
    report = measure_model(model, ds.inputs, ds.digest())
    ex.write_json(_out(args) / "measure.json", report.to_dict())
    print(report.to_json())
    return EXIT_OK


def cmd_rescale(args, cfg) -> int:
    model = _load_model_arg(args.model)
    ds = _load_data_arg(args.data)
    _check_dims(model, ds)
    try:
        new, taus = rescale_all_layers(model, ds.inputs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out(args)
    save_model(new, out / "model.json")
    ex.write_json(out / "rescale.json", {
        "tau_before": taus,
        "model_hash_before": model_hash(model),
        "model_hash_after": model_hash(new),
        "dataset_hash": ds.digest(),
    })
    print(json.dumps({"tau_before": taus}))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    tkw, ikw = _split(cfg, TrainConfig, InitConfig)
    tkw.setdefault("epochs", _profile_defaults(args.profile)["epochs"])
    ikw.setdefault("m", _profile_defaults(args.profile)["m"])
    config = _build(TrainConfig, _seeded(tkw, args))
    train_ds = _load_data_arg(args.data)
    test_ds = _load_data_arg(args.test) if args.test else None
    if args.model:
        model = _load_model_arg(args.model)
    else:
        ikw.setdefault("d", train_ds.inputs.shape[2])
        model = init_hippo(_build(InitConfig, _seeded(ikw, args)))
    _check_dims(model, train_ds)
    if args.rescale:
        model, _ = rescale_all_layers(model, train_ds.inputs)
    out = _out(args)
    try:
        state = train(train_ds, test_ds, config, model, out_dir=out)
    except TrainingDiverged as exc:
        save_checkpoint(exc.state, out / "checkpoint_diverged.json")
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_model(state.model, out / "model.json")
    save_checkpoint(state, out / "checkpoint.json")
    final = state.row()
    ex.write_json(out / "train.json", {"config": dataclasses.asdict(config), "final": final,
                                       "model_hash": model_hash(state.model), "dataset_hash": train_ds.digest()})
    print(json.dumps(ex._jsonable(final), sort_keys=True))
    return EXIT_OK


def _plan(args, cfg) -> ex.ExperimentPlan:
    (kw,) = _split(cfg, ex.ExperimentPlan)
    kw = _seeded(kw, args)
    kw["profile"] = args.profile
    for key in ("b_values", "arms", "lengths"):
        if key in kw and kw[key] is not None:
            kw[key] = tuple(kw[key])
    return _build(ex.ExperimentPlan, kw)


def cmd_matrix(args, cfg) -> int:
    plan = _plan(args, cfg)
    result = ex.run_matrix(plan, _out(args), workers=args.workers)
    for row in result.summary:
        print(f"b={row['b']:<6} {row['arm']:<16} test={row['test_mse_mean']:.4g} +- {row['test_mse_stderr']:.2g}"
              f"  psi2/sqrt(n)={row['psi_sq_over_sqrt_n_mean']:.4g}")
    if result.n_diverged:
        print(f"{result.n_diverged} cell(s) diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_prop1(args, cfg) -> int:
    plan = _plan(args, cfg)
    rows = ex.prop1_sweep(plan, _out(args))
    l_max = max(plan.lengths)
    for variant in ("unrescaled", "rescaled"):
        print(f"{variant}: spread across b at L={l_max}: {ex.prop1_spread(rows, variant, l_max):.3f}")
    return EXIT_OK


@dataclasses.dataclass
class _DemoConfig:
    kind: str = "scalar"
    m: int = 16
    d: int = 1
    seed: int = 0
    horizon: float = 10.0
    pads: tuple = (5.0, 10.0, 20.0, 40.0)
    factor: int = 2
    step: float = 2.5e-4


def _demo_model(c: _DemoConfig) -> SSMLayerParams:
    if c.kind == "scalar":
        return SSMLayerParams.full(-np.ones((1, 1)), np.ones(1), np.ones((c.d, 1)), np.full(c.d, 0.01))
    return init_hippo(_build(InitConfig, {"kind": c.kind, "m": c.m, "d": c.d, "seed": c.seed}))[0]


def cmd_padding(args, cfg) -> int:
    (kw,) = _split(cfg, _DemoConfig)
    c = _build(_DemoConfig, _seeded(kw, args))
    rows = ex.padding_demo(_demo_model(c), [float(p) for p in c.pads], horizon=c.horizon, out_dir=_out(args))
    for r in rows:
        print(f"pad={r['pad']:<6g} left={r['left']:.10g} right={r['right']:.10g}")
    return EXIT_OK


def cmd_transfer(args, cfg) -> int:
    (kw,) = _split(cfg, _DemoConfig)
    kw.setdefault("kind", "legs_diag")
    c = _build(_DemoConfig, _seeded(kw, args))
    rep = ex.transfer_demo(_demo_model(c), factor=c.factor, step=c.step, horizon=c.horizon, out_dir=_out(args))
    print(f"output deviation {rep.output_deviation:.3e}, measure deviation {rep.measure_deviation:.3e}")
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    rows: list[dict] = []
    for d in args.inputs:
        path = Path(d) / "matrix.csv" if Path(d).is_dir() else Path(d)
        if not path.exists():
            raise UsageError(f"no matrix.csv at {d}")
        rows.extend(ex.read_csv(path))
    if not rows:
        raise UsageError("no rows to report")
    table = ex.report_table(rows)
    out = _out(args)
    ex.write_csv(out / "report.csv", ex.REPORT_COLUMNS, table)
    md = ex.report_markdown(table)
    (out / "report.md").write_text(md)
    print(md, end="")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "measure": cmd_measure,
    "rescale": cmd_rescale,
    "train": cmd_train,
    "matrix": cmd_matrix,
    "prop1": cmd_prop1,
    "padding": cmd_padding,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings for the command")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--profile", choices=sorted(ex.PROFILES), default="fast")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ssmgen", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="sample a dataset to disk")
    g.add_argument("-n", type=int, default=100, help="number of sequences")

    for name, helptext in (("measure", "per-layer measure of a model on a dataset"),
                           ("rescale", "normalize every layer's measure to 1")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--model", required=True)
        s.add_argument("--data", required=True)

    t = sub.add_parser("train", parents=[common], help="train with the optional measure penalty")
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--test", help="test dataset directory")
    t.add_argument("--model", help="starting model (default: fresh HiPPO init)")
    t.add_argument("--rescale", action="store_true", help="rescale the starting model first")

    m = sub.add_parser("matrix", parents=[common], help="bandwidth x arm training matrix")
    m.add_argument("--workers", type=int, default=1)
    sub.add_parser("prop1", parents=[common], help="output scale at initialization versus length")
    sub.add_parser("padding", parents=[common], help="left/right zero-padding measures")
    sub.add_parser("transfer", parents=[common], help="sampling-frequency transfer check")
    r = sub.add_parser("report", parents=[common], help="aggregate matrix CSVs into a summary table")
    r.add_argument("inputs", nargs="+", help="matrix output directories or matrix.csv files")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"ssmgen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
