"""Command-line entry point: ``uncertloc {gen-data,train,evaluate}``.

Configuration comes from an optional key-value file (``key = value`` lines,
``#`` comments, an optional ``[run]`` header) overridden by flags. Every
command first writes the fully resolved configuration to
``<out>/config.echo.ini``. That file can be passed back with ``--config`` to
reproduce the run.

All randomness derives from the root ``seed`` through the named substreams
``data``, ``train``, ``eval`` and ``calibration``.

Exit codes: 0 success, 2 configuration error (bad key or value, missing
file, incompatible checkpoint), 3 runtime error (generation collision,
divergence, degenerate output).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, UncertlocError
from .evalreport import (EVAL_MODES, PER_QUANTITY, evaluate, export_scatter, export_trajectory,
                         noise_region_aleatoric, records_csv, report_json, report_table)
from .net import (DropoutSpec, ModelConfig, TrainConfig, forward_batch, heteroscedastic_loss,
                  load_checkpoint, save_checkpoint, stack_inputs, train, write_loss_curve)
from .rejection import POSITION, write_retention_csv
from .synthdata import (DEFAULT_COUNTS, TrajectorySpec, WorldSpec, default_world, generate_dataset,
                        plan_trajectories, read_dataset, write_dataset)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
ECHO_NAME = "config.echo.ini"

log = logging.getLogger("uncertloc")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    # data generation
    world: str = ""
    trajectories: str = ""
    step: float = 0.3
    loops: int = DEFAULT_COUNTS["loop"]
    zigzags: int = DEFAULT_COUNTS["zigzag"]
    back_and_forths: int = DEFAULT_COUNTS["back_and_forth"]
    rotations: int = DEFAULT_COUNTS["rotation"]
    # training
    dataset: str = ""
    learning_rate: float = TrainConfig.learning_rate
    epochs: int = TrainConfig.epochs
    batch_size: int = TrainConfig.batch_size
    optimizer: str = TrainConfig.optimizer
    hidden_dim: int = 32
    num_heads: int = 2
    encoder_depth: int = 2
    dropout: float = DropoutSpec.rate
    # evaluation
    checkpoint: str = ""
    T: int = 40
    thresholds: tuple = (100, 90, 80, 70)
    mode: str = PER_QUANTITY
    # empty: thresholds from the test outputs themselves; "val": frozen from the val split
    calibration_split: str = ""
    pass_log: bool = False

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigurationError("seed: must be non-negative")
        if self.T < 1:
            raise ConfigurationError("T: must be >= 1")
        if self.mode not in EVAL_MODES:
            raise ConfigurationError(f"mode: must be one of {', '.join(EVAL_MODES)}")
        if not self.thresholds:
            raise ConfigurationError("thresholds: empty sweep")
        for k in self.thresholds:
            if not 1 <= k <= 100:
                raise ConfigurationError(f"thresholds: {k} is outside 1..100")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout: must be in [0, 1)")
        if self.step <= 0:
            raise ConfigurationError("step: must be positive")
        if self.calibration_split not in ("", "val"):
            raise ConfigurationError("calibration_split: must be empty or 'val'")

    def substream(self, name: str) -> int:
        """Integer seed for a named substream of the root seed."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.substream("train"), dropout=DropoutSpec(self.dropout),
                           optimizer=self.optimizer)

    def to_ini(self, command: str) -> str:
        lines = [f"# uncertloc {__version__}", f"# command: {command}", "[run]"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {raw!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    if not any(line.strip().startswith("[") for line in text.splitlines()):
        text = "[run]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config file: {exc}") from exc
    out: dict[str, str] = {}
    for section in parser.sections():
        out.update(parser[section])
    return out


def resolve_config(config_path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """File values, then overrides. Unknown keys are configuration errors."""
    defaults = RunConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(RunConfig)}
    values: dict = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigurationError(f"config: file {path} not found")
        for key, raw in parse_config_text(path.read_text()).items():
            if key not in known:
                raise ConfigurationError(f"{key}: unknown configuration key")
            values[key] = _convert(key, raw, known[key])
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if key not in known:
            raise ConfigurationError(f"{key}: unknown configuration key")
        values[key] = _convert(key, v, known[key]) if isinstance(v, str) else v
    return RunConfig(**{**known, **values})


def _prepare_out(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / ECHO_NAME).write_text(cfg.to_ini(command))
    return out


def _load_world(cfg: RunConfig) -> WorldSpec:
    if not cfg.world:
        return default_world()
    path = Path(cfg.world)
    if not path.exists():
        raise ConfigurationError(f"world: file {path} not found")
    try:
        return WorldSpec.from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"world: {exc}") from exc


def _load_dataset(cfg: RunConfig):
    if not cfg.dataset:
        raise ConfigurationError("dataset: no dataset path given")
    try:
        return read_dataset(cfg.dataset)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"dataset: {exc}") from exc


def cmd_gen_data(cfg: RunConfig) -> Path:
    out = _prepare_out(cfg, "gen-data")
    world = _load_world(cfg)
    data_seed = cfg.substream("data")
    if cfg.trajectories:
        path = Path(cfg.trajectories)
        if not path.exists():
            raise ConfigurationError(f"trajectories: file {path} not found")
        specs = [TrajectorySpec.from_dict(d) for d in json.loads(path.read_text())]
    else:
        specs = plan_trajectories(world, data_seed, {"loop": cfg.loops, "zigzag": cfg.zigzags,
                                                     "back_and_forth": cfg.back_and_forths,
                                                     "rotation": cfg.rotations}, step=cfg.step)
    dataset = generate_dataset(world, specs, data_seed)
    write_dataset(out, dataset)
    log.info("wrote %d samples (%s) to %s", len(dataset.samples),
             {k: len(v) for k, v in dataset.splits.items()}, out)
    return out


def cmd_train(cfg: RunConfig) -> Path:
    out = _prepare_out(cfg, "train")
    dataset = _load_dataset(cfg)
    train_set = dataset.split("train")
    if not train_set:
        raise ConfigurationError("dataset: train split is empty")
    mcfg = ModelConfig(image_dim=len(train_set[0].image_feat), scan_dim=len(train_set[0].scan),
                       hidden_dim=cfg.hidden_dim, num_heads=cfg.num_heads, encoder_depth=cfg.encoder_depth,
                       scan_scale=1.0 / dataset.world.scan_max_range)
    tcfg = cfg.train_config()
    result = train(train_set, tcfg, mcfg)
    info = {"version": __version__, "train_tuples": len(train_set), "final_loss": result.loss_curve[-1]}
    val_set = dataset.split("val")
    if val_set:
        image, scan, p, q = stack_inputs(val_set)
        o = forward_batch(result.params, image, scan)
        info["val_loss_deterministic"] = heteroscedastic_loss(o.p_hat, o.s_p, o.q_hat, o.s_q, p, q)
        info["val_mean_position_error_deterministic"] = float(np.mean(np.hypot(*(o.p_hat - p).T)))
    save_checkpoint(out / "checkpoint.json", result.params, tcfg, extra=info)
    write_loss_curve(out / "loss_curve.csv", result.loss_curve)
    log.info("trained %d epochs, final mean loss %.4f", tcfg.epochs, result.loss_curve[-1])
    return out


def cmd_evaluate(cfg: RunConfig) -> Path:
    out = _prepare_out(cfg, "evaluate")
    if not cfg.checkpoint:
        raise ConfigurationError("checkpoint: no checkpoint path given")
    ckpt = Path(cfg.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "checkpoint.json"
    if not ckpt.exists():
        raise ConfigurationError(f"checkpoint: file {ckpt} not found")
    params, _ = load_checkpoint(ckpt)
    dataset = _load_dataset(cfg)
    test_set = dataset.split("test")
    if not test_set:
        raise ConfigurationError("dataset: test split is empty")
    cal_set = None
    if cfg.calibration_split:
        cal_set = dataset.split(cfg.calibration_split)
        if not cal_set:
            raise ConfigurationError(f"calibration_split: split {cfg.calibration_split!r} is empty")
    pass_fh = open(out / "passes.jsonl", "w") if cfg.pass_log else None
    try:
        ev = evaluate(params, test_set, cfg.T, cfg.thresholds, cfg.mode, DropoutSpec(cfg.dropout),
                      cfg.substream("eval"), pass_log=pass_fh, calibration_samples=cal_set,
                      calibration_seed=cfg.substream("calibration"))
    finally:
        if pass_fh is not None:
            pass_fh.close()
    inside, outside = noise_region_aleatoric(ev.records, dataset.world)
    extra = {"version": __version__,
             "mean_aleatoric_p_in_noise_region": None if np.isnan(inside) else inside,
             "mean_aleatoric_p_outside_noise_region": None if np.isnan(outside) else outside}
    (out / "report.json").write_text(report_json(ev, extra))
    (out / "report.txt").write_text(report_table(ev.reports))
    (out / "records.csv").write_text(records_csv(ev.records))
    (out / "scatter.csv").write_text(export_scatter(ev.records, cfg.thresholds, cfg.mode, ev.calibration))
    for k in cfg.thresholds:
        (out / f"trajectory_{k}.csv").write_text(export_trajectory(ev.records, k, cfg.mode, ev.calibration))
    cal = None
    if ev.calibration:
        cal = ([r.prediction.u_p for r in ev.calibration], [r.prediction.u_q for r in ev.calibration])
    write_retention_csv(out / "retention.csv", [r.sample_id for r in ev.records],
                        [r.prediction.u_p for r in ev.records], [r.prediction.u_q for r in ev.records],
                        cfg.thresholds, POSITION if cfg.mode == PER_QUANTITY else cfg.mode, cal)
    log.info("\n%s", report_table(ev.reports))
    return out


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uncertloc", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"uncertloc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", help="root seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--T", dest="T", help="MC dropout passes per sample")
        p.add_argument("--dropout", help="dropout rate")
        p.add_argument("--thresholds", help="comma-separated keep percents, e.g. 100,90,80,70")
        p.add_argument("--mode", help=f"rejection mode: {', '.join(EVAL_MODES)}")
        p.add_argument("--dataset", help="dataset directory or dataset.jsonl")
        p.add_argument("--checkpoint", help="checkpoint file or training output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any other configuration key")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, k) for k in
                 ("seed", "out", "T", "dropout", "thresholds", "mode", "dataset", "checkpoint")}
    try:
        for item in args.set:
            if "=" not in item:
                raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value
        cfg = resolve_config(args.config, overrides)
        COMMANDS[args.command](cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UncertlocError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
