"""Command-line front end: pretrain, finetune, sweep, census, export-features.

Configs are flat ``key = value`` files; ``#`` starts a comment. Every run
writes into a fresh directory ``<out>/<timestamp>-seed<N>`` holding the
resolved ``config.txt`` next to its outputs.

Exit codes: 0 success, 2 config or contract error, 3 I/O error,
4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import TaskData, TaskSpec, frames_variant, generate
from .harness import (
    RunReport,
    TrainConfig,
    frozen_digest,
    prepare,
    train,
    write_rows,
)
from .tensor import NumericalError, Rng
from .tuning import (
    AdapterConfig,
    ConfigError,
    FreezePolicy,
    MODES,
    PromptConfig,
    adapter_shapes,
    prompt_shapes,
)
from .vit import VitConfig, VitModel, param_shapes

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
AXES = ("mid_dim", "scale", "layers", "prompt_tokens", "frames")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


# key -> (parser, default); None default means the key must be given
KEYS: dict[str, tuple] = {
    # backbone
    "image_size": (int, 16), "patch_size": (int, 4), "in_chans": (int, 3),
    "embed_dim": (int, 64), "num_layers": (int, 4), "num_heads": (int, 4),
    "mlp_ratio": (int, 4), "head_bn": (_bool, True), "model_seed": (int, 0),
    # adapters
    "mid_dim": (int, 64), "scale": (float, 0.1), "insertion": (str, "parallel"),
    "layer_start": (int, 1), "layer_end": (_opt_int, None), "adapter_dropout": (float, 0.0),
    "kaiming": (str, "uniform"),
    # prompts
    "prompt_tokens": (int, 4), "prompt_deep": (_bool, True),
    # training
    "mode": (str, "adaptformer"), "base_lr": (float, 0.1), "batch_size": (int, 32),
    "momentum": (float, 0.9), "weight_decay": (float, 0.0), "warmup_epochs": (int, 2),
    "total_epochs": (int, None), "seed": (int, 0), "eval_every": (int, 1),
    "head_seed": (int, 0),
    # task
    "task_name": (str, "task"), "num_classes": (int, None), "train_count": (int, 512),
    "eval_count": (int, 256), "data_seed": (int, 0), "shift": (str, "none"),
    "noise": (float, 0.05), "num_frames": (int, 1),
    # paths
    "backbone": (str, None),
}
ADAPTER_KEYS = ("mid_dim", "scale", "insertion", "layer_start", "layer_end", "adapter_dropout", "kaiming")
PROMPT_KEYS = ("prompt_tokens", "prompt_deep")
REQUIRED = {
    "pretrain": ("num_classes", "total_epochs"),
    "finetune": ("num_classes", "total_epochs", "backbone"),
    "sweep": ("num_classes", "total_epochs", "backbone"),
    "census": ("num_classes",),
    "export-features": ("num_classes",),
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    values: dict
    given: frozenset  # keys set explicitly by the file or flags

    def __getitem__(self, key):
        return self.values[key]

    def vit(self) -> VitConfig:
        v = self.values
        return VitConfig(image_size=v["image_size"], patch_size=v["patch_size"], in_chans=v["in_chans"],
                         embed_dim=v["embed_dim"], num_layers=v["num_layers"], num_heads=v["num_heads"],
                         mlp_ratio=v["mlp_ratio"], num_classes=v["num_classes"], head_bn=v["head_bn"])

    def adapter(self) -> AdapterConfig:
        v = self.values
        return AdapterConfig(mid_dim=v["mid_dim"], scale=v["scale"], insertion=v["insertion"],
                             layer_start=v["layer_start"], layer_end=v["layer_end"],
                             dropout_p=v["adapter_dropout"], kaiming=v["kaiming"])

    def prompt(self) -> PromptConfig:
        return PromptConfig(self.values["prompt_tokens"], self.values["prompt_deep"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(base_lr=v["base_lr"], batch_size=v["batch_size"], momentum=v["momentum"],
                           weight_decay=v["weight_decay"], warmup_epochs=v["warmup_epochs"],
                           total_epochs=v["total_epochs"], seed=v["seed"], tuning_mode=v["mode"],
                           eval_every=v["eval_every"])

    def task(self) -> TaskSpec:
        v = self.values
        spec = TaskSpec(name=v["task_name"], image_size=v["image_size"], channels=v["in_chans"],
                        num_classes=v["num_classes"], train_count=v["train_count"],
                        eval_count=v["eval_count"], seed=v["data_seed"], shift=v["shift"], noise=v["noise"])
        spec.validate()
        return spec

    def replace(self, **changes) -> RunConfig:
        return RunConfig({**self.values, **changes}, self.given | frozenset(changes))

    def dump(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in self.values.items())


def parse_config(text: str, overrides: dict | None = None, command: str = "finetune") -> RunConfig:
    """Parse ``key = value`` lines, apply overrides, fill defaults, check required keys."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {lineno}: expected key = value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise CliError(f"config line {lineno}: unknown key {key!r}")
        if key in raw:
            raise CliError(f"config line {lineno}: duplicate key {key!r}")
        raw[key] = val
    values, given = {}, set(raw)
    for key, (conv, default) in KEYS.items():
        if key in raw:
            try:
                values[key] = conv(raw[key])
            except ValueError as exc:
                raise CliError(f"config key {key!r}: {exc}") from None
        else:
            values[key] = default
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
            given.add(key)
    missing = [k for k in REQUIRED.get(command, ()) if values.get(k) is None]
    if missing:
        raise CliError(f"missing required config key(s): {', '.join(missing)}")
    cfg = RunConfig(values, frozenset(given))
    _check_mode(cfg)
    return cfg


def _check_mode(cfg: RunConfig) -> None:
    mode = cfg["mode"]
    if mode not in MODES:
        raise CliError(f"mode must be one of {MODES}, got {mode!r}")
    if mode != "adaptformer":
        stray = [k for k in ADAPTER_KEYS if k in cfg.given]
        if stray:
            raise CliError(f"mode {mode!r} has no adapters but config sets {', '.join(stray)}")
    if mode != "vpt":
        stray = [k for k in PROMPT_KEYS if k in cfg.given]
        if stray:
            raise CliError(f"mode {mode!r} has no prompts but config sets {', '.join(stray)}")


def make_run_dir(out: Path, seed: int) -> Path:
    """Create ``<out>/<timestamp>-seed<N>``, adding a suffix rather than reusing a directory."""
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    for k in range(1000):
        path = out / (stem if k == 0 else f"{stem}-{k}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise CliError(f"cannot allocate a run directory under {out}", EXIT_IO)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text)


# ---------------------------------------------------------------- commands

@dataclass
class FinetuneResult:
    report: RunReport
    model: VitModel
    delta_path: Path
    delta_hash: str
    frozen_ok: bool


def cmd_pretrain(cfg: RunConfig, run_dir: Path) -> tuple[RunReport, str]:
    """Full-tune a freshly initialized backbone on the source task."""
    cfg = cfg.replace(mode="full")
    data = generate(cfg.task())
    model = VitModel(cfg.vit(), seed=cfg["model_seed"])
    report, model = train(model, data.train, data.eval, cfg.train())
    report.to_csv(run_dir / "report.csv")
    digest = ckpt.save_model(model, run_dir / "backbone.ckpt", "all",
                             {"kind": "backbone", "source_top1": report.final_top1})
    _write_text(run_dir / "summary.txt",
                f"source_top1 = {report.final_top1!r}\ncheckpoint_sha256 = {digest}\n")
    return report, digest


def load_backbone(path, num_frames: int = 1) -> VitModel:
    """Model shaped like the checkpoint, with its backbone tensors loaded."""
    meta = ckpt.load(path).metadata
    try:
        vit = VitConfig(**meta["vit"])
    except (KeyError, TypeError) as exc:
        raise CliError(f"{path}: checkpoint metadata lacks a backbone config ({exc})") from None
    model = VitModel(vit, seed=0)
    ckpt.load_into(model, path, "backbone")
    model.set_frames(num_frames)
    return model


def task_data(cfg: RunConfig) -> TaskData:
    return frames_variant(cfg.task(), cfg["num_frames"])


def cmd_finetune(cfg: RunConfig, run_dir: Path, data: TaskData | None = None) -> FinetuneResult:
    """Fine-tune a stored backbone under ``cfg['mode']``; writes report.csv and delta.ckpt."""
    mode = cfg["mode"]
    data = data or task_data(cfg)
    model = load_backbone(cfg["backbone"], cfg["num_frames"])
    prepare(model, mode, cfg["num_classes"], cfg["head_seed"],
            adapter=cfg.adapter() if mode == "adaptformer" else None,
            prompt=cfg.prompt() if mode == "vpt" else None)
    policy = FreezePolicy(mode)
    before = frozen_digest(model, policy)
    report, model = train(model, data.train, data.eval, cfg.train())
    frozen_ok = frozen_digest(model, policy) == before
    report.to_csv(run_dir / "report.csv")
    subset = "all" if mode == "full" else ("adapters", "head")
    delta = run_dir / "delta.ckpt"
    digest = ckpt.save_model(model, delta, subset, {"kind": "delta", "mode": mode,
                                                    "backbone": str(cfg["backbone"])})
    _write_text(run_dir / "summary.txt", "".join(f"{k} = {v}\n" for k, v in {
        "mode": mode, "initial_top1": repr(report.initial_top1), "final_top1": repr(report.final_top1),
        "tunable_params": report.tunable_params, "seq_len": model.config.seq_len,
        "frozen_unchanged": frozen_ok, "delta_sha256": digest}.items()))
    if mode != "full" and not frozen_ok:
        raise CliError(f"frozen parameters changed during {mode} fine-tuning")
    return FinetuneResult(report, model, delta, digest, frozen_ok)


def parse_axis_value(axis: str, text: str):
    if axis in ("mid_dim", "prompt_tokens", "frames"):
        return int(text)
    if axis == "scale":
        return float(text)
    start, _, end = text.partition("-")
    return int(start), int(end or start)


def _axis_overrides(axis: str, value) -> dict:
    if axis == "layers":
        return {"layer_start": value[0], "layer_end": value[1]}
    if axis == "frames":
        return {"num_frames": value}
    return {axis: value}


def _check_axis(cfg: RunConfig, axis: str, values: list) -> None:
    if axis not in AXES:
        raise CliError(f"sweep axis must be one of {AXES}, got {axis!r}")
    if not values:
        raise CliError(f"sweep over {axis!r} needs at least one value")
    need = {"mid_dim": "adaptformer", "scale": "adaptformer", "layers": "adaptformer",
            "prompt_tokens": "vpt"}.get(axis)
    if need and cfg["mode"] != need:
        raise CliError(f"sweep axis {axis!r} requires mode {need!r}, config has {cfg['mode']!r}")


def census_count(cfg: RunConfig) -> int:
    """Trainable parameters for ``cfg`` by enumerating tensor shapes (nothing allocated)."""
    vit = cfg.vit()
    shapes = dict(param_shapes(vit))
    if cfg["mode"] == "adaptformer":
        shapes.update(adapter_shapes(cfg.adapter(), vit))
    elif cfg["mode"] == "vpt":
        shapes.update(prompt_shapes(cfg.prompt(), vit))
    policy = FreezePolicy(cfg["mode"])
    return sum(int(np.prod(s)) for n, s in shapes.items() if policy.trainable(n))


def cmd_census(cfg: RunConfig, axis: str, values: list, run_dir: Path) -> list[tuple]:
    _check_axis(cfg, axis, values)
    rows = [(v, census_count(cfg.replace(**_axis_overrides(axis, v)))) for v in values]
    with open(run_dir / "census.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis, "tunable_params"])
        w.writerows((_fmt_axis(v), n) for v, n in rows)
    return rows


def _fmt_axis(value) -> str:
    return f"{value[0]}-{value[1]}" if isinstance(value, tuple) else str(value)


def cmd_sweep(cfg: RunConfig, axis: str, values: list, run_dir: Path) -> dict:
    """One fine-tune per axis value over a shared backbone; merged ``sweep.csv``."""
    _check_axis(cfg, axis, values)
    results = {}
    shared = None if axis == "frames" else task_data(cfg)
    buf = io.StringIO()
    header_written = False
    for value in values:
        sub_cfg = cfg.replace(**_axis_overrides(axis, value))
        sub_dir = run_dir / f"{axis}={_fmt_axis(value)}"
        sub_dir.mkdir()
        _write_text(sub_dir / "config.txt", sub_cfg.dump())
        res = cmd_finetune(sub_cfg, sub_dir, shared)
        results[value] = res
        part = io.StringIO()
        write_rows(part, res.report.rows, {axis: _fmt_axis(value)})
        lines = part.getvalue().splitlines(keepends=True)
        buf.writelines(lines if not header_written else lines[1:])
        header_written = True
    _write_text(run_dir / "sweep.csv", buf.getvalue())
    return results


def load_model(paths: list) -> VitModel:
    """Rebuild a model from a base checkpoint plus optional deltas, applied in order."""
    if not paths:
        raise CliError("no checkpoint given")
    first = ckpt.load(paths[0]).metadata
    model = VitModel(VitConfig(**first["vit"]), seed=0)
    ckpt.load_into(model, paths[0], tuple(first.get("subsets", ["all"])))
    for path in paths[1:]:
        meta = ckpt.load(path).metadata
        vit = VitConfig(**meta["vit"])
        model.set_frames(vit.num_frames)
        rng = Rng(0)  # placeholders, overwritten by the load below
        if "adapter" in meta:
            model.add_adapters(AdapterConfig(**meta["adapter"]), rng)
        if "prompt" in meta:
            model.add_prompts(PromptConfig(**meta["prompt"]), rng)
        model.reset_head(vit.num_classes, rng)
        ckpt.load_into(model, path, tuple(meta.get("subsets", ["all"])))
    return model.eval()


def export_features(model: VitModel, images: np.ndarray, labels: np.ndarray, path,
                    metadata: dict | None = None, batch_size: int = 256) -> str:
    """Eval-mode CLS features (after the final norm), one row per sample, plus labels."""
    model.eval()
    feats = np.concatenate([model.encode(images[i:i + batch_size]).data
                            for i in range(0, len(images), batch_size)])
    meta = {"kind": "features", "rows": len(feats), "dim": feats.shape[1], **(metadata or {})}
    return ckpt.save({"features": feats, "labels": labels.astype(np.float64)}, path, meta)


def cmd_export_features(cfg: RunConfig, checkpoints: list, run_dir: Path, split: str = "eval") -> str:
    model = load_model(checkpoints)
    data = frames_variant(cfg.task(), model.config.num_frames)
    ds = data.eval if split == "eval" else data.train
    return export_features(model, ds.images, ds.labels, run_dir / "features.bin",
                           {"split": split, "task": cfg.task().to_dict()})


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptformer", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--mode", choices=MODES, help="tuning mode (overrides the file)")
        p.add_argument("--seed", type=int, help="training seed (overrides the file)")
        p.add_argument("--out", default="runs", help="parent directory for run directories")
        p.add_argument("--backbone", help="backbone checkpoint (overrides the file)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("pretrain", help="full-tune a fresh backbone on the source task"))
    common(sub.add_parser("finetune", help="fine-tune a stored backbone"))
    p = common(sub.add_parser("sweep", help="one fine-tune per axis value"))
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("values", nargs="*")
    p.add_argument("--census", action="store_true", help="report parameter counts only, no training")
    p = common(sub.add_parser("census", help="tunable parameter count per axis value"))
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("values", nargs="*")
    p = common(sub.add_parser("export-features", help="write CLS features and labels"))
    p.add_argument("--checkpoint", action="append", default=[],
                   help="checkpoint path; repeat to apply deltas over a backbone")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    return parser


def run(argv: list[str] | None = None) -> tuple[int, Path | None]:
    """Execute one command; returns (exit code, run directory)."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run_dir = None
    try:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc.strerror or exc}", EXIT_IO) from None
        command = "census" if args.command == "sweep" and args.census else args.command
        cfg = parse_config(text, {"mode": args.mode, "seed": args.seed, "backbone": args.backbone}, command)
        values = [parse_axis_value(args.axis, v) for v in getattr(args, "values", [])]
        if command in ("census", "sweep"):
            _check_axis(cfg, args.axis, values)
        if command == "export-features" and not args.checkpoint:
            if cfg["backbone"] is None:
                raise CliError("export-features needs --checkpoint or a backbone key")
            args.checkpoint = [cfg["backbone"]]
        run_dir = make_run_dir(Path(args.out), cfg["seed"])
        _write_text(run_dir / "config.txt", cfg.dump())
        if command == "pretrain":
            report, digest = cmd_pretrain(cfg, run_dir)
            print(f"source top-1 {report.final_top1:.4f}  checkpoint sha256 {digest}")
        elif command == "finetune":
            res = cmd_finetune(cfg, run_dir)
            print(f"{cfg['mode']}: top-1 {res.report.initial_top1:.4f} -> {res.report.final_top1:.4f}, "
                  f"{res.report.tunable_params} tunable params, delta sha256 {res.delta_hash}")
        elif command == "census":
            for v, n in cmd_census(cfg, args.axis, values, run_dir):
                print(f"{args.axis}={_fmt_axis(v)}\t{n}")
        elif command == "sweep":
            for v, res in cmd_sweep(cfg, args.axis, values, run_dir).items():
                print(f"{args.axis}={_fmt_axis(v)}\ttop-1 {res.report.final_top1:.4f}")
        else:
            digest = cmd_export_features(cfg, args.checkpoint, run_dir, args.split)
            print(f"features sha256 {digest}")
        print(f"run directory: {run_dir}")
        return EXIT_OK, run_dir
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code, run_dir
    except (ConfigError, ckpt.CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, run_dir
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC, run_dir
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO, run_dir


def main(argv: list[str] | None = None) -> int:
    return run(argv)[0]


if __name__ == "__main__":
    sys.exit(main())
