"""``pillid`` command line: synth, train, eval, detect, quantize, bench, ablate.

Settings resolve as built-in defaults <- ``--config`` key=value file <- flags.
Exit codes: 0 success, 1 runtime failure, 2 bad usage.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger("pillid")

# (default, type, provenance tag, help)
REF = "reference recipe"
OWN = "implementation choice"

COMMON = {
    "seed": (0, int, OWN, "RNG seed"),
    "config": (None, str, OWN, "key=value file; flags override its values"),
}

OPTIONS: dict[str, dict[str, tuple]] = {
    "synth": {
        "classes": (32, int, REF, "number of pill classes"),
        "train": (200, int, OWN, "training images"),
        "val": (50, int, OWN, "validation images"),
        "size": (160, int, OWN, "image side in pixels"),
        "out": ("data", str, OWN, "output directory"),
    },
    "train": {
        "data": (None, str, OWN, "dataset directory"),
        "epochs": (50, int, REF, "training epochs"),
        "batch": (32, int, REF, "batch size"),
        "lr": (0.001, float, REF, "initial learning rate"),
        "decay_epoch": (30, int, REF, "epoch at which the rate drops"),
        "decay_factor": (0.1, float, OWN, "rate multiplier after decay_epoch"),
        "finetune_lr": (0.0001, float, REF, "constant rate in finetune mode"),
        "mode": ("scratch", str, OWN, "scratch | finetune"),
        "init": (None, str, OWN, "checkpoint to start from (finetune)"),
        "ablation": ("full", str, OWN, "full | minus_batchnorm | minus_augmentation | minus_leaky_relu"),
        "stage_channels": ("16,32,64,128", str, OWN, "backbone widths"),
        "out": ("model.ckpt", str, OWN, "checkpoint directory"),
    },
    "eval": {
        "model": (None, str, OWN, "float checkpoint, or quantized with --quantized"),
        "detections": (None, str, OWN, "evaluate a detection dump instead of a model"),
        "data": (None, str, OWN, "dataset directory"),
        "split": ("val", str, OWN, "dataset split"),
        "conf": (0.25, float, OWN, "confidence threshold"),
        "nms": (0.45, float, OWN, "NMS IoU threshold"),
        "quantized": (False, bool, OWN, "model is a quantized checkpoint"),
        "out": (None, str, OWN, "write the report CSV here"),
    },
    "detect": {
        "model": (None, str, OWN, "checkpoint"),
        "image": (None, str, OWN, "PPM image"),
        "conf": (0.25, float, OWN, "confidence threshold"),
        "nms": (0.45, float, OWN, "NMS IoU threshold"),
        "quantized": (False, bool, OWN, "model is a quantized checkpoint"),
        "announce": (False, bool, OWN, "also print the utterance"),
        "catalog": (None, str, OWN, "catalog CSV (default: regenerated for the model's class count)"),
        "max_items": (3, int, OWN, "items announced"),
    },
    "quantize": {
        "model": (None, str, OWN, "float checkpoint"),
        "calib": (None, str, OWN, "dataset directory whose train split calibrates"),
        "n_calib": (64, int, OWN, "calibration images"),
        "out": ("model.qckpt", str, OWN, "quantized checkpoint directory"),
    },
    "bench": {
        "model": (None, str, OWN, "float checkpoint"),
        "qmodel": (None, str, OWN, "quantized checkpoint"),
        "data": (None, str, OWN, "dataset for probe images (default: seeded noise)"),
        "n": (100, int, OWN, "probe images and timed runs"),
    },
    "ablate": {
        "data": (None, str, OWN, "dataset directory"),
        "all": (False, bool, OWN, "run all four configurations"),
        "epochs": (50, int, REF, "training epochs"),
        "batch": (32, int, REF, "batch size"),
        "lr": (0.001, float, REF, "initial learning rate"),
        "decay_epoch": (30, int, REF, "epoch at which the rate drops"),
        "stage_channels": ("16,32,64,128", str, OWN, "backbone widths"),
        "out": (None, str, OWN, "write the rendered table here"),
    },
}

REQUIRED = {
    "train": ("data",), "eval": ("data",), "detect": ("model", "image"),
    "quantize": ("model", "calib"), "bench": ("model", "qmodel"), "ablate": ("data",),
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)   # key -> default | file | flag

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def describe(self) -> str:
        return "\n".join(f"{k}={v} ({self.source[k]})" for k, v in sorted(self.values.items()))


def _parse_value(kind, text: str):
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {text!r}")
    return kind(text)


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command: str, flags: dict) -> RunConfig:
    table = {**COMMON, **OPTIONS[command]}
    rc = RunConfig(command)
    for k, (default, *_rest) in table.items():
        rc.values[k], rc.source[k] = default, "default"
    if flags.get("config"):
        try:
            file_kv = read_config_file(flags["config"])
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from e
        for k, v in file_kv.items():
            if k not in table or k == "config":
                raise UsageError(f"unknown config key {k!r} for {command}")
            try:
                rc.values[k] = _parse_value(table[k][1], v)
            except ValueError as e:
                raise UsageError(f"config key {k}: {e}") from e
            rc.source[k] = "file"
    for k, v in flags.items():
        if v is not None and k in table:
            rc.values[k], rc.source[k] = v, "flag"
    for k in REQUIRED.get(command, ()):
        if rc.values.get(k) is None and not (command == "eval" and k == "model"):
            raise UsageError(f"--{k.replace('_', '-')} is required")
    return rc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pillid", description="Synthetic pill detection toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, table in OPTIONS.items():
        sp = sub.add_parser(cmd, help=f"{cmd} command",
                            epilog="Tags: 'reference recipe' values follow the reference training setup; "
                                   "'implementation choice' values are local defaults.")
        for k, (default, kind, tag, text) in {**OPTIONS[cmd], **COMMON}.items():
            flag = "--" + k.replace("_", "-")
            helptext = f"{text} (default: {default}; {tag})"
            if kind is bool:
                sp.add_argument(flag, dest=k, action="store_const", const=True, default=None, help=helptext)
            else:
                sp.add_argument(flag, dest=k, type=kind, default=None, metavar=k.upper(), help=helptext)
    return p


# ---------------------------------------------------------------- commands

def _channels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(c) for c in str(text).split(","))
    except ValueError as e:
        raise UsageError(f"bad stage_channels {text!r}") from e


def _load_data(path, split):
    from .dataset import load_split, read_manifest
    return load_split(read_manifest(path), split)


def cmd_synth(rc: RunConfig) -> int:
    from .dataset import generate_split, make_catalog
    m = generate_split(make_catalog(rc.classes, rc.seed), rc.train, rc.val, rc.seed, rc.out, rc.size)
    print(f"wrote {len(m.entries)} images to {m.root}")
    return 0


def _model_config(rc, n_classes: int, size: int):
    from .detector import ModelConfig
    chans = _channels(rc.stage_channels)
    return ModelConfig(input_size=size, grid_size=size // 2 ** len(chans), num_classes=n_classes,
                       stage_channels=chans, seed=rc.seed)


def cmd_train(rc: RunConfig) -> int:
    from .dataset import load_catalog, read_manifest, load_split
    from .detector import build_model, load_checkpoint, save_checkpoint
    from .train import TrainConfig, toggle_configs, train
    m = read_manifest(rc.data)
    catalog = load_catalog(Path(m.root) / m.catalog_path)
    size = int(m.meta.get("size", 160))
    tcfg = TrainConfig(lr0=rc.lr, batch_size=rc.batch, epochs=rc.epochs, decay_epoch=rc.decay_epoch,
                       decay_factor=rc.decay_factor, finetune_lr=rc.finetune_lr, seed=rc.seed, mode=rc.mode)
    mcfg, tcfg = toggle_configs(rc.ablation, _model_config(rc, len(catalog), size), tcfg)
    model = load_checkpoint(rc.init) if rc.init else build_model(mcfg)
    if rc.init and rc.ablation != "full":
        raise UsageError("--ablation applies to fresh models only")
    model, tlog = train(model, load_split(m, "train"), tcfg, val=load_split(m, "val") or None)
    out = save_checkpoint(model, rc.out)
    (out / "train_log.csv").write_text(tlog.to_csv())
    print(tlog.to_csv(), end="")
    print(f"epochs_to_converge {tlog.epochs_to_converge}; center collisions {tlog.collisions}")
    return 0


def _load_any(path: str, quantized: bool):
    from .detector import load_checkpoint
    from .quantize import load_quantized, quantized_forward
    if quantized:
        qm = load_quantized(path)
        return qm.config, lambda x: quantized_forward(qm, x)
    model = load_checkpoint(path)
    return model.config, lambda x: model.forward(x)


def cmd_eval(rc: RunConfig) -> int:
    from .metrics import GroundTruth, evaluate, render_table
    from .postprocess import DecodeConfig, detect, parse_detections
    from .train import prepare, to_batch
    samples = _load_data(rc.data, rc.split)
    gts = {s.image_id: [GroundTruth(int(c), tuple(b)) for c, b in
                        zip(s.boxes.cls, s.boxes.xyxy() * np.tile(s.image.shape[1::-1], 2))]
           for s in samples}
    if rc.detections:
        dets = parse_detections(Path(rc.detections).read_text())
    elif rc.model:
        cfg, fwd = _load_any(rc.model, rc.quantized)
        dcfg = DecodeConfig(rc.conf, rc.nms)
        prepared = prepare(samples, cfg.input_size)
        dets = {}
        for s, (img, _) in zip(samples, prepared):
            from .imaging import letterbox
            t = letterbox(s.image, cfg.input_size)[1]
            dets[s.image_id] = detect(fwd(to_batch([img]))[0], t, dcfg, cfg.input_size, cfg.boxes_per_cell)
    else:
        raise UsageError("one of --model or --detections is required")
    report = evaluate(dets, gts, rc.conf)
    name = Path(rc.model or rc.detections).name
    print(render_table([(name, report.map50, report.precision, report.recall)], "comparison"), end="")
    print(report.to_csv(), end="")
    if rc.out:
        Path(rc.out).write_text(report.to_csv())
    return 0


def cmd_detect(rc: RunConfig) -> int:
    from .announcer import announce
    from .dataset import load_catalog, make_catalog
    from .imaging import letterbox, read_ppm
    from .postprocess import DecodeConfig, detect, format_detections
    from .train import to_batch
    cfg, fwd = _load_any(rc.model, rc.quantized)
    img = read_ppm(rc.image)
    boxed, t = letterbox(img, cfg.input_size)
    dets = detect(fwd(to_batch([boxed]))[0], t, DecodeConfig(rc.conf, rc.nms), cfg.input_size, cfg.boxes_per_cell)
    print(format_detections(Path(rc.image).stem, dets), end="")
    if rc.announce:
        catalog = load_catalog(rc.catalog) if rc.catalog else make_catalog(cfg.num_classes, 0)
        print(announce(dets, catalog, rc.max_items).text)
    return 0


def cmd_quantize(rc: RunConfig) -> int:
    from .detector import load_checkpoint
    from .quantize import calibrate, quantize_model, save_quantized
    from .train import prepare, to_batch
    model = load_checkpoint(rc.model)
    samples = prepare(_load_data(rc.calib, "train")[: rc.n_calib], model.config.input_size)
    calib = calibrate(model, to_batch([img for img, _ in samples]))
    qm = quantize_model(model, calib)
    save_quantized(qm, rc.out)
    print(f"quantized {len(qm.layers)} layers; constant edges {calib.constant_edges}; payload {qm.payload_bytes()} bytes")
    return 0


def cmd_bench(rc: RunConfig) -> int:
    from .detector import load_checkpoint
    from .quantize import fidelity_report, load_quantized
    from .train import prepare, to_batch
    model = load_checkpoint(rc.model)
    qm = load_quantized(rc.qmodel)
    size = model.config.input_size
    if rc.data:
        samples = prepare(_load_data(rc.data, "val"), size)[: rc.n]
        probes = to_batch([img for img, _ in samples])
    else:
        probes = np.random.default_rng(rc.seed).random((rc.n, 3, size, size), dtype=np.float32)
    report = fidelity_report(model, qm, probes, runs=rc.n)
    print("\n".join(report.lines()))
    return 0


def cmd_ablate(rc: RunConfig) -> int:
    from .dataset import load_catalog, read_manifest, load_split
    from .train import TOGGLES, TrainConfig, ablate
    if not rc.all:
        raise UsageError("--all is required (only the full sweep is supported)")
    m = read_manifest(rc.data)
    catalog = load_catalog(Path(m.root) / m.catalog_path)
    tcfg = TrainConfig(lr0=rc.lr, batch_size=rc.batch, epochs=rc.epochs, decay_epoch=rc.decay_epoch, seed=rc.seed)
    report = ablate(tcfg, load_split(m, "train"), load_split(m, "val"), TOGGLES,
                    _model_config(rc, len(catalog), int(m.meta.get("size", 160))))
    table = report.render()
    print(table, end="")
    for r in report.rows:
        if r.error:
            print(f"{r.label}: failed: {r.error}", file=sys.stderr)
    if rc.out:
        Path(rc.out).write_text(table)
    return 1 if any(r.error for r in report.rows) else 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "detect": cmd_detect,
    "quantize": cmd_quantize, "bench": cmd_bench, "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        rc = resolve(args.command, flags)
    except UsageError as e:
        print(f"pillid {args.command}: error: {e}", file=sys.stderr)
        return 2
    print(f"seed={rc.seed}", file=sys.stderr)
    print(rc.describe(), file=sys.stderr)
    try:
        return COMMANDS[args.command](rc)
    except UsageError as e:
        print(f"pillid {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any failure maps to exit 1
        print(f"pillid {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
