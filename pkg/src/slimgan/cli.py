"""Command-line interface.

Every phase of the pipeline is a subcommand so runs can be resumed and
inspected: ``toy`` materializes the synthetic task, ``pretrain`` / ``search``
/ ``derive`` / ``train`` walk the pipeline via checkpoints in the config's
output directory, ``eval`` scores a trained student, ``flops`` prints the
cost report for an architecture file, and ``quantize`` converts student
weights to 8-bit. Errors exit nonzero with a single ``error: ...`` line on
stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager

import torch

from . import engine
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .budget import derived_flops
from .distill import build_extractor
from .metrics import MetricsLog
from .quantize import quantize_model, save_quantized
from .schema import export_architecture, import_architecture
from .search_space import spec_for_architecture, with_provenance
from .supernet import DerivedGenerator, GeneratorSupernet, extract_student_weights, load_student_weights


class CliError(RuntimeError):
    pass


@contextmanager
def _output_lock(out_dir: str):
    """One process per output directory; concurrent runs are rejected."""
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"output directory {out_dir} is locked by another run ({lock_path})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(lock_path):
            os.unlink(lock_path)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slimgan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, needs_config=True):
        cmd = sub.add_parser(name, help=help_text)
        if needs_config:
            cmd.add_argument("--config", required=True, help="run config (TOML)")
            cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        return cmd

    add("toy", "generate the synthetic teacher and dataset assets")
    add("pretrain", "pretrain supernet weights under the sandwich rule")
    add("search", "alternate weight and architecture updates")
    add("derive", "export the argmax architecture and its cost report")
    add("train", "train the derived architecture from scratch")
    add("eval", "score the trained student against the teacher")
    add("quantize", "quantize trained student weights to 8-bit")
    flops = sub.add_parser("flops", help="cost report for an architecture file")
    flops.add_argument("--arch", required=True, help="architecture schema file")
    flops.add_argument("--height", type=int, required=True)
    flops.add_argument("--width", type=int, required=True)
    return parser


def _paths(cfg) -> dict[str, str]:
    return {
        "pretrain": os.path.join(cfg.out_dir, "pretrain.ckpt"),
        "search": os.path.join(cfg.out_dir, "search.ckpt"),
        "architecture": os.path.join(cfg.out_dir, "derived.arch"),
        "flops": os.path.join(cfg.out_dir, "flops_report.txt"),
        "student": os.path.join(cfg.out_dir, "student.ckpt"),
        "quantized": os.path.join(cfg.out_dir, "student_quant.ckpt"),
        "metrics": os.path.join(cfg.out_dir, "metrics.log"),
    }


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"missing {path}; run `slimgan {hint}` first")
    return path


def _cmd_toy(cfg) -> None:
    from .toy import make_toy_task

    task = make_toy_task(cfg.toy_kind, cfg.seed, size=cfg.dataset_size, image_size=cfg.image_size)
    with open(os.path.join(cfg.out_dir, "toy_teacher.arch"), "w") as handle:
        handle.write(export_architecture(task.teacher.architecture))
    bundle = extract_student_weights(task.teacher.module.net, task.teacher.architecture)
    save_checkpoint(
        os.path.join(cfg.out_dir, "toy_teacher.ckpt"), bundle, {"kind": "teacher-weights"}
    )
    save_checkpoint(
        os.path.join(cfg.out_dir, "toy_images.ckpt"),
        {"images": task.images},
        {"kind": "dataset", "count": str(task.images.size(0))},
    )
    print(f"wrote toy assets for {cfg.toy_kind} to {cfg.out_dir}")


def _cmd_pretrain(cfg) -> None:
    state = engine.build_state(cfg)
    log = MetricsLog(_paths(cfg)["metrics"])
    engine.run_pretrain(state, log)
    engine.save_search_checkpoint(state, _paths(cfg)["pretrain"])
    print(f"pretrained {cfg.pretrain_epochs} epochs -> {_paths(cfg)['pretrain']}")


def _cmd_search(cfg) -> None:
    paths = _paths(cfg)
    state = engine.build_state(cfg)
    engine.load_search_checkpoint(state, _require(paths["pretrain"], "pretrain"))
    log = MetricsLog(paths["metrics"])
    arch = engine.run_search(state, log)
    engine.save_search_checkpoint(state, paths["search"])
    report = derived_flops(state.spec, arch, cfg.eval_height, cfg.eval_width)
    print(f"searched {cfg.search_epochs} epochs; current argmax {report.gflops:.4f} GFLOPs")


def _cmd_derive(cfg) -> None:
    paths = _paths(cfg)
    state = engine.build_state(cfg)
    meta = engine.load_search_checkpoint(state, _require(paths["search"], "search"))
    arch = engine.derive_state(state)
    arch = with_provenance(
        arch, config=cfg.config_hash(), seed=cfg.seed, epoch=meta.get("epoch", "0")
    )
    report = derived_flops(state.spec, arch, cfg.eval_height, cfg.eval_width)
    with open(paths["architecture"], "w") as handle:
        handle.write(export_architecture(arch))
    with open(paths["flops"], "w") as handle:
        handle.write(report.to_text())
    print(f"derived {paths['architecture']} ({report.gflops:.4f} GFLOPs at eval resolution)")


def _cmd_train(cfg) -> None:
    paths = _paths(cfg)
    with open(_require(paths["architecture"], "derive")) as handle:
        arch = import_architecture(handle.read())
    state = engine.build_state(cfg)
    log = MetricsLog(paths["metrics"])
    student, curve = engine.train_from_scratch(
        state.spec, arch, state.images, state.teacher, state.distill_cfg, state.extractor, cfg, log
    )
    bundle = extract_student_weights(student, arch)
    save_checkpoint(
        paths["student"],
        bundle,
        {"phase": "scratch", "epoch": str(cfg.scratch_epochs), "config_hash": cfg.config_hash()},
    )
    print(f"trained student for {cfg.scratch_epochs} epochs; final loss {curve[-1]:.6g}")


def _load_student(cfg, paths):
    with open(_require(paths["architecture"], "derive")) as handle:
        arch = import_architecture(handle.read())
    bundle, _ = load_checkpoint(_require(paths["student"], "train"))
    net = GeneratorSupernet(engine.build_spec(cfg))
    load_student_weights(net, arch, bundle)
    return DerivedGenerator(net, arch), arch, bundle


def _cmd_eval(cfg) -> None:
    paths = _paths(cfg)
    student, _, _ = _load_student(cfg, paths)
    images, teacher = engine.load_run_dataset(cfg)
    held_out = engine.split_dataset(images.size(0), cfg.seed).chi2
    distill_cfg = cfg.distill_config()
    scores = engine.evaluate(
        student, teacher, images[list(held_out)], distill_cfg, build_extractor(distill_cfg.extractor)
    )
    print(f"psnr_db={scores['psnr']:.4f} distance={scores['distance']:.6g}")


def _cmd_quantize(cfg) -> None:
    paths = _paths(cfg)
    _, _, bundle = _load_student(cfg, paths)
    quantized, report = quantize_model(bundle)
    save_quantized(paths["quantized"], quantized, report)
    sys.stdout.write(report.to_text())
    print(f"wrote {paths['quantized']}")


def _cmd_flops(args) -> None:
    if not os.path.exists(args.arch):
        raise CliError(f"architecture file not found: {args.arch}")
    with open(args.arch) as handle:
        arch = import_architecture(handle.read())
    spec = spec_for_architecture(arch)
    report = derived_flops(spec, arch, args.height, args.width)
    sys.stdout.write(report.to_text())


_LOCKED_COMMANDS = {"toy", "pretrain", "search", "derive", "train", "quantize"}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "flops":
            _cmd_flops(args)
            return 0
        cfg = load_config(args.config, seed_override=args.seed)
        os.makedirs(cfg.out_dir, exist_ok=True)
        handler = {
            "toy": _cmd_toy,
            "pretrain": _cmd_pretrain,
            "search": _cmd_search,
            "derive": _cmd_derive,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "quantize": _cmd_quantize,
        }[args.command]
        if args.command in _LOCKED_COMMANDS:
            with _output_lock(cfg.out_dir):
                handler(cfg)
        else:
            handler(cfg)
        return 0
    except Exception as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
