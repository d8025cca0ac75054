"""``kspace-refine`` command-line harness.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .data import atomic_write, build_dataset, load_split, load_truth, sha256_file
from .errors import ConfigError, FormatError, NumericError
from .metrics import psnr, ssim
from .recon import ClassicalISTA, UnrolledISTA, ZeroFilled, load_params, save_params
from .refine import RefinementError, run_refinement

log = logging.getLogger("kspace_refine")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


@contextlib.contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"run directory {run_dir} is locked by another invocation", EXIT_IO) from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _checkpoint(cfg: RunConfig, arg) -> Path:
    return cfg.path(arg) if arg else cfg.run_path / "final.krfp"


# -- commands ------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, args) -> int:
    out = cfg.data_path
    entries = build_dataset(cfg.n_train, cfg.n_val, cfg.n_test, cfg.phantom_spec(), cfg.mask_spec(), out)
    counts = {s: sum(e.split == s for e in entries) for s in ("train", "val", "test")}
    print(f"dataset: {out}")
    print("subjects: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    print(f"manifest sha256: {sha256_file(out / 'manifest.tsv')}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    run_dir = cfg.run_path
    with run_lock(run_dir):
        train = load_split(cfg.data_path, "train")
        val = load_split(cfg.data_path, "val")
        try:
            params, state = run_refinement(
                train, cfg.refine_config(), val, mask_spec=cfg.mask_spec(),
                recon_cfg=cfg.recon_config(), init_params=cfg.init_params(), run_dir=run_dir)
        except RefinementError as exc:
            code = EXIT_NUMERIC if isinstance(exc.__cause__, NumericError) else EXIT_IO
            raise CommandError(str(exc), code) from exc
        save_params(run_dir / "final.krfp", params)
        atomic_write(run_dir / "config.txt", dump_config(cfg).encode())
        lines = [f"experiment {cfg.experiment}", f"stages {state.stage_index}",
                 f"best_stage {state.best_stage + 1}"]
        for i, rep in enumerate(state.metrics_history):
            lines.append(f"stage {i + 1} epochs {len(rep.records)} best_epoch {rep.best_epoch} "
                         f"best_val_loss {rep.best_val_loss!r} stop {rep.stop_reason}")
        lines.append(f"final_checkpoint_sha256 {sha256_file(run_dir / 'final.krfp')}")
        atomic_write(run_dir / "summary.txt", ("\n".join(lines) + "\n").encode())
    print("\n".join(lines))
    return EXIT_OK


def _load_truths(cfg, samples):
    try:
        return {s.subject_id: load_truth(cfg.data_path, s.subject_id) for s in samples}
    except FileNotFoundError as exc:
        raise CommandError(f"missing ground-truth file: {exc.filename}", EXIT_IO) from exc


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt = _checkpoint(cfg, args.checkpoint)
    params = load_params(ckpt)
    test = load_split(cfg.data_path, "test")
    truths = _load_truths(cfg, test)
    recon_cfg = cfg.recon_config()
    methods = {
        "zero-filled": ZeroFilled(),
        "classical-ISTA": ClassicalISTA(recon_cfg),
        cfg.experiment: UnrolledISTA(params, recon_cfg),
    }
    scores = {name: [] for name in methods}
    for s in test:
        for name, model in methods.items():
            x = model.reconstruct(s.target_k, s.omega)
            scores[name].append((s.subject_id, psnr(truths[s.subject_id], x), ssim(truths[s.subject_id], x)))

    out = cfg.run_path / "eval"
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(ckpt).stem

    def write_csv(path, header, rows):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    write_csv(out / f"{stem}.csv", ["subject", "psnr", "ssim"],
              [(sid, repr(p), repr(q)) for sid, p, q in scores[cfg.experiment]])
    write_csv(out / "baselines.csv", ["method", "subject", "psnr", "ssim"],
              [(name, sid, repr(p), repr(q)) for name in list(methods)[:2] for sid, p, q in scores[name]])

    r = cfg.acceleration
    width = max(len(n) for n in methods) + 2
    table = [f"{'method':<{width}}{'PSNR ' + str(r) + 'x':>12}{'SSIM ' + str(r) + 'x':>12}"]
    for name, rows in scores.items():
        table.append(f"{name:<{width}}{np.mean([p for _, p, _ in rows]):>12.4f}"
                     f"{np.mean([q for _, _, q in rows]):>12.4f}")
    text = "\n".join(table) + "\n"
    atomic_write(out / f"{stem}_summary.txt", text.encode())
    print(text, end="")
    return EXIT_OK


def _pgm(path, img8: np.ndarray):
    h, w = img8.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + img8.astype(np.uint8).tobytes())


def cmd_export_images(cfg: RunConfig, args) -> int:
    params = load_params(_checkpoint(cfg, args.checkpoint))
    model = UnrolledISTA(params, cfg.recon_config())
    samples = load_split(cfg.data_path, "test") + load_split(cfg.data_path, "val")
    by_id = {s.subject_id: s for s in samples}
    wanted = [x for x in args.subjects.split(",") if x] if args.subjects else [samples[0].subject_id]
    missing = [sid for sid in wanted if sid not in by_id]
    if missing:
        raise CommandError(f"unknown or truth-less subjects: {', '.join(missing)}", EXIT_IO)
    truths = _load_truths(cfg, [by_id[sid] for sid in wanted])
    out = cfg.run_path / "images"
    scale = cfg.error_scale
    for sid in wanted:
        s = by_id[sid]
        mag = np.abs(model.reconstruct(s.target_k, s.omega))
        ref = np.abs(truths[sid])
        peak = ref.max() if ref.max() > 0 else 1.0
        _pgm(out / f"{sid}_recon.pgm", np.round(255 * np.clip(mag / peak, 0, 1)))
        _pgm(out / f"{sid}_error.pgm", np.round(255 * np.clip(scale * np.abs(mag - ref) / peak, 0, 1)))
    sidecar = (
        f"error_scale = {scale!r}\n"
        "recon_pixel = round(255 * clip(|recon| / peak, 0, 1))\n"
        "error_pixel = round(255 * clip(error_scale * abs(|recon| - |truth|) / peak, 0, 1))\n"
        "peak = max |truth| per subject\n"
        f"subjects = {','.join(wanted)}\n"
    )
    atomic_write(out / "scale.txt", sidecar.encode())
    print(f"wrote {2 * len(wanted)} images to {out}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-images": cmd_export_images,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kspace-refine", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="key = value configuration file")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--stages", type=int, help="number of training stages (1 = no refinement)")
    p.add_argument("--checkpoint", help="parameter checkpoint (default: <run_dir>/final.krfp)")
    p.add_argument("--subjects", help="comma-separated subject ids for export-images")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.stages is not None:
        overrides["num_stages"] = args.stages
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
