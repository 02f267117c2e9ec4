"""``troi`` command-line driver.

Every phase reads its inputs from and writes its outputs to
``<out>/<phase>/``, so phases can run as separate processes::

    troi gen --out runs/a
    troi pretrain --out runs/a
    troi stage1 --out runs/a --budget 400
    troi stage2 --out runs/a
    troi eval --out runs/a
    troi export-mask runs/a/stage1/mask.json --pgm-dir runs/a/slices

Failures print a single ``troi-error kind=<name> message=<json string>`` line
to stderr and exit with status 1.
"""
import os


def _cap_threads():
    # must run before numpy loads its BLAS
    n = os.environ.get("TROI_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = n


_cap_threads()

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import PHASES, RunConfig  # noqa: E402
from .eval import evaluate  # noqa: E402
from .grid import BinaryMask, export_pgm_slices, load_mask, mask_overlap, save_mask  # noqa: E402
from .nn import load_checkpoint, save_checkpoint  # noqa: E402
from .synth import generate_subject, load_subject, planted_roi, save_subject, zscore  # noqa: E402
from .trainer import pretrain, stage1_sparse_mask, stage2_rewind  # noqa: E402

log = logging.getLogger("troi")


class MissingArtifact(FileNotFoundError):
    pass


class DimensionMismatch(ValueError):
    pass


# --- helpers --------------------------------------------------------------------------

def _phase_dir(cfg: RunConfig, phase: str) -> Path:
    d = Path(cfg.output_dir) / phase
    d.mkdir(parents=True, exist_ok=True)
    return d


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `troi {producer}` first")
    return path


def _subject_path(cfg: RunConfig, i: int) -> Path:
    return Path(cfg.output_dir) / "gen" / f"subject_{i:02d}.json"


def _load_subjects(cfg: RunConfig, indices) -> list:
    out = []
    for i in indices:
        s = load_subject(_need(_subject_path(cfg, i), "gen"))
        if s.embeddings.shape[1] != cfg.model.d_embed:
            raise DimensionMismatch(f"subject {i} has embed_dim {s.embeddings.shape[1]} but model.d_embed is "
                                    f"{cfg.model.d_embed}")
        out.append(zscore(s))
    return out


def _load_bundle(cfg: RunConfig, phase: str):
    bundle, doc = load_checkpoint(_need(Path(cfg.output_dir) / phase / "checkpoint.json", phase))
    if dataclasses.astuple(bundle.dims) != dataclasses.astuple(cfg.model):
        raise DimensionMismatch(f"{phase} checkpoint has model dims {dataclasses.asdict(bundle.dims)} but the "
                                f"config asks for {dataclasses.asdict(cfg.model)}")
    return bundle, doc


def _target(cfg: RunConfig):
    return _load_subjects(cfg, [cfg.target_index])[0]


def _binary(m) -> BinaryMask:
    return m if isinstance(m, BinaryMask) else BinaryMask((m.weights > 0).astype("uint8"))


# --- commands ---------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> int:
    out = _phase_dir(cfg, "gen")
    for i, spec in enumerate(cfg.subjects):
        spec.validate()
        role = "target" if i == cfg.target_index else "pretrain"
        if args.counts_only:
            count = planted_roi(spec).nonzero_count()
        else:
            s = generate_subject(spec)
            save_subject(s, _subject_path(cfg, i))
            count = s.true_roi.nonzero_count()
        print(f"subject {i:02d} grid={'x'.join(map(str, spec.dims))} roi_voxels={count} role={role}")
    if not args.counts_only:
        print(f"wrote {len(cfg.subjects)} subjects to {out}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = _phase_dir(cfg, "pretrain")
    ids = [f"s{i}" for i in cfg.pretrain_indices]
    subjects = _load_subjects(cfg, cfg.pretrain_indices)
    bundle, report = pretrain(subjects, cfg.train_config("pretrain"), ids=ids)
    ckpt = out / "checkpoint.json"
    save_checkpoint(ckpt, bundle, epoch=cfg.pretrain.schedule.total_epochs)
    report.checkpoint = str(ckpt)
    report.save(out / "report.json")
    last = report.records[-1]
    print(f"pretrain epochs={len(report.records)} final_total={last['total']:.6f} checkpoint={ckpt}")
    return 0


def cmd_stage1(cfg: RunConfig, args) -> int:
    bundle, _ = _load_bundle(cfg, "pretrain")
    target = _target(cfg)
    out = _phase_dir(cfg, "stage1")
    res = stage1_sparse_mask(bundle, target, cfg.stage1, cfg.train_config("pretrain"))
    save_mask(res.mask, out / "mask.json")
    save_mask(res.weighted_mask, out / "weighted_mask.json")
    ckpt = out / "checkpoint.json"
    save_checkpoint(ckpt, res.bundle, epoch=res.iterations, extra={"psi": res.psi})
    res.report.checkpoint = str(ckpt)
    res.report.save(out / "report.json")
    iou, prec, rec = mask_overlap(res.mask, target.true_roi)
    print(f"stage1 iterations={res.iterations} voxels={res.mask.nonzero_count()} budget={cfg.stage1.budget} "
          f"psi={res.psi:.6g} iou={iou:.4f} precision={prec:.4f} recall={rec:.4f}")
    return 0


def cmd_stage2(cfg: RunConfig, args) -> int:
    bundle, _ = _load_bundle(cfg, "pretrain")
    mask = _binary(load_mask(_need(Path(cfg.output_dir) / "stage1" / "mask.json", "stage1")))
    target = _target(cfg)
    if mask.dims != target.dims:
        raise DimensionMismatch(f"mask grid {mask.dims} does not match target grid {target.dims}")
    out = _phase_dir(cfg, "stage2")
    trained, report = stage2_rewind(bundle, mask, target, cfg.train_config("stage2"))
    ckpt = out / "checkpoint.json"
    save_checkpoint(ckpt, trained, epoch=cfg.stage2.schedule.total_epochs)
    report.checkpoint = str(ckpt)
    report.save(out / "report.json")
    print(f"stage2 epochs={len(report.records)} voxels={mask.nonzero_count()} "
          f"final_total={report.records[-1]['total']:.6f} checkpoint={ckpt}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    bundle, _ = _load_bundle(cfg, "stage2")
    mask = _binary(load_mask(_need(Path(cfg.output_dir) / "stage1" / "mask.json", "stage1")))
    target = _target(cfg)
    e = cfg.eval
    metrics = evaluate(bundle, target, mask, split=e.split, max_candidates=e.max_candidates, n_passes=e.n_passes,
                       seed=cfg.seed)
    metrics.save(_phase_dir(cfg, "eval") / "metrics.txt")
    print(metrics.table())
    return 0


def cmd_export_mask(cfg: RunConfig, args) -> int:
    m = load_mask(args.mask_file)
    pgm_dir = Path(args.pgm_dir) if args.pgm_dir else _phase_dir(cfg, "export-mask")
    paths = export_pgm_slices(m, pgm_dir)
    print(f"nonzero={m.nonzero_count()} slices={len(paths)} dir={pgm_dir}")
    if args.subject:
        truth = load_subject(args.subject).true_roi
        if truth.dims != m.dims:
            raise DimensionMismatch(f"mask grid {m.dims} does not match subject grid {truth.dims}")
        iou, prec, rec = mask_overlap(_binary(m), truth)
        print(f"iou={iou:.4f} precision={prec:.4f} recall={rec:.4f}")
    return 0


def cmd_run(cfg: RunConfig, args) -> int:
    for phase in cfg.phases:
        _dispatch(phase, cfg, args)
    return 0


def cmd_config(cfg: RunConfig, args) -> int:
    sys.stdout.write(cfg.dumps())
    return 0


def _dispatch(command: str, cfg: RunConfig, args) -> int:
    if command in PHASES:
        cfg.save(Path(cfg.output_dir) / command / "config.json")
    return COMMANDS[command](cfg, args)


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "stage1": cmd_stage1, "stage2": cmd_stage2,
            "eval": cmd_eval, "export-mask": cmd_export_mask, "run": cmd_run, "config": cmd_config}


# --- argument parsing --------------------------------------------------------------

def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS lets the shared flags appear before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="JSON run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="re-key the run and all subjects")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="troi", description=__doc__.split("\n")[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate synthetic subjects")
    g.add_argument("--dims", type=_dims, help="grid size X,Y,Z for the default subject layout")
    g.add_argument("--count", type=int, help="number of subjects in the default layout")
    g.add_argument("--counts-only", action="store_true", help="print ROI voxel counts without writing files")

    sub.add_parser("pretrain", parents=[common], help="cross-subject pretraining")
    s1 = sub.add_parser("stage1", parents=[common], help="sparse mask training on the target subject")
    s1.add_argument("--budget", type=int, help="voxel budget")
    sub.add_parser("stage2", parents=[common], help="retrain on the selected voxels with a rewound schedule")
    sub.add_parser("eval", parents=[common], help="retrieval and identification metrics on the target")

    x = sub.add_parser("export-mask", parents=[common], help="write one PGM image per z-slice of a mask")
    x.add_argument("mask_file", type=Path)
    x.add_argument("--pgm-dir", type=Path)
    x.add_argument("--subject", type=Path, help="subject file whose true ROI the mask is scored against")

    r = sub.add_parser("run", parents=[common], help="run the phases listed in the config")
    r.add_argument("--budget", type=int, help="voxel budget")
    r.add_argument("--counts-only", action="store_true", help=argparse.SUPPRESS)
    sub.add_parser("config", parents=[common], help="print the resolved config")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "count", None) or getattr(args, "dims", None):
        cfg = cfg.with_layout(getattr(args, "count", None), getattr(args, "dims", None))
    if getattr(args, "budget", None) is not None:
        cfg = dataclasses.replace(cfg, stage1=dataclasses.replace(cfg.stage1, budget=args.budget))
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, output_dir=str(args.out))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args.command, resolve_config(args), args)
    except (OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as e:
        kind = type(e).__name__
        print(f"troi-error kind={kind} command={args.command} message={json.dumps(str(e))}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
