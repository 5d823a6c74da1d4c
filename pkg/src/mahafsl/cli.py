"""Command line entry point: ``mahafsl {scan,synth,train,eval,compare,gradcheck}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .backbone import make_backbone, read_fsle, write_fsle
from .config import RunConfig, load_config
from .episodes import ImageLoader, generate_synthetic, load_manifest, save_manifest, scan_directory
from .errors import ConfigError, DataError, FSLError, NumericalError
from .evaluation import EvalReport, compare_heads, evaluate
from .model import FewShotModel
from .trainer import load_checkpoint, save_checkpoint, train, write_loss_csv

log = logging.getLogger("mahafsl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _output_dir(cfg: RunConfig) -> Path:
    cfg.require("output.dir")
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg: RunConfig):
    cfg.require("data.manifest", "data.splits")
    manifest = load_manifest(cfg.data.manifest, cfg.data.splits)
    store = None
    if cfg.backbone.kind == "precomputed":
        emb = cfg.data.embeddings or manifest.embedding_file
        if emb is None:
            raise ConfigError("missing required config field data.embeddings")
        store = read_fsle(emb)
        store.require(manifest.sample_ids())
        loader = None
    else:
        loader = ImageLoader(manifest, cfg.preprocess)
    return manifest, make_backbone(cfg.backbone, store, loader)


def _model_from_checkpoint(cfg: RunConfig, path, backbone) -> FewShotModel:
    ckpt = load_checkpoint(path)
    saved = ckpt.meta.get("backbone")
    if saved is not None and saved != json.loads(json.dumps(cfg.backbone.__dict__)):
        raise ConfigError("checkpoint backbone settings differ from the config's backbone section")
    train_meta = ckpt.meta.get("train", {})
    return FewShotModel(backbone, ckpt.params, train_meta.get("beta", cfg.train.beta), train_meta.get("task_center", cfg.train.task_center))


def cmd_scan(args) -> int:
    manifest, skipped = scan_directory(args.root)
    save_manifest(manifest, args.out, args.splits)
    n = sum(len(c.samples) for c in manifest.classes)
    print(f"{len(manifest.classes)} classes, {n} samples -> {args.out}")
    if skipped:
        print(f"warning: skipped {skipped} non-image entries", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _output_dir(cfg)
    s = cfg.synth
    manifest, store = generate_synthetic(
        s.classes, s.dim, s.mean_scale, s.cov, s.condition, s.samples_per_class, s.seed, s.noise, s.train_classes
    )
    write_fsle(out / "embeddings.fsle", store.ids, store.vectors)
    manifest.embedding_file = "embeddings.fsle"
    save_manifest(manifest, out / "manifest.json", out / "splits.json")
    _write_json(out / "config.json", cfg.to_dict())
    print(f"{s.classes} classes x {s.samples_per_class} samples, d={s.dim} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _output_dir(cfg)
    manifest, backbone = _load_data(cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, history = train(manifest, cfg.train, backbone, resume=resume)
    ckpt.meta["run_config"] = cfg.to_dict()
    save_checkpoint(ckpt, out / "checkpoint.fslc")
    write_loss_csv(history, out / "loss.csv")
    _write_json(out / "config.json", cfg.to_dict())
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: loss {last.mean_loss:.5f} train acc {last.mean_train_acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _output_dir(cfg)
    manifest, backbone = _load_data(cfg)
    model = _model_from_checkpoint(cfg, args.checkpoint, backbone)
    e = cfg.eval
    report = evaluate(
        model, manifest, e.n_way, e.m_shot, e.query_per_class, e.n_episodes, e.seed, e.split, e.metric, e.use_adapter
    )
    report.config["run"] = cfg.to_dict()
    (out / "eval_report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "eval_report.csv").write_text(EvalReport.csv_header() + "\n" + report.csv_row() + "\n", encoding="utf-8")
    print(f"{report.n_episodes} episodes: accuracy {report.mean:.4f} +- {report.ci95:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _output_dir(cfg)
    manifest, backbone = _load_data(cfg)
    if args.checkpoint:
        model = _model_from_checkpoint(cfg, args.checkpoint, backbone)
    else:
        model = FewShotModel(backbone, {}, cfg.train.beta, cfg.train.task_center)
        if cfg.compare.use_adapter:
            raise ConfigError("compare.use_adapter needs --checkpoint")
    c = cfg.compare
    rows = [r.row() for r in compare_heads(model, manifest, [tuple(s) for s in c.shapes], c.seed, c.n_episodes, c.use_adapter)]
    _write_json(out / "heads.json", {"rows": rows, "run": cfg.to_dict()})
    keys = list(rows[0]) if rows else []
    lines = [",".join(keys)] + [",".join(str(r[k]) for k in keys) for r in rows]
    (out / "heads.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for r in rows:
        print(
            f"{r['n_way']}-way {r['m_shot']}-shot: euclidean {r['euclidean_mean']:.4f} +- {r['euclidean_ci95']:.4f}, "
            f"mahalanobis {r['mahalanobis_mean']:.4f} +- {r['mahalanobis_ci95']:.4f}"
        )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    failed = 0
    for r in run_suite(trials=args.trials, composite_trials=args.composite_trials, seed=args.seed):
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name:18s} trials={r.trials:3d} max_rel_err={r.max_rel_error:.2e} ({r.seconds:.2f}s)")
    print(f"{'all checks passed' if not failed else f'{failed} checks failed'} (tolerance {TOLERANCE:g})")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mahafsl", description="Few-shot classification with adapted embeddings and a Mahalanobis head.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scan", help="index a class-per-folder image tree")
    s.add_argument("root")
    s.add_argument("out")
    s.add_argument("--splits", help="also write an empty splits file here")
    s.set_defaults(func=cmd_scan)

    def with_config(sp):
        sp.add_argument("--config", "-c")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        return sp

    with_config(sub.add_parser("synth", help="write a synthetic embedding dataset")).set_defaults(func=cmd_synth)
    t = with_config(sub.add_parser("train", help="episodic meta-training"))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)
    e = with_config(sub.add_parser("eval", help="600-episode evaluation"))
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)
    c = with_config(sub.add_parser("compare", help="Euclidean vs Mahalanobis heads"))
    c.add_argument("--checkpoint")
    c.set_defaults(func=cmd_compare)
    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--composite-trials", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FSLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
