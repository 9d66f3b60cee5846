"""Command line surface: gen | score | run | eval | export.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure (non-finite training loss).
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .dataset import (
    RunConfig,
    generate_dataset,
    load_gt_mask,
    read_manifest,
)
from .errors import (
    FormatError,
    NumericError,
    ProtocolError,
    ShapeError,
    SynthesisError,
    UndefinedMetricError,
)
from .formats import export_heatmap, read_tensor, write_tensor
from .metrics import evaluate_image, evaluate_pixel
from .pgt import partition_groups, run_pgt
from .scorer import GroupScorer, extract_patch_features
from .tensor import upsample_array


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="anoref", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic product dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--defect-rate", type=float, default=0.3)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--category", default="widget")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (RunConfig fields)")
    common.add_argument("--manifest")
    common.add_argument("--out")
    common.add_argument("--seed", type=int)
    common.add_argument("--category")
    common.add_argument("--scorer", choices=("builtin", "external"))
    common.add_argument("--external-dir")
    common.add_argument("--texture-dir")
    common.add_argument("--strategy", choices=("perlin_texture", "cutpaste"))
    common.add_argument("--epochs", type=int)
    common.add_argument("--contamination", type=float)
    common.add_argument("--patch", type=int)
    common.add_argument("--u", type=int)
    common.add_argument("--r", type=int)
    common.add_argument("--l", type=int)

    sub.add_parser("score", parents=[common], help="write coarse maps and features")
    sub.add_parser("run", parents=[common], help="full group-wise refinement run")

    e = sub.add_parser("eval", help="recompute metrics from run outputs")
    e.add_argument("--manifest", required=True)
    e.add_argument("--run-dir", required=True)

    x = sub.add_parser("export", help="export final maps as PGM heatmaps")
    x.add_argument("--run-dir", required=True)
    x.add_argument("--seed", type=int, default=None,
                   help="restrict to one seed directory")
    return p


_OVERRIDES = (
    ("manifest", "manifest"),
    ("out", "output_dir"),
    ("category", "category"),
    ("scorer", "scorer"),
    ("external_dir", "external_dir"),
    ("texture_dir", "texture_dir"),
    ("strategy", "strategy"),
    ("epochs", "epochs"),
    ("contamination", "contamination"),
    ("patch", "patch"),
    ("u", "u"),
    ("r", "r"),
    ("l", "l"),
)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    updates = {}
    for arg_name, field in _OVERRIDES:
        val = getattr(args, arg_name, None)
        if val is not None:
            updates[field] = val
    if getattr(args, "seed", None) is not None:
        updates["seeds"] = (args.seed,)
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    if cfg.manifest is None:
        raise _UsageError("a manifest is required (--manifest or config)")
    return cfg


def _select_records(cfg):
    manifest_path = Path(cfg.manifest)
    records = read_manifest(manifest_path)
    if cfg.category:
        records = [r for r in records if r.category == cfg.category]
        if not records:
            raise ProtocolError(f"no records with category {cfg.category!r}")
    return records, manifest_path.parent


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _write_results_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("category,level,auroc,f1max,ap\n")
        for category, level, a, f1, ap in rows:
            fh.write(f"{category},{level},{_fmt(a)},{_fmt(f1)},{_fmt(ap)}\n")


def _write_scores_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("image_id,group,image_score\n")
        for image_id, group, score in rows:
            fh.write(f"{image_id},{group},{_fmt(score)}\n")


def _results_rows(records, base_dir, final_of):
    """Metric rows per (category, level); final_of maps image_id -> map."""
    by_cat: dict = {}
    for rec in records:
        by_cat.setdefault(rec.category, []).append(rec)
    rows = []
    for category in sorted(by_cat):
        recs = by_cat[category]
        if any(r.gt_label is None for r in recs):
            raise ProtocolError(
                f"category {category!r} has records without gt_label; "
                "evaluation needs ground truth"
            )
        finals = [final_of(r.image_id) for r in recs]
        labels = [r.gt_label for r in recs]
        scores = [float(f.max()) for f in finals]
        masks = [load_gt_mask(base_dir, r, finals[i].shape[0]) for i, r in enumerate(recs)]
        ia, if1, iap = evaluate_image(scores, labels)
        pa, pf1, pap = evaluate_pixel(finals, masks)
        rows.append((category, "image", ia, if1, iap))
        rows.append((category, "pixel", pa, pf1, pap))
    return rows


def _aggregate_rows(per_seed_rows) -> list:
    """Mean of each metric across seeds, keyed by (category, level)."""
    acc: dict = {}
    order = []
    for rows in per_seed_rows:
        for category, level, a, f1, ap in rows:
            key = (category, level)
            if key not in acc:
                acc[key] = []
                order.append(key)
            acc[key].append((a, f1, ap))
    out = []
    for key in order:
        vals = np.asarray(acc[key], dtype=np.float64)
        mean = vals.mean(axis=0)
        out.append((key[0], key[1], mean[0], mean[1], mean[2]))
    return out


def cmd_gen(args) -> int:
    generate_dataset(
        args.n, args.defect_rate, args.size, args.seed, args.out, args.category
    )
    print(f"wrote {args.n} images under {args.out}")
    return 0


def cmd_score(args) -> int:
    cfg = _load_config(args)
    records, base_dir = _select_records(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .formats import read_image

    by_cat: dict = {}
    for rec in records:
        by_cat.setdefault(rec.category, []).append(rec)
    for category in sorted(by_cat):
        recs = by_cat[category]
        groups = partition_groups([r.image_id for r in recs], cfg.u)
        rec_by_id = {r.image_id: r for r in recs}
        for gids in groups:
            feats = []
            for gid in gids:
                img = read_image(base_dir / rec_by_id[gid].path)
                feats.append(extract_patch_features(img, cfg.patch, cfg.base_seed))
            scorer = GroupScorer.fit(feats)
            for gid, fmap, amap in zip(gids, feats, scorer.maps):
                write_tensor(out / f"{gid}.feature.anr1", fmap.grid)
                write_tensor(out / f"{gid}.anomaly.anr1", amap.grid)
    print(f"wrote feature/anomaly tensors for {len(records)} images under {out}")
    return 0


def _run_one_seed(cfg, records, base_dir, seed_dir) -> list:
    (seed_dir / "final").mkdir(parents=True, exist_ok=True)
    (seed_dir / "coarse").mkdir(parents=True, exist_ok=True)

    def progress(category, gi, losses, seconds):
        loss_txt = f"loss {losses[-1]:.4f}" if losses else "refine only"
        print(f"[{category}] group {gi}: {loss_txt}, {seconds:.1f}s", flush=True)

    result = run_pgt(records, cfg, base_dir, progress=progress)
    finals = {}
    score_rows = []
    for img in result.all_images():
        write_tensor(seed_dir / "final" / f"{img.image_id}.anr1", img.final_map)
        write_tensor(seed_dir / "coarse" / f"{img.image_id}.anr1", img.coarse_patch)
        finals[img.image_id] = img.final_map
        score_rows.append((img.image_id, img.group_index, img.final_score))
    _write_scores_csv(seed_dir / "scores.csv", score_rows)
    rows = _results_rows(records, base_dir, lambda i: finals[i])
    _write_results_csv(seed_dir / "results.csv", rows)
    for cat in result.categories:
        if len(cat.groups) < 2:
            print(f"[{cat.category}] warning: single group: passthrough only")
    return rows


def cmd_run(args) -> int:
    cfg = _load_config(args)
    records, base_dir = _select_records(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_seed = []
    for seed in cfg.seeds:
        seed_cfg = dataclasses.replace(cfg, base_seed=seed)
        seed_dir = out / f"seed_{seed}"
        print(f"== seed {seed}")
        per_seed.append(_run_one_seed(seed_cfg, records, base_dir, seed_dir))
    _write_results_csv(out / "results.csv", _aggregate_rows(per_seed))
    print(f"results written to {out / 'results.csv'}")
    return 0


def cmd_eval(args) -> int:
    records = read_manifest(args.manifest)
    base_dir = Path(args.manifest).parent
    run_dir = Path(args.run_dir)
    seed_dirs = sorted(run_dir.glob("seed_*"))
    if not seed_dirs:
        raise ProtocolError(f"{run_dir} holds no seed_* run directories")
    per_seed = []
    for sd in seed_dirs:
        final_dir = sd / "final"

        def final_of(image_id, final_dir=final_dir):
            return read_tensor(final_dir / f"{image_id}.anr1").data

        known = {p.stem for p in final_dir.glob("*.anr1")}
        recs = [r for r in records if r.image_id in known]
        if not recs:
            raise ProtocolError(f"{final_dir} has no maps matching the manifest")
        rows = _results_rows(recs, base_dir, final_of)
        _write_results_csv(sd / "results.csv", rows)
        per_seed.append(rows)
    _write_results_csv(run_dir / "results.csv", _aggregate_rows(per_seed))
    print(f"re-evaluated {len(seed_dirs)} seed run(s) under {run_dir}")
    return 0


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    seed_dirs = (
        [run_dir / f"seed_{args.seed}"] if args.seed is not None
        else sorted(run_dir.glob("seed_*"))
    )
    count = 0
    for sd in seed_dirs:
        final_dir = sd / "final"
        if not final_dir.is_dir():
            raise ProtocolError(f"{sd} has no final/ maps to export")
        heat_dir = sd / "heatmaps"
        heat_dir.mkdir(parents=True, exist_ok=True)
        for path in sorted(final_dir.glob("*.anr1")):
            amap = read_tensor(path).data
            export_heatmap(np.clip(amap, 0.0, 1.0), heat_dir / f"{path.stem}.pgm")
            count += 1
    print(f"exported {count} heatmaps")
    return 0


_HANDLERS = {
    "gen": cmd_gen,
    "score": cmd_score,
    "run": cmd_run,
    "eval": cmd_eval,
    "export": cmd_export,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (
        FormatError,
        ShapeError,
        ProtocolError,
        UndefinedMetricError,
        SynthesisError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
