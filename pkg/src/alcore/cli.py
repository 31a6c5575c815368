"""File-based command-line surface.

Each subcommand maps one workflow stage: score probability maps, select a
batch to annotate, build an initial dataset, extract first-order features,
evaluate Dice, run or compare simulations, or serve the HTTP API. Commands
compose through files (VOL1 volumes, CSV, JSON) and write outputs
atomically; identical inputs rewrite byte-identical outputs.

Exit codes: 0 success, 1 data/contract errors, 2 usage errors.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path

from . import __version__
from .initialization import (
    DEFAULT_BINS,
    extract_first_order,
    normalize_features,
    read_first_order_csv,
    select_diverse_initial,
    write_first_order_csv,
    write_normalized_csv,
)
from .metrics import dice
from .selection import (
    SelectionResult,
    SelectionStrategy,
    select_nonsimilar,
    select_random,
    select_representative,
    select_topk_uncertain,
)
from .similarity import read_feature_csv
from .simulation import (
    DEFAULT_DICE_TARGET,
    SimulationConfig,
    compare_strategies,
    run_active_learning,
)
from .uncertainty import (
    DEFAULT_TOP_FRACTION,
    UncertaintyMethod,
    bootstrap_score,
    dropout_topfraction_score,
    margins_score,
    rank_by_uncertainty,
    read_scores_csv,
    write_scores_csv,
)
from .volume import ProbabilityMap, SegmentationMask, VoxelGrid, load_volume

import numpy as np


class _UsageError(Exception):
    pass


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_selection(sel: SelectionResult, out: str, fmt: str) -> None:
    if fmt == "ids":
        sel.write_id_lines(out)
    else:
        sel.write_json(out)


# ---------------------------------------------------------------------------
# score

def _collect_map_dirs(root: Path) -> dict[str, list[Path]]:
    """Map item_id -> its prediction files, layout <root>/<item_id>/pred_<j>.vol."""
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    item_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not item_dirs:
        raise ValueError(f"no item directories under {root}")
    out: dict[str, list[Path]] = {}
    for d in item_dirs:
        preds = []
        for f in d.iterdir():
            m = re.fullmatch(r"pred_(\d+)\.vol", f.name)
            if m:
                preds.append((int(m.group(1)), f))
        if not preds:
            raise ValueError(f"{d.name}: no pred_<j>.vol maps found")
        out[d.name] = [f for _, f in sorted(preds)]
    return out

def cmd_score(args) -> int:
    method = UncertaintyMethod(args.method)
    per_item = _collect_map_dirs(Path(args.maps))
    scores = []
    for item_id, paths in per_item.items():
        maps = [ProbabilityMap(load_volume(p)) for p in paths]
        if method is UncertaintyMethod.MARGINS:
            if len(maps) != 1:
                raise ValueError(f"{item_id}: margins needs exactly one map, found {len(maps)}")
            scores.append(margins_score(maps[0], item_id=item_id))
        elif method is UncertaintyMethod.BOOTSTRAP:
            scores.append(bootstrap_score(maps, item_id=item_id))
        else:
            scores.append(dropout_topfraction_score(maps, args.top_fraction, item_id=item_id))
    write_scores_csv(scores, args.out)
    return 0


# ---------------------------------------------------------------------------
# select

def cmd_select(args) -> int:
    strategy = SelectionStrategy(args.strategy)
    scores = read_scores_csv(args.scores) if args.scores else None
    features = read_feature_csv(args.features) if args.features else None

    if strategy is SelectionStrategy.RANDOM:
        if scores is not None:
            pool = [s.item_id for s in scores]
        elif features is not None:
            pool = [f.item_id for f in features]
        else:
            raise _UsageError("random selection needs --scores or --features for the pool")
        sel = select_random(pool, args.m, args.seed)

    elif strategy is SelectionStrategy.TOP_K:
        if scores is None:
            raise _UsageError("topk selection needs --scores")
        sel = select_topk_uncertain(scores, args.m)

    else:
        if scores is None or features is None:
            raise _UsageError(f"{strategy.value} selection needs --scores and --features")
        if args.k is None:
            raise _UsageError(f"{strategy.value} selection needs --k")
        ranked = rank_by_uncertainty(scores)
        if args.k > len(ranked):
            raise ValueError(f"k ({args.k}) exceeds the scored pool ({len(ranked)})")
        by_id = {f.item_id: f for f in features}
        missing = [i for i in ranked[: args.k] if i not in by_id]
        if missing:
            raise ValueError(f"feature rows missing for shortlisted ids: {missing}")
        shortlist = [by_id[i] for i in ranked[: args.k]]
        if strategy is SelectionStrategy.REPRESENTATIVE:
            sel = select_representative(shortlist, args.m, args.seed)
        else:
            if args.annotated is None:
                raise _UsageError("nonsimilar selection needs --annotated")
            annotated = read_feature_csv(args.annotated)
            sel = select_nonsimilar(shortlist, annotated, args.m, args.seed)

    _write_selection(sel, args.out, args.format)
    return 0


# ---------------------------------------------------------------------------
# init

def cmd_init(args) -> int:
    raw = read_first_order_csv(args.features)
    if args.mode == "random":
        sel = select_random([f.item_id for f in raw], args.n, args.seed)
    else:
        sel = select_diverse_initial(normalize_features(raw), args.n, args.seed)
    _write_selection(sel, args.out, args.format)
    return 0


# ---------------------------------------------------------------------------
# features

def _volume_files(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    files = {p.stem: p for p in sorted(root.glob("*.vol"))}
    if not files:
        raise ValueError(f"no .vol files under {root}")
    return files


def cmd_features(args) -> int:
    volumes = _volume_files(Path(args.volumes))
    masks = _volume_files(Path(args.masks)) if args.masks else None
    rows = []
    for item_id, vpath in volumes.items():
        vol = load_volume(vpath)
        if masks is not None:
            if item_id not in masks:
                raise ValueError(f"no mask volume for item {item_id}")
            mask = SegmentationMask(load_volume(masks[item_id]))
        else:
            mask = SegmentationMask(VoxelGrid(np.ones(vol.dims)))
        rows.append(extract_first_order(vol, mask, args.bins, item_id))
    if args.normalize:
        write_normalized_csv(normalize_features(rows), args.out)
    else:
        write_first_order_csv(rows, args.out)
    return 0


# ---------------------------------------------------------------------------
# dice

def cmd_dice(args) -> int:
    preds = _volume_files(Path(args.pred))
    truths = _volume_files(Path(args.truth))
    missing = sorted(set(preds) - set(truths))
    if missing:
        raise ValueError(f"no truth volume for items: {missing}")
    lines = ["item_id,dice"]
    for item_id in sorted(preds):
        p = SegmentationMask(load_volume(preds[item_id]))
        t = SegmentationMask(load_volume(truths[item_id]))
        lines.append(f"{item_id},{format(dice(p, t, item_id).value, '.17g')}")
    _atomic_write_text(args.out, "".join(line + "\n" for line in lines))
    return 0


# ---------------------------------------------------------------------------
# simulate / compare

def cmd_simulate(args) -> int:
    config = SimulationConfig.from_json(Path(args.config).read_text())
    log = run_active_learning(config)
    log.write_jsonl(args.out, include_timing=args.timing)
    return 0


def cmd_compare(args) -> int:
    config_dir = Path(args.configs)
    if not config_dir.is_dir():
        raise ValueError(f"{config_dir} is not a directory")
    paths = sorted(config_dir.glob("*.json"))
    if not paths:
        raise ValueError(f"no .json configs under {config_dir}")
    configs = [SimulationConfig.from_json(p.read_text()) for p in paths]
    report = compare_strategies(configs, repeats=args.repeats, dice_target=args.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(out / "report.json", report.to_json())
    _atomic_write_text(out / "curves.csv", report.curves_csv())
    _atomic_write_text(out / "summary.csv", report.summary_csv())
    return 0


# ---------------------------------------------------------------------------
# serve

def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alcore",
        description="Active-learning query strategies over 3D probability maps and feature vectors.",
    )
    parser.add_argument("--version", action="version", version=f"alcore {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score per-item probability maps by uncertainty")
    p.add_argument("--method", required=True, choices=["margins", "bootstrap", "dropout"])
    p.add_argument("--maps", required=True, help="directory of <item_id>/pred_<j>.vol files")
    p.add_argument("--top-fraction", type=float, default=DEFAULT_TOP_FRACTION,
                   dest="top_fraction", help="fraction of top variances used by dropout")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="choose a batch to annotate")
    p.add_argument("--strategy", required=True,
                   choices=["random", "topk", "representative", "nonsimilar"])
    p.add_argument("--scores", help="uncertainty score CSV")
    p.add_argument("--features", help="feature vector CSV (item_id,f0,...)")
    p.add_argument("--annotated", help="feature CSV of already-annotated items")
    p.add_argument("--k", type=int, help="uncertain shortlist size")
    p.add_argument("--m", type=int, required=True, help="batch size to annotate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output path")
    p.add_argument("--format", choices=["json", "ids"], default="json",
                   help="JSON result or one id per line")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("init", help="build an initial training set from first-order features")
    p.add_argument("--features", required=True, help="CSV item_id,mean,median,entropy,energy")
    p.add_argument("--n", type=int, required=True, help="initial dataset size")
    p.add_argument("--mode", choices=["random", "diverse"], default="diverse")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["json", "ids"], default="json")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("features", help="extract first-order features from volumes")
    p.add_argument("--volumes", required=True, help="directory of <item_id>.vol intensity volumes")
    p.add_argument("--masks", help="directory of matching <item_id>.vol binary masks")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS, help="entropy histogram bins")
    p.add_argument("--normalize", action="store_true", help="emit the z-scored matrix")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("dice", help="Dice overlap of predicted vs truth masks")
    p.add_argument("--pred", required=True, help="directory of <item_id>.vol predicted masks")
    p.add_argument("--truth", required=True, help="directory of <item_id>.vol truth masks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dice)

    p = sub.add_parser("simulate", help="run one active-learning simulation")
    p.add_argument("--config", required=True, help="simulation config JSON")
    p.add_argument("--out", required=True, help="output JSONL run log")
    p.add_argument("--timing", action="store_true",
                   help="include wall time per iteration (breaks byte-replayability)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run and aggregate several strategy configs")
    p.add_argument("--configs", required=True, help="directory of config JSON files")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--target", type=float, default=DEFAULT_DICE_TARGET,
                   help="Dice level for the count-to-target summary")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("serve", help="serve the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        errors = getattr(exc, "errors", None)
        if errors:
            for e in errors:
                print(f"error: {e}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
