"""Command-line entry point for every pipeline stage.

Subcommands: phantom-gen, train-maskgan, train-refinegan, simulate,
build-dataset, train-seg, evaluate, study-serve, study-stats.

Values resolve as: explicit flag > config-file section > built-in default.
The config file is flat JSON keyed by subcommand (dashes become
underscores); unknown keys are rejected. Every run writes its resolved
configuration next to its outputs, and SCARGAN_DATA_ROOT provides the base
for relative paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Opt:
    flag: str
    type: type = str
    default: object = None
    required: bool = False
    help: str = ""
    path: bool = False
    repeat: bool = False
    is_flag: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


_COMMANDS: dict[str, list[Opt]] = {
    "phantom-gen": [
        Opt("--out", required=True, path=True, help="output dataset directory"),
        Opt("--n", int, 50, help="number of slices"),
        Opt("--scar-fraction", float, 0.434, help="fraction of slices with scar"),
        Opt("--seed", int, 0),
        Opt("--size", int, 192, help="frame size in px"),
        Opt("--slices-per-patient", int, 2),
    ],
    "train-maskgan": [
        Opt("--data", required=True, path=True, help="phantom dataset directory"),
        Opt("--out", required=True, path=True, help="snapshot output directory"),
        Opt("--steps", int, 50000, help="generator steps"),
        Opt("--snapshot-every", int, 10000),
        Opt("--batch-size", int, 8),
        Opt("--filters", int, 64),
        Opt("--depth", int, 4),
        Opt("--alpha", float, 1.0),
        Opt("--lr", float, 2e-4),
        Opt("--disc-lr", float, None),
        Opt("--replay-capacity", int, None),
        Opt("--seed", int, 0),
    ],
    "train-refinegan": [
        Opt("--data", required=True, path=True),
        Opt("--out", required=True, path=True),
        Opt("--mask-snapshot", required=True, path=True, repeat=True,
            help="mask-generator snapshot(s) used to build heuristic inputs"),
        Opt("--steps", int, 50000),
        Opt("--snapshot-every", int, 10000),
        Opt("--batch-size", int, 8),
        Opt("--filters", int, 64),
        Opt("--depth", int, 4),
        Opt("--alpha", float, 10.0),
        Opt("--lr", float, 2e-4),
        Opt("--disc-lr", float, None),
        Opt("--replay-capacity", int, None),
        Opt("--seed", int, 0),
    ],
    "simulate": [
        Opt("--data", required=True, path=True, help="source phantom dataset"),
        Opt("--out", required=True, path=True, help="output regime dataset"),
        Opt("--regime", required=True, help="0x, 0x+, 1x, 3x or 5x"),
        Opt("--mask-snapshot", path=True, repeat=True),
        Opt("--refiner-snapshot", path=True),
        Opt("--seed", int, 0),
        Opt("--no-dropout", is_flag=True, help="disable dropout noise during simulation"),
    ],
    "build-dataset": [
        Opt("--data", required=True, path=True, help="real phantom dataset"),
        Opt("--out", required=True, path=True),
        Opt("--regime", required=True),
        Opt("--sim", path=True, help="dataset holding simulated slices (for kx regimes)"),
    ],
    "train-seg": [
        Opt("--pretrain-data", required=True, path=True, help="scar-free phantom dataset"),
        Opt("--data", required=True, path=True, help="regime dataset directory"),
        Opt("--out", required=True, path=True),
        Opt("--pretrain-steps", int, 2000),
        Opt("--steps", int, 2000),
        Opt("--batch-size", int, 8),
        Opt("--filters", int, 96),
        Opt("--convs-per-block", int, 3),
        Opt("--depth", int, 4),
        Opt("--scar-weight", float, 5.0),
        Opt("--aux-weight", float, 1.0),
        Opt("--lr", float, 1e-4),
        Opt("--folds", int, 4),
        Opt("--folds-parallel", int, 1, help="train folds in this many parallel processes"),
        Opt("--seed", int, 0),
    ],
    "evaluate": [
        Opt("--pred", required=True, path=True, help="predicted-mask dataset"),
        Opt("--gt", required=True, path=True, help="ground-truth dataset"),
        Opt("--out", path=True, help="metrics JSON path (default <pred>/metrics.json)"),
    ],
    "study-serve": [
        Opt("--real", required=True, path=True, help="dataset with real-scar slices"),
        Opt("--sim", required=True, path=True, help="dataset with simulated slices"),
        Opt("--sessions-dir", required=True, path=True),
        Opt("--admin-token", required=True),
        Opt("--host", str, "127.0.0.1"),
        Opt("--port", int, 8000),
        Opt("--static", path=True, help="frontend asset directory to serve at /app"),
    ],
    "study-stats": [
        Opt("--sessions-dir", required=True, path=True),
        Opt("--session", required=True),
        Opt("--partial", is_flag=True),
        Opt("--out", path=True, help="write stats JSON here as well"),
    ],
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scargan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file with per-stage sections")
        for o in opts:
            if o.is_flag:
                p.add_argument(o.flag, action="store_true", default=None, help=o.help)
            elif o.repeat:
                p.add_argument(o.flag, action="append", default=None, help=o.help)
            else:
                p.add_argument(o.flag, type=o.type, default=None, help=o.help)
    return parser


def _resolve_path(value: str) -> Path:
    p = Path(value)
    root = os.environ.get("SCARGAN_DATA_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _merge_config(command: str, args: argparse.Namespace) -> dict:
    opts = _COMMANDS[command]
    section_name = command.replace("-", "_")
    file_section: dict = {}
    if args.config:
        cfg = json.loads(Path(_resolve_path(args.config)).read_text())
        if not isinstance(cfg, dict):
            raise ValueError("config file must hold a JSON object")
        for key in cfg:
            if key.replace("-", "_") not in {c.replace("-", "_") for c in _COMMANDS}:
                raise ValueError(f"unknown config section {key!r}")
        file_section = cfg.get(section_name, cfg.get(command, {}))
        known = {o.dest for o in opts}
        for key in file_section:
            if key.replace("-", "_") not in known:
                raise ValueError(f"unknown key {key!r} in config section {section_name!r}")

    resolved = {}
    for o in opts:
        value = getattr(args, o.dest)
        if value is None:
            value = file_section.get(o.dest, file_section.get(o.flag.lstrip("-"), o.default))
        if value is None and o.is_flag:
            value = False
        if value is None and o.required:
            raise ValueError(f"{command}: missing required option {o.flag}")
        if value is not None and o.path:
            if o.repeat:
                value = [str(_resolve_path(v)) for v in (value if isinstance(value, list) else [value])]
            else:
                value = str(_resolve_path(value))
        resolved[o.dest] = value
    return resolved


def _write_resolved(cfg: dict, command: str, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_config.json"
    path.write_text(json.dumps({command.replace("-", "_"): cfg}, indent=2, sort_keys=True) + "\n")
    _log(f"resolved config: {path}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_dataset(root: str):
    from .dataset import read_dataset

    return read_dataset(Path(root))


def _cmd_phantom_gen(cfg: dict) -> int:
    from .dataset import PhantomParams, generate_corpus, write_dataset

    params = PhantomParams.scaled(cfg["size"])
    slices = generate_corpus(
        cfg["n"], cfg["scar_fraction"], cfg["seed"], params, cfg["slices_per_patient"]
    )
    manifest = write_dataset(slices, Path(cfg["out"]), params=params, seed=cfg["seed"])
    n_scar = sum(s.has_scar for s in slices)
    _write_resolved(cfg, "phantom-gen", Path(cfg["out"]))
    _log(f"wrote {len(slices)} slices ({n_scar} with scar) under {cfg['out']}")
    _log(f"manifest: {manifest}")
    return 0


def _split_mask_pools(slices):
    no_scar = [s.mask for s in slices if not s.has_scar]
    scar = [s.mask for s in slices if s.has_scar]
    return no_scar, scar


def _cmd_train_maskgan(cfg: dict) -> int:
    from .maskgan import MaskGanConfig, train_maskgan

    slices, _ = _load_dataset(cfg["data"])
    no_scar, scar = _split_mask_pools(slices)
    out = Path(cfg["out"])
    config = MaskGanConfig(
        alpha=cfg["alpha"],
        batch_size=cfg["batch_size"],
        snapshot_every=cfg["snapshot_every"],
        total_gen_steps=cfg["steps"],
        replay_capacity=cfg["replay_capacity"],
        learning_rate=cfg["lr"],
        disc_learning_rate=cfg["disc_lr"],
        seed=cfg["seed"],
        initial_filters=cfg["filters"],
        depth=cfg["depth"],
        image_size=slices[0].shape[0],
        log_path=out / "train_log.jsonl",
    )
    _write_resolved(cfg, "train-maskgan", out)
    snapshots = train_maskgan(no_scar, scar, config, out_dir=out)
    for s in snapshots:
        _log(f"snapshot: {out / (s.name + '.wts')}")
    return 0


def _cmd_train_refinegan(cfg: dict) -> int:
    from .heuristic import paint_scar
    from .maskgan import ShapeSimulator
    from .nets import WeightSnapshot
    from .refinegan import RefineGanConfig, train_refinegan

    slices, _ = _load_dataset(cfg["data"])
    no_scar = [s for s in slices if not s.has_scar]
    scar_slices = [s for s in slices if s.has_scar]
    if not no_scar or not scar_slices:
        raise ValueError("dataset needs both scar-free and real-scar slices")
    sims = [ShapeSimulator(WeightSnapshot.load(p)) for p in cfg["mask_snapshot"]]
    rng = np.random.default_rng(cfg["seed"])
    heuristic_pool = []
    for i, s in enumerate(no_scar):
        shaped = sims[i % len(sims)].run(s.mask, seed=int(rng.integers(0, 2**31 - 1)))
        if not shaped.scar().any():
            continue
        heuristic_pool.append(paint_scar(s.image, shaped.scar(), s.mask.lv_endo()))
    if not heuristic_pool:
        raise ValueError("no nonempty simulated shapes; mask snapshots look degenerate")
    out = Path(cfg["out"])
    config = RefineGanConfig(
        alpha=cfg["alpha"],
        batch_size=cfg["batch_size"],
        snapshot_every=cfg["snapshot_every"],
        total_gen_steps=cfg["steps"],
        replay_capacity=cfg["replay_capacity"],
        learning_rate=cfg["lr"],
        disc_learning_rate=cfg["disc_lr"],
        seed=cfg["seed"],
        initial_filters=cfg["filters"],
        depth=cfg["depth"],
        image_size=slices[0].shape[0],
        log_path=out / "train_log.jsonl",
    )
    _write_resolved(cfg, "train-refinegan", out)
    snapshots = train_refinegan(heuristic_pool, [s.image for s in scar_slices], config, out_dir=out)
    for s in snapshots:
        _log(f"snapshot: {out / (s.name + '.wts')}")
    return 0


def _plan_from_cfg(cfg: dict):
    from .augment import AugmentPlan
    from .nets import WeightSnapshot

    regime = cfg["regime"]
    k = 0 if regime in ("0x", "0x+") else int(regime[:-1]) if regime.endswith("x") else -1
    if k < 0:
        raise ValueError(f"unknown regime {regime!r}")
    snaps = [WeightSnapshot.load(p) for p in (cfg.get("mask_snapshot") or [])]
    if len(snaps) != k:
        raise ValueError(f"need {k} snapshots for regime {regime}, got {len(snaps)}")
    refiner = None
    if k > 0:
        if not cfg.get("refiner_snapshot"):
            raise ValueError(f"regime {regime} needs --refiner-snapshot")
        refiner = WeightSnapshot.load(cfg["refiner_snapshot"])
    return AugmentPlan(
        regime=regime,
        snapshot_set=snaps,
        refiner=refiner,
        dropout=not cfg.get("no_dropout", False),
        seed=cfg["seed"],
    )


def _cmd_simulate(cfg: dict) -> int:
    from .augment import build_training_set

    plan = _plan_from_cfg(cfg)
    slices, _ = _load_dataset(cfg["data"])
    real = [s for s in slices if s.has_scar]
    no_scar = [s for s in slices if not s.has_scar]
    out = Path(cfg["out"])
    _write_resolved(cfg, "simulate", out)
    manifest = build_training_set(real, no_scar, plan, out)
    n_sim = sum(1 for e in manifest["slices"] if e.get("provenance") == "simulated")
    _log(f"regime {plan.regime}: {len(manifest['slices'])} slices ({n_sim} simulated) under {out}")
    return 0


def _cmd_build_dataset(cfg: dict) -> int:
    from .dataset import read_slice, write_dataset

    slices, manifest = _load_dataset(cfg["data"])
    entries = {e["slice_id"]: e for e in manifest["slices"]}
    regime = cfg["regime"]
    out = Path(cfg["out"])
    picked = []
    extra = {}
    for s in slices:
        prov = entries[s.slice_id].get("provenance", "real")
        if prov != "real" and prov != "no_scar":
            continue
        if s.has_scar:
            picked.append(s)
            extra[s.slice_id] = {"provenance": "real"}
        elif regime == "0x+":
            picked.append(s)
            extra[s.slice_id] = {"provenance": "no_scar"}
    if regime not in ("0x", "0x+"):
        if not regime.endswith("x") or not regime[:-1].isdigit():
            raise ValueError(f"unknown regime {regime!r}")
        k = int(regime[:-1])
        if not cfg.get("sim"):
            raise ValueError(f"regime {regime} needs --sim pointing at simulated slices")
        sim_root = Path(cfg["sim"])
        from .dataset import read_manifest

        sim_manifest = read_manifest(sim_root)
        sim_entries = [e for e in sim_manifest["slices"] if e.get("provenance") == "simulated"]
        tags = {e["mask_snapshot_tag"] for e in sim_entries}
        if len(tags) != k:
            raise ValueError(
                f"regime {regime} needs {k} snapshots; simulated pool used {len(tags)} ({sorted(tags)})"
            )
        for e in sim_entries:
            picked.append(read_slice(sim_root / "slices", e["slice_id"]))
            extra[e["slice_id"]] = {key: e[key] for key in e if key not in ("slice_id",)}
    path = write_dataset(picked, out, extra_entries=extra, manifest_extra={"regime": regime})
    _write_resolved(cfg, "build-dataset", out)
    _log(f"regime {regime}: {len(picked)} slices under {out}")
    _log(f"manifest: {path}")
    return 0


def _run_fold(packed):
    from .segnet import finetune

    pretrained, data, config, out, fold = packed
    return finetune(pretrained, Path(data), config, out_dir=Path(out), folds=[fold]).fold_results


def _cmd_train_seg(cfg: dict) -> int:
    from .segnet import SegTrainConfig, finetune, pretrain

    pre_slices, _ = _load_dataset(cfg["pretrain_data"])
    n_total = len(pre_slices)
    pre_slices = [s for s in pre_slices if not s.has_scar]  # no-contrast analogue
    if not pre_slices:
        raise ValueError("pretraining dataset has no scar-free slices")
    if len(pre_slices) < n_total:
        _log(f"pretraining on {len(pre_slices)}/{n_total} scar-free slices")
    out = Path(cfg["out"])
    size = pre_slices[0].shape[0]
    base = dict(
        learning_rate=cfg["lr"],
        scar_pixel_weight=cfg["scar_weight"],
        aux_loss_weight=cfg["aux_weight"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        initial_filters=cfg["filters"],
        depth=cfg["depth"],
        convs_per_block=cfg["convs_per_block"],
        image_size=size,
        fold_count=cfg["folds"],
    )
    _write_resolved(cfg, "train-seg", out)
    pre_config = SegTrainConfig(steps=cfg["pretrain_steps"], **base)
    pretrained = pretrain(pre_slices, pre_config)
    pretrained.save(out)
    _log(f"pretrained snapshot: {out / (pretrained.name + '.wts')}")

    tune_config = SegTrainConfig(steps=cfg["steps"], **base)
    if cfg["folds_parallel"] > 1:
        from concurrent.futures import ProcessPoolExecutor

        jobs = [
            (pretrained, cfg["data"], tune_config, str(out), fold) for fold in range(cfg["folds"])
        ]
        results = []
        with ProcessPoolExecutor(max_workers=cfg["folds_parallel"]) as pool:
            for r in pool.map(_run_fold, jobs):
                results.extend(r)
    else:
        results = finetune(pretrained, Path(cfg["data"]), tune_config, out_dir=out).fold_results
    summary_path = out / "fold_results.json"
    summary_path.write_text(json.dumps(results, indent=2) + "\n")
    _log(f"fold results: {summary_path}")

    from . import evalkit

    regime = results[0]["regime"]
    metrics: dict[str, list[float]] = {}
    for record in results:
        for name in ("dice_endo", "dice_epi", "pct_scar_in_myo", "pct_scar_in_endo"):
            if record.get(name) is not None:
                metrics.setdefault(name, []).append(record[name])
    reports = evalkit.report_table({regime: metrics})
    (out / "report.json").write_text(json.dumps(evalkit.report_json(reports), indent=2) + "\n")
    (out / "report.txt").write_text(evalkit.format_report(reports) + "\n")
    _log(f"report: {out / 'report.txt'}")
    return 0


def _cmd_evaluate(cfg: dict) -> int:
    from . import evalkit
    from .dataset import LV_ENDO, LV_MYO, SCAR

    pred_slices, _ = _load_dataset(cfg["pred"])
    gt_slices, _ = _load_dataset(cfg["gt"])
    gt_by_id = {s.slice_id: s for s in gt_slices}
    per_slice = []
    for p in pred_slices:
        if p.slice_id not in gt_by_id:
            raise ValueError(f"prediction {p.slice_id} has no ground-truth counterpart")
        g = gt_by_id[p.slice_id]
        row = {
            "slice_id": p.slice_id,
            "dice_endo": evalkit.dice(p.mask.lv_endo(), g.mask.lv_endo()),
            "dice_epi": evalkit.dice(p.mask.lv_epi(), g.mask.lv_epi()),
        }
        gt_scar = g.mask.scar()
        if gt_scar.any():
            inc = evalkit.scar_inclusion(
                gt_scar, p.mask.lv_endo(), p.mask.region(LV_MYO, SCAR)
            )
            row["pct_scar_in_myo"] = inc.pct_scar_in_myo
            row["pct_scar_in_endo"] = inc.pct_scar_in_endo
        per_slice.append(row)
    metrics = {
        "per_slice": per_slice,
        "mean_dice_endo": float(np.mean([r["dice_endo"] for r in per_slice])),
        "mean_dice_epi": float(np.mean([r["dice_epi"] for r in per_slice])),
    }
    scar_rows = [r for r in per_slice if "pct_scar_in_myo" in r]
    if scar_rows:
        metrics["mean_pct_scar_in_myo"] = float(np.mean([r["pct_scar_in_myo"] for r in scar_rows]))
        metrics["mean_pct_scar_in_endo"] = float(
            np.mean([r["pct_scar_in_endo"] for r in scar_rows])
        )
    out = Path(cfg["out"]) if cfg.get("out") else Path(cfg["pred"]) / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(metrics, indent=2) + "\n")
    _write_resolved(cfg, "evaluate", out.parent)
    _log(f"metrics: {out}")
    return 0


def _cmd_study_serve(cfg: dict) -> int:
    import uvicorn

    from .study import StudyStore, create_app, pool_from_dataset

    real_pool = pool_from_dataset(Path(cfg["real"]), has_scar=True, provenance="real")
    sim_pool = pool_from_dataset(Path(cfg["sim"]), has_scar=True, provenance="simulated")
    if not sim_pool:  # a simulated-only dataset may omit provenance
        sim_pool = pool_from_dataset(Path(cfg["sim"]), has_scar=True)
    store = StudyStore(Path(cfg["sessions_dir"]))
    app = create_app(
        store,
        real_pool,
        sim_pool,
        admin_token=cfg["admin_token"],
        static_dir=Path(cfg["static"]) if cfg.get("static") else None,
    )
    _write_resolved({k: v for k, v in cfg.items() if k != "admin_token"}, "study-serve", Path(cfg["sessions_dir"]))
    _log(f"serving study on {cfg['host']}:{cfg['port']} ({len(real_pool)} real / {len(sim_pool)} simulated slices)")
    uvicorn.run(app, host=cfg["host"], port=cfg["port"])
    return 0


def _cmd_study_stats(cfg: dict) -> int:
    from .study import StudyStore

    store = StudyStore(Path(cfg["sessions_dir"]))
    stats = store.stats(cfg["session"], partial=cfg["partial"])
    text = json.dumps(stats, indent=2)
    print(text)
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text + "\n")
        _log(f"stats: {cfg['out']}")
    return 0


_HANDLERS = {
    "phantom-gen": _cmd_phantom_gen,
    "train-maskgan": _cmd_train_maskgan,
    "train-refinegan": _cmd_train_refinegan,
    "simulate": _cmd_simulate,
    "build-dataset": _cmd_build_dataset,
    "train-seg": _cmd_train_seg,
    "evaluate": _cmd_evaluate,
    "study-serve": _cmd_study_serve,
    "study-stats": _cmd_study_stats,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args.command, args)
        return _HANDLERS[args.command](cfg)
    except Exception as e:  # noqa: BLE001 - uniform diagnostic exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
