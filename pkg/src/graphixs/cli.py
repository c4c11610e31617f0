"""Command-line entry point: synth, degrade, train, render, eval and plan."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (CameraModel, DatasetManifest, load_manifest, load_scene, load_scene_metadata,
                   manifest_to_dict, quantize, save_manifest, save_scene, write_image)
from .metrics import evaluate
from .optimizer import TrainConfig, train
from .renderer import render_image
from .synth import SceneSpec, synth_scene
from .uncertainty import DegradationKind, DegradationSpec, apply_chain

log = logging.getLogger("graphixs")


def _read_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)


# ---------------------------------------------------------------------------
# experiment plans

@dataclass
class ExperimentPlan:
    dataset: str
    chains: dict
    train_config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        if not self.chains:
            raise ValueError("plan needs at least one chain")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be unique")
        # validates every link; labels are dict keys, hence unique
        for label, chain in self.chains.items():
            for link in chain:
                DegradationSpec.from_dict({"seed": 0, **link})
        TrainConfig.from_dict(self.train_config)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        path = Path(path)
        d = _read_json(path)
        ds = Path(d["dataset"])
        if not ds.is_absolute():
            ds = path.parent / ds
        tc = d.get("train_config", {})
        if isinstance(tc, str):
            tc_path = Path(tc) if Path(tc).is_absolute() else path.parent / tc
            tc = _read_json(tc_path)
        return cls(dataset=str(ds), chains=d["chains"], train_config=tc, seeds=list(d.get("seeds", [0])))


def _cell_key(chain: list, train_cfg: dict, seed: int, manifest: DatasetManifest) -> str:
    blob = json.dumps({"chain": chain, "train": train_cfg, "seed": seed,
                       "manifest": manifest_to_dict(manifest)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def run_cell(manifest: DatasetManifest, chain: list, train_cfg: dict, seed: int) -> dict:
    specs = [DegradationSpec.from_dict({"seed": seed, **link}) for link in chain]
    degraded = apply_chain(manifest, specs)
    cfg = TrainConfig.from_dict({**train_cfg, "seed": seed})
    cs, _ = train(degraded, cfg)
    rep = evaluate(cs, degraded)
    return {"psnr": rep.mean_psnr, "dssim": rep.mean_dssim}


def run_plan(plan: ExperimentPlan, out_dir) -> dict:
    """Run every (chain, seed) cell, reusing cached cells, and write the result tables."""
    out = Path(out_dir)
    cells = out / "cells"
    cells.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(plan.dataset)
    rows = []
    for label in sorted(plan.chains):
        chain = plan.chains[label]
        for seed in plan.seeds:
            key = _cell_key(chain, plan.train_config, seed, manifest)
            path = cells / f"{key}.json"
            if path.exists():
                rec = _read_json(path)
            else:
                log.info("running %s seed %s", label, seed)
                try:
                    rec = {"status": "ok", **run_cell(manifest, chain, plan.train_config, seed)}
                except Exception as exc:  # a failed cell must not stop the others
                    rec = {"status": "error", "error": repr(exc), "trace": traceback.format_exc()}
                rec.update(label=label, seed=seed, chain=chain, train_config=plan.train_config)
                _write_json(path, rec)
            rows.append(rec)
    table = {}
    for label in sorted(plan.chains):
        ok = [r for r in rows if r["label"] == label and r["status"] == "ok"]
        table[label] = {"psnr": float(np.mean([r["psnr"] for r in ok])) if ok else float("nan"),
                        "dssim": float(np.mean([r["dssim"] for r in ok])) if ok else float("nan"),
                        "runs": len(ok), "failed": sum(1 for r in rows if r["label"] == label) - len(ok)}
    with open(out / "runs.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["label", "seed", "status", "psnr", "dssim"])
        for r in rows:
            wr.writerow([r["label"], r["seed"], r["status"], r.get("psnr", ""), r.get("dssim", "")])
    labels = sorted(table)
    with open(out / "table.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["metric"] + labels)
        wr.writerow(["PSNR"] + [table[k]["psnr"] for k in labels])
        wr.writerow(["DSSIM"] + [table[k]["dssim"] for k in labels])
    _write_json(out / "table.json", table)
    return table


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    spec = SceneSpec.load(args.spec) if args.spec else SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    cs, m = synth_scene(spec, args.out)
    print(f"wrote {len(cs)} components and {len(m.frames)} frames to {args.out}")
    return 0


def cmd_degrade(args) -> int:
    m = load_manifest(args.inp)
    spec = DegradationSpec(kind=DegradationKind(args.kind), fraction=args.fraction, target_fps=args.target_fps,
                           target_sparsity=args.target_sparsity, seed=args.seed)
    out = spec.apply(m)
    save_manifest(args.out, out)
    print(f"{len(out.frames)} of {len(m.frames)} frames kept; wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    m = load_manifest(args.manifest)
    d = _read_json(args.config) if args.config else {}
    if args.kernel:
        d["kernel"] = args.kernel
    for flag in ("baseline", "no_confidence", "no_higher_order"):
        if getattr(args, flag):
            d[flag] = True
    if args.iterations is not None:
        d["iterations"] = args.iterations
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = TrainConfig.from_dict(d)
    cs, records = train(m, cfg)
    meta = {"train_config": cfg.to_dict(), "manifest": str(Path(args.manifest).resolve()),
            "degradations": m.metadata.get("degradations", []),
            "cameras": [c.to_dict() for c in m.cameras]}
    save_scene(args.out, cs, meta)
    with open(str(args.out) + ".log.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    print(f"trained {len(cs)} components for {cfg.iterations} iterations; wrote {args.out}")
    return 0


def _find_camera(args, meta: dict) -> CameraModel:
    if args.manifest:
        return load_manifest(args.manifest).camera(args.camera)
    for c in meta.get("cameras", []):
        if int(c["id"]) == args.camera:
            return CameraModel.from_dict(c)
    raise SystemExit(f"camera {args.camera} not found in scene metadata; pass --manifest")


def cmd_render(args) -> int:
    cs = load_scene(args.scene)
    cam = _find_camera(args, load_scene_metadata(args.scene))
    img = render_image(cs, cam, args.time)
    write_image(args.out, quantize(img))
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    cs = load_scene(args.scene)
    m = load_manifest(args.manifest)
    rep = evaluate(cs, m, config={"scene": str(args.scene), "manifest": str(args.manifest),
                                  "scene_metadata": load_scene_metadata(args.scene)})
    rep.save(args.out)
    print(f"PSNR {rep.mean_psnr:.3f} dB  DSSIM {rep.mean_dssim:.5f}  ({len(rep.frames)} frames)")
    return 0


def cmd_plan(args) -> int:
    table = run_plan(ExperimentPlan.load(args.plan), args.out)
    labels = sorted(table)
    print("metric " + " ".join(f"{k:>10s}" for k in labels))
    print("PSNR   " + " ".join(f"{table[k]['psnr']:10.3f}" for k in labels))
    print("DSSIM  " + " ".join(f"{table[k]['dssim']:10.5f}" for k in labels))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphixs", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic ground-truth dataset")
    s.add_argument("--spec", help="scene spec (JSON); defaults to the round-trip scene")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("degrade", help="apply one data-uncertainty transform to a manifest")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--kind", required=True, choices=[k.value for k in DegradationKind])
    s.add_argument("--fraction", type=float, default=0.0)
    s.add_argument("--target-fps", type=float)
    s.add_argument("--target-sparsity", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_degrade)

    s = sub.add_parser("train", help="fit a component set to a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", help="training config (JSON, TrainConfig field names)")
    s.add_argument("--kernel", choices=["gaussian", "student-t"])
    s.add_argument("--baseline", action="store_true")
    s.add_argument("--no-confidence", action="store_true")
    s.add_argument("--no-higher-order", action="store_true")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("render", help="render one camera at one time")
    s.add_argument("--scene", required=True)
    s.add_argument("--camera", type=int, required=True)
    s.add_argument("--time", type=float, required=True)
    s.add_argument("--manifest", help="take the camera from this manifest instead of the scene metadata")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("eval", help="score a scene on the holdout camera")
    s.add_argument("--scene", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("plan", help="run an experiment matrix")
    s.add_argument("--plan", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_plan)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
