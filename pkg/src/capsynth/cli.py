"""Command-line pipeline: plan views, capture, segment, synthesise, split, evaluate.

Every stage writes into its own directory under the output root together
with the config snapshot it ran with and a short run log. Later stages read
the most recent output of the stage before them.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path

import cv2
import numpy as np

from . import sim
from .config import (
    ConfigError,
    augment_config,
    dump_config,
    load_config,
    output_root,
    synth_config,
    viewplan_config,
)
from .datasetio import DatasetManifest, Label, ManifestEntry, config_digest, read_labels, split_manifest, write_labels
from .evaluation import Detection, evaluate, read_detections
from .geomcore import RigidTransform
from .scenefile import load_scene, save_scene
from .segmentation import (
    SegmentationError,
    extract_cap_pixels,
    fit_annotation_mask,
    hull_crop,
    load_cutout,
    merge_in_hand_frame,
    save_cutout,
    segment_rack,
)
from .sensor import apply_dropout, load_frame, render_frame, save_frame, to_uint8
from .synthesis import (
    image_rng,
    prepare_background,
    resize_cutout,
    synthesize_image,
)
from .viewplan import SceneGeometry, _plan_one, enumerate_grasps, plan_observations, read_poses, sample_rotations, write_poses

log = logging.getLogger("capsynth")

STAGES = ("plan-views", "capture", "segment", "synth", "split", "eval")
STAGE_DIRS = {
    "plan-views": "views",
    "capture": "capture",
    "segment": "segment",
    "synth": "synth",
    "split": "split",
    "eval": "eval",
}


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# stage directories


def _pointer(root: Path, stage: str) -> Path:
    return root / f"{STAGE_DIRS[stage]}.latest"


def new_stage_dir(root: Path, stage: str, overwrite: bool) -> Path:
    base = root / STAGE_DIRS[stage]
    if overwrite:
        if base.exists():
            shutil.rmtree(base)
        path = base
    elif base.exists():
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = root / f"{STAGE_DIRS[stage]}-{stamp}"
    else:
        path = base
    path.mkdir(parents=True)
    _pointer(root, stage).write_text(path.name + "\n", encoding="utf-8")
    return path


def latest_stage_dir(root: Path, stage: str) -> Path:
    ptr = _pointer(root, stage)
    if not ptr.exists():
        raise StageError(f"no output from stage '{stage}' under {root}; run it first")
    path = root / ptr.read_text(encoding="utf-8").strip()
    if (path / "FAILED").exists():
        raise StageError(f"latest '{stage}' output at {path} is marked FAILED")
    return path


class RunLog:
    def __init__(self, path: Path):
        self.path = path
        self.fields: dict = {}

    def set(self, **kw):
        self.fields.update(kw)

    def write(self):
        lines = [f"{k}={v}" for k, v in self.fields.items()]
        self.path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# helpers


def _scene(cfg):
    return load_scene(cfg["scene"]) if cfg.get("scene") else sim.default_scene_file()


def _tubes(cfg):
    by_name = {t.name: t for t in sim.DEFAULT_TUBES}
    out = []
    for name in cfg["capture"]["tubes"]:
        if name not in by_name:
            raise ConfigError(f"unknown tube type {name!r}; known: {sorted(by_name)}")
        out.append(by_name[name])
    return out


def _pose_to_list(pose: RigidTransform) -> list:
    return pose.as_matrix().tolist()


def _pose_from_list(m) -> RigidTransform:
    M = np.asarray(m, dtype=float)
    # re-orthonormalise after the JSON round trip
    U, _, Vt = np.linalg.svd(M[:3, :3])
    return RigidTransform(U @ Vt, M[:3, 3])


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def procedural_backgrounds(n: int, seed: int, size=(256, 256)) -> list[np.ndarray]:
    """Smooth random textures, used when no background folder is configured."""
    out = []
    for k in range(n):
        rng = np.random.default_rng([seed, 3, k])
        img = np.zeros(size)
        for octave in (4, 8, 16, 32):
            coarse = rng.random((octave, octave))
            img += cv2.resize(coarse, size[::-1], interpolation=cv2.INTER_CUBIC) / octave
        img -= img.min()
        img /= max(img.max(), 1e-12)
        out.append(img)
    return out


def load_backgrounds(folder) -> list[np.ndarray]:
    paths = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    imgs = []
    for p in paths:
        img = cv2.imread(str(p), cv2.IMREAD_GRAYSCALE)
        if img is not None:
            imgs.append(img.astype(np.float64) / 255.0)
    if not imgs:
        raise StageError(f"no readable background images in {folder}")
    return imgs


# ---------------------------------------------------------------------------
# stages


def stage_plan_views(cfg, out: Path, runlog: RunLog):
    scene = _scene(cfg)
    if scene.hand_model is None:
        raise StageError("scene has no hand model")
    vcfg = viewplan_config(cfg)
    geom = SceneGeometry(scene.camera.origin, scene.hand_model, scene.arm_links)
    poses = plan_observations(vcfg, geom, camera=scene.camera, workers=int(cfg["viewplan"]["workers"]))
    write_poses(out / "poses.txt", poses)
    save_scene(out / "scene.yaml", scene)
    runlog.set(poses=len(poses), feasible=sum(p.feasible for p in poses))


def stage_capture(cfg, out: Path, runlog: RunLog):
    root = output_root(cfg)
    views = latest_stage_dir(root, "plan-views")
    scene = load_scene(views / "scene.yaml")
    poses = [p for p in read_poses(views / "poses.txt") if p.feasible]
    c = cfg["capture"]
    n_obs = int(c["observations_per_tube"])
    if len(poses) < n_obs:
        log.warning("only %d feasible poses for %d requested observations", len(poses), n_obs)
    vcfg = viewplan_config(cfg)
    geom = SceneGeometry(scene.camera.origin, scene.hand_model, scene.arm_links)
    grasps = enumerate_grasps(vcfg.omega)
    dropout = float(c["dropout"])
    seed = int(cfg["seed"])
    records = []

    for ti, tube in enumerate(_tubes(cfg)):
        rng = np.random.default_rng([seed, 2, ti])
        for k, pose in enumerate(poses[:n_obs]):
            P = pose.hand_pose()
            prims = sim.observation_scene(tube, P, scene.arm_links, table=False) + list(scene.primitives)
            frame = apply_dropout(render_frame(prims, scene.camera), dropout, rng)
            stem = f"frames/{tube.name}/{k:05d}"
            save_frame(out / stem, frame)
            records.append({"kind": "observation", "tube": tube.name, "class_id": tube.class_id,
                            "frame": k, "stem": stem, "hand_pose": _pose_to_list(P)})

        rots = sample_rotations(vcfg)
        n_mask = min(int(c["mask_views"]), len(rots))
        picks = sorted(set(np.linspace(0, len(rots) - 1, n_mask).round().astype(int).tolist()))
        for k, ri in enumerate(picks):
            mp = _plan_one(geom, c["mask_position"], rots[ri], grasps)
            if not mp.feasible:
                continue
            P = mp.hand_pose()
            prims = sim.observation_scene(tube, P, scene.arm_links, table=False) + list(scene.primitives)
            frame = apply_dropout(render_frame(prims, scene.camera), dropout, rng)
            stem = f"mask/{tube.name}/{k:03d}"
            save_frame(out / stem, frame)
            records.append({"kind": "mask", "tube": tube.name, "class_id": tube.class_id,
                            "frame": k, "stem": stem, "hand_pose": _pose_to_list(P)})

    rng = np.random.default_rng([seed, 1])
    for r in range(int(c["racks"])):
        pose = sim.random_rack_pose(rng)
        prims = sim.rack_primitives(pose) + list(scene.primitives)
        frame = render_frame(prims, scene.camera)
        stem = f"racks/{r:03d}"
        save_frame(out / stem, frame)
        records.append({"kind": "rack", "frame": r, "stem": stem, "rack_pose": _pose_to_list(pose)})

    _write_jsonl(out / "frames.jsonl", records)
    save_scene(out / "scene.yaml", scene)
    kinds = [r["kind"] for r in records]
    runlog.set(observations=kinds.count("observation"), mask_views=kinds.count("mask"), racks=kinds.count("rack"))


def stage_segment(cfg, out: Path, runlog: RunLog):
    root = output_root(cfg)
    cap_dir = latest_stage_dir(root, "capture")
    scene = load_scene(cap_dir / "scene.yaml")
    records = _read_jsonl(cap_dir / "frames.jsonl")
    s = cfg["segment"]
    finger_top = scene.finger_top_height if s["finger_top_height"] is None else float(s["finger_top_height"])
    (out / "masks").mkdir()
    n_cut = n_skip = 0

    tubes = sorted({r["tube"] for r in records if r["kind"] != "rack"})
    for name in tubes:
        mask_recs = [r for r in records if r["kind"] == "mask" and r["tube"] == name]
        frames = [load_frame(cap_dir / r["stem"]) for r in mask_recs]
        hand = [_pose_from_list(r["hand_pose"]) for r in mask_recs]
        cloud = merge_in_hand_frame(frames, hand, finger_top, s["max_radius"])
        mask = fit_annotation_mask(cloud, float(s["trim_fraction"]), tuple(s["manual_offset"]))
        (out / "masks" / f"{name}.json").write_text(json.dumps(mask.to_dict(), indent=2), encoding="utf-8")

        for r in records:
            if r["kind"] != "observation" or r["tube"] != name:
                continue
            frame = load_frame(cap_dir / r["stem"])
            P = _pose_from_list(r["hand_pose"])
            pixels = extract_cap_pixels(frame, P, mask)
            if pixels.sum() < int(s["min_cap_pixels"]):
                n_skip += 1
                continue
            cut = hull_crop(frame, pixels, r["class_id"], {"tube": name, "frame": r["frame"], "stem": r["stem"]})
            save_cutout(out / "cutouts" / f"{name}_{r['frame']:05d}", cut)
            n_cut += 1

    n_rack = 0
    (out / "racks").mkdir()
    for r in records:
        if r["kind"] != "rack":
            continue
        frame = load_frame(cap_dir / r["stem"])
        try:
            cut, poly, others = segment_rack(frame, float(s["table_height"]), float(s["rack_band"]))
        except SegmentationError as exc:
            log.warning("rack frame %s skipped: %s", r["stem"], exc)
            continue
        stem = out / "racks" / f"{r['frame']:03d}"
        save_cutout(stem, cut)
        cv2.imwrite(f"{stem}_full.png", to_uint8(frame.gray))
        meta = {"polygon": poly.tolist(), "size": [frame.shape[1], frame.shape[0]],
                "discarded_regions": others, "frame": r["frame"]}
        Path(f"{stem}_rack.json").write_text(json.dumps(meta), encoding="utf-8")
        n_rack += 1
    if n_cut == 0:
        raise StageError("no cap cutouts were segmented")
    if n_rack == 0:
        raise StageError("no rack regions were segmented")
    runlog.set(cutouts=n_cut, skipped=n_skip, racks=n_rack)


_WORKER: dict = {}


def _synth_init(state):
    _WORKER.clear()
    _WORKER.update(state)


def _synth_one(i: int):
    w = _WORKER
    rng = image_rng(w["seed"], i)
    bg = w["racks"][int(rng.integers(len(w["racks"])))]
    img = synthesize_image(bg, w["pool"], w["scfg"], w["acfg"], w["bg_pool"], rng)
    W, H = w["scfg"].canvas
    labels = [Label.from_pixel_box(c, box, W, H) for c, box in img.labels]
    return i, to_uint8(img.image), labels, len(img.instances), img.background_swapped


def stage_synth(cfg, out: Path, runlog: RunLog):
    root = output_root(cfg)
    seg = latest_stage_dir(root, "segment")
    scfg, acfg = synth_config(cfg), augment_config(cfg)
    W, H = scfg.canvas
    s = cfg["synth"]
    seed = int(cfg["seed"])

    racks = []
    frame_size = None
    for meta_path in sorted((seg / "racks").glob("*_rack.json")):
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        stem = str(meta_path)[: -len("_rack.json")]
        gray = cv2.imread(f"{stem}_full.png", cv2.IMREAD_GRAYSCALE).astype(np.float64) / 255.0
        frame_size = tuple(meta["size"])
        racks.append(prepare_background(gray, np.asarray(meta["polygon"]), scfg.canvas,
                                        {"rack": meta["frame"]}))
    if not racks:
        raise StageError(f"no rack backgrounds in {seg}")
    sx, sy = W / frame_size[0], H / frame_size[1]
    pool = [resize_cutout(load_cutout(p.with_suffix("")), sx, sy)
            for p in sorted((seg / "cutouts").glob("*.json"))]
    if s["backgrounds"]:
        bg_pool = load_backgrounds(s["backgrounds"])
    else:
        bg_pool = procedural_backgrounds(int(s["procedural_backgrounds"]), seed)

    (out / "images").mkdir()
    (out / "labels").mkdir()
    count = int(s["count"])
    state = {"seed": seed, "racks": racks, "pool": pool, "scfg": scfg, "acfg": acfg, "bg_pool": bg_pool}
    workers = int(s["workers"])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_synth_init, initargs=(state,)) as ex:
            results = ex.map(_synth_one, range(count), chunksize=4)
            n_inst, n_swap = _write_synth(out, results)
    else:
        _synth_init(state)
        n_inst, n_swap = _write_synth(out, (_synth_one(i) for i in range(count)))

    entries = [ManifestEntry(f"images/{i:06d}.png", f"labels/{i:06d}.txt", "train") for i in range(count)]
    # worker count is scheduling, not a generation parameter
    gen = {k: v for k, v in cfg["synth"].items() if k != "workers"}
    digest = config_digest({"seed": seed, "synth": gen, "augment": cfg["augment"],
                            "inputs": sorted(p.name for p in (seg / "cutouts").glob("*.json"))})
    DatasetManifest(entries, seed, digest).save(out / "manifest.txt")
    runlog.set(images=count, instances=n_inst, background_swaps=n_swap, manifest_digest=digest)


def _write_synth(out: Path, results):
    n_inst = n_swap = 0
    for i, img, labels, k, swapped in results:
        cv2.imwrite(str(out / "images" / f"{i:06d}.png"), img)
        write_labels(out / "labels" / f"{i:06d}.txt", labels)
        n_inst += k
        n_swap += int(swapped)
    return n_inst, n_swap


def stage_split(cfg, out: Path, runlog: RunLog):
    root = output_root(cfg)
    synth_dir = latest_stage_dir(root, "synth")
    manifest = DatasetManifest.load(synth_dir / "manifest.txt")
    ratio = tuple(int(v) for v in cfg["split"]["ratio"])
    split = split_manifest(manifest, ratio, int(cfg["seed"]))
    rel = os.path.relpath(synth_dir, out)
    rebased = DatasetManifest(
        [ManifestEntry(f"{rel}/{e.image}", f"{rel}/{e.label}", e.split) for e in split.entries],
        split.seed,
        split.digest,
    )
    rebased.save(out / "manifest.txt")
    for tag in ("train", "val"):
        lines = [e.image for e in rebased.entries if e.split == tag]
        (out / f"{tag}.txt").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    counts = rebased.counts()
    runlog.set(train=counts["train"], val=counts["val"], ratio=f"{ratio[0]}:{ratio[1]}")


def stage_eval(cfg, out: Path, runlog: RunLog):
    e = cfg["eval"]
    if not e.get("detections"):
        raise StageError("eval.detections is not set")
    dets = read_detections(e["detections"])
    gt_dir = Path(e["ground_truth"]) if e.get("ground_truth") else latest_stage_dir(output_root(cfg), "synth") / "labels"
    W, H = (int(v) for v in cfg["synth"]["canvas"])
    gts = []
    for path in sorted(gt_dir.glob("*.txt")):
        for lab in read_labels(path):
            box = lab.to_pixel_box(W, H)
            if box[2] > box[0] and box[3] > box[1]:
                gts.append(Detection(path.stem, lab.class_id, box, 1.0))
    report = evaluate(dets, gts, float(e["iou_threshold"]))
    names = {t.class_id: t.name for t in sim.DEFAULT_TUBES}
    (out / "report.txt").write_text(report.to_table(names), encoding="utf-8")
    (out / "report.kv").write_text(report.to_keyvalue(), encoding="utf-8")
    runlog.set(detections=len(dets), ground_truth=len(gts), mAP=f"{report.mAP:.6f}")


STAGE_FUNCS = {
    "plan-views": stage_plan_views,
    "capture": stage_capture,
    "segment": stage_segment,
    "synth": stage_synth,
    "split": stage_split,
    "eval": stage_eval,
}


def run_stage(stage: str, cfg: dict, overwrite: bool = False) -> Path:
    root = output_root(cfg)
    root.mkdir(parents=True, exist_ok=True)
    out = new_stage_dir(root, stage, overwrite)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    runlog = RunLog(out / "run.log")
    runlog.set(stage=stage, seed=cfg["seed"], config_digest=config_digest(cfg))
    try:
        STAGE_FUNCS[stage](cfg, out, runlog)
    except Exception as exc:
        (out / "FAILED").write_text("".join(traceback.format_exception(exc)), encoding="utf-8")
        runlog.set(status="failed", error=str(exc).replace("\n", " "))
        runlog.write()
        raise
    runlog.set(status="ok")
    runlog.write()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsynth", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=STAGES + ("all",))
    p.add_argument("--config", required=True, help="pipeline config (YAML)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--count", type=int, help="images for synth, observations per tube for capture")
    p.add_argument("--out", help="output root (default: config, then $CAPSYNTH_OUTPUT, then ./runs)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. synth.T=25")
    p.add_argument("--workers", type=int, help="worker processes for synthesis")
    p.add_argument("--overwrite", action="store_true", help="replace the stage directory in place")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"output_root={args.out}")
    if args.workers is not None:
        overrides.append(f"synth.workers={args.workers}")
    if args.count is not None:
        key = "capture.observations_per_tube" if args.subcommand == "capture" else "synth.count"
        overrides.append(f"{key}={args.count}")
    try:
        cfg = load_config(args.config, overrides)
    except (FileNotFoundError, ConfigError) as exc:
        print(f"capsynth: {exc}", file=sys.stderr)
        return 2

    stages = [s for s in STAGES if s != "eval"] if args.subcommand == "all" else [args.subcommand]
    if args.subcommand == "all" and cfg["eval"].get("detections"):
        stages.append("eval")
    for stage in stages:
        try:
            out = run_stage(stage, cfg, args.overwrite)
        except Exception as exc:
            print(f"capsynth: stage {stage} failed: {exc}", file=sys.stderr)
            return 1
        print(f"{stage}: {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
