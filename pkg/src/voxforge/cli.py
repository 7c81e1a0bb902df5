"""Command line pipeline: scene, train, complete, eval, mesh, bev-dump.

Exit codes: 0 success, 2 I/O or missing input, 3 missing dependency
checkpoint, 4 empty input scans.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("voxforge")

EXIT_IO = 2
EXIT_DEPENDENCY = 3
EXIT_EMPTY = 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_IO):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ configuration

@dataclass
class RunConfig:
    extent: list = field(default_factory=lambda: [9.6, 9.6, 3.2])
    z_origin: float = -0.05
    coarse: dict = field(default_factory=lambda: {"T": 30, "r": 1, "voxel": 0.2, "window": 2, "hidden": 32,
                                                  "steps": 2000, "lr": 5e-4, "clip": 0.5})
    fine: dict = field(default_factory=lambda: {"T": 15, "r": 2, "voxel": 0.1, "hidden": 32, "steps": 1500,
                                                "lambda_z": 1.0, "crop": 32, "lr": 5e-4, "clip": 0.5})
    ae: dict = field(default_factory=lambda: {"k": 8, "steps": 1500, "shapes": 24, "lr": 2e-3})
    planner: dict = field(default_factory=lambda: {"enabled": True, "z_r": 4, "beta_w": 0.1})
    infusion: dict = field(default_factory=lambda: {"a": 0.15, "b": 0.005})
    beams: str = "waymo64"
    noise: bool = True
    n_scans: int = 5
    seed: int = 0
    k: int = 3
    mesh_cell: float = 0.05
    iso: float = 0.5
    tsdf_tau: float = 0.3
    visible_threshold: float = -0.3
    paper_scale: bool = False

    def __post_init__(self):
        if self.paper_scale:
            self.extent = [38.4, 38.4, 8.0]
        dims = self.coarse_dims
        if dims[0] % 3 or dims[1] % 3 or dims[0] % 4 or dims[1] % 4:
            raise ValueError(f"coarse grid {dims[0]}x{dims[1]} must be divisible by 3 and 4")
        if dims[2] % self.planner["z_r"]:
            raise ValueError(f"z_max {dims[2]} not divisible by z_r {self.planner['z_r']}")
        if not np.isclose(self.fine["voxel"] * 2, self.coarse["voxel"]):
            raise ValueError("fine voxel size must be half the coarse voxel size")

    @property
    def coarse_dims(self):
        return tuple(int(round(e / self.coarse["voxel"])) for e in self.extent)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        base = cls().to_dict()
        for key, val in d.items():
            if key not in base:
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(base[key], dict):
                unknown = set(val) - set(base[key])
                if unknown:
                    raise ValueError(f"unknown keys under {key!r}: {sorted(unknown)}")
                base[key].update(val)
            else:
                base[key] = val
        return cls(**base)

    def with_overrides(self, pairs):
        d = self.to_dict()
        for item in pairs or []:
            if "=" not in item:
                raise ValueError(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            parts = key.split(".")
            tgt = d
            for p in parts[:-1]:
                if p not in tgt or not isinstance(tgt[p], dict):
                    raise ValueError(f"unknown config key {key!r}")
                tgt = tgt[p]
            if parts[-1] not in tgt:
                raise ValueError(f"unknown config key {key!r}")
            tgt[parts[-1]] = val
        return RunConfig.from_dict(d)

    def sample_config(self):
        from .dataset import SampleConfig

        return SampleConfig(extent=tuple(self.extent), voxel_size=self.coarse["voxel"], z_origin=self.z_origin,
                            n_scans=self.n_scans, beams=self.beams, noise=self.noise)


@dataclass
class DatasetManifest:
    scenes: list
    config: dict

    def validate(self, root: Path):
        seen = {}
        for rec in self.scenes:
            key = (rec["split"], rec["seed"])
            if key in seen:
                raise CliError(f"seed {rec['seed']} appears twice in split {rec['split']}")
            seen[key] = True
            d = root / rec["dir"]
            for name in [rec["scene_obj"], rec["gt_ply"], "scene.json"] + [s["ply"] for s in rec["scans"]] + \
                    [s["pose"] for s in rec["scans"]]:
                if not (d / name).exists():
                    raise CliError(f"manifest references missing file {d / name}")
        return self

    def to_dict(self):
        return {"scenes": self.scenes, "config": self.config}

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read manifest {path}: {exc}") from None
        return cls(d["scenes"], d.get("config", {})).validate(path.parent)


def parse_seeds(spec: str):
    """``a..b`` (half-open), ``a,b,c`` or a single integer."""
    spec = spec.strip()
    if ".." in spec:
        a, b = spec.split("..", 1)
        a, b = int(a), int(b)
        if b <= a:
            raise ValueError(f"empty seed range {spec!r}")
        return list(range(a, b))
    return [int(s) for s in spec.split(",") if s]


def _set_threads(n):
    n = n or os.environ.get("VOXFORGE_THREADS")
    if not n:
        return
    n = int(n)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ------------------------------------------------------------------ scene records

def _scene_dir(out: Path, seed):
    return out / f"scene_{seed:06d}"


def _write_scene(sample, out: Path, cfg: RunConfig):
    from .io import write_json, write_obj, write_ply

    d = _scene_dir(out, sample.seed)
    d.mkdir(parents=True, exist_ok=True)
    write_obj(d / "scene.obj", sample.scene.mesh.vertices, sample.scene.mesh.triangles)
    write_ply(d / "gt.ply", sample.gt_points)
    scans = []
    for j, (pts, pose) in enumerate(zip(sample.scans, sample.scan_poses)):
        write_ply(d / f"scan_{j}.ply", pts)
        write_json(d / f"scan_{j}.json", {"pose": pose.to_dict(), "beams": cfg.beams, "seed": sample.seed,
                                          "noise": cfg.noise, "index": j})
        scans.append({"ply": f"scan_{j}.ply", "pose": f"scan_{j}.json"})
    lo, hi = sample.roi
    street_lo, street_hi = sample.scene.street_roi(sample.center, cfg.extent[0] / 2)
    street_lo[2], street_hi[2] = lo[2], hi[2]
    write_json(d / "scene.json", {
        "seed": sample.seed, "split": sample.scene.split, "center": sample.center,
        "volume": {"origin": list(sample.volume.origin), "extent": list(sample.volume.extent),
                   "voxel_size": sample.volume.voxel_size},
        "roi": [lo.tolist(), hi.tolist()], "street_roi": [street_lo.tolist(), street_hi.tolist()],
        "resim_poses": [p.to_dict() for p in sample.resim_poses],
        "tsdf_poses": [p.to_dict() for p in sample.tsdf_poses],
    })
    return {"seed": sample.seed, "split": sample.scene.split, "dir": d.name, "scene_obj": "scene.obj",
            "gt_ply": "gt.ply", "scans": scans}


@dataclass
class SceneRecord:
    dir: Path
    meta: dict
    scans: list
    gt_points: np.ndarray

    @property
    def volume(self):
        from .voxgrid import VolumeSpec

        return VolumeSpec(**self.meta["volume"])

    def input_points(self):
        return np.concatenate(self.scans) if self.scans else np.zeros((0, 3))


def load_scene_record(d: Path, with_gt=True) -> SceneRecord:
    from .io import read_ply

    d = Path(d)
    try:
        meta = json.loads((d / "scene.json").read_text())
        scan_files = sorted(d.glob("scan_*.ply"), key=lambda p: int(p.stem.split("_")[1]))
        scans = [read_ply(p) for p in scan_files]
        gt = read_ply(d / "gt.ply") if with_gt else None
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read scene directory {d}: {exc}") from None
    return SceneRecord(d, meta, scans, gt)


def _records(manifest_path, split=None):
    m = DatasetManifest.load(manifest_path)
    root = Path(manifest_path).parent
    return [load_scene_record(root / r["dir"]) for r in m.scenes if split is None or r["split"] == split]


# ------------------------------------------------------------------ commands

def cmd_scene(args, cfg: RunConfig):
    from .dataset import make_sample
    from .io import write_json
    from .lidarsim import split_of

    seeds = parse_seeds(args.seeds)
    splits = {s: split_of(s) for s in seeds}
    if args.split and any(v != args.split for v in splits.values()):
        bad = sorted(s for s, v in splits.items() if v != args.split)
        raise CliError(f"seeds {bad[:5]}... fall outside the {args.split!r} seed range")
    if len(set(splits.values())) > 1:
        raise CliError(f"seed range spans several splits {sorted(set(splits.values()))}; refusing to mix")
    out = Path(args.out)
    scfg = cfg.sample_config()
    scfg.n_scans = args.scans or cfg.n_scans
    try:
        out.mkdir(parents=True, exist_ok=True)
        recs = [_write_scene(make_sample(s, scfg), out, cfg) for s in seeds]
        manifest = DatasetManifest(recs, cfg.to_dict())
        write_json(out / "manifest.json", manifest.to_dict())
    except OSError as exc:
        raise CliError(f"cannot write scenes under {out}: {exc}") from None
    print(f"wrote {len(recs)} scenes to {out}")
    return manifest


def _write_curve(path, curve):
    from .io import write_json

    steps = [int(s) for s, _ in curve]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise RuntimeError("loss curve is not strictly sequenced")
    write_json(path, [{"step": s, "loss": float(l)} for s, l in curve])


def _curve_path(ckpt: Path):
    return ckpt.with_name(ckpt.stem + ".loss.json")


def _load_curve(ckpt: Path):
    p = _curve_path(ckpt)
    if p.exists():
        return [(d["step"], d["loss"]) for d in json.loads(p.read_text())]
    return []


def _coarse_estimator(cfg: RunConfig):
    from .gca import GCACompleter

    c = cfg.coarse
    return GCACompleter(T=c["T"], r=c["r"], window=c["window"], hidden=c["hidden"],
                        use_planner=cfg.planner["enabled"], beta_w=cfg.planner["beta_w"], z_r=cfg.planner["z_r"],
                        lr=c["lr"], clip_norm=c["clip"], n_steps=c["steps"], infusion_a=cfg.infusion["a"],
                        infusion_b=cfg.infusion["b"], seed=cfg.seed)


def cmd_train(args, cfg: RunConfig):
    from .voxgrid import voxelize

    out = Path(args.out)
    ckpt = out if out.suffix else out / f"{args.stage}.ndf"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    stage = args.stage
    if stage == "latent-ae":
        from .implicit import LatentAutoencoder, toy_shape

        shapes = [toy_shape(cfg.seed * 100000 + i) for i in range(cfg.ae["shapes"])]
        if args.resume:
            est = _load_ckpt(LatentAutoencoder, args.resume)
            est.loss_curve_ = _load_curve(Path(args.resume))
            est.partial_fit(shapes, args.steps or cfg.ae["steps"])
        else:
            est = LatentAutoencoder(k=cfg.ae["k"], n_steps=args.steps or cfg.ae["steps"], lr=cfg.ae["lr"],
                                    seed=cfg.seed).fit(shapes)
    else:
        if not args.manifest:
            raise CliError("--manifest is required for this stage")
        recs = _records(args.manifest, "train")
        if not recs:
            raise CliError("manifest has no training scenes")
        if stage == "coarse":
            from .gca import GCACompleter

            X = [voxelize(r.input_points(), r.volume) for r in recs]
            y = [voxelize(r.gt_points, r.volume) for r in recs]
            if args.resume:
                est = _load_ckpt(GCACompleter, args.resume)
                est.loss_curve_ = _load_curve(Path(args.resume))
                est.partial_fit(X, y, args.steps or cfg.coarse["steps"])
            else:
                est = _coarse_estimator(cfg)
                est.n_steps = args.steps or est.n_steps
                est.fit(X, y)
        elif stage == "upsampler":
            from .implicit import ContinuousGCA, LatentAutoencoder, build_initial_fine_state, fine_target

            if not args.ae or not Path(args.ae).exists():
                raise CliError("the upsampler needs a trained latent-ae checkpoint (--ae)", EXIT_DEPENDENCY)
            ae = _load_ckpt(LatentAutoencoder, args.ae).ae_
            X, y = [], []
            for j, r in enumerate(recs):
                gt_c = voxelize(r.gt_points, r.volume)
                x0 = build_initial_fine_state(r.scans, gt_c, ae, rng=np.random.default_rng([cfg.seed, 5, j]))
                X.append(x0)
                y.append(fine_target(r.gt_points, ae, x0.volume, np.random.default_rng([cfg.seed, 6, j])))
            f = cfg.fine
            if args.resume:
                est = _load_ckpt(ContinuousGCA, args.resume)
                est.loss_curve_ = _load_curve(Path(args.resume))
                est.partial_fit(X, y, args.steps or f["steps"])
            else:
                est = ContinuousGCA(T=f["T"], r=f["r"], k=ae.k, hidden=f["hidden"], lambda_z=f["lambda_z"],
                                    lr=f["lr"], clip_norm=f["clip"], n_steps=args.steps or f["steps"],
                                    crop=(f["crop"],) * 3, infusion_a=cfg.infusion["a"],
                                    infusion_b=cfg.infusion["b"], seed=cfg.seed).fit(X, y)
        else:
            raise CliError(f"unknown stage {stage!r}")
    try:
        est.save(ckpt)
        _write_curve(_curve_path(ckpt), est.loss_curve_)
    except OSError as exc:
        raise CliError(f"cannot write checkpoint {ckpt}: {exc}") from None
    print(f"saved {stage} checkpoint to {ckpt}")
    return est


def _load_ckpt(cls, path):
    try:
        return cls.load(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint {path} not found", EXIT_DEPENDENCY) from None
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_DEPENDENCY) from None


def _input_points(args):
    if args.scene:
        rec = load_scene_record(Path(args.scene), with_gt=False)
        return rec.input_points(), rec.volume
    raise CliError("--scene is required")


def cmd_complete(args, cfg: RunConfig):
    from .gca import GCACompleter
    from .io import save_grid, save_latent_grid, write_json, write_obj, write_ply
    from .voxgrid import voxelize

    pts, volume = _input_points(args)
    if len(pts) == 0:
        raise CliError("input scans are empty", EXIT_EMPTY)
    coarse_est = _load_ckpt(GCACompleter, args.coarse)
    s0 = voxelize(pts, volume)
    if len(s0) == 0:
        raise CliError("no input point falls inside the volume", EXIT_EMPTY)
    k = args.k or cfg.k
    full = args.stage != "coarse-only"
    if full:
        from .implicit import (CgcaConfig, ContinuousGCA, LatentAutoencoder, build_initial_fine_state,
                               cgca_rollout, decode_lattice, extract_mesh, surface_points)

        if not args.upsampler or not args.ae:
            raise CliError("full completion needs --upsampler and --ae checkpoints", EXIT_DEPENDENCY)
        fine_est = _load_ckpt(ContinuousGCA, args.upsampler)
        ae = _load_ckpt(LatentAutoencoder, args.ae).ae_
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = []
    for j in range(k):
        seed = cfg.seed * 1000 + j
        seeds.append(seed)
        coarse, _ = coarse_est.rollout(s0, seed)
        save_grid(out / f"coarse_{j}.vxg", coarse)
        if not full:
            write_ply(out / f"coarse_{j}.ply", coarse.centers())
            continue
        x0 = build_initial_fine_state(pts, coarse, ae, rng=np.random.default_rng([seed, 5]))
        fine = cgca_rollout(x0, fine_est.kernel_, CgcaConfig(fine_est.T, fine_est.r, seed, fine_est.mle_last))
        save_latent_grid(out / f"fine_{j}.lat", fine)
        lat = decode_lattice(fine, ae, cfg.mesh_cell)
        mesh = extract_mesh(fine, ae, cfg.mesh_cell, cfg.iso, lattice=lat)
        write_obj(out / f"completion_{j}.obj", mesh.vertices, mesh.triangles)
        write_ply(out / f"surface_{j}.ply", surface_points(fine, cell_size=cfg.mesh_cell, tau=cfg.iso, lattice=lat))
    write_json(out / "complete.json", {"k": k, "seeds": seeds, "stage": args.stage, "scene": str(args.scene),
                                       "config": cfg.to_dict()})
    print(f"wrote {k} completions to {out}")


def cmd_eval(args, cfg: RunConfig):
    from .io import load_grid, read_obj, read_ply
    from .lidarsim import Pose, beam_preset, scan
    from .mesh import TriMesh
    from .metrics import report, tsdf_fuse, visibility_mask
    from .voxgrid import voxelize

    comp_dir = Path(args.completions)
    rec = load_scene_record(Path(args.scene))
    try:
        info = json.loads((comp_dir / "complete.json").read_text())
        k = info["k"]
        coarse = [load_grid(comp_dir / f"coarse_{j}.vxg") for j in range(k)]
        if info.get("stage") == "coarse-only":
            pts = [read_ply(comp_dir / f"coarse_{j}.ply") for j in range(k)]
            meshes = [_cells_mesh(g) for g in coarse]
        else:
            pts = [read_ply(comp_dir / f"surface_{j}.ply") for j in range(k)]
            meshes = [TriMesh(*read_obj(comp_dir / f"completion_{j}.obj")) for j in range(k)]
        gt_mesh = TriMesh(*read_obj(rec.dir / "scene.obj"))
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"missing or unreadable evaluation input: {exc}") from None
    meta = rec.meta
    volume = rec.volume
    poses = [Pose.from_dict(p) for p in meta["resim_poses"]]
    images = [scan(gt_mesh, Pose.from_dict(p), beam_preset(cfg.beams))[0] for p in meta["tsdf_poses"]]
    tsdf = tsdf_fuse(images, volume.with_voxel_size(volume.voxel_size / 2), cfg.tsdf_tau)
    mask = visibility_mask(tsdf, cfg.visible_threshold)
    gt_coarse = voxelize(rec.gt_points, volume)
    roi = tuple(np.asarray(b) for b in meta["roi"])
    street = tuple(np.asarray(b) for b in meta["street_roi"])
    if k < 2:
        log.warning("fewer than two completions: TMD omitted")
    try:
        rep = report(gt_mesh, meshes, poses=poses, roi=roi, gt_coarse=gt_coarse, pred_coarse=coarse, mask=mask,
                     completion_points=pts, gt_points=rec.gt_points, street_roi=street,
                     seeds=info.get("seeds", []),
                     config={"scene": meta["seed"], "beams": cfg.beams, "tsdf_tau": cfg.tsdf_tau,
                             "visible_threshold": cfg.visible_threshold})
    except ValueError as exc:
        raise CliError(f"evaluation failed: {exc}") from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(rep.to_json())
        (out / "report.csv").write_text(rep.to_csv())
    except OSError as exc:
        raise CliError(f"cannot write report under {out}: {exc}") from None
    print(rep.to_json(), end="")
    return rep


def _cells_mesh(grid):
    from .mesh import box_mesh, merge_meshes

    vs = grid.volume.voxel_size
    lo = np.asarray(grid.volume.origin) + grid.cells * vs
    return merge_meshes([box_mesh(a, a + vs) for a in lo]) if len(lo) else box_mesh((0, 0, -1e6), (1e-6,) * 3)


def cmd_mesh(args, cfg: RunConfig):
    from .implicit import LatentAutoencoder, extract_mesh
    from .io import load_latent_grid, write_obj

    ae = _load_ckpt(LatentAutoencoder, args.ae).ae_
    try:
        grid = load_latent_grid(args.grid)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read latent grid {args.grid}: {exc}") from None
    mesh = extract_mesh(grid, ae, args.cell or cfg.mesh_cell, cfg.iso)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_obj(out, mesh.vertices, mesh.triangles)
    print(f"wrote mesh with {len(mesh.vertices)} vertices to {out}")


def cmd_bev_dump(args, cfg: RunConfig):
    from .gca import GCACompleter
    from .planner import bev_pca_dump
    from .voxgrid import voxelize

    est = _load_ckpt(GCACompleter, args.coarse)
    if est.planner_ is None:
        raise CliError("checkpoint has no planner", EXIT_DEPENDENCY)
    pts, volume = _input_points(args)
    if len(pts) == 0:
        raise CliError("input scans are empty", EXIT_EMPTY)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bev_pca_dump(est.planner_(voxelize(pts, volume)).bev, out)
    print(f"wrote {out}")


# ------------------------------------------------------------------ entry point

def build_parser():
    p = argparse.ArgumentParser(prog="voxforge", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", default="out", help="output directory or file")
    p.add_argument("--threads", type=int, help="worker threads (also VOXFORGE_THREADS)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--paper-scale", action="store_true", help="38.4 x 38.4 x 8 m volume")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scene", help="generate scenes, scans and a manifest")
    s.add_argument("--seeds", required=True, help="a..b (half-open), a,b,c or n")
    s.add_argument("--scans", type=int, help="accumulated scans per scene (5 or 10)")
    s.add_argument("--split", choices=["train", "val", "test"])
    s.add_argument("--beams", choices=["waymo64", "eval128", "carla-gt512"])

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("stage", choices=["coarse", "upsampler", "latent-ae"])
    t.add_argument("--manifest")
    t.add_argument("--ae", help="latent-ae checkpoint (upsampler stage)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int)

    c = sub.add_parser("complete", help="complete one scene")
    c.add_argument("--scene", required=True, help="scene directory with scan PLYs")
    c.add_argument("--coarse", required=True)
    c.add_argument("--upsampler")
    c.add_argument("--ae")
    c.add_argument("--k", type=int)
    c.add_argument("--stage", choices=["full", "coarse-only"], default="full")

    e = sub.add_parser("eval", help="score completions against the scene")
    e.add_argument("--completions", required=True)
    e.add_argument("--scene", required=True)

    m = sub.add_parser("mesh", help="mesh a saved latent grid")
    m.add_argument("--grid", required=True)
    m.add_argument("--ae", required=True)
    m.add_argument("--cell", type=float)

    b = sub.add_parser("bev-dump", help="PCA image of the planner BEV feature")
    b.add_argument("--coarse", required=True)
    b.add_argument("--scene", required=True)
    return p


COMMANDS = {"scene": cmd_scene, "train": cmd_train, "complete": cmd_complete, "eval": cmd_eval,
            "mesh": cmd_mesh, "bev-dump": cmd_bev_dump}


def load_config(args) -> RunConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
    cfg = RunConfig.from_dict(d)
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    if args.paper_scale:
        sets.append("paper_scale=true")
    if getattr(args, "beams", None):
        sets.append(f"beams={args.beams}")
    return cfg.with_overrides(sets)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    _set_threads(args.threads)
    try:
        COMMANDS[args.command](args, copy.deepcopy(cfg))
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
