"""Command-line entry point: prepare / train / reenact / evaluate / visualize / bench.

Every command is deterministic given (config, seed); reports are written
as line-delimited JSON plus TSV tables, with matplotlib figures rendered
to files alongside them. Exit codes are nonzero on failure with a
machine-parsable ``error category=...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .core import LatentTable, Mode, Role
from .generator import GeneratorConfig, build_generator
from .losses import RandomConvFeatureExtractor
from .metrics import (
    aed_apd,
    csim,
    fid,
    fid_aligned,
    l1_metric,
    perceptual_metric,
    project_params_2d,
    train_aligned_embedder,
    train_toy_embedder,
)
from .toyworld import (
    DatasetError,
    ToyIdentity,
    fit_toy_estimator,
    load_dataset,
    make_toy_video,
    save_dataset,
)
from .training import (
    TrainConfig,
    infer,
    load_checkpoint,
    sample_auxiliary,
    save_checkpoint,
    select_mode,
    train_stage1,
    train_stage2,
)

EXIT_CODES = {"usage": 2, "data": 3, "state": 4, "internal": 1}


class CLIError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _manifest_extra(dataset_dir) -> dict:
    path = Path(dataset_dir)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text()).get("extra", {})


def _write_effective_config(out_dir: Path, cfg: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _merge_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags; unknown file keys rejected."""
    provided = vars(args)
    merged = dict(defaults)
    cfg_path = provided.pop("config", None)
    if cfg_path is not None:
        try:
            file_cfg = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError("data", f"cannot read config file {cfg_path}: {exc}")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise CLIError("usage", f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    merged.update({k: v for k, v in provided.items() if k in defaults})
    return merged


# ---------------------------------------------------------------------------
# prepare

PREPARE_DEFAULTS = {
    "toy": False,
    "ingest": None,
    "images": None,
    "identity_seed": 0,
    "traj_seed": 0,
    "frames": 64,
    "size": 64,
    "role": "performing",
    "drive": "video_driven",
    "params_only": False,
    "name": None,
    "out": None,
    "force": False,
}


def cmd_prepare(args):
    cfg = _merge_config(PREPARE_DEFAULTS, args)
    if cfg["out"] is None:
        raise CLIError("usage", "prepare requires --out")
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()) and not cfg["force"]:
        raise CLIError("usage", f"output dir {out} is non-empty (use --force)")
    if cfg["toy"] == bool(cfg["ingest"]):
        raise CLIError("usage", "exactly one of --toy / --ingest is required")
    if cfg["toy"]:
        identity = ToyIdentity(cfg["identity_seed"])
        ds = make_toy_video(
            identity,
            n_frames=cfg["frames"],
            param_trajectory_seed=cfg["traj_seed"],
            size=cfg["size"],
            role=Role(cfg["role"]),
            mode=Mode(cfg["drive"]),
            with_images=not cfg["params_only"],
            name=cfg["name"],
        )
        save_dataset(ds, out, extra={"toy_identity_seed": cfg["identity_seed"]})
    else:
        if cfg["images"] is None and not cfg["params_only"]:
            raise CLIError("usage", "--ingest needs --images (or --params-only)")
        ds = _ingest_external(cfg)
        save_dataset(ds, out)
    _write_effective_config(out, cfg)
    print(f"prepared dataset '{ds.name}' with {len(ds)} frames at {out}")
    return 0


def _ingest_external(cfg):
    """Build a dataset from an external tracker's params.jsonl (+ image dir)."""
    import shutil
    import tempfile

    src = Path(cfg["ingest"])
    if not src.exists():
        raise CLIError("data", f"parameter file not found: {src}")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        shutil.copy(src, tmp / "params.jsonl")
        frames_dir = None
        if cfg["images"]:
            shutil.copytree(cfg["images"], tmp / "frames")
            frames_dir = "frames"
        n = sum(1 for line in src.read_text().splitlines() if line.strip())
        manifest = {
            "format_version": 1,
            "name": cfg["name"] or src.stem,
            "role": cfg["role"],
            "mode": cfg["drive"],
            "frame_count": n,
            "resolution": None,
            "params_file": "params.jsonl",
            "frames_dir": frames_dir,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest))
        try:
            return load_dataset(tmp)
        except DatasetError as exc:
            raise CLIError("data", f"ingestion failed: {exc}")


# ---------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = {
    "performing": None,
    "aux": [],
    "driven": None,
    "out": None,
    "stage": "all",
    "mode": "online",
    "k": 0,
    "seed": 0,
    "desk_scale": True,
    "grid": 16,
    "stage1_iters": 2000,
    "stage2_iters": 800,
    "batch": 4,
    "stage1_checkpoint": None,
    "phi_samples": 3000,
    "phi_steps": 3000,
    "phi_cache": None,
}


def _get_phi(identity_seed: int, seed: int, n_samples: int, steps: int, cache_path=None):
    """Fit the toy parameter estimator, reusing a cached fit when offered."""
    from .toyworld import ToyParamEstimator

    if cache_path is not None and Path(cache_path).exists():
        npz = np.load(cache_path)
        if int(npz["identity_seed"]) != identity_seed:
            raise CLIError(
                "data",
                f"phi cache {cache_path} was fitted for identity seed "
                f"{int(npz['identity_seed'])}, not {identity_seed}",
            )
        phi = ToyParamEstimator()
        phi.load_state_dict(
            {k[len("phi/") :]: torch.as_tensor(npz[k]) for k in npz.files if k.startswith("phi/")}
        )
        return phi.freeze()
    phi = fit_toy_estimator(
        ToyIdentity(identity_seed), n_samples=n_samples, seed=seed, steps=steps
    )
    if cache_path is not None:
        arrays = {f"phi/{k}": v.numpy() for k, v in phi.state_dict().items()}
        np.savez(cache_path, identity_seed=np.array(identity_seed), **arrays)
    return phi


def cmd_train(args):
    cfg = _merge_config(TRAIN_DEFAULTS, args)
    if cfg["performing"] is None or cfg["out"] is None:
        raise CLIError("usage", "train requires --performing and --out")
    if cfg["mode"] == "offline" and cfg["driven"] is None:
        raise CLIError("usage", "--mode offline requires --driven")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        performing = load_dataset(cfg["performing"])
        aux_pool = [load_dataset(p) for p in cfg["aux"]]
        driven = load_dataset(cfg["driven"]) if cfg["driven"] else None
    except DatasetError as exc:
        raise CLIError("data", str(exc))

    drive_mode = performing.frames[0].params.mode
    tc = TrainConfig.desk_scale(
        grid_size=cfg["grid"],
        seed=cfg["seed"],
        stage1_iters=cfg["stage1_iters"],
        stage2_iters=cfg["stage2_iters"],
        batch=cfg["batch"],
        mode=cfg["mode"],
        aux_video_count=cfg["k"],
        drive_mode=drive_mode,
    )
    _write_effective_config(out, cfg)

    state = None
    if cfg["stage"] in ("1", "all"):
        state = train_stage1(performing, tc)
        save_checkpoint(state, out / "checkpoint_stage1.npz")
    if cfg["stage"] in ("2", "all"):
        if state is None:
            ckpt = cfg["stage1_checkpoint"] or out / "checkpoint_stage1.npz"
            if not Path(ckpt).exists():
                raise CLIError("state", f"stage 2 needs a stage-1 checkpoint ({ckpt} missing)")
            state = load_checkpoint(ckpt)
        selected = sample_auxiliary(aux_pool, min(cfg["k"], len(aux_pool)), cfg["seed"])
        if cfg["k"] > len(aux_pool):
            raise CLIError("usage", f"--k {cfg['k']} exceeds auxiliary pool size {len(aux_pool)}")
        if driven is not None:
            plan = select_mode(tc, driven, selected)
            selected = plan.auxiliary
        extra = _manifest_extra(cfg["performing"])
        if "toy_identity_seed" not in extra:
            raise CLIError(
                "data",
                "stage 2 needs a parameter estimator; the performing manifest "
                "carries no toy_identity_seed to fit one",
            )
        phi = _get_phi(
            extra["toy_identity_seed"],
            seed=cfg["seed"],
            n_samples=cfg["phi_samples"],
            steps=cfg["phi_steps"],
            cache_path=cfg["phi_cache"],
        )
        state = train_stage2(state, performing, selected, phi)
        save_checkpoint(state, out / "checkpoint_stage2.npz")

    with open(out / "train_log.jsonl", "w") as fh:
        for rec in state.loss_log:
            fh.write(json.dumps(rec) + "\n")
    print(f"training done: stage={cfg['stage']} iterations={state.iteration}")
    return 0


# ---------------------------------------------------------------------------
# reenact

REENACT_DEFAULTS = {
    "checkpoint": None,
    "driven": None,
    "out": None,
    "latent_policy": "zero",
}


def cmd_reenact(args):
    cfg = _merge_config(REENACT_DEFAULTS, args)
    for key in ("checkpoint", "driven", "out"):
        if cfg[key] is None:
            raise CLIError("usage", f"reenact requires --{key.replace('_', '-')}")
    if not Path(cfg["checkpoint"]).exists():
        raise CLIError("state", f"checkpoint not found: {cfg['checkpoint']}")
    state = load_checkpoint(cfg["checkpoint"])
    try:
        driven = load_dataset(cfg["driven"])
    except DatasetError as exc:
        raise CLIError("data", str(exc))
    model_mode = state.config.generator.mode
    if driven.frames and driven.frames[0].params.mode != model_mode:
        raise CLIError(
            "data",
            f"driver mode {driven.frames[0].params.mode.value} does not match "
            f"checkpoint mode {model_mode.value}",
        )
    out = Path(cfg["out"])
    frames = []
    for f in driven.frames:
        key = LatentTable.key(driven.name, f.index)
        try:
            image, _ = infer(
                state,
                f.params,
                latent_policy=cfg["latent_policy"],
                latent_key=key if cfg["latent_policy"] == "lookup" else None,
            )
        except KeyError as exc:
            raise CLIError("state", f"latent lookup failed: {exc}")
        frames.append(type(f)(params=f.params, index=f.index, image=np.clip(image, -1, 1)))
    gen_ds = type(driven)(frames=frames, role=Role.DRIVEN, name=f"{driven.name}_reenacted")
    save_dataset(gen_ds, out)
    _write_effective_config(out, cfg)
    print(f"reenacted {len(frames)} frames -> {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate

EVALUATE_DEFAULTS = {
    "generated": None,
    "reference": None,
    "out": None,
    "metrics": "l1,per,fid,csim",
    "identity_seed": None,
    "embedder_seeds": "0,1,2,3",
    "experiment": "default",
    "phi_cache": None,
}


def compute_metric_report(gen_images, ref_images, metric_names, phi=None, embedder=None,
                          aligned_embedder=None, params_list=None):
    results = {}
    for name in metric_names:
        if name == "l1":
            results["l1"] = l1_metric(gen_images, ref_images)
        elif name == "per":
            results["per"] = perceptual_metric(
                gen_images, ref_images, RandomConvFeatureExtractor(seed=0)
            )
        elif name == "fid":
            results["fid"] = fid(gen_images, ref_images, embedder)
        elif name == "fid_aligned":
            results["fid_aligned"] = fid_aligned(
                gen_images, ref_images, params_list, aligned_embedder
            )
        elif name == "csim":
            results["csim"] = csim(gen_images, ref_images, embedder)
        elif name in ("aed", "apd"):
            if "aed" not in results and "apd" not in results:
                aed, apd = aed_apd(gen_images, ref_images, phi)
                if "aed" in metric_names:
                    results["aed"] = aed
                if "apd" in metric_names:
                    results["apd"] = apd
        else:
            raise CLIError("usage", f"unknown metric {name!r}")
    return results


def cmd_evaluate(args):
    cfg = _merge_config(EVALUATE_DEFAULTS, args)
    for key in ("generated", "reference", "out"):
        if cfg[key] is None:
            raise CLIError("usage", f"evaluate requires --{key}")
    try:
        gen_ds = load_dataset(cfg["generated"])
        ref_ds = load_dataset(cfg["reference"])
    except DatasetError as exc:
        raise CLIError("data", str(exc))
    if len(gen_ds) != len(ref_ds):
        raise CLIError("data", f"unpaired sets: {len(gen_ds)} vs {len(ref_ds)} frames")
    gen_images = [f.image for f in gen_ds.frames]
    ref_images = [f.image for f in ref_ds.frames]
    if any(im is None for im in gen_images + ref_images):
        raise CLIError("data", "both datasets must carry images for evaluation")

    metric_names = [m.strip() for m in cfg["metrics"].split(",") if m.strip()]
    phi = None
    if "aed" in metric_names or "apd" in metric_names:
        if cfg["identity_seed"] is None:
            raise CLIError("usage", "aed/apd metrics need --identity-seed to fit the estimator")
        phi = _get_phi(cfg["identity_seed"], seed=0, n_samples=3000, steps=3000,
                       cache_path=cfg["phi_cache"])
    embedder = None
    if "fid" in metric_names or "csim" in metric_names:
        seeds = tuple(int(s) for s in cfg["embedder_seeds"].split(","))
        embedder = train_toy_embedder(identity_seeds=seeds)
    aligned = None
    if "fid_aligned" in metric_names:
        seeds = tuple(int(s) for s in cfg["embedder_seeds"].split(","))
        aligned = train_aligned_embedder(identity_seeds=seeds)

    results = compute_metric_report(
        gen_images, ref_images, metric_names, phi, embedder,
        aligned_embedder=aligned, params_list=[f.params for f in ref_ds.frames],
    )

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        for name, value in results.items():
            fh.write(json.dumps({"experiment": cfg["experiment"], "metric": name, "value": value}) + "\n")
    with open(out / "metrics.tsv", "w") as fh:
        fh.write("experiment\tmetric\tvalue\n")
        for name, value in results.items():
            fh.write(f"{cfg['experiment']}\t{name}\t{value:.6f}\n")
    table = [f"{'metric':<10}{'value':>12}", "-" * 22]
    table += [f"{k:<10}{v:>12.6f}" for k, v in results.items()]
    (out / "metrics.txt").write_text("\n".join(table) + "\n")

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(list(results.keys()), list(results.values()), color="#4878a8")
    ax.set_ylabel("value")
    ax.set_title(f"metrics: {cfg['experiment']}")
    fig.tight_layout()
    fig.savefig(out / "metrics.png", dpi=120)
    plt.close(fig)
    _write_effective_config(out, cfg)
    print("\n".join(table))
    return 0


def compare_reports(report_a: dict, report_b: dict) -> dict:
    """Ordering verdicts between two metric reports (lower is better except csim)."""
    verdicts = {}
    for name in report_a:
        if name not in report_b:
            continue
        a, b = report_a[name], report_b[name]
        better = a >= b if name == "csim" else a <= b
        verdicts[name] = {"a": a, "b": b, "a_not_worse": bool(better)}
    return verdicts


# ---------------------------------------------------------------------------
# visualize

VISUALIZE_DEFAULTS = {
    "params": [],
    "train_log": None,
    "out": None,
}


def cmd_visualize(args):
    cfg = _merge_config(VISUALIZE_DEFAULTS, args)
    if cfg["out"] is None:
        raise CLIError("usage", "visualize requires --out")
    if not cfg["params"] and cfg["train_log"] is None:
        raise CLIError("usage", "visualize needs --params sets and/or --train-log")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    written = []
    if cfg["params"]:
        sets = {}
        for spec_str in cfg["params"]:
            label, _, path = spec_str.partition("=")
            if not path:
                label, path = Path(spec_str).name, spec_str
            try:
                ds = load_dataset(path)
            except DatasetError as exc:
                raise CLIError("data", str(exc))
            if len(ds) == 0:
                raise CLIError("data", f"dataset {path} is empty")
            sets[label] = [f.params for f in ds.frames]
        for target in ("expression", "pose"):
            points = project_params_2d(sets, target)
            fig, ax = plt.subplots(figsize=(5, 5))
            for label, pts in points.items():
                ax.scatter(pts[:, 0], pts[:, 1], s=12, alpha=0.7, label=label)
            ax.legend()
            ax.set_title(f"{target} coefficients, 2D projection")
            fig.tight_layout()
            path = out / f"scatter_{target}.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)

    if cfg["train_log"]:
        records = [
            json.loads(line)
            for line in Path(cfg["train_log"]).read_text().splitlines()
            if line.strip()
        ]
        if not records:
            raise CLIError("data", f"empty training log {cfg['train_log']}")
        keys = sorted({k for r in records for k in r} - {"iteration", "stage"})
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in keys:
            pts = [(r["iteration"], r[key]) for r in records if key in r]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=key, linewidth=0.8)
        ax.set_xlabel("iteration")
        ax.set_yscale("symlog", linthresh=1e-3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / "loss_curves.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    _write_effective_config(out, cfg)
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


# ---------------------------------------------------------------------------
# bench

BENCH_DEFAULTS = {
    "checkpoint": None,
    "out": None,
    "runs": 100,
    "warmup": 10,
    "paper_resolutions": True,
}


def _time_forward(model, params, latent, runs, warmup):
    times = []
    for i in range(warmup + runs):
        t0 = time.perf_counter()
        model.generate(params, latent)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt * 1000.0)
    return {
        "mean_ms": statistics.fmean(times),
        "median_ms": statistics.median(times),
        "fps": 1000.0 / statistics.fmean(times),
    }


def cmd_bench(args):
    cfg = _merge_config(BENCH_DEFAULTS, args)
    if cfg["checkpoint"] is None or cfg["out"] is None:
        raise CLIError("usage", "bench requires --checkpoint and --out")
    state = load_checkpoint(cfg["checkpoint"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    from .core import FaceParams

    rows = []
    gen_cfg = state.config.generator
    params = _neutral_params(gen_cfg.mode)
    latent = np.zeros(32, dtype=np.float32)
    with torch.no_grad():
        row = _time_forward(state.generator, params, latent, cfg["runs"], cfg["warmup"])
        rows.append({"resolution": gen_cfg.output_size, "source": "checkpoint", **row})
        if cfg["paper_resolutions"]:
            for grid in (64, 128):
                model = build_generator(
                    GeneratorConfig(grid_size=grid, mode=gen_cfg.mode), seed=0
                )
                model.eval()
                row = _time_forward(model, params, latent, max(cfg["runs"] // 10, 3), 2)
                rows.append({"resolution": grid * 4, "source": "paper-scale", **row})

    with open(out / "bench.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    lines = [f"{'resolution':>10} {'source':>12} {'mean_ms':>10} {'median_ms':>10} {'fps':>8}"]
    for r in rows:
        lines.append(
            f"{r['resolution']:>10} {r['source']:>12} {r['mean_ms']:>10.2f} "
            f"{r['median_ms']:>10.2f} {r['fps']:>8.1f}"
        )
    (out / "bench.txt").write_text("\n".join(lines) + "\n")
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(
        [f"{r['resolution']}\n{r['source']}" for r in rows],
        [r["mean_ms"] for r in rows],
        color="#a85448",
    )
    ax.set_ylabel("mean forward ms")
    fig.tight_layout()
    fig.savefig(out / "bench.png", dpi=120)
    plt.close(fig)
    _write_effective_config(out, cfg)
    print("\n".join(lines))
    return 0


def _neutral_params(mode):
    from .core import FaceParams

    if mode == Mode.AUDIO_DRIVEN:
        return FaceParams(
            np.zeros(6), np.zeros(50), np.zeros(2), audio=np.zeros(32), mode=mode
        )
    return FaceParams(np.zeros(6), np.zeros(50), np.zeros(2))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portraitgen")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("prepare", help="generate toy datasets or ingest tracker output")
    p.add_argument("--toy", action="store_true", default=S)
    p.add_argument("--ingest", default=S, help="external params.jsonl to ingest")
    p.add_argument("--images", default=S)
    p.add_argument("--identity-seed", dest="identity_seed", type=int, default=S)
    p.add_argument("--traj-seed", dest="traj_seed", type=int, default=S)
    p.add_argument("--frames", type=int, default=S)
    p.add_argument("--size", type=int, default=S)
    p.add_argument("--role", choices=["performing", "auxiliary", "driven"], default=S)
    p.add_argument("--drive", choices=["video_driven", "audio_driven"], default=S)
    p.add_argument("--params-only", dest="params_only", action="store_true", default=S)
    p.add_argument("--name", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--force", action="store_true", default=S)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run the two-stage training pipeline")
    p.add_argument("--performing", default=S)
    p.add_argument("--aux", action="append", default=S)
    p.add_argument("--driven", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--stage", choices=["1", "2", "all"], default=S)
    p.add_argument("--mode", choices=["online", "offline"], default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--grid", type=int, default=S)
    p.add_argument("--stage1-iters", dest="stage1_iters", type=int, default=S)
    p.add_argument("--stage2-iters", dest="stage2_iters", type=int, default=S)
    p.add_argument("--batch", type=int, default=S)
    p.add_argument("--stage1-checkpoint", dest="stage1_checkpoint", default=S)
    p.add_argument("--phi-samples", dest="phi_samples", type=int, default=S)
    p.add_argument("--phi-steps", dest="phi_steps", type=int, default=S)
    p.add_argument("--phi-cache", dest="phi_cache", default=S)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reenact", help="drive a checkpoint with a parameter sequence")
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--driven", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--latent-policy", dest="latent_policy", choices=["zero", "mean", "lookup"], default=S)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_reenact)

    p = sub.add_parser("evaluate", help="compute metrics between two image sets")
    p.add_argument("--generated", default=S)
    p.add_argument("--reference", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--metrics", default=S)
    p.add_argument("--identity-seed", dest="identity_seed", type=int, default=S)
    p.add_argument("--embedder-seeds", dest="embedder_seeds", default=S)
    p.add_argument("--experiment", default=S)
    p.add_argument("--phi-cache", dest="phi_cache", default=S)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="parameter-space scatter and loss curves")
    p.add_argument("--params", action="append", default=S, help="label=dataset_dir")
    p.add_argument("--train-log", dest="train_log", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("bench", help="inference latency report")
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--runs", type=int, default=S)
    p.add_argument("--warmup", type=int, default=S)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error category={exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error category=internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
