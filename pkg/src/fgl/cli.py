"""``fgl`` command-line entry point.

Every command writes its resolved configuration to ``<run-dir>/config.json``
and logs to ``<run-dir>/log.txt``; checkpoints and outputs go under
``checkpoints/`` and ``outputs/``. Exit codes: 0 success, 1 contract or
config error (including unknown commands), 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import datagen, experiments
from .bridge import load_bridge, render_explanation, train_bridge, detect
from .domain import (
    DatasetManifest,
    DistortionSpec,
    ToyConfig,
    load_image,
    save_mask,
    save_scores,
    validate_manifest,
    BinaryMask,
)
from .errors import ConfigError, FGLError
from .flexpert import FLExpert, train_flexpert
from .nn import load_checkpoint

log = logging.getLogger("fgl")

COMMANDS = (
    "synth", "train-flexpert", "train-bridge", "localize", "detect", "explain",
    "eval-loc", "eval-det", "eval-explain", "sweep-robust", "sweep-m", "gradcheck",
    "validate", "ablate",
)

GRANULARITIES = {"fine": datagen.FINE, "medium": datagen.MEDIUM, "coarse": datagen.COARSE}


@dataclass
class RunConfig:
    command: str
    toy: ToyConfig
    run_dir: Path
    seed: int
    jobs: int = 1
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "jobs": self.jobs,
                "run_dir": str(self.run_dir), "config": self.toy.to_dict(), "options": self.options}

    def save(self) -> Path:
        path = self.run_dir / "config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @property
    def checkpoints(self) -> Path:
        return self.run_dir / "checkpoints"

    @property
    def outputs(self) -> Path:
        return self.run_dir / "outputs"


def load_toy_config(path) -> ToyConfig:
    """Read a ToyConfig JSON file; a run's config.json (which nests it under
    ``config``) is accepted too."""
    if path is None:
        return ToyConfig()
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    if "config" in data and isinstance(data["config"], dict):
        data = data["config"]
    cfg = ToyConfig.from_dict(data)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="ToyConfig JSON (or a previous run's config.json)")
    common.add_argument("--seed", type=int, help="overrides rng_seed; all randomness derives from it")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for data generation")
    common.add_argument("--run-dir", help="run directory (default: $FGL_RUN_DIR or runs/<command>)")
    common.add_argument("--precision", choices=["float32", "float64"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fgl", description="Forgery localization, detection and explanation toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    s = cmd("synth", "synthesize a forged/authentic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-forged", type=int, default=6)
    s.add_argument("--n-authentic", type=int, default=6)
    s.add_argument("--types", nargs="+", default=list(datagen.FORGERY_KINDS), choices=datagen.FORGERY_KINDS)
    s.add_argument("--policy", default="none", help="'none', 'default' or a JSON list of distortion specs")
    s.add_argument("--distortion-prob", type=float, default=0.5)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--granularity", choices=sorted(GRANULARITIES), default="medium")
    s.add_argument("--pool-dir", help="directory of PNG/JPEG source images")

    s = cmd("train-flexpert", "train the localization expert")
    s.add_argument("--data", required=True, help="dataset directory or manifest.json")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--out", help="checkpoint path (default: <run-dir>/checkpoints/flexpert.fgl)")

    s = cmd("train-bridge", "jointly fine-tune the expert and train the detection bridge")
    s.add_argument("--data", required=True)
    s.add_argument("--flexpert", required=True, help="FL-Expert checkpoint")
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--mask-source", choices=["predicted", "ground-truth"], default="predicted")
    s.add_argument("--out")

    for name, text in (("localize", "write score maps for images"),
                       ("detect", "authentic/forged verdicts for images"),
                       ("explain", "verdict plus textual explanation for images")):
        s = cmd(name, text)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("images", nargs="+")
    sub.choices["explain"].add_argument("--forgery-type", default="unknown")

    for name in ("eval-loc", "eval-det", "eval-explain", "sweep-robust"):
        s = cmd(name, {"eval-loc": "pixel AUC/F1 on a dataset", "eval-det": "image-level accuracy",
                       "eval-explain": "ROUGE of explanations", "sweep-robust": "AUC under the distortion ladder"}[name])
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
    sub.choices["eval-loc"].add_argument("--tau", type=float, default=0.5)
    sub.choices["eval-loc"].add_argument("--pooled", action="store_true")
    sub.choices["eval-explain"].add_argument("--type-source", choices=["unknown", "oracle"], default="unknown")
    sub.choices["sweep-robust"].add_argument("--ladder", help="JSON list of distortion specs (default: full ladder)")

    s = cmd("sweep-m", "train one expert per object-embedding length")
    s.add_argument("--data", required=True)
    s.add_argument("--m", type=int, nargs="+", default=[4, 12, 24])
    s.add_argument("--epochs", type=int, default=200)

    s = cmd("ablate", "localization (and optionally detection) ablation tables")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--flexpert", help="checkpoint for detection ablations")
    s.add_argument("--bridge-epochs", type=int, default=300)

    s = cmd("gradcheck", "finite-difference audit of FL-Expert and bridge gradients")
    s.add_argument("--order", type=int, choices=[2, 4], default=4)

    s = cmd("validate", "check a dataset manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--no-files", action="store_true", help="skip reading image and mask files")
    return p


# ---------------------------------------------------------------------------
# helpers


def _manifest(path) -> DatasetManifest:
    path = Path(path)
    return DatasetManifest.load(path / "manifest.json" if path.is_dir() else path)


def _specs(text: str) -> list[DistortionSpec]:
    if text == "none":
        return []
    if text == "default":
        return list(datagen.DEFAULT_POLICY)
    src = Path(text).read_text() if Path(text).exists() else text
    try:
        items = json.loads(src)
    except json.JSONDecodeError as e:
        raise ConfigError(f"distortion list is not valid JSON: {e}") from e
    if not isinstance(items, list):
        raise ConfigError("distortion list must be a JSON list")
    return [DistortionSpec.from_dict(d) for d in items]


def _load_models(path):
    """Return (bridge or None, expert) from either checkpoint kind."""
    if not Path(path).exists():
        raise FileNotFoundError(path)
    _, meta = load_checkpoint(path)
    if "use_mask_tokens" in meta:
        return load_bridge(path)
    return None, FLExpert.load(path)


def _need_bridge(path):
    bridge, expert = _load_models(path)
    if bridge is None:
        raise ConfigError(f"{path} is an FL-Expert checkpoint; this command needs a bridge checkpoint")
    return bridge, expert


def _emit(rows, run: RunConfig, name: str):
    csv_path, _ = experiments.write_table(rows, run.outputs / name)
    print(experiments.format_table(rows))
    print(f"wrote {csv_path}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(a, run):
    granularity = GRANULARITIES[a.granularity]
    m = datagen.build_dataset(a.out, a.n_forged, a.n_authentic, seed=run.seed, types=a.types,
                              policy=_specs(a.policy), distortion_prob=a.distortion_prob, size=a.size,
                              granularity=granularity, jobs=run.jobs, pool_dir=a.pool_dir)
    print(f"wrote {len(m)} entries to {Path(a.out) / 'manifest.json'}")


def cmd_train_flexpert(a, run):
    out = Path(a.out) if a.out else run.checkpoints / "flexpert.fgl"
    res = train_flexpert(_manifest(a.data), run.toy, a.epochs, a.batch_size, checkpoint_out=out)
    print(f"final loss {res.losses[-1]:.5f} auc {res.aucs[-1]:.4f}")
    print(f"wrote {out}")


def cmd_train_bridge(a, run):
    out = Path(a.out) if a.out else run.checkpoints / "bridge.fgl"
    expert = FLExpert.load(a.flexpert) if Path(a.flexpert).exists() else a.flexpert
    res = train_bridge(_manifest(a.data), expert, run.toy if a.config else None, a.epochs,
                       mask_source=a.mask_source, checkpoint_out=out)
    print(f"final loss {res.losses[-1]:.5f} accuracy {res.extra['accuracy'][-1]:.4f}")
    print(f"wrote {out}")


def cmd_localize(a, run):
    _, expert = _load_models(a.checkpoint)
    images = [load_image(p) for p in a.images]
    for path, score in zip(a.images, expert.predict(images)):
        stem = run.outputs / Path(path).stem
        save_scores(score, stem)
        save_mask(BinaryMask((score.data >= 0.5).astype(np.uint8)), stem.with_name(stem.name + "_mask.png"))
        print(f"{path}: max score {score.data.max():.4f} -> {stem}.f32")


def cmd_detect(a, run):
    bridge, expert = _need_bridge(a.checkpoint)
    verdicts, _ = detect([load_image(p) for p in a.images], bridge, expert)
    rows = [{"image": p, "verdict": v.verdict, "logits": [float(t) for t in v.logits]} for p, v in zip(a.images, verdicts)]
    for r in rows:
        print(f"{r['image']}: {r['verdict']}")
    (run.outputs / "verdicts.json").write_text(json.dumps(rows, indent=2))


def cmd_explain(a, run):
    bridge, expert = _need_bridge(a.checkpoint)
    verdicts, scores = detect([load_image(p) for p in a.images], bridge, expert)
    rows = []
    for p, v, s in zip(a.images, verdicts, scores):
        verdict = v.verdict if v.verdict == "authentic" or (s.data >= 0.5).any() else "authentic"
        text = render_explanation(verdict, a.forgery_type, s)
        rows.append({"image": p, "verdict": v.verdict, "explanation": text})
        print(f"{p}: {text}")
    (run.outputs / "explanations.json").write_text(json.dumps(rows, indent=2))


def cmd_eval_loc(a, run):
    _, expert = _load_models(a.checkpoint)
    res = experiments.evaluate_expert(expert, _manifest(a.data), a.tau, a.pooled)
    summary = {"mean_pixel_auc": res.mean_auc, "mean_pixel_f1": res.mean_f1, "n_images": len(res.per_image)}
    if a.pooled:
        summary.update(pooled_pixel_auc=res.pooled_auc, pooled_pixel_f1=res.pooled_f1)
    print(json.dumps(summary, indent=2))
    (run.outputs / "localization.json").write_text(json.dumps({"summary": summary, "per_image": res.per_image}, indent=2))
    experiments.write_table(res.per_image, run.outputs / "localization_per_image")


def cmd_eval_det(a, run):
    bridge, expert = _need_bridge(a.checkpoint)
    res = experiments.evaluate_detection(bridge, expert, _manifest(a.data))
    print(f"accuracy {res['accuracy']:.4f}")
    (run.outputs / "detection.json").write_text(json.dumps(res, indent=2))


def cmd_eval_explain(a, run):
    bridge, expert = _need_bridge(a.checkpoint)
    res = experiments.evaluate_explanations(bridge, expert, _manifest(a.data), a.type_source)
    print(json.dumps(res["summary"], indent=2))
    (run.outputs / "explanations.json").write_text(json.dumps(res, indent=2))


def cmd_sweep_robust(a, run):
    _, expert = _load_models(a.checkpoint)
    ladder = _specs(a.ladder) if a.ladder else list(datagen.ROBUSTNESS_LADDER)
    _emit(experiments.robustness_sweep(expert, _manifest(a.data), ladder), run, "robustness")


def cmd_sweep_m(a, run):
    _emit(experiments.embed_size_sweep(_manifest(a.data), a.m, run.toy, a.epochs), run, "embed_size")


def cmd_ablate(a, run):
    m = _manifest(a.data)
    _emit(experiments.run_localization_ablations(m, run.toy, a.epochs), run, "ablation_localization")
    if a.flexpert:
        _emit(experiments.run_detection_ablations(m, a.flexpert, run.toy, a.bridge_epochs), run, "ablation_detection")


def cmd_gradcheck(a, run):
    t0 = time.perf_counter()
    reports = experiments.gradient_audit(run.toy, run.seed, order=a.order)
    worst = max(r.max_relative_error for r in reports.values())
    for name, r in reports.items():
        print(f"{name}: {r.summary()}")
    passed = all(r.passed for r in reports.values())
    print(f"max relative error {worst:.3e} {'PASS' if passed else 'FAIL'} (tol 1e-4, {time.perf_counter() - t0:.1f}s)")
    out = {name: {"max_relative_error": r.max_relative_error, "per_parameter": r.per_parameter} for name, r in reports.items()}
    (run.outputs / "gradcheck.json").write_text(json.dumps(out, indent=2))
    return 0 if passed else 1


def cmd_validate(a, run):
    problems = validate_manifest(_manifest(a.manifest), check_files=not a.no_files)
    for p in problems:
        print(p)
    print(f"{len(problems)} violations")
    return 0 if not problems else 1


HANDLERS = {
    "synth": cmd_synth, "train-flexpert": cmd_train_flexpert, "train-bridge": cmd_train_bridge,
    "localize": cmd_localize, "detect": cmd_detect, "explain": cmd_explain, "eval-loc": cmd_eval_loc,
    "eval-det": cmd_eval_det, "eval-explain": cmd_eval_explain, "sweep-robust": cmd_sweep_robust,
    "sweep-m": cmd_sweep_m, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "validate": cmd_validate,
}


def _setup_run(a) -> RunConfig:
    toy = load_toy_config(a.config)
    if a.seed is not None:
        toy = toy.replace(rng_seed=a.seed)
    if a.precision:
        toy = toy.replace(precision=a.precision)
    toy.validate()
    run_dir = Path(a.run_dir or os.environ.get("FGL_RUN_DIR") or Path("runs") / a.command)
    for sub in ("", "checkpoints", "outputs"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    skip = {"config", "seed", "jobs", "run_dir", "precision", "verbose", "command"}
    options = {k: v for k, v in vars(a).items() if k not in skip}
    run = RunConfig(a.command, toy, run_dir, toy.rng_seed, a.jobs, options)
    run.save()
    handler = logging.FileHandler(run_dir / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler, logging.StreamHandler()]
    root.handlers[1].setLevel(logging.INFO if a.verbose else logging.WARNING)
    root.setLevel(logging.INFO)
    return run


def dispatch(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if a.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        run = _setup_run(a)
        torch.manual_seed(run.seed)
        code = HANDLERS[a.command](a, run)
        return 0 if code is None else code
    except FGLError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    finally:
        for h in logging.getLogger().handlers:
            if isinstance(h, logging.FileHandler):
                h.close()


def main() -> None:
    sys.exit(dispatch())
