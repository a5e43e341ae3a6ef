"""``rankcount`` command line: data generation, pretraining, probing and evaluation.

Stages talk to each other only through files under ``<root>/<run-name>/``.
The root comes from ``--root``, else ``$RANKCOUNT_ROOT``, else ``./runs``.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import file_digest, load_probe, load_rank_model, save_probe, save_rank_model
from .config import ConfigError, RunConfig, artifact_root, load_config, parse_assignment, show_config
from .datasets import (
    AugmentationConfig,
    DatasetManifest,
    ManifestRecord,
    SplitConfig,
    load_manifest,
    load_point_annotations,
    read_image,
    split,
    write_image,
    write_noisy_manifest,
    write_point_annotations,
    write_ranking_manifest,
)
from .encoders import EncoderConfig
from .evaluation import evaluate, infer_image, patch_sweep, rank_diagnostics
from .exceptions import DataValidationError, RankCountError
from .probe import fit_probe
from .ranking import TrainConfig, train_ranker
from .synth import (
    PromptSpec,
    diffusion_generate,
    load_backend,
    make_noisy_count_dataset,
    make_ranking_dataset,
    render_scene,
    sample_source_scenes,
    source_name,
)

PIPELINE = ("generate-ranking", "generate-noisy", "pretrain", "probe", "evaluate")


class StageError(Exception):
    def __init__(self, stage: str, exit_code: int, message: str):
        super().__init__(message)
        self.stage = stage
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors exit 1; 2 is reserved for data validation
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class Layout:
    run_dir: Path

    @property
    def ranking(self) -> Path:
        return self.run_dir / "ranking" / "manifest.jsonl"

    @property
    def test_labels(self) -> Path:
        return self.run_dir / "test" / "annotations.json"

    @property
    def noisy(self) -> Path:
        return self.run_dir / "noisy" / "manifest.jsonl"

    @property
    def rank_checkpoint(self) -> Path:
        return self.run_dir / "checkpoints" / "rank.pt"

    @property
    def probe_checkpoint(self) -> Path:
        return self.run_dir / "checkpoints" / "probe.pt"

    @property
    def report(self) -> Path:
        return self.run_dir / "reports" / "metrics.json"

    @property
    def diagnostics(self) -> Path:
        return self.run_dir / "reports" / "diagnostics.json"

    @property
    def features(self) -> Path:
        return self.run_dir / "reports" / "features.csv"

    @property
    def sweep(self) -> Path:
        return self.run_dir / "reports" / "sweep.json"


def _say(stage: str, msg: str) -> None:
    print(f"[{stage}] {msg}", flush=True)


def _write_provenance(directory: Path, cfg: RunConfig, stage: str, artifacts: Sequence[str]) -> None:
    digests = {name: file_digest(directory / name) for name in artifacts}
    body = {"stage": stage, "config": cfg.to_dict(), "sha256": digests}
    (directory / "provenance.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _backend(cfg: RunConfig) -> Optional[str]:
    """Name of an external generator, or None for the built-in toy renderer."""
    d = cfg.section("diffusion")
    if d["backend"] == "toy":
        return None
    if d["entry_point"]:
        load_backend(d["backend"], d["entry_point"])
    return d["backend"]


def _prompt(cfg: RunConfig, prompt: str, negative: str, seed: int) -> PromptSpec:
    d = cfg.section("diffusion")
    return PromptSpec(prompt, negative, d["strength"], d["guidance_scale"], d["steps"], seed)


# ---------------------------------------------------------------------------
# stages


def stage_generate_ranking(cfg: RunConfig, out: Path, test_out: Path) -> Path:
    d = cfg.section("data")
    size = dict(width=d["image_width"], height=d["image_height"])
    sources = sample_source_scenes(d["n_sources"], cfg.stage_seed("sources"), d["max_count"],
                                   max_distractors=d["max_distractors"], **size)
    backend = _backend(cfg)
    out_dir = out.parent
    if backend is None:
        pairs = make_ranking_dataset(sources, d["variants_per_source"], tuple(d["removal_range"]),
                                     cfg.stage_seed("removal"))
        write_ranking_manifest(pairs, out_dir, out.name)
        n_syn = len(pairs)
    else:
        diff = cfg.section("diffusion")
        rng = np.random.default_rng(cfg.stage_seed("removal"))
        records = []
        for i, spec in enumerate(sources):
            sid = source_name(i)
            real = render_scene(spec, sid)
            write_image(real.pixels, out_dir / f"images/{sid}_real.png")
            records.append(ManifestRecord(f"{sid}_real", "rank_real", f"images/{sid}_real.png",
                                          spec.count, pair_id=sid))
            for v in range(d["variants_per_source"]):
                prompt = _prompt(cfg, diff["ranking_prompt"], diff["ranking_negative_prompt"],
                                 int(rng.integers(2**31)))
                syn = diffusion_generate(real, prompt, backend)
                rel = f"images/{sid}_v{v}.png"
                write_image(syn.pixels, out_dir / rel)
                records.append(ManifestRecord(f"{sid}_v{v}", "rank_syn", rel, None, pair_id=sid))
        DatasetManifest(tuple(records), out_dir).write(out)
        n_syn = len(records) - len(sources)
    _write_provenance(out_dir, cfg, "generate-ranking", [out.name])

    test_dir = test_out.parent
    scenes = sample_source_scenes(d["n_test"], cfg.stage_seed("test"), d["max_count"],
                                  max_distractors=d["max_distractors"], **size)
    items = []
    for j, spec in enumerate(scenes):
        rel = f"images/test{j:05d}.png"
        write_image(render_scene(spec).pixels, test_dir / rel)
        items.append((rel, [(p.x, p.y) for p in spec.pedestrians]))
    write_point_annotations(items, test_out)
    _write_provenance(test_dir, cfg, "generate-ranking", [test_out.name])
    _say("generate-ranking", f"{len(sources)} sources, {n_syn} synthetic variants -> {out}")
    _say("generate-ranking", f"{len(scenes)} held-out test scenes -> {test_out}")
    return out


def stage_generate_noisy(cfg: RunConfig, out: Path) -> Path:
    d = cfg.section("data")
    backend = _backend(cfg)
    seed = cfg.stage_seed("noisy")
    if backend is None:
        examples = make_noisy_count_dataset(d["noisy_counts"], d["per_count"], d["empty_scenes"],
                                            d["noise_sigma"], seed, d["image_width"],
                                            d["image_height"], d["noisy_max_distractors"])
        manifest = write_noisy_manifest(examples, out.parent, out.name)
    else:
        diff = cfg.section("diffusion")
        rng = np.random.default_rng(seed)
        prompts = [c for c in d["noisy_counts"] for _ in range(d["per_count"])] + [0] * d["empty_scenes"]
        records = []
        for j, c in enumerate(prompts):
            text, neg = ((diff["count_prompt"].format(N=c), diff["count_negative_prompt"]) if c
                         else (diff["empty_prompt"], diff["empty_negative_prompt"]))
            im = diffusion_generate(None, _prompt(cfg, text, neg, int(rng.integers(2**31))), backend)
            rel = f"images/noisy{j:05d}.png"
            write_image(im.pixels, out.parent / rel)
            records.append(ManifestRecord(f"noisy{j:05d}", "noisy", rel, None, prompt_count=int(c)))
        manifest = DatasetManifest(tuple(records), out.parent)
        manifest.write(out)
    _write_provenance(out.parent, cfg, "generate-noisy", [out.name])
    _say("generate-noisy", f"{len(manifest)} prompt-count images -> {out}")
    return out


def stage_pretrain(cfg: RunConfig, train_manifest: Path, out: Path) -> Path:
    manifest = load_manifest(train_manifest)
    train, val = split(manifest, SplitConfig(cfg.get("split.validation_fraction"),
                                             cfg.stage_seed("split")))
    enc = cfg.section("encoder")
    enc_cfg = EncoderConfig(enc["architecture"], enc["feature_dim"], tuple(enc["input_size"]),
                            enc["backbone_weights"])
    p = cfg.section("pretrain")
    train_cfg = TrainConfig(p["epochs"], p["learning_rate"], p["batch_size"], cfg.stage_seed("pretrain"))
    a = cfg.section("augment")
    aug = AugmentationConfig(a["horizontal_flip_prob"], a["brightness_jitter"])
    _say("pretrain", f"{len(train.pairs())} training pairs, {len(val.pairs())} validation pairs")

    def progress(epoch, loss, acc):
        _say("pretrain", f"epoch {epoch}: loss {loss:.4f}, val accuracy {acc:.4f}")

    model = train_ranker(train, val, enc_cfg, train_cfg, aug, on_epoch=progress)
    save_rank_model(model, out, cfg.to_dict(), {"train_manifest": file_digest(train_manifest)})
    _say("pretrain", f"selected epoch {model.epoch} (val accuracy {model.val_accuracy}) -> {out}")
    return out


def stage_probe(cfg: RunConfig, rank_checkpoint: Path, noisy_manifest: Path, out: Path) -> Path:
    rank = load_rank_model(rank_checkpoint)
    noisy = load_manifest(noisy_manifest)
    p = cfg.section("probe")
    train_cfg = TrainConfig(p["epochs"], p["learning_rate"], p["batch_size"], cfg.stage_seed("probe"))
    probe = fit_probe(rank, noisy, train_cfg, rank_digest=file_digest(rank_checkpoint))
    save_probe(probe, out, rank_checkpoint, cfg.to_dict(),
               {"noisy_manifest": file_digest(noisy_manifest)})
    _say("probe", f"final training loss {probe.history[-1]:.3f} -> {out}")
    return out


def _labeled(labels: Path):
    entries = load_point_annotations(labels)
    labeled = [(read_image(path), count) for path, count in entries]
    return labeled, [im.source_id for im, _ in labeled]


def _digests(probe_path: Path, probe, labels: Path) -> dict:
    return {"rank": probe.rank_digest, "probe": file_digest(probe_path), "labels": file_digest(labels)}


def stage_evaluate(cfg: RunConfig, probe_path: Path, labels: Path, k: int, out: Path,
                   features: Path, diagnostics: Path) -> Path:
    probe = load_probe(probe_path)
    labeled, ids = _labeled(labels)
    digests = _digests(probe_path, probe, labels)
    report = evaluate(probe, labeled, k, ids, model_digests=digests, config=cfg.to_dict())
    report.write(out)
    diag = rank_diagnostics(probe.rank_model, labeled, features, ids)
    diagnostics.write_text(json.dumps({
        "spearman": diag.spearman,
        "pairwise_accuracy": diag.pairwise_accuracy,
        "n_images": len(labeled),
        "model_digests": digests,
        "config": cfg.to_dict(),
    }, indent=2, sort_keys=True) + "\n")
    _say("evaluate", f"k={k} MAE {report.mae:.3f} MSE {report.mse:.3f} -> {out}")
    _say("evaluate", f"proxy/true Spearman {diag.spearman} -> {diagnostics}")
    return out


def stage_sweep(cfg: RunConfig, probe_path: Path, labels: Path, ks, out: Path) -> Path:
    probe = load_probe(probe_path)
    labeled, ids = _labeled(labels)
    table = patch_sweep(probe, labeled, ks, ids)
    table.write(out)
    print(table.to_text(), end="")
    return out


def stage_infer(cfg: RunConfig, probe_path: Path, images, k: int) -> None:
    probe = load_probe(probe_path)
    for path in images:
        print(f"{path}\t{infer_image(probe, read_image(path), k):.3f}")


# ---------------------------------------------------------------------------
# argument handling


def _run(stage: str, fn: Callable, *args):
    try:
        return fn(*args)
    except RankCountError as exc:
        raise StageError(stage, exc.exit_code, f"{type(exc).__name__}: {exc}") from exc
    except (FileNotFoundError, ValueError) as exc:
        raise StageError(stage, DataValidationError.exit_code, f"{type(exc).__name__}: {exc}") from exc
    except FloatingPointError as exc:
        raise StageError(stage, 3, f"{type(exc).__name__}: {exc}") from exc


def _ks(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("patch sizes must be positive integers")
    return ks


# flag dest -> config key
_CONFIG_FLAGS = {
    "seed": "seed",
    "n_sources": "data.n_sources",
    "variants": "data.variants_per_source",
    "max_count": "data.max_count",
    "n_test": "data.n_test",
    "noise_sigma": "data.noise_sigma",
    "per_count": "data.per_count",
    "empty_scenes": "data.empty_scenes",
    "val_fraction": "split.validation_fraction",
    "epochs": None,  # section depends on the subcommand
    "lr": None,
    "batch_size": None,
    "patch_k": "evaluate.patch_k",
    "ks": "evaluate.sweep_ks",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file")
    common.add_argument("--seed", type=int, help="master seed for every stochastic stage")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set pretrain.epochs=10")
    common.add_argument("--run-name", default="default", help="run directory name (default: default)")
    common.add_argument("--root", help="artifact root (default: $RANKCOUNT_ROOT or ./runs)")

    parser = _Parser(prog="rankcount", description="Rank-pretrained crowd counting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-ranking", parents=[common], help="source scenes, removal pairs, test set")
    p.add_argument("--n-sources", type=int)
    p.add_argument("--variants", type=int)
    p.add_argument("--max-count", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--out", type=Path, help="ranking manifest path")
    p.add_argument("--test-out", type=Path, help="test annotation JSON path")

    p = sub.add_parser("generate-noisy", parents=[common], help="prompt-count images")
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--per-count", type=int)
    p.add_argument("--empty-scenes", type=int)
    p.add_argument("--out", type=Path, help="noisy manifest path")

    p = sub.add_parser("pretrain", parents=[common], help="train the rank model")
    p.add_argument("--train-manifest", type=Path)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", type=Path, help="rank checkpoint path")

    p = sub.add_parser("probe", parents=[common], help="fit the linear count probe")
    p.add_argument("--rank-checkpoint", type=Path)
    p.add_argument("--noisy-manifest", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", type=Path, help="probe checkpoint path")

    p = sub.add_parser("infer", parents=[common], help="count people in images")
    p.add_argument("--probe", type=Path)
    p.add_argument("--patch-k", type=int)
    p.add_argument("images", nargs="+", type=Path)

    p = sub.add_parser("evaluate", parents=[common], help="MAE/MSE and ranking diagnostics")
    p.add_argument("--probe", type=Path)
    p.add_argument("--labels", type=Path, help="point-annotation JSON")
    p.add_argument("--patch-k", type=int)
    p.add_argument("--out", type=Path, help="metrics report path")

    p = sub.add_parser("sweep", parents=[common], help="evaluate over several patch grids")
    p.add_argument("--probe", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--ks", type=_ks, help="comma-separated grid sizes, e.g. 1,2,3,4")
    p.add_argument("--out", type=Path, help="sweep table path")

    p = sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    p.add_argument("--force", action="store_true", help="rerun stages whose outputs exist")

    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    flags = {}
    for text in args.set:
        key, value = parse_assignment(text)
        flags[key] = value
    section = {"pretrain": "pretrain", "probe": "probe"}.get(args.command)
    for dest, key in _CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if key is None:
            if section is None:
                continue
            key = f"{section}.{'learning_rate' if dest == 'lr' else dest}"
        flags[key] = value
    return load_config(args.config, flags)


def run_pipeline(cfg: RunConfig, layout: Layout, force: bool = False) -> dict:
    """Run every stage whose output is missing (all of them with ``force``)."""
    e = cfg.section("evaluate")
    steps = {
        "generate-ranking": (layout.test_labels, lambda: stage_generate_ranking(cfg, layout.ranking, layout.test_labels)),
        "generate-noisy": (layout.noisy, lambda: stage_generate_noisy(cfg, layout.noisy)),
        "pretrain": (layout.rank_checkpoint, lambda: stage_pretrain(cfg, layout.ranking, layout.rank_checkpoint)),
        "probe": (layout.probe_checkpoint, lambda: stage_probe(cfg, layout.rank_checkpoint, layout.noisy,
                                                               layout.probe_checkpoint)),
        "evaluate": (layout.report, lambda: stage_evaluate(cfg, layout.probe_checkpoint, layout.test_labels,
                                                           e["patch_k"], layout.report, layout.features,
                                                           layout.diagnostics)),
    }
    done = {}
    for stage in PIPELINE:
        target, fn = steps[stage]
        if target.exists() and not force:
            _say(stage, f"skipped, {target} exists")
        else:
            _run(stage, fn)
        done[stage] = target
    return done


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _run("config", resolve_config, args)
    except StageError as exc:
        code = exc.exit_code if isinstance(exc.__cause__, RankCountError) else ConfigError.exit_code
        print(f"rankcount: [config] {exc}", file=sys.stderr)
        return code
    layout = Layout(artifact_root(args.root) / args.run_name)
    e = cfg.section("evaluate")
    cmd = args.command
    try:
        if cmd == "show-config":
            print(show_config(cfg), end="")
        elif cmd == "pipeline":
            run_pipeline(cfg, layout, args.force)
        elif cmd == "generate-ranking":
            _run(cmd, stage_generate_ranking, cfg, args.out or layout.ranking,
                 args.test_out or layout.test_labels)
        elif cmd == "generate-noisy":
            _run(cmd, stage_generate_noisy, cfg, args.out or layout.noisy)
        elif cmd == "pretrain":
            _run(cmd, stage_pretrain, cfg, args.train_manifest or layout.ranking,
                 args.out or layout.rank_checkpoint)
        elif cmd == "probe":
            _run(cmd, stage_probe, cfg, args.rank_checkpoint or layout.rank_checkpoint,
                 args.noisy_manifest or layout.noisy, args.out or layout.probe_checkpoint)
        elif cmd == "infer":
            _run(cmd, stage_infer, cfg, args.probe or layout.probe_checkpoint, args.images, e["patch_k"])
        elif cmd == "evaluate":
            out = args.out or layout.report
            _run(cmd, stage_evaluate, cfg, args.probe or layout.probe_checkpoint,
                 args.labels or layout.test_labels, e["patch_k"], out,
                 out.parent / "features.csv", out.parent / "diagnostics.json")
        elif cmd == "sweep":
            _run(cmd, stage_sweep, cfg, args.probe or layout.probe_checkpoint,
                 args.labels or layout.test_labels, e["sweep_ks"], args.out or layout.sweep)
    except StageError as exc:
        print(f"rankcount: [{exc.stage}] {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
