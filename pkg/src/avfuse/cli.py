"""Command-line surface: synth, train, eval, infer, gradcheck.

A run is configured by an optional JSON config file plus flag overrides
(file < flags); the fully resolved configuration is echoed next to every
artifact the command writes.  Exit codes: 0 success, 1 validation error,
2 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import data, frontend, inference, metrics, model, numerics, training
from .errors import AvfuseError, ConfigError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse usage problems are validation errors
        raise ValidationError(message)


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f.name for f in dataclass_fields(model.ModelConfig)} - {"vocab_size"}
_TRAIN_KEYS = {f.name for f in dataclass_fields(training.TrainConfig)}
_TOP_KEYS = {"train_manifest", "val_manifest", "out_dir", "seed", "model", "train", "min_count"}


def load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    problems = []
    for key in cfg:
        if key not in _TOP_KEYS:
            problems.append(f"{path}: unknown config key {key!r}")
    for section, allowed in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS)):
        for key in cfg.get(section, {}):
            if key not in allowed:
                problems.append(f"{path}: unknown {section} config key {key!r}")
    if problems:
        raise ValidationError(problems)
    return cfg


def _apply_overrides(cfg: dict, args, mapping: dict[str, tuple[str, str]]) -> dict:
    """Merge CLI flags over the file config. mapping: flag attr -> (section, key)."""
    out = {"model": dict(cfg.get("model", {})), "train": dict(cfg.get("train", {}))}
    for key in cfg:
        if key not in ("model", "train"):
            out[key] = cfg[key]
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if section is None:
            out[key] = value
        else:
            out[section][key] = value
    return out


def _echo_config(resolved: dict, out_dir: Path | None) -> None:
    text = json.dumps(resolved, indent=2, sort_keys=True)
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.json").write_text(text + "\n", encoding="utf-8")


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("AVFUSE_THREADS", "1")))
    except ValueError:
        return 1


class _DirLock:
    """One process owns one checkpoint directory; stale locks are reclaimed."""

    def __init__(self, directory: Path):
        self.path = directory / ".lock"
        self.acquired = False

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            try:
                owner = int(self.path.read_text().strip())
                os.kill(owner, 0)
                alive = True
            except (ValueError, ProcessLookupError, PermissionError):
                alive = False
            if alive:
                raise ValidationError(
                    f"checkpoint directory {self.path.parent} is locked by pid {owner}"
                )
            self.path.unlink()
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self.acquired = True
        return self

    def __exit__(self, *exc):
        if self.acquired:
            try:
                self.path.unlink()
            except FileNotFoundError:
                pass


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise ValidationError(
            f"output directory {out_dir} is not empty; pass --force to overwrite"
        )
    spec = data.SyntheticTaskSpec(
        n_classes=args.classes,
        n_ambiguous_pairs=args.ambiguous_pairs,
        feature_dim=args.feature_dim,
        noise_std=args.noise_std,
        examples_per_class=args.examples_per_class,
        eval_examples_per_class=args.eval_examples_per_class,
        t_audio=args.t_audio,
        t_visual=args.t_visual,
        seed=args.seed,
    )
    spec.validate()
    task = data.generate_synthetic_task(spec, out_dir)
    echo = {
        "command": "synth",
        "classes": spec.n_classes, "ambiguous_pairs": spec.n_ambiguous_pairs,
        "feature_dim": spec.feature_dim, "noise_std": spec.noise_std,
        "examples_per_class": spec.examples_per_class,
        "eval_examples_per_class": spec.eval_examples_per_class,
        "t_audio": spec.t_audio, "t_visual": spec.t_visual, "seed": spec.seed,
    }
    _echo_config(echo, out_dir)
    train_n = spec.n_classes * spec.examples_per_class
    eval_n = spec.n_classes * spec.eval_examples_per_class
    print(f"wrote {train_n} train / {eval_n} eval examples under {out_dir}")
    print(f"train manifest: {task.train_manifest}")
    print(f"eval manifest:  {task.eval_manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_FLAG_MAP = {
    "train_manifest": (None, "train_manifest"),
    "val_manifest": (None, "val_manifest"),
    "out": (None, "out_dir"),
    "seed": (None, "seed"),
    "fusion_mode": ("model", "fusion_mode"),
    "beta": ("model", "beta"),
    "d": ("model", "d"),
    "heads": ("model", "heads"),
    "encoder_blocks": ("model", "encoder_blocks"),
    "decoder_blocks": ("model", "decoder_blocks"),
    "dropout": ("model", "dropout"),
    "max_caption_len": ("model", "max_caption_len"),
    "epochs": ("train", "epochs"),
    "warmup_epochs": ("train", "warmup_epochs"),
    "lr": ("train", "lr_peak"),
    "batch_size": ("train", "batch_size"),
    "label_smoothing": ("train", "label_smoothing"),
    "checkpoint_interval": ("train", "checkpoint_interval"),
}


def _infer_feature_widths(manifest: data.DatasetManifest) -> tuple[int | None, int | None]:
    audio_widths, visual_widths = set(), set()
    for rec in manifest.records:
        audio_path = manifest.resolve(rec.audio)
        if audio_path.suffix.lower() == ".wav":
            audio_widths.add(256)
        else:
            audio_widths.add(data.feature_file_shape(audio_path)[1])
        if rec.visual_features is not None:
            visual_widths.add(data.feature_file_shape(manifest.resolve(rec.visual_features))[1])
    if len(audio_widths) > 1:
        raise ValidationError(f"inconsistent audio feature widths: {sorted(audio_widths)}")
    if len(visual_widths) > 1:
        raise ValidationError(f"inconsistent visual feature widths: {sorted(visual_widths)}")
    return (audio_widths.pop() if audio_widths else None,
            visual_widths.pop() if visual_widths else None)


def _max_audio_rows(examples) -> int:
    rows = [ex.audio_patches.shape[0] for ex in examples if ex.audio_patches is not None]
    return max(rows, default=0)


def build_run(resolved: dict):
    """Construct (model_config, train_config, vocab, train/val examples) from a resolved run dict."""
    problems = []
    if "train_manifest" not in resolved:
        problems.append("train_manifest is required")
    if problems:
        raise ValidationError(problems)

    manifest = data.load_manifest(resolved["train_manifest"])
    val_manifest = (
        data.load_manifest(resolved["val_manifest"]) if resolved.get("val_manifest") else None
    )
    vocab = data.build_vocabulary_from_manifest(manifest, min_count=resolved.get("min_count", 1))

    model_kw = dict(resolved.get("model", {}))
    fusion_mode = model_kw.get("fusion_mode", "adaava_audio")
    audio_w, visual_w = _infer_feature_widths(manifest)
    if model.mode_uses_audio(fusion_mode) and "audio_in_dim" not in model_kw:
        model_kw["audio_in_dim"] = audio_w or 256
    if model.mode_uses_visual(fusion_mode):
        missing = [rec.id for rec in manifest.records if rec.visual_features is None]
        if missing:
            raise ConfigError(
                f"fusion mode {fusion_mode!r} requires visual features; "
                f"records without them: {', '.join(missing[:5])}"
                + ("..." if len(missing) > 5 else "")
            )
        if "visual_in_dim" not in model_kw and visual_w is not None:
            model_kw["visual_in_dim"] = visual_w

    train_kw = dict(resolved.get("train", {}))
    if "seed" in resolved and "seed" not in train_kw:
        train_kw["seed"] = resolved["seed"]
    augment = train_kw.get("augment")
    if isinstance(augment, dict):
        train_kw["augment"] = frontend.SpecAugmentPolicy.from_json(augment)
    elif augment is True:
        train_kw["augment"] = frontend.SpecAugmentPolicy()

    config = model.ModelConfig(vocab_size=len(vocab), **model_kw)
    tcfg = training.TrainConfig(**train_kw)
    config.validate()
    tcfg.validate()

    train_examples = data.load_examples(manifest, vocab, config.max_caption_len)
    val_examples = (
        data.load_examples(val_manifest, vocab, config.max_caption_len) if val_manifest else []
    )
    needed = _max_audio_rows(train_examples + val_examples)
    if needed > config.max_audio_len:
        config.max_audio_len = needed
    return config, tcfg, vocab, train_examples, val_examples


def cmd_train(args) -> int:
    resolved = _apply_overrides(load_run_config(args.config), args, _TRAIN_FLAG_MAP)
    if args.augment:
        resolved["train"]["augment"] = True
    if args.no_clip:
        resolved["train"]["clip_norm"] = None
    config, tcfg, vocab, train_examples, val_examples = build_run(resolved)

    out_dir = Path(resolved.get("out_dir", "runs/default"))
    echo = {
        "command": "train",
        "train_manifest": str(resolved["train_manifest"]),
        "val_manifest": resolved.get("val_manifest"),
        "out_dir": str(out_dir),
        "seed": tcfg.seed,
        "vocab_size": len(vocab),
        "model": config.to_json(),
        "train": tcfg.to_json(),
    }
    _echo_config(echo, out_dir)

    params = model.init_params(config, seed=tcfg.seed)
    with _DirLock(out_dir):
        state, history = training.fit(
            params, config, vocab, train_examples, val_examples, tcfg,
            out_dir=out_dir, log_path=out_dir / "metrics.jsonl",
        )
    train_losses = [h["train_loss"] for h in history if h["train_loss"] is not None]
    val_losses = [h["val_loss"] for h in history if h["val_loss"] is not None]
    print(f"finished {state.step} steps over {state.epoch} epochs")
    if train_losses:
        print(f"train loss: first {train_losses[0]:.4f} last {train_losses[-1]:.4f}")
    if val_losses:
        print(f"val loss: best {min(val_losses):.4f} (epoch {state.best_epoch})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / infer
# ---------------------------------------------------------------------------


def _decode_manifest(ck: model.Checkpoint, manifest: data.DatasetManifest, beam: int,
                     greedy: bool) -> dict[str, str]:
    examples = data.load_examples(manifest, ck.vocab, ck.config.max_caption_len)
    if _max_audio_rows(examples) > ck.config.max_audio_len:
        raise ConfigError(
            f"audio sequences exceed the checkpoint's positional table "
            f"({ck.config.max_audio_len})"
        )

    def decode_one(ex: data.PreparedExample) -> tuple[str, str]:
        enc = model.encode_modalities(
            ck.params, ck.config,
            audio=ex.audio_patches if model.mode_uses_audio(ck.config.fusion_mode) else None,
            visual=ex.visual if model.mode_uses_visual(ck.config.fusion_mode) else None,
        )
        if greedy:
            ids = inference.caption_greedy(ck.params, ck.config, enc)
        else:
            ids = inference.decode_example(ck.params, ck.config, enc, beam=beam)
        return ex.id, " ".join(data.decode_caption(ids, ck.vocab))

    workers = _workers()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(decode_one, examples))
    else:
        pairs = [decode_one(ex) for ex in examples]
    return dict(pairs)


def cmd_eval(args) -> int:
    ck = model.load_checkpoint(args.checkpoint)
    manifest = data.load_manifest(args.manifest)
    candidates = _decode_manifest(ck, manifest, beam=args.beam, greedy=args.greedy)
    if args.candidates_out:
        with open(args.candidates_out, "w", encoding="utf-8") as fh:
            for cid, caption in candidates.items():
                fh.write(json.dumps({"id": cid, "caption": caption}, sort_keys=True) + "\n")
    report = metrics.evaluate(candidates, manifest)
    payload = report.to_json()
    payload["settings"] = {
        "checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
        "beam": args.beam, "greedy": args.greedy,
        "fusion_mode": ck.config.fusion_mode,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_infer(args) -> int:
    ck = model.load_checkpoint(args.checkpoint)
    config = ck.config
    audio = None
    if model.mode_uses_audio(config.fusion_mode):
        path = Path(args.audio)
        if path.suffix.lower() == ".wav":
            wav = frontend.read_wav(path, expected_rate=frontend.MelConfig().sample_rate)
            audio = frontend.patchify(frontend.log_mel(wav))
        else:
            audio = data.read_feature_file(path).astype(np.float64)
    visual = None
    if model.mode_uses_visual(config.fusion_mode):
        if not args.visual:
            raise ValidationError(
                f"fusion mode {config.fusion_mode!r} needs --visual features"
            )
        visual = data.read_feature_file(args.visual).astype(np.float64)

    enc = model.encode_modalities(ck.params, config, audio=audio, visual=visual)
    ids = inference.decode_example(ck.params, config, enc, beam=args.beam)
    caption = " ".join(data.decode_caption(ids, ck.vocab))
    print(caption)

    if args.trace and config.fusion_mode.startswith("adaava"):
        _, traces = model.decode_logits(ck.params, config, enc, np.asarray(ids[:-1] or ids),
                                        collect_traces=True)
        for i, tr in enumerate(traces):
            conf = tr.a_conf.data
            print(
                f"block {i}: mean_conf={conf.mean():.4f} "
                f"audio_mask_density={tr.m_a.data.mean():.4f} "
                f"video_mask_density={tr.m_v.data.mean():.4f}"
            )
    elif args.trace:
        print(f"(no fusion trace: mode {config.fusion_mode})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def _gradcheck_probe(seed: int, near_threshold: bool):
    """Desk-config adaava_audio decoder block plus random inputs to probe."""
    config = model.ModelConfig(
        vocab_size=32, d=128, heads=4, encoder_blocks=2, decoder_blocks=1,
        fusion_mode="adaava_audio", max_caption_len=8, audio_in_dim=64,
        visual_in_dim=64, max_audio_len=16, dropout=0.0,
    )
    params = model.init_params(config, seed=seed)
    blk = params.decoder[0]
    rng = np.random.default_rng(seed)
    enc = model.EncodedModalities(
        audio=numerics.Tensor(rng.normal(size=(7, config.d))),
        visual=numerics.Tensor(rng.normal(size=(5, config.d))),
    )
    x0 = numerics.Tensor(rng.normal(size=(5, config.d)))
    mixer = rng.normal(size=(5, config.d))
    if near_threshold:
        # park half the confidence entries within a hair of the threshold
        blk.conf_fc.weight.data = np.zeros_like(blk.conf_fc.weight.data)
        logit = math.log(config.beta / (1.0 - config.beta))
        bias = np.full(config.d, 3.0)
        bias[::2] = logit + 1e-9
        blk.conf_fc.bias.data = bias
    return config, params, blk, enc, x0, mixer


def cmd_gradcheck(args) -> int:
    config, params, blk, enc, x0, mixer = _gradcheck_probe(args.seed, args.near_threshold)

    def block_loss() -> numerics.Tensor:
        out, _ = model.decoder_block(x0, enc, blk, config)
        return numerics.sum_(numerics.mul(out, mixer))

    def masks_now() -> np.ndarray:
        _, tr = model.decoder_block(x0, enc, blk, config, collect_trace=True)
        return np.stack([tr.m_a.data, tr.m_v.data])

    groups = [slot for slot in model.parameter_slots(params)
              if slot[0].startswith("decoder.0.")]
    rng = np.random.default_rng(args.seed + 1)
    worst = 0.0
    failed = False
    for name, owner, attr in groups:
        original: numerics.Tensor = getattr(owner, attr)
        base = original.data

        def f(leaf: numerics.Tensor) -> numerics.Tensor:
            setattr(owner, attr, leaf)
            try:
                return block_loss()
            finally:
                setattr(owner, attr, original)

        excluded = 0

        def exclude(i: int) -> bool:
            nonlocal excluded
            if not args.exclusion:
                return False
            flat = base.reshape(-1)
            orig = flat[i]
            flat[i] = orig + args.step
            plus = masks_now()
            flat[i] = orig - args.step
            minus = masks_now()
            flat[i] = orig
            if not np.array_equal(plus, minus):
                excluded += 1
                return True
            return False

        err = numerics.gradcheck(
            f, numerics.Tensor(base.copy()), step=args.step,
            exclusion_predicate=exclude,
            max_coords=args.coords_per_group, rng=rng,
        )
        worst = max(worst, err)
        status = "ok" if err < 1e-4 else "FAIL"
        if err >= 1e-4:
            failed = True
        note = f" (excluded {excluded})" if excluded else ""
        print(f"{name:44s} max_rel_err={err:.3e} {status}{note}")

    print(f"worst group error: {worst:.3e}")
    if failed:
        print("gradcheck FAILED")
        return EXIT_RUNTIME
    print("gradcheck passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="avfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic ambiguous-sound dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--ambiguous-pairs", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--examples-per-class", type=int, default=24)
    p.add_argument("--eval-examples-per-class", type=int, default=4)
    p.add_argument("--t-audio", type=int, default=12)
    p.add_argument("--t-visual", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a captioner")
    p.add_argument("--config", help="JSON run config; flags override file values")
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--fusion-mode", choices=model.FUSION_MODES)
    p.add_argument("--beta", type=float)
    p.add_argument("--d", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--encoder-blocks", type=int)
    p.add_argument("--decoder-blocks", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--max-caption-len", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--label-smoothing", type=float)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--no-clip", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode an eval manifest and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--report")
    p.add_argument("--candidates-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="caption one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True, help="WAV file or AVF1 feature file")
    p.add_argument("--visual", help="AVF1 feature file")
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--trace", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of the fusion decoder block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--coords-per-group", type=int, default=8)
    p.add_argument("--no-exclusion", dest="exclusion", action="store_false")
    p.add_argument("--near-threshold", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except AvfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
