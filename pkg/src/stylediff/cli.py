"""Command line entry point: ``stylediff <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _timesteps(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("timesteps must be positive integers")
    return values


def _factors(text: str):
    from .style import StyleFactorConfig

    pairs = []
    for item in text.split(","):
        name, _, k = item.partition(":")
        if not name or not k.isdigit():
            raise argparse.ArgumentTypeError(f"expected name:classes pairs, got {item!r}")
        pairs.append((name.strip(), int(k)))
    return StyleFactorConfig(tuple(pairs))


def _set_value(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stylediff", description="Prompt-conditioned few-step diffusion-GAN TTS.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="write a synthetic style-factored dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--n", type=int, default=512, help="number of utterances")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-std", type=float, default=0.01)
    g.add_argument("--phoneme-vocab", type=int, default=64)
    g.add_argument("--factors", type=_factors, default=None,
                   help="e.g. gender:2,pitch:3,speed:3,volume:3,emotion:5")

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", type=Path, help="dataset directory (overrides data.train)")
    t.add_argument("--run-dir", required=True, type=Path)
    t.add_argument("--config", type=Path, help="JSON run config")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--lr", type=float, help="sets both lr_g and lr_d")
    t.add_argument("--set", dest="overrides", type=_set_value, action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override, repeatable")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    s = sub.add_parser("synthesize", help="synthesize a mel from a prompt and phonemes")
    s.add_argument("--checkpoint", required=True, type=Path, help="checkpoint or run directory")
    s.add_argument("--prompt", required=True)
    s.add_argument("--text-phonemes", required=True, type=Path,
                   help="file of whitespace-separated phoneme ids")
    s.add_argument("--out", type=Path, default=Path("out.mel"))
    s.add_argument("--wav", type=Path, help="also write a Griffin-Lim waveform")
    s.add_argument("--gl-iters", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--timesteps", type=int, help="sampling steps (default: trained T)")

    e = sub.add_parser("evaluate", help="style accuracy of synthesized held-out prompts")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--out", type=Path, help="report path (default: <run>/reports/)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int)

    a = sub.add_parser("ablate", help="mel error and style accuracy per sampling-step count")
    a.add_argument("--checkpoint", required=True, type=Path)
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--timesteps", type=_timesteps, default=[1, 2, 4])
    a.add_argument("--out", type=Path)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--limit", type=int)

    x = sub.add_parser("export-plots", help="pitch/energy CSVs and mels of generated vs real")
    x.add_argument("--checkpoint", required=True, type=Path)
    x.add_argument("--data", required=True, type=Path)
    x.add_argument("--out", required=True, type=Path)
    x.add_argument("--limit", type=int, default=4)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--heatmaps", action="store_true")
    return p


# helpers ------------------------------------------------------------------


def _resolve_checkpoint(path: Path) -> tuple[Path, Optional[Path]]:
    """Checkpoint directory and, if it lives inside one, the run directory."""
    from .checkpoint import latest_checkpoint

    if (path / "checkpoints").is_dir():
        return latest_checkpoint(path), path
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"{path} is neither a checkpoint nor a run directory")
    run = path.parent.parent if path.parent.name == "checkpoints" else None
    return path, run


def _load(path: Path):
    from .checkpoint import load_checkpoint

    ckpt, run = _resolve_checkpoint(path)
    return load_checkpoint(ckpt), run


def _eval_set(data: Path, limit: Optional[int]):
    from .corpus import load_dataset

    utts = load_dataset(data)
    return utts[:limit] if limit else utts


def _report_path(out: Optional[Path], run: Optional[Path], name: str) -> Optional[Path]:
    if out is not None:
        return out
    if run is not None:
        (run / "reports").mkdir(parents=True, exist_ok=True)
        return run / "reports" / name
    return None


# subcommands --------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    from .corpus import CorpusSpec, generate_synthetic_corpus, save_dataset
    from .seeding import derive_seed
    from .style import StyleFactorConfig

    factors = args.factors or StyleFactorConfig()
    spec = CorpusSpec(n_utterances=args.n, phoneme_vocab_size=args.phoneme_vocab,
                      factors=factors, seed=derive_seed(args.seed, "corpus"),
                      noise_std=args.noise_std)
    utts = generate_synthetic_corpus(spec)
    save_dataset(utts, args.out, factors)
    print(f"wrote {len(utts)} utterances to {args.out}")
    return EXIT_OK


def _effective_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    flags = {"seed": args.seed, "optim.max_steps": args.max_steps,
             "optim.batch_size": args.batch_size, "optim.checkpoint_every": args.checkpoint_every,
             "optim.lr_g": args.lr, "optim.lr_d": args.lr,
             "data.train": None if args.data is None else str(args.data)}
    overrides = {k: v for k, v in flags.items() if v is not None}
    overrides.update(dict(args.overrides))
    return config.override(overrides) if overrides else config


def cmd_train(args) -> int:
    from .checkpoint import latest_checkpoint, load_checkpoint
    from .corpus import load_dataset, load_factor_config
    from .engine import create_state, fit, make_examples, pretrain_style, variance_stats
    from .style import StyleFactorConfig, Vocab

    config = _effective_config(args)
    if not config.data.train:
        raise ConfigError("no training data: pass --data or set data.train")
    utts = load_dataset(config.data.train)
    if not utts:
        raise ValueError(f"dataset {config.data.train} is empty")
    data_factors = load_factor_config(config.data.train)
    run_factors = StyleFactorConfig(tuple(tuple(f) for f in config.style.factors))
    if data_factors is not None and data_factors != run_factors:
        raise ConfigError(f"dataset factors {data_factors.factors} differ from config "
                          f"{run_factors.factors}")
    run = args.run_dir
    run.mkdir(parents=True, exist_ok=True)
    if args.resume:
        # Only the step budget may change on resume; everything else comes
        # from the checkpoint so the continuation matches an unbroken run.
        state = load_checkpoint(latest_checkpoint(run))
        state.config = state.config.override({"optim.max_steps": config.optim.max_steps})
    else:
        if (run / "checkpoints").is_dir() and any((run / "checkpoints").iterdir()):
            raise FileExistsError(f"{run} already holds checkpoints; use --resume")
        vocab = Vocab.build(u.prompt.text for u in utts)
        state = create_state(config, vocab, variance_stats(utts))
    (run / "reports").mkdir(exist_ok=True)
    state.config.save(run / "config.json")
    examples = make_examples(utts, state.vocab)
    if not args.resume and config.style.pretrain_steps > 0:
        losses = pretrain_style(state, examples, config.style.pretrain_steps)
        print(f"style pre-training: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    fit(state, examples, max_steps=state.config.optim.max_steps, run_dir=run)
    print(f"trained to step {state.step}; checkpoints in {run / 'checkpoints'}")
    return EXIT_OK


def read_phonemes(path: Path) -> list[int]:
    text = Path(path).read_text(encoding="utf-8").split()
    try:
        ids = [int(tok) for tok in text]
    except ValueError as exc:
        raise ValueError(f"{path}: phoneme ids must be integers ({exc})") from None
    if not ids:
        raise ValueError(f"{path}: no phoneme ids")
    return ids


def cmd_synthesize(args) -> int:
    from .audio import griffin_lim, write_wav
    from .corpus import MelConfig, write_tensor
    from .engine import synthesize

    state, _ = _load(args.checkpoint)
    phonemes = read_phonemes(args.text_phonemes)
    out = synthesize(state, phonemes, prompt=args.prompt, seed=args.seed,
                     T_override=args.timesteps)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(args.out, out.mel)
    print(f"wrote {out.mel.shape[0]}x{out.mel.shape[1]} mel to {args.out}")
    if args.wav:
        cfg = MelConfig(mel_bins=out.mel.shape[1])
        wave = griffin_lim(out.mel, cfg, n_iters=args.gl_iters, seed=args.seed)
        write_wav(args.wav, wave, cfg.sample_rate)
        print(f"wrote {len(wave)} samples to {args.wav}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .analysis import evaluate_style

    state, run = _load(args.checkpoint)
    utts = _eval_set(args.data, args.limit)
    report, _ = evaluate_style(state, utts, seed=args.seed)
    print(report.format())
    path = _report_path(args.out, run, f"style_accuracy_step{state.step}.json")
    if path is not None:
        path.write_text(json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .analysis import ablate_timesteps, ablation_json, format_ablation

    state, run = _load(args.checkpoint)
    utts = _eval_set(args.data, args.limit)
    rows = ablate_timesteps(state, utts, args.timesteps, seed=args.seed)
    print(format_ablation(rows))
    path = _report_path(args.out, run, f"ablation_step{state.step}.json")
    if path is not None:
        path.write_text(ablation_json(rows) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_export_plots(args) -> int:
    from .analysis import export_plot_data
    from .engine import synthesize_batch

    state, _ = _load(args.checkpoint)
    utts = _eval_set(args.data, args.limit)
    outs = synthesize_batch(state, [u.phonemes.tolist() for u in utts],
                            prompts=[u.prompt.text for u in utts], seed=args.seed,
                            durations=[u.durations.tolist() for u in utts])
    paths = export_plot_data([(o.mel, u) for o, u in zip(outs, utts)], args.out,
                             heatmaps=args.heatmaps)
    print(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


COMMANDS = {"gen-corpus": cmd_gen_corpus, "train": cmd_train, "synthesize": cmd_synthesize,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "export-plots": cmd_export_plots}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, RuntimeError, OSError, KeyError, FloatingPointError) as exc:
        print(f"stylediff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
