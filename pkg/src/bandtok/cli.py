"""``bandtok`` command line.

Exit codes: 0 success, 1 invalid input (bad flags, bad config, missing file),
2 format error (corrupt BTOK/BMEL/BPRM), 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import analysis, plotting
from . import rng as rng_mod
from .config import PRESETS, RunConfig
from .dsp import compute_log_mel, mel_distance, read_wav, write_bmel
from .errors import BandTokError, InvalidInputError, VerificationError
from .lm import ConditioningPrefix, MicroLm, sample
from .pipeline import Tokenizer, compare_geometry, load_lm, save_lm, train_tokenizer_from_config
from .tokens import read_btok, write_btok
from .train import JsonlLog, random_prefixes, synthetic_band_corpus, train_lm
from .verify import FAULTS, run_suite

log = logging.getLogger("bandtok")


# ---------------------------------------------------------------------------
# config plumbing


def load_config(args) -> RunConfig:
    if args.config:
        _require(args.config)
        cfg = RunConfig.load(args.config)
    else:
        cfg = PRESETS[args.preset]()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.rope:
        cfg = cfg.override("rope", mode=args.rope)
    if args.quantizer:
        cfg = cfg.override("codebook", quantizer=args.quantizer)
    cfg.validate()
    return cfg


def _require(path):
    if not Path(path).is_file():
        raise InvalidInputError(f"no such file: {path}")
    return path


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _read_grids(paths):
    grids = [read_btok(_require(p)) for p in paths]
    if not grids:
        raise InvalidInputError("no token files given")
    axes = {g.band_count for g in grids}
    if len(axes) != 1:
        raise InvalidInputError(f"token files disagree on the axis count: {sorted(axes)}")
    return grids


def _crop(grids) -> np.ndarray:
    frames = min(g.n_frames for g in grids)
    return np.stack([g.indices[:frames] for g in grids])


def _caption_prefix(caption: str, rows: int, d: int) -> np.ndarray:
    """Stand-in text embedding: Gaussian rows seeded by a hash of the caption."""
    gen = rng_mod.derive(zlib.crc32(caption.encode("utf-8")), "caption")
    return gen.normal(0.0, 1.0, size=(rows, d))


# ---------------------------------------------------------------------------
# commands


def cmd_tokenize(args, cfg):
    tok = Tokenizer.load(_require(args.checkpoint), cfg)
    w = read_wav(_require(args.input))
    if w.sample_rate_hz != cfg.frontend.sample_rate_hz:
        raise InvalidInputError(f"{args.input}: sample rate {w.sample_rate_hz} Hz, config expects "
                                f"{cfg.frontend.sample_rate_hz} Hz")
    grid, mel = tok.tokenize(w)
    write_btok(args.output, grid)
    usage = analysis.usage_stats(grid.indices, grid.K)
    print(f"T'={grid.n_frames} B={grid.band_count} frame_rate={grid.frame_rate_hz:.4f}Hz "
          f"codebook_perplexity={usage.perplexity:.3f} -> {args.output}")
    return 0


def cmd_detokenize(args, cfg):
    grid = read_btok(_require(args.input))
    tok = Tokenizer.load(_require(args.checkpoint), cfg)
    mel = tok.detokenize(grid)
    write_bmel(args.output, mel)
    msg = f"BMEL {mel.values.shape[0]}x{mel.values.shape[1]} -> {args.output}"
    if args.reference:
        ref_mel = compute_log_mel(read_wav(_require(args.reference)), cfg.frontend_config())
        n = min(ref_mel.n_frames, mel.n_frames)
        msg += f" mel_distance={mel_distance(ref_mel.values[:n], mel.values[:n]):.5f}"
    if args.figure:
        plotting.plot_mel(mel.values, args.figure, "decoded log-Mel")
    print(msg)
    return 0


def cmd_train_tokenizer(args, cfg):
    cfg = cfg.override("loss", steps=args.steps,
                       ms_patchgan=False if args.no_ms_patchgan else None,
                       codebook_loss=True if args.codebook_loss else None)
    logger = JsonlLog(args.log)
    try:
        tok, history = train_tokenizer_from_config(cfg, logger=logger)
    finally:
        logger.close()
    tok.save(args.output)
    if history:
        print(f"steps={len(history)} first_total={history[0]['total']:.4f} "
              f"last_total={history[-1]['total']:.4f}")
        if args.figure:
            plotting.plot_losses(history, args.figure, ("total", "rec", "fm", "commit"), "tokenizer")
    print(f"checkpoint -> {args.output}")
    return 0


def cmd_train_lm(args, cfg):
    cfg = cfg.override("lm", steps=args.steps)
    if args.tokens:
        grids = _crop(_read_grids(args.tokens))
        if int(grids.max()) >= cfg.codebook.K:
            raise InvalidInputError(f"token ids exceed the configured K={cfg.codebook.K}")
    else:
        grids = synthetic_band_corpus(cfg.lm.corpus_seqs, cfg.lm.corpus_frames, cfg.token_axis_count,
                                      cfg.codebook.K, cfg.seed)
    model = MicroLm(cfg.lm_config())
    prefixes = random_prefixes(len(grids), cfg.lm.prefix_rows, cfg.lm.d_model, cfg.seed)
    logger = JsonlLog(args.log)
    try:
        history = train_lm(model, grids, prefixes, cfg.lm_train_config(), logger)
    finally:
        logger.close()
    save_lm(args.output, model)
    if history:
        print(f"steps={len(history)} first_nll={history[0]['nll']:.4f} last_nll={history[-1]['nll']:.4f} "
              f"log_V={np.log(cfg.lm_config().vocab.size):.4f}")
        if args.figure:
            plotting.plot_losses(history, args.figure, ("nll",), "micro LM")
    print(f"checkpoint -> {args.output}")
    return 0


def cmd_generate(args, cfg):
    cfg = cfg.override("sampler", guidance_scale=args.cfg_scale, temperature=args.temperature,
                       top_k=args.top_k, segment_start_s=args.segment_start,
                       track_duration_s=args.track_duration, max_frames=args.frames)
    model = load_lm(_require(args.lm), cfg) if args.lm else MicroLm(cfg.lm_config())
    d, rows = cfg.lm.d_model, cfg.lm.prefix_rows
    if args.prefix:
        emb = np.load(_require(args.prefix))
        if emb.ndim != 2 or emb.shape[1] != d:
            raise InvalidInputError(f"{args.prefix}: prefix must be (rows, {d}), got {emb.shape}")
    else:
        emb = _caption_prefix(args.caption, rows, d)
    s = cfg.sampler
    prefix = ConditioningPrefix(emb, s.segment_start_s, s.track_duration_s)
    grid = sample(prefix, model, cfg.sampler_config(), s.max_frames, cfg.token_axis_count)
    write_btok(args.output, grid)
    print(f"generated T'={grid.n_frames} B={grid.band_count} w={s.guidance_scale} -> {args.output}")
    return 0


def cmd_analyze_nmi(args, cfg):
    grids = _read_grids(args.tokens)
    axis = args.axis or ("band" if cfg.codebook.quantizer == "band" else "layer")
    m = analysis.grid_nmi(grids, args.offset, axis)
    out = _out_dir(args.out_dir)
    (out / "nmi.csv").write_text(m.to_csv())
    (out / "nmi.json").write_text(analysis.dump_json(
        {**m.to_json(), "offset": args.offset, "mean_off_diagonal": m.mean_off_diagonal()}))
    plotting.plot_nmi(m, out / "nmi.png", f"pairwise NMI ({axis}, offset {args.offset})")
    print(analysis.ascii_heat_table(m.values, m.labels))
    print(f"mean off-diagonal NMI {m.mean_off_diagonal():.4f}; wrote {out}/nmi.{{csv,json,png}}")
    return 0


def cmd_analyze_ppl(args, cfg):
    grids = _read_grids(args.tokens)
    model = load_lm(_require(args.lm), cfg) if args.lm else MicroLm(cfg.lm_config())
    if grids[0].K != cfg.codebook.K:
        raise InvalidInputError(f"token files use K={grids[0].K}, config has K={cfg.codebook.K}")
    p = analysis.ppl_profile(grids, model, args.axis)
    out = _out_dir(args.out_dir)
    (out / "ppl.csv").write_text(p.to_csv())
    (out / "ppl.json").write_text(analysis.dump_json(p.to_json()))
    plotting.plot_ppl(p, out / "ppl.png")
    print(analysis.ascii_heat_table(p.normalized[None], [f"{args.axis} ppl"]))
    print(" ".join(f"{v:.3f}" for v in p.raw_ppl))
    print(f"wrote {out}/ppl.{{csv,json,png}}")
    return 0


def cmd_compare_geometry(args, cfg):
    report = compare_geometry(cfg, n_clips=args.clips, n_frames=args.frames,
                              tokenizer_steps=args.tokenizer_steps, lm_steps=args.lm_steps)
    out = _out_dir(args.out_dir)
    for name, m in (("band", report.band_nmi), ("residual", report.residual_nmi)):
        (out / f"nmi_{name}.csv").write_text(m.to_csv())
        print(f"{name} NMI (mean off-diagonal {m.mean_off_diagonal():.4f})")
        print(analysis.ascii_heat_table(m.values, m.labels))
    for name, p in (("band", report.band_ppl), ("residual", report.residual_ppl)):
        (out / f"ppl_{name}.csv").write_text(p.to_csv())
        print(f"{name} PPL: " + " ".join(f"{v:.3f}" for v in p.raw_ppl))
    (out / "geometry.json").write_text(analysis.dump_json(report.to_json()))
    plotting.plot_geometry(report, out / "geometry.png")
    print(f"wrote {out}/geometry.{{json,png}} and per-axis CSVs")
    return 0


def cmd_verify(args, cfg):
    report = run_suite(cfg.seed, fault=args.inject_fault, quick=args.quick)
    print(report.text())
    if args.json:
        Path(args.json).write_text(analysis.dump_json(report.to_json()))
    if not report.passed:
        raise VerificationError("failed properties: " + ", ".join(report.failed()))
    return 0


def cmd_config(args, cfg):
    text = cfg.dumps()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 so that 2 stays reserved for corrupt files."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (flags override it)")
    common.add_argument("--preset", choices=sorted(PRESETS), default="full",
                        help="built-in config when --config is absent (default: full)")
    common.add_argument("--seed", type=int)
    common.add_argument("--rope", choices=("1d", "2d"))
    common.add_argument("--quantizer", choices=("band", "residual"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="bandtok", description="band-wise Mel tokenizer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tokenize", parents=[common], help="wav -> BTOK")
    s.add_argument("input")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("detokenize", parents=[common], help="BTOK -> BMEL")
    s.add_argument("input")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--reference", help="original wav; report mel distance")
    s.add_argument("--figure", help="write a PNG of the decoded spectrogram")
    s.set_defaults(func=cmd_detokenize)

    s = sub.add_parser("train-tokenizer", parents=[common], help="desk-scale tokenizer training")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--no-ms-patchgan", action="store_true", help="single-scale critic")
    s.add_argument("--codebook-loss", action="store_true", help="gradient codebook instead of EMA")
    s.add_argument("--log", help="JSON-lines training log")
    s.add_argument("--figure", help="loss-curve PNG")
    s.set_defaults(func=cmd_train_tokenizer)

    s = sub.add_parser("train-lm", aliases=["train-toy"], parents=[common], help="train the micro LM")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--tokens", nargs="*", help="BTOK corpus (default: synthetic band corpus)")
    s.add_argument("--steps", type=int)
    s.add_argument("--log", help="JSON-lines training log")
    s.add_argument("--figure", help="loss-curve PNG")
    s.set_defaults(func=cmd_train_lm)

    s = sub.add_parser("generate", parents=[common], help="sample tokens with guidance")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--lm", help="LM checkpoint (default: freshly initialised from the seed)")
    s.add_argument("--caption", default="", help="text hashed into a stand-in prefix embedding")
    s.add_argument("--prefix", help=".npy (rows, d_model) prefix embedding")
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--temperature", type=float)
    s.add_argument("--top-k", type=int)
    s.add_argument("--segment-start", type=float)
    s.add_argument("--track-duration", type=float)
    s.add_argument("--frames", type=int)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("analyze-nmi", aliases=["analyze"], parents=[common], help="pairwise NMI between token axes")
    s.add_argument("tokens", nargs="+")
    s.add_argument("--out-dir", default="nmi_out")
    s.add_argument("--offset", type=int, default=0, help="compare frame t with frame t+offset")
    s.add_argument("--axis", choices=("band", "layer"))
    s.set_defaults(func=cmd_analyze_nmi)

    s = sub.add_parser("analyze-ppl", parents=[common], help="per-axis teacher-forced perplexity")
    s.add_argument("tokens", nargs="+")
    s.add_argument("--lm")
    s.add_argument("--axis", choices=("band", "layer"), default="band")
    s.add_argument("--out-dir", default="ppl_out")
    s.set_defaults(func=cmd_analyze_ppl)

    s = sub.add_parser("compare-geometry", parents=[common], help="band vs residual token geometry")
    s.add_argument("--out-dir", default="geometry_out")
    s.add_argument("--clips", type=int, default=16)
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--tokenizer-steps", type=int, default=0)
    s.add_argument("--lm-steps", type=int)
    s.set_defaults(func=cmd_compare_geometry)

    s = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    s.add_argument("--inject-fault", choices=FAULTS, help="break a component on purpose (test hook)")
    s.add_argument("--quick", action="store_true", help="subsample finite-difference checks")
    s.add_argument("--json", help="also write the report as JSON")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("config", parents=[common], help="print the effective config")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except BandTokError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc}: file not found", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
