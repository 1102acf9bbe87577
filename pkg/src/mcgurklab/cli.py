"""Command line entry point: ``mcgurklab <subcommand> [options]``.

Exit codes: 0 success, 2 usage, 3 validation, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from . import tensorcore as tc
from .evaluation import DegenerateVectorError, ProtocolError
from .model import CheckpointError, load_checkpoint
from .signal import DegenerateSignalError, FormatError, save_noise_bank
from .stats import DegenerateTableError
from .stimgen import ConfigError, build_corpus, manifest_hash, save_corpus
from .train import TrainConfigError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4

VALIDATION_ERRORS = (
    ConfigError,
    ProtocolError,
    TrainConfigError,
    FormatError,
    DegenerateSignalError,
    DegenerateVectorError,
    DegenerateTableError,
    CheckpointError,
    ex.SettingsError,
    ex.HumanDataError,
    json.JSONDecodeError,
)

log = logging.getLogger("mcgurklab")


class UsageError(Exception):
    pass


def _snr_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config with stimuli/train/eval sections")
    common.add_argument("--seed", type=int, help="training and evaluation seed (corpus seed for gen-stimuli)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--profile", choices=sorted(ex.PROFILES), help="training budget preset (default desk)")
    common.add_argument("--k", type=int, help="neighbours for the k-NN classifier")
    common.add_argument("--snr-list", type=_snr_list, help="comma-separated training SNRs in dB")
    common.add_argument("--precision", choices=["32", "64"], help="floating point width")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mcgurklab", description="Audiovisual CPC simulations of the McGurk effect.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-stimuli", parents=[common], help="write the word corpus (WAV, lip CSV, manifest)")
    sub.add_parser("render-noise", parents=[common], help="render the babble noise bank")
    sub.add_parser("train", parents=[common], help="train one model; SNR from --snr-list (one value) or config")
    e = sub.add_parser("evaluate", parents=[common], help="CV and forced choice for a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    sub.add_parser("experiment1", parents=[common], help="clean vs 0 dB training")
    sub.add_parser("experiment2", parents=[common], help="training SNR sweep")
    h = sub.add_parser("compare-human", parents=[common], help="merge human responses into a report")
    h.add_argument("--report", type=Path, required=True)
    h.add_argument("--human", type=Path, required=True)
    return p


def _settings(args) -> ex.Settings:
    if args.config is not None and not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    if args.k is not None and args.k < 1:
        raise UsageError("--k must be at least 1")
    return ex.Settings.load(args.config, profile=args.profile, seed=args.seed, precision=args.precision, k=args.k)


def _out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required for this command")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=ex._json_default))


def cmd_gen_stimuli(args) -> int:
    s = _settings(args)
    seed = args.seed if args.seed is not None else s.corpus_seed
    corpus = build_corpus(s.stimulus_config(), seed)
    manifest = save_corpus(corpus, _out(args))
    _emit(
        {
            "congruent": len(corpus.congruent),
            "incongruent": len(corpus.incongruent),
            "audio_only": len(corpus.audio_only),
            "manifest_hash": manifest_hash(manifest),
            "out": str(args.out),
        }
    )
    return EXIT_OK


def cmd_render_noise(args) -> int:
    s = _settings(args)
    if args.seed is not None:
        s.babble_seed = args.seed
    bank = ex.render_noise(s)
    path = _out(args) / "babble.wav"
    save_noise_bank(path, bank)
    _emit({"path": str(path), "seconds": bank.waveform.duration, "talkers": bank.talker_count, "seed": bank.seed})
    return EXIT_OK


def _single_snr(args, s: ex.Settings):
    if args.snr_list is None:
        return s.train.get("snr_db")
    if len(args.snr_list) != 1:
        raise UsageError("train takes exactly one SNR in --snr-list")
    return args.snr_list[0]


def cmd_train(args) -> int:
    s = _settings(args)
    out = _out(args)
    snr = _single_snr(args, s)
    inputs = ex.prepare_inputs(s)
    model, losses = ex.train_model(s, inputs, snr, out)
    ex.save_model(out / "model.ckpt", model, s, snr)
    _emit({"steps": len(losses), "final_loss_100": sum(losses[-100:]) / len(losses[-100:]), "checkpoint": str(out / "model.ckpt")})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    s = _settings(args)
    out = _out(args)
    model, meta = load_checkpoint(args.checkpoint)
    inputs_corpus = build_corpus(s.stimulus_config(), s.corpus_seed)
    res = ex.evaluate(model, inputs_corpus, s)
    stats = {
        "format_version": ex.REPORT_VERSION,
        "checkpoint": str(args.checkpoint),
        "checkpoint_metadata": meta,
        "config_hash": s.hash(),
        "corpus_hash": manifest_hash(inputs_corpus.manifest()),
        "k": s.eval["k"],
        "cv": res["cv"].to_dict(),
        "audiovisual": res["audiovisual"].to_dict(),
        "audio_only": res["audio_only"].to_dict(),
    }
    ex.write_json(out / "stats.json", stats)
    ex.write_responses_csv(out / "responses.csv", [res["audiovisual"], res["audio_only"]])
    ex.write_distances_csv(out / "distances.csv", res["congruent_ids"], res["congruent_distances"])
    _emit({k: stats[k] for k in ("cv", "audiovisual", "audio_only")})
    return EXIT_OK


def _has_failures(report) -> bool:
    return bool(report.get("failures"))


def cmd_experiment1(args) -> int:
    s = _settings(args)
    noisy = 0.0
    if args.snr_list is not None:
        if len(args.snr_list) != 1:
            raise UsageError("experiment1 takes one noisy-condition SNR in --snr-list")
        noisy = args.snr_list[0]
    report = ex.experiment1(s, _out(args), noisy_snr=noisy)
    _emit({"conditions": {k: {kk: v.get(kk) for kk in ("snr_db", "audiovisual", "audio_only")} for k, v in report["conditions"].items()}, "chi_squared": report.get("chi_squared")})
    return EXIT_NUMERIC if _has_failures(report) else EXIT_OK


def cmd_experiment2(args) -> int:
    s = _settings(args)
    snrs = args.snr_list if args.snr_list is not None else list(ex.DEFAULT_SNRS)
    if not snrs:
        raise UsageError("--snr-list is empty")
    report = ex.experiment2(s, snrs, _out(args))
    _emit({"rows": [{k: r.get(k) for k in ("snr_db", "failed")} | ({"cv_accuracy": r["cv"]["accuracy"], "proportions": r["audiovisual"]["proportions"]} if "cv" in r else {}) for r in report["rows"]]})
    return EXIT_NUMERIC if _has_failures(report) else EXIT_OK


def cmd_compare_human(args) -> int:
    if not args.report.is_file():
        raise UsageError(f"report not found: {args.report}")
    if not args.human.is_file():
        raise UsageError(f"human CSV not found: {args.human}")
    report = json.loads(args.report.read_text())
    merged = ex.compare_human(report, ex.read_human_csv(args.human))
    ex.write_json(_out(args) / "compare_human.json", merged)
    _emit(merged["rows"])
    return EXIT_OK


COMMANDS = {
    "gen-stimuli": cmd_gen_stimuli,
    "render-noise": cmd_render_noise,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "experiment1": cmd_experiment1,
    "experiment2": cmd_experiment2,
    "compare-human": cmd_compare_human,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except tc.NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
