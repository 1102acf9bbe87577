"""Experiment orchestration shared by the command line and the acceptance suite.

A run is described by :class:`Settings` (stimulus, training and evaluation
sections plus a profile); data inputs are rebuilt deterministically from it.
Reports are plain dicts written as JSON with sibling CSVs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import tensorcore as tc
from .evaluation import ROLES, compare_conditions, cross_validate, dtw_matrix, run_forced_choice
from .model import CpcModel, save_checkpoint
from .signal import NoiseBank, render_babble
from .stats import DegenerateTableError
from .stimgen import (
    Corpus,
    StimulusConfig,
    build_corpus,
    build_pretraining_corpus,
    manifest_hash,
    synth_talker_stream,
)
from .train import TrainConfig, Trainer

REPORT_VERSION = 1
DEFAULT_SNRS = (10.0, 5.0, 0.0, -5.0, -10.0, -15.0)

# Training overrides per profile; anything in the config file wins.
PROFILES = {
    "smoke": {"steps": 50, "batch_size": 4, "learning_rate": 1e-3, "clip_frames": 32},
    "desk": {"steps": 3000, "batch_size": 8, "learning_rate": 1e-3, "clip_frames": 32},
}

EVAL_DEFAULTS = {"k": 5, "folds": 10, "n_resamples": 10000, "cross_speaker": False, "representation": "context"}

# Reference points of record from the full-scale study, reported next to desk numbers.
REFERENCE_POINTS = {
    "cv_accuracy_clean": [99.26, 0.93],
    "cv_accuracy_10db": [97.78, 2.04],
    "chi_squared_clean_vs_noisy": {"statistic": 99.33, "df": 2},
    "human_audio_only": {"auditory": 0.251, "fused": 0.744},
    "sweep_endpoint": "auditory-only choices from -10 dB down",
}


class SettingsError(ValueError):
    """Malformed experiment configuration."""


@dataclass
class Settings:
    profile: str = "desk"
    corpus_seed: int = 0
    seed: int = 0
    stimuli: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    babble_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict, profile: str | None = None, seed: int | None = None, precision: str | None = None, k: int | None = None):
        known = {"profile", "corpus_seed", "seed", "stimuli", "train", "eval", "babble_seed"}
        unknown = set(d) - known
        if unknown:
            raise SettingsError(f"unknown config sections: {sorted(unknown)}")
        s = cls(**{key: d[key] for key in known if key in d})
        if profile is not None:
            s.profile = profile
        if s.profile not in PROFILES:
            raise SettingsError(f"unknown profile {s.profile!r}; choose from {sorted(PROFILES)}")
        if seed is not None:
            s.seed = seed
        s.train = dict(s.train)
        if precision is not None:
            s.train["precision"] = str(precision)
        s.eval = {**EVAL_DEFAULTS, **s.eval}
        if k is not None:
            s.eval["k"] = k
        unknown = set(s.eval) - set(EVAL_DEFAULTS)
        if unknown:
            raise SettingsError(f"unknown eval keys: {sorted(unknown)}")
        # validate eagerly so bad files fail before any work starts
        s.stimulus_config()
        s.train_config(None)
        return s

    @classmethod
    def load(cls, path=None, **overrides) -> "Settings":
        d = json.loads(Path(path).read_text()) if path is not None else {}
        if not isinstance(d, dict):
            raise SettingsError("config file must hold a JSON object")
        return cls.from_dict(d, **overrides)

    def stimulus_config(self) -> StimulusConfig:
        return StimulusConfig.from_dict(self.stimuli)

    def train_config(self, snr_db) -> TrainConfig:
        d = {**PROFILES[self.profile], **self.train, "seed": self.seed}
        if snr_db is not None or "snr_db" not in self.train:
            d["snr_db"] = snr_db
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "corpus_seed": self.corpus_seed,
            "seed": self.seed,
            "babble_seed": self.babble_seed,
            "stimuli": self.stimulus_config().to_dict(),
            "train": {k: v for k, v in self.train_config(None).to_dict().items() if k not in ("snr_db", "seed")},
            "eval": dict(self.eval),
        }

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Inputs:
    corpus: Corpus
    pretraining: list
    noise_bank: NoiseBank


def render_noise(settings: Settings, corpus: Corpus | None = None) -> NoiseBank:
    cfg = settings.stimulus_config()
    corpus = corpus or build_corpus(cfg, settings.corpus_seed)
    talkers = [
        synth_talker_stream(corpus.inventory, cfg, cfg.babble_seconds, settings.babble_seed, i)
        for i in range(cfg.babble_talkers)
    ]
    return render_babble(talkers, seed=settings.babble_seed)


def prepare_inputs(settings: Settings) -> Inputs:
    cfg = settings.stimulus_config()
    corpus = build_corpus(cfg, settings.corpus_seed)
    pre = build_pretraining_corpus(corpus.inventory, cfg, settings.corpus_seed)
    return Inputs(corpus, pre, render_noise(settings, corpus))


def train_model(settings: Settings, inputs: Inputs, snr_db, out_dir=None) -> tuple[CpcModel, list]:
    trainer = Trainer(settings.train_config(snr_db), inputs.pretraining, inputs.noise_bank)
    trainer.run(out_dir=out_dir)
    if out_dir is not None:
        trainer.save(out_dir)
    return trainer.model, list(trainer.losses)


def evaluate(model: CpcModel, corpus: Corpus, settings: Settings) -> dict:
    """Congruent CV plus audiovisual and audio-only forced choice, with raw tables."""
    ev = settings.eval
    rep = ev["representation"]
    congruent = corpus.congruent
    labels = [r.key for r in congruent]
    cong = model.embed_records(congruent, representation=rep)
    dist = dtw_matrix(cong)
    cv = cross_validate(cong, labels, ev["folds"], ev["k"], settings.seed, ev["n_resamples"], distances=dist)
    incong = corpus.incongruent
    av = run_forced_choice(incong, model.embed_records(incong, representation=rep), congruent, cong, ev["k"], ev["cross_speaker"], "audiovisual")
    ao_recs = corpus.audio_only
    ao_emb = model.embed_records(ao_recs, mode="audio_only", representation=rep)
    ao = run_forced_choice(ao_recs, ao_emb, congruent, cong, ev["k"], ev["cross_speaker"], "audio_only")
    return {"cv": cv, "audiovisual": av, "audio_only": ao, "congruent_distances": dist, "congruent_ids": [r.id for r in congruent]}


def _chi(a, b) -> dict:
    try:
        return compare_conditions(a, b)
    except DegenerateTableError as exc:
        rows, cols = 2, len(ROLES)
        return {"statistic": None, "df": (rows - 1) * (cols - 1), "p": None, "error": str(exc)}


def _condition_summary(result: dict, losses: list) -> dict:
    n = len(losses)
    tenth = max(1, n // 10)
    return {
        "cv": result["cv"].to_dict(),
        "audiovisual": result["audiovisual"].to_dict(),
        "audio_only": result["audio_only"].to_dict(),
        "loss": {
            "steps": n,
            "first_10pct_mean": float(np.mean(losses[:tenth])) if n else None,
            "last_10pct_mean": float(np.mean(losses[-tenth:])) if n else None,
            "last_100_mean": float(np.mean(losses[-100:])) if n else None,
        },
    }


def _header(settings: Settings, inputs: Inputs, kind: str) -> dict:
    return {
        "format_version": REPORT_VERSION,
        "kind": kind,
        "package_version": __version__,
        "config": settings.to_dict(),
        "config_hash": settings.hash(),
        "corpus_hash": manifest_hash(inputs.corpus.manifest()),
        "seeds": {"corpus": settings.corpus_seed, "train_eval": settings.seed, "babble": settings.babble_seed},
        "dtw_normalisation": "accumulated cost / path cell count",
        "k": settings.eval["k"],
        "reference_points": REFERENCE_POINTS,
    }


# ---------------------------------------------------------------- experiment 1


def experiment1(settings: Settings, out_dir=None, inputs: Inputs | None = None, noisy_snr: float = 0.0) -> dict:
    """Clean versus noise-trained model on the same corpus."""
    inputs = inputs or prepare_inputs(settings)
    report = _header(settings, inputs, "experiment1")
    report["conditions"] = {}
    results, failures = {}, {}
    for name, snr in (("clean", None), ("noisy", noisy_snr)):
        sub = Path(out_dir) / name if out_dir is not None else None
        try:
            model, losses = train_model(settings, inputs, snr, sub)
        except tc.NumericError as exc:
            failures[name] = str(exc)
            report["conditions"][name] = {"snr_db": snr, "failed": str(exc)}
            continue
        res = evaluate(model, inputs.corpus, settings)
        results[name] = res
        report["conditions"][name] = {"snr_db": snr, **_condition_summary(res, losses)}
    if len(results) == 2:
        report["chi_squared"] = {
            "audiovisual": _chi(results["clean"]["audiovisual"], results["noisy"]["audiovisual"]),
            "audio_only": _chi(results["clean"]["audio_only"], results["noisy"]["audio_only"]),
        }
    report["failures"] = failures
    if out_dir is not None:
        write_report(out_dir, report, results)
    report["_results"] = results
    return report


# ---------------------------------------------------------------- experiment 2


def _sweep_worker(args) -> tuple:
    settings_dict, snr, out_dir = args
    settings = Settings.from_dict(settings_dict)
    inputs = prepare_inputs(settings)
    sub = Path(out_dir) / f"snr_{snr:+g}" if out_dir is not None else None
    try:
        model, losses = train_model(settings, inputs, snr, sub)
    except tc.NumericError as exc:
        return snr, None, str(exc)
    res = evaluate(model, inputs.corpus, settings)
    return snr, (_condition_summary(res, losses), res), None


def worker_count(n_jobs: int) -> int:
    raw = os.environ.get("MCGURKLAB_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = max(1, int(raw))
        except ValueError:
            raise SettingsError(f"MCGURKLAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def _raw_settings(settings: Settings) -> dict:
    return {
        "profile": settings.profile,
        "corpus_seed": settings.corpus_seed,
        "seed": settings.seed,
        "babble_seed": settings.babble_seed,
        "stimuli": settings.stimuli,
        "train": settings.train,
        "eval": settings.eval,
    }


def experiment2(settings: Settings, snrs=DEFAULT_SNRS, out_dir=None) -> dict:
    """One model per training SNR; rows are merged in the order of ``snrs``."""
    snrs = [float(s) for s in snrs]
    if not snrs:
        raise SettingsError("empty SNR list")
    inputs = prepare_inputs(settings)
    report = _header(settings, inputs, "experiment2")
    jobs = [(_raw_settings(settings), s, out_dir) for s in snrs]
    workers = worker_count(len(jobs))
    if workers == 1:
        outcomes = [_sweep_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_worker, jobs))
    rows, results, failures = [], {}, {}
    for snr, payload, err in outcomes:
        if err is not None:
            failures[f"{snr:+g}"] = err
            rows.append({"snr_db": snr, "failed": err})
            continue
        summary, res = payload
        results[snr] = res
        rows.append({"snr_db": snr, **summary})
    report["rows"] = rows
    report["failures"] = failures
    report["workers"] = workers
    report["observations"] = _sweep_observations(rows)
    if out_dir is not None:
        write_sweep(out_dir, report, results)
    report["_results"] = results
    return report


def _sweep_observations(rows) -> dict:
    ok = [r for r in rows if "failed" not in r]
    share = {r["snr_db"]: r["audiovisual"]["proportions"]["visual"] + r["audiovisual"]["proportions"]["fused"] for r in ok}
    ordered = sorted(share, reverse=True)
    peak = max(share, key=share.get) if share else None
    return {
        "visual_plus_fused_by_snr": {f"{s:+g}": share[s] for s in ordered},
        "peak_snr_db": peak,
        "all_auditory_at_or_below_minus10": all(
            r["audiovisual"]["proportions"]["auditory"] == 1.0 for r in ok if r["snr_db"] <= -10
        )
        if any(r["snr_db"] <= -10 for r in ok)
        else None,
    }


# ---------------------------------------------------------------- human comparison


HUMAN_COLUMNS = ("stimulus_id", "participant_id", "chosen_option")
HUMAN_CONDITIONS = ("audiovisual", "audio_only")


class HumanDataError(ValueError):
    """Human response CSV does not match the expected schema."""


def read_human_csv(path) -> dict:
    """Per-condition response proportions from a human forced-choice CSV.

    Condition is taken from an optional ``condition`` column, otherwise from
    the stimulus id (ids containing ``-audio-`` or ending in ``-audio`` are
    audio-only).
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in HUMAN_COLUMNS if c not in cols]
        if missing:
            raise HumanDataError(f"missing columns {missing}; expected {list(HUMAN_COLUMNS)}")
        rows = list(reader)
    bad = []
    counts = {c: {r: 0 for r in ROLES} for c in HUMAN_CONDITIONS}
    for line, row in enumerate(rows, start=2):
        opt = (row.get("chosen_option") or "").strip()
        cond = (row.get("condition") or "").strip()
        if not cond:
            sid = row.get("stimulus_id") or ""
            cond = "audio_only" if ("-audio-" in sid or sid.endswith("-audio")) else "audiovisual"
        if opt not in ROLES or cond not in HUMAN_CONDITIONS or not (row.get("stimulus_id") or "").strip():
            bad.append(line)
            continue
        counts[cond][opt] += 1
    if bad:
        raise HumanDataError(f"invalid rows (line numbers): {bad}")
    out = {}
    for cond, c in counts.items():
        n = sum(c.values())
        if n:
            out[cond] = {"n": n, "counts": c, "proportions": {r: v / n for r, v in c.items()}}
    return out


def compare_human(report: dict, human: dict) -> dict:
    """Model and human proportions side by side, one row per (source, condition)."""
    rows = []
    conds = report.get("conditions") or {f"snr_{r['snr_db']:+g}": r for r in report.get("rows", [])}
    for name, c in conds.items():
        for cond in HUMAN_CONDITIONS:
            if cond in c:
                rows.append({"source": f"model:{name}", "condition": cond, "proportions": c[cond]["proportions"]})
    for cond, h in human.items():
        rows.append({"source": "human", "condition": cond, "proportions": h["proportions"], "n": h["n"]})
    return {
        "format_version": REPORT_VERSION,
        "kind": "compare_human",
        "model_report": {k: report.get(k) for k in ("kind", "config_hash", "corpus_hash")},
        "rows": rows,
        "reference_points": REFERENCE_POINTS,
    }


# ---------------------------------------------------------------- writers


def _strip(report: dict) -> dict:
    return {k: v for k, v in report.items() if not k.startswith("_")}


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def write_distances_csv(path, ids, dist) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "reference_id", "distance"])
        for i, q in enumerate(ids):
            for j, r in enumerate(ids):
                if i != j:
                    w.writerow([q, r, repr(float(dist[i, j]))])


def write_responses_csv(path, outcomes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stimulus_id", "condition", "chosen_option", "d_auditory", "d_visual", "d_fused"])
        for oc in outcomes:
            for sid, opt in oc.responses.items():
                prof = oc.profiles.get(sid, {})
                w.writerow([sid, oc.condition, opt] + [repr(prof.get(r, float("nan"))) for r in ROLES])


def write_report(out_dir, report: dict, results: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", _strip(report))
    for name, res in results.items():
        write_responses_csv(out / f"responses_{name}.csv", [res["audiovisual"], res["audio_only"]])
        write_distances_csv(out / f"distances_{name}.csv", res["congruent_ids"], res["congruent_distances"])


def write_sweep(out_dir, report: dict, results: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", _strip(report))
    with open(out / "sweep_responses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snr_db", "cv_accuracy", "ci_low", "ci_high", "p_auditory", "p_visual", "p_fused"])
        for row in report["rows"]:
            if "failed" in row:
                continue
            p = row["audiovisual"]["proportions"]
            cv = row["cv"]
            w.writerow([row["snr_db"], cv["accuracy"], cv["ci95"][0], cv["ci95"][1], p["auditory"], p["visual"], p["fused"]])
    with open(out / "sweep_distances.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snr_db", "stimulus_id", "d_auditory", "d_visual", "d_fused"])
        for snr, res in results.items():
            for sid, prof in res["audiovisual"].profiles.items():
                w.writerow([snr, sid] + [repr(prof[r]) for r in ROLES])
    for snr, res in results.items():
        write_responses_csv(out / f"responses_snr_{snr:+g}.csv", [res["audiovisual"], res["audio_only"]])


def timed(fn, *args, **kwargs):
    t = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t


def save_model(path, model: CpcModel, settings: Settings, snr_db) -> None:
    save_checkpoint(path, model, {"config_hash": settings.hash(), "snr_db": snr_db, "seed": settings.seed})
