"""Synthetic audiovisual word corpus with the McGurk triple structure.

Each word is an onset phoneme followed by a rime shared by the three words of
its triple. Phonemes live in a 2-D auditory space (rendered as three
harmonics) and a 2-D lip-shape space (rendered as a piecewise-linear lip
trajectory). Lip shapes come from a handful of viseme classes shared across
triples, so the video narrows a word down without identifying it, while the
audio points are unique per phoneme. The fused onset of every triple sits on
the auditory segment between the auditory and visual onsets and shares the
viseme class its spelling implies, so fusion is possible without ever being
shown to a model.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .signal import Waveform, read_wav, write_wav

__all__ = [
    "MCGURK_TRIPLES",
    "ROLES",
    "ConfigError",
    "ProtocolError",
    "StimulusConfig",
    "Phoneme",
    "WordSpec",
    "PhonemeInventory",
    "LipTrack",
    "StimulusRecord",
    "Corpus",
    "build_inventory",
    "synth_recording",
    "make_incongruent",
    "make_audio_only",
    "build_corpus",
    "build_pretraining_corpus",
    "synth_talker_stream",
    "save_corpus",
    "load_corpus",
    "manifest_hash",
]

# (auditory, visual, fused) word triples.
MCGURK_TRIPLES = [
    ("Bat", "Vet", "Vat"),
    ("Bet", "Vat", "Vet"),
    ("Bent", "Vest", "Vent"),
    ("Boat", "Vow", "Vote"),
    ("Might", "Die", "Night"),
    ("Mail", "Deal", "Nail"),
    ("Mat", "Dead", "Gnat"),
    ("Moo", "Goo", "New"),
    ("Met", "Gal", "Net"),
]
ROLES = ("auditory", "visual", "fused")

# Lip-shape class centers as (aperture, spread); a closed neutral mouth is the
# origin. Consonant gestures are small next to vowel shapes, as in real lips.
ONSET_VISEMES = {
    "bilabial": (0.0, 0.0),
    "labiodental": (0.12, 0.12),
    "alveolar": (0.25, 0.05),
    "velar": (0.3, -0.05),
}
RIME_VISEMES = {
    "open": (0.9, 0.15),
    "spread": (0.55, 0.45),
    "rounded": (0.45, -0.5),
    "diphthong": (0.75, 0.3),
}
_ONSET_CLASS = {"B": "bilabial", "M": "bilabial", "V": "labiodental", "D": "alveolar", "N": "alveolar", "G": "velar"}
# rime class follows the vowel of the auditory word of each triple
_RIME_CLASS = ["open", "spread", "spread", "rounded", "diphthong", "spread", "open", "rounded", "spread"]


def onset_viseme(text: str) -> str:
    """Viseme class of a word's initial consonant (silent letters skipped)."""
    if text.lower().startswith("gn"):
        return "alveolar"
    return _ONSET_CLASS[text[0].upper()]
CONDITIONS = ("congruent", "incongruent", "audio_only")


class ConfigError(ValueError):
    """Invalid or unsatisfiable stimulus configuration."""


class ProtocolError(ValueError):
    """A stimulus pairing violates the experimental protocol."""


@dataclass
class StimulusConfig:
    sample_rate: int = 16000
    lip_frame_rate: int = 25
    frame_ms: float = 10.0  # unit of Phoneme.duration_frames
    onset_frames: int = 10
    rime_frames: int = 20
    crossfade_ms: float = 10.0
    n_takes: int = 5
    audio_jitter: float = 0.02
    visual_jitter: float = 0.03
    lip_noise: float = 0.02  # per-frame tracking noise
    speakers: dict = field(
        default_factory=lambda: {
            "S1": {"audio_offset": [0.0, 0.0], "visual_offset": [0.0, 0.0]},
            "S2": {"audio_offset": [0.15, 0.05], "visual_offset": [0.05, -0.05]},
        }
    )
    # inventory geometry
    min_onset_separation: float = 0.12
    min_av_audio_distance: float = 0.45
    fused_position: tuple = (0.35, 0.65)  # fraction of the way from auditory to visual onset
    max_retries: int = 10000
    # pretraining corpus
    pretrain_utterances: int = 400
    pretrain_syllables: int = 4
    pretrain_speakers: int = 12
    # babble
    babble_talkers: int = 20
    babble_seconds: float = 60.0

    @classmethod
    def from_dict(cls, d: dict) -> "StimulusConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown stimulus config keys: {sorted(unknown)}")
        d = dict(d)
        if "fused_position" in d:
            d["fused_position"] = tuple(d["fused_position"])
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def samples_per_frame(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))


@dataclass(frozen=True)
class Phoneme:
    id: str
    audio_feature: tuple
    visual_feature: tuple
    duration_frames: int


@dataclass(frozen=True)
class WordSpec:
    text: str
    phonemes: tuple
    role: str
    triple_id: int


@dataclass
class PhonemeInventory:
    phonemes: dict
    words: list

    def triple(self, triple_id: int) -> dict:
        return {w.role: w for w in self.words if w.triple_id == triple_id}

    def word(self, text: str, triple_id: int | None = None) -> WordSpec:
        for w in self.words:
            if w.text == text and (triple_id is None or w.triple_id == triple_id):
                return w
        raise KeyError(text)

    def fused_for(self, word: WordSpec) -> WordSpec:
        return self.triple(word.triple_id)["fused"]

    @property
    def onsets(self) -> list:
        return [p for p in self.phonemes.values() if p.id.startswith("on")]

    @property
    def rimes(self) -> list:
        return [p for p in self.phonemes.values() if p.id.startswith("ri")]


@dataclass(frozen=True)
class LipTrack:
    frames: np.ndarray
    frame_rate: int = 25

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ConfigError("lip track must be a non-empty frames x features array")
        if not np.all(np.isfinite(arr)):
            raise ConfigError("lip track contains non-finite values")
        object.__setattr__(self, "frames", arr)

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class StimulusRecord:
    id: str
    speaker: str
    take: int
    condition: str
    audio_word: WordSpec
    visual_word: WordSpec
    waveform: Waveform
    liptrack: LipTrack
    fused_word: WordSpec | None = None

    @property
    def label(self) -> str:
        return self.audio_word.text

    @property
    def key(self) -> str:
        """Word identity unique across triples (word texts repeat between triples)."""
        return f"{self.audio_word.triple_id}:{self.audio_word.text}"


# ---------------------------------------------------------------- inventory


def _floats(v) -> tuple:
    return tuple(float(x) for x in v)


def _dist(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def build_inventory(config: StimulusConfig | None = None, seed: int = 0) -> PhonemeInventory:
    """Sample phoneme feature points satisfying the triple geometry.

    Every triple gets three onsets (auditory, visual, fused) and one rime.
    Whole-triple proposals are rejection sampled; the fused auditory point
    is a convex combination of the auditory and visual onsets.
    """
    cfg = config or StimulusConfig()
    lo, hi = cfg.fused_position
    if not 0.0 < lo <= hi < 1.0:
        raise ConfigError("fused_position must lie strictly inside (0, 1)")
    rng = np.random.default_rng(seed)
    onsets_audio: list[np.ndarray] = []
    phonemes: dict[str, Phoneme] = {}
    words: list[WordSpec] = []
    rimes: list[np.ndarray] = []
    retries = 0
    for tid, texts in enumerate(MCGURK_TRIPLES, start=1):
        while True:
            retries += 1
            if retries > cfg.max_retries:
                raise ConfigError("inventory constraints unsatisfiable within max_retries")
            a_aud, v_aud = rng.uniform(0, 1, 2), rng.uniform(0, 1, 2)
            if _dist(a_aud, v_aud) < cfg.min_av_audio_distance:
                continue
            lam = rng.uniform(lo, hi)
            f_aud = a_aud + lam * (v_aud - a_aud)
            new = [a_aud, v_aud, f_aud]
            if any(_dist(p, q) < cfg.min_onset_separation for p in new for q in onsets_audio):
                continue
            if min(_dist(a_aud, f_aud), _dist(v_aud, f_aud)) < cfg.min_onset_separation:
                continue
            rime_aud = rng.uniform(0, 1, 2)
            if any(_dist(rime_aud, q) < cfg.min_onset_separation for q in rimes):
                continue
            break
        onsets_audio.extend(new)
        rimes.append(rime_aud)
        rime_vis = RIME_VISEMES[_RIME_CLASS[tid - 1]]
        rime = Phoneme(f"ri{tid}", _floats(rime_aud), _floats(rime_vis), cfg.rime_frames)
        phonemes[rime.id] = rime
        visemes = [ONSET_VISEMES[onset_viseme(t)] for t in texts]
        for role, text, aud, vis in zip(ROLES, texts, new, visemes):
            onset = Phoneme(f"on{tid}{role[0]}", _floats(aud), _floats(vis), cfg.onset_frames)
            phonemes[onset.id] = onset
            words.append(WordSpec(text, (onset.id, rime.id), role, tid))
    return PhonemeInventory(phonemes, words)


# ---------------------------------------------------------------- rendering


def _harmonics(feature, n: int, rate: int) -> np.ndarray:
    x, y = feature
    f0 = 200.0 * 2.0 ** (1.6 * x)
    tilt = 0.2 + 1.8 * y
    amps = np.exp(-tilt * np.arange(3))
    amps /= amps.sum()
    t = np.arange(n) / rate
    return sum(a * np.sin(2 * np.pi * (k + 1) * f0 * t) for k, a in enumerate(amps))


def _render_audio(features, durations, cfg: StimulusConfig) -> np.ndarray:
    spf = cfg.samples_per_frame
    bounds = np.cumsum([0] + [d * spf for d in durations])
    total = int(bounds[-1])
    half = int(round(cfg.sample_rate * cfg.crossfade_ms / 2000.0))
    out = np.zeros(total)
    for i, feat in enumerate(features):
        start = max(0, bounds[i] - half)
        stop = min(total, bounds[i + 1] + half)
        seg = _harmonics(feat, stop - start, cfg.sample_rate)
        env = np.ones(stop - start)
        if i > 0 and half:
            env[: 2 * half] = np.linspace(0.0, 1.0, 2 * half)
        if i < len(features) - 1 and half:
            env[-2 * half:] = np.linspace(1.0, 0.0, 2 * half)
        out[start:stop] += seg * env
    return 0.8 * out


def _render_lips(features, durations, cfg: StimulusConfig) -> np.ndarray:
    frame_s = cfg.frame_ms / 1000.0
    bounds = np.cumsum([0] + list(durations)) * frame_s
    centers = (bounds[:-1] + bounds[1:]) / 2
    n = int(round(bounds[-1] * cfg.lip_frame_rate))
    times = np.arange(max(n, 1)) / cfg.lip_frame_rate
    feats = np.asarray(features)
    return np.stack([np.interp(times, centers, feats[:, d]) for d in range(feats.shape[1])], axis=1)


def _speaker(cfg: StimulusConfig, speaker) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(speaker, dict):
        spec = speaker
    else:
        if speaker not in cfg.speakers:
            raise ConfigError(f"unknown speaker {speaker!r}")
        spec = cfg.speakers[speaker]
    return np.asarray(spec["audio_offset"], float), np.asarray(spec["visual_offset"], float)


def render_phonemes(inventory, phoneme_ids, speaker, cfg: StimulusConfig, rng) -> tuple[Waveform, LipTrack]:
    aoff, voff = _speaker(cfg, speaker)
    ph = [inventory.phonemes[p] for p in phoneme_ids]
    afeat = [np.asarray(p.audio_feature) + aoff + rng.normal(0, cfg.audio_jitter, 2) if cfg.audio_jitter else np.asarray(p.audio_feature) + aoff for p in ph]
    vfeat = [np.asarray(p.visual_feature) + voff + rng.normal(0, cfg.visual_jitter, 2) if cfg.visual_jitter else np.asarray(p.visual_feature) + voff for p in ph]
    durations = [p.duration_frames for p in ph]
    audio = _render_audio(afeat, durations, cfg)
    lips = _render_lips(vfeat, durations, cfg)
    if cfg.lip_noise:
        lips = lips + rng.normal(0, cfg.lip_noise, lips.shape)
    return Waveform(audio, cfg.sample_rate), LipTrack(lips, cfg.lip_frame_rate)


def _take_rng(seed: int, *keys) -> np.random.Generator:
    digest = hashlib.sha256(repr((seed,) + keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def synth_recording(
    word: WordSpec,
    speaker: str,
    take: int,
    seed: int,
    inventory: PhonemeInventory,
    config: StimulusConfig | None = None,
) -> StimulusRecord:
    """Render one congruent recording of ``word``.

    Per-take jitter is drawn from a generator keyed on (seed, word, speaker,
    take), so any single record can be regenerated in isolation.
    """
    cfg = config or StimulusConfig()
    for p in word.phonemes:
        if p not in inventory.phonemes:
            raise ConfigError(f"phoneme {p!r} missing from inventory")
    rng = _take_rng(seed, word.triple_id, word.text, speaker, take)
    wav, lips = render_phonemes(inventory, word.phonemes, speaker, cfg, rng)
    return StimulusRecord(
        id=f"t{word.triple_id}-{word.role}-{word.text}-{speaker}-take{take}",
        speaker=speaker,
        take=take,
        condition="congruent",
        audio_word=word,
        visual_word=word,
        waveform=wav,
        liptrack=lips,
        fused_word=inventory.fused_for(word),
    )


def make_incongruent(audio_rec: StimulusRecord, video_rec: StimulusRecord, seed=None, inventory=None) -> StimulusRecord:
    """Dub ``audio_rec``'s audio onto ``video_rec``'s lip track.

    ``seed`` is unused by the dub itself; callers choosing the video take at
    random pass the generator they used so the pairing stays reproducible.
    """
    if audio_rec.speaker != video_rec.speaker:
        raise ProtocolError("incongruent pairings must be within speaker")
    aw, vw = audio_rec.audio_word, video_rec.visual_word
    if aw.role != "auditory" or vw.role != "visual":
        raise ProtocolError("audio must come from the auditory word and video from the visual word")
    if aw.triple_id != vw.triple_id:
        raise ProtocolError("audio and video words come from different triples")
    lips = video_rec.liptrack
    n_target = int(round(audio_rec.waveform.duration * lips.frame_rate))
    if len(lips) != n_target:
        # align the dubbed video to the audio length
        idx = np.minimum(np.arange(n_target), len(lips) - 1)
        lips = LipTrack(lips.frames[idx], lips.frame_rate)
    fused = audio_rec.fused_word or (inventory.fused_for(aw) if inventory is not None else None)
    return StimulusRecord(
        id=f"t{aw.triple_id}-mcgurk-{aw.text}+{vw.text}-{audio_rec.speaker}-a{audio_rec.take}v{video_rec.take}",
        speaker=audio_rec.speaker,
        take=audio_rec.take,
        condition="incongruent",
        audio_word=aw,
        visual_word=vw,
        waveform=audio_rec.waveform,
        liptrack=lips,
        fused_word=fused,
    )


def make_audio_only(rec: StimulusRecord) -> StimulusRecord:
    if rec.condition == "audio_only":
        return rec
    base = rec.id.replace("-mcgurk-", "-audio-")
    if base == rec.id:
        base = rec.id + "-audio"
    return replace(
        rec,
        id=base,
        condition="audio_only",
        liptrack=LipTrack(np.zeros_like(rec.liptrack.frames), rec.liptrack.frame_rate),
    )


# ---------------------------------------------------------------- corpora


@dataclass
class Corpus:
    config: StimulusConfig
    seed: int
    inventory: PhonemeInventory
    records: list

    def by_condition(self, condition: str) -> list:
        return [r for r in self.records if r.condition == condition]

    @property
    def congruent(self) -> list:
        return self.by_condition("congruent")

    @property
    def incongruent(self) -> list:
        return self.by_condition("incongruent")

    @property
    def audio_only(self) -> list:
        return self.by_condition("audio_only")

    def manifest(self) -> dict:
        return {
            "format_version": 1,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "records": {r.id: _manifest_entry(r) for r in self.records},
        }


def _manifest_entry(r: StimulusRecord) -> dict:
    return {
        "speaker": r.speaker,
        "take": r.take,
        "condition": r.condition,
        "triple_id": r.audio_word.triple_id,
        "audio_word": r.audio_word.text,
        "visual_word": r.visual_word.text,
        "fused_label": r.fused_word.text if r.fused_word else None,
        "wav": f"wav/{r.id}.wav",
        "lips": f"lips/{r.id}.csv",
    }


def build_corpus(config: StimulusConfig | None = None, seed: int = 0) -> Corpus:
    """Congruent takes of all 27 words, McGurk dubs and audio-only controls."""
    cfg = config or StimulusConfig()
    inv = build_inventory(cfg, seed)
    speakers = list(cfg.speakers)
    congruent = [
        synth_recording(w, s, take, seed, inv, cfg)
        for w in inv.words
        for s in speakers
        for take in range(1, cfg.n_takes + 1)
    ]
    index = {(r.audio_word.triple_id, r.audio_word.role, r.speaker, r.take): r for r in congruent}
    pick = _take_rng(seed, "dub")
    incongruent = []
    for tid in range(1, len(MCGURK_TRIPLES) + 1):
        for s in speakers:
            for take in range(1, cfg.n_takes + 1):
                vtake = int(pick.integers(1, cfg.n_takes + 1))
                incongruent.append(
                    make_incongruent(index[(tid, "auditory", s, take)], index[(tid, "visual", s, vtake)], pick)
                )
    audio_only = [make_audio_only(r) for r in incongruent]
    return Corpus(cfg, seed, inv, congruent + incongruent + audio_only)


def _random_speakers(cfg: StimulusConfig, n: int, rng) -> list[dict]:
    return [
        {
            "audio_offset": [float(rng.uniform(-0.05, 0.2)), float(rng.uniform(-0.05, 0.1))],
            "visual_offset": [float(rng.uniform(-0.08, 0.08)), float(rng.uniform(-0.08, 0.08))],
        }
        for _ in range(n)
    ]


def _random_utterance(inventory, cfg, speaker, n_syll, rng) -> tuple[Waveform, LipTrack]:
    onsets, rimes = inventory.onsets, inventory.rimes
    ids: list[str] = []
    for _ in range(n_syll):
        ids.append(onsets[rng.integers(len(onsets))].id)
        ids.append(rimes[rng.integers(len(rimes))].id)
    return render_phonemes(inventory, ids, speaker, cfg, rng)


def build_pretraining_corpus(
    inventory: PhonemeInventory, config: StimulusConfig | None = None, seed: int = 0
) -> list[tuple[Waveform, LipTrack]]:
    """Congruent multi-syllable utterances from unseen talkers.

    Syllables combine any onset with any rime of the inventory; the test
    speakers are not among the talkers.
    """
    cfg = config or StimulusConfig()
    rng = _take_rng(seed, "pretrain")
    speakers = _random_speakers(cfg, cfg.pretrain_speakers, rng)
    return [
        _random_utterance(inventory, cfg, speakers[i % len(speakers)], cfg.pretrain_syllables, rng)
        for i in range(cfg.pretrain_utterances)
    ]


def synth_talker_stream(inventory, config: StimulusConfig | None, seconds: float, seed: int, talker: int) -> Waveform:
    """A continuous stream of random syllables from one synthetic talker."""
    cfg = config or StimulusConfig()
    rng = _take_rng(seed, "talker", talker)
    speaker = _random_speakers(cfg, 1, rng)[0]
    need = int(round(seconds * cfg.sample_rate))
    syll = cfg.samples_per_frame * (cfg.onset_frames + cfg.rime_frames)
    n_syll = -(-need // syll)
    wav, _ = _random_utterance(inventory, cfg, speaker, n_syll, rng)
    return Waveform(wav.samples[:need], cfg.sample_rate)


# ---------------------------------------------------------------- disk format


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def save_corpus(corpus: Corpus, out_dir) -> dict:
    """Write WAVs, lip CSVs and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "lips").mkdir(parents=True, exist_ok=True)
    for r in corpus.records:
        write_wav(out / "wav" / f"{r.id}.wav", r.waveform)
        with open(out / "lips" / f"{r.id}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"lip{i}" for i in range(r.liptrack.frames.shape[1])])
            w.writerows([[repr(float(v)) for v in row] for row in r.liptrack.frames])
    manifest = corpus.manifest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_corpus(out_dir) -> Corpus:
    """Reload a saved corpus; the inventory is rebuilt from the stored config and seed."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = StimulusConfig.from_dict(manifest["config"])
    seed = int(manifest["seed"])
    inv = build_inventory(cfg, seed)
    records = []
    for rid, entry in manifest["records"].items():
        tid = entry["triple_id"]
        aw = inv.word(entry["audio_word"], tid)
        vw = inv.word(entry["visual_word"], tid)
        with open(out / entry["lips"], newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        lips = LipTrack(np.array([[float(v) for v in row] for row in rows]), cfg.lip_frame_rate)
        records.append(
            StimulusRecord(
                id=rid,
                speaker=entry["speaker"],
                take=int(entry["take"]),
                condition=entry["condition"],
                audio_word=aw,
                visual_word=vw,
                waveform=read_wav(out / entry["wav"]),
                liptrack=lips,
                fused_word=inv.fused_for(aw),
            )
        )
    return Corpus(cfg, seed, inv, records)
