"""Toy speech corpus and dynamic mixing into dual-view training examples.

Utterances are harmonic stacks: each phone is a windowed sum of partials at
multiples of the speaker's f0, with partial amplitudes shaped by a per-phone
formant envelope and the speaker's timbre weights. Interference is either
another speaker, tilted pink noise, or both.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import FrontendConfig, MixConfig
from .frontend import frame_centers, n_frames

MIXTURE_TYPES = ("noisy", "two_talker", "noisy_two_talker")

# (F1, F2) in Hz for the 12-phone toy alphabet
PHONE_FORMANTS = np.array([
    [270, 2290], [390, 1990], [530, 1840], [660, 1720],
    [730, 1090], [570, 840], [440, 1020], [300, 870],
    [490, 1350], [350, 2700], [800, 1300], [620, 2400],
], dtype=float)
FORMANT_BW = 180.0
_SPLIT_CODES = {"train": 0, "eval": 1, "probe": 2, "gradcheck": 3}


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.samples.size == 0:
            raise ValueError("empty waveform")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    f0: float
    harmonic_weights: np.ndarray = field(compare=False)


@dataclass
class MixtureExample:
    id: str
    clean: Waveform
    view_a: Waveform
    view_b: Waveform
    enrollment: Waveform
    target_speaker: int
    mixture_type: str
    phone_labels: np.ndarray
    seed: int
    mixture_type_b: str = ""
    snr_db: dict = field(default_factory=dict)
    gain: float = 1.0
    clean_phones: tuple[int, ...] = ()
    enrollment_phones: tuple[int, ...] = ()
    interferer: Waveform | None = None
    interferer_speaker: int | None = None
    interferer_phone_labels: np.ndarray | None = None
    interferer_enrollment: Waveform | None = None
    # pre-normalization interference added to the clean target, per view
    interference_a: np.ndarray | None = field(default=None, repr=False)
    interference_b: np.ndarray | None = field(default=None, repr=False)


# --- speakers and utterances ------------------------------------------------

def make_speakers(cfg: MixConfig) -> list[SpeakerProfile]:
    if cfg.f0_spacing < 10.0:
        raise ValueError("speaker f0 spacing must be at least 10 Hz")
    nyquist = cfg.sample_rate / 2
    speakers = []
    for i in range(cfg.n_speakers):
        rng = np.random.default_rng([cfg.speaker_seed, 7919, i])
        f0 = cfg.f0_min + cfg.f0_spacing * i
        if cfg.n_harmonics * f0 >= nyquist:
            raise ValueError(f"speaker {i}: {cfg.n_harmonics} partials of {f0} Hz exceed Nyquist")
        weights = rng.uniform(0.2, 1.0, cfg.n_harmonics)
        weights[0] = 1.0
        speakers.append(SpeakerProfile(i, f0, weights))
    # interleave so that consecutive ids are not adjacent in pitch
    order = np.random.default_rng([cfg.speaker_seed, 104729]).permutation(cfg.n_speakers)
    f0s = [speakers[j].f0 for j in order]
    return [SpeakerProfile(i, f0s[i], speakers[i].harmonic_weights) for i in range(cfg.n_speakers)]


def phone_envelope(phone: int, freqs: np.ndarray) -> np.ndarray:
    f1, f2 = PHONE_FORMANTS[phone]
    g = lambda c: np.exp(-0.5 * ((freqs - c) / FORMANT_BW) ** 2)
    return np.maximum(g(f1), 0.7 * g(f2))


def partial_amplitudes(profile: SpeakerProfile, phone: int) -> np.ndarray:
    h = np.arange(1, len(profile.harmonic_weights) + 1)
    # partials above the fundamental stay below it so f0 remains the spectral peak
    amps = 0.95 * profile.harmonic_weights * (0.05 + 0.95 * phone_envelope(phone, h * profile.f0))
    amps[0] = 1.0
    return amps


def _phone_window(n: int, sample_rate: int) -> np.ndarray:
    fade = min(n // 2, int(0.008 * sample_rate))
    w = np.ones(n)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        w[:fade] = ramp
        w[n - fade:] = ramp[::-1]
    return w


def synth_utterance(
    profile: SpeakerProfile,
    phone_seq: Sequence[int],
    dur_per_phone: float | Sequence[float],
    seed: int,
    sample_rate: int = 16000,
    n_phones: int = 12,
    level_rms: float = 0.05,
    frontend: FrontendConfig | None = None,
) -> tuple[Waveform, np.ndarray]:
    """Render ``phone_seq`` for ``profile``; return the waveform and per-frame phone labels."""
    phone_seq = [int(p) for p in phone_seq]
    if not phone_seq:
        raise ValueError("phone_seq must be non-empty")
    for p in phone_seq:
        if not 0 <= p < n_phones:
            raise ValueError(f"unknown phone id {p}")
    durs = np.broadcast_to(np.asarray(dur_per_phone, dtype=float), (len(phone_seq),))
    if np.any(durs < 0.04 - 1e-12):
        raise ValueError("phone duration must be at least 40 ms")
    lengths = np.round(durs * sample_rate).astype(int)

    rng = np.random.default_rng(seed)
    n_h = len(profile.harmonic_weights)
    phases = rng.uniform(0, 2 * np.pi, n_h)
    freqs = profile.f0 * np.arange(1, n_h + 1)

    total = int(lengths.sum())
    t = np.arange(total) / sample_rate
    out = np.empty(total)
    phone_of_sample = np.empty(total, dtype=np.int64)
    start = 0
    for p, n in zip(phone_seq, lengths):
        seg_t = t[start:start + n]
        amps = partial_amplitudes(profile, p)
        seg = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * seg_t[None, :] + phases[:, None])).sum(0)
        out[start:start + n] = seg * _phone_window(n, sample_rate)
        phone_of_sample[start:start + n] = p
        start += n
    out *= level_rms / max(rms(out), 1e-12)

    labels = frame_labels(phone_of_sample, frontend or FrontendConfig())
    return Waveform(out, sample_rate), labels


def frame_labels(per_sample: np.ndarray, frontend: FrontendConfig) -> np.ndarray:
    """Per-frame labels: the per-sample label at each frame's receptive-field center."""
    t = n_frames(len(per_sample), frontend.kernels, frontend.strides)
    centers = frame_centers(t, frontend.kernels, frontend.strides)
    return per_sample[centers].astype(np.int64) if t else np.zeros(0, dtype=np.int64)


# --- mixing -----------------------------------------------------------------

def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Crop or loop ``x`` to exactly ``n`` samples."""
    if len(x) >= n:
        return x[:n]
    reps = -(-n // len(x))
    return np.tile(x, reps)[:n]


def mixing_gain(signal: np.ndarray, interference: np.ndarray, snr_db: float) -> float:
    r = rms(interference)
    if r == 0.0:
        raise ValueError("interference is silent; SNR is undefined")
    return rms(signal) / r * 10.0 ** (-snr_db / 20.0)


def mix_at_snr(signal, interference, snr_db: float):
    """Return ``signal + g * interference`` with g set so the mixture has the requested SNR."""
    s = np.asarray(getattr(signal, "samples", signal), dtype=np.float64)
    n = fit_length(np.asarray(getattr(interference, "samples", interference), dtype=np.float64), len(s))
    out = s + mixing_gain(s, n, snr_db) * n
    if isinstance(signal, Waveform):
        return Waveform(out, signal.sample_rate)
    return out


def pink_noise(n: int, tilt: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with power spectrum ~ 1 / f^(1 + tilt)."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=float)
    f[0] = 1.0
    spec *= f ** (-(1.0 + tilt) / 2.0)
    spec[0] = 0.0
    x = np.fft.irfft(spec, n)
    return x / max(rms(x), 1e-12)


def sample_phone_seq(rng: np.random.Generator, length: int, cfg: MixConfig) -> list[int]:
    """Markov phone sequence: each phone prefers one fixed successor."""
    P = cfg.n_phones
    seq = [int(rng.integers(P))]
    for _ in range(length - 1):
        if rng.random() < cfg.phone_bigram_strength:
            seq.append((5 * seq[-1] + 3) % P)
        else:
            seq.append(int(rng.integers(P)))
    return seq


def _utterance(profile, rng, cfg, frontend, n_phones=None, min_samples=None, avoid=None):
    while True:
        k = n_phones if n_phones is not None else int(rng.integers(cfg.min_phones, cfg.max_phones + 1))
        if min_samples is not None:
            k = int(math.ceil(min_samples / (cfg.phone_dur_min * cfg.sample_rate))) + 1
        seq = sample_phone_seq(rng, k, cfg)
        if avoid is None or tuple(seq) != tuple(avoid):
            break
    durs = rng.uniform(cfg.phone_dur_min, cfg.phone_dur_max, len(seq))
    wav, labels = synth_utterance(profile, seq, durs, int(rng.integers(2**31)), cfg.sample_rate,
                                  cfg.n_phones, cfg.level_rms, frontend)
    return wav, labels, seq


def sample_example(
    cfg: MixConfig,
    rng: np.random.Generator,
    speakers: list[SpeakerProfile] | None = None,
    frontend: FrontendConfig | None = None,
    example_id: str = "ex",
    seed: int = 0,
    mixture_type: str | None = None,
) -> MixtureExample:
    """Draw one dual-view example.

    The type of view A is drawn uniformly from :data:`MIXTURE_TYPES` unless
    forced; view B draws its own type and interference independently.
    """
    frontend = frontend or FrontendConfig()
    speakers = speakers if speakers is not None else make_speakers(cfg)
    if mixture_type is not None and mixture_type not in MIXTURE_TYPES:
        raise ValueError(f"unknown mixture type {mixture_type!r}")
    type_a = mixture_type or MIXTURE_TYPES[int(rng.integers(3))]
    type_b = MIXTURE_TYPES[int(rng.integers(3))]
    if len(speakers) < 2 and ("two_talker" in type_a or "two_talker" in type_b):
        raise ValueError("two-talker mixtures need at least 2 speakers")

    target = speakers[int(rng.integers(len(speakers)))]
    s, labels, seq = _utterance(target, rng, cfg, frontend)
    L = len(s)
    n_enroll = int(round(cfg.enroll_dur * cfg.sample_rate))
    enroll, _, enroll_seq = _utterance(target, rng, cfg, frontend, min_samples=n_enroll, avoid=seq)
    enroll = Waveform(enroll.samples[:n_enroll], cfg.sample_rate)

    snr_info: dict = {}
    extra: dict = {}

    def draw_view(kind: str, tag: str) -> np.ndarray:
        total = np.zeros(L)
        info = {"type": kind}
        if "two_talker" in kind:
            others = [p for p in speakers if p.speaker_id != target.speaker_id]
            other = others[int(rng.integers(len(others)))]
            iw, i_labels, _ = _utterance(other, rng, cfg, frontend, min_samples=L)
            i_samples = iw.samples[:L]
            sir = float(rng.uniform(cfg.speech_level_min_db, cfg.speech_level_max_db))
            total += mixing_gain(s.samples, i_samples, sir) * i_samples
            info["speech_db"] = sir
            info["interferer_speaker"] = other.speaker_id
            if tag == "a":
                extra["interferer"] = i_samples
                extra["interferer_speaker"] = other.speaker_id
                extra["interferer_labels"] = i_labels[: len(labels)]
                ie, _, _ = _utterance(other, rng, cfg, frontend, min_samples=n_enroll)
                extra["interferer_enrollment"] = ie.samples[:n_enroll]
        if "noisy" in kind:
            noise = pink_noise(L, float(rng.uniform(-0.5, 0.5)), rng)
            snr = float(rng.uniform(cfg.snr_min_db, cfg.snr_max_db))
            total += mixing_gain(s.samples, noise, snr) * noise
            info["noise_db"] = snr
        snr_info[tag] = info
        return total

    n_a = draw_view(type_a, "a")
    n_b = draw_view(type_b, "b")

    peak = max(np.abs(s.samples + n_a).max(), np.abs(s.samples + n_b).max(), np.abs(s.samples).max())
    gain = min(1.0, 0.99 / peak)
    f32 = lambda x: Waveform(np.asarray(x, dtype=np.float32), cfg.sample_rate)

    interferer = interferer_labels = interferer_enrollment = None
    if "interferer" in extra:
        interferer = f32(extra["interferer"])
        interferer_labels = extra["interferer_labels"]
        interferer_enrollment = f32(extra["interferer_enrollment"])

    return MixtureExample(
        id=example_id,
        clean=f32(gain * s.samples),
        view_a=f32(gain * (s.samples + n_a)),
        view_b=f32(gain * (s.samples + n_b)),
        enrollment=f32(enroll.samples),
        target_speaker=target.speaker_id,
        mixture_type=type_a,
        mixture_type_b=type_b,
        phone_labels=labels,
        seed=seed,
        snr_db=snr_info,
        gain=float(gain),
        clean_phones=tuple(seq),
        enrollment_phones=tuple(enroll_seq),
        interferer=interferer,
        interferer_speaker=extra.get("interferer_speaker"),
        interferer_phone_labels=interferer_labels,
        interferer_enrollment=interferer_enrollment,
        interference_a=n_a,
        interference_b=n_b,
    )


def example_seed(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODES[split], index])


def make_dataset(
    cfg: MixConfig,
    seed: int,
    n: int,
    split: str = "train",
    frontend: FrontendConfig | None = None,
    mixture_type: str | None = None,
) -> list[MixtureExample]:
    """Deterministic list of ``n`` examples; example i depends only on (seed, split, i)."""
    speakers = make_speakers(cfg)
    return [
        sample_example(cfg, example_seed(seed, split, i), speakers, frontend,
                       example_id=f"{split}-{i:05d}", seed=seed, mixture_type=mixture_type)
        for i in range(n)
    ]


# --- manifest I/O -----------------------------------------------------------

_AUDIO_FIELDS = ("clean", "view_a", "view_b", "enrollment", "interferer", "interferer_enrollment")


def write_pcm(path: Path, samples: np.ndarray) -> None:
    np.asarray(samples, dtype="<f4").tofile(path)


def read_pcm(path: Path) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").astype(np.float32)


def write_manifest(examples: Iterable[MixtureExample], out_dir: str | Path, name: str = "manifest.jsonl") -> Path:
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    path = out / name
    with path.open("w") as fh:
        for ex in examples:
            paths = {}
            for f in _AUDIO_FIELDS:
                wav = getattr(ex, f)
                if wav is None:
                    continue
                rel = f"audio/{ex.id}_{f}.f32"
                write_pcm(out / rel, wav.samples)
                paths[f] = rel
            record = {
                "id": ex.id,
                "paths": paths,
                "sample_rate": ex.clean.sample_rate,
                "target_speaker": ex.target_speaker,
                "mixture_type": ex.mixture_type,
                "mixture_type_b": ex.mixture_type_b,
                "snr_db": ex.snr_db,
                "seed": ex.seed,
                "gain": ex.gain,
                "phone_labels": ex.phone_labels.tolist(),
                "clean_phones": list(ex.clean_phones),
                "enrollment_phones": list(ex.enrollment_phones),
                "interferer_speaker": ex.interferer_speaker,
                "interferer_phone_labels": (
                    None if ex.interferer_phone_labels is None else ex.interferer_phone_labels.tolist()
                ),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> list[MixtureExample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    examples = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        sr = r["sample_rate"]
        wav = {f: Waveform(read_pcm(root / p), sr) for f, p in r["paths"].items()}
        il = r.get("interferer_phone_labels")
        examples.append(MixtureExample(
            id=r["id"],
            clean=wav["clean"],
            view_a=wav["view_a"],
            view_b=wav["view_b"],
            enrollment=wav["enrollment"],
            target_speaker=r["target_speaker"],
            mixture_type=r["mixture_type"],
            mixture_type_b=r.get("mixture_type_b", ""),
            phone_labels=np.asarray(r["phone_labels"], dtype=np.int64),
            seed=r["seed"],
            snr_db=r["snr_db"],
            gain=r["gain"],
            clean_phones=tuple(r.get("clean_phones", ())),
            enrollment_phones=tuple(r.get("enrollment_phones", ())),
            interferer=wav.get("interferer"),
            interferer_speaker=r.get("interferer_speaker"),
            interferer_phone_labels=None if il is None else np.asarray(il, dtype=np.int64),
            interferer_enrollment=wav.get("interferer_enrollment"),
        ))
    return examples


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_digest(path: str | Path) -> str:
    """Digest of the manifest and every audio file it references."""
    path = Path(path)
    h = hashlib.sha256(path.read_bytes())
    for line in path.read_text().splitlines():
        for rel in sorted(json.loads(line)["paths"].values()):
            h.update((path.parent / rel).read_bytes())
    return h.hexdigest()
