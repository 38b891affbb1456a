"""Log-Mel features, SpecAugment masking and a synthetic speaker corpus.

The synthetic corpus replaces real recordings so that every part of the
pipeline can be exercised offline.  Each speaker is a harmonic source with a
fixed fundamental, a formant envelope and a spectral tilt; utterances are
sequences of voiced "syllables" separated by pauses, on top of a white noise
floor.  The corpus writer adds per-utterance session noise on top, which is
what makes speakers hard to tell apart without training.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile

from .errors import InvalidInputError

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
MEL_FMIN = 20.0
MEL_FMAX = 7600.0


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError("waveform must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


# --------------------------------------------------------------------------
# features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> np.ndarray:
    """The n_mels + 2 corner frequencies (Hz) of the triangular filters."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int = SAMPLE_RATE,
                   fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> np.ndarray:
    """Triangular HTK-scale filterbank of shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_band_edges(n_mels, fmin, fmax)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1


def compute_log_mel(w: Waveform, n_mels: int = 80, win: float = 0.025, hop: float = 0.010,
                    normalize: bool = True) -> np.ndarray:
    """Natural-log Mel energies, shape (n_mels, frames).

    With ``normalize`` the per-channel mean over the utterance is subtracted.
    """
    if n_mels < 1:
        raise InvalidInputError("n_mels must be >= 1")
    if not win > hop > 0:
        raise InvalidInputError("need win > hop > 0")
    sr = w.sample_rate
    win_n = int(round(win * sr))
    hop_n = int(round(hop * sr))
    if len(w.samples) < win_n:
        raise InvalidInputError(
            f"waveform of {len(w.samples)} samples is shorter than one {win_n}-sample window")
    n_frames = frame_count(len(w.samples), win_n, hop_n)
    idx = np.arange(win_n)[None, :] + hop_n * np.arange(n_frames)[:, None]
    frames = w.samples[idx] * np.hamming(win_n)[None, :]
    n_fft = 1 << (win_n - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, sr).T
    logmel = np.log(np.maximum(energies, LOG_FLOOR)).T
    if normalize:
        logmel = logmel - logmel.mean(axis=1, keepdims=True)
    return logmel


def mask_block(x: np.ndarray, t0: int, t: int, c0: int, c: int, value: float) -> np.ndarray:
    """Copy of a (C, T) map with frames [t0, t0+t) and channels [c0, c0+c) set to value."""
    out = np.array(x, copy=True)
    out[:, t0:t0 + t] = value
    out[c0:c0 + c, :] = value
    return out


def spec_augment(x: np.ndarray, max_time_frames: int = 5, max_channels: int = 10,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Mask one random run of frames and one random band of channels.

    ``x`` is (C, T) or (batch, C, T); every item gets its own masks and the
    masked cells take that item's mean value.
    """
    rng = np.random.default_rng() if rng is None else rng
    x = np.asarray(x)
    if x.ndim == 3:
        return np.stack([spec_augment(item, max_time_frames, max_channels, rng) for item in x])
    C, T = x.shape
    max_time_frames = min(max_time_frames, T)
    max_channels = min(max_channels, C)
    t = int(rng.integers(0, max_time_frames + 1))
    c = int(rng.integers(0, max_channels + 1))
    t0 = int(rng.integers(0, T - t + 1))
    c0 = int(rng.integers(0, C - c + 1))
    return mask_block(x, t0, t, c0, c, float(x.mean()))


# --------------------------------------------------------------------------
# synthetic speakers


@dataclass
class SyntheticSpeakerSpec:
    speaker_id: str
    fundamental_freq: float
    formant_centers: list[float]
    spectral_tilt: float  # dB per octave above the fundamental
    noise_floor: float
    rng_seed: int = 0

    def validate(self, sample_rate: int = SAMPLE_RATE) -> None:
        if not 80.0 <= self.fundamental_freq <= 320.0:
            raise InvalidInputError(f"fundamental {self.fundamental_freq} Hz outside [80, 320]")
        f = list(self.formant_centers)
        if not f:
            raise InvalidInputError("at least one formant is required")
        if any(b <= a for a, b in zip(f, f[1:])):
            raise InvalidInputError("formant centers must be strictly increasing")
        if f[0] <= 0 or f[-1] >= sample_rate / 2:
            raise InvalidInputError(f"formant {f[-1]} Hz is not below Nyquist ({sample_rate / 2} Hz)")
        if self.noise_floor < 0:
            raise InvalidInputError("noise_floor must be non-negative")


# Formant multipliers for a small vowel inventory shared by all speakers; the
# speaker's own formant_centers act as the neutral vowel.
VOWELS = np.array([
    [1.00, 1.00, 1.00, 1.00],
    [1.45, 0.80, 1.00, 1.00],
    [0.55, 1.50, 1.15, 1.05],
    [0.60, 0.60, 0.95, 1.00],
    [0.90, 1.25, 1.05, 1.00],
    [1.05, 0.65, 1.00, 0.98],
])
NEUTRAL_FORMANTS = np.array([500.0, 1500.0, 2500.0, 3500.0])
# Recording-session nuisance added by generate_corpus: colored background
# noise at a random SNR (dB, relative to the voiced RMS) and slope (dB/oct).
SESSION_SNR_DB = (-10.0, 15.0)
SESSION_SLOPE_DB = 6.0


def random_speaker_spec(speaker_id: str, rng: np.random.Generator) -> SyntheticSpeakerSpec:
    """Draw a plausible speaker: vocal-tract scaling of a neutral vowel plus jitter."""
    f0 = float(np.exp(rng.uniform(np.log(85.0), np.log(300.0))))
    tract = rng.uniform(0.85, 1.2)
    formants = np.sort(NEUTRAL_FORMANTS * tract * (1.0 + rng.normal(0.0, 0.05, size=4)))
    return SyntheticSpeakerSpec(
        speaker_id=speaker_id,
        fundamental_freq=f0,
        formant_centers=[float(f) for f in formants],
        spectral_tilt=float(rng.uniform(-12.0, -4.0)),
        noise_floor=float(rng.uniform(0.003, 0.03)),
        rng_seed=int(rng.integers(0, 2**31 - 1)),
    )


def _formant_envelope(freqs: np.ndarray, centers: np.ndarray) -> np.ndarray:
    bw = 60.0 + 0.06 * centers
    resp = 1.0 / (1.0 + ((freqs[:, None] - centers[None, :]) / bw[None, :]) ** 2)
    return 0.03 + resp.sum(axis=1)


def _syllable_plan(n: int, sr: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    spans = []
    pos = int(rng.uniform(0.02, 0.15) * sr)
    while pos < n:
        length = int(rng.uniform(0.12, 0.35) * sr)
        end = min(pos + length, n)
        if end - pos > int(0.03 * sr):
            spans.append((pos, end))
        pos = end + int(rng.uniform(0.04, 0.20) * sr)
    return spans


def colored_noise(n: int, slope: float, rng: np.random.Generator,
                  sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Unit-RMS Gaussian noise whose spectrum rises ``slope`` dB per octave around 1 kHz."""
    white = rng.standard_normal(n)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    gain = 10.0 ** (slope * np.log2(np.maximum(freqs, 50.0) / 1000.0) / 20.0)
    noise = np.fft.irfft(np.fft.rfft(white) * gain, n=n)
    return noise / np.sqrt(np.mean(noise ** 2))


def synthesize_utterance(s: SyntheticSpeakerSpec, duration: float, rng: np.random.Generator,
                         sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Render ``duration`` seconds of speech-like audio for speaker ``s``.

    The fundamental is fixed, so voiced energy sits only on its harmonics.
    Each syllable picks a vowel from a shared inventory, so the content
    changes from utterance to utterance while the envelope stays the speaker's.
    """
    s.validate(sample_rate)
    if not 1.0 <= duration <= 60.0:
        raise InvalidInputError("duration must lie in [1, 60] s")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = s.fundamental_freq
    harmonics = f0 * np.arange(1, int((0.49 * sample_rate) // f0) + 1)
    phases = rng.uniform(0, 2 * np.pi, size=len(harmonics))
    tilt = 10.0 ** (s.spectral_tilt * np.log2(harmonics / f0) / 20.0)
    centers = np.asarray(s.formant_centers, dtype=np.float64)
    factors = np.ones((len(VOWELS), len(centers)))
    m = min(len(centers), VOWELS.shape[1])
    factors[:, :m] = VOWELS[:, :m]
    ramp = int(0.01 * sample_rate)

    voiced = np.zeros(n)
    for start, end in _syllable_plan(n, sample_rate, rng):
        vowel = factors[rng.integers(len(factors))]
        jitter = 1.0 + rng.uniform(-0.04, 0.04, size=len(centers))
        f = np.minimum(centers * vowel * jitter, 0.499 * sample_rate)
        amps = tilt * _formant_envelope(harmonics, f)
        seg_t = t[start:end]
        seg = amps @ np.cos(2 * np.pi * harmonics[:, None] * seg_t[None, :] + phases[:, None])
        env = np.ones(end - start) * rng.uniform(0.6, 1.0)
        r = min(ramp, (end - start) // 2)
        if r > 0:
            win = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, r))
            env[:r] *= win
            env[-r:] *= win[::-1]
        voiced[start:end] = seg * env
    rms = np.sqrt(np.mean(voiced[voiced != 0] ** 2)) if np.any(voiced) else 1.0
    out = 0.1 * voiced / rms
    out = out + s.noise_floor * rng.standard_normal(n)
    return Waveform(np.clip(out, -1.0, 1.0), sample_rate)


def apply_session(w: Waveform, rng: np.random.Generator,
                  snr_db: tuple[float, float] = SESSION_SNR_DB,
                  slope_db: float = SESSION_SLOPE_DB) -> Waveform:
    """Add background noise of random level and colour, as in a new recording session."""
    snr = rng.uniform(*snr_db)
    noise = colored_noise(len(w.samples), rng.uniform(-slope_db, slope_db), rng, w.sample_rate)
    level = 0.1 * 10.0 ** (-snr / 20.0)
    return Waveform(np.clip(w.samples + level * noise, -1.0, 1.0), w.sample_rate)


def long_term_log_spectrum(w: Waveform, fmin: float = 60.0, fmax: float = MEL_FMAX,
                           nperseg: int = 1024) -> np.ndarray:
    """Mean-removed log power spectrum averaged over the whole signal."""
    from scipy.signal import welch

    freqs, psd = welch(w.samples, fs=w.sample_rate, nperseg=nperseg)
    band = (freqs >= fmin) & (freqs <= fmax)
    spec = np.log(psd[band] + 1e-12)
    return spec - spec.mean()


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# --------------------------------------------------------------------------
# corpus on disk

MANIFEST_FIELDS = ("utt_id", "speaker_id", "path", "duration")
TRIAL_FIELDS = ("enroll_utt", "test_utt", "label")


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(str(path), w.sample_rate, pcm)


def read_wav(path: str | Path) -> Waveform:
    sr, data = wavfile.read(str(path))
    if data.dtype != np.int16:
        raise InvalidInputError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.ndim > 1:
        data = data.mean(axis=1)
    return Waveform(data.astype(np.float64) / 32767.0, int(sr))


def build_trials(rows: Sequence[dict], rng: np.random.Generator) -> list[tuple[str, str, int]]:
    """Every same-speaker pair plus an equal number of random cross-speaker pairs."""
    by_spk: dict[str, list[str]] = {}
    for r in rows:
        by_spk.setdefault(r["speaker_id"], []).append(r["utt_id"])
    targets = [(a, b, 1) for utts in by_spk.values() for a, b in itertools.combinations(utts, 2)]
    spk_of = {r["utt_id"]: r["speaker_id"] for r in rows}
    utts = [r["utt_id"] for r in rows]
    if len(by_spk) < 2:
        raise InvalidInputError("need at least two speakers for nontarget trials")
    seen: set[tuple[str, str]] = set()
    nontargets = []
    while len(nontargets) < len(targets):
        a, b = rng.choice(len(utts), size=2, replace=False)
        ua, ub = utts[a], utts[b]
        if spk_of[ua] == spk_of[ub] or (ua, ub) in seen or (ub, ua) in seen:
            continue
        seen.add((ua, ub))
        nontargets.append((ua, ub, 0))
    trials = targets + nontargets
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
            raise InvalidInputError(f"{path}: malformed manifest header {reader.fieldnames}")
        rows = []
        for r in reader:
            r["duration"] = float(r["duration"])
            p = Path(r["path"])
            r["path"] = str(p if p.is_absolute() else path.parent / p)
            rows.append(r)
    return rows


def read_trials(path: str | Path) -> list[tuple[str, str, int]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != TRIAL_FIELDS:
            raise InvalidInputError(f"{path}: malformed trial header {reader.fieldnames}")
        out = []
        for r in reader:
            label = int(r["label"])
            if label not in (0, 1):
                raise InvalidInputError(f"{path}: label must be 0 or 1")
            out.append((r["enroll_utt"], r["test_utt"], label))
    return out


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_corpus(out_dir: str | Path, n_speakers: int = 20, utts_per_speaker: int = 10,
                    duration_range: tuple[float, float] = (2.0, 4.0), seed: int = 0,
                    heldout_per_speaker: int = 0,
                    session_snr_db: tuple[float, float] | None = SESSION_SNR_DB) -> dict[str, Path]:
    """Write a synthetic corpus: WAV files, manifest, trial list and speaker specs.

    Every utterance is passed through ``apply_session`` unless
    ``session_snr_db`` is None.

    With ``heldout_per_speaker`` > 0 each speaker also gets that many extra
    utterances listed in ``heldout.csv``; the trial list is then built from
    the held-out utterances only, otherwise from the main manifest.
    """
    if n_speakers < 2:
        raise InvalidInputError("need at least two speakers")
    lo, hi = duration_range
    if not 1.0 <= lo <= hi <= 60.0:
        raise InvalidInputError("duration_range must satisfy 1 <= lo <= hi <= 60")
    out = Path(out_dir)
    wav_dir = out / "wav"
    try:
        wav_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc

    root = np.random.SeedSequence(seed)
    spk_seq, utt_seq, trial_seq = root.spawn(3)
    spk_rng = np.random.default_rng(spk_seq)
    specs = [random_speaker_spec(f"spk{i:03d}", spk_rng) for i in range(n_speakers)]

    per_spk = utts_per_speaker + heldout_per_speaker
    utt_seeds = utt_seq.spawn(n_speakers * per_spk)
    train_rows, heldout_rows = [], []
    for i, spec in enumerate(specs):
        for j in range(per_spk):
            rng = np.random.default_rng(utt_seeds[i * per_spk + j])
            dur = round(float(rng.uniform(lo, hi)), 2)
            wav = synthesize_utterance(spec, dur, rng)
            if session_snr_db is not None:
                wav = apply_session(wav, rng, session_snr_db)
            utt_id = f"{spec.speaker_id}_u{j:03d}"
            rel = Path("wav") / f"{utt_id}.wav"
            write_wav(out / rel, wav)
            row = {"utt_id": utt_id, "speaker_id": spec.speaker_id,
                   "path": rel.as_posix(), "duration": f"{wav.duration:.4f}"}
            (train_rows if j < utts_per_speaker else heldout_rows).append(row)

    paths = {"manifest": out / "manifest.csv", "trials": out / "trials.csv",
             "speakers": out / "speakers.json"}
    _write_rows(paths["manifest"], MANIFEST_FIELDS,
                [[r[k] for k in MANIFEST_FIELDS] for r in train_rows])
    if heldout_rows:
        paths["heldout"] = out / "heldout.csv"
        _write_rows(paths["heldout"], MANIFEST_FIELDS,
                    [[r[k] for k in MANIFEST_FIELDS] for r in heldout_rows])
    trials = build_trials(heldout_rows or train_rows, np.random.default_rng(trial_seq))
    _write_rows(paths["trials"], TRIAL_FIELDS, trials)
    with paths["speakers"].open("w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "session_snr_db": session_snr_db, "speakers": [asdict(s) for s in specs]}, fh, indent=2)
    return paths


def crop_frames(feat: np.ndarray, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous crop of ``n_frames``; shorter inputs are wrap-padded."""
    T = feat.shape[-1]
    if T < n_frames:
        reps = math.ceil(n_frames / T)
        feat = np.concatenate([feat] * reps, axis=-1)
        T = feat.shape[-1]
    start = int(rng.integers(0, T - n_frames + 1))
    return feat[..., start:start + n_frames]
