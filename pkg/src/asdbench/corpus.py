"""Dataset model, WAV I/O, and a seeded synthetic machine-sound generator.

A corpus is a directory tree of 10-second mono 16 kHz clips, one directory
per machine type, with all remaining metadata encoded in the file name:

    <machine>/section_<NN>_<domain>_<split>_<condition>_<IIII>.wav

Test trees without condition labels drop the condition token:

    <machine>/section_<NN>_<domain>_<split>_<IIII>.wav

The synthetic generator realizes the domain-shift setting: each section is
a harmonic machine hum in factory-style noise, the target domain is a
shifted version of the source (slower fundamental, worse SNR), and
anomalous clips carry a fault signature (a detuned second partial plus a
repeating broadband click train).
"""

from __future__ import annotations

import csv
import math
import wave
import warnings
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path, PurePosixPath
from typing import Callable, Iterable

import numpy as np

SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0

DOMAINS = ("source", "target")
SPLITS = ("train", "test")
CONDITIONS = ("normal", "anomaly", "unknown")
NOISE_COLORS = ("white", "pink")

MAX_SECTION = 5

#: Ratio applied to the second partial's frequency in anomalous clips.
ANOMALY_DETUNE_RATIO = 1.06
#: Spacing of the broadband click train in anomalous clips, in seconds.
ANOMALY_CLICK_PERIOD = 0.75

MACHINE_NAMES = ("fan", "gearbox", "pump", "slider", "valve", "compressor", "blower")

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("path", "machine", "section", "domain", "split", "condition")


class ClipPathError(ValueError):
    """A path does not follow the corpus naming convention."""


class AudioFormatError(ValueError):
    """A WAV file violates the corpus format contract (rate, width, length)."""


class DegenerateSignalError(ValueError):
    """An operation received a signal it cannot make sense of (e.g. all zeros)."""


class OutputTreeError(RuntimeError):
    """Refusing to write into an existing non-empty output directory."""


class ClippingWarning(UserWarning):
    """More than the tolerated fraction of samples were clipped to [-1, 1]."""


@dataclass(frozen=True)
class ClipMeta:
    """Side information carried by a clip's path."""

    machine_type: str
    section: int
    domain: str
    split: str
    condition: str
    clip_id: int

    def __post_init__(self):
        if not self.machine_type:
            raise ValueError("machine_type must be a non-empty string")
        if not 0 <= self.section <= MAX_SECTION:
            raise ValueError(f"section must be in [0, {MAX_SECTION}], got {self.section}")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        if self.condition == "unknown" and self.split != "test":
            raise ValueError("condition 'unknown' is only valid for test clips")
        if self.clip_id < 0:
            raise ValueError(f"clip_id must be >= 0, got {self.clip_id}")


@dataclass
class AudioClip:
    """Fixed-rate mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        peak = float(np.max(np.abs(self.samples))) if self.samples.size else 0.0
        if peak > 1.0 + 1e-9:
            raise ValueError(f"samples exceed [-1, 1] (peak {peak:.6g})")

    @property
    def duration(self) -> float:
        """Clip length in seconds."""
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples))))


@dataclass(frozen=True)
class DomainSpec:
    """Generator knobs for one acoustic condition of one section."""

    fundamental_hz: float
    harmonic_count: int = 6
    snr_db: float = 10.0
    noise_color: str = "pink"

    def __post_init__(self):
        if self.fundamental_hz <= 0:
            raise ValueError("fundamental_hz must be > 0")
        if self.harmonic_count < 1:
            raise ValueError("harmonic_count must be >= 1")
        if self.noise_color not in NOISE_COLORS:
            raise ValueError(f"noise_color must be one of {NOISE_COLORS}")


# ---------------------------------------------------------------------------
# Path convention


def parse_clip_path(path) -> ClipMeta:
    """Parse a convention-conformant clip path into its metadata.

    The machine type is the parent directory name; everything else is
    encoded in the file name. Raises ClipPathError naming the offending
    token for malformed paths.
    """
    p = PurePosixPath(str(path).replace("\\", "/"))
    machine = p.parent.name
    if not machine:
        raise ClipPathError(f"missing machine directory in {path!r}")
    name = p.name
    if not name.endswith(".wav"):
        raise ClipPathError(f"expected a .wav file name, got {name!r}")
    tokens = name[: -len(".wav")].split("_")
    if len(tokens) not in (5, 6) or tokens[0] != "section":
        raise ClipPathError(f"file name {name!r} does not match the section_* convention")
    if len(tokens[1]) != 2 or not tokens[1].isdigit():
        raise ClipPathError(f"bad section token {tokens[1]!r} in {name!r}")
    section = int(tokens[1])
    domain = tokens[2]
    if domain not in DOMAINS:
        raise ClipPathError(f"bad domain token {domain!r} in {name!r}")
    split = tokens[3]
    if split not in SPLITS:
        raise ClipPathError(f"bad split token {split!r} in {name!r}")
    if len(tokens) == 6:
        condition = tokens[4]
        if condition not in ("normal", "anomaly"):
            raise ClipPathError(f"bad condition token {condition!r} in {name!r}")
        clip_token = tokens[5]
    else:
        condition = "unknown"
        clip_token = tokens[4]
    if not clip_token.isdigit():
        raise ClipPathError(f"bad clip id token {clip_token!r} in {name!r}")
    try:
        return ClipMeta(machine, section, domain, split, condition, int(clip_token))
    except ValueError as exc:
        raise ClipPathError(f"{exc} (in {name!r})") from exc


def format_clip_path(meta: ClipMeta) -> str:
    """Canonical relative path for a clip; inverse of parse_clip_path."""
    if meta.condition == "unknown":
        name = f"section_{meta.section:02d}_{meta.domain}_{meta.split}_{meta.clip_id:04d}.wav"
    else:
        name = (
            f"section_{meta.section:02d}_{meta.domain}_{meta.split}"
            f"_{meta.condition}_{meta.clip_id:04d}.wav"
        )
    return f"{meta.machine_type}/{name}"


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM, 16-bit little-endian)


def load_clip(path, expected_rate: int = SAMPLE_RATE) -> AudioClip:
    """Load a 16-bit PCM WAV file as a mono clip.

    Multichannel recordings are reduced to channel 0. The sample rate must
    match `expected_rate` exactly; there is no resampling.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            data = wf.readframes(n_frames)
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got sample width {width}")
    if rate != expected_rate:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if len(data) != n_frames * n_channels * 2:
        raise AudioFormatError(
            f"{path}: truncated data ({len(data)} bytes for {n_frames} frames)"
        )
    raw = np.frombuffer(data, dtype="<i2")
    if n_channels > 1:
        raw = raw.reshape(-1, n_channels)[:, 0]
    return AudioClip(raw.astype(np.float64) / 32768.0, rate)


def save_clip(clip: AudioClip, path) -> None:
    """Write a clip as mono 16-bit PCM WAV. Output bytes are deterministic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.rint(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Signal synthesis


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _mix_arrays(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    rms_s = _rms(signal)
    rms_n = _rms(noise)
    if rms_s == 0.0:
        raise DegenerateSignalError("signal has zero RMS")
    if rms_n == 0.0:
        raise DegenerateSignalError("noise has zero RMS")
    gain = (rms_s / rms_n) * 10.0 ** (-snr_db / 20.0)
    mixed = signal + gain * noise
    clipped_fraction = float(np.mean(np.abs(mixed) > 1.0))
    if clipped_fraction > 0.01:
        warnings.warn(
            f"{clipped_fraction:.1%} of samples clipped to [-1, 1]", ClippingWarning
        )
    return np.clip(mixed, -1.0, 1.0)


def mix_at_snr(signal: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    """Mix signal with noise scaled to the requested signal-to-noise ratio.

    The noise gain is (rms(signal)/rms(noise)) * 10**(-snr_db/20). The mix
    is clipped to [-1, 1]; a ClippingWarning is issued if more than 1% of
    samples clip.
    """
    if signal.sample_rate != noise.sample_rate:
        raise ValueError("signal and noise sample rates differ")
    if len(signal.samples) != len(noise.samples):
        raise ValueError("signal and noise lengths differ")
    return AudioClip(_mix_arrays(signal.samples, noise.samples, snr_db), signal.sample_rate)


def _colored_noise(rng: np.random.Generator, n: int, color: str) -> np.ndarray:
    white = rng.standard_normal(n)
    if color == "white":
        return white
    # pink: -3 dB/octave power slope via 1/sqrt(f) amplitude shaping
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    scale = np.ones_like(freqs)
    scale[1:] = np.sqrt(freqs[1] / freqs[1:])
    spectrum *= scale
    spectrum[0] = 0.0
    return np.fft.irfft(spectrum, n)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def synth_clip(
    spec: DomainSpec,
    condition: str = "normal",
    seed=0,
    *,
    sample_rate: int = SAMPLE_RATE,
    duration: float = CLIP_SECONDS,
) -> AudioClip:
    """Synthesize one clip for the given acoustic condition.

    Normal clips are a harmonic stack at the spec's fundamental with mild
    amplitude modulation, mixed with colored noise at the spec's SNR.
    Anomalous clips additionally detune the second partial by +6% and add
    a repeating broadband click train. Deterministic per (spec, condition,
    seed).
    """
    if condition not in ("normal", "anomaly"):
        raise ValueError(f"condition must be 'normal' or 'anomaly', got {condition!r}")
    rng = _as_rng(seed)
    n = int(round(sample_rate * duration))
    t = np.arange(n) / sample_rate

    phases = rng.uniform(0.0, 2.0 * np.pi, spec.harmonic_count)
    am_rate = rng.uniform(1.5, 3.5)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)

    tone = np.zeros(n)
    for k in range(1, spec.harmonic_count + 1):
        freq = k * spec.fundamental_hz
        if condition == "anomaly" and k == 2:
            freq = 2.0 * spec.fundamental_hz * ANOMALY_DETUNE_RATIO
        tone += np.sin(2.0 * np.pi * freq * t + phases[k - 1]) / k
    tone *= 1.0 + 0.1 * np.sin(2.0 * np.pi * am_rate * t + am_phase)
    tone *= 0.1 / _rms(tone)

    noise = _colored_noise(rng, n, spec.noise_color)
    samples = _mix_arrays(tone, noise, spec.snr_db)

    if condition == "anomaly":
        period = int(round(ANOMALY_CLICK_PERIOD * sample_rate))
        click_len = max(8, int(round(0.004 * sample_rate)))
        offset = int(rng.integers(0, period))
        envelope = np.exp(-np.arange(click_len) / (click_len / 4.0))
        burst = rng.standard_normal(click_len) * envelope
        burst *= 5.0 * _rms(samples) / _rms(burst)
        for start in range(offset, n - click_len, period):
            samples[start : start + click_len] += burst
        samples = np.clip(samples, -1.0, 1.0)

    return AudioClip(samples, sample_rate)


# ---------------------------------------------------------------------------
# Corpus synthesis and scanning


@dataclass
class DatasetIndex:
    """Listing of a corpus tree: (relative path, metadata) pairs under a root."""

    root: Path
    entries: list[tuple[str, ClipMeta]]
    skipped: tuple[str, ...] = ()

    def __post_init__(self):
        self.root = Path(self.root)
        metas = [meta for _, meta in self.entries]
        if len(set(metas)) != len(metas):
            dupes = [m for m, c in Counter(metas).items() if c > 1]
            raise ValueError(f"duplicate clip metadata in index: {dupes[:3]}")

    def path(self, relpath: str) -> Path:
        return self.root / relpath

    @property
    def machines(self) -> list[str]:
        return sorted({meta.machine_type for _, meta in self.entries})

    def clips(self, **filters) -> list[tuple[str, ClipMeta]]:
        """Entries whose metadata matches all given field=value filters."""
        out = []
        for relpath, meta in self.entries:
            if all(getattr(meta, field) == value for field, value in filters.items()):
                out.append((relpath, meta))
        return out

    def counts(self) -> dict[tuple[str, int, str, str], int]:
        """Clip counts per (machine_type, section, domain, split)."""
        counter: Counter = Counter()
        for _, meta in self.entries:
            counter[(meta.machine_type, meta.section, meta.domain, meta.split)] += 1
        return dict(counter)


def default_section_spec(machine_index: int, section: int) -> DomainSpec:
    """Source-domain spec for a section: fundamentals spread across sections."""
    fundamental = 100.0 * (machine_index + 1) * (1.25**section)
    return DomainSpec(fundamental_hz=fundamental, harmonic_count=6, snr_db=10.0, noise_color="pink")


def default_domain_shift(spec: DomainSpec) -> DomainSpec:
    """Default source-to-target shift: half the fundamental, 5 dB worse SNR."""
    return replace(spec, fundamental_hz=spec.fundamental_hz * 0.5, snr_db=spec.snr_db - 5.0)


def write_manifest(index: DatasetIndex, path=None) -> Path:
    """Write the corpus manifest CSV (UTF-8, LF line endings)."""
    path = Path(path) if path is not None else index.root / MANIFEST_NAME
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for relpath, meta in sorted(index.entries):
            writer.writerow(
                [relpath, meta.machine_type, meta.section, meta.domain, meta.split, meta.condition]
            )
    return path


def read_manifest(path) -> list[tuple[str, ClipMeta]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        entries = []
        for row in reader:
            meta = ClipMeta(
                row["machine"],
                int(row["section"]),
                row["domain"],
                row["split"],
                row["condition"],
                parse_clip_path(row["path"]).clip_id,
            )
            entries.append((row["path"], meta))
    return entries


def synth_corpus(
    root,
    *,
    machines: int = 1,
    sections_per_machine: int = 1,
    source_train: int = 1000,
    target_train: int = 3,
    test_normal: int = 50,
    test_anomaly: int = 50,
    seed: int = 0,
    section_spec: Callable[[int, int], DomainSpec] = default_section_spec,
    domain_shift: Callable[[DomainSpec], DomainSpec] = default_domain_shift,
    machine_names: Iterable[str] | None = None,
    force: bool = False,
) -> DatasetIndex:
    """Generate a development-style corpus tree and its manifest.

    Per machine and section: `source_train` source-domain normals and
    `target_train` target-domain normals for training, plus `test_normal`
    normals and `test_anomaly` anomalies per domain for testing. The target
    spec is `domain_shift(section_spec(machine, section))`. Every clip's
    seed derives from (seed, machine, section, domain, split, condition,
    clip id), so a fixed seed reproduces the tree byte for byte.
    """
    counts = dict(
        source_train=source_train, target_train=target_train,
        test_normal=test_normal, test_anomaly=test_anomaly,
    )
    for name, value in counts.items():
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    if machines < 1 or sections_per_machine < 1:
        raise ValueError("machines and sections_per_machine must be >= 1")
    if sections_per_machine > MAX_SECTION + 1:
        raise ValueError(f"at most {MAX_SECTION + 1} sections per machine")
    if seed < 0:
        raise ValueError("seed must be >= 0")

    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise OutputTreeError(f"output directory {root} exists and is not empty (use force)")
    root.mkdir(parents=True, exist_ok=True)

    if machine_names is None:
        names = [
            MACHINE_NAMES[m] if m < len(MACHINE_NAMES) else f"machine{m:02d}"
            for m in range(machines)
        ]
    else:
        names = list(machine_names)
        if len(names) != machines:
            raise ValueError("machine_names length must match machines")

    entries: list[tuple[str, ClipMeta]] = []
    for m in range(machines):
        for n in range(sections_per_machine):
            source_spec = section_spec(m, n)
            target_spec = domain_shift(source_spec)
            spec_for = {"source": source_spec, "target": target_spec}
            plan = [
                ("source", "train", "normal", source_train),
                ("target", "train", "normal", target_train),
            ]
            for domain in DOMAINS:
                plan.append((domain, "test", "normal", test_normal))
                plan.append((domain, "test", "anomaly", test_anomaly))
            for domain, split, condition, count in plan:
                for clip_id in range(count):
                    meta = ClipMeta(names[m], n, domain, split, condition, clip_id)
                    entropy = [
                        seed, m, n,
                        DOMAINS.index(domain), SPLITS.index(split),
                        CONDITIONS.index(condition), clip_id,
                    ]
                    rng = np.random.default_rng(np.random.SeedSequence(entropy))
                    clip = synth_clip(spec_for[domain], condition, rng)
                    relpath = format_clip_path(meta)
                    save_clip(clip, root / relpath)
                    entries.append((relpath, meta))

    index = DatasetIndex(root, sorted(entries))
    write_manifest(index)
    return index


def scan_dataset(root) -> DatasetIndex:
    """Index every convention-conformant WAV under a corpus root.

    Non-conformant files are collected in the index's `skipped` list rather
    than treated as fatal; an empty tree is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    entries: list[tuple[str, ClipMeta]] = []
    skipped: list[str] = []
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        relpath = path.relative_to(root).as_posix()
        if relpath == MANIFEST_NAME:
            continue
        if path.suffix.lower() != ".wav":
            skipped.append(relpath)
            continue
        try:
            meta = parse_clip_path(relpath)
        except ClipPathError:
            skipped.append(relpath)
            continue
        entries.append((relpath, meta))
    if not entries:
        raise ValueError(f"no convention-conformant clips found under {root}")
    return DatasetIndex(root, entries, tuple(skipped))
