"""Synthetic multi-speaker corpus.

Each speaker is a harmonic source with a fixed fundamental, harmonic
amplitude profile and mild vibrato, so speaker identity is directly
measurable from audio (f0, spectral shape). Content is a sequence of symbol
units; each symbol modulates gain and spectral tilt, giving the language
models real content to predict. Held-out speakers never appear in the
training split, which is what makes zero-shot cloning checkable.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats, frontend
from .errors import ValidationError

log = logging.getLogger("codec_lm.corpus")

PEAK_TARGET = 0.85  # harmonic amplitudes are normalized to sum to this
EDGE_RAMP_SECONDS = 0.010  # linear attack/release per unit


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def validate(self):
        if self.sample_rate <= 0:
            raise ValidationError("waveform.sample_rate must be positive")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0 + 1e-9:
            raise ValidationError("waveform.samples exceed [-1, 1]")


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: int
    f0: float
    harmonic_amps: tuple
    vibrato_rate: float
    vibrato_depth: float

    def validate(self):
        if self.f0 <= 0:
            raise ValidationError("speaker.f0 must be positive")
        amps = np.asarray(self.harmonic_amps, dtype=np.float64)
        if amps.size == 0:
            raise ValidationError("speaker.harmonic_amps must be nonempty")
        if np.any(amps < 0) or not np.any(amps > 0):
            raise ValidationError(
                "speaker.harmonic_amps must be nonnegative with at least one positive"
            )
        if not 0.0 <= self.vibrato_depth <= 0.2:
            raise ValidationError("speaker.vibrato_depth must lie in [0, 0.2]")
        if self.vibrato_rate < 0:
            raise ValidationError("speaker.vibrato_rate must be nonnegative")


@dataclass(frozen=True)
class ContentUnit:
    symbol_id: int
    duration: float
    pitch_offset: float = 0.0  # semitones


@dataclass(frozen=True)
class ContentSeq:
    units: tuple

    def validate(self):
        if not self.units:
            raise ValidationError("content.units must be nonempty")
        for i, unit in enumerate(self.units):
            if unit.duration <= 0:
                raise ValidationError(f"content.units[{i}].duration must be positive")
            if not 1 <= unit.symbol_id < frontend.VOCAB_SIZE or (
                unit.symbol_id not in frontend.ID_TO_SYMBOL
            ):
                raise ValidationError(
                    f"content.units[{i}].symbol_id {unit.symbol_id} not in frontend vocabulary"
                )

    @property
    def total_duration(self) -> float:
        return sum(u.duration for u in self.units)

    def text(self) -> str:
        return "".join(frontend.ID_TO_SYMBOL[u.symbol_id] for u in self.units)


@dataclass(frozen=True)
class Utterance:
    speaker: SpeakerSpec
    content: ContentSeq
    waveform: Waveform
    text: str


def _symbol_traits(sym_id: int):
    """Deterministic per-symbol (gain, spectral tilt) signature."""
    h = (sym_id * 2654435761) % (1 << 32)
    gain = 0.6 + 0.4 * ((h >> 8) % 1000) / 999.0
    tilt = 0.55 + 0.45 * ((h >> 20) % 1000) / 999.0
    return gain, tilt


def generate_utterance(
    spec: SpeakerSpec, content: ContentSeq, sample_rate: int, seed: int
) -> Utterance:
    """Render harmonic audio for one (speaker, content) pair.

    Deterministic for fixed arguments: the seed only drives the vibrato
    starting phase.
    """
    spec.validate()
    content.validate()
    if sample_rate < 8000:
        raise ValidationError("sample_rate must be at least 8000 Hz")

    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF]))
    vib_phase = rng.uniform(0.0, 2.0 * np.pi)

    unit_samples = [max(1, int(round(u.duration * sample_rate))) for u in content.units]
    total = sum(unit_samples)
    t = np.arange(total) / sample_rate

    pitch_factor = np.empty(total)
    pos = 0
    for u, n in zip(content.units, unit_samples):
        pitch_factor[pos : pos + n] = 2.0 ** (u.pitch_offset / 12.0)
        pos += n

    vibrato = 1.0 + spec.vibrato_depth * np.sin(
        2.0 * np.pi * spec.vibrato_rate * t + vib_phase
    )
    inst_freq = spec.f0 * pitch_factor * vibrato
    phase = 2.0 * np.pi * np.cumsum(inst_freq) / sample_rate

    base_amps = np.asarray(spec.harmonic_amps, dtype=np.float64)
    base_amps = base_amps / base_amps.sum() * PEAK_TARGET

    samples = np.zeros(total)
    ramp = EDGE_RAMP_SECONDS
    pos = 0
    nyquist = 0.49 * sample_rate
    for u, n in zip(content.units, unit_samples):
        gain, tilt = _symbol_traits(u.symbol_id)
        sl = slice(pos, pos + n)
        unit_wave = np.zeros(n)
        top = spec.f0 * 2.0 ** (u.pitch_offset / 12.0) * (1.0 + spec.vibrato_depth)
        for h, amp in enumerate(base_amps, start=1):
            if h * top >= nyquist:
                break
            unit_wave += amp * (tilt ** (h - 1)) * np.sin(h * phase[sl])
        env = np.ones(n)
        edge = min(int(round(ramp * sample_rate)), n // 2)
        if edge > 0:
            env[:edge] = np.arange(edge) / edge
            env[-edge:] = np.arange(edge, 0, -1) / edge
        samples[sl] = gain * env * unit_wave
        pos += n

    wav = Waveform(samples=samples, sample_rate=sample_rate)
    wav.validate()
    return Utterance(speaker=spec, content=content, waveform=wav, text=content.text())


# -- f0 tracking ---------------------------------------------------------------

def frame_f0(
    samples: np.ndarray,
    sample_rate: int,
    fmin: float = 60.0,
    fmax: float = 500.0,
    window: float = 0.040,
    hop: float = 0.010,
    voicing_threshold: float = 0.5,
):
    """Autocorrelation pitch track. Returns (f0 per frame, voiced mask)."""
    win = int(round(window * sample_rate))
    step = int(round(hop * sample_rate))
    lag_min = max(2, int(np.floor(sample_rate / fmax)))
    lag_max = int(np.ceil(sample_rate / fmin))
    f0s, voiced = [], []
    for start in range(0, len(samples) - win + 1, step):
        x = samples[start : start + win].astype(np.float64)
        x = x - x.mean()
        energy = float(x @ x)
        if energy < 1e-8 or lag_max >= win:
            f0s.append(0.0)
            voiced.append(False)
            continue
        # full autocorrelation via FFT, normalized by zero-lag
        n = int(2 ** np.ceil(np.log2(2 * win)))
        spec = np.fft.rfft(x, n)
        r = np.fft.irfft(spec * np.conj(spec), n)[: lag_max + 1]
        r = r / r[0]
        seg = r[lag_min : lag_max + 1]
        peak = float(seg.max())
        if peak < voicing_threshold:
            f0s.append(0.0)
            voiced.append(False)
            continue
        # smallest lag close to the global peak avoids octave-down errors
        candidates = np.flatnonzero(seg >= 0.9 * peak)
        lag = lag_min + int(candidates[0])
        # refine the chosen local maximum
        while lag + 1 <= lag_max and r[lag + 1] > r[lag]:
            lag += 1
        while lag - 1 >= lag_min and r[lag - 1] > r[lag]:
            lag -= 1
        if lag_min < lag < lag_max:
            a, b, c = r[lag - 1], r[lag], r[lag + 1]
            denom = a - 2 * b + c
            shift = 0.5 * (a - c) / denom if abs(denom) > 1e-12 else 0.0
            lag_refined = lag + float(np.clip(shift, -0.5, 0.5))
        else:
            lag_refined = float(lag)
        f0s.append(sample_rate / lag_refined)
        voiced.append(True)
    return np.asarray(f0s), np.asarray(voiced, dtype=bool)


def estimate_f0(samples: np.ndarray, sample_rate: int, **kwargs) -> float:
    """Utterance-level f0: median over voiced frames (nan if none)."""
    f0s, voiced = frame_f0(samples, sample_rate, **kwargs)
    if not voiced.any():
        return float("nan")
    return float(np.median(f0s[voiced]))


def resample_waveform(w: Waveform, factor: float) -> Waveform:
    """Linear-interpolation resampling that shifts all frequencies by
    `factor` while keeping the sample rate, like playing the tape faster."""
    if factor <= 0:
        raise ValidationError("resampling factor must be positive")
    n_out = max(1, int(w.samples.size / factor))
    src = np.arange(n_out) * factor
    out = np.interp(src, np.arange(w.samples.size), w.samples)
    return Waveform(samples=out, sample_rate=w.sample_rate)


# -- corpus building -----------------------------------------------------------

@dataclass
class CorpusConfig:
    out_dir: Path
    speakers: int = 10
    held_out_speakers: int = 2
    utterances_per_speaker: int = 2
    duration_min: float = 4.0
    duration_max: float = 6.0
    sample_rate: int = 8000
    seed: int = 0
    f0_min: float = 120.0
    f0_max: float = 300.0
    f0_grid_step: float = 20.0
    max_harmonics: int = 5
    vibrato_rate_min: float = 4.0
    vibrato_rate_max: float = 6.0
    vibrato_depth_max: float = 0.0
    unit_min: float = 0.10
    unit_max: float = 0.30
    unit_quantum: float = 0.01  # unit durations snap to this (envelope ramp length)
    pitch_offset_max: float = 0.0
    alphabet: str = "aeioubdg"
    workers: int = 0

    def validate(self):
        problems = []
        if self.speakers < 1:
            problems.append("corpus.speakers must be >= 1")
        if self.held_out_speakers < 0 or self.speakers < self.held_out_speakers:
            problems.append("corpus.held_out_speakers must be in [0, speakers]")
        if self.utterances_per_speaker < 1:
            problems.append("corpus.utterances_per_speaker must be >= 1")
        if not 0 < self.duration_min <= self.duration_max:
            problems.append("corpus duration range must satisfy 0 < min <= max")
        if self.sample_rate < 8000:
            problems.append("corpus.sample_rate must be >= 8000")
        if not 0 < self.unit_min <= self.unit_max:
            problems.append("corpus unit duration range must satisfy 0 < min <= max")
        if not 0 < self.f0_min <= self.f0_max:
            problems.append("corpus f0 range must satisfy 0 < min <= max")
        if self.f0_grid_step > 0:
            n_grid = int(self.f0_max / self.f0_grid_step) - int(
                np.ceil(self.f0_min / self.f0_grid_step)
            ) + 1
            if n_grid < self.speakers:
                problems.append(
                    f"corpus f0 grid has {n_grid} points at step {self.f0_grid_step}"
                    f" but {self.speakers} speakers are requested"
                )
        if self.max_harmonics < 1:
            problems.append("corpus.max_harmonics must be >= 1")
        if not 0 <= self.vibrato_depth_max <= 0.2:
            problems.append("corpus.vibrato_depth_max must lie in [0, 0.2]")
        if len(self.alphabet) < 2:
            problems.append("corpus.alphabet needs at least 2 symbols")
        for ch in self.alphabet:
            if ch not in frontend.SYMBOL_TO_ID:
                problems.append(f"corpus.alphabet symbol {ch!r} not in frontend vocabulary")
        if problems:
            raise ValidationError("; ".join(problems))


def make_speakers(cfg: CorpusConfig):
    """Deterministic speaker roster over a quantized f0 grid.

    Fundamentals sit on multiples of `f0_grid_step` (a continuous geomspace
    when the step is 0), which keeps each voice periodic over a handful of
    codec frames instead of precessing continuously. Held-out speakers (the
    last `held_out_speakers` ids) take the centermost grid points, so
    zero-shot cloning is an interpolation task: unseen voices lie strictly
    inside the f0 range covered by training speakers."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    if cfg.f0_grid_step > 0:
        step = cfg.f0_grid_step
        points = step * np.arange(
            int(np.ceil(cfg.f0_min / step)), int(cfg.f0_max / step) + 1
        )
        pick = np.round(np.linspace(0, len(points) - 1, cfg.speakers)).astype(int)
        grid = points[pick]
    else:
        grid = np.geomspace(cfg.f0_min, cfg.f0_max, cfg.speakers)
    h = cfg.held_out_speakers
    lo = (cfg.speakers - h) // 2
    held_idx = list(range(lo, lo + h))
    train_idx = [i for i in range(cfg.speakers) if i not in held_idx]
    order = rng.permutation(len(train_idx))
    f0_of = {}
    for rank, sid in enumerate(range(cfg.speakers - h)):
        f0_of[sid] = float(grid[train_idx[order[rank]]])
    for j, sid in enumerate(range(cfg.speakers - h, cfg.speakers)):
        f0_of[sid] = float(grid[held_idx[j]])
    specs = []
    for sid in range(cfg.speakers):
        n_h = int(rng.integers(3, cfg.max_harmonics + 1))
        decay = rng.uniform(0.5, 0.9)
        amps = rng.uniform(0.4, 1.0, n_h) * decay ** np.arange(n_h)
        specs.append(
            SpeakerSpec(
                speaker_id=sid,
                f0=f0_of[sid],
                harmonic_amps=tuple(float(a) for a in amps),
                vibrato_rate=float(rng.uniform(cfg.vibrato_rate_min, cfg.vibrato_rate_max)),
                vibrato_depth=float(rng.uniform(0.0, cfg.vibrato_depth_max)),
            )
        )
    return specs


def make_content(cfg: CorpusConfig, rng: np.random.Generator) -> ContentSeq:
    """Random symbol sequence with no immediate repeats, filling a random
    target duration."""
    target = rng.uniform(cfg.duration_min, cfg.duration_max)
    units = []
    total = 0.0
    prev = None
    while total < target:
        ch = cfg.alphabet[int(rng.integers(len(cfg.alphabet)))]
        if ch == prev:
            continue
        dur = float(rng.uniform(cfg.unit_min, cfg.unit_max))
        if cfg.unit_quantum > 0:
            dur = max(cfg.unit_quantum, round(dur / cfg.unit_quantum) * cfg.unit_quantum)
        off = 0.0
        if cfg.pitch_offset_max > 0:
            off = float(rng.uniform(-cfg.pitch_offset_max, cfg.pitch_offset_max))
        units.append(ContentUnit(frontend.symbol_id(ch), dur, off))
        total += dur
        prev = ch
    return ContentSeq(units=tuple(units))


def _worker_count(requested: int) -> int:
    cap = os.environ.get("CODEC_LM_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if requested > 0:
        limit = min(limit, requested)
    return max(1, limit)


def build_corpus(cfg: CorpusConfig):
    """Generate and persist the corpus; returns the manifest path.

    Layout: <out>/manifest.tsv, speakers.tsv, alignments.tsv, audio/*.clm.
    Held-out speakers are the last `held_out_speakers` ids and are marked
    split=eval; they appear in no train entry.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    audio_dir = out / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    specs = make_speakers(cfg)
    first_eval = cfg.speakers - cfg.held_out_speakers

    jobs = []
    for spec in specs:
        for idx in range(cfg.utterances_per_speaker):
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 7, spec.speaker_id, idx])
            )
            content = make_content(cfg, rng)
            utt_seed = int(rng.integers(0, 2**31))
            jobs.append((spec, idx, content, utt_seed))

    def render(job):
        spec, idx, content, utt_seed = job
        utt = generate_utterance(spec, content, cfg.sample_rate, utt_seed)
        utt_id = f"utt_{spec.speaker_id:03d}_{idx:03d}"
        rel = f"audio/{utt_id}.clm"
        formats.write_audio(out / rel, utt.waveform.samples, cfg.sample_rate)
        return utt_id, spec.speaker_id, rel, utt

    results = []
    with ThreadPoolExecutor(max_workers=_worker_count(cfg.workers)) as pool:
        for item in pool.map(render, jobs):
            results.append(item)
    results.sort(key=lambda r: r[0])

    manifest_rows = []
    align_lines = []
    for utt_id, sid, rel, utt in results:
        split = "eval" if sid >= first_eval else "train"
        manifest_rows.append((utt_id, sid, split, rel, utt.text))
        triples = " ".join(
            f"{frontend.ID_TO_SYMBOL[u.symbol_id]}:{u.duration!r}:{u.pitch_offset!r}"
            for u in utt.content.units
        )
        align_lines.append(f"{utt_id}\t{triples}\n")

    formats.write_manifest(out / "manifest.tsv", manifest_rows)
    with open(out / "alignments.tsv", "w", encoding="utf-8") as fh:
        fh.writelines(align_lines)
    with open(out / "speakers.tsv", "w", encoding="utf-8") as fh:
        for spec in specs:
            split = "eval" if spec.speaker_id >= first_eval else "train"
            amps = ",".join(repr(a) for a in spec.harmonic_amps)
            fh.write(
                f"{spec.speaker_id}\t{spec.f0!r}\t{spec.vibrato_rate!r}"
                f"\t{spec.vibrato_depth!r}\t{amps}\t{split}\n"
            )
    log.info(
        "corpus written to %s: %d utterances, %d train / %d eval speakers",
        out,
        len(results),
        first_eval,
        cfg.held_out_speakers,
    )
    return out / "manifest.tsv"


def read_speakers(corpus_dir):
    """Parse speakers.tsv back into SpeakerSpec plus split labels."""
    rows = {}
    with open(Path(corpus_dir) / "speakers.tsv", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            sid, f0, rate, depth, amps, split = line.split("\t")
            spec = SpeakerSpec(
                speaker_id=int(sid),
                f0=float(f0),
                harmonic_amps=tuple(float(a) for a in amps.split(",")),
                vibrato_rate=float(rate),
                vibrato_depth=float(depth),
            )
            rows[int(sid)] = (spec, split)
    return rows


def read_alignments(corpus_dir):
    """Parse alignments.tsv: utt_id -> tuple of ContentUnit."""
    out = {}
    with open(Path(corpus_dir) / "alignments.tsv", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, triples = line.split("\t")
            units = []
            for item in triples.split(" "):
                sym, dur, off = item.split(":")
                units.append(ContentUnit(frontend.symbol_id(sym), float(dur), float(off)))
            out[utt_id] = tuple(units)
    return out
