"""
Audio synthesis, spectral analysis and ground-truth handling.

Everything here is a pure function of its arguments and seeds.
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

from app.core.models.signal_models import AudioBuffer, NoteEvent, PianoRoll, Spectrogram, SynthConfig
from app.shared.errors import InvalidInputError, StorageError

logger = logging.getLogger(__name__)


def stft_log_magnitude(audio: AudioBuffer, window: int, hop: int) -> Spectrogram:
    """
    log(1 + |DFT|) of Hann-windowed frames, keeping bins 1..window/2.

    T = floor((L - window) / hop) + 1; trailing samples short of a full frame are ignored.
    """
    if window < 2 or window % 2:
        raise InvalidInputError(f"window must be even and >= 2, got {window}")
    if hop < 1:
        raise InvalidInputError(f"hop must be >= 1, got {hop}")
    samples = audio.samples
    if len(samples) < window:
        raise InvalidInputError(f"input too short: {len(samples)} samples < window {window}")

    frames = sliding_window_view(samples, window)[::hop]
    spectrum = np.fft.rfft(frames * get_window("hann", window), axis=1)
    values = np.log1p(np.abs(spectrum[:, 1: window // 2 + 1]))
    return Spectrogram(values=values.T, hop=hop, window=window, sample_rate=audio.sample_rate)


def _partial_weights(cfg: SynthConfig) -> np.ndarray:
    return cfg.partial_decay ** np.arange(cfg.partials)


def synth_note(
    source_id: int,
    duration: float,
    intensity: float,
    cfg: SynthConfig,
    sample_rate: Optional[int] = None,
) -> AudioBuffer:
    """Decaying harmonic tone plus uniform noise; peak amplitude <= intensity"""
    sample_rate = sample_rate or cfg.sample_rate
    if not 0 <= source_id < cfg.k:
        raise InvalidInputError(f"unknown source: {source_id} not in [0, {cfg.k})")
    if not 0 < intensity <= 1:
        raise InvalidInputError(f"intensity must lie in (0, 1], got {intensity}")
    if duration <= 0:
        raise InvalidInputError(f"duration must be positive, got {duration}")
    try:
        cfg.check_nyquist(sample_rate)
    except ValueError as e:
        raise InvalidInputError(str(e)) from e

    n_samples = max(1, int(round(duration * sample_rate)))
    t = np.arange(n_samples) / sample_rate
    fundamental = cfg.fundamentals[source_id]
    weights = _partial_weights(cfg)
    harmonics = np.arange(1, cfg.partials + 1)
    tone = weights @ np.sin(2.0 * np.pi * fundamental * np.outer(harmonics, t))
    tone /= weights.sum()

    # noise depends on the note, not on its intensity, so intensity scales linearly
    rng = np.random.default_rng((cfg.seed, source_id, n_samples))
    noise = rng.uniform(-1.0, 1.0, n_samples)
    envelope = np.exp(-t / cfg.envelope_decay)
    samples = intensity * envelope * ((1.0 - cfg.noise_level) * tone + cfg.noise_level * noise)
    return AudioBuffer(samples=samples, sample_rate=sample_rate)


def render_events(events: Sequence[NoteEvent], cfg: SynthConfig, sample_rate: Optional[int] = None) -> np.ndarray:
    """Sample-wise sum of note renderings placed at their onsets, before normalisation"""
    sample_rate = sample_rate or cfg.sample_rate
    notes = []
    for event in events:
        note = synth_note(event.source_id, event.duration, event.intensity, cfg, sample_rate)
        start = int(round(event.onset * sample_rate))
        notes.append((start, note.samples))
    length = max(start + len(samples) for start, samples in notes)
    mixture = np.zeros(length)
    for start, samples in notes:
        mixture[start: start + len(samples)] += samples
    return mixture


def synth_mixture(
    events: Sequence[NoteEvent],
    cfg: SynthConfig,
    sample_rate: Optional[int] = None,
) -> Tuple[AudioBuffer, List[NoteEvent]]:
    """Mix the events and peak-normalise to at most 1; the events are echoed back"""
    if not events:
        raise InvalidInputError("synth_mixture needs at least one event")
    sample_rate = sample_rate or cfg.sample_rate
    mixture = render_events(events, cfg, sample_rate)
    peak = float(np.max(np.abs(mixture)))
    mixture = mixture / max(peak, 1.0)
    return AudioBuffer(samples=mixture, sample_rate=sample_rate), list(events)


def quantize_ground_truth(
    events: Sequence[NoteEvent],
    k: int,
    t: int,
    hop: int,
    sample_rate: int,
    *,
    window: int,
) -> PianoRoll:
    """
    Frame f is active for a source when its centre (f * hop + window / 2) / sample_rate
    falls in [onset, onset + duration) of one of the source's events.
    """
    if t < 1:
        raise InvalidInputError(f"piano roll needs at least one frame, got {t}")
    if window < 1:
        raise InvalidInputError(f"window must be positive, got {window}")
    centres = (np.arange(t) * hop + window / 2.0) / sample_rate
    active = np.zeros((k, t), dtype=np.int8)
    for event in events:
        if event.source_id >= k:
            raise InvalidInputError(f"unknown source: {event.source_id} not in [0, {k})")
        inside = (centres >= event.onset) & (centres < event.onset + event.duration)
        active[event.source_id, inside] = 1
    return PianoRoll(active=active)


def discard_silent_frames(spec: Spectrogram, roll: PianoRoll) -> Tuple[Spectrogram, PianoRoll]:
    if spec.t != roll.t:
        raise InvalidInputError(f"spectrogram has {spec.t} frames but piano roll has {roll.t}")
    keep = roll.active.any(axis=0)
    if not keep.any():
        raise InvalidInputError("empty after silence removal")
    kept_spec = spec.model_copy(update={"values": spec.values[:, keep]})
    return kept_spec, PianoRoll(active=roll.active[:, keep])


def random_chord_events(
    k: int,
    polyphony: int,
    segments: int,
    segment_duration: float,
    intensity_range: Tuple[float, float],
    rng: np.random.Generator,
) -> List[NoteEvent]:
    """Back-to-back chords of exactly ``polyphony`` distinct sources each"""
    if not 1 <= polyphony <= k:
        raise InvalidInputError(f"polyphony must lie in [1, {k}], got {polyphony}")
    low, high = intensity_range
    events = []
    for segment in range(segments):
        for source_id in sorted(rng.choice(k, size=polyphony, replace=False).tolist()):
            events.append(
                NoteEvent(
                    source_id=source_id,
                    onset=segment * segment_duration,
                    duration=segment_duration,
                    intensity=float(rng.uniform(low, high)),
                )
            )
    return events


def read_wav(path: Union[str, Path]) -> AudioBuffer:
    """16-bit PCM reader; stereo is averaged down to mono"""
    try:
        sample_rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    if data.dtype != np.int16:
        raise InvalidInputError(f"unsupported WAV: expected 16-bit PCM, got {data.dtype}")
    samples = data.astype(np.float64) / 32768.0
    if samples.ndim == 2:
        logger.info(f"Averaging {samples.shape[1]} channels of {path} to mono")
        samples = samples.mean(axis=1)
    return AudioBuffer(samples=samples, sample_rate=sample_rate)
