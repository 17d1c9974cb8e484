import numpy as np
import pytest
from scipy.io import wavfile

from app.core.models.signal_models import AudioBuffer, NoteEvent, PianoRoll, Spectrogram, SynthConfig
from app.core.services.signal_service import (
    discard_silent_frames,
    quantize_ground_truth,
    random_chord_events,
    read_wav,
    render_events,
    stft_log_magnitude,
    synth_mixture,
    synth_note,
)
from app.shared.errors import InvalidInputError

SR = 16000


def _sine(frequency: float, n: int = SR) -> AudioBuffer:
    t = np.arange(n) / SR
    return AudioBuffer(samples=np.sin(2 * np.pi * frequency * t), sample_rate=SR)


class TestStft:
    def test_silence_gives_zero_spectrogram(self):
        spec = stft_log_magnitude(AudioBuffer(samples=np.zeros(SR), sample_rate=SR), 1024, 512)
        assert spec.values.shape == (512, 30)
        assert spec.t == 30
        assert np.all(spec.values == 0)

    def test_sinusoid_peaks_at_its_bin(self):
        spec = stft_log_magnitude(_sine(500.0), 1024, 512)
        # 500 Hz is DFT bin 32; bin 0 is dropped
        assert np.all(np.argmax(spec.values, axis=0) == 31)

    def test_short_input_rejected(self):
        with pytest.raises(InvalidInputError, match="input too short"):
            stft_log_magnitude(AudioBuffer(samples=np.zeros(1000), sample_rate=SR), 1024, 512)

    def test_non_finite_rejected(self):
        samples = np.zeros(2048)
        samples[10] = np.nan
        with pytest.raises(ValueError, match="invalid audio"):
            stft_log_magnitude(AudioBuffer(samples=samples, sample_rate=SR), 1024, 512)

    def test_out_of_range_amplitude_rejected(self):
        with pytest.raises(ValueError, match=r"outside \[-1, 1\]"):
            AudioBuffer(samples=np.array([0.0, 1.5, -0.2]), sample_rate=SR)

    def test_trailing_partial_frame_ignored(self):
        rng = np.random.default_rng(0)
        samples = rng.uniform(-1, 1, SR + 100)
        full = stft_log_magnitude(AudioBuffer(samples=samples, sample_rate=SR), 1024, 512)
        cut = stft_log_magnitude(AudioBuffer(samples=samples[:SR], sample_rate=SR), 1024, 512)
        np.testing.assert_array_equal(full.values, cut.values)

    def test_monotone_in_amplitude(self):
        rng = np.random.default_rng(1)
        samples = rng.uniform(-0.5, 0.5, 4096)
        quiet = stft_log_magnitude(AudioBuffer(samples=samples, sample_rate=SR), 256, 128)
        loud = stft_log_magnitude(AudioBuffer(samples=2 * samples, sample_rate=SR), 256, 128)
        assert np.all(loud.values >= quiet.values)
        assert np.all(quiet.values >= 0)


class TestSynthNote:
    def test_pure_tone_without_noise(self):
        cfg = SynthConfig(k=1, fundamentals=[440.0], partials=1, noise_level=0.0)
        note = synth_note(0, 0.1, 1.0, cfg)
        t = np.arange(len(note.samples)) / SR
        expected = np.exp(-t / cfg.envelope_decay) * np.sin(2 * np.pi * 440.0 * t)
        np.testing.assert_allclose(note.samples, expected, atol=1e-12)

    def test_linear_in_intensity(self):
        cfg = SynthConfig(k=2, fundamentals=[200.0, 300.0], partials=4)
        half = synth_note(1, 0.2, 0.5, cfg)
        full = synth_note(1, 0.2, 1.0, cfg)
        np.testing.assert_allclose(half.samples, 0.5 * full.samples, rtol=1e-12, atol=1e-15)

    def test_peak_bounded_by_intensity(self):
        cfg = SynthConfig(k=2, fundamentals=[200.0, 300.0], partials=4)
        note = synth_note(0, 0.5, 0.7, cfg)
        assert np.max(np.abs(note.samples)) <= 0.7

    def test_fundamental_dominates_spectrum(self):
        cfg = SynthConfig(k=2, fundamentals=[200.0, 300.0], partials=4)
        spec = stft_log_magnitude(synth_note(0, 1.0, 1.0, cfg), 1024, 512)
        peak_row, _ = np.unravel_index(np.argmax(spec.values), spec.values.shape)
        # row r holds DFT bin r + 1
        assert abs((peak_row + 1) - 200.0 * 1024 / SR) <= 1

    def test_unknown_source(self):
        cfg = SynthConfig(k=2, fundamentals=[200.0, 300.0])
        with pytest.raises(InvalidInputError, match="unknown source"):
            synth_note(2, 0.1, 1.0, cfg)

    def test_nyquist_violation_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(k=1, fundamentals=[3000.0], partials=4, sample_rate=16000)


class TestMixtures:
    cfg = SynthConfig(k=3, fundamentals=[200.0, 300.0, 450.0], partials=3)

    def test_single_event_equals_note(self):
        event = NoteEvent(source_id=1, onset=0.0, duration=0.25, intensity=0.8)
        mixture, echoed = synth_mixture([event], self.cfg)
        note = synth_note(1, 0.25, 0.8, self.cfg)
        np.testing.assert_allclose(mixture.samples, note.samples)
        assert echoed == [event]

    def test_identical_events_add(self):
        event = NoteEvent(source_id=0, onset=0.0, duration=0.2, intensity=0.4)
        single = render_events([event], self.cfg)
        double = render_events([event, event], self.cfg)
        np.testing.assert_allclose(double, 2 * single)

    def test_disjoint_events_keep_their_segments(self):
        first = NoteEvent(source_id=0, onset=0.0, duration=0.25, intensity=0.5)
        second = NoteEvent(source_id=2, onset=0.5, duration=0.25, intensity=0.5)
        mixture = render_events([first, second], self.cfg)
        np.testing.assert_allclose(mixture[:4000], synth_note(0, 0.25, 0.5, self.cfg).samples)
        np.testing.assert_allclose(mixture[8000:12000], synth_note(2, 0.25, 0.5, self.cfg).samples)
        assert np.all(mixture[4000:8000] == 0)

    def test_mixture_is_peak_normalised(self):
        events = [NoteEvent(source_id=i, onset=0.0, duration=0.3, intensity=1.0) for i in range(3)]
        mixture, _ = synth_mixture(events, self.cfg)
        assert np.max(np.abs(mixture.samples)) <= 1.0 + 1e-12

    def test_random_chords_have_exact_polyphony(self):
        rng = np.random.default_rng(3)
        events = random_chord_events(4, 2, 5, 0.2, (0.3, 0.9), rng)
        assert len(events) == 10
        for segment in range(5):
            chord = [e.source_id for e in events if e.onset == pytest.approx(segment * 0.2)]
            assert len(set(chord)) == 2
        # hop 500 with window 300 keeps every frame centre off the segment boundaries
        roll = quantize_ground_truth(events, 4, 30, 500, SR, window=300)
        assert np.all(roll.active.sum(axis=0) == 2)


class TestQuantize:
    def test_no_events(self):
        roll = quantize_ground_truth([], 3, 10, 512, SR, window=1024)
        assert roll.active.shape == (3, 10)
        assert not roll.active.any()

    def test_event_covering_everything(self):
        event = NoteEvent(source_id=1, onset=0.0, duration=10.0, intensity=1.0)
        roll = quantize_ground_truth([event], 2, 8, 512, SR, window=1024)
        assert np.all(roll.active[1] == 1)
        assert np.all(roll.active[0] == 0)

    def test_event_of_two_and_a_half_frame_periods(self):
        event = NoteEvent(source_id=0, onset=0.0, duration=2.5 * 512 / SR, intensity=1.0)
        roll = quantize_ground_truth([event], 1, 6, 512, SR, window=256)
        assert roll.active[0].tolist() == [1, 1, 1, 0, 0, 0]

    def test_window_shifts_frame_centres(self):
        event = NoteEvent(source_id=0, onset=0.0, duration=2.5 * 512 / SR, intensity=1.0)
        roll = quantize_ground_truth([event], 1, 6, 512, SR, window=1024)
        assert roll.active[0].tolist() == [1, 1, 0, 0, 0, 0]

    def test_unknown_source(self):
        event = NoteEvent(source_id=3, onset=0.0, duration=1.0, intensity=1.0)
        with pytest.raises(InvalidInputError, match="unknown source"):
            quantize_ground_truth([event], 2, 4, 512, SR, window=1024)

    def test_window_is_required(self):
        with pytest.raises(TypeError):
            quantize_ground_truth([], 1, 4, 512, SR)
        with pytest.raises(InvalidInputError, match="window must be positive"):
            quantize_ground_truth([], 1, 4, 512, SR, window=0)


class TestDiscardSilentFrames:
    @staticmethod
    def _spec(t: int) -> Spectrogram:
        values = np.tile(np.arange(t, dtype=float), (4, 1))
        return Spectrogram(values=values, hop=4, window=8)

    def test_all_active_is_identity(self):
        spec, roll = self._spec(5), PianoRoll(active=np.ones((2, 5)))
        kept_spec, kept_roll = discard_silent_frames(spec, roll)
        np.testing.assert_array_equal(kept_spec.values, spec.values)
        np.testing.assert_array_equal(kept_roll.active, roll.active)

    def test_single_silent_column_removed(self):
        active = np.ones((2, 5))
        active[:, 2] = 0
        kept_spec, kept_roll = discard_silent_frames(self._spec(5), PianoRoll(active=active))
        assert kept_spec.values[0].tolist() == [0, 1, 3, 4]
        assert kept_roll.t == 4

    def test_alternating_keeps_even_columns(self):
        active = np.zeros((1, 10))
        active[0, ::2] = 1
        kept_spec, kept_roll = discard_silent_frames(self._spec(10), PianoRoll(active=active))
        assert kept_spec.values[0].tolist() == [0, 2, 4, 6, 8]
        again_spec, again_roll = discard_silent_frames(kept_spec, kept_roll)
        np.testing.assert_array_equal(again_spec.values, kept_spec.values)
        np.testing.assert_array_equal(again_roll.active, kept_roll.active)

    def test_all_silent_rejected(self):
        with pytest.raises(InvalidInputError, match="empty after silence removal"):
            discard_silent_frames(self._spec(3), PianoRoll(active=np.zeros((2, 3))))


class TestReadWav:
    def test_stereo_is_averaged(self, tmp_path):
        left = np.array([0, 16384, -16384, 32767], dtype=np.int16)
        right = np.array([0, 0, 16384, -32768], dtype=np.int16)
        path = tmp_path / "stereo.wav"
        wavfile.write(str(path), 8000, np.stack([left, right], axis=1))
        audio = read_wav(path)
        assert audio.sample_rate == 8000
        expected = (left.astype(float) + right.astype(float)) / 2 / 32768.0
        np.testing.assert_allclose(audio.samples, expected)

    def test_float_wav_rejected(self, tmp_path):
        path = tmp_path / "float.wav"
        wavfile.write(str(path), 8000, np.zeros(16, dtype=np.float32))
        with pytest.raises(InvalidInputError, match="unsupported WAV"):
            read_wav(path)
