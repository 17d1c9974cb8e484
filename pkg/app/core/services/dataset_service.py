"""
Builds the synthetic dataset: isolated notes per source (train/validation) and
polyphonic test mixtures with piano rolls.
"""
import logging
from typing import List

import numpy as np

from app.core.models.run_models import DatasetManifest, ManifestSample, ManifestSource, RunConfig
from app.core.models.signal_models import NoteEvent, PianoRoll
from app.core.repositories.dataset_repository import DatasetRepository
from app.core.services.signal_service import (
    discard_silent_frames,
    quantize_ground_truth,
    random_chord_events,
    stft_log_magnitude,
    synth_mixture,
    synth_note,
)

logger = logging.getLogger(__name__)


class DatasetService:
    def __init__(self, repository: DatasetRepository):
        self.repository = repository

    def _isolated_samples(self, config: RunConfig, rng: np.random.Generator) -> List[ManifestSample]:
        synth, ds = config.synth, config.dataset
        samples = []
        n_val = min(ds.notes_per_source - 1, max(1, int(round(ds.notes_per_source * ds.validation_fraction))))
        for source_id in range(synth.k):
            validation = set(rng.permutation(ds.notes_per_source)[:n_val].tolist())
            for note in range(ds.notes_per_source):
                intensity = float(rng.uniform(ds.intensity_min, ds.intensity_max))
                audio = synth_note(source_id, ds.note_duration, intensity, synth)
                spec = stft_log_magnitude(audio, ds.window, ds.hop)
                split = "validation" if note in validation else "train"
                path = f"isolated/source_{source_id:02d}/note_{note:02d}.ddsm"
                self.repository.write_matrix(path, spec.values)
                samples.append(
                    ManifestSample(
                        name=f"source_{source_id:02d}_note_{note:02d}",
                        kind="isolated",
                        split=split,
                        path=path,
                        sources=[source_id],
                        frames=spec.t,
                    )
                )
        return samples

    def _mixture_samples(self, config: RunConfig, rng: np.random.Generator) -> List[ManifestSample]:
        synth, ds = config.synth, config.dataset
        samples = []
        for index in range(ds.mixtures):
            events: List[NoteEvent] = random_chord_events(
                synth.k,
                ds.polyphony,
                ds.segments_per_mixture,
                ds.segment_duration,
                (ds.intensity_min, ds.intensity_max),
                rng,
            )
            audio, events = synth_mixture(events, synth)
            spec = stft_log_magnitude(audio, ds.window, ds.hop)
            roll: PianoRoll = quantize_ground_truth(
                events, synth.k, spec.t, ds.hop, synth.sample_rate, window=ds.window
            )
            spec, roll = discard_silent_frames(spec, roll)
            name = f"mixture_{index:02d}"
            path, roll_path = f"test/{name}.ddsm", f"test/{name}_roll.ddsm"
            self.repository.write_matrix(path, spec.values)
            self.repository.write_matrix(roll_path, roll.active)
            samples.append(
                ManifestSample(
                    name=name,
                    kind="mixture",
                    split="test",
                    path=path,
                    roll_path=roll_path,
                    sources=sorted({e.source_id for e in events}),
                    frames=spec.t,
                )
            )
            logger.info(f"Mixture {name}: {spec.t} frames, polyphony {ds.polyphony}")
        return samples

    def build(self, config: RunConfig) -> DatasetManifest:
        """Synthesize every sample, write the DDSM files and the manifest"""
        synth, ds = config.synth, config.dataset
        rng = np.random.default_rng(ds.seed)
        samples = self._isolated_samples(config, rng) + self._mixture_samples(config, rng)
        manifest = DatasetManifest(
            sample_rate=synth.sample_rate,
            window=ds.window,
            hop=ds.hop,
            d=ds.window // 2,
            k=synth.k,
            polyphony=ds.polyphony,
            seed=ds.seed,
            sources=[ManifestSource(source_id=i, fundamental=f) for i, f in enumerate(synth.fundamentals)],
            samples=samples,
        )
        self.repository.save_manifest(manifest)
        logger.info(
            f"Synthesized {synth.k} sources: {len(manifest.by_split('train'))} train, "
            f"{len(manifest.by_split('validation'))} validation, {len(manifest.by_split('test'))} test samples"
        )
        return manifest
