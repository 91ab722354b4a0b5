"""Synthetic sources, mixtures, and stand-in visual features.

Each class owns a harmonic timbre: a fundamental band, a harmonic rolloff,
and an amplitude-envelope family. Bands are disjoint by default so classes
are separable by construction; hard mode overlaps every band for stress
tests. Visual features are class embeddings; motion features modulate the
embedding by the clip's short-time energy envelope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dgfnet.dsp import Waveform, mix, write_wav
from dgfnet.errors import ContractError
from dgfnet.seeds import derive_seed, rng_for

ENVELOPE_FAMILIES = ("sustain", "pluck", "tremolo", "swell")


@dataclass(frozen=True)
class SourceClass:
    id: int
    f0_lo: float
    f0_hi: float
    n_harmonics: int
    harmonic_decay: float
    odd_only: bool
    envelope: str

    def __post_init__(self):
        if self.envelope not in ENVELOPE_FAMILIES:
            raise ContractError(f"unknown envelope family {self.envelope!r}")
        if not (0 < self.f0_lo < self.f0_hi):
            raise ContractError(f"bad fundamental band [{self.f0_lo}, {self.f0_hi}]")


@dataclass(frozen=True)
class VisualFeature:
    object_feature: np.ndarray  # (C_O,)
    motion_feature: np.ndarray  # (C_M, T')

    def __post_init__(self):
        if not (np.all(np.isfinite(self.object_feature))
                and np.all(np.isfinite(self.motion_feature))):
            raise ContractError("visual feature contains non-finite values")
        if self.motion_feature.ndim != 2 or self.motion_feature.shape[1] < 1:
            raise ContractError(f"motion feature needs shape (C_M, T'>=1), "
                                f"got {self.motion_feature.shape}")


@dataclass(frozen=True)
class MixtureExample:
    sources: list[Waveform]
    mixture: Waveform
    visuals: list[VisualFeature]
    labels: list[int]

    def __post_init__(self):
        k = len(self.sources)
        if k < 2 or len(self.visuals) != k or len(self.labels) != k:
            raise ContractError("mixture example needs K >= 2 aligned sources/visuals/labels")
        if len(set(self.labels)) != k:
            raise ContractError(f"labels must be pairwise distinct, got {self.labels}")


def build_classes(n: int, hard: bool = False,
                  band_lo: float = 200.0, band_hi: float = 1600.0) -> list[SourceClass]:
    """n timbre classes over [band_lo, band_hi] Hz, geometrically partitioned.

    The default band keeps every fundamental at least four analysis bins
    above DC for the short desk window, so neighbouring partials resolve
    instead of smearing into one lobe.  Every class gets an extended comb
    (five or more partials, gentle rolloff) so its identity survives the
    coarse grid.  hard=True gives every class the full band so
    fundamentals overlap.
    """
    if n < 2:
        raise ContractError(f"need >= 2 classes, got {n}")
    edges = band_lo * (band_hi / band_lo) ** (np.arange(n + 1) / n)
    out = []
    for i in range(n):
        lo, hi = (band_lo, band_hi) if hard else (edges[i], edges[i + 1])
        out.append(SourceClass(
            id=i, f0_lo=float(lo), f0_hi=float(hi),
            n_harmonics=5 + (i % 3),
            harmonic_decay=0.6 + 0.2 * (i % 3),
            odd_only=(i % 4 == 3),
            envelope=ENVELOPE_FAMILIES[i % len(ENVELOPE_FAMILIES)],
        ))
    return out


def _envelope(family: str, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    dur = t[-1] if t.size > 1 else 1.0
    if family == "sustain":
        a = min(0.02, 0.2 * dur)
        env = np.minimum(1.0, t / a) * np.minimum(1.0, (dur - t) / a)
        return np.clip(env, 0.0, 1.0)
    if family == "pluck":
        tau = rng.uniform(0.1, 0.4) * max(dur, 1e-3)
        return np.exp(-t / tau)
    if family == "tremolo":
        rate = rng.uniform(4.0, 9.0)
        return 0.6 + 0.4 * np.sin(2 * np.pi * rate * t)
    if family == "swell":
        return np.clip(t / max(dur, 1e-9), 0.0, 1.0) ** 2
    raise ContractError(f"unknown envelope family {family!r}")


class SourceBank:
    """Deterministic factory over a fixed class set.

    Class embeddings are fixed by (master_seed, class id); per-draw
    randomness comes only from the seed passed to each call.
    """

    def __init__(self, classes: list[SourceClass], sample_rate: int,
                 c_o: int = 64, c_m: int = 32, t_motion: int = 16,
                 master_seed: int = 0):
        ids = [c.id for c in classes]
        if ids != list(range(len(classes))):
            raise ContractError(f"class ids must be dense 0..N-1, got {ids}")
        self.classes = classes
        self.sample_rate = sample_rate
        self.c_o, self.c_m, self.t_motion = c_o, c_m, t_motion
        self.master_seed = master_seed
        self._obj_emb = np.stack([
            rng_for(master_seed, "class-emb", c.id).standard_normal(c_o)
            for c in classes
        ])
        self._mot_emb = np.stack([
            rng_for(master_seed, "motion-emb", c.id).standard_normal(c_m)
            for c in classes
        ])

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def _class(self, class_id: int) -> SourceClass:
        if not 0 <= class_id < self.n_classes:
            raise ContractError(f"unknown class id {class_id} (N={self.n_classes})")
        return self.classes[class_id]

    def sample_source(self, class_id: int, duration: float, seed: int) -> Waveform:
        cls = self._class(class_id)
        if duration <= 0:
            raise ContractError(f"duration must be positive, got {duration}")
        rng = rng_for(seed, "source", class_id)
        sr = self.sample_rate
        n = int(round(duration * sr))
        t = np.arange(n) / sr
        f0 = rng.uniform(cls.f0_lo, cls.f0_hi)
        nyq = sr / 2.0
        x = np.zeros(n)
        harmonics = range(1, 2 * cls.n_harmonics, 2) if cls.odd_only \
            else range(1, cls.n_harmonics + 1)
        for k in harmonics:
            fk = k * f0
            if fk >= nyq * 0.95:
                break
            amp = k ** (-cls.harmonic_decay) * rng.uniform(0.85, 1.15)
            x += amp * np.sin(2 * np.pi * fk * t + rng.uniform(0, 2 * np.pi))
        x *= _envelope(cls.envelope, t, rng)
        peak = np.abs(x).max()
        if peak > 0:
            x *= 0.9 / peak
        return Waveform(x, sr)

    def make_visual(self, class_id: int, source: Waveform, seed: int) -> VisualFeature:
        cls = self._class(class_id)
        if len(source) == 0:
            raise ContractError("source waveform is empty")
        rng = rng_for(seed, "visual", class_id)
        obj = self._obj_emb[cls.id] + 0.05 * rng.standard_normal(self.c_o)
        # frame-level RMS envelope over T' equal chunks
        chunks = np.array_split(source.samples, self.t_motion)
        env = np.array([np.sqrt(np.mean(c * c)) if c.size else 0.0 for c in chunks])
        motion = self._mot_emb[cls.id][:, None] * (0.05 + env[None, :])
        motion = motion + 0.01 * rng.standard_normal(motion.shape)
        return VisualFeature(obj, motion)

    def sample_mixture(self, k: int, duration: float, seed: int) -> MixtureExample:
        if not 2 <= k <= self.n_classes:
            raise ContractError(f"K must be in [2, {self.n_classes}], got {k}")
        rng = rng_for(seed, "mixture")
        labels = [int(c) for c in rng.choice(self.n_classes, size=k, replace=False)]
        sources = [
            self.sample_source(cid, duration, derive_seed(seed, "slot-src", i))
            for i, cid in enumerate(labels)
        ]
        visuals = [
            self.make_visual(cid, src, derive_seed(seed, "slot-vis", i))
            for i, (cid, src) in enumerate(zip(labels, sources))
        ]
        return MixtureExample(sources, mix(sources), visuals, labels)


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 8
    k_sources: int = 2
    n_examples: int = 64
    duration: float = 0.372  # ~4100 samples at 11025 Hz
    sample_rate: int = 11025
    seed: int = 0
    hard: bool = False
    c_o: int = 64
    c_m: int = 32
    t_motion: int = 16


class SyntheticDataset:
    """Indexable example stream, fully determined by its spec."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self.bank = SourceBank(
            build_classes(spec.n_classes, spec.hard),
            spec.sample_rate, spec.c_o, spec.c_m, spec.t_motion,
            master_seed=spec.seed,
        )

    def __len__(self):
        return self.spec.n_examples

    def example_seed(self, index: int) -> int:
        return derive_seed(self.spec.seed, "example", index)

    def __getitem__(self, index: int) -> MixtureExample:
        if not 0 <= index < len(self):
            raise ContractError(f"index {index} out of range [0, {len(self)})")
        return self.bank.sample_mixture(
            self.spec.k_sources, self.spec.duration, self.example_seed(index)
        )


def write_manifest(ds: SyntheticDataset, path: str | Path,
                   wav_dir: str | Path | None = None) -> None:
    """Line-delimited JSON manifest. Field order per record:
    index, seed, k, classes, wavs (list of paths or null).
    """
    path = Path(path)
    if wav_dir is not None:
        wav_dir = Path(wav_dir)
        wav_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(ds)):
        ex = ds[i]
        wavs = None
        if wav_dir is not None:
            wavs = []
            mix_path = wav_dir / f"ex{i:05d}_mix.wav"
            write_wav(mix_path, ex.mixture)
            wavs.append(str(mix_path))
            for j, (src, cid) in enumerate(zip(ex.sources, ex.labels)):
                p = wav_dir / f"ex{i:05d}_src{j}_class{cid}.wav"
                write_wav(p, src)
                wavs.append(str(p))
        rec = {"index": i, "seed": ds.example_seed(i), "k": len(ex.sources),
               "classes": ex.labels, "wavs": wavs}
        lines.append(json.dumps(rec, separators=(",", ":")))
    path.write_text("\n".join(lines) + "\n")
