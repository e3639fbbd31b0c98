"""Continuous speech separation.

Block-wise mask estimation through a pluggable estimator, permutation
alignment over shared frames, crossfade stitching, and conversion of the
stitched masks into N output streams by mask multiplication or mask-based
MVDR beamforming.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from dasr.errors import InvalidInputError
from dasr.signal import (
    MaskSet,
    Spectrogram,
    StftConfig,
    Waveform,
    apply_mask,
    padded_stft,
    trimmed_istft,
    write_wav,
)

logger = logging.getLogger(__name__)

SINGLE_CHANNEL = "single-channel"
MULTI_CHANNEL = "multi-channel"


@runtime_checkable
class MaskEstimator(Protocol):
    """Source of masks for one block of STFT frames.

    Implementations return a :class:`MaskSet` whose frame count equals
    ``segment.frames``. Set ``concurrent_safe = False`` on estimators
    that must not be called from several threads at once.
    """

    def estimate(self, segment: Spectrogram) -> MaskSet: ...


@dataclass(frozen=True)
class CssConfig:
    segment_frames: int = 150
    overlap_frames: int = 75
    num_streams: int = 3
    mode: str = SINGLE_CHANNEL
    diagonal_loading: float = 1e-6
    ref_channel: int = 0
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if not 0 < self.overlap_frames < self.segment_frames:
            raise InvalidInputError(
                "need 0 < overlap_frames < segment_frames, got "
                f"{self.overlap_frames}, {self.segment_frames}")
        if self.num_streams < 2:
            raise InvalidInputError("CSS needs at least 2 output streams")
        if self.mode not in (SINGLE_CHANNEL, MULTI_CHANNEL):
            raise InvalidInputError(f"unknown CSS mode {self.mode!r}")
        if self.diagonal_loading < 0:
            raise InvalidInputError("diagonal loading must be nonnegative")


@dataclass(frozen=True, eq=False)
class Scm:
    """Per-frequency spatial covariance, shape (bins, channels, channels).

    ``degenerate`` marks frequencies whose mask weight summed to zero.
    """

    matrices: np.ndarray
    degenerate: np.ndarray

    @property
    def channels(self) -> int:
        return self.matrices.shape[-1]


def _mse(a, b):
    return float(np.mean((a - b) ** 2))


def pit_loss(estimated: MaskSet, reference: MaskSet, mixture_magnitude):
    """Permutation invariant MSE between masked magnitudes.

    Returns ``(loss, perm)`` where estimated stream ``i`` is matched to
    reference stream ``perm[i]``. The noise masks are compared without
    permutation and their error is added to the loss.
    """
    mag = np.asarray(mixture_magnitude, dtype=np.float64)
    if estimated.speech_masks.shape != reference.speech_masks.shape:
        raise InvalidInputError(
            f"mask shapes differ: {estimated.speech_masks.shape} vs "
            f"{reference.speech_masks.shape}")
    if mag.shape != estimated.noise_mask.shape:
        raise InvalidInputError(
            f"mixture magnitude shape {mag.shape} does not match masks "
            f"{estimated.noise_mask.shape}")
    if np.any(mag < 0):
        raise InvalidInputError("mixture magnitude must be nonnegative")

    est = estimated.speech_masks * mag
    ref = reference.speech_masks * mag
    n = estimated.num_streams
    # pairwise[i, j] = MSE(est_i, ref_j)
    pairwise = np.array([[_mse(est[i], ref[j]) for j in range(n)] for i in range(n)])
    best, best_perm = _best_permutation(pairwise)
    noise = _mse(estimated.noise_mask * mag, reference.noise_mask * mag)
    return best + noise, best_perm


def _best_permutation(pairwise):
    n = pairwise.shape[0]
    best, best_perm = np.inf, None
    rows = np.arange(n)
    # lexicographic enumeration, strict improvement: first minimum wins
    for perm in itertools.permutations(range(n)):
        cost = pairwise[rows, list(perm)].sum()
        if cost < best:
            best, best_perm = cost, perm
    return float(best), tuple(best_perm)


def align_adjacent(prev: MaskSet, nxt: MaskSet, overlap_frames: int,
                   magnitude=None) -> tuple[int, ...]:
    """Order of ``nxt``'s speech masks that best continues ``prev``.

    The last ``overlap_frames`` of ``prev`` and the first ``overlap_frames``
    of ``nxt`` cover the same absolute frames. ``magnitude`` is the mixture
    magnitude over those shared frames (ones when omitted). Returns ``perm``
    such that ``nxt.permuted(perm)`` is aligned to ``prev``.
    """
    if overlap_frames <= 0:
        raise InvalidInputError("blocks share no frames, cannot align")
    if overlap_frames > min(prev.frames, nxt.frames):
        raise InvalidInputError(
            f"overlap of {overlap_frames} frames exceeds block length")
    if prev.num_streams != nxt.num_streams:
        raise InvalidInputError("adjacent blocks have different stream counts")
    a = prev.speech_masks[:, prev.frames - overlap_frames:]
    b = nxt.speech_masks[:, :overlap_frames]
    if magnitude is None:
        magnitude = np.ones(a.shape[1:])
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if magnitude.shape != a.shape[1:]:
        raise InvalidInputError(
            f"magnitude shape {magnitude.shape} does not match overlap {a.shape[1:]}")
    a = a * magnitude
    b = b * magnitude
    n = prev.num_streams
    pairwise = np.array([[_mse(a[i], b[j]) for j in range(n)] for i in range(n)])
    return _best_permutation(pairwise)[1]


def block_starts(total_frames: int, segment_frames: int, overlap_frames: int) -> list[int]:
    """Start frames of overlapping blocks covering ``total_frames``."""
    step = segment_frames - overlap_frames
    starts = [0]
    while starts[-1] + segment_frames < total_frames:
        starts.append(starts[-1] + step)
    return starts


def stitch(blocks: Sequence[tuple[int, MaskSet]]) -> MaskSet:
    """Join aligned blocks, crossfading linearly across each overlap.

    ``blocks`` holds ``(start_frame, masks)`` pairs sorted by start, with the
    first block starting at frame 0.
    """
    if not blocks:
        raise InvalidInputError("nothing to stitch")
    first_start, first = blocks[0]
    if first_start != 0:
        raise InvalidInputError("first block must start at frame 0")
    if len(blocks) == 1:
        return first
    total = max(start + m.frames for start, m in blocks)
    n, _, bins = first.speech_masks.shape
    speech = np.zeros((n, total, bins))
    noise = np.zeros((total, bins))
    speech[:, :first.frames] = first.speech_masks
    noise[:first.frames] = first.noise_mask
    covered = first.frames
    for start, masks in blocks[1:]:
        if masks.num_streams != n:
            raise InvalidInputError("blocks have different stream counts")
        if start > covered:
            raise InvalidInputError(f"gap between frame {covered} and block at {start}")
        overlap = covered - start
        if overlap > masks.frames:
            raise InvalidInputError(f"block at {start} lies inside the previous block")
        # fade-in weight of the incoming block over the shared frames
        ramp = (np.arange(1, overlap + 1) / (overlap + 1))[:, None]
        old_s = speech[:, start:covered]
        old_n = noise[start:covered]
        speech[:, start:covered] = old_s + ramp * (masks.speech_masks[:, :overlap] - old_s)
        noise[start:covered] = old_n + ramp * (masks.noise_mask[:overlap] - old_n)
        end = start + masks.frames
        speech[:, covered:end] = masks.speech_masks[:, overlap:]
        noise[covered:end] = masks.noise_mask[overlap:]
        covered = end
    return MaskSet(speech, noise)


def compute_scm(s: Spectrogram, mask) -> Scm:
    """Mask-weighted spatial covariance per frequency."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != s.bins.shape[1:]:
        raise InvalidInputError(
            f"mask shape {mask.shape} does not match spectrogram {s.bins.shape[1:]}")
    x = s.bins  # (C, T, F)
    weight = mask.sum(axis=0)  # (F,)
    outer = np.einsum("tf,ctf,dtf->fcd", mask, x, x.conj(), optimize=True)
    degenerate = weight <= 0
    safe = np.where(degenerate, 1.0, weight)
    matrices = outer / safe[:, None, None]
    matrices[degenerate] = 0
    # remove rounding asymmetry
    matrices = 0.5 * (matrices + matrices.conj().transpose(0, 2, 1))
    if degenerate.any():
        logger.debug("SCM: %d frequencies with zero mask weight", int(degenerate.sum()))
    return Scm(matrices, degenerate)


def mvdr_weights(target: Scm, interference: Scm, ref_channel: int = 0,
                 loading: float = 1e-6):
    """Reference-channel MVDR filter per frequency.

    w(f) = inv(Phi_int) Phi_tgt e_ref / trace(inv(Phi_int) Phi_tgt).
    Returns ``(weights, flagged)``; weights has shape (bins, channels) and
    frequencies with a vanishing trace get zero weights and are flagged.
    """
    tgt = target.matrices
    intf = interference.matrices
    if tgt.shape != intf.shape:
        raise InvalidInputError(f"SCM shapes differ: {tgt.shape} vs {intf.shape}")
    bins, channels, _ = tgt.shape
    if not 0 <= ref_channel < channels:
        raise InvalidInputError(f"reference channel {ref_channel} out of range")
    if channels == 1:
        return np.ones((bins, 1), dtype=np.complex128), np.zeros(bins, dtype=bool)

    trace_int = np.real(np.trace(intf, axis1=1, axis2=2))
    ridge = loading * trace_int / channels
    eye = np.eye(channels)
    loaded = intf + ridge[:, None, None] * eye
    # singular frequencies fall back to the pseudo-inverse
    try:
        numerator = np.linalg.solve(loaded, tgt)
    except np.linalg.LinAlgError:
        numerator = np.stack([np.linalg.pinv(loaded[f]) @ tgt[f] for f in range(bins)])
    trace = np.trace(numerator, axis1=1, axis2=2)
    trace_tgt = np.real(np.trace(tgt, axis1=1, axis2=2))
    # for PSD inputs |trace| >= tr(tgt) / tr(loaded int); far below that is numerical zero
    expected = trace_tgt / np.maximum(trace_int + channels * ridge, 1e-300)
    flagged = ~np.isfinite(trace) | (trace_tgt <= 0) | (np.abs(trace) <= 1e-12 * expected)
    flagged |= target.degenerate
    safe = np.where(flagged, 1.0, trace)
    weights = numerator[:, :, ref_channel] / safe[:, None]
    weights[flagged] = 0
    return weights, flagged


def beamform(s: Spectrogram, weights) -> Spectrogram:
    """Apply y(t, f) = w(f)^H x(t, f)."""
    weights = np.asarray(weights)
    if weights.shape != (s.bins.shape[2], s.channels):
        raise InvalidInputError(
            f"weights shape {weights.shape}, expected {(s.bins.shape[2], s.channels)}")
    y = np.einsum("fc,ctf->tf", weights.conj(), s.bins)
    return Spectrogram(y[None], s.config, s.sample_rate, s.frame_offset)


@dataclass
class CssResult:
    """Separated streams plus the bookkeeping written to the JSON sidecar."""

    streams: list[Waveform]
    masks: MaskSet
    block_starts: list[int]
    permutations: list[tuple[int, ...]]
    flagged_bins: list[int] = field(default_factory=list)

    def sidecar(self) -> dict:
        return {
            "num_streams": len(self.streams),
            "block_starts": list(self.block_starts),
            "permutations": [list(p) for p in self.permutations],
            "total_frames": int(self.masks.frames),
            "flagged_bins": list(self.flagged_bins),
        }


def interference_mask(masks: MaskSet, target: int) -> np.ndarray:
    """All other speakers plus noise, clamped to [0, 1]."""
    others = masks.speech_masks.sum(axis=0) - masks.speech_masks[target]
    return np.clip(others + masks.noise_mask, 0.0, 1.0)


def estimate_blocks(spec: Spectrogram, estimator: MaskEstimator, cfg: CssConfig):
    """Run the estimator block-wise and chain the permutation alignment.

    Returns (stitched masks, block starts, applied permutations).
    """
    starts = block_starts(spec.frames, cfg.segment_frames, cfg.overlap_frames)
    ref_mag = np.abs(spec.bins[cfg.ref_channel if spec.channels > 1 else 0])
    aligned, perms = [], []
    prev_start, prev = None, None
    for start in starts:
        stop = min(start + cfg.segment_frames, spec.frames)
        masks = estimator.estimate(spec.block(start, stop))
        if masks.num_streams != cfg.num_streams:
            raise InvalidInputError(
                f"estimator returned {masks.num_streams} streams, expected {cfg.num_streams}")
        if masks.frames != stop - start:
            raise InvalidInputError(
                f"estimator returned {masks.frames} frames for a {stop - start}-frame block")
        if prev is None:
            perm = tuple(range(cfg.num_streams))
        else:
            overlap = prev_start + prev.frames - start
            perm = align_adjacent(prev, masks, overlap, ref_mag[start:start + overlap])
        masks = masks.permuted(perm)
        aligned.append((start, masks))
        perms.append(perm)
        prev_start, prev = start, masks
    return stitch(aligned), starts, perms


def css_pipeline(mixture: Waveform, estimator: MaskEstimator,
                 cfg: CssConfig = CssConfig()) -> CssResult:
    """Separate ``mixture`` into ``cfg.num_streams`` waveforms of equal length."""
    if cfg.mode == SINGLE_CHANNEL and mixture.channels != 1:
        raise InvalidInputError(
            f"single-channel mode needs a mono mixture, got {mixture.channels} channels")
    if cfg.mode == MULTI_CHANNEL and not 0 <= cfg.ref_channel < mixture.channels:
        raise InvalidInputError(f"reference channel {cfg.ref_channel} out of range")
    spec = padded_stft(mixture, cfg.stft)
    masks, starts, perms = estimate_blocks(spec, estimator, cfg)

    streams, flagged_bins = [], set()
    for i in range(cfg.num_streams):
        if cfg.mode == SINGLE_CHANNEL:
            out = apply_mask(spec, masks.speech_masks[i])
        else:
            tgt = compute_scm(spec, masks.speech_masks[i])
            intf = compute_scm(spec, interference_mask(masks, i))
            weights, flagged = mvdr_weights(tgt, intf, cfg.ref_channel, cfg.diagonal_loading)
            flagged_bins.update(np.flatnonzero(flagged).tolist())
            out = beamform(spec, weights)
        streams.append(trimmed_istft(out, mixture.num_samples))
    return CssResult(streams, masks, starts, perms, sorted(flagged_bins))


def write_streams(result: CssResult, out_dir, meeting_id: str) -> list[Path]:
    """Write ``<meeting_id>_stream<k>.wav`` files and a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, stream in enumerate(result.streams):
        paths.append(write_wav(out_dir / f"{meeting_id}_stream{k}.wav", stream))
    sidecar = out_dir / f"{meeting_id}_css.json"
    sidecar.write_text(json.dumps(result.sidecar(), indent=2))
    return paths


class OracleIrmEstimator:
    """Ideal ratio masks computed from a simulated bundle's components.

    Mask for speaker i is |S_i| / (sum_j |S_j| + |S_noise| + eps) with S_i the
    STFT of speaker i's direct+early component on ``channel``. With
    ``shuffle_seed`` set, each block's speech masks come back in a random
    order, which mimics the arbitrary output order of a trained network.
    """

    concurrent_safe = True

    def __init__(self, bundle, cfg: StftConfig = StftConfig(), channel: int = 0,
                 eps: float = 1e-10, num_streams: int | None = None,
                 shuffle_seed: int | None = None):
        sources = [padded_stft(w.channel(channel), cfg).magnitude[0]
                   for w in bundle.direct_early]
        noise = padded_stft(bundle.noise.channel(channel), cfg).magnitude[0]
        num_streams = num_streams or len(sources)
        if num_streams < len(sources):
            raise InvalidInputError(
                f"{len(sources)} speakers do not fit in {num_streams} streams")
        sources += [np.zeros_like(noise)] * (num_streams - len(sources))
        stacked = np.stack(sources)
        denom = stacked.sum(axis=0) + noise + eps
        self.speech = stacked / denom
        self.noise = noise / denom
        self.shuffle_seed = shuffle_seed

    def estimate(self, segment: Spectrogram) -> MaskSet:
        lo = segment.frame_offset
        hi = lo + segment.frames
        if hi > self.speech.shape[1]:
            raise InvalidInputError("segment lies outside the oracle's frame range")
        masks = MaskSet(self.speech[:, lo:hi], self.noise[lo:hi])
        if self.shuffle_seed is not None:
            rng = np.random.default_rng([self.shuffle_seed, lo])
            masks = masks.permuted(rng.permutation(masks.num_streams))
        return masks
