"""Multi-view feature normalization: payload integers, fixed-length sequences and framed spectra."""

from typing import Sequence

import numpy as np

from config import NormConfig
from data_models import FlowRecord, NormalizedViews, View


def normalize_payload(payload: bytes, L_pay: int) -> np.ndarray:
    """Truncate or zero-pad payload bytes to ``L_pay`` integer values in [0, 255]."""
    vec = np.zeros(L_pay, dtype=np.int64)
    head = np.frombuffer(payload[:L_pay], dtype=np.uint8)
    vec[:head.size] = head
    return vec


def truncate_or_pad(seq: Sequence[float], L: int) -> np.ndarray:
    """Prefix-preserving truncation or trailing zero-pad to exactly ``L`` values."""
    vec = np.zeros(L, dtype=np.float64)
    head = np.asarray(seq[:L], dtype=np.float64)
    vec[:head.size] = head
    return vec


def frame_dft_amplitudes(frame: Sequence[float]) -> np.ndarray:
    """Amplitude spectrum of one frame, first floor(W/2) bins (DC first)."""
    frame = np.asarray(frame, dtype=np.float64)
    k_f = frame.size // 2
    return np.abs(np.fft.fft(frame))[:k_f]


def spectral_profile(seq: Sequence[float], L: int, W_seg: int) -> np.ndarray:
    """Mean-pooled framed amplitude spectrum of ``seq`` normalized to length ``L``.

    The sequence is cut into ceil(L / W_seg) non-overlapping frames; the last
    frame is zero-padded to W_seg.
    """
    vec = truncate_or_pad(seq, L)
    n_frames = -(-L // W_seg)
    framed = np.zeros(n_frames * W_seg, dtype=np.float64)
    framed[:L] = vec
    frames = framed.reshape(n_frames, W_seg)
    spectra = np.abs(np.fft.fft(frames, axis=1))[:, :W_seg // 2]
    return spectra.mean(axis=0)


def normalize_flow(flow: FlowRecord, cfg: NormConfig) -> NormalizedViews:
    """Convert a flow into its NormalizedViews under ``cfg``."""
    present = set()
    if flow.payload:
        present.add(View.PAYLOAD)
    if flow.pkt_lengths:
        present.add(View.LENGTH)
    if flow.iat_seconds:
        present.add(View.TIME)

    return NormalizedViews(
        payload_vec=normalize_payload(flow.payload, cfg.L_pay),
        len_time_vec=truncate_or_pad(flow.pkt_lengths, cfg.L_len),
        iat_time_vec=truncate_or_pad(flow.iat_seconds, cfg.L_time),
        len_freq_vec=spectral_profile(flow.pkt_lengths, cfg.L_len, cfg.W_seg),
        iat_freq_vec=spectral_profile(flow.iat_seconds, cfg.L_time, cfg.W_seg),
        views_present=frozenset(present),
    )
