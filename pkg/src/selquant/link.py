"""Link budget: channel gains, SNR, bit/packet error rates, and MCS bookkeeping.

The number of information bits a sensor can fit in its slot fixes its
modulation order and code rate, so precision (quantizer bits) trades off
directly against codeword protection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import erfc

from .util import as_rng

_MODULATION_BITS = (1, 2, 4, 6, 8)  # BPSK, QPSK, 16/64/256-QAM
DEFAULT_MAX_RATE = 0.93


@dataclass
class SlotConfig:
    """One scheduling slot: duration (s), bandwidth (Hz), noise density (W/Hz)."""

    slot_duration: float = 71.4e-6
    slot_bandwidth: float = 15e3
    noise_density: float = 10 ** (-174.0 / 10.0) * 1e-3  # -174 dBm/Hz in W/Hz

    def __post_init__(self):
        if min(self.slot_duration, self.slot_bandwidth, self.noise_density) <= 0:
            raise ValueError("slot parameters must be strictly positive")

    @property
    def symbols_per_slot(self) -> float:
        return self.slot_duration * self.slot_bandwidth


@dataclass(frozen=True)
class McsEntry:
    """Modulation-and-coding point: info bits carried, bits/symbol, code rate."""

    info_bits: int
    modulation_bits: int
    code_rate: float

    def __post_init__(self):
        if self.modulation_bits not in _MODULATION_BITS:
            raise ValueError(f"unsupported modulation order {self.modulation_bits}")
        if not (0.0 < self.code_rate <= 1.0):
            raise ValueError("code rate must lie in (0, 1]")
        if self.info_bits < 1:
            raise ValueError("info_bits must be >= 1")


def validate_mcs_table(table: list[McsEntry], slot: SlotConfig) -> None:
    """Each entry must reproduce its info-bit count from symbols * rate * order."""
    sym = slot.symbols_per_slot
    for entry in table:
        implied = round(sym * entry.code_rate * entry.modulation_bits)
        if implied != entry.info_bits:
            raise ValueError(
                f"MCS entry n={entry.info_bits} inconsistent: "
                f"round({sym:.6g} * {entry.code_rate:.6g} * {entry.modulation_bits}) = {implied}"
            )
    bits = [e.info_bits for e in table]
    if bits != list(range(1, len(table) + 1)):
        raise ValueError("MCS table must cover info bits 1..B in order")


def default_mcs_table(slot: SlotConfig | None = None, max_bits: int = 8,
                      max_rate: float = DEFAULT_MAX_RATE) -> list[McsEntry]:
    """One entry per info-bit count, smallest modulation order with rate <= max_rate.

    When no standard order admits an exact-rate entry (n = 8 with ~1.07
    symbols/slot), the rate is capped at max_rate; the slot rounding still has
    to recover n or the table is rejected.
    """
    slot = slot or SlotConfig()
    sym = slot.symbols_per_slot
    table = []
    for n in range(1, max_bits + 1):
        for order in _MODULATION_BITS:
            rate = n / (sym * order)
            if rate <= max_rate:
                table.append(McsEntry(n, order, rate))
                break
        else:
            table.append(McsEntry(n, _MODULATION_BITS[-1], max_rate))
    validate_mcs_table(table, slot)
    return table


def save_mcs_table(table: list[McsEntry], path) -> None:
    lines = ["# info_bits modulation_bits code_rate"]
    for e in table:
        lines.append(f"{e.info_bits} {e.modulation_bits} {e.code_rate:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_mcs_table(path, slot: SlotConfig | None = None) -> list[McsEntry]:
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        n, order, rate = line.split()
        entries.append(McsEntry(int(n), int(order), float(rate)))
    entries.sort(key=lambda e: e.info_bits)
    validate_mcs_table(entries, slot or SlotConfig())
    return entries


def packaged_mcs_path() -> Path:
    """Location of the shipped default MCS table file."""
    return Path(resources.files("selquant.data") / "mcs_default.txt")


def gaussian_tail(x):
    """P(N(0,1) > x)."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def raw_ber(rho, modulation_bits: int):
    """Uncoded AWGN bit error rate at symbol SNR rho for a Gray-mapped scheme.

    Exact for BPSK/QPSK; nearest-neighbour approximation for square QAM.
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("SNR must be nonnegative")
    if modulation_bits == 1:
        out = gaussian_tail(np.sqrt(2.0 * rho))
    elif modulation_bits == 2:
        out = gaussian_tail(np.sqrt(rho))
    elif modulation_bits in (4, 6, 8):
        m = 2**modulation_bits
        pref = (4.0 / modulation_bits) * (1.0 - 1.0 / math.sqrt(m))
        out = pref * gaussian_tail(np.sqrt(3.0 * rho / (m - 1)))
    else:
        raise ValueError(f"unsupported modulation order {modulation_bits}")
    return float(out) if out.ndim == 0 else out


def raw_per(ber, coded_bits):
    """Packet error rate before decoding: 1 - (1 - ber)**coded_bits."""
    ber = np.asarray(ber, dtype=float)
    if np.any((ber < 0) | (ber > 1)):
        raise ValueError("bit error rate must lie in [0, 1]")
    out = 1.0 - np.power(1.0 - ber, coded_bits)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CodingModel:
    """Maps raw packet error rate to post-decoding rate; never worse than raw.

    identity: no coding gain. waterfall: per_raw**(scale/rate), so lower-rate
    codes (more redundancy) steepen the cliff; scale >= 1 keeps output <= input.
    """

    name: str = "waterfall"
    scale: float = 1.0

    def __post_init__(self):
        if self.name not in ("identity", "waterfall"):
            raise ValueError(f"unknown coding model '{self.name}'")
        if self.name == "waterfall" and self.scale < 1.0:
            raise ValueError("waterfall scale must be >= 1")

    def __call__(self, per_raw, rate: float):
        per_raw = np.asarray(per_raw, dtype=float)
        if self.name == "identity":
            out = per_raw.copy()
        else:
            out = np.power(per_raw, self.scale / rate)
        out = np.clip(out, 0.0, 1.0)
        assert np.all(out <= per_raw + 1e-12), "coding model must not increase PER"
        return float(out) if out.ndim == 0 else out


def coded_per(per_raw, mcs: McsEntry, coding_model: CodingModel):
    """Post-decoding packet error rate for the given MCS point."""
    return coding_model(per_raw, mcs.code_rate)


def channel_gain(distance, decay_exponent: float, fading_power: float = 1.0,
                 fading_mode: str = "deterministic", rng_seed=None):
    """Power-law path gain distance**-alpha * fading_power.

    In 'exponential' mode each gain is additionally multiplied by a unit-mean
    exponential fading draw (Rayleigh amplitude).
    """
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise ValueError("distance must be strictly positive")
    if decay_exponent <= 0:
        raise ValueError("decay exponent must be positive")
    gain = np.power(distance, -decay_exponent) * fading_power
    if fading_mode == "exponential":
        rng = as_rng(rng_seed)
        gain = gain * rng.exponential(1.0, size=gain.shape if gain.ndim else None)
    elif fading_mode != "deterministic":
        raise ValueError(f"unknown fading mode '{fading_mode}'")
    return float(gain) if np.ndim(gain) == 0 else gain


def snr(gain, tx_power, slot: SlotConfig):
    """Received symbol SNR gain * power / (bandwidth * noise density)."""
    out = np.asarray(gain, dtype=float) * np.asarray(tx_power, dtype=float)
    out = out / (slot.slot_bandwidth * slot.noise_density)
    return float(out) if out.ndim == 0 else out


def power_consumed(selection, power) -> float:
    """Total transmit power of the selected sensors, tr(V P V^T)."""
    indices = getattr(selection, "selected", selection)
    power = np.asarray(power, dtype=float)
    if power.ndim == 2:
        power = np.diag(power)
    idx = np.asarray(list(indices), dtype=int)
    if idx.size == 0:
        return 0.0
    return float(np.sum(power[idx]))


@dataclass
class LinkProfile:
    """Per-sensor channel state plus PER as a function of the info-bit choice."""

    gains: np.ndarray
    tx_power: np.ndarray
    snr: np.ndarray
    per_raw_table: np.ndarray  # (M, B); column b-1 holds PER_raw at b info bits
    per_table: np.ndarray      # (M, B); post-decoding PER
    mcs_table: list[McsEntry]
    slot: SlotConfig
    coding: CodingModel

    @property
    def max_bits(self) -> int:
        return len(self.mcs_table)

    @property
    def power_matrix(self) -> np.ndarray:
        return np.diag(self.tx_power)

    def per_for_bits(self, sensors, bits) -> np.ndarray:
        sensors = np.asarray(sensors, dtype=int)
        bits = np.asarray(bits, dtype=int)
        return self.per_table[sensors, bits - 1]


def build_link_profile(gains, tx_power, slot: SlotConfig | None = None,
                       mcs_table: list[McsEntry] | None = None,
                       coding: CodingModel | None = None) -> LinkProfile:
    """Precompute SNR and the full (sensor, bits) -> PER tables for a scenario."""
    slot = slot or SlotConfig()
    mcs_table = mcs_table or default_mcs_table(slot)
    coding = coding or CodingModel()
    validate_mcs_table(mcs_table, slot)
    gains = np.atleast_1d(np.asarray(gains, dtype=float))
    tx_power = np.broadcast_to(np.asarray(tx_power, dtype=float), gains.shape).copy()
    rho = snr(gains, tx_power, slot)
    m = gains.shape[0]
    b = len(mcs_table)
    per_raw_table = np.empty((m, b))
    per_table = np.empty((m, b))
    for j, entry in enumerate(mcs_table):
        coded_bits = slot.symbols_per_slot * entry.modulation_bits
        ber = raw_ber(rho, entry.modulation_bits)
        per_raw_table[:, j] = raw_per(ber, coded_bits)
        per_table[:, j] = coding(per_raw_table[:, j], entry.code_rate)
    return LinkProfile(gains=gains, tx_power=tx_power, snr=rho,
                       per_raw_table=per_raw_table, per_table=per_table,
                       mcs_table=mcs_table, slot=slot, coding=coding)
